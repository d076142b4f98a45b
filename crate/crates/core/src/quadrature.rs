//! Symmetric triangle quadrature of polynomial degree 6 (12 points).

/// Barycentric points and weights (weights sum to 1; multiply by the area).
#[derive(Debug, Clone)]
pub struct TriangleRule {
    pub points: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
    pub degree: usize,
}

impl TriangleRule {
    pub fn degree6() -> Self {
        let mut points = Vec::with_capacity(12);
        let mut weights = Vec::with_capacity(12);
        let orbit3 = |a: f64, b: f64, w: f64, pts: &mut Vec<[f64; 3]>, ws: &mut Vec<f64>| {
            for p in [[a, b, b], [b, a, b], [b, b, a]] {
                pts.push(p);
                ws.push(w);
            }
        };
        orbit3(
            0.501426509658179,
            0.249286745170910,
            0.116786275726379,
            &mut points,
            &mut weights,
        );
        orbit3(
            0.873821971016996,
            0.063089014491502,
            0.050844906370207,
            &mut points,
            &mut weights,
        );
        let (a, b, c, w) = (
            0.053145049844817,
            0.310352451033784,
            0.636502499121399,
            0.082851075618374,
        );
        for p in [[a, b, c], [b, c, a], [c, a, b], [a, c, b], [c, b, a], [b, a, c]] {
            points.push(p);
            weights.push(w);
        }
        Self {
            points,
            weights,
            degree: 6,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn factorial(n: u32) -> f64 {
        (1..=n).map(|k| k as f64).product()
    }

    #[test]
    fn exact_on_monomials_up_to_degree_six() {
        // ∫_T λ1^a λ2^b λ3^c = 2|T| a! b! c! / (a+b+c+2)!, so the mean over T
        // is 2 a! b! c! / (a+b+c+2)!.
        let rule = TriangleRule::degree6();
        for a in 0..=6u32 {
            for b in 0..=(6 - a) {
                for c in 0..=(6 - a - b) {
                    let q: f64 = rule
                        .points
                        .iter()
                        .zip(&rule.weights)
                        .map(|(p, w)| w * p[0].powi(a as i32) * p[1].powi(b as i32) * p[2].powi(c as i32))
                        .sum();
                    let exact = 2.0 * factorial(a) * factorial(b) * factorial(c) / factorial(a + b + c + 2);
                    assert!((q - exact).abs() < 1e-14, "({a},{b},{c}): {q} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn not_exact_at_degree_eight() {
        let rule = TriangleRule::degree6();
        let q: f64 = rule.points.iter().zip(&rule.weights).map(|(p, w)| w * p[0].powi(8)).sum();
        let exact = 2.0 * factorial(8) / factorial(10);
        assert!((q - exact).abs() > 1e-8);
    }
}
