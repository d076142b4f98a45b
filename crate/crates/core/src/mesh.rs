//! Uniform triangulations of axis-aligned rectangles.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Axis-aligned rectangle [x0,x1]×[y0,y1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Self { x0, x1, y0, y1 }
    }

    pub fn unit_square() -> Self {
        Self::new(0.0, 1.0, 0.0, 1.0)
    }

    /// [-a, a]²
    pub fn centered_square(a: f64) -> Self {
        Self::new(-a, a, -a, a)
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    /// Longest side length.
    pub fn side(&self) -> f64 {
        (self.x1 - self.x0).max(self.y1 - self.y0)
    }
}

/// Structured triangulation: every cell is split along its lower-left to
/// upper-right diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    rect: Rect,
    nx: usize,
    ny: usize,
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(rect: Rect, nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return invalid(format!("cell counts must be positive, got {nx}×{ny}"));
        }
        if !(rect.x1 > rect.x0 && rect.y1 > rect.y0) || !rect.area().is_finite() {
            return invalid(format!("degenerate rectangle {rect:?}"));
        }
        let hx = (rect.x1 - rect.x0) / nx as f64;
        let hy = (rect.y1 - rect.y0) / ny as f64;
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push([rect.x0 + i as f64 * hx, rect.y0 + j as f64 * hy]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let v00 = j * (nx + 1) + i;
                let v10 = v00 + 1;
                let v01 = v00 + nx + 1;
                let v11 = v01 + 1;
                triangles.push([v00, v10, v11]);
                triangles.push([v00, v11, v01]);
            }
        }
        Ok(Self {
            rect,
            nx,
            ny,
            vertices,
            triangles,
        })
    }

    pub fn rect(&self) -> Rect {
        self.rect
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn ny(&self) -> usize {
        self.ny
    }
    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }
    pub fn hx(&self) -> f64 {
        (self.rect.x1 - self.rect.x0) / self.nx as f64
    }
    pub fn hy(&self) -> f64 {
        (self.rect.y1 - self.rect.y0) / self.ny as f64
    }

    /// Mesh width: the cell diagonal.
    pub fn width(&self) -> f64 {
        self.hx().hypot(self.hy())
    }

    pub fn vertex_index(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    /// Triangle index of cell (i, j), `upper` selecting the second half.
    pub fn triangle_index(&self, i: usize, j: usize, upper: bool) -> usize {
        2 * (j * self.nx + i) + upper as usize
    }

    pub fn signed_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|v| self.vertices[v]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    /// Containing triangle and barycentric coordinates of a point inside the rectangle.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        let eps = 1e-12 * self.rect.side();
        let r = self.rect;
        if p[0] < r.x0 - eps || p[0] > r.x1 + eps || p[1] < r.y0 - eps || p[1] > r.y1 + eps {
            return None;
        }
        let sx = ((p[0] - r.x0) / self.hx()).clamp(0.0, self.nx as f64);
        let sy = ((p[1] - r.y0) / self.hy()).clamp(0.0, self.ny as f64);
        let i = (sx.floor() as usize).min(self.nx - 1);
        let j = (sy.floor() as usize).min(self.ny - 1);
        let (fx, fy) = (sx - i as f64, sy - j as f64);
        // Local coordinates in the cell; the diagonal is fy = fx.
        if fy <= fx {
            // lower triangle (v00, v10, v11)
            Some((self.triangle_index(i, j, false), [1.0 - fx, fx - fy, fy]))
        } else {
            // upper triangle (v00, v11, v01)
            Some((self.triangle_index(i, j, true), [1.0 - fy, fx, fy - fx]))
        }
    }
}
