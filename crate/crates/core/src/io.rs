//! Field exports (legacy VTK structured points, CSV) and raw vector files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::field::Field;

fn write_text(path: &Path, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Per-component densities |u_c|² on the DOF lattice, ordered row by row.
pub fn lattice_densities(field: &Field) -> Vec<Vec<f64>> {
    let space = field.space();
    let [nx, ny] = space.lattice_dims();
    (0..field.flavor().components())
        .map(|c| {
            let rho = field.density(c);
            let mut grid = vec![0.0; nx * ny];
            for (d, &[i, j]) in space.lattice().iter().enumerate() {
                grid[j * nx + i] = rho[d];
            }
            grid
        })
        .collect()
}

/// Densities as legacy-VTK STRUCTURED_POINTS with one float64 scalar per component.
pub fn write_density_vtk(field: &Field, path: &Path) -> Result<()> {
    let space = field.space();
    let [nx, ny] = space.lattice_dims();
    let r = space.mesh().rect();
    let dx = (r.x1 - r.x0) / (nx - 1) as f64;
    let dy = (r.y1 - r.y0) / (ny - 1) as f64;
    let mut s = String::new();
    let _ = writeln!(s, "# vtk DataFile Version 3.0");
    let _ = writeln!(s, "condensate densities");
    let _ = writeln!(s, "ASCII");
    let _ = writeln!(s, "DATASET STRUCTURED_POINTS");
    let _ = writeln!(s, "DIMENSIONS {nx} {ny} 1");
    let _ = writeln!(s, "ORIGIN {:e} {:e} 0", r.x0, r.y0);
    let _ = writeln!(s, "SPACING {dx:e} {dy:e} 1");
    let _ = writeln!(s, "POINT_DATA {}", nx * ny);
    for (c, grid) in lattice_densities(field).iter().enumerate() {
        let _ = writeln!(s, "SCALARS rho{} double 1", c + 1);
        let _ = writeln!(s, "LOOKUP_TABLE default");
        for v in grid {
            let _ = writeln!(s, "{v:.17e}");
        }
    }
    write_text(path, &s)
}

/// Densities as CSV: x, y, rho1[, rho2].
pub fn write_density_csv(field: &Field, path: &Path) -> Result<()> {
    let space = field.space();
    let comps = field.flavor().components();
    let rho: Vec<Vec<f64>> = (0..comps).map(|c| field.density(c)).collect();
    let mut s = String::from("x,y");
    for c in 0..comps {
        let _ = write!(s, ",rho{}", c + 1);
    }
    s.push('\n');
    let mut order: Vec<usize> = (0..space.ndof()).collect();
    order.sort_by_key(|&d| {
        let [i, j] = space.lattice()[d];
        (j, i)
    });
    for d in order {
        let [x, y] = space.dof_coords()[d];
        let _ = write!(s, "{x:.17e},{y:.17e}");
        for r in &rho {
            let _ = write!(s, ",{:.17e}", r[d]);
        }
        s.push('\n');
    }
    write_text(path, &s)
}

const VEC_MAGIC: &[u8; 8] = b"MDGSVEC1";

/// Raw little-endian f64 vector with a magic and a length prefix.
pub fn write_vector(path: &Path, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 8 * v.len());
    buf.extend_from_slice(VEC_MAGIC);
    buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[..8] != VEC_MAGIC {
        return invalid(format!("{} is not a vector file", path.display()));
    }
    let n = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    if buf.len() != 16 + 8 * n {
        return invalid(format!("{} is truncated", path.display()));
    }
    Ok(buf[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{Mesh, Rect};
    use crate::space::FeSpace;
    use std::sync::Arc;

    #[test]
    fn vector_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.bin");
        let v = vec![1.0, -2.5, f64::MIN_POSITIVE];
        write_vector(&p, &v).unwrap();
        assert_eq!(read_vector(&p).unwrap(), v);
        std::fs::write(&p, b"MDGSVEC1\x05\0\0\0\0\0\0\0").unwrap();
        assert!(read_vector(&p).is_err());
    }

    #[test]
    fn density_grid_has_lattice_shape() {
        let s = Arc::new(FeSpace::new(Mesh::new(Rect::unit_square(), 3, 3).unwrap(), 2).unwrap());
        let f = Field::interpolate_real(s, &|x| x[0] * (1.0 - x[0]));
        let g = lattice_densities(&f);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].len(), 49);
        // Row j = 0 is the boundary y = 0, where the field vanishes.
        assert!(g[0][..7].iter().all(|v| *v == 0.0));
        let dir = tempfile::tempdir().unwrap();
        write_density_vtk(&f, &dir.path().join("d.vtk")).unwrap();
        write_density_csv(&f, &dir.path().join("d.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
        assert_eq!(csv.lines().count(), 50);
    }
}
