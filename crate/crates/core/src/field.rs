//! Discrete function spaces and the maps between analytic data and the grid.
//!
//! * [`CellField`]: piecewise constants on primal cells (density, pressure).
//! * [`FaceField`]: piecewise constants on the dual cells of one direction
//!   (a velocity component). Values are stored for every face of that
//!   direction including exterior ones; homogeneous Dirichlet fields keep
//!   exact zeros there.
//! * [`VelocityField`]: one [`FaceField`] per direction.
//!
//! Projections: `project_cells` (cell means), `project_faces_mean`
//! (dual-cell means), `fortin_interpolate` (face means, the interpolant
//! that commutes with the discrete divergence) and `interpolate_phi`
//! (cell-center sampling). Reconstructions move face data onto the faces of
//! another direction (`reconstruct_face`) or onto cells (`reconstruct_cell`).

use crate::grid::MacGrid;
use crate::quad::{integrate_box, integrate_face};
use std::fmt::Write as _;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("boundary face {face} in direction {dir} has nonzero trace {value:.3e}; the face-mean interpolant requires zero-trace data")]
    BoundaryTrace { dir: usize, face: usize, value: f64 },
}

/// Scalar function of space with a quadrature-order hint.
#[derive(Clone)]
pub struct AnalyticScalar {
    pub f: Arc<dyn Fn(&[f64; 3]) -> f64 + Send + Sync>,
    pub quad_order: usize,
}

impl AnalyticScalar {
    pub fn new(f: impl Fn(&[f64; 3]) -> f64 + Send + Sync + 'static) -> Self {
        AnalyticScalar { f: Arc::new(f), quad_order: 5 }
    }

    pub fn with_order(mut self, order: usize) -> Self {
        self.quad_order = order;
        self
    }

    pub fn constant(c: f64) -> Self {
        AnalyticScalar::new(move |_| c)
    }

    pub fn eval(&self, x: &[f64; 3]) -> f64 {
        (self.f)(x)
    }
}

/// Vector function of space, one scalar component per direction.
#[derive(Clone)]
pub struct AnalyticVector {
    pub comps: Vec<AnalyticScalar>,
}

impl AnalyticVector {
    pub fn new(comps: Vec<AnalyticScalar>) -> Self {
        AnalyticVector { comps }
    }

    pub fn constant(v: &[f64]) -> Self {
        AnalyticVector { comps: v.iter().map(|&c| AnalyticScalar::constant(c)).collect() }
    }

    pub fn dim(&self) -> usize {
        self.comps.len()
    }
}

/// Piecewise constant scalar on the active primal cells.
#[derive(Clone)]
pub struct CellField {
    pub grid: Arc<MacGrid>,
    pub values: Vec<f64>,
}

impl CellField {
    pub fn zeros(grid: &Arc<MacGrid>) -> Self {
        CellField { grid: grid.clone(), values: vec![0.0; grid.n_cells()] }
    }

    pub fn constant(grid: &Arc<MacGrid>, c: f64) -> Self {
        CellField { grid: grid.clone(), values: vec![c; grid.n_cells()] }
    }

    pub fn from_values(grid: &Arc<MacGrid>, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid.n_cells());
        CellField { grid: grid.clone(), values }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> CellField {
        CellField { grid: self.grid.clone(), values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn axpy(&mut self, alpha: f64, other: &CellField) {
        debug_assert!(Arc::ptr_eq(&self.grid, &other.grid));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    /// Volume-weighted integral over the domain.
    pub fn integral(&self) -> f64 {
        self.values.iter().zip(&self.grid.cells).map(|(v, c)| v * c.measure).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.grid.cells)
            .map(|(v, c)| v * v * c.measure)
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm_lp(&self, p: f64) -> f64 {
        self.values
            .iter()
            .zip(&self.grid.cells)
            .map(|(v, c)| v.abs().powf(p) * c.measure)
            .sum::<f64>()
            .powf(1.0 / p)
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    /// CSV with header `id,x,y[,z],value`, cells in id order.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(if self.grid.dim == 2 { "id,x,y,value\n" } else { "id,x,y,z,value\n" });
        for (id, (v, c)) in self.values.iter().zip(&self.grid.cells).enumerate() {
            write_point(&mut s, id, &c.center, self.grid.dim, *v);
        }
        s
    }
}

/// Piecewise constant scalar on the dual cells of one direction.
#[derive(Clone)]
pub struct FaceField {
    pub grid: Arc<MacGrid>,
    pub dir: usize,
    pub values: Vec<f64>,
    /// True for members of the zero-trace space: exterior faces hold exact
    /// zeros and stay zero under the lattice operations.
    pub zero_boundary: bool,
}

impl FaceField {
    pub fn zeros(grid: &Arc<MacGrid>, dir: usize) -> Self {
        FaceField {
            grid: grid.clone(),
            dir,
            values: vec![0.0; grid.n_faces(dir)],
            zero_boundary: true,
        }
    }

    pub fn from_values(grid: &Arc<MacGrid>, dir: usize, values: Vec<f64>, zero_boundary: bool) -> Self {
        assert_eq!(values.len(), grid.n_faces(dir));
        let f = FaceField { grid: grid.clone(), dir, values, zero_boundary };
        debug_assert!(!zero_boundary || f.boundary_is_zero());
        f
    }

    pub fn boundary_is_zero(&self) -> bool {
        self.grid.faces[self.dir]
            .iter()
            .zip(&self.values)
            .all(|(f, &v)| f.interior() || v == 0.0)
    }

    /// Fill interior faces from a function of the face id; exterior faces
    /// stay zero.
    pub fn from_interior(grid: &Arc<MacGrid>, dir: usize, f: impl Fn(usize) -> f64) -> Self {
        let values = grid.faces[dir]
            .iter()
            .enumerate()
            .map(|(id, face)| if face.interior() { f(id) } else { 0.0 })
            .collect();
        FaceField { grid: grid.clone(), dir, values, zero_boundary: true }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FaceField {
        FaceField {
            grid: self.grid.clone(),
            dir: self.dir,
            values: self.values.iter().map(|&v| f(v)).collect(),
            zero_boundary: false,
        }
    }

    pub fn axpy(&mut self, alpha: f64, other: &FaceField) {
        debug_assert!(Arc::ptr_eq(&self.grid, &other.grid) && self.dir == other.dir);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        self.zero_boundary = self.zero_boundary && other.zero_boundary;
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    /// L2 norm over the dual-cell partition of the domain.
    pub fn norm_l2(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.grid.faces[self.dir])
            .map(|(v, f)| v * v * f.dual_measure)
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm_lp(&self, p: f64) -> f64 {
        self.values
            .iter()
            .zip(&self.grid.faces[self.dir])
            .map(|(v, f)| v.abs().powf(p) * f.dual_measure)
            .sum::<f64>()
            .powf(1.0 / p)
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Dual-cell weighted inner product `∫ u v`.
    pub fn dot(&self, other: &FaceField) -> f64 {
        debug_assert!(self.dir == other.dir);
        self.values
            .iter()
            .zip(&other.values)
            .zip(&self.grid.faces[self.dir])
            .map(|((a, b), f)| a * b * f.dual_measure)
            .sum()
    }

    /// CSV with header `id,x,y[,z],value`, faces in id order.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        s.push_str(if self.grid.dim == 2 { "id,x,y,value\n" } else { "id,x,y,z,value\n" });
        for (id, (v, f)) in self.values.iter().zip(&self.grid.faces[self.dir]).enumerate() {
            write_point(&mut s, id, &f.center, self.grid.dim, *v);
        }
        s
    }
}

fn write_point(s: &mut String, id: usize, x: &[f64; 3], dim: usize, v: f64) {
    write!(s, "{}", id).unwrap();
    for a in 0..dim {
        write!(s, ",{:.16e}", x[a]).unwrap();
    }
    writeln!(s, ",{:.16e}", v).unwrap();
}

/// Velocity: one face field per direction, sharing a grid.
#[derive(Clone)]
pub struct VelocityField {
    pub comps: Vec<FaceField>,
}

impl VelocityField {
    pub fn zeros(grid: &Arc<MacGrid>) -> Self {
        VelocityField { comps: (0..grid.dim).map(|d| FaceField::zeros(grid, d)).collect() }
    }

    pub fn new(comps: Vec<FaceField>) -> Self {
        debug_assert!(comps.windows(2).all(|w| Arc::ptr_eq(&w[0].grid, &w[1].grid)));
        debug_assert!(comps.iter().enumerate().all(|(d, c)| c.dir == d));
        VelocityField { comps }
    }

    pub fn grid(&self) -> &Arc<MacGrid> {
        &self.comps[0].grid
    }

    pub fn dim(&self) -> usize {
        self.comps.len()
    }

    pub fn axpy(&mut self, alpha: f64, other: &VelocityField) {
        for (a, b) in self.comps.iter_mut().zip(&other.comps) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for c in &mut self.comps {
            c.scale(alpha);
        }
    }

    pub fn norm_l2(&self) -> f64 {
        self.comps.iter().map(|c| c.norm_l2().powi(2)).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.comps.iter().map(|c| c.norm_inf()).fold(0.0, f64::max)
    }

    /// Component-wise dual-cell inner product `∫ u · v`.
    pub fn dot(&self, other: &VelocityField) -> f64 {
        self.comps.iter().zip(&other.comps).map(|(a, b)| a.dot(b)).sum()
    }

    pub fn is_zero_boundary(&self) -> bool {
        self.comps.iter().all(|c| c.zero_boundary)
    }
}

/// Cell-mean projection: average of `q` over each cell by tensor
/// Gauss-Legendre quadrature of the declared order.
pub fn project_cells(q: &AnalyticScalar, grid: &Arc<MacGrid>) -> CellField {
    let n = q.quad_order;
    let values = grid
        .cells
        .iter()
        .map(|c| {
            let mut lo = [0.0; 3];
            let mut hi = [0.0; 3];
            for a in 0..grid.dim {
                lo[a] = c.center[a] - 0.5 * c.lengths[a];
                hi[a] = c.center[a] + 0.5 * c.lengths[a];
            }
            integrate_box(&*q.f, &lo, &hi, grid.dim, n) / c.measure
        })
        .collect();
    CellField { grid: grid.clone(), values }
}

/// Dual-cell mean projection of a vector field: component i is averaged
/// over each interior dual cell of direction i; exterior faces are zero.
pub fn project_faces_mean(v: &AnalyticVector, grid: &Arc<MacGrid>) -> VelocityField {
    assert_eq!(v.dim(), grid.dim);
    let comps = (0..grid.dim)
        .map(|dir| {
            let comp = &v.comps[dir];
            let n = comp.quad_order;
            let values = grid.faces[dir]
                .iter()
                .map(|face| {
                    if !face.interior() {
                        return 0.0;
                    }
                    // integrate over the two half-cells forming the dual cell
                    let mut acc = 0.0;
                    for (cell, keep_upper_half) in
                        [(face.cell_lo, true), (face.cell_hi, false)]
                    {
                        let c = &grid.cells[cell.unwrap()];
                        let mut lo = [0.0; 3];
                        let mut hi = [0.0; 3];
                        for a in 0..grid.dim {
                            lo[a] = c.center[a] - 0.5 * c.lengths[a];
                            hi[a] = c.center[a] + 0.5 * c.lengths[a];
                        }
                        if keep_upper_half {
                            lo[dir] = c.center[dir];
                        } else {
                            hi[dir] = c.center[dir];
                        }
                        acc += integrate_box(&*comp.f, &lo, &hi, grid.dim, n);
                    }
                    acc / face.dual_measure
                })
                .collect();
            FaceField { grid: grid.clone(), dir, values, zero_boundary: true }
        })
        .collect();
    VelocityField { comps }
}

/// Face-mean (divergence-preserving) interpolation of a zero-trace vector
/// field: component i takes the mean of `v_i` over each direction-i face.
/// Rejects data whose boundary face means exceed `1e-10`.
pub fn fortin_interpolate(
    v: &AnalyticVector,
    grid: &Arc<MacGrid>,
) -> Result<VelocityField, FieldError> {
    assert_eq!(v.dim(), grid.dim);
    let mut comps = Vec::with_capacity(grid.dim);
    for dir in 0..grid.dim {
        let comp = &v.comps[dir];
        let n = comp.quad_order;
        let mut values = Vec::with_capacity(grid.n_faces(dir));
        for (fid, face) in grid.faces[dir].iter().enumerate() {
            // the face spans the cross-axes extents of its adjacent cell
            let c = &grid.cells[face.cell_lo.or(face.cell_hi).unwrap()];
            let mut lo = [0.0; 3];
            let mut hi = [0.0; 3];
            for a in 0..grid.dim {
                lo[a] = face.center[a] - 0.5 * c.lengths[a];
                hi[a] = face.center[a] + 0.5 * c.lengths[a];
            }
            let mean = integrate_face(&*comp.f, dir, face.center[dir], &lo, &hi, grid.dim, n)
                / face.measure;
            if face.interior() {
                values.push(mean);
            } else {
                if mean.abs() > 1e-10 {
                    return Err(FieldError::BoundaryTrace { dir, face: fid, value: mean });
                }
                values.push(0.0);
            }
        }
        comps.push(FaceField { grid: grid.clone(), dir, values, zero_boundary: true });
    }
    Ok(VelocityField { comps })
}

/// Point sampling at cell centers.
pub fn interpolate_phi(phi: &AnalyticScalar, grid: &Arc<MacGrid>) -> CellField {
    let values = grid.cells.iter().map(|c| phi.eval(&c.center)).collect();
    CellField { grid: grid.clone(), values }
}

/// Full-grid velocity reconstruction: move a direction-i face field onto
/// the direction-j faces. Identity for j == i; otherwise each interior
/// j-face takes the quarter-weighted sum of the direction-i faces of its
/// two adjacent cells (missing or exterior neighbors count as zero, the
/// divisor stays 4).
pub fn reconstruct_face(v: &FaceField, target_dir: usize) -> FaceField {
    let grid = &v.grid;
    let i = v.dir;
    debug_assert!(v.zero_boundary);
    if target_dir == i {
        return v.clone();
    }
    FaceField::from_interior(grid, target_dir, |sid| {
        let mut acc = 0.0;
        for nb in grid.neighbor_faces(target_dir, sid, i).into_iter().flatten() {
            acc += v.values[nb];
        }
        0.25 * acc
    })
}

/// Cell average of the two direction-i faces of each cell.
pub fn reconstruct_cell(v: &FaceField) -> CellField {
    let grid = &v.grid;
    let values = grid
        .cells
        .iter()
        .map(|c| 0.5 * (v.values[c.faces[v.dir][0]] + v.values[c.faces[v.dir][1]]))
        .collect();
    CellField { grid: grid.clone(), values }
}
