//! Assembly of the nonlinear discrete system and its continuation variants.
//!
//! The unknowns are a velocity in the zero-trace staggered space and a
//! cell density; the pressure is always recomputed as `rho^gamma`, never
//! stored. The continuation parameter `zeta` scales the convective and
//! pressure terms from a linear elasticity-type problem at 0 to the full
//! scheme at 1. The mass balance carries the zero-order stabilization
//! `cs * h^alpha (rho - rho_star)` which pins the total mass exactly.

use crate::field::{AnalyticVector, CellField, FaceField, VelocityField};
use crate::grid::MacGrid;
use crate::linalg::Csr;
use crate::ops::{
    convective_div, div_cells, dual_density, dual_fluxes, grad_faces, h1_norm, laplacian_faces,
    mass_fluxes, MomentumLayout,
};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("invalid physical parameters: {0}")]
    InvalidParams(String),
}

/// Volume force models. The density-proportional variant re-evaluates the
/// force from the current iterate, so buoyancy feedback enters the sweep.
#[derive(Clone)]
pub enum Forcing {
    /// Fixed vector per unit volume.
    Constant(Vec<f64>),
    /// `f = rho * g` with constant gravity vector g.
    RhoGravity(Vec<f64>),
    /// Arbitrary function, projected by dual-cell means.
    Analytic(AnalyticVector),
    /// Per-cell sampled vector values (one d-vector per active cell).
    CellSampled(Vec<Vec<f64>>),
}

impl Forcing {
    pub fn zero(dim: usize) -> Self {
        Forcing::Constant(vec![0.0; dim])
    }

    /// Dual-cell representation of the force for the current density.
    pub fn dual_field(&self, grid: &Arc<MacGrid>, rho: &CellField) -> VelocityField {
        match self {
            Forcing::Constant(v) => {
                let comps = (0..grid.dim)
                    .map(|d| FaceField::from_interior(grid, d, |_| v[d]))
                    .collect();
                VelocityField::new(comps)
            }
            Forcing::RhoGravity(g) => {
                let comps = (0..grid.dim)
                    .map(|d| {
                        let dd = dual_density(rho, d);
                        FaceField::from_interior(grid, d, |fid| dd[fid] * g[d])
                    })
                    .collect();
                VelocityField::new(comps)
            }
            Forcing::Analytic(v) => crate::field::project_faces_mean(v, grid),
            Forcing::CellSampled(vals) => {
                debug_assert_eq!(vals.len(), grid.n_cells());
                let comps = (0..grid.dim)
                    .map(|d| {
                        FaceField::from_interior(grid, d, |fid| {
                            let f = &grid.faces[d][fid];
                            let (k, l) = (f.cell_lo.unwrap(), f.cell_hi.unwrap());
                            (f.half_lo * vals[k][d] + f.half_hi * vals[l][d]) / f.dual_measure
                        })
                    })
                    .collect();
                VelocityField::new(comps)
            }
        }
    }
}

/// Physical and numerical constants of one run.
#[derive(Clone)]
pub struct SchemeParams {
    pub gamma: f64,
    pub mu: f64,
    pub lambda: f64,
    /// Total fluid mass.
    pub mass: f64,
    /// Stabilization constant.
    pub cs: f64,
    /// Stabilization exponent (> 1).
    pub alpha: f64,
    pub forcing: Forcing,
}

impl SchemeParams {
    pub fn validate(&self, dim: usize) -> Result<(), SchemeError> {
        if !(self.mu > 0.0) {
            return Err(SchemeError::InvalidParams(format!("mu = {} must be positive", self.mu)));
        }
        if self.lambda + 2.0 * self.mu / (dim as f64) < 0.0 {
            return Err(SchemeError::InvalidParams(format!(
                "lambda + 2 mu / d = {} must be nonnegative",
                self.lambda + 2.0 * self.mu / dim as f64
            )));
        }
        if !(self.gamma > 1.0) {
            return Err(SchemeError::InvalidParams(format!(
                "gamma = {} must exceed 1",
                self.gamma
            )));
        }
        if !(self.mass > 0.0) {
            return Err(SchemeError::InvalidParams(format!(
                "total mass = {} must be positive",
                self.mass
            )));
        }
        if !(self.cs > 0.0) {
            return Err(SchemeError::InvalidParams(format!("cs = {} must be positive", self.cs)));
        }
        if !(self.alpha > 1.0) {
            return Err(SchemeError::InvalidParams(format!(
                "alpha = {} must exceed 1",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Mean density `mass / |Omega|`.
    pub fn rho_star(&self, grid: &MacGrid) -> f64 {
        self.mass / grid.volume
    }

    /// Zero-order stabilization coefficient `cs * h^alpha`.
    pub fn stabilization(&self, grid: &MacGrid) -> f64 {
        self.cs * grid.mesh_size().powf(self.alpha)
    }

    /// Stability-driven default: slightly inside the admissible range
    /// `mu eta^6 / (mass diam^(alpha-1))`, capped at the practical value 1.
    pub fn auto_cs(grid: &MacGrid, mu: f64, mass: f64, alpha: f64) -> f64 {
        let diam = {
            let mut acc = 0.0;
            for a in 0..grid.dim {
                let lo = grid.lines[a].first().unwrap();
                let hi = grid.lines[a].last().unwrap();
                acc += (hi - lo) * (hi - lo);
            }
            acc.sqrt()
        };
        let eta = grid.regularity();
        let bound = mu * eta.powi(6) / (mass * diam.powf(alpha - 1.0));
        (0.9 * bound).min(1.0)
    }
}

/// Velocity/density iterate; the pressure is derived.
#[derive(Clone)]
pub struct State {
    pub u: VelocityField,
    pub rho: CellField,
}

impl State {
    pub fn resting(grid: &Arc<MacGrid>, rho_star: f64) -> State {
        State { u: VelocityField::zeros(grid), rho: CellField::constant(grid, rho_star) }
    }

    pub fn pressure(&self, gamma: f64) -> CellField {
        self.rho.map(|r| r.powf(gamma))
    }

    pub fn grid(&self) -> &Arc<MacGrid> {
        &self.rho.grid
    }
}

/// Mass-balance residual at continuation parameter `zeta`, per cell:
/// `zeta div_up(rho u) + cs h^alpha (rho - rho_star) - zeta source`.
pub fn residual_mass(
    s: &State,
    params: &SchemeParams,
    zeta: f64,
    source: Option<&CellField>,
) -> CellField {
    let grid = &s.rho.grid;
    let stab = params.stabilization(grid);
    let rho_star = params.rho_star(grid);
    let mut r = crate::ops::div_upwind(&s.rho, &s.u);
    r.scale(zeta);
    for (val, rho) in r.values.iter_mut().zip(&s.rho.values) {
        *val += stab * (rho - rho_star);
    }
    if let Some(g) = source {
        r.axpy(-zeta, g);
    }
    r
}

/// Momentum-balance residual at continuation parameter `zeta`, per
/// interior dual cell.
pub fn residual_momentum(s: &State, params: &SchemeParams, zeta: f64) -> VelocityField {
    let grid = s.u.grid();
    let mut r = convective_div(&s.rho, &s.u);
    r.scale(zeta);
    let mut p = s.pressure(params.gamma);
    p.scale(zeta);
    r.axpy(1.0, &grad_faces(&p));
    r.axpy(params.mu, &laplacian_faces(&s.u));
    r.axpy(-(params.mu + params.lambda), &grad_faces(&div_cells(&s.u)));
    r.axpy(-1.0, &params.forcing.dual_field(grid, &s.rho));
    r
}

/// Linear system for the density given the velocity: flux-scaled rows with
/// upwind donor coefficients, strictly positive diagonal and nonpositive
/// off-diagonal entries.
pub struct MassSystem {
    pub matrix: Csr,
    pub rhs: Vec<f64>,
}

pub fn assemble_mass_system(
    u: &VelocityField,
    params: &SchemeParams,
    zeta: f64,
    source: Option<&CellField>,
) -> MassSystem {
    let grid = u.grid();
    let n = grid.n_cells();
    let stab = params.stabilization(grid);
    let rho_star = params.rho_star(grid);
    let mut t = Vec::new();
    let mut rhs = vec![0.0; n];
    for (cid, cell) in grid.cells.iter().enumerate() {
        t.push((cid, cid, stab * cell.measure));
        rhs[cid] = stab * cell.measure * rho_star;
        if let Some(g) = source {
            rhs[cid] += zeta * cell.measure * g.values[cid];
        }
        for a in 0..grid.dim {
            for (side, outward_sign) in [(0usize, -1.0), (1usize, 1.0)] {
                let fid = cell.faces[a][side];
                let f = &grid.faces[a][fid];
                if !f.interior() {
                    continue;
                }
                let u_out = outward_sign * u.comps[a].values[fid];
                let donor = if u_out >= 0.0 {
                    cid
                } else if side == 0 {
                    f.cell_lo.unwrap()
                } else {
                    f.cell_hi.unwrap()
                };
                t.push((cid, donor, zeta * f.measure * u_out));
            }
        }
    }
    MassSystem { matrix: Csr::from_triplets(n, n, t), rhs }
}

/// Oseen linearization of the momentum balance: convective fluxes frozen
/// at `(rho, u_frozen)`, centered face values implicit, diffusion and
/// grad-div exact, pressure on the right side. Rows are flux-scaled
/// (multiplied by the dual-cell measure).
pub struct MomentumSystem {
    pub matrix: Csr,
    pub rhs: Vec<f64>,
}

pub fn assemble_momentum_system(
    rho: &CellField,
    u_frozen: &VelocityField,
    params: &SchemeParams,
    zeta: f64,
    layout: &MomentumLayout,
) -> MomentumSystem {
    let grid = &layout.grid;
    let n = layout.n();
    let mut t: Vec<(usize, usize, f64)> = Vec::new();
    let mut rhs = vec![0.0; n];

    // diffusion: mu * (-Laplacian), symmetric flux exchange per dual face
    for i in 0..grid.dim {
        for df in &grid.dual_faces[i] {
            let w = params.mu * df.measure / df.dist;
            let lo = df.face_lo.and_then(|f| layout.index[i][f]);
            let hi = df.face_hi.and_then(|f| layout.index[i][f]);
            if let Some(r) = lo {
                t.push((r, r, w));
                if let Some(c) = hi {
                    t.push((r, c, -w));
                }
            }
            if let Some(r) = hi {
                t.push((r, r, w));
                if let Some(c) = lo {
                    t.push((r, c, -w));
                }
            }
        }
    }

    // grad-div: -(mu + lambda) |sigma| ((div u)_hi - (div u)_lo)
    let gl = params.mu + params.lambda;
    for (row, &(dir, fid)) in layout.unknowns.iter().enumerate() {
        let f = &grid.faces[dir][fid];
        for (cell, cell_sign) in [(f.cell_hi.unwrap(), -1.0), (f.cell_lo.unwrap(), 1.0)] {
            let c = &grid.cells[cell];
            let scale = gl * f.measure * cell_sign / c.measure;
            for a in 0..grid.dim {
                for (side, outward) in [(0usize, -1.0), (1usize, 1.0)] {
                    let nb = c.faces[a][side];
                    if let Some(col) = layout.index[a][nb] {
                        t.push((row, col, scale * outward * grid.faces[a][nb].measure));
                    }
                }
            }
        }
    }

    // convection: frozen dual fluxes, centered unknown face values
    if zeta != 0.0 {
        let fluxes = mass_fluxes(rho, u_frozen);
        for i in 0..grid.dim {
            let dual = dual_fluxes(&fluxes, i);
            for (df, &flux) in grid.dual_faces[i].iter().zip(&dual.values) {
                if flux == 0.0 {
                    continue;
                }
                let w = 0.5 * zeta * flux;
                let lo = df.face_lo.and_then(|f| layout.index[i][f]);
                let hi = df.face_hi.and_then(|f| layout.index[i][f]);
                if let Some(r) = lo {
                    t.push((r, r, w));
                    if let Some(c) = hi {
                        t.push((r, c, w));
                    }
                }
                if let Some(r) = hi {
                    t.push((r, r, -w));
                    if let Some(c) = lo {
                        t.push((r, c, -w));
                    }
                }
            }
        }
    }

    // right side: forcing plus the pressure gradient moved over
    let f = params.forcing.dual_field(grid, rho);
    let p = rho.map(|r| r.powf(params.gamma));
    for (row, &(dir, fid)) in layout.unknowns.iter().enumerate() {
        let face = &grid.faces[dir][fid];
        rhs[row] = face.dual_measure * f.comps[dir].values[fid];
        if zeta != 0.0 {
            let dp = p.values[face.cell_hi.unwrap()] - p.values[face.cell_lo.unwrap()];
            rhs[row] -= zeta * face.measure * dp;
        }
    }

    MomentumSystem { matrix: Csr::from_triplets(n, n, t), rhs }
}

/// Coupled frozen-coefficient linearization of the full system around
/// `(rho_n, u_n)`: upwind donors and convective dual fluxes are frozen,
/// the pressure is linearized as `p_n + gamma rho_n^(gamma-1) (rho - rho_n)`
/// and kept implicit, and a density-proportional force enters implicitly.
/// Solving density and velocity together is what keeps the stiff
/// pressure-density-velocity feedback inside the matrix; an explicit
/// pressure makes the segregated sweep diverge once the transport part of
/// the mass balance dominates its zero-order relaxation.
pub struct CoupledSystem {
    pub matrix: Csr,
    pub rhs: Vec<f64>,
}

pub fn assemble_coupled_system(
    rho_n: &CellField,
    u_n: &VelocityField,
    params: &SchemeParams,
    zeta: f64,
    source: Option<&CellField>,
    layout: &crate::ops::CoupledLayout,
) -> CoupledSystem {
    let grid = &layout.grid;
    let stab = params.stabilization(grid);
    let rho_star = params.rho_star(grid);
    let mut t: Vec<(usize, usize, f64)> = Vec::new();
    let mut rhs = vec![0.0; layout.n];

    // mass rows: zeta [T(u_n) rho + B(rho_n) u - B(rho_n) u_n]
    //            + stab |K| (rho - rho_star) = zeta |K| g
    for (cid, cell) in grid.cells.iter().enumerate() {
        let row = layout.cell_index[cid];
        t.push((row, row, stab * cell.measure));
        rhs[row] = stab * cell.measure * rho_star;
        if let Some(g) = source {
            rhs[row] += zeta * cell.measure * g.values[cid];
        }
        for a in 0..grid.dim {
            for (side, outward_sign) in [(0usize, -1.0), (1usize, 1.0)] {
                let fid = cell.faces[a][side];
                let f = &grid.faces[a][fid];
                if !f.interior() {
                    continue;
                }
                let u_out = outward_sign * u_n.comps[a].values[fid];
                let donor = if u_out >= 0.0 {
                    cid
                } else if side == 0 {
                    f.cell_lo.unwrap()
                } else {
                    f.cell_hi.unwrap()
                };
                // density part at the new iterate
                t.push((row, layout.cell_index[donor], zeta * f.measure * u_out));
                // velocity part with frozen donor density
                if let Some(col) = layout.face_index[a][fid] {
                    let coeff = zeta * f.measure * outward_sign * rho_n.values[donor];
                    t.push((row, col, coeff));
                    rhs[row] += coeff * u_n.comps[a].values[fid];
                }
            }
        }
    }

    // momentum rows, flux-scaled
    for i in 0..grid.dim {
        for df in &grid.dual_faces[i] {
            let w = params.mu * df.measure / df.dist;
            let lo = df.face_lo.and_then(|f| layout.face_index[i][f]);
            let hi = df.face_hi.and_then(|f| layout.face_index[i][f]);
            if let Some(r) = lo {
                t.push((r, r, w));
                if let Some(c) = hi {
                    t.push((r, c, -w));
                }
            }
            if let Some(r) = hi {
                t.push((r, r, w));
                if let Some(c) = lo {
                    t.push((r, c, -w));
                }
            }
        }
    }
    let gl = params.mu + params.lambda;
    let p_n = rho_n.map(|r| r.powf(params.gamma));
    let dpdr = rho_n.map(|r| params.gamma * r.powf(params.gamma - 1.0));
    for i in 0..grid.dim {
        for (fid, face) in grid.faces[i].iter().enumerate() {
            let row = match layout.face_index[i][fid] {
                Some(r) => r,
                None => continue,
            };
            // grad-div
            for (cell, cell_sign) in [(face.cell_hi.unwrap(), -1.0), (face.cell_lo.unwrap(), 1.0)]
            {
                let c = &grid.cells[cell];
                let scale = gl * face.measure * cell_sign / c.measure;
                for a in 0..grid.dim {
                    for (side, outward) in [(0usize, -1.0), (1usize, 1.0)] {
                        let nb = c.faces[a][side];
                        if let Some(col) = layout.face_index[a][nb] {
                            t.push((row, col, scale * outward * grid.faces[a][nb].measure));
                        }
                    }
                }
            }
            // implicit linearized pressure gradient
            if zeta != 0.0 {
                let (k, l) = (face.cell_lo.unwrap(), face.cell_hi.unwrap());
                t.push((row, layout.cell_index[l], zeta * face.measure * dpdr.values[l]));
                t.push((row, layout.cell_index[k], -zeta * face.measure * dpdr.values[k]));
                rhs[row] -= zeta
                    * face.measure
                    * ((p_n.values[l] - dpdr.values[l] * rho_n.values[l])
                        - (p_n.values[k] - dpdr.values[k] * rho_n.values[k]));
            }
            // forcing: density-proportional forces couple implicitly
            match &params.forcing {
                Forcing::RhoGravity(g) => {
                    let (k, l) = (face.cell_lo.unwrap(), face.cell_hi.unwrap());
                    t.push((row, layout.cell_index[k], -g[i] * face.half_lo));
                    t.push((row, layout.cell_index[l], -g[i] * face.half_hi));
                }
                _ => {}
            }
        }
    }
    match &params.forcing {
        Forcing::RhoGravity(_) => {}
        other => {
            let f = other.dual_field(grid, rho_n);
            for i in 0..grid.dim {
                for (fid, face) in grid.faces[i].iter().enumerate() {
                    if let Some(row) = layout.face_index[i][fid] {
                        rhs[row] += face.dual_measure * f.comps[i].values[fid];
                    }
                }
            }
        }
    }

    // convection with frozen dual fluxes
    if zeta != 0.0 {
        let fluxes = mass_fluxes(rho_n, u_n);
        for i in 0..grid.dim {
            let dual = dual_fluxes(&fluxes, i);
            for (df, &flux) in grid.dual_faces[i].iter().zip(&dual.values) {
                if flux == 0.0 {
                    continue;
                }
                let w = 0.5 * zeta * flux;
                let lo = df.face_lo.and_then(|f| layout.face_index[i][f]);
                let hi = df.face_hi.and_then(|f| layout.face_index[i][f]);
                if let Some(r) = lo {
                    t.push((r, r, w));
                    if let Some(c) = hi {
                        t.push((r, c, w));
                    }
                }
                if let Some(r) = hi {
                    t.push((r, r, -w));
                    if let Some(c) = lo {
                        t.push((r, c, -w));
                    }
                }
            }
        }
    }

    CoupledSystem { matrix: Csr::from_triplets(layout.n, layout.n, t), rhs }
}

/// Energy accounting of a state: viscous dissipation versus force work
/// plus the stabilization work (pressure work and the zero-order density
/// relaxation seen by the kinetic energy).
#[derive(Debug, Clone)]
pub struct EnergyReport {
    /// `mu ||u||^2_{1,0} + (mu + lambda) ||div u||^2`.
    pub kinetic_diffusion: f64,
    /// `∫ P_E f · u`.
    pub rhs_work: f64,
    /// `zeta ∫ p div u + (stab/2) Σ |D| (rho_D - rho_star) u^2` (+ source work).
    pub stabilization_work: f64,
    pub satisfied: bool,
    /// True when the report was taken at a state solving the scheme to
    /// tolerance; otherwise `satisfied` is not meaningful.
    pub at_solution: bool,
}

pub fn energy_report(
    s: &State,
    params: &SchemeParams,
    zeta: f64,
    source: Option<&CellField>,
    tol: f64,
    at_solution: bool,
) -> EnergyReport {
    let grid = s.u.grid();
    let stab = params.stabilization(grid);
    let rho_star = params.rho_star(grid);
    let du = div_cells(&s.u);
    let kinetic_diffusion =
        params.mu * h1_norm(&s.u).powi(2) + (params.mu + params.lambda) * du.norm_l2().powi(2);
    let f = params.forcing.dual_field(grid, &s.rho);
    let rhs_work = f.dot(&s.u);

    let p = s.pressure(params.gamma);
    let pressure_work: f64 = zeta
        * p.values
            .iter()
            .zip(&du.values)
            .zip(&grid.cells)
            .map(|((a, b), c)| a * b * c.measure)
            .sum::<f64>();
    let mut relax_work = 0.0;
    for dir in 0..grid.dim {
        let dd = dual_density(&s.rho, dir);
        let sd = source.map(|g| dual_density(g, dir));
        for (fid, face) in grid.faces[dir].iter().enumerate() {
            if !face.interior() {
                continue;
            }
            let us = s.u.comps[dir].values[fid];
            relax_work += 0.5 * stab * face.dual_measure * (dd[fid] - rho_star) * us * us;
            if let Some(ref sdd) = sd {
                relax_work -= 0.5 * zeta * face.dual_measure * sdd[fid] * us * us;
            }
        }
    }
    let stabilization_work = pressure_work + relax_work;
    let scale = kinetic_diffusion.abs().max(rhs_work.abs()).max(1.0);
    let satisfied = kinetic_diffusion <= rhs_work + stabilization_work + tol * scale;
    EnergyReport { kinetic_diffusion, rhs_work, stabilization_work, satisfied, at_solution }
}

/// Largest diamond-cell mass-balance defect over all directions, with the
/// scale of the terms entering it. For a state solving the mass balance
/// the defect is at rounding level.
pub fn diamond_defect(
    s: &State,
    params: &SchemeParams,
    zeta: f64,
    source: Option<&CellField>,
) -> (f64, f64) {
    let grid = s.u.grid();
    let stab = params.stabilization(grid);
    let rho_star = params.rho_star(grid);
    let fluxes = mass_fluxes(&s.rho, &s.u);
    let mut worst = 0.0f64;
    let mut scale = 1e-300f64;
    for dir in 0..grid.dim {
        let dual = dual_fluxes(&fluxes, dir);
        let net = dual.net_per_dual_cell();
        let gross = {
            let mut acc = vec![0.0; grid.n_faces(dir)];
            for (df, &flux) in grid.dual_faces[dir].iter().zip(&dual.values) {
                if let Some(lo) = df.face_lo {
                    acc[lo] += flux.abs();
                }
                if let Some(hi) = df.face_hi {
                    acc[hi] += flux.abs();
                }
            }
            acc
        };
        let dd = dual_density(&s.rho, dir);
        let sd = source.map(|g| dual_density(g, dir));
        for (fid, face) in grid.faces[dir].iter().enumerate() {
            if !face.interior() {
                continue;
            }
            let mut defect = zeta * net[fid] + stab * face.dual_measure * (dd[fid] - rho_star);
            let mut s_here =
                zeta * gross[fid] + stab * face.dual_measure * (dd[fid].abs() + rho_star);
            if let Some(ref sdd) = sd {
                defect -= zeta * face.dual_measure * sdd[fid];
                s_here += zeta * face.dual_measure * sdd[fid].abs();
            }
            worst = worst.max(defect.abs());
            scale = scale.max(s_here);
        }
    }
    (worst, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::testutil::{random_cell_field, random_velocity};
    use crate::grid::{build_grid, DomainSpec, Refinement};
    use crate::linalg::BandLu;
    use crate::ops::h1_inner;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn square(n: usize) -> Arc<MacGrid> {
        Arc::new(build_grid(&DomainSpec::unit_square(), &Refinement::uniform_2d(n, n)).unwrap())
    }

    fn base_params(dim: usize) -> SchemeParams {
        SchemeParams {
            gamma: 1.4,
            mu: 0.1,
            lambda: 0.0,
            mass: 1.0,
            cs: 0.05,
            alpha: 2.0,
            forcing: Forcing::zero(dim),
        }
    }

    #[test]
    fn parameter_validation() {
        let g = square(2);
        let mut p = base_params(2);
        assert!(p.validate(2).is_ok());
        p.mu = -1.0;
        assert!(p.validate(2).is_err());
        p.mu = 0.1;
        p.lambda = -0.2;
        assert!(p.validate(2).is_err());
        p.lambda = 0.0;
        p.gamma = 1.0;
        assert!(p.validate(2).is_err());
        p.gamma = 1.4;
        assert!((p.rho_star(&g) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mass_residual_examples() {
        let g = square(4);
        let params = base_params(2);
        let rho_star = params.rho_star(&g);
        // resting state at the mean density has zero residual at any zeta
        let s = State::resting(&g, rho_star);
        for zeta in [0.0, 0.5, 1.0] {
            assert_eq!(residual_mass(&s, &params, zeta, None).norm_inf(), 0.0);
        }
        // zero velocity: residual is the pure relaxation term
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rho = random_cell_field(&g, &mut rng).map(|v| 1.0 + 0.5 * v);
        let s = State { u: VelocityField::zeros(&g), rho: rho.clone() };
        let r = residual_mass(&s, &params, 0.7, None);
        let stab = params.stabilization(&g);
        for (rv, rho_v) in r.values.iter().zip(&rho.values) {
            assert!((rv - stab * (rho_v - rho_star)).abs() < 1e-15);
        }
        // general state matches the direct flux sum
        let s = State { u: random_velocity(&g, &mut rng), rho };
        let r = residual_mass(&s, &params, 0.8, None);
        let div = crate::ops::div_upwind(&s.rho, &s.u);
        for ((rv, dv), rho_v) in r.values.iter().zip(&div.values).zip(&s.rho.values) {
            assert!((rv - (0.8 * dv + stab * (rho_v - rho_star))).abs() < 1e-14);
        }
    }

    #[test]
    fn momentum_residual_is_affine_at_zeta0() {
        let g = square(4);
        let params = base_params(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rho = random_cell_field(&g, &mut rng).map(|v| 1.0 + 0.4 * v);
        let u1 = random_velocity(&g, &mut rng);
        let u2 = random_velocity(&g, &mut rng);
        let lam = 0.3;
        let r1 = residual_momentum(&State { u: u1.clone(), rho: rho.clone() }, &params, 0.0);
        let r2 = residual_momentum(&State { u: u2.clone(), rho: rho.clone() }, &params, 0.0);
        let mut mix = u1.clone();
        mix.scale(lam);
        mix.axpy(1.0 - lam, &u2);
        let rm = residual_momentum(&State { u: mix, rho }, &params, 0.0);
        for d in 0..2 {
            for ((a, b), m) in
                r1.comps[d].values.iter().zip(&r2.comps[d].values).zip(&rm.comps[d].values)
            {
                assert!((lam * a + (1.0 - lam) * b - m).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_state_zero_force_has_zero_momentum_residual() {
        let g = square(3);
        let params = base_params(2);
        let s = State::resting(&g, 1.0);
        // pressure is constant, its gradient vanishes; everything else is 0
        assert!(residual_momentum(&s, &params, 0.0).norm_inf() == 0.0);
        assert!(residual_momentum(&s, &params, 1.0).norm_inf() < 1e-14);
    }

    #[test]
    fn mass_matrix_is_m_matrix_and_preserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = square(6);
        let params = base_params(2);
        let rho_star = params.rho_star(&g);
        for trial in 0..5 {
            let mut u = random_velocity(&g, &mut rng);
            u.scale(1.0 + trial as f64);
            let sys = assemble_mass_system(&u, &params, 1.0, None);
            // structure: positive diagonal, nonpositive off-diagonal
            for r in 0..sys.matrix.nrows {
                for (c, v) in sys.matrix.row(r) {
                    if c == r {
                        assert!(v > 0.0);
                    } else {
                        assert!(v <= 0.0);
                    }
                }
            }
            let rho = BandLu::factor(&sys.matrix).unwrap().solve(&sys.rhs);
            let rho = CellField::from_values(&g, rho);
            assert!(rho.min() > 0.0, "positivity violated: {}", rho.min());
            assert!((rho.integral() - params.mass).abs() <= 1e-12 * params.mass);
            // kills the residual
            let s = State { u, rho };
            let r = residual_mass(&s, &params, 1.0, None);
            assert!(r.norm_inf() <= 1e-12 * (1.0 + params.stabilization(&g) * rho_star));
        }
        // zero velocity: diagonal system, exact mean density
        let sys = assemble_mass_system(&VelocityField::zeros(&g), &params, 1.0, None);
        let rho = BandLu::factor(&sys.matrix).unwrap().solve(&sys.rhs);
        assert!(rho.iter().all(|&r| (r - rho_star).abs() < 1e-13));
    }

    #[test]
    fn momentum_matrix_matches_matrix_free_residual() {
        // at the linearization point the Oseen system reproduces the
        // nonlinear residual: A u - b = |D| * residual(u)
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for zeta in [0.0, 0.6, 1.0] {
            let g = square(5);
            let mut params = base_params(2);
            params.lambda = 0.2;
            params.forcing = Forcing::Constant(vec![0.4, -0.7]);
            let rho = random_cell_field(&g, &mut rng).map(|v| 1.2 + 0.5 * v);
            let u = random_velocity(&g, &mut rng);
            let layout = MomentumLayout::new(&g);
            let sys = assemble_momentum_system(&rho, &u, &params, zeta, &layout);
            let x = layout.gather(&u);
            let ax = sys.matrix.matvec(&x);
            let resid = residual_momentum(&State { u: u.clone(), rho }, &params, zeta);
            for (row, &(dir, fid)) in layout.unknowns.iter().enumerate() {
                let expect = g.faces[dir][fid].dual_measure * resid.comps[dir].values[fid];
                let got = ax[row] - sys.rhs[row];
                assert!(
                    (got - expect).abs() <= 1e-11 * (1.0 + expect.abs()),
                    "zeta {} dir {} face {}: {} vs {}",
                    zeta,
                    dir,
                    fid,
                    got,
                    expect
                );
            }
        }
    }

    #[test]
    fn weak_form_matches_flux_form_on_basis_functions() {
        // the flux-scaled momentum residual equals the weak form tested
        // against every single-face basis function
        let g = square(3);
        let mut params = base_params(2);
        params.forcing = Forcing::Constant(vec![0.3, 0.9]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rho = random_cell_field(&g, &mut rng).map(|v| 1.1 + 0.4 * v);
        let u = random_velocity(&g, &mut rng);
        let s = State { u: u.clone(), rho: rho.clone() };
        let zeta = 0.85;
        let resid = residual_momentum(&s, &params, zeta);
        let p = s.pressure(params.gamma);
        let f = params.forcing.dual_field(&g, &rho);
        let fluxes = mass_fluxes(&rho, &u);
        let du = div_cells(&u);
        for i in 0..2 {
            let dual = dual_fluxes(&fluxes, i);
            for (fid, face) in g.faces[i].iter().enumerate() {
                if !face.interior() {
                    continue;
                }
                let basis = VelocityField::new(
                    (0..2)
                        .map(|d| {
                            FaceField::from_interior(
                                &g,
                                d,
                                |id| if d == i && id == fid { 1.0 } else { 0.0 },
                            )
                        })
                        .collect(),
                );
                // convection against the basis
                let mut conv = 0.0;
                for (df, &flux) in g.dual_faces[i].iter().zip(&dual.values) {
                    let ueps = 0.5
                        * (df.face_lo.map(|f| u.comps[i].values[f]).unwrap_or(0.0)
                            + df.face_hi.map(|f| u.comps[i].values[f]).unwrap_or(0.0));
                    let mut phi = 0.0;
                    if df.face_lo == Some(fid) {
                        phi += 1.0;
                    }
                    if df.face_hi == Some(fid) {
                        phi -= 1.0;
                    }
                    conv += flux * ueps * phi;
                }
                let diffusion = params.mu * h1_inner(&u, &basis);
                let dbasis = div_cells(&basis);
                let graddiv: f64 = (params.mu + params.lambda)
                    * du.values
                        .iter()
                        .zip(&dbasis.values)
                        .zip(&g.cells)
                        .map(|((a, b), c)| a * b * c.measure)
                        .sum::<f64>();
                let pwork: f64 = p
                    .values
                    .iter()
                    .zip(&dbasis.values)
                    .zip(&g.cells)
                    .map(|((a, b), c)| a * b * c.measure)
                    .sum::<f64>();
                let fwork = f.comps[i].values[fid] * face.dual_measure;
                let weak = zeta * conv + diffusion + graddiv - zeta * pwork - fwork;
                let flux_form = face.dual_measure * resid.comps[i].values[fid];
                assert!(
                    (weak - flux_form).abs() <= 1e-11 * (1.0 + weak.abs()),
                    "dir {} face {}: weak {} vs flux {}",
                    i,
                    fid,
                    weak,
                    flux_form
                );
            }
        }
    }

    #[test]
    fn diamond_balance_holds_for_mass_solutions() {
        let g = square(5);
        let params = base_params(2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for zeta in [0.3, 1.0] {
            let u = random_velocity(&g, &mut rng);
            let sys = assemble_mass_system(&u, &params, zeta, None);
            let rho =
                CellField::from_values(&g, BandLu::factor(&sys.matrix).unwrap().solve(&sys.rhs));
            let s = State { u, rho };
            let (defect, scale) = diamond_defect(&s, &params, zeta, None);
            assert!(defect <= 1e-12 * scale, "defect {} scale {}", defect, scale);
        }
    }

    #[test]
    fn energy_report_trivial_state() {
        let g = square(4);
        let params = base_params(2);
        let s = State::resting(&g, 1.0);
        let rep = energy_report(&s, &params, 1.0, None, 1e-10, true);
        assert_eq!(rep.kinetic_diffusion, 0.0);
        assert_eq!(rep.rhs_work, 0.0);
        assert!(rep.satisfied);
        // non-solution states still produce a report, flagged as such
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = State {
            u: random_velocity(&g, &mut rng),
            rho: random_cell_field(&g, &mut rng).map(|v| 1.0 + 0.3 * v),
        };
        let rep = energy_report(&s, &params, 1.0, None, 1e-10, false);
        assert!(!rep.at_solution);
        assert!(rep.kinetic_diffusion > 0.0);
    }
}
