//! Homotopy continuation in the nonlinearity parameter with segregated
//! Picard sweeps per stage.
//!
//! Each sweep solves the upwind mass system for the density (positivity is
//! automatic from the matrix structure), recomputes the pressure, solves
//! the Oseen-linearized momentum system, then under-relaxes the velocity.
//! Stages warm-start from the previous one; a stage that fails to converge
//! triggers bisection of the continuation step, up to a fixed budget.

use crate::field::CellField;
use crate::grid::MacGrid;
use crate::linalg::{bicgstab, BandLu, Csr, LinError};
use crate::ops::{div_cells, h1_norm, weak_bv_sum, CoupledLayout, MomentumLayout};
use crate::scheme::{
    assemble_coupled_system, assemble_momentum_system, diamond_defect, energy_report,
    residual_mass, residual_momentum, EnergyReport, SchemeParams, State,
};
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("linear solve failed: {0}")]
    Linear(#[from] LinError),
    #[error("non-finite value in {what} during the sweep at zeta = {zeta} (|u| = {u_norm:.3e}, min rho = {min_rho:.3e})")]
    NonFinite { what: &'static str, zeta: f64, u_norm: f64, min_rho: f64 },
    #[error("{0}")]
    Params(#[from] crate::scheme::SchemeError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearSolverKind {
    /// Banded LU factorization with partial pivoting.
    DirectBand,
    /// Jacobi-preconditioned BiCGSTAB with the given relative tolerance.
    Iterative { tol: f64 },
}

#[derive(Clone)]
pub struct SolverConfig {
    /// Strictly increasing continuation values from 0 to 1.
    pub zeta_schedule: Vec<f64>,
    /// Relative residual tolerance of the Picard loop.
    pub picard_tol: f64,
    pub picard_max_iters: usize,
    /// Velocity under-relaxation in (0, 1].
    pub relaxation: f64,
    pub linear_solver: LinearSolverKind,
    /// Densities below this raise a report warning.
    pub density_floor_warn: f64,
    /// Continuation-step bisection budget on stage failure.
    pub max_bisections: usize,
    /// Optional mass-balance source (manufactured-solution runs only).
    pub mass_source: Option<CellField>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            zeta_schedule: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            picard_tol: 1e-9,
            picard_max_iters: 200,
            relaxation: 0.7,
            linear_solver: LinearSolverKind::DirectBand,
            density_floor_warn: 1e-14,
            max_bisections: 6,
            mass_source: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        let s = &self.zeta_schedule;
        let ok = s.len() >= 2
            && s.first() == Some(&0.0)
            && s.last() == Some(&1.0)
            && s.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(SolveError::Params(crate::scheme::SchemeError::InvalidParams(
                "zeta schedule must increase strictly from 0 to 1".into(),
            )));
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(SolveError::Params(crate::scheme::SchemeError::InvalidParams(
                format!("relaxation {} outside (0, 1]", self.relaxation),
            )));
        }
        Ok(())
    }
}

fn linear_solve(kind: LinearSolverKind, a: &Csr, b: &[f64]) -> Result<Vec<f64>, LinError> {
    match kind {
        LinearSolverKind::DirectBand => Ok(BandLu::factor(a)?.solve(b)),
        LinearSolverKind::Iterative { tol } => bicgstab(a, b, tol, 40 * b.len().max(50)),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ResidualSample {
    pub zeta: f64,
    pub iteration: usize,
    pub mass: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolveStatus {
    Converged,
    Failed { zeta: f64, reason: String },
}

/// Scalar diagnostics of the final state.
#[derive(Debug, Clone)]
pub struct StateDiagnostics {
    pub u_h1: f64,
    pub p_l2: f64,
    pub rho_l2gamma: f64,
    pub min_rho: f64,
    pub total_mass: f64,
    pub div_l2: f64,
    pub weak_bv_beta2: f64,
    pub diamond_defect: f64,
    pub diamond_scale: f64,
    pub energy: EnergyReport,
}

pub struct SolveReport {
    pub status: SolveStatus,
    pub state: State,
    /// Picard iteration count per accepted continuation stage.
    pub stage_iterations: Vec<(f64, usize)>,
    pub residual_history: Vec<ResidualSample>,
    /// Final residuals, recomputed fresh from the returned state.
    pub final_residual_mass: f64,
    pub final_residual_momentum: f64,
    pub diagnostics: StateDiagnostics,
    pub warnings: Vec<String>,
    pub wallclock_seconds: f64,
}

fn residual_scales(grid: &MacGrid, params: &SchemeParams, rho: &CellField) -> (f64, f64) {
    let stab = params.stabilization(grid);
    let mass_scale = 1.0 + stab * params.rho_star(grid);
    let mom_scale = 1.0 + params.forcing.dual_field(&rho.grid, rho).norm_inf();
    (mass_scale, mom_scale)
}

fn check_finite(s: &State, what: &'static str, zeta: f64) -> Result<(), SolveError> {
    let finite = s.rho.values.iter().all(|v| v.is_finite())
        && s.u.comps.iter().all(|c| c.values.iter().all(|v| v.is_finite()));
    if finite {
        Ok(())
    } else {
        Err(SolveError::NonFinite {
            what,
            zeta,
            u_norm: s.u.norm_inf(),
            min_rho: s.rho.min(),
        })
    }
}

/// Closed-form base stage: the density is the mean density exactly and the
/// velocity solves the linear viscous system.
pub fn solve_zeta0(
    grid: &Arc<MacGrid>,
    params: &SchemeParams,
    config: &SolverConfig,
) -> Result<State, SolveError> {
    params.validate(grid.dim)?;
    let mut rho = CellField::constant(grid, params.rho_star(grid));
    let shift = (params.mass - rho.integral()) / grid.volume;
    for v in &mut rho.values {
        *v += shift;
    }
    let layout = MomentumLayout::new(grid);
    let frozen = crate::field::VelocityField::zeros(grid);
    let sys = assemble_momentum_system(&rho, &frozen, params, 0.0, &layout);
    let x = linear_solve(config.linear_solver, &sys.matrix, &sys.rhs)?;
    let state = State { u: layout.scatter(&x), rho };
    check_finite(&state, "base-stage velocity solve", 0.0)?;
    Ok(state)
}

/// One sweep of the fixed-point iteration: solve the coupled
/// frozen-coefficient linearization around the current state and blend the
/// result with relaxation factor `omega`. Total mass is conserved exactly
/// by every sweep because the linearized fluxes telescope; positivity of
/// the blended density is the caller's step-control concern.
pub fn picard_step(
    s: &State,
    params: &SchemeParams,
    zeta: f64,
    omega: f64,
    config: &SolverConfig,
    layout: &CoupledLayout,
) -> Result<State, SolveError> {
    let target = sweep_target(s, params, zeta, config, layout)?;
    let state = blend(s, &target, omega);
    check_finite(&state, "picard sweep", zeta)?;
    Ok(state)
}

/// Solution of the coupled linearization around the current state.
fn sweep_target(
    s: &State,
    params: &SchemeParams,
    zeta: f64,
    config: &SolverConfig,
    layout: &CoupledLayout,
) -> Result<State, SolveError> {
    let coupled =
        assemble_coupled_system(&s.rho, &s.u, params, zeta, config.mass_source.as_ref(), layout);
    let x = linear_solve(config.linear_solver, &coupled.matrix, &coupled.rhs)?;
    let (rho_tilde, u_tilde) = layout.split(&x);
    let mut rho = CellField::from_values(&s.rho.grid, rho_tilde);
    // the linearized fluxes telescope, so total mass is conserved exactly
    // up to solver rounding; restore the invariant against the 1/stab
    // amplification of that rounding
    let shift = (params.mass - rho.integral()) / s.rho.grid.volume;
    for v in &mut rho.values {
        *v += shift;
    }
    Ok(State { u: u_tilde, rho })
}

fn blend(s: &State, target: &State, omega: f64) -> State {
    let mut u = s.u.clone();
    u.scale(1.0 - omega);
    u.axpy(omega, &target.u);
    let mut rho = s.rho.clone();
    rho.scale(1.0 - omega);
    rho.axpy(omega, &target.rho);
    State { u, rho }
}

/// Largest relaxation keeping the blended density strictly positive.
fn positivity_cap(s: &State, target: &State) -> f64 {
    let mut cap = 1.0f64;
    for (&r, &rt) in s.rho.values.iter().zip(&target.rho.values) {
        if rt <= 0.0 {
            // r + omega (rt - r) = 0 at omega = r / (r - rt)
            cap = cap.min(0.9 * r / (r - rt));
        }
    }
    cap
}

struct StageOutcome {
    state: State,
    iterations: usize,
}

fn combined_residual(
    state: &State,
    params: &SchemeParams,
    zeta: f64,
    config: &SolverConfig,
) -> (f64, f64, f64) {
    let grid = state.grid().clone();
    let rm = residual_mass(state, params, zeta, config.mass_source.as_ref()).norm_inf();
    let ru = residual_momentum(state, params, zeta).norm_inf();
    let (ms, us) = residual_scales(&grid, params, &state.rho);
    ((rm / ms).max(ru / us), rm, ru)
}

fn run_stage(
    start: &State,
    params: &SchemeParams,
    zeta: f64,
    config: &SolverConfig,
    layout: &CoupledLayout,
    history: &mut Vec<ResidualSample>,
) -> Result<Option<StageOutcome>, SolveError> {
    let mut state = start.clone();
    let (mut res_prev, _, _) = combined_residual(&state, params, zeta, config);
    for iter in 1..=config.picard_max_iters {
        // damped sweep: cap the relaxation so the density stays strictly
        // positive, then halve it while the residual blows up
        let target = sweep_target(&state, params, zeta, config, layout)?;
        let cap = positivity_cap(&state, &target);
        // full steps once the frozen-coefficient model is trustworthy
        let base = if res_prev < 1e-3 { 1.0 } else { config.relaxation };
        let mut omega = base.min(cap);
        let mut accepted = None;
        for _ in 0..6 {
            let cand = blend(&state, &target, omega);
            check_finite(&cand, "picard sweep", zeta)?;
            if cand.rho.min() > 0.0 {
                let (res, rm, ru) = combined_residual(&cand, params, zeta, config);
                if res <= 1.5 * res_prev || omega <= 0.05 * config.relaxation {
                    accepted = Some((cand, res, rm, ru));
                    break;
                }
            }
            omega *= 0.5;
        }
        let (cand, res, rm, ru) = match accepted {
            Some(t) => t,
            None => return Ok(None),
        };
        state = cand;
        res_prev = res;
        history.push(ResidualSample { zeta, iteration: iter, mass: rm, momentum: ru });
        if res <= config.picard_tol {
            return Ok(Some(StageOutcome { state, iterations: iter }));
        }
    }
    Ok(None)
}

/// Continuation over the full schedule. Always returns a report; the
/// status records failure with the offending stage when the bisection
/// budget runs out or a linear solve breaks down.
pub fn solve(grid: &Arc<MacGrid>, params: &SchemeParams, config: &SolverConfig) -> SolveReport {
    let clock = Instant::now();
    let mut warnings = Vec::new();
    let mut history = Vec::new();
    let mut stage_iterations = Vec::new();

    let result = (|| -> Result<(State, SolveStatus), SolveError> {
        params.validate(grid.dim)?;
        config.validate()?;
        let layout = CoupledLayout::new(grid);
        let mut state = solve_zeta0(grid, params, config)?;
        stage_iterations.push((0.0, 1));
        let mut zeta_reached = 0.0;
        let mut budget = config.max_bisections;
        let mut targets: Vec<f64> = config.zeta_schedule[1..].to_vec();
        targets.reverse();
        while let Some(target) = targets.pop() {
            match run_stage(&state, params, target, config, &layout, &mut history)? {
                Some(out) => {
                    let min_rho = out.state.rho.min();
                    if min_rho < config.density_floor_warn {
                        warnings.push(format!(
                            "density minimum {:.3e} below the floor at zeta = {}",
                            min_rho, target
                        ));
                    }
                    stage_iterations.push((target, out.iterations));
                    state = out.state;
                    zeta_reached = target;
                }
                None => {
                    if budget == 0 {
                        return Ok((
                            state,
                            SolveStatus::Failed {
                                zeta: target,
                                reason: format!(
                                    "no convergence within {} sweeps and the bisection budget is exhausted",
                                    config.picard_max_iters
                                ),
                            },
                        ));
                    }
                    budget -= 1;
                    let mid = 0.5 * (zeta_reached + target);
                    targets.push(target);
                    targets.push(mid);
                }
            }
        }
        Ok((state, SolveStatus::Converged))
    })();

    let (state, status) = match result {
        Ok(pair) => pair,
        Err(e) => {
            let fallback = State::resting(grid, params.mass / grid.volume.max(1e-300));
            (fallback, SolveStatus::Failed { zeta: f64::NAN, reason: e.to_string() })
        }
    };

    let zeta_final = 1.0;
    let final_residual_mass =
        residual_mass(&state, params, zeta_final, config.mass_source.as_ref()).norm_inf();
    let final_residual_momentum = residual_momentum(&state, params, zeta_final).norm_inf();
    let at_solution = status == SolveStatus::Converged;
    let energy = energy_report(
        &state,
        params,
        zeta_final,
        config.mass_source.as_ref(),
        10.0 * config.picard_tol,
        at_solution,
    );
    let (dd, ds) = diamond_defect(&state, params, zeta_final, config.mass_source.as_ref());
    let p = state.pressure(params.gamma);
    let diagnostics = StateDiagnostics {
        u_h1: h1_norm(&state.u),
        p_l2: p.norm_l2(),
        rho_l2gamma: state.rho.norm_lp(2.0 * params.gamma),
        min_rho: state.rho.min(),
        total_mass: state.rho.integral(),
        div_l2: div_cells(&state.u).norm_l2(),
        weak_bv_beta2: weak_bv_sum(&state.rho, &state.u, 2.0).unwrap_or(f64::NAN),
        diamond_defect: dd,
        diamond_scale: ds,
        energy,
    };
    SolveReport {
        status,
        state,
        stage_iterations,
        residual_history: history,
        final_residual_mass,
        final_residual_momentum,
        diagnostics,
        warnings,
        wallclock_seconds: clock.elapsed().as_secs_f64(),
    }
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    /// Structured text document: `key: value` lines plus arrays. The
    /// wallclock line is the only non-deterministic field.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        match &self.status {
            SolveStatus::Converged => s.push_str("status: converged\n"),
            SolveStatus::Failed { zeta, reason } => {
                writeln!(s, "status: failed").unwrap();
                writeln!(s, "failed_at_zeta: {}", zeta).unwrap();
                writeln!(s, "failure_reason: {}", reason).unwrap();
            }
        }
        writeln!(s, "final_residual_mass: {:.16e}", self.final_residual_mass).unwrap();
        writeln!(s, "final_residual_momentum: {:.16e}", self.final_residual_momentum).unwrap();
        let d = &self.diagnostics;
        writeln!(s, "u_h1: {:.16e}", d.u_h1).unwrap();
        writeln!(s, "p_l2: {:.16e}", d.p_l2).unwrap();
        writeln!(s, "rho_l2gamma: {:.16e}", d.rho_l2gamma).unwrap();
        writeln!(s, "min_rho: {:.16e}", d.min_rho).unwrap();
        writeln!(s, "total_mass: {:.16e}", d.total_mass).unwrap();
        writeln!(s, "div_u_l2: {:.16e}", d.div_l2).unwrap();
        writeln!(s, "weak_bv_beta2: {:.16e}", d.weak_bv_beta2).unwrap();
        writeln!(s, "diamond_defect: {:.16e}", d.diamond_defect).unwrap();
        writeln!(s, "diamond_scale: {:.16e}", d.diamond_scale).unwrap();
        writeln!(s, "energy_kinetic_diffusion: {:.16e}", d.energy.kinetic_diffusion).unwrap();
        writeln!(s, "energy_rhs_work: {:.16e}", d.energy.rhs_work).unwrap();
        writeln!(s, "energy_stabilization_work: {:.16e}", d.energy.stabilization_work).unwrap();
        writeln!(s, "energy_satisfied: {}", d.energy.satisfied).unwrap();
        let stages: Vec<String> =
            self.stage_iterations.iter().map(|(z, n)| format!("{}:{}", z, n)).collect();
        writeln!(s, "stage_iterations: [{}]", stages.join(", ")).unwrap();
        let hist: Vec<String> = self
            .residual_history
            .iter()
            .map(|r| format!("{}:{}:{:.6e}:{:.6e}", r.zeta, r.iteration, r.mass, r.momentum))
            .collect();
        writeln!(s, "residual_history: [{}]", hist.join(", ")).unwrap();
        for w in &self.warnings {
            writeln!(s, "warning: {}", w).unwrap();
        }
        writeln!(s, "wallclock_seconds: {:.6}", self.wallclock_seconds).unwrap();
        s
    }
}

/// Lower bound on the mass-solve density implied by the matrix structure:
/// `cs min|L| h^alpha rho_star / (cs h^alpha |Omega| + sum |sigma| |u_out|)`
/// per cell, using that cell's interior-face speeds.
pub fn density_lower_bound(u: &crate::field::VelocityField, params: &SchemeParams) -> Vec<f64> {
    let grid = u.grid();
    let stab = params.stabilization(grid);
    let rho_star = params.rho_star(grid);
    let min_cell = grid.cells.iter().map(|c| c.measure).fold(f64::INFINITY, f64::min);
    grid.cells
        .iter()
        .map(|cell| {
            let mut flow = 0.0;
            for a in 0..grid.dim {
                for side in 0..2 {
                    let fid = cell.faces[a][side];
                    let f = &grid.faces[a][fid];
                    if f.interior() {
                        flow += f.measure * u.comps[a].values[fid].abs();
                    }
                }
            }
            stab * min_cell * rho_star / (stab * grid.volume + flow)
        })
        .collect()
}
