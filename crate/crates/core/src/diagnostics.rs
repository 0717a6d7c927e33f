//! Verification harness: machine-checkable discrete identities on random
//! inputs, manufactured-solution and reference-refinement convergence
//! studies, and stability-constant probes across grid families.

use crate::field::{
    fortin_interpolate, interpolate_phi, project_cells, AnalyticScalar, AnalyticVector, CellField,
    FaceField, VelocityField,
};
use crate::grid::{build_grid, BoxSpec, DomainSpec, MacGrid, Refinement};
use crate::linalg::BandLu;
use crate::ops::{
    curl_faces, div_cells, grad_faces, grad_faces_ext, grad_full, h1_inner, h1_norm,
    laplacian_faces, solve_primal_poisson, velocity_norm_lq, weak_bv_sum,
};
use crate::scheme::{assemble_mass_system, diamond_defect, Forcing, SchemeParams, State};
use crate::solver::{solve, SolveReport, SolverConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::sync::Arc;

/// One identity's worst defect over the trial set.
#[derive(Debug, Clone)]
pub struct IdentityDefect {
    pub name: &'static str,
    pub max_abs: f64,
    pub max_rel: f64,
}

#[derive(Debug, Clone)]
pub struct IdentityReport {
    pub grid_desc: String,
    pub seed: u64,
    pub trials: usize,
    pub entries: Vec<IdentityDefect>,
}

impl IdentityReport {
    pub fn worst_rel(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "grid: {}", self.grid_desc).unwrap();
        writeln!(s, "seed: {}", self.seed).unwrap();
        writeln!(s, "trials: {}", self.trials).unwrap();
        for e in &self.entries {
            writeln!(s, "{}: abs {:.16e} rel {:.16e}", e.name, e.max_abs, e.max_rel).unwrap();
        }
        s
    }
}

fn random_cell_field(grid: &Arc<MacGrid>, rng: &mut impl Rng) -> CellField {
    CellField::from_values(grid, (0..grid.n_cells()).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn random_velocity(grid: &Arc<MacGrid>, rng: &mut impl Rng) -> VelocityField {
    let comps = (0..grid.dim)
        .map(|d| {
            let vals: Vec<f64> = (0..grid.n_faces(d)).map(|_| rng.gen_range(-1.0..1.0)).collect();
            FaceField::from_interior(grid, d, |id| vals[id])
        })
        .collect();
    VelocityField::new(comps)
}

/// Infinitely smooth bump supported on `(lo, hi)`, value 1 at the center.
pub fn bump1d(t: f64, lo: f64, hi: f64) -> f64 {
    let s = (2.0 * t - lo - hi) / (hi - lo);
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - s * s)).exp()
    }
}

/// Largest all-active lattice sub-box, grown greedily from the most
/// central active cell. Deterministic; used to place compactly supported
/// test data strictly inside non-convex domains.
fn active_subbox(grid: &MacGrid) -> ([usize; 3], [usize; 3]) {
    let dim = grid.dim;
    // seed: active cell nearest the centroid of the active set
    let mut centroid = [0.0f64; 3];
    for c in &grid.cells {
        for a in 0..dim {
            centroid[a] += c.center[a];
        }
    }
    for a in 0..dim {
        centroid[a] /= grid.n_cells() as f64;
    }
    let seed = grid
        .cells
        .iter()
        .min_by(|a, b| {
            let da: f64 = (0..dim).map(|k| (a.center[k] - centroid[k]).powi(2)).sum();
            let db: f64 = (0..dim).map(|k| (b.center[k] - centroid[k]).powi(2)).sum();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    let mut lo = seed.lattice;
    let mut hi = seed.lattice;
    let all_active = |lo: [usize; 3], hi: [usize; 3], grid: &MacGrid| -> bool {
        for i0 in lo[0]..=hi[0] {
            for i1 in lo[1]..=hi[1] {
                for i2 in lo[2]..=hi[2] {
                    if grid.cell_at_lattice([i0, i1, i2]).is_none() {
                        return false;
                    }
                }
            }
        }
        true
    };
    let mut grew = true;
    while grew {
        grew = false;
        for a in 0..dim {
            if hi[a] + 1 < grid.n[a] {
                let mut slab_lo = lo;
                let mut slab_hi = hi;
                slab_lo[a] = hi[a] + 1;
                slab_hi[a] = hi[a] + 1;
                if all_active(slab_lo, slab_hi, grid) {
                    hi[a] += 1;
                    grew = true;
                }
            }
            if lo[a] > 0 {
                let mut slab_lo = lo;
                let mut slab_hi = hi;
                slab_lo[a] = lo[a] - 1;
                slab_hi[a] = lo[a] - 1;
                if all_active(slab_lo, slab_hi, grid) {
                    lo[a] -= 1;
                    grew = true;
                }
            }
        }
    }
    (lo, hi)
}

/// Grid-line-aligned support box strictly inside the domain: the active
/// sub-box inset by one cell layer where possible.
fn aligned_support(grid: &MacGrid) -> ([f64; 3], [f64; 3]) {
    let (mut blo, mut bhi) = active_subbox(grid);
    for a in 0..grid.dim {
        if bhi[a] - blo[a] >= 2 {
            blo[a] += 1;
            bhi[a] -= 1;
        }
    }
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for a in 0..grid.dim {
        lo[a] = grid.lines[a][blo[a]];
        hi[a] = grid.lines[a][bhi[a] + 1];
    }
    (lo, hi)
}

/// Cubic-power bump supported exactly on `[lo, hi]`, with its derivative.
fn poly_bump(lo: f64, hi: f64) -> (impl Fn(f64) -> f64 + Copy, impl Fn(f64) -> f64 + Copy) {
    let norm = ((hi - lo) * 0.5).powi(6);
    let b = move |t: f64| {
        if t <= lo || t >= hi {
            0.0
        } else {
            ((t - lo) * (hi - t)).powi(3) / norm
        }
    };
    let db = move |t: f64| {
        if t <= lo || t >= hi {
            0.0
        } else {
            3.0 * ((t - lo) * (hi - t)).powi(2) * (lo + hi - 2.0 * t) / norm
        }
    };
    (b, db)
}

/// Smooth compactly supported test vector fields whose support boundary
/// lies on grid lines (so fixed-order quadrature integrates them without
/// remainder), together with their exact divergences. Each component is a
/// separable product, which keeps the derivatives in closed form.
pub fn smooth_test_fields(
    grid: &MacGrid,
    count: usize,
) -> Vec<(AnalyticVector, AnalyticScalar)> {
    let dim = grid.dim;
    let (lo, hi) = aligned_support(grid);
    (0..count)
        .map(|k| {
            // per-component, per-axis factors f(t) = bump(t) (1 + c1 t + c2 t^2);
            // everything stays polynomial of degree <= 8, so the default
            // fifth-order rule integrates the fields without remainder
            let factor = move |a: usize, c: usize| {
                let (b, db) = poly_bump(lo[a], hi[a]);
                let c1 = 0.4 * (1.0 + ((k + 2 * c + 3 * a) % 5) as f64) - 1.0;
                let c2 = 0.3 * (((k + c + 2 * a) % 4) as f64) - 0.45;
                let f = move |t: f64| b(t) * (1.0 + c1 * t + c2 * t * t);
                let df = move |t: f64| {
                    db(t) * (1.0 + c1 * t + c2 * t * t) + b(t) * (c1 + 2.0 * c2 * t)
                };
                (f, df)
            };
            let comps: Vec<AnalyticScalar> = (0..dim)
                .map(|c| {
                    AnalyticScalar::new(move |p: &[f64; 3]| {
                        let mut v = 1.0;
                        for a in 0..dim {
                            v *= (factor(a, c).0)(p[a]);
                        }
                        v
                    })
                    .with_order(5)
                })
                .collect();
            let div = AnalyticScalar::new(move |p: &[f64; 3]| {
                let mut acc = 0.0;
                for c in 0..dim {
                    let mut term = 1.0;
                    for a in 0..dim {
                        let (f, df) = factor(a, c);
                        term *= if a == c { df(p[a]) } else { f(p[a]) };
                    }
                    acc += term;
                }
                acc
            })
            .with_order(5);
            (AnalyticVector::new(comps), div)
        })
        .collect()
}

/// Evaluate the discrete identity suite on pseudorandom fields.
pub fn run_identity_suite(grid: &Arc<MacGrid>, trials: usize, seed: u64) -> IdentityReport {
    assert!(trials >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut duality = IdentityDefect { name: "div_grad_duality", max_abs: 0.0, max_rel: 0.0 };
    let mut hodge = IdentityDefect { name: "grad_div_curl_identity", max_abs: 0.0, max_rel: 0.0 };
    let mut grad_ip =
        IdentityDefect { name: "gradient_inner_product", max_abs: 0.0, max_rel: 0.0 };
    let mut lap_ip =
        IdentityDefect { name: "laplacian_inner_product", max_abs: 0.0, max_rel: 0.0 };
    let mut pot_div = IdentityDefect { name: "potential_divergence", max_abs: 0.0, max_rel: 0.0 };
    let mut pot_curl = IdentityDefect { name: "potential_curl", max_abs: 0.0, max_rel: 0.0 };
    let mut diamond = IdentityDefect { name: "diamond_mass_balance", max_abs: 0.0, max_rel: 0.0 };
    let mut fortin = IdentityDefect { name: "fortin_divergence", max_abs: 0.0, max_rel: 0.0 };

    let mass_params = SchemeParams {
        gamma: 1.4,
        mu: 0.1,
        lambda: 0.0,
        mass: 1.0,
        cs: 0.05,
        alpha: 2.0,
        forcing: Forcing::zero(grid.dim),
    };

    for _ in 0..trials {
        let q = random_cell_field(grid, &mut rng);
        let v = random_velocity(grid, &mut rng);
        let w = random_velocity(grid, &mut rng);

        // duality of divergence and gradient
        {
            let dv = div_cells(&v);
            let lhs: f64 = q
                .values
                .iter()
                .zip(&dv.values)
                .zip(&grid.cells)
                .map(|((a, b), c)| a * b * c.measure)
                .sum();
            let rhs = grad_faces(&q).dot(&v);
            let defect = (lhs + rhs).abs();
            duality.max_abs = duality.max_abs.max(defect);
            duality.max_rel = duality.max_rel.max(defect / (1.0 + q.norm_l2() * v.norm_l2()));
        }

        // gradient contraction decomposes into divergence and curl parts
        {
            let full = grad_full(&v).contract(&grad_full(&w));
            let dv = div_cells(&v);
            let dw = div_cells(&w);
            let divs: f64 = dv
                .values
                .iter()
                .zip(&dw.values)
                .zip(&grid.cells)
                .map(|((a, b), c)| a * b * c.measure)
                .sum();
            let curls: f64 = curl_faces(&v)
                .iter()
                .zip(curl_faces(&w).iter())
                .map(|(a, b)| a.integral_of_product(b))
                .sum();
            let defect = (full - divs - curls).abs();
            hodge.max_abs = hodge.max_abs.max(defect);
            hodge.max_rel = hodge.max_rel.max(defect / (1.0 + full.abs()));
        }

        // the gradient contraction is the zero-trace inner product
        {
            let lhs = grad_full(&v).contract(&grad_full(&w));
            let rhs = h1_inner(&v, &w);
            let defect = (lhs - rhs).abs();
            grad_ip.max_abs = grad_ip.max_abs.max(defect);
            grad_ip.max_rel = grad_ip.max_rel.max(defect / (1.0 + rhs.abs()));
        }

        // so is the pairing with the negative Laplacian
        {
            let lhs = laplacian_faces(&v).dot(&w);
            let rhs = h1_inner(&v, &w);
            let defect = (lhs - rhs).abs();
            lap_ip.max_abs = lap_ip.max_abs.max(defect);
            lap_ip.max_rel = lap_ip.max_rel.max(defect / (1.0 + rhs.abs()));
        }

        // potential fields: divergence recovers the source, curl vanishes
        {
            let rho = random_cell_field(grid, &mut rng);
            let wpot = solve_primal_poisson(&rho).expect("positive definite system");
            let mut vpot = grad_faces_ext(&wpot);
            vpot.scale(-1.0);
            let dv = div_cells(&vpot);
            let defect = dv
                .values
                .iter()
                .zip(&rho.values)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            pot_div.max_abs = pot_div.max_abs.max(defect);
            pot_div.max_rel = pot_div.max_rel.max(defect / rho.norm_inf().max(1e-300));

            let scale = vpot.norm_inf().max(1.0) / grid.mesh_size();
            for comp in curl_faces(&vpot) {
                pot_curl.max_abs = pot_curl.max_abs.max(comp.norm_inf());
                pot_curl.max_rel = pot_curl.max_rel.max(comp.norm_inf() / scale);
            }
        }

        // diamond-cell mass balance for an upwind mass solution
        {
            let u = random_velocity(grid, &mut rng);
            let sys = assemble_mass_system(&u, &mass_params, 1.0, None);
            let rho = CellField::from_values(
                grid,
                BandLu::factor(&sys.matrix).expect("M-matrix").solve(&sys.rhs),
            );
            let s = State { u, rho };
            let (defect, scale) = diamond_defect(&s, &mass_params, 1.0, None);
            diamond.max_abs = diamond.max_abs.max(defect);
            diamond.max_rel = diamond.max_rel.max(defect / scale);
        }
    }

    // face-mean interpolation commutes with the divergence
    for (field, div_exact) in smooth_test_fields(grid, 4) {
        let interp = fortin_interpolate(&field, grid).expect("zero-trace data");
        let lhs = div_cells(&interp);
        let rhs = project_cells(&div_exact, grid);
        let defect = lhs
            .values
            .iter()
            .zip(&rhs.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        fortin.max_abs = fortin.max_abs.max(defect);
        fortin.max_rel = fortin.max_rel.max(defect / (1.0 + rhs.norm_inf()));
    }

    IdentityReport {
        grid_desc: format!(
            "dim {} lattice {:?} cells {}",
            grid.dim,
            &grid.n[..grid.dim],
            grid.n_cells()
        ),
        seed,
        trials,
        entries: vec![duality, hodge, grad_ip, lap_ip, pot_div, pot_curl, diamond, fortin],
    }
}

/// The canonical grid family for verification: squares, anisotropic and
/// graded rectangles, an L-shape, a staircase, and a small cube.
pub fn verification_grids() -> Vec<Arc<MacGrid>> {
    let staircase = DomainSpec {
        dimension: 2,
        boxes: vec![
            BoxSpec::new_2d([0.0, 0.0], [1.0, 0.5]),
            BoxSpec::new_2d([0.5, 0.5], [1.5, 1.0]),
        ],
    };
    vec![
        Arc::new(build_grid(&DomainSpec::unit_square(), &Refinement::uniform_2d(8, 8)).unwrap()),
        Arc::new(build_grid(&DomainSpec::unit_square(), &Refinement::uniform_2d(7, 3)).unwrap()),
        Arc::new(
            build_grid(
                &DomainSpec::unit_square(),
                &Refinement::Lines(vec![
                    vec![0.0, 0.1, 0.25, 0.45, 0.7, 0.85, 1.0],
                    vec![0.0, 0.2, 0.35, 0.6, 1.0],
                ]),
            )
            .unwrap(),
        ),
        Arc::new(build_grid(&DomainSpec::l_shape(), &Refinement::uniform_2d(8, 4)).unwrap()),
        Arc::new(build_grid(&staircase, &Refinement::uniform_2d(6, 4)).unwrap()),
        Arc::new(build_grid(&DomainSpec::unit_cube(), &Refinement::uniform_3d(4, 3, 3)).unwrap()),
    ]
}

/// Manufactured problem: exact fields plus the matching sources.
pub struct MmsProblem {
    pub name: String,
    pub domain: DomainSpec,
    pub exact_u: AnalyticVector,
    pub exact_rho: AnalyticScalar,
    pub force: AnalyticVector,
    /// Right-side extension of the mass balance; `None` keeps the balance
    /// in its source-free form.
    pub mass_source: Option<AnalyticScalar>,
}

impl MmsProblem {
    /// Resting gas at the mean density with no force: exactly representable.
    pub fn rest(dim: usize) -> MmsProblem {
        let domain = if dim == 2 { DomainSpec::unit_square() } else { DomainSpec::unit_cube() };
        MmsProblem {
            name: "rest".into(),
            domain,
            exact_u: AnalyticVector::constant(&vec![0.0; dim]),
            exact_rho: AnalyticScalar::constant(1.0),
            force: AnalyticVector::constant(&vec![0.0; dim]),
            mass_source: None,
        }
    }

    /// Divergence-free polynomial vortex with a trigonometric density on
    /// the unit square; needs the mass-source extension.
    pub fn trig2d(gamma: f64, mu: f64, mass: f64) -> MmsProblem {
        let pi = std::f64::consts::PI;
        // stream function (x(1-x)y(1-y))^2 gives zero-trace velocity
        let q = |t: f64| (t * (1.0 - t)) * (t * (1.0 - t));
        let dq = |t: f64| 2.0 * t * (1.0 - t) * (1.0 - 2.0 * t);
        let ddq =
            |t: f64| 2.0 * ((1.0 - 2.0 * t) * (1.0 - 2.0 * t) - 2.0 * t * (1.0 - t));
        let dddq = |t: f64| -12.0 * (1.0 - 2.0 * t);
        let amp = 10.0;
        let c = mass / (1.0 + 0.1 * 4.0 / (pi * pi));
        let rho = move |p: &[f64; 3]| c * (1.0 + 0.1 * (pi * p[0]).sin() * (pi * p[1]).sin());
        let drho = move |p: &[f64; 3]| {
            [
                0.1 * c * pi * (pi * p[0]).cos() * (pi * p[1]).sin(),
                0.1 * c * pi * (pi * p[0]).sin() * (pi * p[1]).cos(),
            ]
        };
        let u1 = move |p: &[f64; 3]| amp * q(p[0]) * dq(p[1]);
        let u2 = move |p: &[f64; 3]| -amp * dq(p[0]) * q(p[1]);
        let force = move |p: &[f64; 3], i: usize| {
            let (x, y) = (p[0], p[1]);
            let g = drho(p);
            let u = [u1(p), u2(p)];
            let u_dot_grad_rho = u[0] * g[0] + u[1] * g[1];
            let conv_grad = if i == 0 {
                amp * amp * q(x) * dq(x) * (dq(y) * dq(y) - q(y) * ddq(y))
            } else {
                amp * amp * q(y) * dq(y) * (dq(x) * dq(x) - q(x) * ddq(x))
            };
            let lap = if i == 0 {
                amp * (ddq(x) * dq(y) + q(x) * dddq(y))
            } else {
                -amp * (dddq(x) * q(y) + dq(x) * ddq(y))
            };
            let r = rho(p);
            let dp = gamma * r.powf(gamma - 1.0) * g[i];
            u[i] * u_dot_grad_rho + r * conv_grad - mu * lap + dp
        };
        MmsProblem {
            name: "trig2d".into(),
            domain: DomainSpec::unit_square(),
            exact_u: AnalyticVector::new(vec![
                AnalyticScalar::new(u1).with_order(7),
                AnalyticScalar::new(u2).with_order(7),
            ]),
            exact_rho: AnalyticScalar::new(rho).with_order(7),
            force: AnalyticVector::new(vec![
                AnalyticScalar::new(move |p: &[f64; 3]| force(p, 0)).with_order(7),
                AnalyticScalar::new(move |p: &[f64; 3]| force(p, 1)).with_order(7),
            ]),
            mass_source: Some(
                AnalyticScalar::new(move |p: &[f64; 3]| {
                    let g = drho(p);
                    u1(p) * g[0] + u2(p) * g[1]
                })
                .with_order(7),
            ),
        }
    }

    pub fn by_name(name: &str, gamma: f64, mu: f64, mass: f64, dim: usize) -> Option<MmsProblem> {
        match name {
            "rest" => Some(MmsProblem::rest(dim)),
            "trig2d" => Some(MmsProblem::trig2d(gamma, mu, mass)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyRow {
    pub level: usize,
    pub h: f64,
    pub err_u_l2: f64,
    pub err_u_h1: f64,
    pub err_rho_l2: f64,
    pub err_p_l2: f64,
}

#[derive(Debug, Clone)]
pub struct ConvergenceStudy {
    pub rows: Vec<StudyRow>,
    /// Observed orders between consecutive rows (log ratios), reported
    /// descriptively; no rate is asserted anywhere.
    pub order_u: Vec<f64>,
    pub order_rho: Vec<f64>,
    pub failures: Vec<(usize, String)>,
}

impl ConvergenceStudy {
    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("level,h,err_u_l2,err_u_h1,err_rho_l2,err_p_l2,order_u,order_rho\n");
        for (i, r) in self.rows.iter().enumerate() {
            let fmt_order =
                |v: Option<&f64>| v.map(|o| format!("{:.6}", o)).unwrap_or_default();
            writeln!(
                s,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
                r.level,
                r.h,
                r.err_u_l2,
                r.err_u_h1,
                r.err_rho_l2,
                r.err_p_l2,
                fmt_order(self.order_u.get(i.wrapping_sub(1))),
                fmt_order(self.order_rho.get(i.wrapping_sub(1)))
            )
            .unwrap();
        }
        s
    }

    pub fn errors_strictly_decreasing(&self) -> bool {
        !self.rows.is_empty()
            && self
                .rows
                .windows(2)
                .all(|w| w[1].err_u_l2 < w[0].err_u_l2 && w[1].err_rho_l2 < w[0].err_rho_l2)
    }
}

pub enum StudyMode {
    Mms(MmsProblem),
    /// Compare each level against the next-finer solve injected onto it.
    Reference,
}

/// Velocity restriction from a once-refined grid: measure-weighted mean of
/// the child faces lying on each coarse face.
pub fn inject_velocity(fine: &VelocityField, coarse: &Arc<MacGrid>) -> VelocityField {
    let fg = fine.grid().clone();
    let comps = (0..coarse.dim)
        .map(|dir| {
            FaceField::from_interior(coarse, dir, |fid| {
                let f = &coarse.faces[dir][fid];
                let mut acc = 0.0;
                let mut meas = 0.0;
                let mut lat = [0usize; 3];
                lat[dir] = 2 * f.lattice[dir];
                let others: Vec<usize> = (0..coarse.dim).filter(|&a| a != dir).collect();
                let combos = 1usize << others.len();
                for m in 0..combos {
                    for (bit, &a) in others.iter().enumerate() {
                        lat[a] = 2 * f.lattice[a] + ((m >> bit) & 1);
                    }
                    if let Some(cf) = fg.face_at_lattice(dir, lat) {
                        let child = &fg.faces[dir][cf];
                        acc += child.measure * fine.comps[dir].values[cf];
                        meas += child.measure;
                    }
                }
                if meas > 0.0 {
                    acc / meas
                } else {
                    0.0
                }
            })
        })
        .collect();
    VelocityField::new(comps)
}

/// Cell restriction from a once-refined grid: volume mean of child cells.
pub fn inject_cells(fine: &CellField, coarse: &Arc<MacGrid>) -> CellField {
    let fg = &fine.grid;
    let values = coarse
        .cells
        .iter()
        .map(|cell| {
            let mut acc = 0.0;
            let mut vols = 0.0;
            let mut lat = [0usize; 3];
            let combos = 1usize << coarse.dim;
            for m in 0..combos {
                for a in 0..coarse.dim {
                    lat[a] = 2 * cell.lattice[a] + ((m >> a) & 1);
                }
                if let Some(cid) = fg.cell_at_lattice(lat) {
                    acc += fg.cells[cid].measure * fine.values[cid];
                    vols += fg.cells[cid].measure;
                }
            }
            acc / vols
        })
        .collect();
    CellField::from_values(coarse, values)
}

fn refine(refinement: &Refinement, times: usize) -> Refinement {
    match refinement {
        Refinement::Uniform(counts) => {
            Refinement::Uniform([counts[0] << times, counts[1] << times, counts[2] << times])
        }
        Refinement::Lines(lines) => {
            let mut out = lines.clone();
            for _ in 0..times {
                out = out
                    .iter()
                    .map(|arr| {
                        let mut r = Vec::with_capacity(arr.len() * 2 - 1);
                        for w in arr.windows(2) {
                            r.push(w[0]);
                            r.push(0.5 * (w[0] + w[1]));
                        }
                        r.push(*arr.last().unwrap());
                        r
                    })
                    .collect();
            }
            Refinement::Lines(out)
        }
    }
}

/// Run a grid-refinement study. In manufactured mode the exact fields are
/// interpolated onto each level; in reference mode each level is compared
/// with the next-finer solve (one extra solve past the last row).
pub fn run_convergence_study(
    domain: &DomainSpec,
    base: &Refinement,
    levels: usize,
    mode: &StudyMode,
    params: &SchemeParams,
    config: &SolverConfig,
) -> ConvergenceStudy {
    assert!(levels >= 2, "a study needs at least two levels");
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let n_solves = match mode {
        StudyMode::Mms(_) => levels,
        StudyMode::Reference => levels + 1,
    };
    let mut solves: Vec<Option<(Arc<MacGrid>, SolveReport)>> = Vec::new();
    for level in 0..n_solves {
        let grid = match build_grid(domain, &refine(base, level)) {
            Ok(g) => Arc::new(g),
            Err(e) => {
                failures.push((level, e.to_string()));
                solves.push(None);
                continue;
            }
        };
        let mut p = params.clone();
        let mut c = config.clone();
        if let StudyMode::Mms(problem) = mode {
            p.forcing = Forcing::Analytic(problem.force.clone());
            if let Some(src) = &problem.mass_source {
                let mut g = project_cells(src, &grid);
                // the continuous source has zero mean; remove the
                // quadrature remainder so total mass stays pinned
                let shift = g.integral() / grid.volume;
                for v in &mut g.values {
                    *v -= shift;
                }
                c.mass_source = Some(g);
            }
        }
        let report = solve(&grid, &p, &c);
        if !report.converged() {
            failures.push((level, format!("{:?}", report.status)));
            solves.push(None);
            continue;
        }
        solves.push(Some((grid, report)));
    }

    for level in 0..levels {
        let (grid, report) = match &solves[level] {
            Some(t) => t,
            None => continue,
        };
        let state = &report.state;
        let (u_ref, rho_ref, p_ref) = match mode {
            StudyMode::Mms(problem) => {
                let u = fortin_interpolate(&problem.exact_u, grid).expect("zero-trace exact");
                let rho = project_cells(&problem.exact_rho, grid);
                let gamma = params.gamma;
                let er = problem.exact_rho.clone();
                let p = project_cells(
                    &AnalyticScalar::new(move |x: &[f64; 3]| er.eval(x).powf(gamma))
                        .with_order(7),
                    grid,
                );
                (u, rho, p)
            }
            StudyMode::Reference => {
                let (_, finer) = match &solves[level + 1] {
                    Some(t) => t,
                    None => continue,
                };
                (
                    inject_velocity(&finer.state.u, grid),
                    inject_cells(&finer.state.rho, grid),
                    inject_cells(&finer.state.pressure(params.gamma), grid),
                )
            }
        };
        let mut du = state.u.clone();
        du.axpy(-1.0, &u_ref);
        let mut drho = state.rho.clone();
        drho.axpy(-1.0, &rho_ref);
        let mut dp = state.pressure(params.gamma);
        dp.axpy(-1.0, &p_ref);
        rows.push(StudyRow {
            level,
            h: grid.mesh_size(),
            err_u_l2: du.norm_l2(),
            err_u_h1: h1_norm(&du),
            err_rho_l2: drho.norm_l2(),
            err_p_l2: dp.norm_l2(),
        });
    }

    let order = |get: fn(&StudyRow) -> f64, rows: &[StudyRow]| -> Vec<f64> {
        rows.windows(2)
            .map(|w| {
                let (e0, e1) = (get(&w[0]), get(&w[1]));
                if e0 > 0.0 && e1 > 0.0 {
                    (e0 / e1).log2() / (w[0].h / w[1].h).log2()
                } else {
                    f64::NAN
                }
            })
            .collect()
    };
    let order_u = order(|r| r.err_u_l2, &rows);
    let order_rho = order(|r| r.err_rho_l2, &rows);
    ConvergenceStudy { rows, order_u, order_rho, failures }
}

/// One row of the stability-constant table.
#[derive(Debug, Clone)]
pub struct StabilityRow {
    pub level: usize,
    pub h: f64,
    pub u_h1: f64,
    pub p_l2: f64,
    pub rho_l2gamma: f64,
    pub weak_bv_beta2: f64,
    pub weak_bv_gamma: f64,
    pub sobolev_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct StabilityTable {
    pub rows: Vec<StabilityRow>,
}

impl StabilityTable {
    /// No quantity may grow by more than the fraction `tol` between the
    /// two finest levels (tiny quantities compare in absolute terms).
    pub fn bounded(&self, tol: f64) -> bool {
        if self.rows.len() < 2 {
            return true;
        }
        let a = &self.rows[self.rows.len() - 2];
        let b = &self.rows[self.rows.len() - 1];
        let ok = |x: f64, y: f64| y <= x * (1.0 + tol) + 1e-12;
        ok(a.u_h1, b.u_h1)
            && ok(a.p_l2, b.p_l2)
            && ok(a.rho_l2gamma, b.rho_l2gamma)
            && ok(a.weak_bv_beta2, b.weak_bv_beta2)
            && ok(a.weak_bv_gamma, b.weak_bv_gamma)
            && ok(a.sobolev_ratio, b.sobolev_ratio)
    }

    pub fn to_text(&self) -> String {
        let mut s =
            String::from("level h u_h1 p_l2 rho_l2gamma weak_bv_beta2 weak_bv_gamma sobolev\n");
        for r in &self.rows {
            writeln!(
                s,
                "{} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e}",
                r.level,
                r.h,
                r.u_h1,
                r.p_l2,
                r.rho_l2gamma,
                r.weak_bv_beta2,
                r.weak_bv_gamma,
                r.sobolev_ratio
            )
            .unwrap();
        }
        s
    }
}

/// Solve across a refinement family and record solution norms, jump sums
/// and the discrete Sobolev ratio.
pub fn probe_stability_constants(
    domain: &DomainSpec,
    base: &Refinement,
    levels: usize,
    params: &SchemeParams,
    config: &SolverConfig,
) -> Result<StabilityTable, String> {
    let mut rows = Vec::new();
    for level in 0..levels {
        let grid =
            Arc::new(build_grid(domain, &refine(base, level)).map_err(|e| e.to_string())?);
        let report = solve(&grid, params, config);
        if !report.converged() {
            return Err(format!("level {}: {:?}", level, report.status));
        }
        let s = &report.state;
        let q = if grid.dim == 2 { 4.0 } else { 6.0 };
        let h1 = h1_norm(&s.u);
        let sobolev_ratio = if h1 > 1e-14 { velocity_norm_lq(&s.u, q) / h1 } else { 0.0 };
        rows.push(StabilityRow {
            level,
            h: grid.mesh_size(),
            u_h1: h1,
            p_l2: s.pressure(params.gamma).norm_l2(),
            rho_l2gamma: s.rho.norm_lp(2.0 * params.gamma),
            weak_bv_beta2: weak_bv_sum(&s.rho, &s.u, 2.0).map_err(|e| e.to_string())?,
            weak_bv_gamma: weak_bv_sum(&s.rho, &s.u, params.gamma).map_err(|e| e.to_string())?,
            sobolev_ratio,
        });
    }
    Ok(StabilityTable { rows })
}

/// Fitted constant of the localized elliptic-regularity estimate: ratio of
/// the weighted-potential gradient norm to the source norm, per grid.
pub fn probe_local_regularity(grids: &[Arc<MacGrid>], trials: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grids
        .iter()
        .map(|grid| {
            let (lo, hi) = aligned_support(grid);
            let dim = grid.dim;
            let phi = AnalyticScalar::new(move |p: &[f64; 3]| {
                let mut b = 1.0;
                for a in 0..dim {
                    b *= bump1d(p[a], lo[a], hi[a]);
                }
                b
            });
            let phi_m = interpolate_phi(&phi, grid);
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let rho = random_cell_field(grid, &mut rng);
                let w = solve_primal_poisson(&rho).expect("positive definite");
                let prod = CellField::from_values(
                    grid,
                    w.values.iter().zip(&phi_m.values).map(|(a, b)| a * b).collect(),
                );
                let grad = grad_faces_ext(&prod);
                worst = worst.max(h1_norm(&grad) / rho.norm_l2().max(1e-300));
            }
            worst
        })
        .collect()
}

/// Fitted constant of the discrete Sobolev inequality on random zero-trace
/// fields, per grid.
pub fn probe_sobolev_constant(grids: &[Arc<MacGrid>], trials: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grids
        .iter()
        .map(|grid| {
            let q = if grid.dim == 2 { 4.0 } else { 6.0 };
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let u = random_velocity(grid, &mut rng);
                worst = worst.max(velocity_norm_lq(&u, q) / h1_norm(&u).max(1e-300));
            }
            worst
        })
        .collect()
}

/// The gravity benchmark used across the verification suites.
pub fn gravity_benchmark_params(grid: &MacGrid) -> SchemeParams {
    let (mu, mass, alpha) = (0.1, 1.0, 2.0);
    let mut forcing = vec![0.0; grid.dim];
    forcing[1] = -1.0;
    SchemeParams {
        gamma: 1.4,
        mu,
        lambda: 0.0,
        mass,
        cs: SchemeParams::auto_cs(grid, mu, mass, alpha),
        alpha,
        forcing: Forcing::Constant(forcing),
    }
}
