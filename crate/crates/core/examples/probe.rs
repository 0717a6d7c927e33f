use macns_core::grid::{build_grid, DomainSpec, Refinement};
use macns_core::ops::CoupledLayout;
use macns_core::scheme::*;
use macns_core::solver::*;
use std::sync::Arc;

fn main() {
    let g = Arc::new(
        build_grid(&DomainSpec::unit_square(), &Refinement::uniform_2d(16, 16)).unwrap(),
    );
    let (mu, mass, alpha) = (0.1, 1.0, 2.0);
    let params = SchemeParams {
        gamma: 1.4,
        mu,
        lambda: 0.0,
        mass,
        cs: SchemeParams::auto_cs(&g, mu, mass, alpha),
        alpha,
        forcing: Forcing::Constant(vec![0.0, -1.0]),
    };
    let config = SolverConfig::default();
    let layout = CoupledLayout::new(&g);
    let mut s = solve_zeta0(&g, &params, &config).unwrap();
    println!("zeta0: |u|_inf = {}", s.u.norm_inf());
    for zeta in [0.25f64, 0.5, 0.75, 1.0] {
        let mut done = false;
        for it in 1..=60 {
            let mut omega = 0.7f64;
            let mut stepped = None;
            for _ in 0..6 {
                let cand = picard_step(&s, &params, zeta, omega, &config, &layout).unwrap();
                if cand.rho.min() > 0.0 {
                    stepped = Some(cand);
                    break;
                }
                omega *= 0.5;
            }
            s = stepped.expect("positivity unreachable");
            let rm = residual_mass(&s, &params, zeta, None).norm_inf();
            let ru = residual_momentum(&s, &params, zeta).norm_inf();
            let rho_max = s.rho.values.iter().cloned().fold(f64::MIN, f64::max);
            if it <= 8 || it % 10 == 0 || (rm < 1e-9 && ru < 1e-9) {
                println!(
                    "zeta {:4}: it {:2} (omega {:.3}): rho in [{:.3e}, {:.3e}]  |u| = {:.3e}  r_mass = {:.3e}  r_mom = {:.3e}",
                    zeta, it, omega, s.rho.min(), rho_max, s.u.norm_inf(), rm, ru
                );
            }
            if rm < 1e-9 && ru < 1e-9 {
                done = true;
                break;
            }
        }
        println!("zeta {} converged: {}", zeta, done);
    }
}
