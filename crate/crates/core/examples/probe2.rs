use macns_core::grid::{build_grid, DomainSpec, Refinement};
use macns_core::scheme::*;
use macns_core::solver::*;
use std::sync::Arc;

fn main() {
    for n in [16usize, 32] {
        let g = Arc::new(
            build_grid(&DomainSpec::unit_square(), &Refinement::uniform_2d(n, n)).unwrap(),
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
        let t = std::time::Instant::now();
        let report = solve(&g, &params, &SolverConfig::default());
        println!(
            "n = {}: converged = {} in {:?}; stages {:?}; min_rho {:.3e}; mass err {:.2e}; |u|_h1 {:.4e}; energy ok {}",
            n,
            report.converged(),
            t.elapsed(),
            report.stage_iterations,
            report.diagnostics.min_rho,
            (report.diagnostics.total_mass - 1.0).abs(),
            report.diagnostics.u_h1,
            report.diagnostics.energy.satisfied,
        );
        println!("  final residuals: mass {:.2e}, momentum {:.2e}", report.final_residual_mass, report.final_residual_momentum);
    }
}
