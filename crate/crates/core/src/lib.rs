//! Simulation of a cloud-coordinated multi-agent Uzawa iteration for
//! constrained convex optimization.
//!
//! Each agent owns one scalar decision variable and a private objective.
//! A cloud node holds the coupling constraints, updates the Lagrange
//! multipliers, and relays state between agents. The crate provides the
//! symbolic layer ([`expr`]), problem definitions ([`problem`]), the
//! centralized reference iteration ([`uzawa`]), the lockstep message-passing
//! simulator ([`protocol`]), stepsize estimation ([`stepsize`]) and Lyapunov
//! diagnostics ([`analysis`]).
//!
//! ```
//! use cloud_uzawa::{init_network, run, solve_saddle, NullSink, PrimalDualPoint, Problem, UzawaConfig};
//!
//! let p = Problem::parse(2, &["(x1 - 2)^2", "(x2 - 2)^2"], &["x1 + x2 - 2"]).unwrap();
//! let mut net = init_network(&p, &[0.0, 0.0], &[0.0], 0.05, false, 0).unwrap();
//! let snaps = run(&mut net, 3_000, &mut NullSink, None).unwrap();
//! let last = &snaps.last().unwrap().point;
//! assert!((last.x[0] - 1.0).abs() < 1e-6 && (last.mu[0] - 2.0).abs() < 1e-6);
//!
//! let cfg = UzawaConfig { rho: 0.05, max_steps: 100_000, fixed_point_tol: 1e-12 };
//! let sol = solve_saddle(&p, &PrimalDualPoint::zeros(2, 1), &cfg).unwrap();
//! assert!(sol.converged);
//! ```

pub mod analysis;
pub mod exec;
pub mod expr;
pub mod instances;
pub mod problem;
pub mod protocol;
pub mod stepsize;
pub mod uzawa;

pub use analysis::{
    classify_step, detect_entry, lyapunov, predicted_delta_v, BallConvention, BallMonitor, ConvergenceSummary,
    ConvergenceTrace, Region, Verdict,
};
pub use exec::Exec;
pub use expr::{parse_expr, Assignment, Expression};
pub use problem::{PrimalDualPoint, Problem, ProblemError};
pub use protocol::{
    init_network, relabel_for_privacy, run, NetworkState, NullSink, Phase, Snapshot, TraceRecord, TraceSink,
};
pub use stepsize::{
    estimate_gamma1, estimate_gamma2, estimate_stepsize, recommend_rho, GammaEstimates, SamplingOptions, StepsizeReport,
};
pub use uzawa::{kkt_residual, solve_saddle, uzawa_step, SaddleSolution, UzawaConfig};
