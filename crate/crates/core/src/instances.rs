//! Ready-made problem instances: the six-agent example that ships with the
//! CLI, its reference saddle points, and a generator of random convex
//! instances used by property tests and the acceptance suite.

use rand::Rng;

use crate::problem::{PrimalDualPoint, Problem};

/// Minimizers of the unconstrained quartic objectives `(x_i - t_i)^4`.
pub const SIX_AGENT_TARGETS: [f64; 6] = [-3.0, 6.0, -5.0, 4.0, 2.0, -6.0];

pub const SIX_AGENT_CONSTRAINTS: [&str; 3] = ["3*x1^2 + x4^4 - 50", "x3^6 + x6^4 - 100", "9*x2 + x5^6 - 100"];

/// Stepsize and ball radius used with the six-agent example.
pub const SIX_AGENT_RHO: f64 = 0.0017;
pub const SIX_AGENT_EPSILON: f64 = 0.3;
pub const SIX_AGENT_TIMESTEPS: u64 = 50_000;

pub fn six_agent_objectives() -> Vec<String> {
    SIX_AGENT_TARGETS.iter().enumerate().map(|(i, t)| format!("(x{} - {t:.1})^4", i + 1)).collect()
}

pub fn six_agent_problem() -> Problem {
    Problem::parse(6, &six_agent_objectives(), &SIX_AGENT_CONSTRAINTS.map(String::from)).expect("valid instance")
}

/// Four-decimal reference saddle shipped with the example config.
///
/// It is not a stationary point of [`six_agent_problem`]: with its third
/// multiplier at zero, `x2` and `x5` would have to sit at their targets.
pub fn rounded_reference_saddle() -> PrimalDualPoint {
    PrimalDualPoint::new(vec![-2.1278, 5.7178, -1.7745, 2.4566, 1.6395, -2.8798], vec![0.2462, 1.2718, 0.0])
}

/// KKT point of [`six_agent_problem`] with all three constraints active,
/// solved by Newton's method at 40 significant digits and rounded to `f64`.
pub fn kkt_saddle() -> PrimalDualPoint {
    PrimalDualPoint::new(
        vec![
            -2.0886723151617996,
            5.958766061766149,
            -1.7744470660604144,
            2.464863681634662,
            1.8954306897551059,
            -2.879862410207367,
        ],
        vec![0.24158063684415174, 1.2717625132990569, 3.115888655512518e-05],
    )
}

/// A random strictly convex instance together with a stepsize that keeps the
/// Uzawa iteration stable on it.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub problem: Problem,
    pub objectives: Vec<String>,
    pub constraints: Vec<String>,
    pub rho: f64,
}

/// Draws an instance with `1..=max_agents` agents and `0..=max_constraints`
/// constraints.
///
/// Objectives are `a (x - c)^2 + b (x - d)^4` with `a > 0`, `b >= 0`, hence
/// strictly convex. Each constraint is a positive combination of even powers
/// of shifted variables plus an affine term, hence convex, and is offset so
/// the origin is strictly feasible.
pub fn random_convex<R: Rng + ?Sized>(rng: &mut R, max_agents: usize, max_constraints: usize) -> RandomInstance {
    let n = rng.random_range(1..=max_agents.max(1));
    let m = rng.random_range(0..=max_constraints);
    let round = |v: f64| (v * 100.0).round() / 100.0;

    let objectives: Vec<String> = (1..=n)
        .map(|i| {
            let a = round(rng.random_range(0.5..2.0));
            let b = round(rng.random_range(0.0..0.5));
            let c = round(rng.random_range(-3.0..3.0));
            let d = round(rng.random_range(-3.0..3.0));
            format!("{a}*(x{i} - ({c}))^2 + {b}*(x{i} - ({d}))^4")
        })
        .collect();

    let constraints: Vec<String> = (0..m)
        .map(|_| {
            let mut terms = Vec::new();
            let mut at_origin = 0.0;
            for i in 1..=n {
                if rng.random_bool(0.6) || (i == n && terms.is_empty()) {
                    let w = round(rng.random_range(0.2..1.5));
                    let s = round(rng.random_range(-1.0..1.0));
                    let p = if rng.random_bool(0.5) { 2 } else { 4 };
                    at_origin += w * s.powi(p);
                    terms.push(format!("{w}*(x{i} - ({s}))^{p}"));
                }
                if rng.random_bool(0.3) {
                    let l = round(rng.random_range(-1.0..1.0));
                    terms.push(format!("{l}*x{i}"));
                }
            }
            let slack = round(rng.random_range(0.5..3.0));
            let offset = ((at_origin + slack) * 1e6).round() / 1e6;
            format!("{} - {offset}", terms.join(" + "))
        })
        .collect();

    let problem = Problem::parse(n, &objectives, &constraints).expect("generator emits valid text");
    RandomInstance { problem, objectives, constraints, rho: 1e-3 }
}
