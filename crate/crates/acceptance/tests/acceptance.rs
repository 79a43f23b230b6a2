//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cloud_uzawa::analysis::predicted_delta_v;
use cloud_uzawa::instances::{random_convex, RandomInstance};
use cloud_uzawa::protocol::{NetworkState, Phase, Snapshot};
use cloud_uzawa::{
    estimate_stepsize, init_network, lyapunov, solve_saddle, uzawa_step, BallConvention, ConvergenceTrace,
    PrimalDualPoint, Problem, SamplingOptions, UzawaConfig,
};
use cloud_uzawa_cli::{cmd_run, cmd_stepsize, load_config, parse_config, RunConfig, RunReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const EXPECTED_X_C: [f64; 6] = [-2.0887, 5.6219, -1.7744, 2.4649, 1.6271, -2.8799];
const EXPECTED_MU_C: [f64; 3] = [0.24158, 1.27176, 0.0];
const EXPECTED_V: f64 = 0.0110;
const EXPECTED_ENTRY_TIMESTEP: u64 = 1_524;
const EXPECTED_GAMMA1: f64 = 0.003799;
const EXPECTED_GAMMA2: f64 = 0.001968;

const N_RANDOM: usize = 100;
const RANDOM_SEED: u64 = 2024;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn bundled_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/configs/six_agent.toml")
}

fn bundled() -> RunConfig {
    load_config(&bundled_path()).expect("bundled config loads")
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Ticks the network, checking every node's multipliers after every tick.
/// Returns the synchronized snapshots and the smallest multiplier seen.
fn run_watching_multipliers(net: &mut NetworkState, timesteps: u64) -> (Vec<Snapshot>, f64) {
    let mut snaps = Vec::new();
    let mut min_mu = f64::INFINITY;
    for _ in 0..timesteps {
        let k = net.timestep();
        if Phase::of(k) == Phase::Update {
            snaps.push(Snapshot { step: (k / 3) as usize, timestep: k, point: net.cloud_point() });
        }
        net.tick().expect("protocol tick");
        let held = net.agents().iter().flat_map(|a| a.last_mu().values.iter()).chain(&net.cloud().mu_c().values);
        min_mu = held.fold(min_mu, |m, v| m.min(*v));
    }
    (snaps, min_mu)
}

struct RandomCase {
    inst: RandomInstance,
    z0: PrimalDualPoint,
}

fn random_cases() -> Vec<RandomCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(RANDOM_SEED);
    (0..N_RANDOM)
        .map(|_| {
            let inst = random_convex(&mut rng, 5, 3);
            let (n, m) = (inst.problem.n_agents(), inst.problem.n_constraints());
            let z0 = PrimalDualPoint::new(
                (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
                (0..m).map(|_| rng.random_range(0.0..1.0)).collect(),
            );
            RandomCase { inst, z0 }
        })
        .collect()
}

struct Runs {
    _tmp: TempDir,
    plain: RunReport,
    plain_elapsed: Duration,
    plain_trace: Vec<u8>,
    repeat_trace: Vec<u8>,
    private_trace: Vec<u8>,
}

fn bundled_runs() -> Runs {
    let tmp = TempDir::new().unwrap();
    let cfg = bundled();
    let start = Instant::now();
    let plain = cmd_run(&cfg, &tmp.path().join("plain")).expect("bundled run");
    let plain_elapsed = start.elapsed();
    cmd_run(&cfg, &tmp.path().join("repeat")).expect("repeat run");
    let mut private = cfg.clone();
    private.privacy = true;
    private.seed = 17;
    cmd_run(&private, &tmp.path().join("private")).expect("private run");
    let read = |d: &str| std::fs::read(tmp.path().join(d).join("trace.csv")).unwrap();
    Runs {
        plain_trace: read("plain"),
        repeat_trace: read("repeat"),
        private_trace: read("private"),
        _tmp: tmp,
        plain,
        plain_elapsed,
    }
}

fn criterion_golden(runs: &Runs) -> Outcome {
    let r = &runs.plain;
    let dx = max_abs_diff(&r.final_x_c, &EXPECTED_X_C);
    let dmu = max_abs_diff(&r.final_mu_c, &EXPECTED_MU_C);
    let reference = r.reference.as_ref().expect("bundled config carries the quoted saddle");
    let dv = (reference.final_v - EXPECTED_V).abs();
    let fast = runs.plain_elapsed < Duration::from_secs(10);

    // where along the trajectory the expected numbers actually occur
    let p = &bundled().problem;
    let mut z = PrimalDualPoint::zeros(6, 3);
    let (mut best_step, mut best_dev) = (0, f64::INFINITY);
    for step in 0..=16_666 {
        let dev = max_abs_diff(&z.x, &EXPECTED_X_C).max(max_abs_diff(&z.mu, &EXPECTED_MU_C));
        if dev < best_dev {
            (best_step, best_dev) = (step, dev);
        }
        z = uzawa_step(p, &z, 0.0017).unwrap();
    }
    let mut at_best = PrimalDualPoint::zeros(6, 3);
    for _ in 0..best_step {
        at_best = uzawa_step(p, &at_best, 0.0017).unwrap();
    }
    let v_at_best = lyapunov(&at_best, &reference.point).unwrap();

    outcome(
        dx <= 1e-3 && dmu <= 1e-4 && dv <= 0.002 && fast,
        format!(
            "final x_c {:?} (max dev {dx:.4}, tol 1e-3), mu_c {:?} (max dev {dmu:.2e}, tol 1e-4), V vs quoted saddle {:.4} (want {EXPECTED_V} +/- 0.002), runtime {:.2?}; \
             the expected values match gradient step {best_step} (timestep {}) to {best_dev:.1e} with V = {v_at_best:.4} there",
            r.final_x_c.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            r.final_mu_c.iter().map(|v| (v * 1e5).round() / 1e5).collect::<Vec<_>>(),
            reference.final_v,
            runs.plain_elapsed,
            3 * best_step,
        ),
    )
}

fn criterion_entry(runs: &Runs) -> Outcome {
    let r = &runs.plain;
    let selected = r.entry.map(|e| e.timestep);
    let fmt = |e: Option<cloud_uzawa::analysis::Entry>| {
        e.map_or("none".into(), |e| format!("{} (step {})", e.timestep, e.step))
    };
    let reference = r.reference.as_ref().unwrap();
    outcome(
        selected == Some(EXPECTED_ENTRY_TIMESTEP),
        format!(
            "selected convention {} enters at {}, want {EXPECTED_ENTRY_TIMESTEP}; computed saddle: norm {}, level {}; quoted saddle: norm {}, level {}",
            r.convention.as_str(),
            fmt(r.entry),
            fmt(r.entry_norm),
            fmt(r.entry_level),
            fmt(reference.entry_norm),
            fmt(reference.entry_level),
        ),
    )
}

/// Descent ratio at `x = x_hat` with the first multiplier moved into the annulus.
fn ratio_on_primal_slice(p: &Problem, saddle: &PrimalDualPoint, eps: f64) -> f64 {
    let mut z = saddle.clone();
    z.mu[0] += (0.75 * eps).sqrt();
    let lx = p.grad_x(&z).unwrap();
    let lmu = p.grad_mu(&z.x).unwrap();
    let descent: f64 = saddle.x.iter().zip(&z.x).zip(&lx).map(|((xh, x), l)| (x - xh) * l).sum::<f64>()
        + saddle.mu.iter().zip(&z.mu).zip(&lmu).map(|((mh, m), g)| (mh - m) * g).sum::<f64>();
    descent / lx.iter().chain(&lmu).map(|v| v * v).sum::<f64>()
}

fn criterion_stepsize(runs: &Runs) -> Outcome {
    let cfg = bundled();
    assert!(cfg.stepsize.n_samples >= 1_000_000);
    let start = Instant::now();
    let rep = match cmd_stepsize(&cfg, None) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("estimation failed: {e}")),
    };
    let elapsed = start.elapsed();
    let slice = ratio_on_primal_slice(&cfg.problem, &runs.plain.saddle.point, cfg.epsilon);
    let within = |got: f64, want: f64| (got / want - 1.0).abs() <= 0.25;
    outcome(
        within(rep.gamma1, EXPECTED_GAMMA1)
            && within(rep.gamma2, EXPECTED_GAMMA2)
            && rep.rho_max == rep.gamma2
            && elapsed < Duration::from_secs(60),
        format!(
            "gamma1 {:.4e} (want {EXPECTED_GAMMA1} +/- 25%), gamma2 {:.4e} (want {EXPECTED_GAMMA2} +/- 25%), rho_max {:.4e}, R {:.2}, {} samples in {elapsed:.2?}; \
             the annulus descent ratio at x = x_hat with mu1 shifted is {slice:.1e}",
            rep.gamma1, rep.gamma2, rep.rho_max, rep.r, rep.n_samples
        ),
    )
}

fn criterion_oracle(cases: &[RandomCase]) -> Outcome {
    let mut worst = 0.0f64;
    for (i, c) in cases.iter().enumerate() {
        let p = &c.inst.problem;
        let mut net = init_network(p, &c.z0.x, &c.z0.mu, c.inst.rho, i % 2 == 0, i as u64).unwrap();
        let (snaps, _) = run_watching_multipliers(&mut net, 3_000);
        let mut z = c.z0.clone();
        for s in &snaps {
            worst = worst.max(max_abs_diff(&s.point.x, &z.x)).max(max_abs_diff(&s.point.mu, &z.mu));
            z = uzawa_step(p, &z, c.inst.rho).unwrap();
        }
        assert_eq!(snaps.len(), 1_000);
    }
    outcome(worst <= 1e-12, format!("{} instances x 1000 cycles, max deviation {worst:e} (tol 1e-12)", cases.len()))
}

fn sign_structure(snaps: &[Snapshot], saddle: &PrimalDualPoint, eps: f64) -> (usize, usize, usize) {
    let s = ConvergenceTrace::from_snapshots(snaps, saddle, eps, BallConvention::Norm).unwrap().summary();
    (s.annulus_failures, s.exits_after_entry, s.outside_steps)
}

fn criterion_sign_structure(runs: &Runs, cases: &[RandomCase]) -> Outcome {
    // six-agent run at the configured stepsize, against the computed saddle
    let cfg = bundled();
    let saddle = &runs.plain.saddle.point;
    let mut net = init_network(&cfg.problem, &cfg.x0, &cfg.mu0, 0.0017, false, 0).unwrap();
    let (snaps, min_mu_six) = run_watching_multipliers(&mut net, cfg.total_timesteps);
    let (ann_six, exits_six, out_six) = sign_structure(&snaps, saddle, cfg.epsilon);

    let eps = 0.1;
    let (mut ann, mut exits, mut outside, mut min_mu, mut entered) = (0, 0, 0, f64::INFINITY, 0);
    let mut offenders = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let p = &c.inst.problem;
        let ucfg = UzawaConfig { rho: c.inst.rho, max_steps: 200_000, fixed_point_tol: 1e-13 };
        let sol = solve_saddle(p, &c.z0, &ucfg).unwrap();
        let opts = SamplingOptions { n_samples: 100_000, seed: i as u64, ..SamplingOptions::default() };
        let rep = estimate_stepsize(p, &sol.point, &c.z0, eps, &opts).unwrap();
        let mut net = init_network(p, &c.z0.x, &c.z0.mu, rep.rho_recommended, false, 0).unwrap();
        let (snaps, m) = run_watching_multipliers(&mut net, 3_000);
        let (a, e, o) = sign_structure(&snaps, &sol.point, eps);
        if a + e + o > 0 {
            offenders.push(i);
        }
        ann += a;
        exits += e;
        outside += o;
        min_mu = min_mu.min(m);
        entered += usize::from(snaps.iter().any(|s| lyapunov(&s.point, &sol.point).unwrap() <= eps * eps));
    }
    outcome(
        ann_six + exits_six + out_six + ann + exits + outside == 0 && min_mu_six >= 0.0 && min_mu >= 0.0,
        format!(
            "six-agent: {ann_six} annulus failures, {exits_six} post-entry exits, {out_six} outside steps, min mu {min_mu_six:.1e}; \
             {} random instances at rho_recommended: {ann} annulus failures, {exits} post-entry exits, {outside} outside steps, min mu {min_mu:.1e}, {entered} entered the ball, offending instances {offenders:?}",
            cases.len()
        ),
    )
}

fn criterion_delta_v(runs: &Runs) -> Outcome {
    let cfg = bundled();
    let saddle = &runs.plain.saddle.point;
    let mut net = init_network(&cfg.problem, &cfg.x0, &cfg.mu0, 0.0017, false, 0).unwrap();
    let (snaps, _) = run_watching_multipliers(&mut net, cfg.total_timesteps);
    let mut worst: f64 = 0.0;
    let mut worst_at = 0;
    let mut clipped = 0;
    for w in snaps.windows(2) {
        let direct = lyapunov(&w[1].point, saddle).unwrap() - lyapunov(&w[0].point, saddle).unwrap();
        let closed = predicted_delta_v(&cfg.problem, saddle, &w[0].point, 0.0017).unwrap();
        clipped += usize::from(closed.projection_active);
        let rel = (direct - closed.value).abs() / direct.abs();
        if rel > worst {
            (worst, worst_at) = (rel, w[0].step);
        }
    }
    outcome(
        worst <= 1e-9,
        format!(
            "{} synchronized steps ({clipped} with an active projection), max relative error {worst:.2e} at step {worst_at} (tol 1e-9)",
            snaps.len() - 1
        ),
    )
}

fn fd_check(p: &Problem, rng: &mut ChaCha8Rng, points: usize, spread: f64) -> f64 {
    let (n, m) = (p.n_agents(), p.n_constraints());
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let z = PrimalDualPoint::new(
            (0..n).map(|_| rng.random_range(-spread..spread)).collect(),
            (0..m).map(|_| rng.random_range(0.0..3.0)).collect(),
        );
        let gx = p.grad_x(&z).unwrap();
        let gmu = p.grad_mu(&z.x).unwrap();
        let analytic = gx.iter().chain(&gmu);
        for (k, a) in analytic.enumerate() {
            let shifted = |d: f64| {
                let mut w = z.clone();
                if k < n {
                    w.x[k] += d
                } else {
                    w.mu[k - n] += d
                }
                p.lagrangian(&w).unwrap()
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    worst
}

fn criterion_gradients(cases: &[RandomCase]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let six = fd_check(&bundled().problem, &mut rng, 1_000, 4.0);
    let random = cases.iter().map(|c| fd_check(&c.inst.problem, &mut rng, 1_000, 3.0)).fold(0.0, f64::max);
    outcome(
        six <= 1e-6 && random <= 1e-6,
        format!(
            "1000 points per instance: six-agent max rel err {six:.2e}, {} random instances {random:.2e} (tol 1e-6)",
            cases.len()
        ),
    )
}

fn numeric_columns(trace: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(trace).lines().map(String::from).collect()
}

fn criterion_privacy(runs: &Runs) -> Outcome {
    let same = numeric_columns(&runs.plain_trace) == numeric_columns(&runs.private_trace);
    outcome(same, format!("{} trace bytes with relabeling off vs on, identical: {same}", runs.plain_trace.len()))
}

fn criterion_determinism(runs: &Runs, cases: &[RandomCase]) -> Outcome {
    let bundled_same = runs.plain_trace == runs.repeat_trace;

    // a random instance with auto stepsize and privacy on
    let c = &cases[3];
    let text = format!(
        "[problem]\nn_agents = {}\nobjectives = {:?}\nconstraints = {:?}\n\n[initial]\nx0 = {:?}\nmu0 = {:?}\n\n\
         [run]\nrho = \"auto\"\nepsilon = 0.1\ntotal_timesteps = 900\nprivacy = true\nseed = 5\n\n\
         [saddle]\nrho = 0.001\nmax_steps = 100000\n\n[stepsize]\nn_samples = 20000\n",
        c.inst.problem.n_agents(),
        c.inst.objectives,
        c.inst.constraints,
        c.z0.x,
        c.z0.mu
    );
    let cfg = parse_config(&text, Path::new("random.toml")).expect("generated config parses");
    let tmp = TempDir::new().unwrap();
    let traces: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|d| {
            cmd_run(&cfg, &tmp.path().join(d)).expect("random run");
            std::fs::read(tmp.path().join(d).join("trace.csv")).unwrap()
        })
        .collect();
    let random_same = traces[0] == traces[1];
    outcome(
        bundled_same && random_same,
        format!("bundled config traces identical: {bundled_same}; auto-stepsize random config traces identical: {random_same}"),
    )
}

fn main() -> ExitCode {
    let runs = bundled_runs();
    let cases = random_cases();
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("golden reproduction", Box::new(|| criterion_golden(&runs))),
        ("ball-entry count", Box::new(|| criterion_entry(&runs))),
        ("stepsize constants", Box::new(|| criterion_stepsize(&runs))),
        ("oracle equivalence", Box::new(|| criterion_oracle(&cases))),
        ("Lyapunov sign structure", Box::new(|| criterion_sign_structure(&runs, &cases))),
        ("delta-V closed form", Box::new(|| criterion_delta_v(&runs))),
        ("gradient correctness", Box::new(|| criterion_gradients(&cases))),
        ("privacy invariance", Box::new(|| criterion_privacy(&runs))),
        ("determinism", Box::new(|| criterion_determinism(&runs, &cases))),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        println!("criterion {} {} {name}: {}", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    println!("acceptance: {}/{} criteria met", criteria.len() - failed.len(), criteria.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failing criteria {failed:?}");
        ExitCode::FAILURE
    }
}
