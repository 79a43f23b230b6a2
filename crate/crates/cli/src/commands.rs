//! The `run`, `stepsize` and `solve` pipelines.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use cloud_uzawa::analysis::{detect_entry, Entry};
use cloud_uzawa::protocol::ProtocolError;
use cloud_uzawa::stepsize::StepsizeError;
use cloud_uzawa::uzawa::{KktResidual, UzawaError};
use cloud_uzawa::{
    estimate_stepsize, init_network, kkt_residual, lyapunov, run, solve_saddle, BallConvention, BallMonitor,
    ConvergenceSummary, ConvergenceTrace, Exec, PrimalDualPoint, SamplingOptions, StepsizeReport, UzawaConfig,
};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, Rho, RunConfig};
use crate::trace::CsvTrace;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage} diverged at {unit} {at}")]
    Diverged { stage: &'static str, unit: &'static str, at: u64 },
    #[error("stepsize estimation: {0}")]
    Stepsize(StepsizeError),
    #[error("{0}")]
    Protocol(ProtocolError),
    #[error("convergence guarantees violated: {}", .0.join("; "))]
    Violations(Vec<String>),
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged { .. } => 3,
            CliError::Stepsize(StepsizeError::NonPositiveRatio { .. })
            | CliError::Protocol(_)
            | CliError::Violations(_) => 4,
            CliError::Stepsize(_) | CliError::Io { .. } => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Diverged { .. } => "divergence",
            CliError::Stepsize(StepsizeError::NonPositiveRatio { .. }) => "invariant",
            CliError::Stepsize(_) => "stepsize",
            CliError::Protocol(_) | CliError::Violations(_) => "invariant",
            CliError::Io { .. } => "io",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

/// The saddle all diagnostics are measured against.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaddleInfo {
    pub point: PrimalDualPoint,
    /// `"config"` when supplied, `"solver"` when computed.
    pub source: &'static str,
    pub steps: usize,
    pub converged: bool,
    pub last_displacement: Option<f64>,
    pub kkt: KktResidual,
}

/// Takes the configured saddle, or runs the centralized solver from the
/// initial point.
pub fn obtain_saddle(cfg: &RunConfig) -> Result<SaddleInfo, CliError> {
    let p = &cfg.problem;
    if let Some(point) = &cfg.known_saddle {
        let kkt = kkt_residual(p, point).map_err(ConfigError::from)?;
        return Ok(SaddleInfo {
            point: point.clone(),
            source: "config",
            steps: 0,
            converged: true,
            last_displacement: None,
            kkt,
        });
    }
    let ucfg = UzawaConfig {
        rho: cfg.saddle_rho(),
        max_steps: cfg.saddle.max_steps,
        fixed_point_tol: cfg.saddle.fixed_point_tol,
    };
    let sol = solve_saddle(p, &cfg.initial_point(), &ucfg).map_err(|e| match e {
        UzawaError::Diverged { step } => CliError::Diverged { stage: "saddle solver", unit: "step", at: step as u64 },
        other => CliError::Config(ConfigError::Invalid { field: "saddle", reason: other.to_string() }),
    })?;
    let kkt = kkt_residual(p, &sol.point).map_err(ConfigError::from)?;
    Ok(SaddleInfo {
        point: sol.point,
        source: "solver",
        steps: sol.steps,
        converged: sol.converged,
        last_displacement: Some(sol.last_displacement),
        kkt,
    })
}

fn sampling_options(cfg: &RunConfig) -> SamplingOptions {
    SamplingOptions {
        n_samples: cfg.stepsize.n_samples,
        seed: cfg.seed,
        clip_to_orthant: cfg.stepsize.clip_to_orthant,
        exec: Exec::Parallel,
    }
}

/// Estimates the stepsize bounds around the saddle and writes
/// `stepsize.json` when `out_dir` is given.
pub fn cmd_stepsize(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<StepsizeReport, CliError> {
    let saddle = obtain_saddle(cfg)?;
    let report =
        estimate_stepsize(&cfg.problem, &saddle.point, &cfg.initial_point(), cfg.epsilon, &sampling_options(cfg))
            .map_err(CliError::Stepsize)?;
    if let Some(dir) = out_dir {
        write_json(dir, "stepsize.json", &report)?;
    }
    Ok(report)
}

/// Runs the centralized solver and writes `saddle.json` when `out_dir` is given.
pub fn cmd_solve(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<SaddleInfo, CliError> {
    let saddle = obtain_saddle(cfg)?;
    if let Some(dir) = out_dir {
        write_json(dir, "saddle.json", &saddle)?;
    }
    Ok(saddle)
}

/// Diagnostics against an externally quoted saddle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceComparison {
    pub point: PrimalDualPoint,
    pub final_v: f64,
    pub entry_norm: Option<Entry>,
    pub entry_level: Option<Entry>,
    pub v_increases: usize,
    pub exits_after_entry: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub n_agents: usize,
    pub n_constraints: usize,
    pub rho: f64,
    /// `"config"` or `"auto"`.
    pub rho_source: &'static str,
    pub stepsize: Option<StepsizeReport>,
    pub saddle: SaddleInfo,
    pub epsilon: f64,
    pub total_timesteps: u64,
    pub privacy: bool,
    pub seed: u64,
    pub convention: BallConvention,
    pub final_timestep: u64,
    pub final_x_c: Vec<f64>,
    pub final_mu_c: Vec<f64>,
    /// `V` of the final cloud state against the saddle.
    pub final_v: f64,
    pub entry: Option<Entry>,
    pub entry_norm: Option<Entry>,
    pub entry_level: Option<Entry>,
    pub summary: ConvergenceSummary,
    pub reference: Option<ReferenceComparison>,
    /// Broken convergence guarantees; nonempty means exit code 4.
    pub violations: Vec<String>,
}

impl RunReport {
    pub fn final_point(&self) -> PrimalDualPoint {
        PrimalDualPoint::new(self.final_x_c.clone(), self.final_mu_c.clone())
    }
}

fn violations(s: &ConvergenceSummary) -> Vec<String> {
    let mut out = Vec::new();
    if s.annulus_failures > 0 {
        out.push(format!("{} annulus steps without strict decrease of V", s.annulus_failures));
    }
    if s.half_ball_failures > 0 {
        out.push(format!("{} half-ball steps grew V by more than eps/2", s.half_ball_failures));
    }
    if s.outside_steps > 0 {
        out.push(format!("{} steps started outside V <= R", s.outside_steps));
    }
    if s.exits_after_entry > 0 {
        out.push(format!("{} snapshots left the ball after entry", s.exits_after_entry));
    }
    out
}

/// Full pipeline: saddle, optional stepsize estimate, protocol run, trace and
/// report. Writes `trace.csv` and `report.json` to `out_dir`.
pub fn cmd_run(cfg: &RunConfig, out_dir: &Path) -> Result<RunReport, CliError> {
    let p = &cfg.problem;
    let saddle = obtain_saddle(cfg)?;
    let (rho, stepsize) = match cfg.rho {
        Rho::Fixed(r) => (r, None),
        Rho::Auto => {
            let rep = estimate_stepsize(p, &saddle.point, &cfg.initial_point(), cfg.epsilon, &sampling_options(cfg))
                .map_err(CliError::Stepsize)?;
            (rep.rho_recommended, Some(rep))
        }
    };

    let monitor = BallMonitor::new(saddle.point.clone(), cfg.epsilon, cfg.ball_convention)
        .map_err(|e| ConfigError::Invalid { field: "run.epsilon", reason: e.to_string() })?;
    let mut net = init_network(p, &cfg.x0, &cfg.mu0, rho, cfg.privacy, cfg.seed)
        .map_err(|e| ConfigError::Invalid { field: "initial", reason: e.to_string() })?;

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let trace_path = out_dir.join("trace.csv");
    let file = File::create(&trace_path).map_err(io_err(&trace_path))?;
    let mut sink = CsvTrace::new(BufWriter::new(file), p.n_agents(), p.n_constraints()).map_err(io_err(&trace_path))?;
    let snaps = run(&mut net, cfg.total_timesteps, &mut sink, Some(&monitor)).map_err(|e| match e {
        ProtocolError::Diverged { timestep } => {
            CliError::Diverged { stage: "protocol run", unit: "timestep", at: timestep }
        }
        ProtocolError::Sink(source) => CliError::Io { path: trace_path.display().to_string(), source },
        other => CliError::Protocol(other),
    })?;
    sink.finish().map_err(io_err(&trace_path))?;

    let trace = ConvergenceTrace::from_snapshots(&snaps, &saddle.point, cfg.epsilon, cfg.ball_convention)
        .expect("snapshots match the problem dimensions");
    let summary = trace.summary();
    let final_point = net.cloud_point();
    let final_v = lyapunov(&final_point, &saddle.point).expect("dimensions match");

    let reference = cfg.reference.as_ref().map(|r| {
        let rt = ConvergenceTrace::from_snapshots(&snaps, r, cfg.epsilon, BallConvention::Norm).expect("validated");
        let rs = rt.summary();
        ReferenceComparison {
            point: r.clone(),
            final_v: lyapunov(&final_point, r).expect("validated"),
            entry_norm: detect_entry(&rt, BallConvention::Norm),
            entry_level: detect_entry(&rt, BallConvention::Level),
            v_increases: rs.v_increases,
            exits_after_entry: rs.exits_after_entry,
        }
    });

    let report = RunReport {
        n_agents: p.n_agents(),
        n_constraints: p.n_constraints(),
        rho,
        rho_source: if stepsize.is_some() { "auto" } else { "config" },
        stepsize,
        saddle,
        epsilon: cfg.epsilon,
        total_timesteps: cfg.total_timesteps,
        privacy: cfg.privacy,
        seed: cfg.seed,
        convention: cfg.ball_convention,
        final_timestep: net.timestep(),
        final_x_c: final_point.x.clone(),
        final_mu_c: final_point.mu.clone(),
        final_v,
        entry: summary.entry,
        entry_norm: detect_entry(&trace, BallConvention::Norm),
        entry_level: detect_entry(&trace, BallConvention::Level),
        violations: violations(&summary),
        summary,
        reference,
    };
    write_json(out_dir, "report.json", &report)?;
    Ok(report)
}
