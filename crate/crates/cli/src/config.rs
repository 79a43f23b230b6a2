//! TOML run configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use cloud_uzawa::{BallConvention, PrimalDualPoint, Problem, ProblemError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Toml { path: PathBuf, source: Box<toml::de::Error> },
    #[error("field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("problem: {0}")]
    Problem(#[from] ProblemError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, reason: reason.into() }
}

/// Stepsize: a fixed value, or estimated from the sampled bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRho", into = "RawRho")]
pub enum Rho {
    Fixed(f64),
    Auto,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RawRho {
    Number(f64),
    Word(String),
}

impl TryFrom<RawRho> for Rho {
    type Error = String;

    fn try_from(raw: RawRho) -> Result<Self, Self::Error> {
        match raw {
            RawRho::Number(v) => Ok(Rho::Fixed(v)),
            RawRho::Word(w) if w == "auto" => Ok(Rho::Auto),
            RawRho::Word(w) => Err(format!("expected a number or \"auto\", got {w:?}")),
        }
    }
}

impl From<Rho> for RawRho {
    fn from(rho: Rho) -> Self {
        match rho {
            Rho::Fixed(v) => RawRho::Number(v),
            Rho::Auto => RawRho::Word("auto".into()),
        }
    }
}

impl fmt::Display for Rho {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rho::Fixed(v) => write!(f, "{v}"),
            Rho::Auto => f.write_str("auto"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub n_agents: usize,
    pub objectives: Vec<String>,
    #[serde(default)]
    pub constraints: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub x0: Option<Vec<f64>>,
    pub mu0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub rho: Rho,
    pub epsilon: f64,
    pub total_timesteps: u64,
    #[serde(default)]
    pub privacy: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ball_convention: BallConvention,
}

/// How the saddle used for diagnostics is obtained.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaddleSection {
    /// Stepsize of the centralized solver; defaults to the run stepsize, or
    /// `1e-3` when that is `auto`.
    pub rho: Option<f64>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_tol")]
    pub fixed_point_tol: f64,
    /// A known saddle. When given, the solver is skipped.
    pub x: Option<Vec<f64>>,
    pub mu: Option<Vec<f64>>,
}

fn default_max_steps() -> usize {
    2_000_000
}

fn default_tol() -> f64 {
    1e-12
}

impl Default for SaddleSection {
    fn default() -> Self {
        SaddleSection { rho: None, max_steps: default_max_steps(), fixed_point_tol: default_tol(), x: None, mu: None }
    }
}

/// An externally quoted saddle, used only for comparison in reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepsizeSection {
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_true")]
    pub clip_to_orthant: bool,
}

fn default_samples() -> usize {
    1_000_000
}

fn default_true() -> bool {
    true
}

impl Default for StepsizeSection {
    fn default() -> Self {
        StepsizeSection { n_samples: default_samples(), clip_to_orthant: true }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// The file layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub problem: ProblemSection,
    #[serde(default)]
    pub initial: InitialSection,
    pub run: RunSection,
    #[serde(default)]
    pub saddle: SaddleSection,
    pub reference: Option<ReferenceSection>,
    #[serde(default)]
    pub stepsize: StepsizeSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// A validated configuration with its parsed problem.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: Problem,
    pub objectives: Vec<String>,
    pub constraints: Vec<String>,
    pub x0: Vec<f64>,
    pub mu0: Vec<f64>,
    pub rho: Rho,
    pub epsilon: f64,
    pub total_timesteps: u64,
    pub privacy: bool,
    pub seed: u64,
    pub ball_convention: BallConvention,
    pub saddle: SaddleSection,
    pub known_saddle: Option<PrimalDualPoint>,
    pub reference: Option<PrimalDualPoint>,
    pub stepsize: StepsizeSection,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn initial_point(&self) -> PrimalDualPoint {
        PrimalDualPoint::new(self.x0.clone(), self.mu0.clone())
    }

    /// Whether the stepsize has to be estimated before running.
    pub fn needs_stepsize_estimate(&self) -> bool {
        self.rho == Rho::Auto
    }

    pub fn saddle_rho(&self) -> f64 {
        match (self.saddle.rho, self.rho) {
            (Some(r), _) | (None, Rho::Fixed(r)) => r,
            (None, Rho::Auto) => 1e-3,
        }
    }
}

fn positive(field: &'static str, v: f64) -> Result<f64, ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(invalid(field, format!("must be positive and finite, got {v}")))
    }
}

fn with_len(field: &'static str, v: Vec<f64>, len: usize) -> Result<Vec<f64>, ConfigError> {
    if v.len() != len {
        return Err(invalid(field, format!("expected {len} values, got {}", v.len())));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(invalid(field, format!("non-finite value {bad}")));
    }
    Ok(v)
}

fn nonneg(field: &'static str, v: Vec<f64>) -> Result<Vec<f64>, ConfigError> {
    match v.iter().find(|m| **m < 0.0) {
        Some(m) => Err(invalid(field, format!("multipliers must be nonnegative, got {m}"))),
        None => Ok(v),
    }
}

impl TryFrom<ConfigFile> for RunConfig {
    type Error = ConfigError;

    fn try_from(file: ConfigFile) -> Result<Self, ConfigError> {
        let ConfigFile { problem, initial, run, saddle, reference, stepsize, output } = file;
        let p = Problem::parse(problem.n_agents, &problem.objectives, &problem.constraints)?;
        let (n, m) = (p.n_agents(), p.n_constraints());

        let x0 = with_len("initial.x0", initial.x0.unwrap_or_else(|| vec![0.0; n]), n)?;
        let mu0 = nonneg("initial.mu0", with_len("initial.mu0", initial.mu0.unwrap_or_else(|| vec![0.0; m]), m)?)?;
        if let Rho::Fixed(r) = run.rho {
            positive("run.rho", r)?;
        }
        positive("run.epsilon", run.epsilon)?;
        if let Some(r) = saddle.rho {
            positive("saddle.rho", r)?;
        }
        if saddle.fixed_point_tol.is_nan() || saddle.fixed_point_tol < 0.0 {
            return Err(invalid("saddle.fixed_point_tol", "must be nonnegative"));
        }
        let known_saddle = match (&saddle.x, &saddle.mu) {
            (None, None) => None,
            (Some(x), Some(mu)) => Some(PrimalDualPoint::new(
                with_len("saddle.x", x.clone(), n)?,
                nonneg("saddle.mu", with_len("saddle.mu", mu.clone(), m)?)?,
            )),
            _ => return Err(invalid("saddle", "give both `x` and `mu`, or neither")),
        };
        let reference = reference
            .map(|r| {
                Ok::<_, ConfigError>(PrimalDualPoint::new(
                    with_len("reference.x", r.x, n)?,
                    nonneg("reference.mu", with_len("reference.mu", r.mu, m)?)?,
                ))
            })
            .transpose()?;
        if stepsize.n_samples == 0 {
            return Err(invalid("stepsize.n_samples", "must be at least 1"));
        }

        Ok(RunConfig {
            problem: p,
            objectives: problem.objectives,
            constraints: problem.constraints,
            x0,
            mu0,
            rho: run.rho,
            epsilon: run.epsilon,
            total_timesteps: run.total_timesteps,
            privacy: run.privacy,
            seed: run.seed,
            ball_convention: run.ball_convention,
            saddle,
            known_saddle,
            reference,
            stepsize,
            output_dir: output.dir,
        })
    }
}

/// Parses and validates configuration text.
pub fn parse_config(text: &str, origin: &Path) -> Result<RunConfig, ConfigError> {
    let file: ConfigFile =
        toml::from_str(text).map_err(|e| ConfigError::Toml { path: origin.to_path_buf(), source: Box::new(e) })?;
    RunConfig::try_from(file)
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[problem]
n_agents = 2
objectives = ["(x1 - 1)^2", "(x2 + 1)^4"]
constraints = ["x1 + x2 - 1"]

[run]
rho = 0.01
epsilon = 0.1
total_timesteps = 30
"#;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        parse_config(text, Path::new("test.toml"))
    }

    #[test]
    fn defaults_fill_in() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.x0, vec![0.0, 0.0]);
        assert_eq!(c.mu0, vec![0.0]);
        assert_eq!(c.rho, Rho::Fixed(0.01));
        assert_eq!(c.ball_convention, BallConvention::Norm);
        assert_eq!(c.saddle_rho(), 0.01);
        assert_eq!(c.stepsize.n_samples, 1_000_000);
        assert!(c.known_saddle.is_none() && c.reference.is_none());
    }

    #[test]
    fn auto_rho() {
        let c = parse(&MINIMAL.replace("rho = 0.01", "rho = \"auto\"")).unwrap();
        assert!(c.needs_stepsize_estimate());
        assert_eq!(c.saddle_rho(), 1e-3);
        let err = parse(&MINIMAL.replace("rho = 0.01", "rho = \"fast\"")).unwrap_err();
        assert!(err.to_string().contains("auto"), "{err}");
    }

    #[test]
    fn foreign_variable_in_objective() {
        let err = parse(&MINIMAL.replace("(x2 + 1)^4", "x2 + x1")).unwrap_err();
        assert!(matches!(err, ConfigError::Problem(ProblemError::ForeignVariable { .. })), "{err}");
    }

    #[test]
    fn syntax_errors_carry_location() {
        let err = parse(&MINIMAL.replace("epsilon = 0.1", "epsilon = ")).unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
        let err = parse(&MINIMAL.replace("epsilon", "epsilom")).unwrap_err();
        assert!(err.to_string().contains("epsilom"), "{err}");
    }

    #[test]
    fn dimension_and_sign_checks() {
        let err = parse(&format!("{MINIMAL}\n[initial]\nx0 = [1.0]\n")).unwrap_err();
        assert!(err.to_string().contains("initial.x0"), "{err}");
        let err = parse(&format!("{MINIMAL}\n[initial]\nmu0 = [-1.0]\n")).unwrap_err();
        assert!(err.to_string().contains("initial.mu0"), "{err}");
        let err = parse(&format!("{MINIMAL}\n[saddle]\nx = [0.0, 0.0]\n")).unwrap_err();
        assert!(err.to_string().contains("saddle"), "{err}");
        let err = parse(&MINIMAL.replace("rho = 0.01", "rho = -0.01")).unwrap_err();
        assert!(err.to_string().contains("run.rho"), "{err}");
    }
}
