//! Monte-Carlo estimates of the largest stepsize for which the Lyapunov
//! argument goes through.
//!
//! * `gamma_1`: every step from the half-ball `{V <= eps/2}` stays in
//!   `{V <= eps}` when `rho <= sqrt((eps/2) / (||L_x||^2 + ||L_mu||^2))`.
//! * `gamma_2`: `V` strictly decreases on the annulus `{eps/2 <= V <= R}`
//!   when `rho` is below the ratio of the descent term to the squared
//!   gradient norm.
//!
//! Points are drawn uniformly (by volume) from the region around the saddle
//! in the stacked `(x, mu)` space. By default points with a negative
//! multiplier are rejected, since the iteration never visits them.
//!
//! Samples are generated in fixed-size chunks, each with its own ChaCha
//! stream, and reduced with `min`. Results therefore depend only on the seed
//! and the sample count, never on the thread count, and the estimate over
//! `n` samples is a prefix of the estimate over any larger `n`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

use crate::analysis::lyapunov;
use crate::exec::Exec;
use crate::problem::{PrimalDualPoint, Problem};

/// Fraction of `min(gamma_1, gamma_2)` used as the recommended stepsize.
pub const SAFETY_FACTOR: f64 = 0.85;

/// Samples per independent random stream.
pub const CHUNK_SIZE: usize = 4096;

/// Upper bound on draws per accepted sample before rejection gives up.
const MAX_DRAWS_PER_SAMPLE: usize = 10_000;

#[derive(Debug, Error)]
pub enum StepsizeError {
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("annulus radius R = {r} must be at least eps/2 = {half}")]
    InvalidRadius { r: f64, half: f64 },
    #[error("sample count must be positive")]
    NoSamples,
    #[error("saddle has dimensions ({found_x}, {found_mu}), problem needs ({n}, {m})")]
    DimensionMismatch { n: usize, m: usize, found_x: usize, found_mu: usize },
    #[error("saddle has a negative multiplier")]
    InfeasibleSaddle,
    #[error("{count} annulus samples have a non-positive descent ratio (smallest {min_ratio:e}); the region leaves the set where V decreases")]
    NonPositiveRatio { count: usize, min_ratio: f64 },
    #[error("rejection sampling found no point with mu >= 0 in {draws} draws")]
    RejectionStalled { draws: usize },
    #[error("no sample produced a finite bound")]
    NoFiniteBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SamplingOptions {
    pub n_samples: usize,
    pub seed: u64,
    /// Reject points with a negative multiplier.
    pub clip_to_orthant: bool,
    pub exec: Exec,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        SamplingOptions { n_samples: 1_000_000, seed: 0, clip_to_orthant: true, exec: Exec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepsizeReport {
    pub gamma1: f64,
    pub gamma2: f64,
    pub rho_max: f64,
    pub rho_recommended: f64,
    pub epsilon: f64,
    /// Outer level of the annulus.
    pub r: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub clip_to_orthant: bool,
}

/// Draws points with `r0^2 <= V <= r1^2`, uniform by volume.
struct ShellSampler<'a> {
    center: &'a PrimalDualPoint,
    r0: f64,
    r1: f64,
    clip: bool,
}

impl ShellSampler<'_> {
    fn dim(&self) -> usize {
        self.center.x.len() + self.center.mu.len()
    }

    fn draw<R: Rng>(&self, rng: &mut R, buf: &mut PrimalDualPoint) -> Result<(), StepsizeError> {
        let d = self.dim();
        let df = d as f64;
        let (lo, hi) = (self.r0.powf(df), self.r1.powf(df));
        let mut dir = vec![0.0; d];
        for draws in 1..=MAX_DRAWS_PER_SAMPLE {
            let norm = loop {
                for v in dir.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    break norm;
                }
            };
            let u: f64 = rng.random();
            let radius = (lo + u * (hi - lo)).powf(1.0 / df);
            let n = self.center.x.len();
            for (i, (c, out)) in self.center.x.iter().zip(buf.x.iter_mut()).enumerate() {
                *out = c + radius * dir[i] / norm;
            }
            for (j, (c, out)) in self.center.mu.iter().zip(buf.mu.iter_mut()).enumerate() {
                *out = c + radius * dir[n + j] / norm;
            }
            if !self.clip || buf.is_dual_feasible() {
                return Ok(());
            }
            if draws == MAX_DRAWS_PER_SAMPLE {
                return Err(StepsizeError::RejectionStalled { draws });
            }
        }
        unreachable!("loop returns on its last iteration")
    }
}

#[derive(Debug, Clone, Copy)]
struct ChunkResult {
    min: f64,
    nonpositive: usize,
}

/// Runs `ratio` over `n_samples` points of the shell and reduces with `min`.
fn sample_min<F>(
    p: &Problem,
    sampler: &ShellSampler<'_>,
    opts: &SamplingOptions,
    ratio: F,
) -> Result<ChunkResult, StepsizeError>
where
    F: Fn(&PrimalDualPoint, &[f64], &[f64]) -> f64 + Sync,
{
    if opts.n_samples == 0 {
        return Err(StepsizeError::NoSamples);
    }
    let n_chunks = opts.n_samples.div_ceil(CHUNK_SIZE);
    let chunks = opts.exec.map(n_chunks, |c| {
        let quota = CHUNK_SIZE.min(opts.n_samples - c * CHUNK_SIZE);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(c as u64);
        let mut buf = PrimalDualPoint::zeros(sampler.center.x.len(), sampler.center.mu.len());
        let mut out = ChunkResult { min: f64::INFINITY, nonpositive: 0 };
        for _ in 0..quota {
            sampler.draw(&mut rng, &mut buf)?;
            let lx = p.grad_x_unchecked(&buf.x, &buf.mu);
            let lmu = p.constraint_values(&buf.x);
            let r = ratio(&buf, &lx, &lmu);
            if r <= 0.0 {
                out.nonpositive += 1;
            }
            if r < out.min {
                out.min = r;
            }
        }
        Ok(out)
    });
    chunks.into_iter().try_fold(ChunkResult { min: f64::INFINITY, nonpositive: 0 }, |acc, c| {
        let c = c?;
        Ok(ChunkResult { min: acc.min.min(c.min), nonpositive: acc.nonpositive + c.nonpositive })
    })
}

fn validate(p: &Problem, saddle: &PrimalDualPoint, epsilon: f64) -> Result<(), StepsizeError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(StepsizeError::InvalidEpsilon(epsilon));
    }
    let (n, m) = (p.n_agents(), p.n_constraints());
    if saddle.x.len() != n || saddle.mu.len() != m {
        return Err(StepsizeError::DimensionMismatch { n, m, found_x: saddle.x.len(), found_mu: saddle.mu.len() });
    }
    if !saddle.is_dual_feasible() {
        return Err(StepsizeError::InfeasibleSaddle);
    }
    Ok(())
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum()
}

/// Estimates `gamma_1` over the half-ball `{V <= eps/2}`.
pub fn estimate_gamma1(
    p: &Problem,
    saddle: &PrimalDualPoint,
    epsilon: f64,
    opts: &SamplingOptions,
) -> Result<f64, StepsizeError> {
    validate(p, saddle, epsilon)?;
    let half = epsilon / 2.0;
    let sampler = ShellSampler { center: saddle, r0: 0.0, r1: half.sqrt(), clip: opts.clip_to_orthant };
    let res = sample_min(p, &sampler, opts, |_, lx, lmu| (half / (sq_norm(lx) + sq_norm(lmu))).sqrt())?;
    if res.min.is_finite() {
        Ok(res.min)
    } else {
        Err(StepsizeError::NoFiniteBound)
    }
}

/// Estimates `gamma_2` over the annulus `{eps/2 <= V <= r}`.
///
/// Without orthant clipping, samples with `mu < 0` can have a negative
/// descent ratio; that is reported as an error rather than folded into the
/// minimum.
pub fn estimate_gamma2(
    p: &Problem,
    saddle: &PrimalDualPoint,
    epsilon: f64,
    r: f64,
    opts: &SamplingOptions,
) -> Result<f64, StepsizeError> {
    validate(p, saddle, epsilon)?;
    let half = epsilon / 2.0;
    if !(r >= half && r.is_finite()) {
        return Err(StepsizeError::InvalidRadius { r, half });
    }
    let sampler = ShellSampler { center: saddle, r0: half.sqrt(), r1: r.sqrt(), clip: opts.clip_to_orthant };
    let res = sample_min(p, &sampler, opts, |z, lx, lmu| {
        let descent_x: f64 = saddle.x.iter().zip(&z.x).zip(lx).map(|((xh, x), l)| -(xh - x) * l).sum();
        let descent_mu: f64 = saddle.mu.iter().zip(&z.mu).zip(lmu).map(|((mh, m), g)| (mh - m) * g).sum();
        (descent_x + descent_mu) / (sq_norm(lx) + sq_norm(lmu))
    })?;
    if res.nonpositive > 0 {
        return Err(StepsizeError::NonPositiveRatio { count: res.nonpositive, min_ratio: res.min });
    }
    if res.min.is_finite() {
        Ok(res.min)
    } else {
        Err(StepsizeError::NoFiniteBound)
    }
}

/// Inputs to [`recommend_rho`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaEstimates {
    pub gamma1: f64,
    pub gamma2: f64,
    pub epsilon: f64,
    pub r: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub clip_to_orthant: bool,
}

/// Assembles the report: `rho_max = min(gamma1, gamma2)` scaled by
/// [`SAFETY_FACTOR`].
pub fn recommend_rho(est: GammaEstimates) -> StepsizeReport {
    let rho_max = est.gamma1.min(est.gamma2);
    StepsizeReport {
        gamma1: est.gamma1,
        gamma2: est.gamma2,
        rho_max,
        rho_recommended: SAFETY_FACTOR * rho_max,
        epsilon: est.epsilon,
        r: est.r,
        n_samples: est.n_samples,
        seed: est.seed,
        clip_to_orthant: est.clip_to_orthant,
    }
}

/// Estimates both bounds with `R = max(eps, V(z0))` and recommends a stepsize.
pub fn estimate_stepsize(
    p: &Problem,
    saddle: &PrimalDualPoint,
    z0: &PrimalDualPoint,
    epsilon: f64,
    opts: &SamplingOptions,
) -> Result<StepsizeReport, StepsizeError> {
    validate(p, saddle, epsilon)?;
    let v0 = lyapunov(z0, saddle).map_err(|_| StepsizeError::DimensionMismatch {
        n: p.n_agents(),
        m: p.n_constraints(),
        found_x: z0.x.len(),
        found_mu: z0.mu.len(),
    })?;
    let r = v0.max(epsilon);
    Ok(recommend_rho(GammaEstimates {
        gamma1: estimate_gamma1(p, saddle, epsilon, opts)?,
        gamma2: estimate_gamma2(p, saddle, epsilon, r, opts)?,
        epsilon,
        r,
        n_samples: opts.n_samples,
        seed: opts.seed,
        clip_to_orthant: opts.clip_to_orthant,
    }))
}
