//! Lyapunov diagnostics: `V(z) = ||z - z_hat||^2` along a run, the region
//! each step falls in, and when the iterates enter the epsilon-ball.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::problem::{PrimalDualPoint, Problem, ProblemError};
use crate::protocol::Snapshot;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("point has dimensions ({found_x}, {found_mu}), saddle has ({expected_x}, {expected_mu})")]
    DimensionMismatch { expected_x: usize, expected_mu: usize, found_x: usize, found_mu: usize },
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("stepsize must be positive and finite, got {0}")]
    InvalidStepsize(f64),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

/// How "the epsilon-ball" is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BallConvention {
    /// Euclidean ball: `||z - z_hat|| <= eps`, i.e. `V <= eps^2`.
    #[default]
    Norm,
    /// Sublevel set of the Lyapunov function: `V <= eps`.
    Level,
}

impl BallConvention {
    /// The bound on `V` that defines the ball.
    pub fn v_threshold(self, epsilon: f64) -> f64 {
        match self {
            BallConvention::Norm => epsilon * epsilon,
            BallConvention::Level => epsilon,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BallConvention::Norm => "norm",
            BallConvention::Level => "level",
        }
    }
}

fn check_dims(pt: &PrimalDualPoint, saddle: &PrimalDualPoint) -> Result<(), AnalysisError> {
    if pt.x.len() != saddle.x.len() || pt.mu.len() != saddle.mu.len() {
        return Err(AnalysisError::DimensionMismatch {
            expected_x: saddle.x.len(),
            expected_mu: saddle.mu.len(),
            found_x: pt.x.len(),
            found_mu: pt.mu.len(),
        });
    }
    Ok(())
}

fn sq_dist(a: &PrimalDualPoint, b: &PrimalDualPoint) -> f64 {
    a.stacked().zip(b.stacked()).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// `V(pt) = ||x - x_hat||^2 + ||mu - mu_hat||^2`.
pub fn lyapunov(pt: &PrimalDualPoint, saddle: &PrimalDualPoint) -> Result<f64, AnalysisError> {
    check_dims(pt, saddle)?;
    Ok(sq_dist(pt, saddle))
}

/// Membership test for the epsilon-ball around a fixed saddle.
#[derive(Debug, Clone, PartialEq)]
pub struct BallMonitor {
    saddle: PrimalDualPoint,
    epsilon: f64,
    convention: BallConvention,
}

impl BallMonitor {
    pub fn new(saddle: PrimalDualPoint, epsilon: f64, convention: BallConvention) -> Result<Self, AnalysisError> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(AnalysisError::InvalidEpsilon(epsilon));
        }
        Ok(BallMonitor { saddle, epsilon, convention })
    }

    pub fn saddle(&self) -> &PrimalDualPoint {
        &self.saddle
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn convention(&self) -> BallConvention {
        self.convention
    }

    /// Lyapunov value. Panics if `pt` does not match the saddle's dimensions.
    pub fn v(&self, pt: &PrimalDualPoint) -> f64 {
        lyapunov(pt, &self.saddle).expect("point matches saddle dimensions")
    }

    pub fn contains(&self, v: f64) -> bool {
        v <= self.convention.v_threshold(self.epsilon)
    }
}

/// Region of the level-set decomposition a step starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Region {
    /// `V < eps/2`: `V` may grow by at most `eps/2`, so the next iterate
    /// stays within `V <= eps`.
    HalfBall,
    /// `eps/2 <= V <= R`: `V` must strictly decrease.
    Annulus,
    /// `V > R`: the trajectory has left `{V <= R}`, which is always flagged.
    Outside,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub region: Region,
    pub pass: bool,
}

/// Classifies the step `V_k -> V_next` against the guarantees of each region.
pub fn classify_step(v_k: f64, v_next: f64, epsilon: f64, r: f64) -> Verdict {
    if v_k < epsilon / 2.0 {
        Verdict { region: Region::HalfBall, pass: v_next - v_k <= epsilon / 2.0 }
    } else if v_k <= r {
        Verdict { region: Region::Annulus, pass: v_next < v_k }
    } else {
        Verdict { region: Region::Outside, pass: false }
    }
}

/// `V(z') - V(z)` for one Uzawa step, computed from the step direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaV {
    pub value: f64,
    /// Whether the projection onto `mu >= 0` clipped any component.
    pub projection_active: bool,
}

/// Closed form `-rho [2(-(x_hat - x)^T L_x + (mu_hat - mu)^T d) - rho(||L_x||^2 + ||d||^2)]`
/// with `d = (mu' - mu) / rho` the projected dual direction. When no
/// component is clipped, `d` is the constraint vector `g(x)`.
pub fn predicted_delta_v(
    p: &Problem,
    saddle: &PrimalDualPoint,
    pt: &PrimalDualPoint,
    rho: f64,
) -> Result<DeltaV, AnalysisError> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(AnalysisError::InvalidStepsize(rho));
    }
    check_dims(pt, saddle)?;
    let lx = p.grad_x(pt)?;
    let g = p.grad_mu(&pt.x)?;
    let mut projection_active = false;
    let d: Vec<f64> = pt
        .mu
        .iter()
        .zip(&g)
        .map(|(m, gj)| {
            let raw = m + rho * gj;
            if raw < 0.0 {
                projection_active = true;
                -m / rho
            } else {
                *gj
            }
        })
        .collect();
    let dot_x: f64 = saddle.x.iter().zip(&pt.x).zip(&lx).map(|((xh, x), l)| -(xh - x) * l).sum();
    let dot_mu: f64 = saddle.mu.iter().zip(&pt.mu).zip(&d).map(|((mh, m), dj)| (mh - m) * dj).sum();
    let norms: f64 = lx.iter().chain(&d).map(|v| v * v).sum();
    Ok(DeltaV { value: -rho * (2.0 * (dot_x + dot_mu) - rho * norms), projection_active })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub timestep: u64,
    pub v: f64,
    /// `V[k+1] - V[k]`; absent on the last record.
    pub delta_v: Option<f64>,
    pub in_ball: bool,
    pub in_half_ball: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Entry {
    pub step: usize,
    pub timestep: u64,
}

/// Lyapunov values of a sequence of synchronized snapshots.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTrace {
    pub saddle: PrimalDualPoint,
    pub epsilon: f64,
    pub convention: BallConvention,
    pub records: Vec<StepRecord>,
}

/// Aggregate diagnostics of a [`ConvergenceTrace`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceSummary {
    pub entry: Option<Entry>,
    pub final_v: Option<f64>,
    /// Radius of the annulus: `max(eps, V(z_0))`.
    pub r: f64,
    pub half_ball_steps: usize,
    pub annulus_steps: usize,
    /// Steps starting outside `{V <= R}`; each one is a violation.
    pub outside_steps: usize,
    pub half_ball_failures: usize,
    pub annulus_failures: usize,
    /// Snapshots after the first entry that lie outside the ball.
    pub exits_after_entry: usize,
    pub v_increases: usize,
}

impl ConvergenceTrace {
    pub fn from_snapshots(
        snapshots: &[Snapshot],
        saddle: &PrimalDualPoint,
        epsilon: f64,
        convention: BallConvention,
    ) -> Result<Self, AnalysisError> {
        let monitor = BallMonitor::new(saddle.clone(), epsilon, convention)?;
        let mut records = snapshots
            .iter()
            .map(|s| {
                let v = lyapunov(&s.point, saddle)?;
                Ok(StepRecord {
                    step: s.step,
                    timestep: s.timestep,
                    v,
                    delta_v: None,
                    in_ball: monitor.contains(v),
                    in_half_ball: v <= epsilon / 2.0,
                })
            })
            .collect::<Result<Vec<_>, AnalysisError>>()?;
        for k in 1..records.len() {
            records[k - 1].delta_v = Some(records[k].v - records[k - 1].v);
        }
        Ok(ConvergenceTrace { saddle: saddle.clone(), epsilon, convention, records })
    }

    pub fn r(&self) -> f64 {
        self.records.first().map_or(self.epsilon, |r| r.v.max(self.epsilon))
    }

    pub fn verdicts(&self) -> Vec<Verdict> {
        let r = self.r();
        self.records.windows(2).map(|w| classify_step(w[0].v, w[1].v, self.epsilon, r)).collect()
    }

    pub fn summary(&self) -> ConvergenceSummary {
        let entry = detect_entry(self, self.convention);
        let mut s = ConvergenceSummary {
            entry,
            final_v: self.records.last().map(|r| r.v),
            r: self.r(),
            half_ball_steps: 0,
            annulus_steps: 0,
            outside_steps: 0,
            half_ball_failures: 0,
            annulus_failures: 0,
            exits_after_entry: 0,
            v_increases: self.records.windows(2).filter(|w| w[1].v > w[0].v).count(),
        };
        for v in self.verdicts() {
            match v.region {
                Region::HalfBall => {
                    s.half_ball_steps += 1;
                    s.half_ball_failures += usize::from(!v.pass);
                }
                Region::Annulus => {
                    s.annulus_steps += 1;
                    s.annulus_failures += usize::from(!v.pass);
                }
                Region::Outside => s.outside_steps += 1,
            }
        }
        if let Some(e) = entry {
            let threshold = self.convention.v_threshold(self.epsilon);
            s.exits_after_entry = self.records.iter().filter(|r| r.step > e.step && r.v > threshold).count();
        }
        s
    }
}

/// First snapshot inside the ball under `convention`, using the trace's epsilon.
pub fn detect_entry(trace: &ConvergenceTrace, convention: BallConvention) -> Option<Entry> {
    let threshold = convention.v_threshold(trace.epsilon);
    trace.records.iter().find(|r| r.v <= threshold).map(|r| Entry { step: r.step, timestep: r.timestep })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances;
    use crate::uzawa::uzawa_step;

    fn pt(x: &[f64], mu: &[f64]) -> PrimalDualPoint {
        PrimalDualPoint::new(x.to_vec(), mu.to_vec())
    }

    #[test]
    fn lyapunov_examples() {
        let s = pt(&[0.0, 0.0], &[0.0]);
        assert_eq!(lyapunov(&s, &s).unwrap(), 0.0);
        assert_eq!(lyapunov(&pt(&[1.0, 2.0], &[2.0]), &s).unwrap(), 9.0);
        assert!(matches!(lyapunov(&pt(&[1.0], &[2.0]), &s), Err(AnalysisError::DimensionMismatch { .. })));
    }

    #[test]
    fn region_classification() {
        let (eps, r) = (0.3, 10.0);
        assert_eq!(classify_step(2.0, 1.5, eps, r), Verdict { region: Region::Annulus, pass: true });
        assert_eq!(classify_step(2.0, 2.0, eps, r), Verdict { region: Region::Annulus, pass: false });
        assert_eq!(classify_step(eps / 4.0, eps / 2.0, eps, r), Verdict { region: Region::HalfBall, pass: true });
        assert_eq!(classify_step(eps / 4.0, 0.8 * eps, eps, r), Verdict { region: Region::HalfBall, pass: false });
        assert_eq!(classify_step(r / 2.0, r / 2.0 + 0.001, eps, r), Verdict { region: Region::Annulus, pass: false });
        assert_eq!(classify_step(eps / 2.0, eps / 2.0, eps, r).region, Region::Annulus);
        assert_eq!(classify_step(11.0, 10.0, eps, r), Verdict { region: Region::Outside, pass: false });
    }

    #[test]
    fn conventions() {
        assert_eq!(BallConvention::Norm.v_threshold(0.3), 0.3 * 0.3);
        assert_eq!(BallConvention::Level.v_threshold(0.3), 0.3);
        let m = BallMonitor::new(pt(&[0.0], &[]), 0.5, BallConvention::Norm).unwrap();
        assert!(m.contains(0.25) && !m.contains(0.26));
        assert!(BallMonitor::new(pt(&[0.0], &[]), 0.0, BallConvention::Norm).is_err());
    }

    #[test]
    fn entry_detection_picks_first_snapshot_inside() {
        let s = pt(&[0.0], &[]);
        let snaps: Vec<Snapshot> = [2.0, 0.5, 0.2, 0.05, 0.31]
            .iter()
            .enumerate()
            .map(|(c, &x)| Snapshot { step: c, timestep: 3 * c as u64, point: pt(&[x], &[]) })
            .collect();
        let trace = ConvergenceTrace::from_snapshots(&snaps, &s, 0.3, BallConvention::Norm).unwrap();
        assert_eq!(detect_entry(&trace, BallConvention::Norm), Some(Entry { step: 2, timestep: 6 }));
        assert_eq!(detect_entry(&trace, BallConvention::Level), Some(Entry { step: 1, timestep: 3 }));
        let sum = trace.summary();
        assert_eq!(sum.exits_after_entry, 1);
        assert_eq!(sum.r, 4.0);
        assert_eq!(sum.v_increases, 1);
    }

    #[test]
    fn closed_form_matches_direct_difference() {
        let p = instances::six_agent_problem();
        let s = instances::kkt_saddle();
        let rho = instances::SIX_AGENT_RHO;
        let mut z = PrimalDualPoint::zeros(6, 3);
        let mut clipped = 0;
        for _ in 0..2_000 {
            let next = uzawa_step(&p, &z, rho).unwrap();
            let direct = lyapunov(&next, &s).unwrap() - lyapunov(&z, &s).unwrap();
            let pred = predicted_delta_v(&p, &s, &z, rho).unwrap();
            clipped += pred.projection_active as usize;
            let scale = lyapunov(&z, &s).unwrap().max(1.0);
            assert!((direct - pred.value).abs() <= 1e-9 * scale, "{direct} vs {}", pred.value);
            z = next;
        }
        assert!(clipped > 0, "projection never exercised");
    }
}
