//! Centralized Uzawa iteration: simultaneous gradient descent in `x` and
//! projected gradient ascent in `mu`.
//!
//! This is both a standalone solver and the oracle the protocol simulator is
//! checked against. Its fixed points are exactly the KKT points of the
//! problem.

use serde::Serialize;
use thiserror::Error;

use crate::problem::{PrimalDualPoint, Problem, ProblemError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UzawaError {
    #[error("stepsize must be positive and finite, got {0}")]
    InvalidStepsize(f64),
    #[error("fixed-point tolerance must be non-negative, got {0}")]
    InvalidTolerance(f64),
    #[error("multiplier {index} is negative ({value})")]
    NegativeMultiplier { index: usize, value: f64 },
    #[error("non-finite iterate at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UzawaConfig {
    pub rho: f64,
    pub max_steps: usize,
    /// Stop once `||z_{k+1} - z_k||_2` falls to or below this.
    pub fixed_point_tol: f64,
}

impl UzawaConfig {
    pub fn validate(&self) -> Result<(), UzawaError> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(UzawaError::InvalidStepsize(self.rho));
        }
        if self.fixed_point_tol.is_nan() || self.fixed_point_tol < 0.0 {
            return Err(UzawaError::InvalidTolerance(self.fixed_point_tol));
        }
        Ok(())
    }
}

/// Componentwise `max(0, v_j)`.
pub fn project_nonneg(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

/// One simultaneous step from `pt`. Both halves read only the old point.
pub fn uzawa_step(p: &Problem, pt: &PrimalDualPoint, rho: f64) -> Result<PrimalDualPoint, UzawaError> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(UzawaError::InvalidStepsize(rho));
    }
    p.check_point(&pt.x, &pt.mu)?;
    if let Some((index, &value)) = pt.mu.iter().enumerate().find(|(_, m)| **m < 0.0) {
        return Err(UzawaError::NegativeMultiplier { index, value });
    }
    let next = step_unchecked(p, &pt.x, &pt.mu, rho);
    if !next.is_finite() {
        return Err(UzawaError::Diverged { step: 0 });
    }
    Ok(next)
}

pub(crate) fn primal_update(p: &Problem, x: &[f64], mu: &[f64], rho: f64) -> Vec<f64> {
    x.iter().enumerate().map(|(i, xi)| xi - rho * p.grad_x_component(i, x, mu)).collect()
}

pub(crate) fn dual_update(p: &Problem, x: &[f64], mu: &[f64], rho: f64) -> Vec<f64> {
    let g = p.constraint_values(x);
    mu.iter().zip(g).map(|(m, gj)| (m + rho * gj).max(0.0)).collect()
}

fn step_unchecked(p: &Problem, x: &[f64], mu: &[f64], rho: f64) -> PrimalDualPoint {
    PrimalDualPoint { x: primal_update(p, x, mu, rho), mu: dual_update(p, x, mu, rho) }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaddleSolution {
    pub point: PrimalDualPoint,
    pub steps: usize,
    pub converged: bool,
    /// Displacement of the last step taken.
    pub last_displacement: f64,
}

/// Iterates [`uzawa_step`] until the step displacement reaches
/// `cfg.fixed_point_tol` or `cfg.max_steps` steps have been taken.
pub fn solve_saddle(p: &Problem, init: &PrimalDualPoint, cfg: &UzawaConfig) -> Result<SaddleSolution, UzawaError> {
    cfg.validate()?;
    p.check_point(&init.x, &init.mu)?;
    if let Some((index, &value)) = init.mu.iter().enumerate().find(|(_, m)| **m < 0.0) {
        return Err(UzawaError::NegativeMultiplier { index, value });
    }
    let mut cur = init.clone();
    let mut last_displacement = f64::INFINITY;
    for step in 1..=cfg.max_steps {
        let next = step_unchecked(p, &cur.x, &cur.mu, cfg.rho);
        if !next.is_finite() {
            return Err(UzawaError::Diverged { step });
        }
        last_displacement = next.stacked().zip(cur.stacked()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        cur = next;
        if last_displacement <= cfg.fixed_point_tol {
            return Ok(SaddleSolution { point: cur, steps: step, converged: true, last_displacement });
        }
    }
    Ok(SaddleSolution { point: cur, steps: cfg.max_steps, converged: false, last_displacement })
}

/// KKT residuals at a point: stationarity `||dL/dx||_inf`, primal
/// infeasibility `max_j max(g_j, 0)`, and the most negative `mu_j g_j`
/// reported as a non-negative number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResidual {
    pub stationarity: f64,
    pub infeasibility: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn within(&self, tol: f64) -> bool {
        self.stationarity <= tol && self.infeasibility <= tol && self.complementarity <= tol
    }
}

pub fn kkt_residual(p: &Problem, pt: &PrimalDualPoint) -> Result<KktResidual, ProblemError> {
    let gx = p.grad_x(pt)?;
    let g = p.grad_mu(&pt.x)?;
    Ok(KktResidual {
        stationarity: gx.iter().fold(0.0, |a, v| a.max(v.abs())),
        infeasibility: g.iter().fold(0.0, |a, v| a.max(*v)),
        complementarity: pt.mu.iter().zip(&g).fold(0.0, |a, (m, gj)| a.max(-(m * gj))),
    })
}
