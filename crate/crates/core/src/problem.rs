//! The constrained program, its Lagrangian, and the gradient fields every
//! update rule reads.
//!
//! Agent `i` owns the scalar variable `x{i}` (1-based) and a private objective
//! `f_i(x_i)`. Global constraints `g_j(x) <= 0` may mix any variables. All
//! symbolic partials are computed once in [`Problem::new`] and cached in bound
//! form.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse_expr, BoundExpr, Expression, ParseError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("a problem needs at least one agent")]
    NoAgents,
    #[error("expected {expected} objectives, got {found}")]
    ObjectiveCount { expected: usize, found: usize },
    #[error("objective {agent} references {var:?}; it may only use x{agent}")]
    ForeignVariable { agent: usize, var: String },
    #[error("constraint {constraint} references unknown variable {var:?}")]
    UnknownVariable { constraint: usize, var: String },
    #[error("objective {index}: {source}")]
    ObjectiveParse { index: usize, source: ParseError },
    #[error("constraint {index}: {source}")]
    ConstraintParse { index: usize, source: ParseError },
    #[error("{what}: expected length {expected}, got {found}")]
    DimensionMismatch { what: &'static str, expected: usize, found: usize },
}

/// A primal-dual pair `z = (x, mu)`. Iterates keep `mu >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalDualPoint {
    pub x: Vec<f64>,
    pub mu: Vec<f64>,
}

impl PrimalDualPoint {
    pub fn new(x: Vec<f64>, mu: Vec<f64>) -> Self {
        Self { x, mu }
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self { x: vec![0.0; n], mu: vec![0.0; m] }
    }

    pub fn is_dual_feasible(&self) -> bool {
        self.mu.iter().all(|&m| m >= 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.mu).all(|v| v.is_finite())
    }

    /// Stacked `(x, mu)` view.
    pub fn stacked(&self) -> impl Iterator<Item = f64> + '_ {
        self.x.iter().chain(&self.mu).copied()
    }
}

/// Canonical variable name of agent `i` (0-based index).
pub fn var_name(i: usize) -> String {
    format!("x{}", i + 1)
}

#[derive(Debug, Clone)]
pub struct Problem {
    names: Vec<String>,
    objectives: Vec<Expression>,
    constraints: Vec<Expression>,
    objective_grads: Vec<Expression>,
    /// `partials[j][i]` = dg_j/dx_i
    partials: Vec<Vec<Expression>>,
    objectives_b: Vec<BoundExpr>,
    objective_grads_b: Vec<BoundExpr>,
    constraints_b: Vec<BoundExpr>,
    partials_b: Vec<Vec<BoundExpr>>,
}

impl Problem {
    pub fn new(
        n_agents: usize,
        objectives: Vec<Expression>,
        constraints: Vec<Expression>,
    ) -> Result<Self, ProblemError> {
        if n_agents == 0 {
            return Err(ProblemError::NoAgents);
        }
        if objectives.len() != n_agents {
            return Err(ProblemError::ObjectiveCount { expected: n_agents, found: objectives.len() });
        }
        let names: Vec<String> = (0..n_agents).map(var_name).collect();
        for (i, f) in objectives.iter().enumerate() {
            if let Some(v) = f.variables().into_iter().find(|v| *v != names[i]) {
                return Err(ProblemError::ForeignVariable { agent: i + 1, var: v.to_string() });
            }
        }
        for (j, g) in constraints.iter().enumerate() {
            if let Some(v) = g.variables().into_iter().find(|v| !names.iter().any(|n| n == v)) {
                return Err(ProblemError::UnknownVariable { constraint: j + 1, var: v.to_string() });
            }
        }
        let objective_grads: Vec<Expression> = objectives.iter().zip(&names).map(|(f, x)| f.differentiate(x)).collect();
        let partials: Vec<Vec<Expression>> =
            constraints.iter().map(|g| names.iter().map(|x| g.differentiate(x)).collect()).collect();

        let bind = |e: &Expression| e.bind(&names).expect("variables validated above");
        Ok(Self {
            objectives_b: objectives.iter().map(bind).collect(),
            objective_grads_b: objective_grads.iter().map(bind).collect(),
            constraints_b: constraints.iter().map(bind).collect(),
            partials_b: partials.iter().map(|row| row.iter().map(bind).collect()).collect(),
            names,
            objectives,
            constraints,
            objective_grads,
            partials,
        })
    }

    /// Builds a problem from expression text.
    pub fn parse<S: AsRef<str>>(n_agents: usize, objectives: &[S], constraints: &[S]) -> Result<Self, ProblemError> {
        let names: Vec<String> = (0..n_agents).map(var_name).collect();
        let objectives = objectives
            .iter()
            .enumerate()
            .map(|(index, t)| {
                parse_expr(t.as_ref(), &names)
                    .map_err(|source| ProblemError::ObjectiveParse { index: index + 1, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let constraints = constraints
            .iter()
            .enumerate()
            .map(|(index, t)| {
                parse_expr(t.as_ref(), &names)
                    .map_err(|source| ProblemError::ConstraintParse { index: index + 1, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(n_agents, objectives, constraints)
    }

    pub fn n_agents(&self) -> usize {
        self.names.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.constraints.len()
    }

    pub fn var_names(&self) -> &[String] {
        &self.names
    }

    pub fn objectives(&self) -> &[Expression] {
        &self.objectives
    }

    pub fn constraints(&self) -> &[Expression] {
        &self.constraints
    }

    /// `df_i/dx_i` as an expression over `x{i+1}`.
    pub fn objective_grad(&self, i: usize) -> &Expression {
        &self.objective_grads[i]
    }

    /// `dg_j/dx_i`.
    pub fn partial(&self, j: usize, i: usize) -> &Expression {
        &self.partials[j][i]
    }

    pub fn check_point(&self, x: &[f64], mu: &[f64]) -> Result<(), ProblemError> {
        self.check_x(x)?;
        if mu.len() != self.n_constraints() {
            return Err(ProblemError::DimensionMismatch {
                what: "mu",
                expected: self.n_constraints(),
                found: mu.len(),
            });
        }
        Ok(())
    }

    fn check_x(&self, x: &[f64]) -> Result<(), ProblemError> {
        if x.len() != self.n_agents() {
            return Err(ProblemError::DimensionMismatch { what: "x", expected: self.n_agents(), found: x.len() });
        }
        Ok(())
    }

    /// `F(x) = sum_i f_i(x_i)`.
    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objectives_b.iter().map(|f| f.eval(x)).sum()
    }

    /// `L(x, mu) = F(x) + mu^T g(x)`.
    pub fn lagrangian(&self, pt: &PrimalDualPoint) -> Result<f64, ProblemError> {
        self.check_point(&pt.x, &pt.mu)?;
        Ok(self.lagrangian_unchecked(&pt.x, &pt.mu))
    }

    pub(crate) fn lagrangian_unchecked(&self, x: &[f64], mu: &[f64]) -> f64 {
        let penalty: f64 = mu.iter().zip(&self.constraints_b).map(|(m, g)| m * g.eval(x)).sum();
        self.objective_value(x) + penalty
    }

    /// `dL/dx_i` at `(x, mu)`; the single arithmetic path shared by the
    /// centralized step and the agents.
    #[inline]
    pub fn grad_x_component(&self, i: usize, x: &[f64], mu: &[f64]) -> f64 {
        let mut acc = self.objective_grads_b[i].eval(x);
        for (m, row) in mu.iter().zip(&self.partials_b) {
            acc += m * row[i].eval(x);
        }
        acc
    }

    /// `dL/dx` at `pt`.
    pub fn grad_x(&self, pt: &PrimalDualPoint) -> Result<Vec<f64>, ProblemError> {
        self.check_point(&pt.x, &pt.mu)?;
        Ok(self.grad_x_unchecked(&pt.x, &pt.mu))
    }

    pub(crate) fn grad_x_unchecked(&self, x: &[f64], mu: &[f64]) -> Vec<f64> {
        (0..self.n_agents()).map(|i| self.grad_x_component(i, x, mu)).collect()
    }

    /// `dL/dmu = g(x)`.
    pub fn grad_mu(&self, x: &[f64]) -> Result<Vec<f64>, ProblemError> {
        self.check_x(x)?;
        Ok(self.constraint_values(x))
    }

    pub(crate) fn constraint_values(&self, x: &[f64]) -> Vec<f64> {
        self.constraints_b.iter().map(|g| g.eval(x)).collect()
    }

    /// Samples Hessians of `F` and every `g_j` at random points of the box
    /// `center ± radius` and reports each function whose Hessian has an
    /// eigenvalue below `-tol` somewhere. Convexity is a precondition the rest
    /// of the crate assumes; this is only a probe.
    pub fn convexity_probe(
        &self,
        center: &[f64],
        radius: f64,
        n_points: usize,
        tol: f64,
        seed: u64,
    ) -> Result<Vec<ConvexityFinding>, ProblemError> {
        self.check_x(center)?;
        let n = self.n_agents();
        let second = |e: &Expression| -> Vec<Vec<BoundExpr>> {
            self.names
                .iter()
                .map(|a| {
                    let da = e.differentiate(a);
                    self.names.iter().map(|b| da.differentiate(b).bind(&self.names).expect("validated")).collect()
                })
                .collect()
        };
        let objective_hess: Vec<BoundExpr> = self
            .objective_grads
            .iter()
            .zip(&self.names)
            .map(|(d, x)| d.differentiate(x).bind(&self.names).expect("validated"))
            .collect();
        let constraint_hess: Vec<_> = self.constraints.iter().map(second).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut findings = Vec::new();
        let mut worst: Vec<Option<ConvexityFinding>> = vec![None; self.n_constraints() + 1];
        for _ in 0..n_points {
            let x: Vec<f64> = center.iter().map(|c| c + rng.random_range(-radius..=radius)).collect();
            let diag = DMatrix::from_fn(n, n, |a, b| if a == b { objective_hess[a].eval(&x) } else { 0.0 });
            let mut mats = vec![diag];
            for h in &constraint_hess {
                mats.push(DMatrix::from_fn(n, n, |a, b| h[a][b].eval(&x)));
            }
            for (k, mat) in mats.into_iter().enumerate() {
                let min_eig = SymmetricEigen::new(mat).eigenvalues.min();
                if min_eig < -tol && worst[k].as_ref().is_none_or(|w| min_eig < w.min_eigenvalue) {
                    let function = if k == 0 { ProbedFunction::Objective } else { ProbedFunction::Constraint(k) };
                    worst[k] = Some(ConvexityFinding { function, point: x.clone(), min_eigenvalue: min_eig });
                }
            }
        }
        findings.extend(worst.into_iter().flatten());
        Ok(findings)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbedFunction {
    /// The separable sum `F`.
    Objective,
    /// Constraint `g_j`, 1-based.
    Constraint(usize),
}

/// The most negative Hessian eigenvalue seen for one function.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityFinding {
    pub function: ProbedFunction,
    pub point: Vec<f64>,
    pub min_eigenvalue: f64,
}
