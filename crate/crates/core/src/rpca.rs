//! Robust PCA baseline: the Lagrangian principal component pursuit
//!
//! ```text
//! min_{L,X} ‖L‖_* + λ‖X‖₁ + (μ/2)‖Y − L − X‖²_F
//! ```
//!
//! solved by exact block minimization, alternating
//! `X ← soft(Y − L, λ/μ)` and `L ← svt(Y − X, 1/μ)` from `L = X = 0`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::proxops::{nuclear_norm, soft_threshold, svt};
use crate::tensors::CasoratiMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpcaConfig {
    pub lambda: f64,
    pub mu: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl RpcaConfig {
    pub const DEFAULT_MU: f64 = 2.0;
    pub const DEFAULT_MAX_ITERS: usize = 500;
    pub const DEFAULT_REL_TOL: f64 = 1e-6;

    /// Defaults for an `n × p` problem: `λ = 1/√max(n, p)`, `μ = 2`.
    pub fn for_shape(n: usize, p: usize) -> Self {
        Self {
            lambda: default_lambda(n, p),
            mu: Self::DEFAULT_MU,
            max_iters: Self::DEFAULT_MAX_ITERS,
            rel_tol: Self::DEFAULT_REL_TOL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu), ("rel_tol", self.rel_tol)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::argument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_iters == 0 {
            return Err(Error::argument("max_iters must be at least 1"));
        }
        Ok(())
    }
}

pub fn default_lambda(n: usize, p: usize) -> f64 {
    1.0 / (n.max(p) as f64).sqrt()
}

/// A low-rank plus foreground split with solver diagnostics.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub l: CasoratiMatrix,
    pub x: CasoratiMatrix,
    /// Objective before the first iteration followed by one value per iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn l1_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

fn objective_terms(
    y: &DMatrix<f64>,
    l: &DMatrix<f64>,
    x: &DMatrix<f64>,
    lambda: f64,
    mu: f64,
) -> Result<(f64, f64, f64)> {
    let fit = 0.5 * mu * (y - l - x).norm_squared();
    Ok((nuclear_norm(l)?, lambda * l1_norm(x), fit))
}

/// `‖L‖_* + λ‖X‖₁ + (μ/2)‖Y − L − X‖²_F`.
pub fn rpca_objective(
    y: &CasoratiMatrix,
    l: &CasoratiMatrix,
    x: &CasoratiMatrix,
    cfg: &RpcaConfig,
) -> Result<f64> {
    y.check_same_shape(l, "rpca objective (Y vs L)")?;
    y.check_same_shape(x, "rpca objective (Y vs X)")?;
    let (nuc, sparse, fit) = objective_terms(y.values(), l.values(), x.values(), cfg.lambda, cfg.mu)?;
    Ok(nuc + sparse + fit)
}

/// `−[γ‖L‖_* + λ‖X‖₁ + (μ/2)‖Y − L − X‖²_F]`, additive constant fixed at 0.
pub fn rpca_log_posterior(
    y: &CasoratiMatrix,
    l: &CasoratiMatrix,
    x: &CasoratiMatrix,
    cfg: &RpcaConfig,
    gamma: f64,
) -> Result<f64> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::argument(format!("gamma must be positive, got {gamma}")));
    }
    y.check_same_shape(l, "rpca log posterior (Y vs L)")?;
    y.check_same_shape(x, "rpca log posterior (Y vs X)")?;
    let (nuc, sparse, fit) = objective_terms(y.values(), l.values(), x.values(), cfg.lambda, cfg.mu)?;
    Ok(-(gamma * nuc + sparse + fit))
}

pub fn rpca_solve(y: &CasoratiMatrix, cfg: &RpcaConfig) -> Result<Decomposition> {
    cfg.validate()?;
    if y.p() == 1 {
        log::warn!("rpca on a single frame: the low-rank model is degenerate");
    }
    let yv = y.values();
    let (n, p) = yv.shape();
    let mut l = DMatrix::zeros(n, p);
    let mut x = DMatrix::zeros(n, p);
    let (nuc, sparse, fit) = objective_terms(yv, &l, &x, cfg.lambda, cfg.mu)?;
    let mut trace = vec![nuc + sparse + fit];
    let mut converged = false;
    let mut iterations = 0;

    for k in 1..=cfg.max_iters {
        let x_next = soft_threshold(&(yv - &l), cfg.lambda / cfg.mu)?;
        let l_next = svt(&(yv - &x_next), 1.0 / cfg.mu).map_err(|e| e.at_step(k))?;
        if l_next.iter().chain(x_next.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numerical(Some(k), "non-finite rpca iterate"));
        }
        let change = ((&x_next - &x).norm_squared() + (&l_next - &l).norm_squared()).sqrt();
        let scale = (x.norm_squared() + l.norm_squared()).sqrt().max(1.0);
        l = l_next;
        x = x_next;
        iterations = k;
        let (nuc, sparse, fit) = objective_terms(yv, &l, &x, cfg.lambda, cfg.mu)?;
        trace.push(nuc + sparse + fit);
        if change / scale < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    log::debug!("rpca: {iterations} iterations, converged={converged}");

    Ok(Decomposition {
        l: y.with_values(l)?,
        x: y.with_values(x)?,
        objective_trace: trace,
        iterations,
        converged,
    })
}
