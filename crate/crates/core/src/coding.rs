// SPDX-License-Identifier: MIT OR Apache-2.0

//! Iterative proximal-gradient sparse coding against a fixed dictionary.
//!
//! Minimizes `½‖x − (Dz + b)‖² + λ·R(z)` from `z⁰ = 0` with the update
//! `z ← prox_{μλR}(z − μ·Dᵀ(Dz + b − x))`. A single step at `μ = 1` is
//! the unrolled encoder that SAEs generalize.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{dot, Matrix, Vector};
use crate::prox::ProxSpec;

/// Power iterations used to estimate `‖D‖²` for the default step size.
pub const POWER_ITERS: usize = 50;

/// Settings for [`sparse_code`] and [`prox_grad_step`].
///
/// `spec` selects the regularizer family (and `k` for the cardinality
/// variants); `lambda_weight` is the weight multiplying it. The threshold
/// stored inside `spec` is not used here.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoderConfig {
    pub mu: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub spec: ProxSpec,
    pub lambda_weight: f64,
}

impl CoderConfig {
    /// Default iterative configuration: `μ = 0.99/‖D‖²`, `tol = 1e-8`, 500 iterations.
    pub fn for_dictionary(dict: &Matrix, spec: ProxSpec, lambda_weight: f64) -> Self {
        let l = dict.spectral_norm_sq(POWER_ITERS);
        Self {
            mu: if l > 0.0 { 0.99 / l } else { 1.0 },
            max_iters: 500,
            tol: 1e-8,
            spec,
            lambda_weight,
        }
    }

    /// Single step at `μ = 1` whose operator is exactly `spec`.
    pub fn one_step(spec: ProxSpec) -> Self {
        let lambda_weight = match spec {
            ProxSpec::ReluSoft { lambda } => lambda,
            ProxSpec::JumpRelu { theta } => 0.5 * theta * theta,
            ProxSpec::TopK { .. } | ProxSpec::AbsTopK { .. } => 0.0,
        };
        Self {
            mu: 1.0,
            max_iters: 1,
            tol: 0.0,
            spec,
            lambda_weight,
        }
    }

    /// Operator applied after the gradient step: `prox_{μλR}`.
    pub fn step_operator(&self) -> ProxSpec {
        let w = self.mu * self.lambda_weight;
        match self.spec {
            ProxSpec::ReluSoft { .. } => ProxSpec::ReluSoft { lambda: w },
            // prox of w·(ℓ0 + ι) is JumpReLU at √(2w)
            ProxSpec::JumpRelu { .. } => ProxSpec::JumpRelu {
                theta: (2.0 * w).sqrt(),
            },
            other => other,
        }
    }

    fn validate(&self, code_len: usize) -> Result<()> {
        if !(self.mu > 0.0) || !self.mu.is_finite() {
            return Err(Error::contract(format!(
                "step size must be > 0, got {}",
                self.mu
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::contract("max_iters must be >= 1"));
        }
        if !(self.lambda_weight >= 0.0) || !(self.tol >= 0.0) {
            return Err(Error::contract("lambda_weight and tol must be >= 0"));
        }
        self.spec.validate(code_len)
    }

    /// `½‖x − (Dz + b)‖² + λ·R(z)`.
    pub fn objective(&self, z: &Vector, x: &Vector, dict: &Matrix, bias: &Vector) -> Result<f64> {
        let r = residual(z, x, dict, bias)?;
        let reg = match self.spec {
            ProxSpec::ReluSoft { .. } => ProxSpec::ReluSoft {
                lambda: self.lambda_weight,
            }
            .regularizer(z.as_slice()),
            ProxSpec::JumpRelu { .. } => {
                if z.as_slice().iter().any(|v| *v < 0.0) {
                    f64::INFINITY
                } else {
                    self.lambda_weight * z.l0() as f64
                }
            }
            other => other.regularizer(z.as_slice()),
        };
        Ok(0.5 * dot(&r, &r) + reg)
    }
}

/// `Dz + b − x`.
fn residual(z: &Vector, x: &Vector, dict: &Matrix, bias: &Vector) -> Result<Vec<f64>> {
    check_dim("sparse coding (code length)", dict.cols(), z.len())?;
    check_dim("sparse coding (input length)", dict.rows(), x.len())?;
    check_dim("sparse coding (bias length)", dict.rows(), bias.len())?;
    let mut r = dict.mul_slice(z.as_slice());
    for ((ri, bi), xi) in r.iter_mut().zip(bias.as_slice()).zip(x.as_slice()) {
        *ri += bi - xi;
    }
    Ok(r)
}

/// One proximal-gradient update `prox_{μλR}(z − μ·Dᵀ(Dz + b − x))`.
pub fn prox_grad_step(
    z: &Vector,
    x: &Vector,
    dict: &Matrix,
    bias: &Vector,
    cfg: &CoderConfig,
) -> Result<Vector> {
    cfg.validate(dict.cols())?;
    let r = residual(z, x, dict, bias)?;
    let grad = dict.mul_t_slice(&r);
    let u: Vec<f64> = z
        .as_slice()
        .iter()
        .zip(&grad)
        .map(|(zi, gi)| zi - cfg.mu * gi)
        .collect();
    cfg.step_operator().apply(&Vector::from_vec_unchecked(u))
}

/// Result of [`sparse_code`].
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub code: Vector,
    /// Iterations performed.
    pub iterations: usize,
    /// Objective value of `code`.
    pub objective: f64,
}

/// Runs proximal gradient from `z⁰ = 0` until
/// `‖zᵗ⁺¹ − zᵗ‖ / max(1, ‖zᵗ‖) < tol` or `max_iters`.
///
/// For the ℓ0-type variants the iterate with the lowest objective is
/// returned rather than the last one.
pub fn sparse_code(
    x: &Vector,
    dict: &Matrix,
    bias: &Vector,
    cfg: &CoderConfig,
) -> Result<SparseCode> {
    sparse_code_traced(x, dict, bias, cfg, |_, _| {})
}

/// [`sparse_code`] with a callback receiving `(iteration, objective)` after each step.
pub fn sparse_code_traced(
    x: &Vector,
    dict: &Matrix,
    bias: &Vector,
    cfg: &CoderConfig,
    mut trace: impl FnMut(usize, f64),
) -> Result<SparseCode> {
    cfg.validate(dict.cols())?;
    let keep_best = !matches!(cfg.spec, ProxSpec::ReluSoft { .. });
    let mut z = Vector::zeros(dict.cols());
    let mut best = z.clone();
    let mut best_obj = cfg.objective(&z, x, dict, bias)?;
    let mut iterations = 0;
    for it in 1..=cfg.max_iters {
        let next = prox_grad_step(&z, x, dict, bias, cfg)?;
        if !next.is_finite() {
            return Err(Error::CoderDiverged { iteration: it });
        }
        let obj = cfg.objective(&next, x, dict, bias)?;
        if !obj.is_finite() {
            return Err(Error::CoderDiverged { iteration: it });
        }
        trace(it, obj);
        let change = next.sub(&z)?.norm() / z.norm().max(1.0);
        z = next;
        iterations = it;
        if !keep_best || obj <= best_obj {
            best_obj = obj;
            best = z.clone();
        }
        if change < cfg.tol {
            break;
        }
    }
    Ok(SparseCode {
        code: best,
        iterations,
        objective: best_obj,
    })
}
