//! Diagonal Gaussians on the autodiff graph: reparameterised sampling,
//! log-density, closed-form KL, and the categorical cross-entropy used for
//! goal supervision.
//!
//! All functions accept batched parameters (`[rows, d]`) as well as single
//! vectors; the `*_terms` variants keep the per-element contributions so the
//! caller can mask rows before reducing.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 10.0;
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean and log-variance of a diagonal Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct GaussianParams {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianParams {
    pub fn new(g: &Graph, mean: Var, log_var: Var) -> Result<Self> {
        if g.shape(mean) != g.shape(log_var) {
            return Err(Error::ShapeMismatch {
                op: "gaussian",
                lhs: g.shape(mean).to_vec(),
                rhs: g.shape(log_var).to_vec(),
            });
        }
        Ok(Self { mean, log_var })
    }

    /// Splits a `[rows, 2d]` head output into mean and clamped log-variance.
    pub fn from_head(g: &mut Graph, out: Var, dim: usize) -> Result<Self> {
        let mean = g.narrow(out, 1, 0, dim)?;
        let raw = g.narrow(out, 1, dim, dim)?;
        let log_var = g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(Self { mean, log_var })
    }

    pub fn dim(&self, g: &Graph) -> usize {
        *g.shape(self.mean).last().unwrap_or(&1)
    }
}

fn check_same(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// `mean + exp(log_var / 2) ⊙ noise`.
pub fn sample_reparameterized(g: &mut Graph, p: &GaussianParams, noise: Var) -> Result<Var> {
    check_same(g, "sample_reparameterized", p.mean, noise)?;
    let half = g.scale(p.log_var, 0.5)?;
    let std = g.exp(half)?;
    let scaled = g.mul(std, noise)?;
    g.add(p.mean, scaled)
}

/// Per-element `log N(x | μ, σ²)`.
pub fn log_prob_terms(g: &mut Graph, p: &GaussianParams, x: Var) -> Result<Var> {
    check_same(g, "log_prob", p.mean, x)?;
    let diff = g.sub(x, p.mean)?;
    let sq = g.mul(diff, diff)?;
    let neg_lv = g.neg(p.log_var)?;
    let inv_var = g.exp(neg_lv)?;
    let quad = g.mul(sq, inv_var)?;
    let quad = g.scale(quad, -0.5)?;
    let norm = g.affine(p.log_var, -0.5, -0.5 * (2.0 * PI).ln())?;
    g.add(norm, quad)
}

pub fn log_prob(g: &mut Graph, p: &GaussianParams, x: Var) -> Result<Var> {
    let terms = log_prob_terms(g, p, x)?;
    g.sum(terms)
}

/// Per-element `KL(q || p)` for diagonal Gaussians.
pub fn kl_terms(g: &mut Graph, q: &GaussianParams, p: &GaussianParams) -> Result<Var> {
    check_same(g, "kl_divergence", q.mean, p.mean)?;
    let diff = g.sub(q.mean, p.mean)?;
    let sq = g.mul(diff, diff)?;
    let var_q = g.exp(q.log_var)?;
    let num = g.add(var_q, sq)?;
    let neg_lv_p = g.neg(p.log_var)?;
    let inv_var_p = g.exp(neg_lv_p)?;
    let ratio = g.mul(num, inv_var_p)?;
    let log_ratio = g.sub(p.log_var, q.log_var)?;
    let inner = g.add(log_ratio, ratio)?;
    g.affine(inner, 0.5, -0.5)
}

pub fn kl_divergence(g: &mut Graph, q: &GaussianParams, p: &GaussianParams) -> Result<Var> {
    let terms = kl_terms(g, q, p)?;
    g.sum(terms)
}

/// Rejects anything that is not a row-wise one-hot.
pub fn check_one_hot(target: &Tensor) -> Result<()> {
    let (rows, _) = target.dims2()?;
    for r in 0..rows {
        let row = target.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::invalid(
                "cross_entropy",
                format!("target row {r} is not one-hot"),
            ));
        }
    }
    Ok(())
}

/// `−Σ_k target_k · log(max(probs_k, 1e-12))`, summed over rows.
pub fn cross_entropy_categorical(g: &mut Graph, target: &Tensor, probs: Var) -> Result<Var> {
    check_one_hot(target)?;
    let t = g.constant(target.clone());
    check_same(g, "cross_entropy", t, probs)?;
    let floored = g.clamp(probs, PROB_FLOOR, f64::INFINITY)?;
    let logp = g.log(floored)?;
    let picked = g.mul(t, logp)?;
    let total = g.sum(picked)?;
    g.neg(total)
}

/// Cross-entropy summed over the rows where `rows[r]` is true.
pub fn cross_entropy_rows(
    g: &mut Graph,
    target: &Tensor,
    probs: Var,
    rows: &[bool],
) -> Result<Var> {
    check_one_hot(target)?;
    let (n, k) = target.dims2()?;
    if rows.len() != n {
        return Err(Error::invalid(
            "cross_entropy",
            format!("{} row flags for {n} rows", rows.len()),
        ));
    }
    let mut weighted = target.clone();
    for (r, &keep) in rows.iter().enumerate() {
        if !keep {
            weighted.data_mut()[r * k..(r + 1) * k].fill(0.0);
        }
    }
    let t = g.constant(weighted);
    check_same(g, "cross_entropy", t, probs)?;
    let floored = g.clamp(probs, PROB_FLOOR, f64::INFINITY)?;
    let logp = g.log(floored)?;
    let picked = g.mul(t, logp)?;
    let total = g.sum(picked)?;
    g.neg(total)
}
