//! Mixture-model mathematics: stick-breaking and softmax weights, component
//! likelihoods, posteriors, the Q-function, log-likelihood and the training
//! loss. Probability arithmetic stays in the log domain; rows are pixels,
//! columns are components, and the background is always the last component.
//!
//! Plain-tensor versions of the core quantities exist alongside the tape
//! versions. The plain ones are direct transcriptions used for validation and
//! evaluation; the tape ones are what training differentiates. Tests hold the
//! two routes against each other.

use crate::error::LdpError;
use crate::tensor::{Tape, Tensor, Var};

/// Distribution family of the mixture components. Only the mean (Gaussian) or
/// success probability (Bernoulli) is learnable; the Gaussian variance is the
/// fixed constant `1/alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ComponentModel {
    Gaussian { alpha: f64 },
    Bernoulli,
}

impl ComponentModel {
    pub fn gaussian(alpha: f64) -> Result<Self, LdpError> {
        if alpha > 0.0 {
            Ok(ComponentModel::Gaussian { alpha })
        } else {
            Err(LdpError::Domain(format!("gaussian precision must be positive, got {}", alpha)))
        }
    }
}

/// Background prior distribution plus the regularization weight of the KL
/// term in the loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorSpec {
    pub dist: PriorDist,
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PriorDist {
    Gaussian { mean: f64 },
    Bernoulli { theta: f64 },
}

impl PriorSpec {
    pub fn validate(&self) -> Result<(), LdpError> {
        if self.lambda < 0.0 {
            return Err(LdpError::Domain(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let PriorDist::Bernoulli { theta } = self.dist {
            if !(theta > 0.0 && theta < 1.0) {
                return Err(LdpError::Domain(format!(
                    "bernoulli prior parameter must lie in (0,1), got {}",
                    theta
                )));
            }
        }
        Ok(())
    }

    /// Background appearance parameter at EM initialization (the prior mean
    /// or success probability).
    pub fn background_init(&self) -> f64 {
        match self.dist {
            PriorDist::Gaussian { mean } => mean,
            PriorDist::Bernoulli { theta } => theta,
        }
    }
}

/// Snapshot of one E-step: likelihoods (log domain), weights, posteriors and
/// stick lengths, all pixel-major `[M,K]` (`c` is `[M,K-1]`).
#[derive(Clone, Debug)]
pub struct MixtureState {
    pub log_p: Tensor,
    pub pi: Tensor,
    pub gamma: Tensor,
    pub c: Tensor,
}

impl MixtureState {
    /// Per-pixel argmax of the posterior, ties broken toward the lowest
    /// component index.
    pub fn labels(&self) -> Vec<u8> {
        argmax_rows(&self.gamma)
    }
}

pub fn argmax_rows(gamma: &Tensor) -> Vec<u8> {
    let (m, k) = (gamma.rows(), gamma.cols());
    let d = gamma.data();
    (0..m)
        .map(|i| {
            let row = &d[i * k..(i + 1) * k];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best as u8
        })
        .collect()
}

// ── Plain-tensor reference forms ─────────────────────────────────────

/// Truncated stick-breaking weights. `c` is `[M,K-1]` with entries in (0,1);
/// the result is `[M,K]`, the last column being the background residual.
pub fn stick_breaking_weights(c: &Tensor) -> Result<Tensor, LdpError> {
    let (m, km1) = (c.rows(), c.cols());
    for &v in c.data() {
        if !(v > 0.0 && v < 1.0) {
            return Err(LdpError::Domain(format!("stick length {} outside (0,1)", v)));
        }
    }
    let k = km1 + 1;
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let mut remaining = 1.0;
        for j in 0..km1 {
            let cj = c.at(i, j);
            out[i * k + j] = cj * remaining;
            remaining *= 1.0 - cj;
        }
        out[i * k + km1] = remaining;
    }
    Ok(Tensor::matrix(m, k, out))
}

/// Per-pixel softmax over component logits `[M,K]`.
pub fn softmax_weights(logits: &Tensor) -> Tensor {
    let (m, k) = (logits.rows(), logits.cols());
    let d = logits.data();
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let row = &d[i * k..(i + 1) * k];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for j in 0..k {
            let e = (row[j] - mx).exp();
            out[i * k + j] = e;
            s += e;
        }
        for j in 0..k {
            out[i * k + j] /= s;
        }
    }
    Tensor::matrix(m, k, out)
}

/// Log density (Gaussian) or log mass (Bernoulli) of one pixel intensity
/// under one component parameter.
pub fn log_component_likelihood(x: f64, param: f64, model: ComponentModel) -> f64 {
    match model {
        ComponentModel::Gaussian { alpha } => {
            0.5 * (alpha / (2.0 * std::f64::consts::PI)).ln() - 0.5 * alpha * (x - param) * (x - param)
        }
        ComponentModel::Bernoulli => x * param.ln() + (1.0 - x) * (1.0 - param).ln(),
    }
}

pub fn component_likelihood(x: f64, param: f64, model: ComponentModel) -> f64 {
    log_component_likelihood(x, param, model).exp()
}

/// Posterior responsibilities from likelihoods and weights, `[M,K]` each.
/// Inputs are plain probabilities; the computation runs through logs so a
/// row whose every product underflows still normalizes cleanly.
pub fn posterior(p: &Tensor, pi: &Tensor) -> Tensor {
    assert_eq!(p.shape(), pi.shape(), "posterior operands must share shape");
    let (m, k) = (p.rows(), p.cols());
    let mut logits = vec![0.0; m * k];
    for i in 0..m * k {
        logits[i] = p.data()[i].ln() + pi.data()[i].ln();
    }
    softmax_weights(&Tensor::matrix(m, k, logits))
}

/// Q-function of EM: `sum_m sum_k gamma * (log p + log pi)`, with `gamma`
/// treated as a constant of the current E-step.
pub fn q_function(gamma: &Tensor, log_p: &Tensor, pi: &Tensor) -> f64 {
    assert_eq!(gamma.shape(), log_p.shape(), "q_function operands must share shape");
    assert_eq!(gamma.shape(), pi.shape(), "q_function operands must share shape");
    gamma
        .data()
        .iter()
        .zip(log_p.data().iter().zip(pi.data().iter()))
        .map(|(&g, (&lp, &w))| if g == 0.0 { 0.0 } else { g * (lp + w.ln()) })
        .sum()
}

/// Observed-data log-likelihood `sum_m ln sum_k p * pi` via log-sum-exp.
pub fn log_likelihood(log_p: &Tensor, pi: &Tensor) -> f64 {
    assert_eq!(log_p.shape(), pi.shape(), "log_likelihood operands must share shape");
    let (m, k) = (log_p.rows(), log_p.cols());
    let mut total = 0.0;
    for i in 0..m {
        let mut mx = f64::NEG_INFINITY;
        for j in 0..k {
            let v = log_p.at(i, j) + pi.at(i, j).ln();
            if v > mx {
                mx = v;
            }
        }
        let s: f64 = (0..k).map(|j| (log_p.at(i, j) + pi.at(i, j).ln() - mx).exp()).sum();
        total += mx + s.ln();
    }
    total
}

/// Shannon entropy of each posterior row, summed over pixels.
pub fn posterior_entropy(gamma: &Tensor) -> f64 {
    gamma.data().iter().map(|&g| if g > 0.0 { -g * g.ln() } else { 0.0 }).sum()
}

/// KL divergence between two distributions of the same family (closed form).
/// Gaussians share the variance, so only the means enter.
pub fn kl_div(prior: PriorDist, q: PriorDist, model: ComponentModel) -> Result<f64, LdpError> {
    match (prior, q) {
        (PriorDist::Gaussian { mean: m0 }, PriorDist::Gaussian { mean: m1 }) => {
            let alpha = match model {
                ComponentModel::Gaussian { alpha } => alpha,
                ComponentModel::Bernoulli => {
                    return Err(LdpError::Domain(
                        "gaussian KL requires a gaussian component model".into(),
                    ))
                }
            };
            Ok(0.5 * alpha * (m0 - m1) * (m0 - m1))
        }
        (PriorDist::Bernoulli { theta: t0 }, PriorDist::Bernoulli { theta: t1 }) => {
            Ok(t0 * (t0 / t1).ln() + (1.0 - t0) * ((1.0 - t0) / (1.0 - t1)).ln())
        }
        _ => Err(LdpError::Domain("KL divergence between mixed families".into())),
    }
}

/// Training loss `-Q + lambda * sum_m KL(p_prior || p_{m,K})`. The KL term
/// touches only the background component, which is spatially constant, so the
/// pixel sum is `M * KL`.
pub fn ldp_loss(
    gamma: &Tensor,
    log_p: &Tensor,
    pi: &Tensor,
    background: PriorDist,
    prior: &PriorSpec,
    model: ComponentModel,
) -> Result<f64, LdpError> {
    let q = q_function(gamma, log_p, pi);
    let kl = kl_div(prior.dist, background, model)?;
    let m = gamma.rows() as f64;
    Ok(-q + prior.lambda * m * kl)
}

// ── Tape forms (differentiable) ──────────────────────────────────────

/// Log stick-breaking weights from raw decoder logits `f` (`[K-1,M]`,
/// component-major). Uses `ln c = -softplus(-f)` and `ln(1-c) = -softplus(f)`
/// so saturated logits stay finite. Returns `[M,K]` pixel-major.
pub fn log_stick_weights(tape: &mut Tape, f: Var) -> Var {
    let km1 = tape.value(f).rows();
    let neg_f = tape.neg(f);
    let sp_neg = tape.softplus(neg_f);
    let log_c = tape.neg(sp_neg);
    let sp_pos = tape.softplus(f);
    let log_1mc = tape.neg(sp_pos);

    let mut rows: Vec<Var> = Vec::with_capacity(km1 + 1);
    let mut acc: Option<Var> = None; // running sum of ln(1-c) over earlier sticks
    for kidx in 0..km1 {
        let lc = tape.row(log_c, kidx);
        let row = match acc {
            Some(a) => tape.add(lc, a),
            None => lc,
        };
        rows.push(row);
        let l1 = tape.row(log_1mc, kidx);
        acc = Some(match acc {
            Some(a) => tape.add(a, l1),
            None => l1,
        });
    }
    rows.push(acc.expect("at least one stick"));
    let stacked = tape.stack_rows(&rows); // [K,M]
    tape.transpose(stacked)
}

/// Log softmax weights from per-pixel logits `[M,K]`.
pub fn log_softmax_weights(tape: &mut Tape, logits: Var) -> Var {
    let lse = tape.logsumexp_rows(logits);
    tape.sub_col_vec(logits, lse)
}

/// Gaussian log-likelihood map for spatially constant means: `x` is `[M]`,
/// `means` is `[K]`, output `[M,K]`.
pub fn gaussian_log_p(tape: &mut Tape, x: Var, means: Var, alpha: f64) -> Var {
    let diff = tape.sub_cross(x, means);
    let sq = tape.mul(diff, diff);
    let scaled = tape.mul_scalar(sq, -0.5 * alpha);
    tape.add_scalar(scaled, 0.5 * (alpha / (2.0 * std::f64::consts::PI)).ln())
}

/// Bernoulli log-likelihood map for spatially constant success probabilities.
pub fn bernoulli_log_p(tape: &mut Tape, x: Var, thetas: Var) -> Var {
    let m = tape.value(x).numel();
    let k = tape.value(thetas).numel();
    let ln_t = tape.ln(thetas);
    let neg_t = tape.neg(thetas);
    let one_m_t = tape.add_scalar(neg_t, 1.0);
    let ln_1mt = tape.ln(one_m_t);
    let xm = tape.reshape(x, vec![m, 1]);
    let neg_x = tape.neg(x);
    let one_m_x = tape.add_scalar(neg_x, 1.0);
    let xm1 = tape.reshape(one_m_x, vec![m, 1]);
    let lt_row = tape.reshape(ln_t, vec![1, k]);
    let l1t_row = tape.reshape(ln_1mt, vec![1, k]);
    let a = tape.matmul(xm, lt_row, false, false);
    let b = tape.matmul(xm1, l1t_row, false, false);
    tape.add(a, b)
}

/// Gaussian log-likelihood map for per-pixel means `[M,K]` (the N-EM layout).
/// `(x - mean)^2` equals `(mean - x)^2`, so the residual sign is free.
pub fn gaussian_log_p_pixelwise(tape: &mut Tape, x: Var, means: Var, alpha: f64) -> Var {
    let diff = tape.sub_col_vec(means, x);
    let sq = tape.mul(diff, diff);
    let scaled = tape.mul_scalar(sq, -0.5 * alpha);
    tape.add_scalar(scaled, 0.5 * (alpha / (2.0 * std::f64::consts::PI)).ln())
}

/// Bernoulli log-likelihood map for per-pixel success probabilities `[M,K]`.
pub fn bernoulli_log_p_pixelwise(tape: &mut Tape, x: Var, thetas: Var) -> Var {
    let ln_t = tape.ln(thetas);
    let neg_t = tape.neg(thetas);
    let one_m_t = tape.add_scalar(neg_t, 1.0);
    let ln_1mt = tape.ln(one_m_t);
    let a = tape.mul_col_vec(ln_t, x);
    let neg_x = tape.neg(x);
    let one_m_x = tape.add_scalar(neg_x, 1.0);
    let b = tape.mul_col_vec(ln_1mt, one_m_x);
    tape.add(a, b)
}

/// Posterior responsibilities as a softmax over `log p + log pi`.
pub fn posterior_gamma(tape: &mut Tape, log_p: Var, log_pi: Var) -> Var {
    let joint = tape.add(log_p, log_pi);
    tape.softmax_rows(joint)
}

/// Q-function node. Pass a detached `gamma` when it must act as a constant.
pub fn q_function_node(tape: &mut Tape, gamma: Var, log_p: Var, log_pi: Var) -> Var {
    let joint = tape.add(log_p, log_pi);
    let weighted = tape.mul(gamma, joint);
    tape.sum_all(weighted)
}

/// Observed-data log-likelihood node.
pub fn log_likelihood_node(tape: &mut Tape, log_p: Var, log_pi: Var) -> Var {
    let joint = tape.add(log_p, log_pi);
    let lse = tape.logsumexp_rows(joint);
    let col = tape.reshape(lse, vec![tape.value(lse).numel(), 1]);
    tape.sum_all(col)
}

/// KL(prior || N(mu, 1/alpha)) as a scalar node, `mu` a scalar var.
pub fn kl_gaussian_node(tape: &mut Tape, mu: Var, prior_mean: f64, alpha: f64) -> Var {
    let neg = tape.neg(mu);
    let diff = tape.add_scalar(neg, prior_mean);
    let sq = tape.mul(diff, diff);
    tape.mul_scalar(sq, 0.5 * alpha)
}

/// KL(Bern(theta_prior) || Bern(theta)) as a scalar node, `theta` a scalar var.
pub fn kl_bernoulli_node(tape: &mut Tape, theta: Var, theta_prior: f64) -> Var {
    let h0 = theta_prior * theta_prior.ln() + (1.0 - theta_prior) * (1.0 - theta_prior).ln();
    let ln_t = tape.ln(theta);
    let a = tape.mul_scalar(ln_t, -theta_prior);
    let neg_t = tape.neg(theta);
    let one_m_t = tape.add_scalar(neg_t, 1.0);
    let ln_1mt = tape.ln(one_m_t);
    let b = tape.mul_scalar(ln_1mt, -(1.0 - theta_prior));
    let ab = tape.add(a, b);
    tape.add_scalar(ab, h0)
}
