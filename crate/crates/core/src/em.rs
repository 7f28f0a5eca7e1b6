//! The unrolled EM inner loop: initialization, E-step, both M-step variants,
//! the background update and the per-step loss, composed on one tape so the
//! outer training loop can differentiate the whole T-step procedure.
//!
//! The posterior `gamma` is treated as a constant inside each step's loss and
//! inside the M-step's partial gradient (that is what the EM update rules
//! prescribe), but the values feeding the next step stay attached to the
//! tape, so gradients flow through `gamma` across steps during BPTT unless
//! `detach_gamma` cuts that path.

use crate::error::LdpError;
use crate::mixture::{
    bernoulli_log_p, bernoulli_log_p_pixelwise, gaussian_log_p, gaussian_log_p_pixelwise,
    kl_bernoulli_node, kl_gaussian_node, log_softmax_weights, log_stick_weights, posterior_gamma,
    q_function_node, ComponentModel, MixtureState, PriorDist, PriorSpec,
};
use crate::nets::Networks;
use crate::params::bind_params;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateMode {
    Gradient,
    Rnn,
}

/// Which system runs: the proposed stick-breaking model, its softmax-weights
/// ablation, or the N-EM baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Ldp,
    LdpSoftmax,
    Nem,
}

impl Method {
    /// Number of latent rows: stick-breaking assigns latents to the K-1
    /// foreground components only, the other two to all K.
    pub fn latent_rows(&self, k: usize) -> usize {
        match self {
            Method::Ldp => k - 1,
            Method::LdpSoftmax | Method::Nem => k,
        }
    }

    pub fn has_background(&self) -> bool {
        !matches!(self, Method::Nem)
    }

    pub fn with_appearance(&self) -> bool {
        !matches!(self, Method::Nem)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Ldp => "ldp",
            Method::LdpSoftmax => "ldp-softmax",
            Method::Nem => "nem",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = LdpError;
    fn from_str(s: &str) -> Result<Self, LdpError> {
        match s {
            "ldp" => Ok(Method::Ldp),
            "ldp-softmax" => Ok(Method::LdpSoftmax),
            "nem" => Ok(Method::Nem),
            other => Err(LdpError::Config(format!(
                "unknown method {:?} (expected ldp, ldp-softmax or nem)",
                other
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmConfig {
    /// Component count including the background (always the last component).
    pub k: usize,
    /// Inner EM steps.
    pub t: usize,
    pub mode: UpdateMode,
    pub model: ComponentModel,
    pub prior: PriorSpec,
    /// Scale of the Gaussian latent initialization.
    pub sigma_init: f64,
    /// Per-step loss weights, length `t`.
    pub loss_weights: Vec<f64>,
    /// Ablation switch: detach `gamma` in the M-step signals, cutting the
    /// cross-step BPTT path through the posterior.
    pub detach_gamma: bool,
}

impl EmConfig {
    /// Linearly increasing weights `w_t = t / sum(t)`.
    pub fn linear_loss_weights(t: usize) -> Vec<f64> {
        let total: usize = (1..=t).sum();
        (1..=t).map(|i| i as f64 / total as f64).collect()
    }

    pub fn validate(&self) -> Result<(), LdpError> {
        if self.k < 2 {
            return Err(LdpError::Config(format!("component count must be >= 2, got {}", self.k)));
        }
        if self.t < 1 {
            return Err(LdpError::Config("inner step count must be >= 1".into()));
        }
        if self.loss_weights.len() != self.t {
            return Err(LdpError::Config(format!(
                "{} loss weights for {} steps",
                self.loss_weights.len(),
                self.t
            )));
        }
        if self.loss_weights.iter().any(|&w| w < 0.0) || self.loss_weights.iter().sum::<f64>() <= 0.0 {
            return Err(LdpError::Config("loss weights must be nonnegative with positive sum".into()));
        }
        if self.sigma_init < 0.0 {
            return Err(LdpError::Config("sigma_init must be >= 0".into()));
        }
        self.prior.validate()?;
        match (self.model, self.prior.dist) {
            (ComponentModel::Gaussian { .. }, PriorDist::Gaussian { .. }) => Ok(()),
            (ComponentModel::Bernoulli, PriorDist::Bernoulli { .. }) => Ok(()),
            _ => Err(LdpError::Config("component model and prior family differ".into())),
        }
    }
}

/// Object latents plus the raw background appearance state (the Gaussian mean
/// itself, or the logit of the Bernoulli parameter so updates can never leave
/// (0,1)).
#[derive(Clone, Debug)]
pub struct LatentState {
    pub s: Tensor,
    pub background: f64,
}

impl LatentState {
    /// Background appearance in observation space.
    pub fn background_appearance(&self, model: ComponentModel) -> f64 {
        match model {
            ComponentModel::Gaussian { .. } => self.background,
            ComponentModel::Bernoulli => 1.0 / (1.0 + (-self.background).exp()),
        }
    }
}

fn background_raw_init(config: &EmConfig) -> f64 {
    match config.prior.dist {
        PriorDist::Gaussian { mean } => mean,
        PriorDist::Bernoulli { theta } => (theta / (1.0 - theta)).ln(),
    }
}

/// Draw the initial latents from N(0, sigma_init^2) and set the background
/// appearance to the prior value.
pub fn init_latents(method: Method, latent_dim: usize, config: &EmConfig, rng: &mut Rng) -> LatentState {
    let rows = method.latent_rows(config.k);
    let data: Vec<f64> = (0..rows * latent_dim).map(|_| config.sigma_init * rng.normal()).collect();
    LatentState { s: Tensor::matrix(rows, latent_dim, data), background: background_raw_init(config) }
}

/// Tape handles produced by one E-step.
pub struct StepNodes {
    /// Raw decoder logits, `[R, M]`.
    pub f: Var,
    pub log_p: Var,
    /// Likelihood map evaluated at the clean image for the loss (equals
    /// `log_p` when training without input corruption).
    pub log_p_loss: Var,
    pub log_pi: Var,
    /// Attached posterior, `[M, K]`.
    pub gamma: Var,
    /// Detached posterior used by the loss.
    pub gamma_loss: Var,
    /// Spatially constant component appearances `[K]` (absent for N-EM).
    pub means: Option<Var>,
    /// Per-pixel appearance map `[M, K]` (N-EM only).
    pub theta_map: Option<Var>,
    /// This step's loss node.
    pub loss: Var,
}

impl StepNodes {
    fn gamma_for_m_step(&self, config: &EmConfig) -> Var {
        if config.detach_gamma {
            self.gamma_loss
        } else {
            self.gamma
        }
    }
}

/// One E-step plus the step loss, recorded on the tape. `x` drives the
/// posterior and the update signals (it may be a corrupted training view);
/// the loss reconstructs `x_loss`, the clean image.
#[allow(clippy::too_many_arguments)]
pub fn build_e_step(
    tape: &mut Tape,
    binds: &[Var],
    nets: &Networks,
    method: Method,
    config: &EmConfig,
    x: Var,
    x_loss: Var,
    s: Var,
    bg: Option<Var>,
) -> Result<StepNodes, LdpError> {
    let m = tape.value(x).numel();
    let k = config.k;
    let f = nets.decode_shape_logits(tape, binds, s);

    let log_pi = match method {
        Method::Ldp => log_stick_weights(tape, f),
        Method::LdpSoftmax => {
            let ft = tape.transpose(f);
            log_softmax_weights(tape, ft)
        }
        Method::Nem => tape.leaf(Tensor::filled(vec![m, k], -(k as f64).ln())),
    };

    let (log_p, log_p_loss, means, theta_map) = match method {
        Method::Ldp | Method::LdpSoftmax => {
            assert_eq!(nets.arch.appearance_dim, 1, "grayscale appearance expected");
            let bg = bg.expect("this method carries a background parameter");
            let raw = nets.decode_appearance(tape, binds, s);
            let fg_all = match config.model {
                ComponentModel::Gaussian { .. } => raw,
                ComponentModel::Bernoulli => tape.sigmoid(raw),
            };
            let rows = tape.value(fg_all).rows();
            let fg_vec = tape.reshape(fg_all, vec![rows]);
            // in the softmax variant the background weight has a latent, but
            // its appearance is still the dedicated background parameter
            let fg = if rows == k { tape.slice1d(fg_vec, 0, k - 1) } else { fg_vec };
            let bg_app = match config.model {
                ComponentModel::Gaussian { .. } => bg,
                ComponentModel::Bernoulli => tape.sigmoid(bg),
            };
            let bg1 = tape.reshape(bg_app, vec![1]);
            let means = tape.concat_vec(fg, bg1);
            let log_p = match config.model {
                ComponentModel::Gaussian { alpha } => gaussian_log_p(tape, x, means, alpha),
                ComponentModel::Bernoulli => bernoulli_log_p(tape, x, means),
            };
            let log_p_loss = if x_loss == x {
                log_p
            } else {
                match config.model {
                    ComponentModel::Gaussian { alpha } => gaussian_log_p(tape, x_loss, means, alpha),
                    ComponentModel::Bernoulli => bernoulli_log_p(tape, x_loss, means),
                }
            };
            (log_p, log_p_loss, Some(means), None)
        }
        Method::Nem => {
            let ft = tape.transpose(f);
            let theta = match config.model {
                ComponentModel::Gaussian { .. } => ft,
                ComponentModel::Bernoulli => tape.sigmoid(ft),
            };
            let log_p = match config.model {
                ComponentModel::Gaussian { alpha } => gaussian_log_p_pixelwise(tape, x, theta, alpha),
                ComponentModel::Bernoulli => bernoulli_log_p_pixelwise(tape, x, theta),
            };
            let log_p_loss = if x_loss == x {
                log_p
            } else {
                match config.model {
                    ComponentModel::Gaussian { alpha } => gaussian_log_p_pixelwise(tape, x_loss, theta, alpha),
                    ComponentModel::Bernoulli => bernoulli_log_p_pixelwise(tape, x_loss, theta),
                }
            };
            (log_p, log_p_loss, None, Some(theta))
        }
    };

    let gamma = posterior_gamma(tape, log_p, log_pi);
    // The loss differentiates through the posterior (full BPTT); the
    // detach_gamma ablation cuts every gradient path through gamma instead.
    let gamma_loss = if config.detach_gamma { tape.detach(gamma) } else { gamma };

    let q = q_function_node(tape, gamma_loss, log_p_loss, log_pi);
    let neg_q = tape.neg(q);
    let loss = match method {
        Method::Ldp | Method::LdpSoftmax => {
            let bg = bg.expect("background present");
            let kl = match (config.model, config.prior.dist) {
                (ComponentModel::Gaussian { alpha }, PriorDist::Gaussian { mean }) => {
                    kl_gaussian_node(tape, bg, mean, alpha)
                }
                (ComponentModel::Bernoulli, PriorDist::Bernoulli { theta }) => {
                    let th = tape.sigmoid(bg);
                    kl_bernoulli_node(tape, th, theta)
                }
                _ => return Err(LdpError::Config("component model and prior family differ".into())),
            };
            let scaled = tape.mul_scalar(kl, config.prior.lambda * m as f64);
            tape.add(neg_q, scaled)
        }
        Method::Nem => {
            let theta = theta_map.expect("N-EM appearance map present");
            let kl_map = match (config.model, config.prior.dist) {
                (ComponentModel::Gaussian { alpha }, PriorDist::Gaussian { mean }) => {
                    let diff = tape.add_scalar(theta, -mean);
                    let sq = tape.mul(diff, diff);
                    tape.mul_scalar(sq, 0.5 * alpha)
                }
                (ComponentModel::Bernoulli, PriorDist::Bernoulli { theta: tp }) => {
                    // KL(Bern(tp) || Bern(theta)) elementwise
                    let h0 = tp * tp.ln() + (1.0 - tp) * (1.0 - tp).ln();
                    let ln_t = tape.ln(theta);
                    let a = tape.mul_scalar(ln_t, -tp);
                    let neg_t = tape.neg(theta);
                    let one_m = tape.add_scalar(neg_t, 1.0);
                    let ln_1m = tape.ln(one_m);
                    let b = tape.mul_scalar(ln_1m, -(1.0 - tp));
                    let ab = tape.add(a, b);
                    tape.add_scalar(ab, h0)
                }
                _ => return Err(LdpError::Config("component model and prior family differ".into())),
            };
            let neg_g = tape.neg(gamma_loss);
            let w = tape.add_scalar(neg_g, 1.0);
            let weighted = tape.mul(w, kl_map);
            let kl_sum = tape.sum_all(weighted);
            let scaled = tape.mul_scalar(kl_sum, config.prior.lambda);
            tape.add(neg_q, scaled)
        }
    };

    Ok(StepNodes { f, log_p, log_p_loss, log_pi, gamma, gamma_loss, means, theta_map, loss })
}

/// Gradient-descent M-step: ascend the step's Q-function in the latents with
/// the posterior held constant, scaled by the learnable step size. The update
/// itself is recorded on the tape, so BPTT differentiates through it.
pub fn m_step_gradient(
    tape: &mut Tape,
    binds: &[Var],
    nets: &Networks,
    config: &EmConfig,
    nodes: &StepNodes,
    s: Var,
) -> Var {
    let gamma_m = nodes.gamma_for_m_step(config);
    let q_m = q_function_node(tape, gamma_m, nodes.log_p, nodes.log_pi);
    let stop = if config.detach_gamma { vec![] } else { vec![gamma_m] };
    match tape.grad(q_m, &[s], &stop)[0] {
        Some(delta) => {
            let eta = nets.eta_s_eff(tape, binds);
            let step = tape.smul(delta, eta);
            tape.add(s, step)
        }
        None => s,
    }
}

/// RNN M-step: assemble the appearance signal `u` and the shape signal `v`,
/// encode them, and advance the latents one recurrent step.
pub fn m_step_rnn(
    tape: &mut Tape,
    binds: &[Var],
    nets: &Networks,
    method: Method,
    config: &EmConfig,
    nodes: &StepNodes,
    x: Var,
    s: Var,
) -> Var {
    let gamma_m = nodes.gamma_for_m_step(config);
    let k = config.k;
    // d log p / d(appearance parameter): alpha * (x - mean) for the Gaussian
    // mean, (x - theta) for the Bernoulli logit.
    let appearance_scale = match config.model {
        ComponentModel::Gaussian { alpha } => alpha,
        ComponentModel::Bernoulli => 1.0,
    };
    let (extra, v) = match method {
        Method::Ldp => {
            let rows = k - 1;
            let means = nodes.means.expect("stick model has means");
            let means_fg = tape.slice1d(means, 0, rows);
            let resid = tape.sub_cross(x, means_fg); // [M, K-1]
            let gamma_fg = tape.slice_cols(gamma_m, 0, rows);
            let prod = tape.mul(gamma_fg, resid);
            let u_sum = tape.sum_axis(prod, 0);
            let u = tape.mul_scalar(u_sum, appearance_scale);
            let u_col = tape.reshape(u, vec![rows, 1]);

            // v_km = gamma_mk - (sum_{k' >= k} gamma_mk') * sigma(f_km)
            let gamma_t = tape.transpose(gamma_m); // [K, M]
            let c = tape.sigmoid(nodes.f); // [K-1, M]
            let mut suffix = tape.row(gamma_t, k - 1);
            let mut v_rows_rev: Vec<Var> = Vec::with_capacity(rows);
            for kidx in (0..rows).rev() {
                let g_row = tape.row(gamma_t, kidx);
                suffix = tape.add(suffix, g_row);
                let c_row = tape.row(c, kidx);
                let shaped = tape.mul(suffix, c_row);
                v_rows_rev.push(tape.sub(g_row, shaped));
            }
            v_rows_rev.reverse();
            let v = tape.stack_rows(&v_rows_rev);
            (Some(u_col), v)
        }
        Method::LdpSoftmax => {
            let means = nodes.means.expect("softmax model has means");
            let resid = tape.sub_cross(x, means); // [M, K]
            let prod = tape.mul(gamma_m, resid);
            let u_sum = tape.sum_axis(prod, 0);
            let u = tape.mul_scalar(u_sum, appearance_scale);
            let u_col = tape.reshape(u, vec![k, 1]);

            // v = gamma - pi, the softmax weight gradient signal
            let pi = tape.exp(nodes.log_pi);
            let diff = tape.sub(gamma_m, pi);
            let v = tape.transpose(diff);
            (Some(u_col), v)
        }
        Method::Nem => {
            let theta = nodes.theta_map.expect("N-EM appearance map present");
            let resid_neg = tape.sub_col_vec(theta, x); // theta - x
            let resid = tape.neg(resid_neg);
            let signal = tape.mul(gamma_m, resid);
            let scaled = tape.mul_scalar(signal, appearance_scale);
            let v = tape.transpose(scaled);
            (None, v)
        }
    };
    let r_in = nets.encode_update_signal(tape, binds, extra, v);
    nets.rnn_step(tape, binds, r_in, s)
}

/// Background appearance update: one gradient-ascent step on the Q-function
/// in the background parameter, with the learnable step size. For Gaussian
/// components this is exactly `mu += eta * alpha * sum gamma_K (x - mu)`; the
/// Bernoulli state is a logit, whose natural-parameter gradient is
/// `sum gamma_K (x - theta)`.
pub fn update_background(
    tape: &mut Tape,
    binds: &[Var],
    nets: &Networks,
    config: &EmConfig,
    nodes: &StepNodes,
    x: Var,
    bg: Var,
) -> Var {
    let gamma_m = nodes.gamma_for_m_step(config);
    let g_k = tape.col(gamma_m, config.k - 1);
    let eta = nets.eta_theta_eff(tape, binds);
    match config.model {
        ComponentModel::Gaussian { alpha } => {
            let neg_mu = tape.neg(bg);
            let resid = tape.sadd(x, neg_mu);
            let weighted = tape.mul(g_k, resid);
            let total = tape.sum_all(weighted);
            let scaled = tape.mul_scalar(total, alpha);
            let step = tape.mul(scaled, eta);
            tape.add(bg, step)
        }
        ComponentModel::Bernoulli => {
            let theta = tape.sigmoid(bg);
            let neg_t = tape.neg(theta);
            let resid = tape.sadd(x, neg_t);
            let weighted = tape.mul(g_k, resid);
            let total = tape.sum_all(weighted);
            let step = tape.mul(total, eta);
            tape.add(bg, step)
        }
    }
}

/// One recorded step of the inner loop: E-step, loss, M-step, background
/// update. Returns the nodes of the E-step plus the advanced state.
#[allow(clippy::too_many_arguments)]
pub fn em_step(
    tape: &mut Tape,
    binds: &[Var],
    nets: &Networks,
    method: Method,
    config: &EmConfig,
    x: Var,
    x_loss: Var,
    s: Var,
    bg: Option<Var>,
) -> Result<(StepNodes, Var, Option<Var>), LdpError> {
    let nodes = build_e_step(tape, binds, nets, method, config, x, x_loss, s, bg)?;
    let s_next = match config.mode {
        UpdateMode::Gradient => m_step_gradient(tape, binds, nets, config, &nodes, s),
        UpdateMode::Rnn => m_step_rnn(tape, binds, nets, method, config, &nodes, x, s),
    };
    let bg_next = match bg {
        Some(b) => Some(update_background(tape, binds, nets, config, &nodes, x, b)),
        None => None,
    };
    Ok((nodes, s_next, bg_next))
}

/// One step of the trace: the mixture snapshot, the latents that produced it,
/// the spatially resolved appearances, and the step loss.
#[derive(Clone, Debug)]
pub struct EmStep {
    pub mixture: MixtureState,
    pub latents: LatentState,
    /// Component appearances: `[K]` for the proposed model and its softmax
    /// variant, `[M, K]` per-pixel for N-EM.
    pub appearances: Tensor,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct EmTrace {
    pub steps: Vec<EmStep>,
}

impl EmTrace {
    pub fn final_step(&self) -> &EmStep {
        self.steps.last().expect("trace has at least one step")
    }

    /// Grouping labels from the final posterior (argmax, ties toward the
    /// lowest component index).
    pub fn labels(&self) -> Vec<u8> {
        self.final_step().mixture.labels()
    }
}

fn plain_exp(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.exp()).collect())
}

fn snapshot_c(tape: &Tape, f: Var) -> Tensor {
    // sigma of the decoder logits, transposed to pixel-major
    let ft = tape.value(f);
    let (r, m) = (ft.rows(), ft.cols());
    let mut out = vec![0.0; m * r];
    for k in 0..r {
        for i in 0..m {
            let s = 1.0 / (1.0 + (-ft.at(k, i)).exp());
            out[i * r + k] = s.clamp(crate::tensor::SIGMOID_EPS, 1.0 - crate::tensor::SIGMOID_EPS);
        }
    }
    Tensor::matrix(m, r, out)
}

/// Unroll the full T-step inner loop on an existing tape. Returns the trace
/// and the weighted-sum loss node `L_sum`.
#[allow(clippy::too_many_arguments)]
pub fn unroll_em(
    tape: &mut Tape,
    binds: &[Var],
    nets: &Networks,
    method: Method,
    config: &EmConfig,
    image: &Tensor,
    corrupted: Option<&Tensor>,
    init: &LatentState,
) -> Result<(EmTrace, Var), LdpError> {
    config.validate()?;
    assert_eq!(
        image.numel(),
        nets.arch.pixels(),
        "image length {} does not match architecture ({}x{})",
        image.numel(),
        nets.arch.height,
        nets.arch.width
    );
    let x_loss = tape.leaf(Tensor::vector(image.data().to_vec()));
    let x = match corrupted {
        Some(noisy) => {
            assert_eq!(noisy.numel(), image.numel(), "corrupted view size mismatch");
            tape.leaf(Tensor::vector(noisy.data().to_vec()))
        }
        None => x_loss,
    };
    let mut s = tape.leaf(init.s.clone());
    let mut bg = if method.has_background() {
        Some(tape.leaf(Tensor::scalar(init.background)))
    } else {
        None
    };

    let mut steps = Vec::with_capacity(config.t);
    let mut l_sum: Option<Var> = None;
    for t in 0..config.t {
        let pre_latents = LatentState {
            s: tape.value(s).clone(),
            background: bg.map(|b| tape.value(b).item()).unwrap_or(0.0),
        };
        let (nodes, s_next, bg_next) = em_step(tape, binds, nets, method, config, x, x_loss, s, bg)?;
        if let Some(msg) = tape.poisoned() {
            return Err(LdpError::Numerical { step: t, message: msg.to_string() });
        }
        let appearances = match (nodes.means, nodes.theta_map) {
            (Some(mv), _) => tape.value(mv).clone(),
            (None, Some(tm)) => tape.value(tm).clone(),
            _ => unreachable!(),
        };
        steps.push(EmStep {
            mixture: MixtureState {
                log_p: tape.value(nodes.log_p).clone(),
                pi: plain_exp(tape.value(nodes.log_pi)),
                gamma: tape.value(nodes.gamma).clone(),
                c: snapshot_c(tape, nodes.f),
            },
            latents: pre_latents,
            appearances,
            loss: tape.value(nodes.loss).item(),
        });
        let weighted = tape.mul_scalar(nodes.loss, config.loss_weights[t]);
        l_sum = Some(match l_sum {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
        s = s_next;
        bg = bg_next;
    }
    Ok((EmTrace { steps }, l_sum.expect("at least one step")))
}

/// Run the inner loop for one image with seeded latent initialization,
/// discarding the tape. This is the evaluation entry point.
pub fn run_em(
    image: &Tensor,
    store: &ParamStore,
    nets: &Networks,
    method: Method,
    config: &EmConfig,
    rng: &mut Rng,
) -> Result<EmTrace, LdpError> {
    let init = init_latents(method, nets.arch.latent_dim, config, rng);
    let mut tape = Tape::new();
    let binds = bind_params(&mut tape, store);
    let (trace, _) = unroll_em(&mut tape, &binds, nets, method, config, image, None, &init)?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{zero_all_params, ArchConfig, ArchPreset, ETA_S_INIT, ETA_THETA_INIT};
    use crate::params::ParamStore;

    pub(crate) fn tiny_arch(h: usize, w: usize, n: usize) -> ArchConfig {
        ArchConfig {
            preset: ArchPreset::Fc,
            height: h,
            width: w,
            latent_dim: n,
            feature_dim: 6,
            hidden: 8,
            appearance_dim: 1,
            conv_channels: (2, 3),
            kernel: 4,
        }
    }

    pub(crate) fn gauss_config(k: usize, t: usize, mode: UpdateMode) -> EmConfig {
        EmConfig {
            k,
            t,
            mode,
            model: ComponentModel::Gaussian { alpha: 1.0 },
            prior: PriorSpec { dist: PriorDist::Gaussian { mean: 0.0 }, lambda: 0.1 },
            sigma_init: 1.0,
            loss_weights: EmConfig::linear_loss_weights(t),
            detach_gamma: false,
        }
    }

    #[test]
    fn init_latents_zero_sigma_is_zero() {
        let config = EmConfig { sigma_init: 0.0, ..gauss_config(3, 2, UpdateMode::Rnn) };
        let mut rng = Rng::seeded(4, 0);
        let st = init_latents(Method::Ldp, 5, &config, &mut rng);
        assert_eq!(st.s.shape(), &[2, 5]);
        assert!(st.s.data().iter().all(|&v| v == 0.0));
        assert_eq!(st.background, 0.0); // mu_prior exactly
    }

    #[test]
    fn init_latents_sample_variance() {
        let config = EmConfig { sigma_init: 0.7, ..gauss_config(2, 1, UpdateMode::Rnn) };
        let mut rng = Rng::seeded(11, 9);
        let mut draws = Vec::new();
        while draws.len() < 10_000 {
            let st = init_latents(Method::Ldp, 10, &config, &mut rng);
            draws.extend_from_slice(st.s.data());
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = 0.49;
        assert!((var - expect).abs() / expect < 0.05, "variance {} vs {}", var, expect);
    }

    #[test]
    fn bernoulli_background_init_is_prior_in_observation_space() {
        let config = EmConfig {
            model: ComponentModel::Bernoulli,
            prior: PriorSpec { dist: PriorDist::Bernoulli { theta: 0.01 }, lambda: 0.1 },
            ..gauss_config(2, 1, UpdateMode::Rnn)
        };
        let mut rng = Rng::seeded(0, 0);
        let st = init_latents(Method::Ldp, 3, &config, &mut rng);
        assert!((st.background_appearance(ComponentModel::Bernoulli) - 0.01).abs() < 1e-12);
    }

    /// Fixture: all decoder weights zero, final bias a +/-40 pattern, so the
    /// stick weights are a fixed, saturated shape regardless of the latents.
    /// Zeroing wipes the raw step sizes too, so those go back to defaults.
    fn saturated_fixture(h: usize, w: usize, object: &[usize]) -> (ParamStore, Networks) {
        let (mut store, nets) = Networks::init(1, tiny_arch(h, w, 2), true, true, ETA_S_INIT, ETA_THETA_INIT).unwrap();
        zero_all_params(&mut store);
        let softplus_inv = |y: f64| (y.exp() - 1.0).ln();
        let es = store.find("eta_s").unwrap();
        store.set_value(es, Tensor::scalar(softplus_inv(crate::nets::ETA_S_INIT)));
        let et = store.find("eta_theta").unwrap();
        store.set_value(et, Tensor::scalar(softplus_inv(crate::nets::ETA_THETA_INIT)));
        let m = h * w;
        let mut bias = vec![-40.0; m];
        for &px in object {
            bias[px] = 40.0;
        }
        let b3 = store.find("dec.fc3.b").unwrap();
        store.set_value(b3, Tensor::vector(bias));
        (store, nets)
    }

    #[test]
    fn e_step_boundary_all_background() {
        // logits -> -inf everywhere: everything assigned to the background
        let (store, nets) = saturated_fixture(2, 2, &[]);
        let config = gauss_config(2, 1, UpdateMode::Rnn);
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store);
        let x = tape.leaf(Tensor::vector(vec![0.0; 4]));
        let s = tape.leaf(Tensor::zeros(vec![1, 2]));
        let bg = tape.leaf(Tensor::scalar(0.0));
        let nodes = build_e_step(&mut tape, &binds, &nets, Method::Ldp, &config, x, x, s, Some(bg)).unwrap();
        let pi = plain_exp(tape.value(nodes.log_pi));
        for i in 0..4 {
            assert!(pi.at(i, 0) < 1e-5, "foreground weight {}", pi.at(i, 0));
            assert!(pi.at(i, 1) > 1.0 - 1e-5);
        }
        let gamma = tape.value(nodes.gamma);
        for i in 0..4 {
            assert!(gamma.at(i, 1) > 0.99);
        }
    }

    #[test]
    fn e_step_rows_sum_to_one() {
        let (store, nets) = Networks::init(77, tiny_arch(3, 4, 3), true, true, ETA_S_INIT, ETA_THETA_INIT).unwrap();
        let config = gauss_config(3, 1, UpdateMode::Rnn);
        let mut rng = Rng::seeded(5, 1);
        let init = init_latents(Method::Ldp, 3, &config, &mut rng);
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store);
        let x = tape.leaf(Tensor::vector((0..12).map(|i| (i % 2) as f64).collect()));
        let s = tape.leaf(init.s.clone());
        let bg = tape.leaf(Tensor::scalar(init.background));
        let nodes = build_e_step(&mut tape, &binds, &nets, Method::Ldp, &config, x, x, s, Some(bg)).unwrap();
        let pi = plain_exp(tape.value(nodes.log_pi));
        let gamma = tape.value(nodes.gamma);
        for i in 0..12 {
            let spi: f64 = (0..3).map(|j| pi.at(i, j)).sum();
            let sg: f64 = (0..3).map(|j| gamma.at(i, j)).sum();
            assert!((spi - 1.0).abs() < 1e-9, "pi row {} sums to {}", i, spi);
            assert!((sg - 1.0).abs() < 1e-9, "gamma row {} sums to {}", i, sg);
        }
    }

    #[test]
    fn e_step_single_object_fixture_is_one_hot() {
        // 3x3 canvas, object covering the left column, appearance articulated
        // so g(s) = 1 exactly matches the object intensity.
        let object = [0, 3, 6];
        let (mut store, nets) = saturated_fixture(3, 3, &object);
        let app = store.find("app.w").unwrap();
        store.set_value(app, Tensor::matrix(1, 2, vec![1.0, 0.0]));
        let config = gauss_config(2, 1, UpdateMode::Rnn);
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store);
        let mut img = vec![0.0; 9];
        for &px in &object {
            img[px] = 1.0;
        }
        let x = tape.leaf(Tensor::vector(img));
        let s = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 0.0])); // g = 1
        let bg = tape.leaf(Tensor::scalar(0.0));
        let nodes = build_e_step(&mut tape, &binds, &nets, Method::Ldp, &config, x, x, s, Some(bg)).unwrap();
        let gamma = tape.value(nodes.gamma);
        for i in 0..9 {
            let expect_fg = object.contains(&i);
            let g0 = gamma.at(i, 0);
            if expect_fg {
                assert!(g0 > 1.0 - 1e-4, "pixel {} gamma {}", i, g0);
            } else {
                assert!(g0 < 1e-4, "pixel {} gamma {}", i, g0);
            }
        }
    }

    #[test]
    fn m_step_gradient_hand_example() {
        // single pixel, K=2, alpha=1, gamma ~ (1,0), x - g = 0.2,
        // dg/ds = (1,0) row, df/ds = 0, eta_s = 0.5 -> delta s = (0.1, 0)
        let (mut store, nets) = saturated_fixture(1, 1, &[0]);
        let app = store.find("app.w").unwrap();
        store.set_value(app, Tensor::matrix(1, 2, vec![1.0, 0.0]));
        let config = gauss_config(2, 1, UpdateMode::Gradient);
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store);
        let x = tape.leaf(Tensor::vector(vec![0.7]));
        let s = tape.leaf(Tensor::matrix(1, 2, vec![0.5, 0.0])); // g = 0.5
        let bg = tape.leaf(Tensor::scalar(0.0));
        let nodes = build_e_step(&mut tape, &binds, &nets, Method::Ldp, &config, x, x, s, Some(bg)).unwrap();
        let s_next = m_step_gradient(&mut tape, &binds, &nets, &config, &nodes, s);
        let delta = tape.value(s_next).at(0, 0) - 0.5;
        assert!((delta - 0.1).abs() < 1e-5, "delta {}", delta);
        assert!(tape.value(s_next).at(0, 1).abs() < 1e-5);
    }

    #[test]
    fn m_step_gradient_zero_gamma_leaves_latents() {
        // saturated background fixture: gamma on the foreground is ~0 and the
        // shape logits are weight-free, so the latent gradient vanishes.
        let (store, nets) = saturated_fixture(2, 2, &[]);
        let config = gauss_config(2, 1, UpdateMode::Gradient);
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store);
        let x = tape.leaf(Tensor::vector(vec![0.0; 4]));
        let s0 = Tensor::matrix(1, 2, vec![0.3, -0.4]);
        let s = tape.leaf(s0.clone());
        let bg = tape.leaf(Tensor::scalar(0.0));
        let nodes = build_e_step(&mut tape, &binds, &nets, Method::Ldp, &config, x, x, s, Some(bg)).unwrap();
        let s_next = m_step_gradient(&mut tape, &binds, &nets, &config, &nodes, s);
        // gamma_fg ~ 1e-6 and g(s)=0=x, so the appearance term is exactly 0;
        // the shape term is 0 because df/ds = 0.
        assert!(tape.value(s_next).max_abs_diff(&s0) < 1e-9);
    }

    #[test]
    fn m_step_rnn_u_matches_gradient_internals() {
        // u must equal the appearance-gradient factor alpha * sum gamma (x-g):
        // with dg/ds = identity-ish weight, the gradient-mode delta in the
        // first latent coordinate equals eta * u.
        let (mut store, nets) = Networks::init(3, tiny_arch(2, 2, 2), true, true, ETA_S_INIT, ETA_THETA_INIT).unwrap();
        zero_all_params(&mut store);
        let es = store.find("eta_s").unwrap();
        store.set_value(es, Tensor::scalar((0.5f64.exp() - 1.0).ln()));
        let b3 = store.find("dec.fc3.b").unwrap();
        store.set_value(b3, Tensor::vector(vec![2.0, -1.0, 0.5, -3.0]));
        let app = store.find("app.w").unwrap();
        store.set_value(app, Tensor::matrix(1, 2, vec![1.0, 0.0]));
        let config = EmConfig { ..gauss_config(2, 1, UpdateMode::Gradient) };

        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store);
        let x = tape.leaf(Tensor::vector(vec![0.9, 0.1, 0.4, 0.6]));
        let s = tape.leaf(Tensor::matrix(1, 2, vec![0.25, 0.0]));
        let bg = tape.leaf(Tensor::scalar(0.0));
        let nodes = build_e_step(&mut tape, &binds, &nets, Method::Ldp, &config, x, x, s, Some(bg)).unwrap();

        // gradient-mode delta
        let s_grad = m_step_gradient(&mut tape, &binds, &nets, &config, &nodes, s);
        let delta0 = tape.value(s_grad).at(0, 0) - 0.25;

        // u from the rnn-mode signal assembly
        let gamma = tape.value(nodes.gamma).clone();
        let alpha = 1.0;
        let g_val = 0.25;
        let x_vals = [0.9, 0.1, 0.4, 0.6];
        let u_expected: f64 =
            (0..4).map(|i| alpha * gamma.at(i, 0) * (x_vals[i] - g_val)).sum();
        // eta_s = 0.5 by initialization; df/ds = 0 so only the u-term remains
        assert!(
            (delta0 - 0.5 * u_expected).abs() < 1e-9,
            "delta {} vs eta*u {}",
            delta0,
            0.5 * u_expected
        );
    }

    #[test]
    fn m_step_rnn_zero_networks_depend_only_on_state() {
        let (mut store, nets) = Networks::init(3, tiny_arch(2, 2, 2), true, true, ETA_S_INIT, ETA_THETA_INIT).unwrap();
        zero_all_params(&mut store);
        let config = gauss_config(2, 1, UpdateMode::Rnn);
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store);
        let x = tape.leaf(Tensor::vector(vec![0.9, 0.1, 0.4, 0.6]));
        let s = tape.leaf(Tensor::matrix(1, 2, vec![0.25, -0.6]));
        let bg = tape.leaf(Tensor::scalar(0.0));
        let nodes = build_e_step(&mut tape, &binds, &nets, Method::Ldp, &config, x, x, s, Some(bg)).unwrap();
        let s_next = m_step_rnn(&mut tape, &binds, &nets, Method::Ldp, &config, &nodes, x, s);
        // zero weights everywhere: tanh(LN(0)) = 0
        assert!(tape.value(s_next).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn update_background_hand_example() {
        // mu = 0, all x = 0.5, all gamma_K = 1, eta = 0.1, alpha = 1, M = 4
        // -> mu' = 0.1 * 1 * (4 * 0.5) = 0.2
        let (mut store, nets) = Networks::init(3, tiny_arch(2, 2, 2), true, true, ETA_S_INIT, ETA_THETA_INIT).unwrap();
        zero_all_params(&mut store);
        // raw eta_theta such that softplus gives exactly 0.1
        let et = store.find("eta_theta").unwrap();
        store.set_value(et, Tensor::scalar((0.1f64.exp() - 1.0).ln()));
        let config = gauss_config(2, 1, UpdateMode::Rnn);
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store);
        let x = tape.leaf(Tensor::vector(vec![0.5; 4]));
        let bg = tape.leaf(Tensor::scalar(0.0));
        // hand-built nodes: gamma one-hot on the background column
        let gamma = tape.leaf(Tensor::matrix(4, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]));
        let gamma_loss = tape.detach(gamma);
        let dummy = tape.leaf(Tensor::matrix(4, 2, vec![0.0; 8]));
        let f = tape.leaf(Tensor::matrix(1, 4, vec![0.0; 4]));
        let zero = tape.scalar(0.0);
        let nodes = StepNodes {
            f,
            log_p: dummy,
            log_p_loss: dummy,
            log_pi: dummy,
            gamma,
            gamma_loss,
            means: None,
            theta_map: None,
            loss: zero,
        };
        let bg_next = update_background(&mut tape, &binds, &nets, &config, &nodes, x, bg);
        assert!((tape.value(bg_next).item() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn update_background_zero_gamma_is_identity() {
        let (store, nets) = Networks::init(3, tiny_arch(2, 2, 2), true, true, ETA_S_INIT, ETA_THETA_INIT).unwrap();
        let config = gauss_config(2, 1, UpdateMode::Rnn);
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store);
        let x = tape.leaf(Tensor::vector(vec![0.5; 4]));
        let bg = tape.leaf(Tensor::scalar(0.3));
        let gamma = tape.leaf(Tensor::matrix(4, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]));
        let gamma_loss = tape.detach(gamma);
        let dummy = tape.leaf(Tensor::matrix(4, 2, vec![0.0; 8]));
        let f = tape.leaf(Tensor::matrix(1, 4, vec![0.0; 4]));
        let zero = tape.scalar(0.0);
        let nodes = StepNodes {
            f,
            log_p: dummy,
            log_p_loss: dummy,
            log_pi: dummy,
            gamma,
            gamma_loss,
            means: None,
            theta_map: None,
            loss: zero,
        };
        let bg_next = update_background(&mut tape, &binds, &nets, &config, &nodes, x, bg);
        assert_eq!(tape.value(bg_next).item(), 0.3);
    }

    #[test]
    fn update_background_fixed_point_is_weighted_mean() {
        // iterate the update with fixed gamma; mu converges to the
        // gamma-weighted mean of x
        let (store, nets) = Networks::init(3, tiny_arch(2, 2, 2), true, true, ETA_S_INIT, ETA_THETA_INIT).unwrap();
        let config = gauss_config(2, 1, UpdateMode::Rnn);
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store);
        let xv = [0.9, 0.1, 0.4, 0.6];
        let gv = [0.5, 1.0, 0.25, 0.8];
        let x = tape.leaf(Tensor::vector(xv.to_vec()));
        let mut bg = tape.leaf(Tensor::scalar(0.0));
        let gamma_data: Vec<f64> = gv.iter().flat_map(|&g| [1.0 - g, g]).collect();
        let gamma = tape.leaf(Tensor::matrix(4, 2, gamma_data));
        let gamma_loss = tape.detach(gamma);
        let dummy = tape.leaf(Tensor::matrix(4, 2, vec![0.0; 8]));
        let f = tape.leaf(Tensor::matrix(1, 4, vec![0.0; 4]));
        let zero = tape.scalar(0.0);
        let nodes = StepNodes {
            f,
            log_p: dummy,
            log_p_loss: dummy,
            log_pi: dummy,
            gamma,
            gamma_loss,
            means: None,
            theta_map: None,
            loss: zero,
        };
        for _ in 0..500 {
            bg = update_background(&mut tape, &binds, &nets, &config, &nodes, x, bg);
        }
        let expect: f64 = xv.iter().zip(gv.iter()).map(|(&x, &g)| x * g).sum::<f64>()
            / gv.iter().sum::<f64>();
        assert!(
            (tape.value(bg).item() - expect).abs() < 1e-6,
            "fixed point {} vs {}",
            tape.value(bg).item(),
            expect
        );
    }

    #[test]
    fn run_em_t1_trace_and_determinism() {
        let (store, nets) = Networks::init(19, tiny_arch(3, 3, 3), true, true, ETA_S_INIT, ETA_THETA_INIT).unwrap();
        let config = gauss_config(3, 1, UpdateMode::Rnn);
        let image = Tensor::vector((0..9).map(|i| (i % 3) as f64 / 2.0).collect());
        let mut rng = Rng::seeded(42, 7);
        let trace = run_em(&image, &store, &nets, Method::Ldp, &config, &mut rng).unwrap();
        assert_eq!(trace.steps.len(), 1);

        let mut rng2 = Rng::seeded(42, 7);
        let trace2 = run_em(&image, &store, &nets, Method::Ldp, &config, &mut rng2).unwrap();
        assert_eq!(trace.labels(), trace2.labels());
        for (a, b) in trace.steps.iter().zip(trace2.steps.iter()) {
            assert_eq!(a.loss, b.loss);
            assert_eq!(a.mixture.gamma.data(), b.mixture.gamma.data());
        }
    }

    #[test]
    fn run_em_losses_non_increasing_on_fixture() {
        // analytic fixture, gradient mode, small eta: the per-step losses
        // must not increase (empirical regression, not a theorem)
        let object = [0, 3, 6];
        let (mut store, nets) = saturated_fixture(3, 3, &object);
        let app = store.find("app.w").unwrap();
        store.set_value(app, Tensor::matrix(1, 2, vec![1.0, 0.0]));
        let es = store.find("eta_s").unwrap();
        store.set_value(es, Tensor::scalar((0.01f64.exp() - 1.0).ln())); // eta_s = 0.01
        let et = store.find("eta_theta").unwrap();
        store.set_value(et, Tensor::scalar((0.01f64.exp() - 1.0).ln()));
        let config = EmConfig { sigma_init: 0.3, ..gauss_config(2, 10, UpdateMode::Gradient) };
        let mut img = vec![0.0; 9];
        for &px in &object {
            img[px] = 1.0;
        }
        let image = Tensor::vector(img);
        let mut rng = Rng::seeded(3, 0);
        let trace = run_em(&image, &store, &nets, Method::Ldp, &config, &mut rng).unwrap();
        for w in trace.steps.windows(2) {
            assert!(
                w[1].loss <= w[0].loss + 1e-9,
                "loss increased: {} -> {}",
                w[0].loss,
                w[1].loss
            );
        }
    }

    #[test]
    fn nem_e_step_uniform_weights() {
        let (store, nets) = Networks::init(23, tiny_arch(2, 3, 3), false, false, ETA_S_INIT, ETA_THETA_INIT).unwrap();
        let config = gauss_config(3, 1, UpdateMode::Rnn);
        let mut tape = Tape::new();
        let binds = bind_params(&mut tape, &store);
        let x = tape.leaf(Tensor::vector(vec![0.2; 6]));
        let s = tape.leaf(Tensor::matrix(3, 3, vec![0.1; 9]));
        let nodes = build_e_step(&mut tape, &binds, &nets, Method::Nem, &config, x, x, s, None).unwrap();
        let pi = plain_exp(tape.value(nodes.log_pi));
        for &v in pi.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let gamma = tape.value(nodes.gamma);
        for i in 0..6 {
            let s: f64 = (0..3).map(|j| gamma.at(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
