//! The learnable functions of the model: a shape decoder from object latents
//! to per-pixel logits, a one-layer appearance head, an encoder for the
//! M-step update signal, and the recurrent updater. All forwards are batched
//! over components: latents arrive as the rows of an `[R, N]` matrix.

use crate::error::LdpError;
use crate::params::{bind_params, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

pub const ETA_S_INIT: f64 = 0.5;
pub const ETA_THETA_INIT: f64 = 0.1;

/// Default initial step sizes for the latent and background updates. The
/// update rules accumulate a raw responsibility-weighted sum over all M
/// pixels, so both defaults scale as `1 / (alpha * M)`: the background mean
/// diverges outright when `eta_theta * alpha * sum(gamma_K)` passes ~2, and
/// the latent rate is calibrated so ten inner steps visibly sharpen the
/// shape maps (40 / (alpha * M) = 0.1 on a 20x20 Bernoulli model). Both
/// remain learnable and can be overridden in the run configuration.
pub fn default_eta_inits(alpha: Option<f64>, pixels: usize) -> (f64, f64) {
    let gain = alpha.unwrap_or(1.0) * pixels as f64;
    (80.0 * ETA_S_INIT / gain, ETA_THETA_INIT / gain)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchPreset {
    /// Fully-connected decoder/encoder for the small canvases.
    Fc,
    /// Two stride-2 convolutions plus two fully-connected layers per network,
    /// for the 48x48 configuration.
    Conv,
}

#[derive(Clone, Debug)]
pub struct ArchConfig {
    pub preset: ArchPreset,
    pub height: usize,
    pub width: usize,
    /// Latent dimension N.
    pub latent_dim: usize,
    /// Update-feature dimension F (the recurrent cell input).
    pub feature_dim: usize,
    /// Hidden width of the fully-connected stacks.
    pub hidden: usize,
    /// Appearance parameter count P (1 for grayscale).
    pub appearance_dim: usize,
    /// Channel widths of the two convolution stages.
    pub conv_channels: (usize, usize),
    /// Square kernel extent of the convolution stages.
    pub kernel: usize,
}

impl ArchConfig {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<(), LdpError> {
        let positive = [
            self.height,
            self.width,
            self.latent_dim,
            self.feature_dim,
            self.hidden,
            self.appearance_dim,
        ];
        if positive.iter().any(|&d| d == 0) {
            return Err(LdpError::Config("architecture dimensions must be positive".into()));
        }
        if self.preset == ArchPreset::Conv && (self.height % 4 != 0 || self.width % 4 != 0) {
            return Err(LdpError::Config(format!(
                "conv preset needs extents divisible by 4, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

struct FcStack {
    w1: ParamId,
    b1: ParamId,
    g1: ParamId,
    d1: ParamId,
    w2: ParamId,
    b2: ParamId,
    g2: ParamId,
    d2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

struct ConvDecoder {
    w1: ParamId,
    b1: ParamId,
    g1: ParamId,
    d1: ParamId,
    w2: ParamId,
    b2: ParamId,
    g2: ParamId,
    d2: ParamId,
    k1: ParamId,
    kb1: ParamId,
    g3: ParamId,
    d3: ParamId,
    k2: ParamId,
    kb2: ParamId,
}

struct ConvEncoder {
    k1: ParamId,
    kb1: ParamId,
    g1: ParamId,
    d1: ParamId,
    k2: ParamId,
    kb2: ParamId,
    g2: ParamId,
    d2: ParamId,
    w1: ParamId,
    b1: ParamId,
    g3: ParamId,
    d3: ParamId,
    w2: ParamId,
    b2: ParamId,
}

enum Decoder {
    Fc(FcStack),
    Conv(ConvDecoder),
}

struct FcEncoder {
    w: ParamId,
    b: ParamId,
    g: ParamId,
    d: ParamId,
}

enum Encoder {
    Fc(FcEncoder),
    Conv(ConvEncoder),
}

struct RnnCell {
    wr: ParamId,
    ws: ParamId,
    b: ParamId,
    g: ParamId,
    d: ParamId,
}

/// Parameter layout of one model. Which pieces exist depends on the method:
/// the N-EM baseline has no appearance head, no appearance slot in the
/// encoder input, and no background step size.
pub struct Networks {
    pub arch: ArchConfig,
    /// Extra leading columns of the encoder input (the appearance-gradient
    /// signal); 0 for the N-EM baseline.
    pub enc_extra: usize,
    decoder: Decoder,
    appearance: Option<ParamId>,
    encoder: Encoder,
    rnn: RnnCell,
    pub eta_s: ParamId,
    pub eta_theta: Option<ParamId>,
}

fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

impl Networks {
    /// Deterministic seeded initialization: Glorot-uniform weights, zero
    /// biases, layer-norm gains 1, learnable step sizes at their configured
    /// positive values (softplus-reparameterized).
    pub fn init(
        seed: u64,
        arch: ArchConfig,
        with_appearance: bool,
        with_background: bool,
        eta_s_init: f64,
        eta_theta_init: f64,
    ) -> Result<(ParamStore, Networks), LdpError> {
        Self::init_with_stick_bias(seed, arch, with_appearance, with_background, eta_s_init, eta_theta_init, 0.0)
    }

    /// Like [`Networks::init`], with the decoder's output bias set to
    /// `stick_bias` instead of zero. Starting the stick logits low hands the
    /// residual weight to the background at the first E-step, which matches
    /// scenes that are mostly background; with a zero bias the first
    /// component opens owning half of every pixel and the others starve.
    #[allow(clippy::too_many_arguments)]
    pub fn init_with_stick_bias(
        seed: u64,
        arch: ArchConfig,
        with_appearance: bool,
        with_background: bool,
        eta_s_init: f64,
        eta_theta_init: f64,
        stick_bias: f64,
    ) -> Result<(ParamStore, Networks), LdpError> {
        arch.validate()?;
        let mut rng = Rng::seeded(seed, 0);
        let mut store = ParamStore::new();
        let m = arch.pixels();
        let n = arch.latent_dim;
        let h = arch.hidden;
        let p = arch.appearance_dim;
        let enc_extra = if with_appearance { p } else { 0 };

        let linear = |store: &mut ParamStore, rng: &mut Rng, name: &str, out: usize, inp: usize| {
            let w = store.add(
                format!("{}.w", name),
                ParamStore::glorot(rng, vec![out, inp], inp, out),
            );
            let b = store.add(format!("{}.b", name), Tensor::zeros(vec![out]));
            (w, b)
        };
        let norm = |store: &mut ParamStore, name: &str, dim: usize| {
            let g = store.add(format!("{}.gain", name), Tensor::filled(vec![dim], 1.0));
            let d = store.add(format!("{}.bias", name), Tensor::zeros(vec![dim]));
            (g, d)
        };

        let decoder = match arch.preset {
            ArchPreset::Fc => {
                let (w1, b1) = linear(&mut store, &mut rng, "dec.fc1", h, n);
                let (g1, d1) = norm(&mut store, "dec.ln1", h);
                let (w2, b2) = linear(&mut store, &mut rng, "dec.fc2", h, h);
                let (g2, d2) = norm(&mut store, "dec.ln2", h);
                let (w3, b3) = linear(&mut store, &mut rng, "dec.fc3", m, h);
                Decoder::Fc(FcStack { w1, b1, g1, d1, w2, b2, g2, d2, w3, b3 })
            }
            ArchPreset::Conv => {
                let (c1, c2) = arch.conv_channels;
                let k = arch.kernel;
                let (h4, w4) = (arch.height / 4, arch.width / 4);
                let flat2 = c2 * h4 * w4;
                let (w1, b1) = linear(&mut store, &mut rng, "dec.fc1", h, n);
                let (g1, d1) = norm(&mut store, "dec.ln1", h);
                let (w2, b2) = linear(&mut store, &mut rng, "dec.fc2", flat2, h);
                let (g2, d2) = norm(&mut store, "dec.ln2", flat2);
                let k1 = store.add(
                    "dec.convt1.k",
                    ParamStore::glorot(&mut rng, vec![c2, c1, k, k], c2 * k * k, c1 * k * k),
                );
                let kb1 = store.add("dec.convt1.b", Tensor::zeros(vec![c1]));
                let flat1 = c1 * (arch.height / 2) * (arch.width / 2);
                let (g3, d3) = norm(&mut store, "dec.ln3", flat1);
                let k2 = store.add(
                    "dec.convt2.k",
                    ParamStore::glorot(&mut rng, vec![c1, 1, k, k], c1 * k * k, k * k),
                );
                let kb2 = store.add("dec.convt2.b", Tensor::zeros(vec![1]));
                Decoder::Conv(ConvDecoder { w1, b1, g1, d1, w2, b2, g2, d2, k1, kb1, g3, d3, k2, kb2 })
            }
        };

        let appearance = if with_appearance {
            // one fully-connected layer, no bias: parameter count = P * N
            Some(store.add("app.w", ParamStore::glorot(&mut rng, vec![p, n], n, p)))
        } else {
            None
        };

        let f = arch.feature_dim;
        let encoder = match arch.preset {
            ArchPreset::Fc => {
                let (w, b) = linear(&mut store, &mut rng, "enc.fc", f, m + enc_extra);
                let (g, d) = norm(&mut store, "enc.ln", f);
                Encoder::Fc(FcEncoder { w, b, g, d })
            }
            ArchPreset::Conv => {
                let (c1, c2) = arch.conv_channels;
                let k = arch.kernel;
                let (h2, w2d) = (arch.height / 2, arch.width / 2);
                let (h4, w4) = (arch.height / 4, arch.width / 4);
                let k1 = store.add(
                    "enc.conv1.k",
                    ParamStore::glorot(&mut rng, vec![c1, 1, k, k], k * k, c1 * k * k),
                );
                let kb1 = store.add("enc.conv1.b", Tensor::zeros(vec![c1]));
                let (g1, d1) = norm(&mut store, "enc.ln1", c1 * h2 * w2d);
                let k2 = store.add(
                    "enc.conv2.k",
                    ParamStore::glorot(&mut rng, vec![c2, c1, k, k], c1 * k * k, c2 * k * k),
                );
                let kb2 = store.add("enc.conv2.b", Tensor::zeros(vec![c2]));
                let (g2, d2) = norm(&mut store, "enc.ln2", c2 * h4 * w4);
                let (w1, b1) = linear(&mut store, &mut rng, "enc.fc1", h, c2 * h4 * w4);
                let (g3, d3) = norm(&mut store, "enc.ln3", h);
                let (w2, b2) = linear(&mut store, &mut rng, "enc.fc2", f, h + enc_extra);
                Encoder::Conv(ConvEncoder { k1, kb1, g1, d1, k2, kb2, g2, d2, w1, b1, g3, d3, w2, b2 })
            }
        };

        let wr = store.add("rnn.wr", ParamStore::glorot(&mut rng, vec![n, f], f, n));
        let ws = store.add("rnn.ws", ParamStore::glorot(&mut rng, vec![n, n], n, n));
        let b = store.add("rnn.b", Tensor::zeros(vec![n]));
        let (g, d) = norm(&mut store, "rnn.ln", n);
        let rnn = RnnCell { wr, ws, b, g, d };

        if stick_bias != 0.0 {
            let name = match arch.preset {
                ArchPreset::Fc => "dec.fc3.b",
                ArchPreset::Conv => "dec.convt2.b",
            };
            let id = store.find(name).expect("decoder output bias exists");
            let shape = store.value(id).shape().to_vec();
            let n: usize = shape.iter().product();
            store.set_value(id, Tensor::new(shape, vec![stick_bias; n]));
        }

        let eta_s = store.add("eta_s", Tensor::scalar(softplus_inv(eta_s_init)));
        let eta_theta = if with_background {
            Some(store.add("eta_theta", Tensor::scalar(softplus_inv(eta_theta_init))))
        } else {
            None
        };

        Ok((
            store,
            Networks { arch, enc_extra, decoder, appearance, encoder, rnn, eta_s, eta_theta },
        ))
    }

    fn linear_rows(tape: &mut Tape, binds: &[Var], x: Var, w: ParamId, b: ParamId) -> Var {
        let y = tape.matmul(x, binds[w.0], false, true);
        tape.add_row_vec(y, binds[b.0])
    }

    fn ln_relu(tape: &mut Tape, binds: &[Var], x: Var, g: ParamId, d: ParamId) -> Var {
        let n = tape.layer_norm_rows(x, binds[g.0], binds[d.0]);
        tape.relu(n)
    }

    /// Per-pixel shape logits `[R, M]` from latents `[R, N]`.
    pub fn decode_shape_logits(&self, tape: &mut Tape, binds: &[Var], s: Var) -> Var {
        assert_eq!(
            tape.value(s).cols(),
            self.arch.latent_dim,
            "latent dimension mismatch in decode_shape_logits"
        );
        match &self.decoder {
            Decoder::Fc(p) => {
                let z1 = Self::linear_rows(tape, binds, s, p.w1, p.b1);
                let h1 = Self::ln_relu(tape, binds, z1, p.g1, p.d1);
                let z2 = Self::linear_rows(tape, binds, h1, p.w2, p.b2);
                let h2 = Self::ln_relu(tape, binds, z2, p.g2, p.d2);
                Self::linear_rows(tape, binds, h2, p.w3, p.b3)
            }
            Decoder::Conv(p) => {
                let rows = tape.value(s).rows();
                let (c1, _c2) = self.arch.conv_channels;
                let (hh, ww) = (self.arch.height, self.arch.width);
                let (h2, w2) = (hh / 2, ww / 2);
                let (h4, w4) = (hh / 4, ww / 4);
                let c2 = self.arch.conv_channels.1;
                let mut outs = Vec::with_capacity(rows);
                for r in 0..rows {
                    let srow = tape.row(s, r);
                    let smat = tape.reshape(srow, vec![1, self.arch.latent_dim]);
                    let z1 = Self::linear_rows(tape, binds, smat, p.w1, p.b1);
                    let h1a = Self::ln_relu(tape, binds, z1, p.g1, p.d1);
                    let z2 = Self::linear_rows(tape, binds, h1a, p.w2, p.b2);
                    let h2a = Self::ln_relu(tape, binds, z2, p.g2, p.d2);
                    let grid = tape.reshape(h2a, vec![c2, h4, w4]);
                    let t1 = tape.conv2d_transpose(grid, binds[p.k1.0], 2, 1, h2, w2);
                    let t1b = tape.add_chan_vec(t1, binds[p.kb1.0]);
                    let flat1 = tape.reshape(t1b, vec![1, c1 * h2 * w2]);
                    let a1 = Self::ln_relu(tape, binds, flat1, p.g3, p.d3);
                    let grid1 = tape.reshape(a1, vec![c1, h2, w2]);
                    let t2 = tape.conv2d_transpose(grid1, binds[p.k2.0], 2, 1, hh, ww);
                    let t2b = tape.add_chan_vec(t2, binds[p.kb2.0]);
                    outs.push(tape.reshape(t2b, vec![hh * ww]));
                }
                tape.stack_rows(&outs)
            }
        }
    }

    /// Spatially constant appearance parameters `[R, P]` from latents.
    /// Raw head output; the caller squashes per model family.
    pub fn decode_appearance(&self, tape: &mut Tape, binds: &[Var], s: Var) -> Var {
        assert_eq!(
            tape.value(s).cols(),
            self.arch.latent_dim,
            "latent dimension mismatch in decode_appearance"
        );
        let w = self.appearance.expect("this model has no appearance head");
        tape.matmul(s, binds[w.0], false, true)
    }

    /// Update-signal features `[R, F]` from the appearance signal `extra`
    /// (`[R, enc_extra]`, when present) and the shape signal `v` (`[R, M]`).
    /// The appearance signal is a residual sum over all pixels while the
    /// shape entries are O(1), so the encoder conditions its input by scaling
    /// the appearance columns down to a per-pixel mean.
    pub fn encode_update_signal(&self, tape: &mut Tape, binds: &[Var], extra: Option<Var>, v: Var) -> Var {
        assert_eq!(
            tape.value(v).cols(),
            self.arch.pixels(),
            "shape-signal width mismatch in encode_update_signal"
        );
        let extra = extra.map(|u| tape.mul_scalar(u, 1.0 / self.arch.pixels() as f64));
        match (&self.encoder, extra) {
            (Encoder::Fc(p), extra) => {
                let input = match extra {
                    Some(u) => {
                        assert_eq!(tape.value(u).cols(), self.enc_extra, "appearance-signal width mismatch");
                        tape.concat_cols(u, v)
                    }
                    None => {
                        assert_eq!(self.enc_extra, 0, "encoder expects an appearance signal");
                        v
                    }
                };
                let z = Self::linear_rows(tape, binds, input, p.w, p.b);
                Self::ln_relu(tape, binds, z, p.g, p.d)
            }
            (Encoder::Conv(p), extra) => {
                let rows = tape.value(v).rows();
                let (c1, c2) = self.arch.conv_channels;
                let (hh, ww) = (self.arch.height, self.arch.width);
                let (h2, w2) = (hh / 2, ww / 2);
                let (h4, w4) = (hh / 4, ww / 4);
                let mut outs = Vec::with_capacity(rows);
                for r in 0..rows {
                    let vrow = tape.row(v, r);
                    let img = tape.reshape(vrow, vec![1, hh, ww]);
                    let z1 = tape.conv2d(img, binds[p.k1.0], 2, 1);
                    let z1b = tape.add_chan_vec(z1, binds[p.kb1.0]);
                    let f1 = tape.reshape(z1b, vec![1, c1 * h2 * w2]);
                    let a1 = Self::ln_relu(tape, binds, f1, p.g1, p.d1);
                    let g1 = tape.reshape(a1, vec![c1, h2, w2]);
                    let z2 = tape.conv2d(g1, binds[p.k2.0], 2, 1);
                    let z2b = tape.add_chan_vec(z2, binds[p.kb2.0]);
                    let f2 = tape.reshape(z2b, vec![1, c2 * h4 * w4]);
                    let a2 = Self::ln_relu(tape, binds, f2, p.g2, p.d2);
                    let z3 = Self::linear_rows(tape, binds, a2, p.w1, p.b1);
                    let a3 = Self::ln_relu(tape, binds, z3, p.g3, p.d3);
                    let joined = match extra {
                        Some(u) => {
                            let urow = tape.row(u, r);
                            let umat = tape.reshape(urow, vec![1, self.enc_extra]);
                            tape.concat_cols(umat, a3)
                        }
                        None => a3,
                    };
                    let out = Self::linear_rows(tape, binds, joined, p.w2, p.b2);
                    outs.push(tape.reshape(out, vec![self.arch.feature_dim]));
                }
                tape.stack_rows(&outs)
            }
        }
    }

    /// One recurrent update: `s' = tanh(LN(Wr r_in + Ws s + b))`.
    pub fn rnn_step(&self, tape: &mut Tape, binds: &[Var], r_in: Var, s: Var) -> Var {
        assert_eq!(tape.value(r_in).cols(), self.arch.feature_dim, "feature dimension mismatch in rnn_step");
        assert_eq!(tape.value(s).cols(), self.arch.latent_dim, "latent dimension mismatch in rnn_step");
        let a = tape.matmul(r_in, binds[self.rnn.wr.0], false, true);
        let b = tape.matmul(s, binds[self.rnn.ws.0], false, true);
        let sum = tape.add(a, b);
        let pre = tape.add_row_vec(sum, binds[self.rnn.b.0]);
        let normed = tape.layer_norm_rows(pre, binds[self.rnn.g.0], binds[self.rnn.d.0]);
        tape.tanh(normed)
    }

    /// Effective latent step size (softplus of the raw parameter).
    pub fn eta_s_eff(&self, tape: &mut Tape, binds: &[Var]) -> Var {
        tape.softplus(binds[self.eta_s.0])
    }

    /// Effective background step size.
    pub fn eta_theta_eff(&self, tape: &mut Tape, binds: &[Var]) -> Var {
        let id = self.eta_theta.expect("this model has no background step size");
        tape.softplus(binds[id.0])
    }
}

/// Test helper: zero every parameter in the store.
pub fn zero_all_params(store: &mut ParamStore) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::zeros(shape));
    }
}

/// Convenience for tests and single evaluations: bind and run one closure.
pub fn with_bound<R>(store: &ParamStore, f: impl FnOnce(&mut Tape, &[Var]) -> R) -> R {
    let mut tape = Tape::new();
    let binds = bind_params(&mut tape, store);
    f(&mut tape, &binds)
}
