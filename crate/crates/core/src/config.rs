//! Run configuration: a flat key=value text file plus command-line
//! overrides (flags win). Unknown keys are rejected.

use crate::dataset::UniqueSubset;
use crate::em::{EmConfig, Method, UpdateMode};
use crate::error::LdpError;
use crate::mixture::{ComponentModel, PriorDist, PriorSpec};
use crate::nets::{default_eta_inits, ArchConfig, ArchPreset};
use crate::train::TrainConfig;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    /// "bernoulli" or "gaussian"
    pub model: ModelFamily,
    pub alpha: f64,
    pub lambda: f64,
    pub mu_prior: f64,
    pub theta_prior: f64,
    pub k: usize,
    pub t_steps: usize,
    pub update_mode: UpdateMode,
    pub sigma_init: f64,
    pub detach_gamma: bool,
    pub preset: ArchPreset,
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub hidden: usize,
    pub conv_c1: usize,
    pub conv_c2: usize,
    pub kernel: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub noise_prob: f64,
    pub eta_s_init: Option<f64>,
    pub eta_theta_init: Option<f64>,
    /// Initial decoder output bias: starts the stick weights low so the
    /// background owns most of each pixel at the first E-step.
    pub stick_bias_init: f64,
    pub seed: u64,
    pub workers: usize,
    pub size: usize,
    pub objects: usize,
    pub n: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub unique: String,
    pub holdout: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelFamily {
    Bernoulli,
    Gaussian,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: Method::Ldp,
            model: ModelFamily::Bernoulli,
            alpha: 4.0,
            lambda: 0.1,
            mu_prior: 0.0,
            theta_prior: 0.01,
            k: 3,
            t_steps: 10,
            update_mode: UpdateMode::Gradient,
            sigma_init: 1.0,
            detach_gamma: false,
            preset: ArchPreset::Fc,
            latent_dim: 64,
            feature_dim: 64,
            hidden: 250,
            conv_c1: 16,
            conv_c2: 32,
            kernel: 4,
            epochs: 50,
            batch: 32,
            lr: 1e-3,
            noise_prob: 0.2,
            eta_s_init: None,
            eta_theta_init: None,
            stick_bias_init: -2.0,
            seed: 0,
            workers: 1,
            size: 20,
            objects: 2,
            n: 1000,
            n_val: 0,
            n_test: 0,
            unique: "all".to_string(),
            holdout: false,
        }
    }
}

impl RunConfig {
    /// Apply one key=value pair. This is the single entry point used by both
    /// the config file and command-line overrides.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), LdpError> {
        let bad = |what: &str| {
            LdpError::Config(format!("invalid value {:?} for key {:?}", what, key))
        };
        macro_rules! parse {
            ($t:ty) => {
                value.parse::<$t>().map_err(|_| bad(value))?
            };
        }
        match key {
            "method" => self.method = value.parse()?,
            "model" => {
                self.model = match value {
                    "bernoulli" => ModelFamily::Bernoulli,
                    "gaussian" => ModelFamily::Gaussian,
                    _ => return Err(bad(value)),
                }
            }
            "alpha" => self.alpha = parse!(f64),
            "lambda" => self.lambda = parse!(f64),
            "mu-prior" => self.mu_prior = parse!(f64),
            "theta-prior" => self.theta_prior = parse!(f64),
            "k" => self.k = parse!(usize),
            "t-steps" => self.t_steps = parse!(usize),
            "update-mode" => {
                self.update_mode = match value {
                    "rnn" => UpdateMode::Rnn,
                    "gradient" => UpdateMode::Gradient,
                    _ => return Err(bad(value)),
                }
            }
            "sigma-init" => self.sigma_init = parse!(f64),
            "detach-gamma" => self.detach_gamma = parse!(bool),
            "preset" => {
                self.preset = match value {
                    "fc" => ArchPreset::Fc,
                    "conv" => ArchPreset::Conv,
                    _ => return Err(bad(value)),
                }
            }
            "latent-dim" => self.latent_dim = parse!(usize),
            "feature-dim" => self.feature_dim = parse!(usize),
            "hidden" => self.hidden = parse!(usize),
            "conv-c1" => self.conv_c1 = parse!(usize),
            "conv-c2" => self.conv_c2 = parse!(usize),
            "kernel" => self.kernel = parse!(usize),
            "epochs" => self.epochs = parse!(usize),
            "batch" => self.batch = parse!(usize),
            "lr" => self.lr = parse!(f64),
            "noise-prob" => self.noise_prob = parse!(f64),
            "eta-s-init" => self.eta_s_init = Some(parse!(f64)),
            "eta-theta-init" => self.eta_theta_init = Some(parse!(f64)),
            "stick-bias-init" => self.stick_bias_init = parse!(f64),
            "seed" => self.seed = parse!(u64),
            "workers" => self.workers = parse!(usize),
            "size" => self.size = parse!(usize),
            "objects" => self.objects = parse!(usize),
            "n" => self.n = parse!(usize),
            "n-val" => self.n_val = parse!(usize),
            "n-test" => self.n_test = parse!(usize),
            "unique" => self.unique = value.to_string(),
            "holdout" => self.holdout = parse!(bool),
            _ => return Err(LdpError::Config(format!("unknown configuration key {:?}", key))),
        }
        Ok(())
    }

    /// Parse a plain key=value file: one pair per line, `#` comments and
    /// blank lines allowed.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), LdpError> {
        let text = std::fs::read_to_string(path).map_err(|e| LdpError::io(path, e))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                LdpError::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical text form: every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        kv("method", self.method.name().to_string());
        kv(
            "model",
            match self.model {
                ModelFamily::Bernoulli => "bernoulli".to_string(),
                ModelFamily::Gaussian => "gaussian".to_string(),
            },
        );
        kv("alpha", format!("{}", self.alpha));
        kv("lambda", format!("{}", self.lambda));
        kv("mu-prior", format!("{}", self.mu_prior));
        kv("theta-prior", format!("{}", self.theta_prior));
        kv("k", format!("{}", self.k));
        kv("t-steps", format!("{}", self.t_steps));
        kv(
            "update-mode",
            match self.update_mode {
                UpdateMode::Rnn => "rnn".to_string(),
                UpdateMode::Gradient => "gradient".to_string(),
            },
        );
        kv("sigma-init", format!("{}", self.sigma_init));
        kv("detach-gamma", format!("{}", self.detach_gamma));
        kv(
            "preset",
            match self.preset {
                ArchPreset::Fc => "fc".to_string(),
                ArchPreset::Conv => "conv".to_string(),
            },
        );
        kv("latent-dim", format!("{}", self.latent_dim));
        kv("feature-dim", format!("{}", self.feature_dim));
        kv("hidden", format!("{}", self.hidden));
        kv("conv-c1", format!("{}", self.conv_c1));
        kv("conv-c2", format!("{}", self.conv_c2));
        kv("kernel", format!("{}", self.kernel));
        kv("epochs", format!("{}", self.epochs));
        kv("batch", format!("{}", self.batch));
        kv("lr", format!("{}", self.lr));
        kv("noise-prob", format!("{}", self.noise_prob));
        if let Some(v) = self.eta_s_init {
            kv("eta-s-init", format!("{}", v));
        }
        if let Some(v) = self.eta_theta_init {
            kv("eta-theta-init", format!("{}", v));
        }
        kv("stick-bias-init", format!("{}", self.stick_bias_init));
        kv("seed", format!("{}", self.seed));
        kv("workers", format!("{}", self.workers));
        kv("size", format!("{}", self.size));
        kv("objects", format!("{}", self.objects));
        kv("n", format!("{}", self.n));
        kv("n-val", format!("{}", self.n_val));
        kv("n-test", format!("{}", self.n_test));
        kv("unique", self.unique.clone());
        kv("holdout", format!("{}", self.holdout));
        out
    }

    pub fn component_model(&self) -> Result<ComponentModel, LdpError> {
        match self.model {
            ModelFamily::Bernoulli => Ok(ComponentModel::Bernoulli),
            ModelFamily::Gaussian => ComponentModel::gaussian(self.alpha),
        }
    }

    pub fn prior_spec(&self) -> PriorSpec {
        let dist = match self.model {
            ModelFamily::Bernoulli => PriorDist::Bernoulli { theta: self.theta_prior },
            ModelFamily::Gaussian => PriorDist::Gaussian { mean: self.mu_prior },
        };
        PriorSpec { dist, lambda: self.lambda }
    }

    pub fn em_config(&self) -> Result<EmConfig, LdpError> {
        let config = EmConfig {
            k: self.k,
            t: self.t_steps,
            mode: self.update_mode,
            model: self.component_model()?,
            prior: self.prior_spec(),
            sigma_init: self.sigma_init,
            loss_weights: EmConfig::linear_loss_weights(self.t_steps),
            detach_gamma: self.detach_gamma,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn arch(&self, height: usize, width: usize) -> ArchConfig {
        ArchConfig {
            preset: self.preset,
            height,
            width,
            latent_dim: self.latent_dim,
            feature_dim: self.feature_dim,
            hidden: self.hidden,
            appearance_dim: 1,
            conv_channels: (self.conv_c1, self.conv_c2),
            kernel: self.kernel,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            workers: self.workers.max(1),
            seed: self.seed,
            noise_prob: self.noise_prob,
        }
    }

    /// Initial learnable step sizes: explicit overrides, otherwise the
    /// stability-scaled defaults.
    pub fn eta_inits(&self, pixels: usize) -> (f64, f64) {
        let alpha = match self.model {
            ModelFamily::Gaussian => Some(self.alpha),
            ModelFamily::Bernoulli => None,
        };
        let (ds, dt) = default_eta_inits(alpha, pixels);
        (self.eta_s_init.unwrap_or(ds), self.eta_theta_init.unwrap_or(dt))
    }

    pub fn unique_subset(&self, bank_len: usize) -> Result<UniqueSubset, LdpError> {
        match self.unique.as_str() {
            "all" => Ok(UniqueSubset::All),
            s => {
                let count: usize = s
                    .parse()
                    .map_err(|_| LdpError::Config(format!("invalid unique setting {:?}", s)))?;
                if count > bank_len {
                    return Err(LdpError::Config(format!(
                        "unique={} exceeds glyph bank size {}",
                        count, bank_len
                    )));
                }
                Ok(UniqueSubset::Count(count))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let config = RunConfig::default();
        let text = config.to_text();
        let mut parsed = RunConfig::default();
        for line in text.lines() {
            let (k, v) = line.split_once('=').unwrap();
            parsed.apply(k, v).unwrap();
        }
        assert_eq!(config, parsed);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut config = RunConfig::default();
        assert!(matches!(config.apply("frobnicate", "1"), Err(LdpError::Config(_))));
    }

    #[test]
    fn invalid_value_is_rejected() {
        let mut config = RunConfig::default();
        assert!(config.apply("epochs", "many").is_err());
        assert!(config.apply("update-mode", "warp").is_err());
    }

    #[test]
    fn overrides_win_over_defaults() {
        let mut config = RunConfig::default();
        config.apply("k", "4").unwrap();
        config.apply("model", "gaussian").unwrap();
        config.apply("alpha", "16").unwrap();
        assert_eq!(config.k, 4);
        let em = config.em_config().unwrap();
        assert_eq!(em.model, ComponentModel::Gaussian { alpha: 16.0 });
    }
}
