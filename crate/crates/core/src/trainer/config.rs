use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DataOptions;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::ContrastiveConfig;
use crate::optim::AdamConfig;

pub const CONFIG_VERSION: u32 = 1;

/// Every training hyperparameter, stored as flat TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub config_version: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub tau: f64,
    pub kappa: f64,
    /// Epochs between momentum updates.
    pub rho: usize,
    /// First epoch of the momentum stage.
    pub ts: usize,
    /// Epochs between pseudo-label checks.
    pub omega: usize,
    pub train_fraction: f64,
    pub reorder_start: usize,
    pub reorder_stop: usize,
    pub rng_seed: u64,

    pub dim: usize,
    pub segments: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub bottleneck: usize,
    pub adaptor_scale: f64,
    pub gat_heads: usize,
    pub leaky_slope: f64,
    pub embed_init_std: f64,

    pub mine_hidden: usize,
    pub mine_bias_correction: bool,
    pub mine_ema_rate: f64,

    pub use_contrastive: bool,
    pub use_alignment: bool,
    pub use_mutual_information: bool,
    pub use_pseudo_labels: bool,
    /// When false, promoted pseudo-labels only join the contrastive term.
    pub pseudo_labels_all_losses: bool,
    /// Also require most single-modality predictions to agree before promotion.
    pub ensemble_agreement: bool,

    pub bow_size: usize,
    pub text_dim: usize,

    /// Save a checkpoint every this many epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
    /// Evaluate on the test seeds every this many epochs; 0 disables.
    pub eval_every: usize,
    pub eval_all_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let adam = AdamConfig::default();
        let cl = ContrastiveConfig::default();
        let data = DataOptions::default();
        TrainConfig {
            config_version: CONFIG_VERSION,
            epochs: 300,
            batch_size: 64,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            tau: cl.tau,
            kappa: cl.kappa,
            rho: 1,
            ts: 500,
            omega: 2,
            train_fraction: 0.2,
            reorder_start: 0,
            reorder_stop: 50,
            rng_seed: 0,
            dim: enc.dim,
            segments: enc.segments,
            heads: enc.heads,
            head_dim: enc.head_dim,
            bottleneck: enc.bottleneck,
            adaptor_scale: enc.adaptor_scale,
            gat_heads: enc.gat_heads,
            leaky_slope: enc.leaky_slope,
            embed_init_std: enc.embed_init_std,
            mine_hidden: 64,
            mine_bias_correction: false,
            mine_ema_rate: 0.01,
            use_contrastive: true,
            use_alignment: true,
            use_mutual_information: true,
            use_pseudo_labels: true,
            pseudo_labels_all_losses: true,
            ensemble_agreement: false,
            bow_size: data.bow_size,
            text_dim: data.text_dim,
            checkpoint_every: 0,
            eval_every: 0,
            eval_all_targets: false,
        }
    }
}

impl TrainConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.dim,
            segments: self.segments,
            heads: self.heads,
            head_dim: self.head_dim,
            bottleneck: self.bottleneck,
            adaptor_scale: self.adaptor_scale,
            gat_heads: self.gat_heads,
            leaky_slope: self.leaky_slope,
            embed_init_std: self.embed_init_std,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig { tau: self.tau, kappa: self.kappa }
    }

    pub fn data_options(&self) -> DataOptions {
        DataOptions { bow_size: self.bow_size, text_dim: self.text_dim, text_seed: self.rng_seed }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        if self.ts < 1 || self.rho < 1 || self.omega < 1 {
            return bad("ts, rho and omega must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("optimizer settings out of range");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        if self.reorder_start > self.reorder_stop {
            return bad("reorder_start must not exceed reorder_stop");
        }
        if self.mine_hidden < 1 || !(self.mine_ema_rate > 0.0 && self.mine_ema_rate <= 1.0) {
            return bad("mine_hidden must be positive and mine_ema_rate in (0, 1]");
        }
        if self.bow_size < 1 || self.text_dim < 1 {
            return bad("bow_size and text_dim must be positive");
        }
        self.contrastive().validate().map_err(|e| match e {
            Error::Argument(m) => Error::Config(m),
            other => other,
        })?;
        self.encoder().validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over the settings that shape the model and its trajectory.
    /// Run length and reporting cadence are excluded so a run can be extended.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        c.checkpoint_every = 0;
        c.eval_every = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig { epochs: 7, kappa: 0.5, mine_bias_correction: true, ..TrainConfig::default() };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = TrainConfig::from_toml("epochs = 3\nbatch_size = 8\n").unwrap();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.omega, cfg.ts), (3, 8, 2, 500));
    }

    #[test]
    fn rejects_bad_values_and_unknown_keys() {
        for text in ["kappa = 1.0", "ts = 0", "rho = 0", "omega = 0", "tau = 0.0", "config_version = 9", "bogus = 1", "dim = 10"] {
            assert!(matches!(TrainConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn hash_ignores_run_length() {
        let a = TrainConfig::default();
        let b = TrainConfig { epochs: 1, eval_every: 3, checkpoint_every: 2, ..a.clone() };
        let c = TrainConfig { kappa: 0.9, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
