use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv;
use crate::network::loss::LossKind;

/// Which raters contribute KL terms in a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum KlScope {
    /// Mean over the distinct raters present in the batch.
    #[default]
    Batch,
    /// Mean over every rater and the gold slot.
    All,
}

impl FromStr for KlScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(KlScope::Batch),
            "all" => Ok(KlScope::All),
            other => Err(Error::Config(format!(
                "kl_scope must be batch or all, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for KlScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KlScope::Batch => "batch",
            KlScope::All => "all",
        })
    }
}

/// How annotations are grouped into optimizer steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Batching {
    /// `batch_size` shuffled (image, rater) pairs per step.
    Pairs,
    /// `batch_size` shuffled images per step, each with all of its
    /// annotations; the backbone runs once per image.
    #[default]
    Images,
}

impl FromStr for Batching {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairs" => Ok(Batching::Pairs),
            "images" => Ok(Batching::Images),
            other => Err(Error::Config(format!(
                "batching must be pairs or images, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Batching {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Batching::Pairs => "pairs",
            Batching::Images => "images",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_net: f64,
    pub lr_latent: f64,
    pub decay_start_epoch: usize,
    pub decay_factor: f64,
    pub lambda: f64,
    pub k_train: usize,
    pub batch_size: usize,
    pub batching: Batching,
    pub loss: LossKind,
    pub seed: u64,
    pub latent_dim: usize,
    pub prior_var: f64,
    pub post_var: f64,
    pub kl_scope: KlScope,
    /// Write an intermediate checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Random quarter turns and flips of each training image.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr_net: 1e-4,
            lr_latent: 0.02,
            decay_start_epoch: 40,
            decay_factor: 1.1,
            lambda: 0.0005,
            k_train: 1,
            batch_size: 3,
            batching: Batching::default(),
            loss: LossKind::Dice,
            seed: 0,
            latent_dim: 8,
            prior_var: 2.0,
            post_var: 8.0,
            kl_scope: KlScope::Batch,
            checkpoint_every: 0,
            augment: true,
        }
    }
}

pub const CONFIG_KEYS: [&str; 17] = [
    "epochs",
    "lr_net",
    "lr_latent",
    "decay_start_epoch",
    "decay_factor",
    "lambda",
    "k_train",
    "batch_size",
    "batching",
    "loss",
    "seed",
    "latent_dim",
    "prior_var",
    "post_var",
    "kl_scope",
    "checkpoint_every",
    "augment",
];

impl TrainConfig {
    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = kv::value(key, value)?,
            "lr_net" => self.lr_net = kv::value(key, value)?,
            "lr_latent" => self.lr_latent = kv::value(key, value)?,
            "decay_start_epoch" => self.decay_start_epoch = kv::value(key, value)?,
            "decay_factor" => self.decay_factor = kv::value(key, value)?,
            "lambda" => self.lambda = kv::value(key, value)?,
            "k_train" => self.k_train = kv::value(key, value)?,
            "batch_size" => self.batch_size = kv::value(key, value)?,
            "batching" => self.batching = value.parse()?,
            "loss" => self.loss = value.parse()?,
            "seed" => self.seed = kv::value(key, value)?,
            "latent_dim" => self.latent_dim = kv::value(key, value)?,
            "prior_var" => self.prior_var = kv::value(key, value)?,
            "post_var" => self.post_var = kv::value(key, value)?,
            "kl_scope" => self.kl_scope = value.parse()?,
            "checkpoint_every" => self.checkpoint_every = kv::value(key, value)?,
            "augment" => self.augment = kv::value(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` text, in [`CONFIG_KEYS`] order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let values = [
            self.epochs.to_string(),
            self.lr_net.to_string(),
            self.lr_latent.to_string(),
            self.decay_start_epoch.to_string(),
            self.decay_factor.to_string(),
            self.lambda.to_string(),
            self.k_train.to_string(),
            self.batch_size.to_string(),
            self.batching.to_string(),
            self.loss.as_str().to_string(),
            self.seed.to_string(),
            self.latent_dim.to_string(),
            self.prior_var.to_string(),
            self.post_var.to_string(),
            self.kl_scope.to_string(),
            self.checkpoint_every.to_string(),
            self.augment.to_string(),
        ];
        CONFIG_KEYS
            .iter()
            .map(|k| k.to_string())
            .zip(values)
            .collect()
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in kv::parse(text, origin)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("lr_net", self.lr_net)?;
        positive("lr_latent", self.lr_latent)?;
        positive("decay_factor", self.decay_factor)?;
        positive("prior_var", self.prior_var)?;
        positive("post_var", self.post_var)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.k_train == 0 {
            return Err(Error::Config("k_train must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learning rate for `epoch` (0-based): `base` before the decay start, then
/// divided by `decay_factor` once per epoch.
pub fn lr_schedule(epoch: usize, base_lr: f64, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.decay_start_epoch {
        base_lr
    } else {
        let steps = (epoch + 1 - cfg.decay_start_epoch) as i32;
        base_lr / cfg.decay_factor.powi(steps)
    }
}
