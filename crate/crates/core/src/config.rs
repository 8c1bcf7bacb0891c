//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::SplitFractions;
use crate::error::{Error, Result};
use crate::graph::{DEFAULT_CHEB_ORDER, DEFAULT_EPSILON};
use crate::model::{ModelConfig, SpatialMode};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative learning-rate decay applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    /// Rescale the averaged gradient to this global L2 norm when exceeded.
    pub grad_clip: Option<f64>,
    pub split: SplitFractions,
    /// Kernel bandwidth; the distance standard deviation when absent.
    pub kernel_sigma: Option<f64>,
    pub kernel_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig {
                cheb_order: DEFAULT_CHEB_ORDER,
                ..ModelConfig::default()
            },
            epochs: 50,
            batch_size: 50,
            lr0: 1e-3,
            lr_decay: 0.7,
            lr_decay_every: 5,
            rho: 0.9,
            eps: 1e-8,
            seed: 0,
            grad_clip: None,
            split: SplitFractions::default(),
            kernel_sigma: None,
            kernel_epsilon: DEFAULT_EPSILON,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for {key}")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {raw:?} for {key}"))),
    }
}

fn parse_optional<T: FromStr>(key: &str, raw: &str) -> Result<Option<T>> {
    match raw {
        "none" | "auto" => Ok(None),
        _ => parse_value(key, raw).map(Some),
    }
}

fn show_optional<T: ToString>(v: &Option<T>, absent: &str) -> String {
    v.as_ref().map_or_else(|| absent.to_string(), T::to_string)
}

impl TrainConfig {
    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_schedule(self.lr0, self.lr_decay, self.lr_decay_every, epoch)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.split.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and lr_decay_every must be positive".into(),
            ));
        }
        let positive = [
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("eps", self.eps),
            ("kernel_epsilon", self.kernel_epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        for (name, v) in [("grad_clip", self.grad_clip), ("kernel_sigma", self.kernel_sigma)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("{name} must be positive, got {v}")));
                }
            }
        }
        Ok(())
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "epochs" => self.epochs = parse_value(key, raw)?,
            "batch_size" => self.batch_size = parse_value(key, raw)?,
            "lr0" => self.lr0 = parse_value(key, raw)?,
            "lr_decay" => self.lr_decay = parse_value(key, raw)?,
            "lr_decay_every" => self.lr_decay_every = parse_value(key, raw)?,
            "rho" => self.rho = parse_value(key, raw)?,
            "eps" => self.eps = parse_value(key, raw)?,
            "seed" => self.seed = parse_value(key, raw)?,
            "grad_clip" => self.grad_clip = parse_optional(key, raw)?,
            "train_fraction" => self.split.train = parse_value(key, raw)?,
            "val_fraction" => self.split.val = parse_value(key, raw)?,
            "test_fraction" => self.split.test = parse_value(key, raw)?,
            "kernel_sigma" => self.kernel_sigma = parse_optional(key, raw)?,
            "kernel_epsilon" => self.kernel_epsilon = parse_value(key, raw)?,
            "window" => m.window = parse_value(key, raw)?,
            "horizon" => m.horizon = parse_value(key, raw)?,
            "d_g" => m.d_g = parse_value(key, raw)?,
            "n_blocks" => m.n_blocks = parse_value(key, raw)?,
            "heads_spatial" => m.heads_spatial = parse_value(key, raw)?,
            "heads_temporal" => m.heads_temporal = parse_value(key, raw)?,
            "layers_spatial" => m.layers_spatial = parse_value(key, raw)?,
            "layers_temporal" => m.layers_temporal = parse_value(key, raw)?,
            "cheb_order" => m.cheb_order = parse_value(key, raw)?,
            "spatial_embedding" => m.spatial_embedding = parse_bool(key, raw)?,
            "temporal_embedding" => m.temporal_embedding = parse_bool(key, raw)?,
            "spatial_mode" => m.spatial_mode = parse_value::<SpatialMode>(key, raw)?,
            "local_mask" => m.local_mask = parse_optional(key, raw)?,
            "skip_connections" => m.skip_connections = parse_bool(key, raw)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; the result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its current value; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let pairs: Vec<(&str, String)> = vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr0", self.lr0.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("rho", self.rho.to_string()),
            ("eps", self.eps.to_string()),
            ("seed", self.seed.to_string()),
            ("grad_clip", show_optional(&self.grad_clip, "none")),
            ("train_fraction", self.split.train.to_string()),
            ("val_fraction", self.split.val.to_string()),
            ("test_fraction", self.split.test.to_string()),
            ("kernel_sigma", show_optional(&self.kernel_sigma, "auto")),
            ("kernel_epsilon", self.kernel_epsilon.to_string()),
            ("window", m.window.to_string()),
            ("horizon", m.horizon.to_string()),
            ("d_g", m.d_g.to_string()),
            ("n_blocks", m.n_blocks.to_string()),
            ("heads_spatial", m.heads_spatial.to_string()),
            ("heads_temporal", m.heads_temporal.to_string()),
            ("layers_spatial", m.layers_spatial.to_string()),
            ("layers_temporal", m.layers_temporal.to_string()),
            ("cheb_order", m.cheb_order.to_string()),
            ("spatial_embedding", m.spatial_embedding.to_string()),
            ("temporal_embedding", m.temporal_embedding.to_string()),
            ("spatial_mode", m.spatial_mode.to_string()),
            ("local_mask", show_optional(&m.local_mask, "none")),
            ("skip_connections", m.skip_connections.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// `lr0 * decay^floor(epoch / every)`.
pub fn lr_schedule(lr0: f64, decay: f64, every: usize, epoch: usize) -> f64 {
    lr0 * decay.powi((epoch / every) as i32)
}
