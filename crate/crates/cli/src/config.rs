//! Line-oriented `key = value` experiment configuration.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use lorentzian::optim::{OptimConfig, OptimKind};
use lorentzian::{Dtype, PrecisionProfile, RescaleConfig, Scalar};

/// Every tunable of every subcommand. Keys match field names.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub precision: Dtype,
    pub tightness: f64,
    pub xtmax: Option<f64>,
    pub fixed_curve: bool,
    pub no_scaling: bool,
    pub naive_curvature_optim: bool,

    pub optimizer: OptimKind,
    /// Task default when unset.
    pub lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub curvature_lr_scale: f64,
    /// 0 disables clipping.
    pub clip_norm: f64,
    pub curvature_init: f64,

    pub image_size: usize,
    pub image_channels: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub data_noise: f64,
    pub data_path: Option<PathBuf>,
    pub test_data_path: Option<PathBuf>,

    pub channels: usize,
    pub mid_channels: usize,
    pub blocks: usize,
    pub head_dim: usize,
    /// Task default when unset.
    pub epochs: Option<usize>,
    pub batch_size: usize,

    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub metric_batch_size: usize,
    pub label_fraction: f64,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub proxy_count: usize,
    pub margin_delta: f64,
    pub class_margin: f64,
    pub knn_k: usize,
    pub miner_seed: u64,
    pub lhier: bool,
    pub lhier_weight: f64,

    pub tree_depth: usize,
    pub tree_branching: usize,
    pub tree_dim: usize,
    pub tree_noise: f64,
    pub sample_noise: f64,
    pub embed_steps: usize,
    pub embed_space_dim: usize,

    pub trials: usize,
    pub rescale_samples: usize,
    pub gradcheck_configs: usize,
    pub inject_fault: bool,

    pub bench_batch: usize,
    pub bench_size: usize,
    pub bench_cin: usize,
    pub bench_cout: usize,
    pub bench_ksize: usize,
    pub bench_reps: usize,

    pub log_wall_clock: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Dtype::F32,
            tightness: 2.0,
            xtmax: None,
            fixed_curve: false,
            no_scaling: false,
            naive_curvature_optim: false,

            optimizer: OptimKind::Radamw,
            lr: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            momentum: 0.0,
            curvature_lr_scale: 0.1,
            clip_norm: 5.0,
            curvature_init: 1.0,

            image_size: 32,
            image_channels: 3,
            train_size: 256,
            test_size: 128,
            data_noise: 0.5,
            data_path: None,
            test_data_path: None,

            channels: 16,
            mid_channels: 8,
            blocks: 1,
            head_dim: 8,
            epochs: None,
            batch_size: 32,

            embed_dim: 8,
            hidden_dim: 32,
            metric_batch_size: 96,
            label_fraction: 0.2,
            samples_per_class: 12,
            test_per_class: 12,
            proxy_count: 16,
            margin_delta: 0.1,
            class_margin: 0.5,
            knn_k: 3,
            miner_seed: 0,
            lhier: true,
            lhier_weight: 1.0,

            tree_depth: 3,
            tree_branching: 3,
            tree_dim: 16,
            tree_noise: 0.1,
            sample_noise: 0.2,
            embed_steps: 500,
            embed_space_dim: 2,

            trials: 1000,
            rescale_samples: 100_000,
            gradcheck_configs: 10,
            inject_fault: false,

            bench_batch: 8,
            bench_size: 32,
            bench_cin: 16,
            bench_cout: 32,
            bench_ksize: 3,
            bench_reps: 9,

            log_wall_clock: false,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value.parse::<V>().map_err(|e| anyhow!("config key `{key}`: cannot parse `{value}`: {e}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => bail!("config key `{key}`: expected a boolean, got `{value}`"),
    }
}

fn parse_opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl Config {
    /// Set one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "precision" => self.precision = parse(key, v)?,
            "tightness" => self.tightness = parse(key, v)?,
            "xtmax" => self.xtmax = if v == "none" { None } else { Some(parse(key, v)?) },
            "fixed_curve" => self.fixed_curve = parse_bool(key, v)?,
            "no_scaling" => self.no_scaling = parse_bool(key, v)?,
            "naive_curvature_optim" => self.naive_curvature_optim = parse_bool(key, v)?,

            "optimizer" => self.optimizer = parse(key, v)?,
            "lr" => self.lr = Some(parse(key, v)?),
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "curvature_lr_scale" => self.curvature_lr_scale = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "curvature_init" => self.curvature_init = parse(key, v)?,

            "image_size" => self.image_size = parse(key, v)?,
            "image_channels" => self.image_channels = parse(key, v)?,
            "train_size" => self.train_size = parse(key, v)?,
            "test_size" => self.test_size = parse(key, v)?,
            "data_noise" => self.data_noise = parse(key, v)?,
            "data_path" => self.data_path = parse_opt_path(v),
            "test_data_path" => self.test_data_path = parse_opt_path(v),

            "channels" => self.channels = parse(key, v)?,
            "mid_channels" => self.mid_channels = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "head_dim" => self.head_dim = parse(key, v)?,
            "epochs" => self.epochs = Some(parse(key, v)?),
            "batch_size" => self.batch_size = parse(key, v)?,

            "embed_dim" => self.embed_dim = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "metric_batch_size" => self.metric_batch_size = parse(key, v)?,
            "label_fraction" => self.label_fraction = parse(key, v)?,
            "samples_per_class" => self.samples_per_class = parse(key, v)?,
            "test_per_class" => self.test_per_class = parse(key, v)?,
            "proxy_count" => self.proxy_count = parse(key, v)?,
            "margin_delta" => self.margin_delta = parse(key, v)?,
            "class_margin" => self.class_margin = parse(key, v)?,
            "knn_k" => self.knn_k = parse(key, v)?,
            "miner_seed" => self.miner_seed = parse(key, v)?,
            "lhier" => self.lhier = parse_bool(key, v)?,
            "lhier_weight" => self.lhier_weight = parse(key, v)?,

            "tree_depth" => self.tree_depth = parse(key, v)?,
            "tree_branching" => self.tree_branching = parse(key, v)?,
            "tree_dim" => self.tree_dim = parse(key, v)?,
            "tree_noise" => self.tree_noise = parse(key, v)?,
            "sample_noise" => self.sample_noise = parse(key, v)?,
            "embed_steps" => self.embed_steps = parse(key, v)?,
            "embed_space_dim" => self.embed_space_dim = parse(key, v)?,

            "trials" => self.trials = parse(key, v)?,
            "rescale_samples" => self.rescale_samples = parse(key, v)?,
            "gradcheck_configs" => self.gradcheck_configs = parse(key, v)?,
            "inject_fault" => self.inject_fault = parse_bool(key, v)?,

            "bench_batch" => self.bench_batch = parse(key, v)?,
            "bench_size" => self.bench_size = parse(key, v)?,
            "bench_cin" => self.bench_cin = parse(key, v)?,
            "bench_cout" => self.bench_cout = parse(key, v)?,
            "bench_ksize" => self.bench_ksize = parse(key, v)?,
            "bench_reps" => self.bench_reps = parse(key, v)?,

            "log_wall_clock" => self.log_wall_clock = parse_bool(key, v)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Apply `key = value` lines. `#` starts a comment; blank lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("line {}: expected `key = value`", n + 1))?;
            self.set(k.trim(), v.trim()).with_context(|| format!("line {}", n + 1))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_text(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("image_channels", self.image_channels),
            ("channels", self.channels),
            ("mid_channels", self.mid_channels),
            ("head_dim", self.head_dim),
            ("batch_size", self.batch_size),
            ("metric_batch_size", self.metric_batch_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("proxy_count", self.proxy_count),
            ("knn_k", self.knn_k),
            ("tree_depth", self.tree_depth),
            ("tree_branching", self.tree_branching),
            ("tree_dim", self.tree_dim),
            ("embed_space_dim", self.embed_space_dim),
            ("bench_reps", self.bench_reps),
        ];
        for (k, v) in positive {
            if v == 0 {
                bail!("config key `{k}` must be positive");
            }
        }
        if !(self.tightness.is_finite() && self.tightness > 0.0) {
            bail!("tightness must be positive, got {}", self.tightness);
        }
        if !(self.curvature_init.is_finite() && self.curvature_init > 0.0) {
            bail!("curvature_init must be positive, got {}", self.curvature_init);
        }
        if !(0.0..=1.0).contains(&self.label_fraction) {
            bail!("label_fraction must lie in [0, 1], got {}", self.label_fraction);
        }
        if self.batch_size < 2 {
            bail!("batch_size must be at least 2 for batch normalization");
        }
        self.optim(1e-3).validate()?;
        Ok(())
    }

    pub fn profile(&self) -> PrecisionProfile {
        let p = PrecisionProfile::new(self.precision);
        match self.xtmax {
            Some(x) => p.with_x_t_max(x),
            None => p,
        }
    }

    /// Rescaling for scalar type `T` (its own precision profile, with any override).
    pub fn rescale_for<T: Scalar>(&self) -> Result<RescaleConfig> {
        let mut p = PrecisionProfile::for_scalar::<T>();
        if let Some(x) = self.xtmax {
            p = p.with_x_t_max(x);
        }
        let r = RescaleConfig::new(self.tightness, p)?;
        Ok(if self.no_scaling { r.disabled() } else { r })
    }

    pub fn optim(&self, default_lr: f64) -> OptimConfig {
        OptimConfig {
            kind: self.optimizer,
            lr: self.lr.unwrap_or(default_lr),
            betas: (self.beta1, self.beta2),
            eps: self.eps,
            weight_decay: self.weight_decay,
            momentum: self.momentum,
            curvature_lr_scale: self.curvature_lr_scale,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            naive: self.naive_curvature_optim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_blank_lines() {
        let c = Config::from_text("# run\nseed = 7\n\nprecision = f64  # trailing\nlr=0.01\nfixed_curve = true\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.precision, Dtype::F64);
        assert_eq!(c.lr, Some(0.01));
        assert!(c.fixed_curve);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let e = Config::from_text("sede = 1").unwrap_err();
        assert!(format!("{e:#}").contains("unknown config key `sede`"));
    }

    #[test]
    fn malformed_lines_and_values_are_errors() {
        assert!(Config::from_text("seed 1").is_err());
        assert!(Config::from_text("seed = -1").is_err());
        assert!(Config::from_text("lhier = maybe").is_err());
        assert!(Config::from_text("tightness = 0").is_err());
    }

    #[test]
    fn optimizer_config_follows_keys() {
        let c = Config::from_text("optimizer = radam\nclip_norm = 0\nnaive_curvature_optim = yes").unwrap();
        let o = c.optim(0.05);
        assert_eq!(o.kind, OptimKind::Radam);
        assert_eq!(o.lr, 0.05);
        assert_eq!(o.clip_norm, None);
        assert!(o.naive);
    }

    #[test]
    fn no_scaling_disables_rescale() {
        let c = Config::from_text("no_scaling = true").unwrap();
        assert!(!c.rescale_for::<f32>().unwrap().enabled);
    }
}
