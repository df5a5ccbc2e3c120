//! Run configuration: a flat `key=value` file, one entry per line.
//!
//! Blank lines and lines starting with `#` are ignored. Every key maps
//! one-to-one onto a [`TrainConfig`] field; unknown or repeated keys are
//! rejected so silent typos cannot change a run.

use std::collections::HashSet;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::losses::{LossGates, RdaRegularizer};
use crate::mixup::{ExpectationMode, MixupPolicy};
use crate::snn::{Arch, LIFParams};
use crate::tensor::OptimConfig;

/// Everything a training run needs, resolved and validated.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// backbone selection
    pub arch: Arch,
    /// simulation steps per sequence; must match the dataset
    pub t: usize,
    /// base replacement ratio fed to the schedule
    pub r_m: f64,
    /// how the replacement-count expectation is interpreted when solving p
    pub expectation_mode: ExpectationMode,
    /// per-batch ratio schedule
    pub schedule_kind: MixupPolicy,
    /// weight on the alignment term
    pub lambda: f32,
    pub lif: LIFParams,
    /// optimizer choice; `lr` and `momentum` fold into this at parse time
    pub optimizer: OptimConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// directory of paired samples; the only key without a default
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// balancing term used inside the gated alignment loss
    pub rda_regularizer_mode: RdaRegularizer,
    /// loss-arm switches for ablation runs
    pub enable_tsm: bool,
    pub enable_mag: bool,
    pub enable_mrp: bool,
    pub enable_rda: bool,
    /// redraw each pair's replacement point every epoch instead of once
    pub fresh_t_star: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::ScnnSmall,
            t: 6,
            r_m: 0.4,
            expectation_mode: ExpectationMode::Unconditional,
            schedule_kind: MixupPolicy::Tsm,
            lambda: 0.5,
            lif: LIFParams::default(),
            optimizer: OptimConfig::adam(0.001),
            epochs: 30,
            batch_size: 16,
            seed: 1,
            data_dir: PathBuf::new(),
            out_dir: PathBuf::from("runs"),
            rda_regularizer_mode: RdaRegularizer::PerStepCe,
            enable_tsm: true,
            enable_mag: true,
            enable_mrp: true,
            enable_rda: true,
            fresh_t_star: true,
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value for {key}: {value}"))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

impl TrainConfig {
    /// Reads and parses a configuration file.
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parses configuration text; see the module docs for the format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        // Optimizer pieces are folded together after the scan so `lr`,
        // `momentum`, and `optimizer` may appear in any order.
        let mut optimizer = "adam".to_string();
        let mut lr: f32 = 0.001;
        let mut momentum: f32 = 0.9;
        let mut seen: HashSet<String> = HashSet::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value", idx + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate key: {key}")));
            }
            match key {
                "arch" => cfg.arch = value.parse()?,
                "t" => cfg.t = parse_num(key, value)?,
                "r_m" => cfg.r_m = parse_num(key, value)?,
                "expectation_mode" => cfg.expectation_mode = value.parse()?,
                "schedule_kind" => cfg.schedule_kind = value.parse()?,
                "lambda" => cfg.lambda = parse_num(key, value)?,
                "tau" => cfg.lif.tau = parse_num(key, value)?,
                "v_th" => cfg.lif.v_th = parse_num(key, value)?,
                "surrogate_width" => cfg.lif.surrogate_width = parse_num(key, value)?,
                "optimizer" => optimizer = value.to_string(),
                "lr" => lr = parse_num(key, value)?,
                "momentum" => momentum = parse_num(key, value)?,
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "data_dir" => cfg.data_dir = PathBuf::from(value),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "rda_regularizer_mode" => cfg.rda_regularizer_mode = value.parse()?,
                "enable_tsm" => cfg.enable_tsm = parse_bool(key, value)?,
                "enable_mag" => cfg.enable_mag = parse_bool(key, value)?,
                "enable_mrp" => cfg.enable_mrp = parse_bool(key, value)?,
                "enable_rda" => cfg.enable_rda = parse_bool(key, value)?,
                "fresh_t_star" => cfg.fresh_t_star = parse_bool(key, value)?,
                _ => return Err(Error::Config(format!("unknown key: {key}"))),
            }
        }

        if !momentum.is_finite() || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1): {momentum}")));
        }
        cfg.optimizer = match optimizer.as_str() {
            "sgd" => OptimConfig::sgd(lr, momentum),
            "adam" => OptimConfig::adam(lr),
            other => return Err(bad("optimizer", other)),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the value-range invariants; called by [`TrainConfig::parse`]
    /// and again by the trainer so hand-built configs get the same guard.
    pub fn validate(&self) -> Result<()> {
        if !self.r_m.is_finite() || !(0.0..=1.0).contains(&self.r_m) {
            return Err(Error::Config(format!("r_m must be in [0, 1]: {}", self.r_m)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0: {}", self.lambda)));
        }
        if self.t == 0 {
            return Err(Error::Config("t must be >= 1".to_string()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".to_string()));
        }
        if !self.optimizer.lr.is_finite() || self.optimizer.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be > 0: {}", self.optimizer.lr)));
        }
        self.lif.validate()?;
        if !self.enable_tsm && (self.enable_mag || self.enable_mrp || self.enable_rda) {
            return Err(Error::Config(
                "enable_mag, enable_mrp, and enable_rda all need the mixed stream; set enable_tsm = true".to_string(),
            ));
        }
        if self.data_dir.as_os_str().is_empty() {
            return Err(Error::Config("data_dir is required".to_string()));
        }
        Ok(())
    }

    /// The loss-arm switches as the loss composer expects them.
    pub fn gates(&self) -> LossGates {
        LossGates {
            tsm: self.enable_tsm,
            mag: self.enable_mag,
            mrp: self.enable_mrp,
            rda: self.enable_rda,
        }
    }
}
