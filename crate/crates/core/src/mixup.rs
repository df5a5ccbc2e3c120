//! Time-step sequence mixing with a truncated-geometric replacement point.
//!
//! A mixed sample starts as the appearance sequence and switches to the
//! event sequence from step `t*` onward. `t*` is drawn by scanning steps
//! `1..=T` and stopping at the first uniform draw below `p`; if no step
//! succeeds the sample stays pure appearance (`t* = T + 1`). The solver
//! inverts the closed-form expectation of the replaced-step count so a
//! requested replacement ratio can be hit on average.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// What the replacement-count expectation averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpectationMode {
    /// all draws, including the no-truncation outcome (default)
    Unconditional,
    /// only draws where truncation happened (`t* <= T`)
    Conditional,
}

/// How the per-batch replacement ratio evolves over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixupPolicy {
    /// deterministic cut at the base ratio, no randomness
    Fixed,
    /// stochastic cut at the base ratio
    Tsm,
    /// stochastic, ratio ramps linearly from 0 to 1 over the epochs
    Linear,
    /// stochastic, ratio ramps as the cube of training progress
    Nonlinear,
}

impl std::str::FromStr for MixupPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(MixupPolicy::Fixed),
            "tsm" => Ok(MixupPolicy::Tsm),
            "linear" => Ok(MixupPolicy::Linear),
            "nonlinear" => Ok(MixupPolicy::Nonlinear),
            other => Err(Error::BadPolicy(other.to_string())),
        }
    }
}

impl std::str::FromStr for ExpectationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unconditional" => Ok(ExpectationMode::Unconditional),
            "conditional" => Ok(ExpectationMode::Conditional),
            other => Err(Error::BadPolicy(other.to_string())),
        }
    }
}

impl std::fmt::Display for ExpectationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExpectationMode::Unconditional => "unconditional",
            ExpectationMode::Conditional => "conditional",
        };
        write!(f, "{s}")
    }
}

impl std::fmt::Display for MixupPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MixupPolicy::Fixed => "fixed",
            MixupPolicy::Tsm => "tsm",
            MixupPolicy::Linear => "linear",
            MixupPolicy::Nonlinear => "nonlinear",
        };
        write!(f, "{s}")
    }
}

/// Expected number of replaced (event) steps for truncation probability `p`
/// over `t` steps.
///
/// The count is `t + 1 - t*`, and `t*` follows a geometric law truncated at
/// `t + 1`. Unconditionally `E = t - (1-p)(1-(1-p)^t)/p`; conditioning on
/// truncation divides by `1 - (1-p)^t` and tends to `(t+1)/2` as `p -> 0`.
pub fn expected_replaced(p: f64, t: usize, mode: ExpectationMode) -> f64 {
    assert!(t >= 1, "need at least one step");
    assert!((0.0..=1.0).contains(&p), "p out of range");
    let tf = t as f64;
    if p == 1.0 {
        return tf;
    }
    // 1 - (1-p)^t, stable for small p
    let hit_mass = -(tf * (-p).ln_1p()).exp_m1();
    match mode {
        ExpectationMode::Unconditional => {
            if p == 0.0 {
                0.0
            } else {
                tf - (1.0 - p) * hit_mass / p
            }
        }
        ExpectationMode::Conditional => {
            if p == 0.0 {
                (tf + 1.0) / 2.0
            } else {
                (tf - (1.0 - p) * hit_mass / p) / hit_mass
            }
        }
    }
}

/// Invert [`expected_replaced`] by bisection: find `p` so the expected
/// replaced fraction matches `ratio`.
///
/// Conditional expectations cannot fall below `(t+1)/(2t)`, so smaller
/// ratios are rejected as infeasible.
pub fn solve_replacement_prob(t: usize, ratio: f64, mode: ExpectationMode) -> Result<f64> {
    if t < 1 {
        return Err(Error::BadField("t"));
    }
    if !ratio.is_finite() || !(0.0..=1.0).contains(&ratio) {
        return Err(Error::BadField("ratio"));
    }
    if mode == ExpectationMode::Conditional {
        let min_ratio = (t as f64 + 1.0) / (2.0 * t as f64);
        if ratio < min_ratio {
            return Err(Error::Infeasible { min_ratio });
        }
    }
    let tf = t as f64;
    let f = |p: f64| expected_replaced(p, t, mode) / tf - ratio;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    if f(lo).abs() < 1e-12 {
        return Ok(lo);
    }
    if f(hi).abs() < 1e-12 {
        return Ok(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() < 1e-12 {
            return Ok(mid);
        }
        if fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Draw the replacement point: scan steps `1..=t` in order and stop at the
/// first uniform draw below `p`; return `t + 1` when none succeeds.
pub fn sample_replacement_point<R: Rng>(p: f64, t: usize, rng: &mut R) -> Result<usize> {
    if t < 1 {
        return Err(Error::BadField("t"));
    }
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(Error::BadField("p"));
    }
    for step in 1..=t {
        if rng.gen::<f64>() < p {
            return Ok(step);
        }
    }
    Ok(t + 1)
}

/// Deterministic replacement point hitting the ratio exactly (rounded down):
/// replace the last `floor(t * ratio)` steps.
pub fn fixed_replacement_point(t: usize, ratio: f64) -> Result<usize> {
    if t < 1 {
        return Err(Error::BadField("t"));
    }
    if !ratio.is_finite() || !(0.0..=1.0).contains(&ratio) {
        return Err(Error::BadField("ratio"));
    }
    let replaced = (t as f64 * ratio).floor() as usize;
    Ok(t + 1 - replaced.min(t))
}

/// Target replacement ratio for one batch under a schedule.
///
/// `epoch` and `batch_idx` are zero-based; `total_epochs` and
/// `batches_per_epoch` are the respective counts.
pub fn schedule_ratio(
    policy: MixupPolicy,
    base_ratio: f64,
    epoch: usize,
    total_epochs: usize,
    batch_idx: usize,
    batches_per_epoch: usize,
) -> Result<f64> {
    if total_epochs == 0 || epoch >= total_epochs {
        return Err(Error::BadField("epoch"));
    }
    if batches_per_epoch == 0 || batch_idx >= batches_per_epoch {
        return Err(Error::BadField("batch_idx"));
    }
    Ok(match policy {
        MixupPolicy::Fixed | MixupPolicy::Tsm => base_ratio,
        MixupPolicy::Linear => epoch as f64 / total_epochs as f64,
        MixupPolicy::Nonlinear => {
            let progress = (batch_idx as f64 + epoch as f64 * batches_per_epoch as f64)
                / (total_epochs as f64 * batches_per_epoch as f64);
            progress.powi(3)
        }
    })
}

/// One mixed training sample plus its mixing supervision targets.
pub struct MixedSample {
    /// `[T, C, H, W]` frames: appearance before `t*`, event from `t*` on
    pub frames: Tensor<f32>,
    /// per-step source label, 1 for appearance steps, 0 for event steps
    pub step_labels: Vec<f32>,
    /// fraction of appearance steps, `(t* - 1) / T`
    pub mix_fraction: f32,
}

/// Splice two `[T, C, H, W]` sequences at `t_star`.
pub fn mix_sequences(
    appearance: &Tensor<f32>,
    event: &Tensor<f32>,
    t_star: usize,
) -> Result<MixedSample> {
    if appearance.shape != event.shape {
        return Err(Error::ShapeMismatch {
            op: "mix_sequences",
            lhs: appearance.shape.clone(),
            rhs: event.shape.clone(),
        });
    }
    if appearance.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: "mix_sequences",
            lhs: appearance.shape.clone(),
            rhs: vec![0, 0, 0, 0],
        });
    }
    let t_len = appearance.shape[0];
    if t_len == 0 {
        return Err(Error::EmptyInput("mix_sequences"));
    }
    if t_star < 1 || t_star > t_len + 1 {
        return Err(Error::BadReplacementPoint { t_star, t_len });
    }
    let frame_len = appearance.numel() / t_len;
    let keep = t_star - 1;
    let mut data = Vec::with_capacity(appearance.numel());
    data.extend_from_slice(&appearance.data[..keep * frame_len]);
    data.extend_from_slice(&event.data[keep * frame_len..]);
    let step_labels: Vec<f32> = (0..t_len).map(|i| if i < keep { 1.0 } else { 0.0 }).collect();
    let mix_fraction = keep as f32 / t_len as f32;
    Ok(MixedSample {
        frames: Tensor::new(appearance.shape.clone(), data),
        step_labels,
        mix_fraction,
    })
}
