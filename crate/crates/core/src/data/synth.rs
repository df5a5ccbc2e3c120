//! Synthetic paired appearance/event dataset.
//!
//! Each class is a geometric glyph. An instance renders the glyph with
//! jittered position and size: the appearance sample is the clean static
//! image, and the event sample comes from sliding the same glyph along a
//! random direction and emitting brightness-change events between
//! micro-frames, plus a sprinkle of salt noise. Appearance carries clean
//! shape identity, events carry the same identity smeared over time, which
//! is exactly the gap the mixing curriculum is meant to bridge.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encode::{encode_appearance, integrate_events, Event};
use super::format::save_sample;
use super::FrameSequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub classes: usize,
    /// files per class, split evenly between the two modalities
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub time_steps: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::BadField("classes"));
        }
        if self.per_class < 4 || self.per_class % 2 != 0 {
            return Err(Error::BadField("per_class"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::BadField("size"));
        }
        if self.time_steps < 2 {
            return Err(Error::BadField("time_steps"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSummary {
    pub train_files: usize,
    pub test_files: usize,
}

/// Peak brightness of rendered glyphs, as a fraction of full scale.
const GLYPH_LEVEL: f64 = 0.8;

/// Interior brightness relative to the contour peak. Moving flat interiors
/// emit no events, so this mass exists only in the appearance view: it sets
/// the width of the modality gap without touching edge correspondence.
const INTERIOR_LEVEL: f64 = 0.15;

/// Probability that a genuine brightness-change event survives the sensor.
const EVENT_KEEP_PROB: f64 = 0.5;

/// Soft-edged brightness of one glyph at a subpixel position: a bright
/// contour over a fainter filled interior.
///
/// The contour dominates because the event stream sees moving edges; a
/// purely filled rendering would ask the network to relate interiors to
/// outlines, which a trunk this small cannot do.
fn render(class: usize, h: usize, w: usize, cx: f64, cy: f64, r: f64) -> Vec<f64> {
    let soft = 1.2;
    let scale = 1.0 - 0.15 * (class / 6) as f64;
    let r = r * scale;
    let mut img = vec![0.0f64; h * w];
    for py in 0..h {
        for px in 0..w {
            let dx = px as f64 - cx;
            let dy = py as f64 - cy;
            let (a, b) = (dx.abs(), dy.abs());
            let cheb = a.max(b);
            let rad = (dx * dx + dy * dy).sqrt();
            // signed distance to the glyph boundary, negative inside
            let d = match class % 6 {
                0 => cheb - r,
                1 => (cheb - 0.75 * r).abs() - 0.25 * r,
                2 => rad - r,
                3 => (rad - 0.75 * r).abs() - 0.25 * r,
                4 => (a - 0.33 * r).max(b - r).min((a - r).max(b - 0.33 * r)),
                _ => {
                    let bar1 = ((dx - dy).abs() / std::f64::consts::SQRT_2 - 0.3 * r).max(cheb - r);
                    let bar2 = ((dx + dy).abs() / std::f64::consts::SQRT_2 - 0.3 * r).max(cheb - r);
                    bar1.min(bar2)
                }
            };
            let contour = (1.0 - 2.0 * d.abs() / soft).clamp(0.0, 1.0);
            let fill = if d < 0.0 { INTERIOR_LEVEL } else { 0.0 };
            img[py * w + px] = contour.max(fill);
        }
    }
    img
}

/// One paired instance: (appearance, event), same class and glyph jitter.
fn make_pair<R: Rng>(
    class: usize,
    h: usize,
    w: usize,
    t: usize,
    rng: &mut R,
) -> Result<(FrameSequence, FrameSequence)> {
    let min_dim = h.min(w) as f64;
    let r = min_dim * rng.gen_range(0.20..0.30);
    // mild jitter: enough variety to matter, small enough that a couple of
    // dozen instances per class can still cover it
    let cx = w as f64 * rng.gen_range(0.44..0.56);
    let cy = h as f64 * rng.gen_range(0.44..0.56);

    let start = render(class, h, w, cx, cy, r);
    // glyphs render at partial brightness so the dense static frames carry
    // roughly the same total drive as the sparse event histograms; a shared
    // trunk with fixed thresholds gets one operating point, not two
    let rgb: Vec<u8> = start
        .iter()
        .map(|&v| (v * GLYPH_LEVEL * 255.0).round() as u8)
        .flat_map(|g| [g, g, g])
        .collect();
    let appearance = encode_appearance(&rgb, h, w, t, class as u32)?;

    let micro = 4 * t;
    let drift = min_dim * rng.gen_range(0.18..0.30);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (vx, vy) = (
        angle.cos() * drift / micro as f64,
        angle.sin() * drift / micro as f64,
    );
    let mut events: Vec<Event> = Vec::new();
    let mut prev = start;
    for m in 1..=micro {
        let cur = render(
            class,
            h,
            w,
            cx + vx * m as f64,
            cy + vy * m as f64,
            r,
        );
        for py in 0..h {
            for px in 0..w {
                let delta = cur[py * w + px] - prev[py * w + px];
                // a flaky sensor: most genuine edge crossings are dropped,
                // so any single event sample is a thin, unreliable sketch
                if delta.abs() > 0.08 && rng.gen_bool(EVENT_KEEP_PROB) {
                    events.push(Event {
                        ts: m as f64,
                        x: px as u16,
                        y: py as u16,
                        polarity: delta > 0.0,
                    });
                }
            }
        }
        prev = cur;
    }
    // salt noise on top: the event modality is deliberately impoverished so
    // shape identity is hard to read from events alone, while the paired
    // appearance sample stays clean; that asymmetry is the transfer setup
    let noise = (h * w / 2).max(1);
    for _ in 0..noise {
        events.push(Event {
            ts: rng.gen_range(0.0..=micro as f64),
            x: rng.gen_range(0..w as u16),
            y: rng.gen_range(0..h as u16),
            polarity: rng.gen_bool(0.5),
        });
    }
    events.sort_by(|a, b| a.ts.partial_cmp(&b.ts).unwrap());
    let event_seq = integrate_events(&events, t, h, w, class as u32)?;
    Ok((appearance, event_seq))
}

/// Generate the dataset under `out/train` and `out/test` with a per-class
/// 70/30 instance split (at least one instance on each side).
pub fn write_synth_dataset(out: &Path, config: &SynthConfig) -> Result<SynthSummary> {
    config.validate()?;
    let train_dir = out.join("train");
    let test_dir = out.join("test");
    std::fs::create_dir_all(&train_dir)?;
    std::fs::create_dir_all(&test_dir)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut summary = SynthSummary {
        train_files: 0,
        test_files: 0,
    };
    let instances = config.per_class / 2;
    let train_k = ((instances as f64 * 0.7).floor() as usize).max(1);
    for class in 0..config.classes {
        for idx in 0..instances {
            let (appearance, event) = make_pair(
                class,
                config.height,
                config.width,
                config.time_steps,
                &mut rng,
            )?;
            let (dir, counter) = if idx < train_k {
                (&train_dir, &mut summary.train_files)
            } else {
                (&test_dir, &mut summary.test_files)
            };
            save_sample(&dir.join(format!("c{class:03}_i{idx:04}_a.tms")), &appearance)?;
            save_sample(&dir.join(format!("c{class:03}_i{idx:04}_e.tms")), &event)?;
            *counter += 2;
        }
    }
    Ok(summary)
}
