//! Turning raw appearance images and event streams into frame sequences.

use super::{FrameSequence, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-bin event count saturation; counts are clipped here then divided by
/// the same constant so every cell lands in `[0, 1]`. Kept low so that the
/// sparse event histograms drive the network with strengths comparable to
/// dense static frames: two to three coincident events saturate a cell.
pub const KAPPA: f32 = 2.5;

/// A single sensor event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    /// timestamp in arbitrary units, non-negative
    pub ts: f64,
    pub x: u16,
    pub y: u16,
    /// true for a brightness increase
    pub polarity: bool,
}

/// Replicate one `[C, H, W]` frame into a `[T, C, H, W]` sequence.
pub fn tile_static_over_time(frame: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
    if frame.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "tile_static_over_time",
            lhs: frame.shape.clone(),
            rhs: vec![0, 0, 0],
        });
    }
    if t == 0 {
        return Err(Error::BadField("t"));
    }
    let mut data = Vec::with_capacity(frame.numel() * t);
    for _ in 0..t {
        data.extend_from_slice(&frame.data);
    }
    let mut shape = vec![t];
    shape.extend_from_slice(&frame.shape);
    Ok(Tensor::new(shape, data))
}

/// Encode an RGB8 image as a static two-channel value-intensity sequence.
///
/// Each pixel becomes `max(r, g, b) / 255`, written identically to both
/// channels so the appearance tensor matches the event tensor's layout;
/// the single frame is then repeated `t` times.
pub fn encode_appearance(rgb: &[u8], h: usize, w: usize, t: usize, class: u32) -> Result<FrameSequence> {
    if h == 0 || w == 0 {
        return Err(Error::BadField("image size"));
    }
    if rgb.len() != h * w * 3 {
        return Err(Error::ShapeMismatch {
            op: "encode_appearance",
            lhs: vec![rgb.len()],
            rhs: vec![h * w * 3],
        });
    }
    let mut frame = vec![0.0f32; 2 * h * w];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        let v = px[0].max(px[1]).max(px[2]) as f32 / 255.0;
        frame[i] = v;
        frame[h * w + i] = v;
    }
    let frames = tile_static_over_time(&Tensor::new(vec![2, h, w], frame), t)?;
    Ok(FrameSequence {
        frames,
        class,
        modality: Modality::Appearance,
    })
}

/// Histogram an event stream into a `[T, 2, H, W]` sequence.
///
/// The stream must be sorted by timestamp; the span `[0, t_last]` is cut
/// into `t` equal bins (`bin = floor(ts * t / t_last)`, final-edge events
/// fall into the last bin) and per-cell counts saturate at [`KAPPA`] before
/// normalization. Channel 0 holds positive polarity. An empty stream is a
/// valid all-zero sequence.
pub fn integrate_events(
    events: &[Event],
    t: usize,
    h: usize,
    w: usize,
    class: u32,
) -> Result<FrameSequence> {
    if t == 0 {
        return Err(Error::BadField("t"));
    }
    if h == 0 || w == 0 || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::BadField("frame size"));
    }
    let mut counts = vec![0.0f32; t * 2 * h * w];
    if !events.is_empty() {
        let mut prev = 0.0f64;
        for e in events {
            if !e.ts.is_finite() || e.ts < 0.0 {
                return Err(Error::BadField("timestamp"));
            }
            if e.ts < prev {
                return Err(Error::UnsortedEvents);
            }
            prev = e.ts;
            if (e.x as usize) >= w || (e.y as usize) >= h {
                return Err(Error::EventOutOfBounds {
                    x: e.x,
                    y: e.y,
                    w: w as u16,
                    h: h as u16,
                });
            }
        }
        let t_last = events[events.len() - 1].ts;
        for e in events {
            let bin = if t_last == 0.0 {
                0
            } else {
                (((e.ts * t as f64) / t_last).floor() as usize).min(t - 1)
            };
            let ch = if e.polarity { 0 } else { 1 };
            let idx = ((bin * 2 + ch) * h + e.y as usize) * w + e.x as usize;
            counts[idx] += 1.0;
        }
        for v in &mut counts {
            *v = v.min(KAPPA) / KAPPA;
        }
    }
    Ok(FrameSequence {
        frames: Tensor::new(vec![t, 2, h, w], counts),
        class,
        modality: Modality::Event,
    })
}
