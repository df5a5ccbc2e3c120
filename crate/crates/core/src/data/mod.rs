//! Frame-sequence data handling: appearance/event encoding, the on-disk
//! sample format, the synthetic paired dataset, and batch assembly.

mod batch;
mod encode;
mod format;
mod synth;

pub use batch::{load_dataset, make_pair_batches, stack_step, Dataset};
pub use encode::{encode_appearance, integrate_events, tile_static_over_time, Event, KAPPA};
pub use format::{load_sample, save_sample, SAMPLE_VERSION};
pub use synth::{write_synth_dataset, SynthConfig, SynthSummary};

use crate::tensor::Tensor;

/// Origin of a recorded sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Event,
    Appearance,
}

impl Modality {
    pub fn to_byte(self) -> u8 {
        match self {
            Modality::Event => 0,
            Modality::Appearance => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Modality> {
        match b {
            0 => Some(Modality::Event),
            1 => Some(Modality::Appearance),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Event => write!(f, "event"),
            Modality::Appearance => write!(f, "appearance"),
        }
    }
}

/// One labeled `[T, C, H, W]` sequence.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Tensor<f32>,
    pub class: u32,
    pub modality: Modality,
}

impl FrameSequence {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = &self.frames.shape;
        (s[0], s[1], s[2], s[3])
    }
}
