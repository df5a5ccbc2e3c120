//! Dataset loading and paired batch assembly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use super::format::load_sample;
use super::{FrameSequence, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// All samples of one split, indexed for class-paired lookups.
pub struct Dataset {
    pub samples: Vec<FrameSequence>,
    /// event-sample indices in load order
    pub event_indices: Vec<usize>,
    /// appearance-sample indices per class
    pub appearance_by_class: BTreeMap<u32, Vec<usize>>,
    pub n_classes: usize,
    /// common (T, C, H, W)
    pub dims: (usize, usize, usize, usize),
}

/// Load every `.tms` file under `dir` (sorted by name for stable order).
///
/// All samples must share one shape, class ids must be contiguous from 0,
/// and every class needs at least one sample of each modality.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "tms"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyInput("dataset directory"));
    }
    let mut samples = Vec::with_capacity(paths.len());
    for p in &paths {
        samples.push(load_sample(p)?);
    }
    let dims = samples[0].dims();
    for s in &samples {
        if s.dims() != dims {
            return Err(Error::ShapeMismatch {
                op: "load_dataset",
                lhs: s.frames.shape.clone(),
                rhs: samples[0].frames.shape.clone(),
            });
        }
    }
    let mut event_indices = Vec::new();
    let mut appearance_by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut event_classes: BTreeMap<u32, usize> = BTreeMap::new();
    let mut max_class = 0u32;
    for (i, s) in samples.iter().enumerate() {
        max_class = max_class.max(s.class);
        match s.modality {
            Modality::Event => {
                event_indices.push(i);
                *event_classes.entry(s.class).or_insert(0) += 1;
            }
            Modality::Appearance => appearance_by_class.entry(s.class).or_default().push(i),
        }
    }
    let n_classes = max_class as usize + 1;
    for class in 0..n_classes as u32 {
        let has_event = event_classes.contains_key(&class);
        let has_appearance = appearance_by_class.contains_key(&class);
        if !has_event || !has_appearance {
            return Err(Error::UnpairedClass { class });
        }
    }
    Ok(Dataset {
        samples,
        event_indices,
        appearance_by_class,
        n_classes,
        dims,
    })
}

impl Dataset {
    /// Pick a same-class appearance sample for an event sample.
    pub fn pair_for<R: Rng>(&self, event_idx: usize, rng: &mut R) -> usize {
        let class = self.samples[event_idx].class;
        let pool = &self.appearance_by_class[&class];
        pool[rng.gen_range(0..pool.len())]
    }
}

/// One epoch of event-driven batches: every event sample appears exactly
/// once (shuffled), each paired with a random same-class appearance sample.
pub fn make_pair_batches<R: Rng>(
    dataset: &Dataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<(usize, usize)>>> {
    if batch_size == 0 {
        return Err(Error::BadField("batch_size"));
    }
    let mut order = dataset.event_indices.clone();
    order.shuffle(rng);
    let mut batches = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut batch = Vec::with_capacity(chunk.len());
        for &e in chunk {
            let a = dataset.pair_for(e, rng);
            debug_assert_eq!(dataset.samples[a].class, dataset.samples[e].class);
            batch.push((e, a));
        }
        batches.push(batch);
    }
    Ok(batches)
}

/// Stack the step-`t` frame of several `[T, C, H, W]` sequences into one
/// `[N, C, H, W]` tensor.
pub fn stack_step(seqs: &[&Tensor<f32>], t: usize) -> Result<Tensor<f32>> {
    if seqs.is_empty() {
        return Err(Error::EmptyInput("stack_step"));
    }
    let shape = &seqs[0].shape;
    if shape.len() != 4 || t >= shape[0] {
        return Err(Error::BadAxis {
            axis: t,
            rank: shape.first().copied().unwrap_or(0),
        });
    }
    let frame_len: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(seqs.len() * frame_len);
    for s in seqs {
        if s.shape != *shape {
            return Err(Error::ShapeMismatch {
                op: "stack_step",
                lhs: s.shape.clone(),
                rhs: shape.clone(),
            });
        }
        data.extend_from_slice(&s.data[t * frame_len..(t + 1) * frame_len]);
    }
    Ok(Tensor::new(
        vec![seqs.len(), shape[1], shape[2], shape[3]],
        data,
    ))
}
