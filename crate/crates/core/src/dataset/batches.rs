use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::PatientScan;
use crate::imaging::{preprocess_slice, PreprocessConfig};
use crate::label::Label;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSlice {
    pub path: PathBuf,
    pub patient_id: String,
    pub label: Label,
}

/// Every slice of every labeled patient, in scan order.
pub fn labeled_slices(scans: &[PatientScan]) -> Vec<LabeledSlice> {
    scans
        .iter()
        .filter_map(|s| s.label.map(|l| (s, l)))
        .flat_map(|(s, label)| {
            s.slice_paths.iter().map(move |p| LabeledSlice {
                path: p.clone(),
                patient_id: s.patient_id.clone(),
                label,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<Tensor<f32>>,
    /// Class indices (see [`Label::class_index`]).
    pub labels: Vec<usize>,
    pub paths: Vec<PathBuf>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Slice-level mini-batches, decoded lazily. Slices that fail to decode are
/// logged, counted in [`BatchIter::skipped`] and left out of their batch.
pub struct BatchIter<'a> {
    slices: &'a [LabeledSlice],
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    preprocess: PreprocessConfig,
    skipped: usize,
}

impl BatchIter<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

/// Panics if `batch_size` is zero.
pub fn iterate_batches<'a>(
    slices: &'a [LabeledSlice],
    batch_size: usize,
    shuffle_seed: Option<u64>,
    preprocess: PreprocessConfig,
) -> BatchIter<'a> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..slices.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    BatchIter {
        slices,
        order,
        pos: 0,
        batch_size,
        preprocess,
        skipped: 0,
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let preprocess = self.preprocess;
        let decoded: Vec<_> = idx
            .par_iter()
            .map(|&i| {
                let s = &self.slices[i];
                (s, preprocess_slice(&s.path, &preprocess))
            })
            .collect();
        let mut batch = Batch {
            images: Vec::with_capacity(idx.len()),
            labels: Vec::with_capacity(idx.len()),
            paths: Vec::with_capacity(idx.len()),
        };
        for (s, result) in decoded {
            match result {
                Ok(t) => {
                    batch.images.push(t);
                    batch.labels.push(s.label.class_index());
                    batch.paths.push(s.path.clone());
                }
                Err(e) => {
                    log::warn!("skipping slice: {e}");
                    self.skipped += 1;
                }
            }
        }
        Some(batch)
    }
}
