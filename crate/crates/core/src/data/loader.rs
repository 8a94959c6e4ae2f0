//! In-memory sample sets and mini-batch production.
//!
//! Batches are assembled on a producer thread (per-sample work in parallel)
//! and handed to the consumer through a bounded queue. Augmentation draws
//! from a stream derived from `(seed, epoch, sample index)`, so results do
//! not depend on scheduling.

use std::sync::mpsc::sync_channel;

use rayon::prelude::*;

use super::augment::{augment, AugmentationSpec};
use super::dataset::{DatasetIndex, Entry};
use super::image::{decode_image, normalize, resize, Image};
use crate::rng::{label_key, SeededRng};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Batches buffered ahead of the consumer.
const PREFETCH: usize = 2;

/// Decoded, resized images with their labels.
#[derive(Clone, Debug)]
pub struct SampleSet {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub paths: Vec<String>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The whole set as a single normalized batch, in order.
    pub fn tensor(&self) -> Result<Tensor> {
        normalize(&self.images.iter().collect::<Vec<_>>())
    }
}

/// Decodes and resizes `entries` to `height × width`, in parallel.
pub fn load_entries(index: &DatasetIndex, entries: &[&Entry], height: usize, width: usize) -> Result<SampleSet> {
    let images = entries
        .par_iter()
        .map(|e| resize(&decode_image(&index.path_of(e))?, height, width))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleSet {
        images,
        labels: entries.iter().map(|e| e.label).collect(),
        paths: entries.iter().map(|e| e.path.clone()).collect(),
    })
}

#[derive(Debug)]
pub struct Batch {
    /// Normalized `[B, 3, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Positions in the sample set.
    pub indices: Vec<usize>,
}

/// Visiting order for one epoch: a seeded permutation, or identity.
pub fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        SeededRng::derived(seed, &[label_key("shuffle"), epoch as u64]).shuffle(&mut order);
    }
    order
}

fn build_batch(
    set: &SampleSet,
    idx: &[usize],
    spec: Option<&AugmentationSpec>,
    seed: u64,
    epoch: usize,
) -> Result<Batch> {
    let images = idx
        .par_iter()
        .map(|&i| match spec {
            Some(spec) => {
                let mut rng = SeededRng::derived(seed, &[label_key("augment"), epoch as u64, i as u64]);
                augment(&set.images[i], spec, &mut rng)
            }
            None => Ok(set.images[i].clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        images: normalize(&images.iter().collect::<Vec<_>>())?,
        labels: idx.iter().map(|&i| set.labels[i]).collect(),
        indices: idx.to_vec(),
    })
}

/// Feeds `consume` the batches of `order` in sequence. The last batch may
/// be short. Stops at the first error from either side.
pub fn for_each_batch<F>(
    set: &SampleSet,
    order: &[usize],
    batch_size: usize,
    augmentation: Option<&AugmentationSpec>,
    seed: u64,
    epoch: usize,
    mut consume: F,
) -> Result<()>
where
    F: FnMut(Batch) -> Result<()>,
{
    if batch_size == 0 {
        return Err(Error::arg("batch_size must be positive"));
    }
    if let Some(spec) = augmentation {
        spec.validate()?;
    }
    std::thread::scope(|scope| {
        let (tx, rx) = sync_channel::<Result<Batch>>(PREFETCH);
        scope.spawn(move || {
            for chunk in order.chunks(batch_size) {
                if tx.send(build_batch(set, chunk, augmentation, seed, epoch)).is_err() {
                    break;
                }
            }
        });
        for batch in rx {
            consume(batch?)?;
        }
        Ok(())
    })
}
