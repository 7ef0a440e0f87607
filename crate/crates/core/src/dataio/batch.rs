use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::images::load_image;
use super::index::DatasetIndex;
use crate::error::{Error, Result};
use crate::exec;
use crate::objective::LabelVector;
use crate::tensor::Tensor;

/// A decoded mini-batch. `indices` point into the dataset index.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<LabelVector>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Visiting order for one epoch: a Fisher-Yates shuffle driven by ChaCha8
/// seeded with `seed` on stream `epoch`. Depends on nothing else, so a
/// resumed run reproduces it from `(seed, epoch)` alone.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Sizes of the batches covering `len` samples; the last may be short.
pub fn batch_sizes(len: usize, batch_size: usize) -> Vec<usize> {
    let batch_size = batch_size.max(1);
    (0..len).step_by(batch_size).map(|start| batch_size.min(len - start)).collect()
}

/// Iterates over a dataset in a fixed order, decoding each batch's images in
/// parallel. Emission order is the visiting order regardless of which decode
/// finishes first.
pub struct BatchIter<'a> {
    index: &'a DatasetIndex,
    order: Vec<usize>,
    batch_size: usize,
    image_size: usize,
    cursor: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(index: &'a DatasetIndex, order: Vec<usize>, batch_size: usize, image_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(&bad) = order.iter().find(|&&i| i >= index.len()) {
            return Err(Error::Contract(format!("sample {bad} out of range for {} entries", index.len())));
        }
        Ok(BatchIter {
            index,
            order,
            batch_size,
            image_size,
            cursor: 0,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(load_batch(self.index, indices, self.image_size))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

/// Shuffled batches for training epoch `epoch`.
pub fn batch_iter(
    index: &DatasetIndex,
    batch_size: usize,
    image_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchIter<'_>> {
    BatchIter::new(index, epoch_order(index.len(), seed, epoch), batch_size, image_size)
}

/// Batches in index order, for evaluation.
pub fn ordered_batches(index: &DatasetIndex, batch_size: usize, image_size: usize) -> Result<BatchIter<'_>> {
    BatchIter::new(index, (0..index.len()).collect(), batch_size, image_size)
}

fn load_batch(index: &DatasetIndex, indices: Vec<usize>, size: usize) -> Result<Batch> {
    let entries = index.entries();
    let decoded = exec::map(indices.len(), |k| load_image(&entries[indices[k]].image, size));
    let mut data = Vec::with_capacity(indices.len() * size * size * 3);
    for image in decoded {
        data.extend_from_slice(image?.data());
    }
    Ok(Batch {
        images: Tensor::new(vec![indices.len(), size, size, 3], data)?,
        labels: indices.iter().map(|&i| entries[i].labels.clone()).collect(),
        indices,
    })
}
