use rand::seq::SliceRandom;

use super::Dataset;
use crate::autodiff::{Mask, Tensor};
use crate::domain::Modality;
use crate::rng;

/// Padded per-modality sequences for a group of samples. Inputs are
/// `[b × len × dim]` with `len` the longest true length in the batch; padded
/// positions are zero-filled and marked invalid in `masks` (`[b × len]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBatch {
    pub inputs: [Tensor; 3],
    pub masks: [Mask; 3],
    /// `[b × k]`
    pub labels: Tensor,
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
}

impl ModalityBatch {
    pub fn from_dataset(ds: &Dataset, indices: &[usize]) -> Self {
        let b = indices.len();
        let build = |m: Modality| {
            let entry = ds.manifest.entry(m);
            let lengths: Vec<usize> = indices.iter().map(|&i| ds.length(m, i)).collect();
            let len = lengths.iter().copied().max().unwrap_or(1).max(1);
            let dim = entry.dim;
            let mut data = vec![0.0; b * len * dim];
            for (row, (&i, &l)) in indices.iter().zip(&lengths).enumerate() {
                let src = ds.sample_features(m, i);
                for (dst, &v) in data[row * len * dim..row * len * dim + l * dim].iter_mut().zip(&src[..l * dim]) {
                    *dst = v as f64;
                }
            }
            let tensor = Tensor::new(&[b, len, dim], data).expect("batch shape");
            (tensor, Mask::from_lengths(&lengths, len))
        };
        let [(ti, tm), (ai, am), (vi, vm)] = Modality::ALL.map(build);
        let k = ds.manifest.labels.dim;
        let labels = indices.iter().flat_map(|&i| ds.sample_labels(i).iter().map(|&v| v as f64)).collect();
        ModalityBatch {
            inputs: [ti, ai, vi],
            masks: [tm, am, vm],
            labels: Tensor::new(&[b, k], labels).expect("label shape"),
            indices: indices.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn input(&self, m: Modality) -> &Tensor {
        &self.inputs[m.index()]
    }

    pub fn mask(&self, m: Modality) -> &Mask {
        &self.masks[m.index()]
    }
}

/// Partition `0..n` into batches of `batch_size` (last one partial), in a
/// seeded random order when `shuffle` is set.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut rng::stream(seed, rng::STREAM_SHUFFLE));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Lazily materialized batches over a dataset.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    batches: std::vec::IntoIter<Vec<usize>>,
}

impl<'a> BatchIter<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Self {
        BatchIter {
            dataset,
            batches: batch_indices(dataset.len(), batch_size, seed, shuffle).into_iter(),
        }
    }
}

impl Iterator for BatchIter<'_> {
    type Item = ModalityBatch;

    fn next(&mut self) -> Option<ModalityBatch> {
        self.batches.next().map(|idx| ModalityBatch::from_dataset(self.dataset, &idx))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.batches.size_hint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetManifest;
    use crate::domain::Task;

    fn tiny(n: usize) -> Dataset {
        let mut manifest = DatasetManifest::new("tiny", n, Task::Regression, [(3, 2), (2, 1), (4, 1)]);
        manifest.modalities[0].lengths = Some((0..n).map(|i| 1 + i % 3).collect());
        let features = [
            (0..n * 6).map(|v| v as f32 + 1.0).collect(),
            (0..n * 2).map(|v| v as f32).collect(),
            (0..n * 4).map(|v| -(v as f32)).collect(),
        ];
        Dataset::new(manifest, features, (0..n).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn sizes_and_partition() {
        let batches = batch_indices(10, 4, 7, true);
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = batches.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(batches, batch_indices(10, 4, 7, true));
        assert_eq!(batch_indices(5, 2, 0, false), vec![vec![0, 1], vec![2, 3], vec![4]]);
    }

    #[test]
    fn padding_is_zero_and_masked() {
        let ds = tiny(3);
        let b = ModalityBatch::from_dataset(&ds, &[0, 2]);
        let t = b.input(Modality::Text);
        assert_eq!(t.shape(), &[2, 3, 2]);
        // sample 0 has length 1: steps 1.. are padding
        assert_eq!(&t.data()[..6], &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(b.mask(Modality::Text).data(), &[true, false, false, true, true, true]);
        assert_eq!(b.labels.data(), &[0.0, 2.0]);
    }

    #[test]
    fn batch_length_is_longest_true_length() {
        let ds = tiny(3);
        let b = ModalityBatch::from_dataset(&ds, &[0, 1]);
        assert_eq!(b.input(Modality::Text).shape(), &[2, 2, 2]);
        assert_eq!(b.input(Modality::Vision).shape(), &[2, 4, 1]);
    }
}
