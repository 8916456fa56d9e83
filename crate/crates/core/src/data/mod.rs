//! Datasets, loaders and batch iteration.

mod augment;
mod csv;
mod idx;
mod synth;

pub use augment::{augment_batch, AugmentPolicy};
pub use csv::{read_csv, write_csv};
pub use idx::{load_idx, load_idx_dataset, parse_idx, write_idx, IdxArray};
pub use synth::{synth_blobs, synth_images, synth_spirals, synth_textures, TextureTask};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Per-channel (or per-feature, for flat inputs) affine normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Examples `0..train_len` form the train split, the rest the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Vec<usize>,
    pub num_classes: usize,
    pub train_len: usize,
    pub norm: Option<Normalization>,
}

/// A borrowed split.
#[derive(Clone, Copy, Debug)]
pub struct Split<'a> {
    pub dataset: &'a Dataset,
    pub start: usize,
    pub end: usize,
}

impl Split<'_> {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn inputs(&self) -> Tensor {
        self.dataset.inputs.slice_batch(self.start, self.end)
    }

    pub fn targets(&self) -> &[usize] {
        &self.dataset.targets[self.start..self.end]
    }

    /// Examples by index within the split.
    pub fn gather(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let abs: Vec<usize> = rows.iter().map(|r| self.start + r).collect();
        let y = abs.iter().map(|&r| self.dataset.targets[r]).collect();
        (self.dataset.inputs.gather_batch(&abs), y)
    }

    /// Consecutive chunks of at most `size` examples, in stored order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = (Tensor, Vec<usize>)> + '_ {
        let size = size.max(1);
        (self.start..self.end).step_by(size).map(move |s| {
            let e = (s + size).min(self.end);
            (self.dataset.inputs.slice_batch(s, e), self.dataset.targets[s..e].to_vec())
        })
    }
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Vec<usize>, num_classes: usize, train_len: usize) -> Result<Self> {
        if inputs.rank() < 2 || inputs.batch() != targets.len() {
            return Err(Error::Data(format!(
                "inputs {:?} do not match {} targets",
                inputs.shape(),
                targets.len()
            )));
        }
        if targets.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= num_classes) {
            return Err(Error::Data(format!("target {t} out of range for {num_classes} classes")));
        }
        if train_len == 0 || train_len > targets.len() {
            return Err(Error::Data(format!("train split of {train_len} out of {} examples", targets.len())));
        }
        Ok(Dataset { inputs, targets, num_classes, train_len, norm: None })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Per-example shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn train(&self) -> Split<'_> {
        Split { dataset: self, start: 0, end: self.train_len }
    }

    pub fn test(&self) -> Split<'_> {
        Split { dataset: self, start: self.train_len, end: self.len() }
    }

    fn channels(&self) -> (usize, usize) {
        let s = self.sample_shape();
        (s[0], s[1..].iter().product())
    }

    /// Per-channel mean and population standard deviation of the train split.
    pub fn train_stats(&self) -> Normalization {
        let (c, inner) = self.channels();
        let per = c * inner;
        let n = (self.train_len * inner) as f64;
        let data = self.inputs.data();
        let mut mean = vec![0.0; c];
        for ex in 0..self.train_len {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += data[ex * per + ch * inner..ex * per + (ch + 1) * inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; c];
        for ex in 0..self.train_len {
            for ch in 0..c {
                let row = &data[ex * per + ch * inner..ex * per + (ch + 1) * inner];
                var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt()).collect();
        Normalization { mean, std }
    }

    /// Standardizes every example with train-split statistics. Constant
    /// channels are centred but not scaled.
    pub fn normalize(&mut self) {
        let stats = self.train_stats();
        self.apply_normalization(&stats);
        self.norm = Some(stats);
    }

    pub fn apply_normalization(&mut self, stats: &Normalization) {
        let (c, inner) = self.channels();
        for (i, v) in self.inputs.data_mut().iter_mut().enumerate() {
            let ch = (i / inner) % c;
            let s = if stats.std[ch] > 0.0 { stats.std[ch] } else { 1.0 };
            *v = (*v - stats.mean[ch]) / s;
        }
    }

    /// Keeps at most `train` and `test` examples of each split.
    pub fn truncated(&self, train: usize, test: usize) -> Result<Dataset> {
        let train = train.min(self.train_len);
        let test = test.min(self.len() - self.train_len);
        let rows: Vec<usize> = (0..train).chain(self.train_len..self.train_len + test).collect();
        let mut d = Dataset::new(
            self.inputs.gather_batch(&rows),
            rows.iter().map(|&r| self.targets[r]).collect(),
            self.num_classes,
            train,
        )?;
        d.norm = self.norm.clone();
        Ok(d)
    }
}

/// Shuffled fixed-size batches over the train split. The permutation for each
/// epoch comes from the `"batches"` stream of the root seed, so every strategy
/// trained from the same seed sees the same batches in the same order.
pub struct BatchIter<'a> {
    split: Split<'a>,
    batch_size: usize,
    rng: seed::Rng,
    order: Vec<usize>,
    cursor: usize,
    augment: AugmentPolicy,
    aug_rng: seed::Rng,
}

impl<'a> BatchIter<'a> {
    pub fn new(ds: &'a Dataset, batch_size: usize, seed: u64, augment: AugmentPolicy) -> Result<Self> {
        if batch_size == 0 || batch_size > ds.train_len {
            return Err(Error::Config(format!(
                "batch size {batch_size} must be in 1..={} (train split size)",
                ds.train_len
            )));
        }
        Ok(BatchIter {
            split: ds.train(),
            batch_size,
            rng: seed::rng(seed, "batches"),
            order: Vec::new(),
            cursor: usize::MAX,
            augment,
            aug_rng: seed::rng(seed, "augment"),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.split.len() / self.batch_size
    }
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor, Vec<usize>);

    /// Never ends; a new permutation starts when fewer than a full batch remain.
    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor == usize::MAX || self.cursor + self.batch_size > self.order.len() {
            self.order = (0..self.split.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let rows = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        let (x, y) = self.split.gather(rows);
        Some((augment_batch(&x, &self.augment, &mut self.aug_rng), y))
    }
}
