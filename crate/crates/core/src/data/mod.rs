//! Datasets, deterministic splits, normalization and batching.

mod io;
mod synthetic;

pub use io::{import_csv, load_dataset, read_dataset, write_dataset, DATASET_MAGIC};
pub use synthetic::{generate_synthetic, ClassSignature, SyntheticConfig};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// `n` samples of shape `m x t` with labels in `[0, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<f32>,
    pub labels: Vec<u32>,
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
    /// Set once z-score statistics have been applied.
    pub normalized: bool,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        samples: Vec<f32>,
        labels: Vec<u32>,
        channels: usize,
        length: usize,
        classes: usize,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            samples,
            labels,
            channels,
            length,
            classes,
            normalized: false,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.length == 0 || self.classes == 0 {
            return Err(Error::config("dataset channels, length and classes must be positive"));
        }
        if self.samples.len() != self.len() * self.channels * self.length {
            return Err(Error::config(format!(
                "{} values for {} samples of {}x{}",
                self.samples.len(),
                self.len(),
                self.channels,
                self.length
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::config(format!("label {l} outside {} classes", self.classes)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let s = self.channels * self.length;
        &self.samples[i * s..(i + 1) * s]
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut samples = Vec::with_capacity(idx.len() * self.channels * self.length);
        for &i in idx {
            samples.extend_from_slice(self.sample(i));
        }
        Self {
            name: self.name.clone(),
            samples,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            channels: self.channels,
            length: self.length,
            classes: self.classes,
            normalized: self.normalized,
        }
    }

    /// Samples `idx` stacked into `[b, m, t]`.
    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * self.channels * self.length);
        for &i in idx {
            data.extend(self.sample(i).iter().map(|&v| lit::<T>(v as f64)));
        }
        Tensor::new(&[idx.len(), self.channels, self.length], data).expect("batch shape")
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i] as usize).collect()
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed: 2019,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions {:?} must be in [0, 1] and sum to 1",
                f
            )));
        }
        Ok(())
    }

    /// Split sizes: floors of each fraction, with the remainder handed out one at a
    /// time to train, val, test in that order.
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let fr = [self.train, self.val, self.test];
        let mut sizes = fr.map(|f| (f * n as f64 + 1e-9).floor() as usize);
        let mut rem = n - sizes.iter().sum::<usize>();
        let mut k = 0;
        while rem > 0 {
            sizes[k % 3] += 1;
            rem -= 1;
            k += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut into contiguous train/val/test parts.
pub fn split(n: usize, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let sizes = spec.sizes(n);
    for (name, &s) in ["train", "val", "test"].iter().zip(&sizes) {
        if s == 0 {
            return Err(Error::EmptySplit(format!("{name} split is empty for {n} samples")));
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let test = idx.split_off(sizes[0] + sizes[1]);
    let val = idx.split_off(sizes[0]);
    Ok(Split {
        train: idx,
        val,
        test,
    })
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    pub fn fit(ds: &Dataset) -> (Self, Vec<String>) {
        let (m, t) = (ds.channels, ds.length);
        let mut mean = vec![0.0; m];
        let mut sq = vec![0.0; m];
        for i in 0..ds.len() {
            for (ch, row) in ds.sample(i).chunks(t).enumerate() {
                for &v in row {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let cnt = (ds.len() * t).max(1) as f64;
        let mut warnings = Vec::new();
        let std = (0..m)
            .map(|ch| {
                mean[ch] /= cnt;
                let var = (sq[ch] / cnt - mean[ch] * mean[ch]).max(0.0);
                let s = var.sqrt();
                if s < STD_FLOOR {
                    warnings.push(format!("channel {ch} has zero variance; left centered only"));
                    1.0
                } else {
                    s
                }
            })
            .collect();
        (Self { mean, std }, warnings)
    }
}

/// Z-scores every channel. With `stats` given they are applied as-is; otherwise they
/// are fitted on `ds`. Returned warnings flag zero-variance channels and repeated
/// normalization.
pub fn normalize(ds: &Dataset, stats: Option<&NormStats>) -> Result<(Dataset, NormStats, Vec<String>)> {
    let (stats, mut warnings) = match stats {
        Some(s) => (s.clone(), Vec::new()),
        None => NormStats::fit(ds),
    };
    if stats.mean.len() != ds.channels {
        return Err(Error::config(format!(
            "normalization stats cover {} channels, dataset has {}",
            stats.mean.len(),
            ds.channels
        )));
    }
    if ds.normalized {
        warnings.push("dataset was already normalized; statistics applied again".into());
    }
    let mut out = ds.clone();
    let t = ds.length;
    for chunk in out.samples.chunks_mut(ds.channels * t) {
        for (ch, row) in chunk.chunks_mut(t).enumerate() {
            for v in row {
                *v = ((*v as f64 - stats.mean[ch]) / stats.std[ch]) as f32;
            }
        }
    }
    out.normalized = true;
    Ok((out, stats, warnings))
}

/// Batches of `idx` after a reshuffle keyed on `(seed, epoch)`; the last batch may be short.
pub fn batch_iter(idx: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order = idx.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy(n: usize) -> Dataset {
        Dataset::new("toy", (0..n * 4).map(|v| v as f32).collect(), vec![0; n], 2, 2, 1).unwrap()
    }

    #[test]
    fn split_sizes() {
        let s = SplitSpec::default();
        assert_eq!(s.sizes(10), [6, 2, 2]);
        assert_eq!(s.sizes(11), [7, 2, 2]);
        // enumeration: floor parts 6,2,2 plus one remainder to train
        let sp = split(11, &s).unwrap();
        assert_eq!((sp.train.len(), sp.val.len(), sp.test.len()), (7, 2, 2));
        assert_eq!(split(11, &s).unwrap(), sp);
    }

    #[test]
    fn tiny_split_fails() {
        assert!(matches!(split(1, &SplitSpec::default()), Err(Error::EmptySplit(_))));
        assert!(matches!(split(4, &SplitSpec::default()), Err(Error::EmptySplit(_))));
    }

    proptest! {
        #[test]
        fn splits_partition(n in 5usize..400, seed in any::<u64>()) {
            let sp = split(n, &SplitSpec { seed, ..Default::default() }).unwrap();
            let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn batches_partition(n in 1usize..200, bs in 1usize..64, seed in any::<u64>(), epoch in 0u64..5) {
            let idx: Vec<usize> = (0..n).map(|i| i * 3).collect();
            let b = batch_iter(&idx, bs, seed, epoch);
            prop_assert!(b.iter().all(|x| !x.is_empty() && x.len() <= bs));
            let mut all: Vec<usize> = b.concat();
            all.sort();
            prop_assert_eq!(all, idx.clone());
            prop_assert_eq!(b, batch_iter(&idx, bs, seed, epoch));
        }
    }

    #[test]
    fn single_batch_when_large() {
        let idx: Vec<usize> = (0..7).collect();
        assert_eq!(batch_iter(&idx, 7, 1, 0).len(), 1);
        assert_eq!(batch_iter(&idx, 100, 1, 0).len(), 1);
        assert_ne!(batch_iter(&idx, 2, 1, 0), batch_iter(&idx, 2, 1, 1));
    }

    #[test]
    fn normalization_statistics() {
        let ds = toy(10);
        let (n, stats, w) = normalize(&ds, None).unwrap();
        assert!(w.is_empty());
        let (check, _) = NormStats::fit(&n);
        for ch in 0..2 {
            assert!(check.mean[ch].abs() < 1e-6);
            assert!((check.std[ch] - 1.0).abs() < 1e-5);
        }
        let (_, _, again) = normalize(&n, Some(&stats)).unwrap();
        assert_eq!(again.len(), 1);
    }

    #[test]
    fn constant_channel_zeroed() {
        let ds = Dataset::new("c", vec![3.0; 12], vec![0; 3], 2, 2, 1).unwrap();
        let (n, _, w) = normalize(&ds, None).unwrap();
        assert!(n.samples.iter().all(|&v| v == 0.0));
        assert_eq!(w.len(), 2);
    }

    #[test]
    fn train_stats_ignore_other_splits() {
        let mut ds = toy(20);
        let sp = split(20, &SplitSpec::default()).unwrap();
        let (a, _) = NormStats::fit(&ds.subset(&sp.train));
        for &i in sp.val.iter().chain(&sp.test) {
            let s = ds.channels * ds.length;
            ds.samples[i * s..(i + 1) * s].iter_mut().for_each(|v| *v = -1e3);
        }
        let (b, _) = NormStats::fit(&ds.subset(&sp.train));
        assert_eq!(a, b);
    }
}
