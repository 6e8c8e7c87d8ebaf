//! Multi-mask sampling over patch positions.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskConfig {
    /// Fraction of patches hidden per mask.
    pub ratio: f64,
    /// Number of distinct masks per sample.
    pub count: usize,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            count: 20,
            seed: 2019,
        }
    }
}

/// One boolean mask over `p` positions (`true` = hidden).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub hidden: Vec<bool>,
    pub visible_indices: Vec<usize>,
    pub hidden_indices: Vec<usize>,
}

impl Mask {
    pub fn from_hidden(hidden: Vec<bool>) -> Self {
        let visible_indices = (0..hidden.len()).filter(|&i| !hidden[i]).collect();
        let hidden_indices = (0..hidden.len()).filter(|&i| hidden[i]).collect();
        Self {
            hidden,
            visible_indices,
            hidden_indices,
        }
    }

    pub fn all_visible(p: usize) -> Self {
        Self::from_hidden(vec![false; p])
    }

    pub fn len(&self) -> usize {
        self.hidden.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.is_empty()
    }
}

/// `N` pairwise-distinct masks over the same `p` positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub masks: Vec<Mask>,
}

impl MaskSet {
    pub fn new(masks: Vec<Mask>) -> Result<Self> {
        let Some(first) = masks.first() else {
            return Err(Error::config("a mask set needs at least one mask"));
        };
        let (p, v) = (first.len(), first.visible_indices.len());
        if masks.iter().any(|m| m.len() != p || m.visible_indices.len() != v) {
            return Err(Error::config("masks in a set must share length and visible count"));
        }
        for (i, m) in masks.iter().enumerate() {
            if masks[..i].contains(m) {
                return Err(Error::config(format!("mask {i} repeats an earlier mask")));
            }
        }
        Ok(Self { masks })
    }

    pub fn count(&self) -> usize {
        self.masks.len()
    }

    pub fn patches(&self) -> usize {
        self.masks[0].len()
    }

    pub fn visible(&self) -> usize {
        self.masks[0].visible_indices.len()
    }
}

/// Hidden positions per mask: `round(ratio·p)`, kept within `[1, p-1]` for ratios in `(0, 1)`.
pub fn hidden_count(p: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!(
            "mask ratio {ratio} must lie in [0, 1) so at least one patch stays visible"
        )));
    }
    if p == 0 {
        return Err(Error::config("cannot mask an empty sequence"));
    }
    if ratio == 0.0 {
        return Ok(0);
    }
    if p < 2 {
        return Err(Error::config(format!(
            "mask ratio {ratio} over {p} patch leaves no visible patch"
        )));
    }
    let h = (ratio * p as f64).round() as usize;
    Ok(h.clamp(1, p - 1))
}

/// Whether `C(p, h) >= n`, without overflow.
pub fn enough_distinct_masks(p: usize, h: usize, n: usize) -> bool {
    let k = h.min(p - h);
    let mut c: u128 = 1;
    for i in 0..k {
        if c >= n as u128 {
            return true;
        }
        c = c * (p - i) as u128 / (i + 1) as u128;
    }
    c >= n as u128
}

/// Draws `cfg.count` distinct uniform masks, re-drawing duplicates.
pub fn sample_masks<R: Rng + ?Sized>(p: usize, cfg: &MaskConfig, rng: &mut R) -> Result<MaskSet> {
    if cfg.count == 0 {
        return Err(Error::config("mask count must be positive"));
    }
    let h = hidden_count(p, cfg.ratio)?;
    if !enough_distinct_masks(p, h, cfg.count) {
        return Err(Error::config(format!(
            "{} distinct masks hiding {h} of {p} patches do not exist",
            cfg.count
        )));
    }
    let mut masks: Vec<Mask> = Vec::with_capacity(cfg.count);
    while masks.len() < cfg.count {
        let mut hidden = vec![false; p];
        for i in index::sample(rng, p, h) {
            hidden[i] = true;
        }
        if masks.iter().any(|m| m.hidden == hidden) {
            continue;
        }
        masks.push(Mask::from_hidden(hidden));
    }
    MaskSet::new(masks)
}

/// Independent RNG stream for sample `index` at optimizer step `step`.
pub fn sample_stream(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sixteen_patches_at_point_eight() {
        assert_eq!(hidden_count(16, 0.8).unwrap(), 13);
        let mut rng = sample_stream(1, 0, 0);
        let set = sample_masks(16, &MaskConfig::default(), &mut rng).unwrap();
        assert_eq!(set.count(), 20);
        for m in &set.masks {
            assert_eq!(m.hidden.iter().filter(|&&h| h).count(), 13);
            assert_eq!(m.visible_indices.len(), 3);
            assert!(m.visible_indices.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn zero_ratio_cannot_give_two_distinct_masks() {
        let cfg = MaskConfig {
            ratio: 0.0,
            count: 2,
            seed: 0,
        };
        assert!(matches!(sample_masks(16, &cfg, &mut sample_stream(0, 0, 0)), Err(Error::Config(_))));
        let one = MaskConfig { count: 1, ..cfg };
        let set = sample_masks(16, &one, &mut sample_stream(0, 0, 0)).unwrap();
        assert_eq!(set.visible(), 16);
    }

    #[test]
    fn full_ratio_rejected() {
        assert!(hidden_count(16, 1.0).is_err());
        assert!(hidden_count(1, 0.5).is_err());
    }

    #[test]
    fn infeasible_count_rejected() {
        // C(4, 3) = 4
        assert!(enough_distinct_masks(4, 3, 4));
        assert!(!enough_distinct_masks(4, 3, 5));
        let cfg = MaskConfig {
            ratio: 0.75,
            count: 5,
            seed: 0,
        };
        assert!(sample_masks(4, &cfg, &mut sample_stream(0, 0, 0)).is_err());
        let ok = MaskConfig { count: 4, ..cfg };
        let set = sample_masks(4, &ok, &mut sample_stream(0, 0, 0)).unwrap();
        assert_eq!(set.count(), 4);
    }

    #[test]
    fn same_seed_same_masks() {
        let cfg = MaskConfig::default();
        let a = sample_masks(16, &cfg, &mut sample_stream(7, 3, 2)).unwrap();
        let b = sample_masks(16, &cfg, &mut sample_stream(7, 3, 2)).unwrap();
        let c = sample_masks(16, &cfg, &mut sample_stream(7, 3, 3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn binomial_guard_handles_large_p() {
        assert!(enough_distinct_masks(200, 100, usize::MAX));
    }
}
