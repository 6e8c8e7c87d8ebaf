//! Flat `key=value` run configuration.
//!
//! Resolution order: built-in defaults, then the `--config` file, then `--set` pairs,
//! then dedicated flags. Unknown keys are rejected at every layer.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use mtslof::backbone::{ModelConfig, PatcherConfig};
use mtslof::data::{SplitSpec, SyntheticConfig};
use mtslof::layers::TransformerConfig;
use mtslof::ssl::mask::{enough_distinct_masks, hidden_count};
use mtslof::ssl::{Balance, MaskConfig, TcrConfig};
use mtslof::train::{OptimConfig, TrainConfig};

use crate::Usage;

/// Which split `eval` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
    All,
}

impl EvalSplit {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
            EvalSplit::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seeds: Vec<u64>,

    pub classes: usize,
    pub channels: usize,
    pub length: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub data_seed: u64,
    pub signature_seed: u64,
    pub phase_jitter: f64,
    pub burst_jitter: f64,
    pub distractors: usize,
    pub distractor_amplitude: f64,

    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub split_seed: u64,

    pub first_kernel: usize,
    pub first_stride: usize,
    /// Widths of the first three convs; the last conv maps to `d_model`.
    pub widths: [usize; 3],
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub ffn_multiplier: usize,
    pub dropout: f64,
    pub pre_norm: bool,
    pub decoder_depth: usize,
    pub bn_momentum: f64,

    pub num_masks: Vec<usize>,
    pub mask_ratio: Vec<f64>,
    pub lambda: f64,
    pub epsilon: f64,
    pub balance: Balance,
    pub tcr: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub decay_all: bool,

    pub probe_epochs: usize,
    pub probe_batch_size: usize,
    pub probe_lr: f64,

    pub fraction: f64,
    pub split: EvalSplit,

    /// Keys set by a file, `--set` or a flag rather than left at their default.
    pub explicit: BTreeSet<&'static str>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let syn = SyntheticConfig::default();
        let split = SplitSpec::default();
        let model = ModelConfig::default();
        let mask = MaskConfig::default();
        let tcr = TcrConfig::default();
        let optim = OptimConfig::default();
        let w = model.patcher.channel_widths;
        Self {
            data: None,
            checkpoint: None,
            out: None,
            seeds: (2019..=2023).collect(),
            classes: syn.classes,
            channels: syn.channels,
            length: syn.length,
            samples_per_class: syn.samples_per_class,
            noise_std: syn.noise_std,
            data_seed: syn.seed,
            signature_seed: syn.signature_seed,
            phase_jitter: syn.phase_jitter,
            burst_jitter: syn.burst_jitter,
            distractors: syn.distractors,
            distractor_amplitude: syn.distractor_amplitude,
            split_train: split.train,
            split_val: split.val,
            split_test: split.test,
            split_seed: split.seed,
            first_kernel: model.patcher.first_kernel,
            first_stride: model.patcher.first_stride,
            widths: [w[0], w[1], w[2]],
            d_model: model.encoder.model_dim,
            heads: model.encoder.heads,
            depth: model.encoder.depth,
            ffn_multiplier: model.encoder.ffn_multiplier,
            dropout: model.encoder.dropout,
            pre_norm: model.encoder.pre_norm,
            decoder_depth: model.decoder_depth,
            bn_momentum: model.bn_momentum,
            num_masks: vec![mask.count],
            mask_ratio: vec![mask.ratio],
            lambda: tcr.lambda,
            epsilon: tcr.epsilon,
            balance: tcr.balance,
            tcr: !tcr.disabled,
            epochs: optim.epochs,
            batch_size: optim.batch_size,
            lr: optim.learning_rate,
            weight_decay: optim.weight_decay,
            beta1: optim.beta1,
            beta2: optim.beta2,
            decay_all: optim.decay_all,
            probe_epochs: 40,
            probe_batch_size: 32,
            probe_lr: optim.learning_rate,
            fraction: 1.0,
            split: EvalSplit::Test,
            explicit: BTreeSet::new(),
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "data",
    "checkpoint",
    "out",
    "seed",
    "classes",
    "channels",
    "length",
    "samples_per_class",
    "noise_std",
    "data_seed",
    "signature_seed",
    "phase_jitter",
    "burst_jitter",
    "distractors",
    "distractor_amplitude",
    "split_train",
    "split_val",
    "split_test",
    "split_seed",
    "first_kernel",
    "first_stride",
    "widths",
    "d_model",
    "heads",
    "depth",
    "ffn_multiplier",
    "dropout",
    "pre_norm",
    "decoder_depth",
    "bn_momentum",
    "num_masks",
    "mask_ratio",
    "lambda",
    "epsilon",
    "balance",
    "tcr",
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "decay_all",
    "probe_epochs",
    "probe_batch_size",
    "probe_lr",
    "fraction",
    "split",
];

/// Keys describing the network, checked against a loaded checkpoint when set explicitly.
pub const MODEL_KEYS: &[&str] = &[
    "first_kernel",
    "first_stride",
    "widths",
    "d_model",
    "heads",
    "depth",
    "ffn_multiplier",
    "decoder_depth",
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T, Usage>
where
    T::Err: Display,
{
    v.trim()
        .parse()
        .map_err(|e| Usage(format!("invalid value {v:?} for {key}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>, Usage>
where
    T::Err: Display,
{
    let items: Vec<T> = v.split(',').map(|s| parse(key, s)).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(Usage(format!("{key} needs at least one value")));
    }
    Ok(items)
}

fn parse_bool(key: &str, v: &str) -> Result<bool, Usage> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Usage(format!("invalid value {v:?} for {key}: expected true or false"))),
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Usage> {
        let Some(&canon) = KEYS.iter().find(|&&k| k == key) else {
            return Err(Usage(format!("unknown config key {key:?}")));
        };
        let v = value.trim();
        let path = || if v.is_empty() { None } else { Some(PathBuf::from(v)) };
        match canon {
            "data" => self.data = path(),
            "checkpoint" => self.checkpoint = path(),
            "out" => self.out = path(),
            "seed" => self.seeds = parse_list(key, v)?,
            "classes" => self.classes = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "length" => self.length = parse(key, v)?,
            "samples_per_class" => self.samples_per_class = parse(key, v)?,
            "noise_std" => self.noise_std = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "signature_seed" => self.signature_seed = parse(key, v)?,
            "phase_jitter" => self.phase_jitter = parse(key, v)?,
            "burst_jitter" => self.burst_jitter = parse(key, v)?,
            "distractors" => self.distractors = parse(key, v)?,
            "distractor_amplitude" => self.distractor_amplitude = parse(key, v)?,
            "split_train" => self.split_train = parse(key, v)?,
            "split_val" => self.split_val = parse(key, v)?,
            "split_test" => self.split_test = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "first_kernel" => self.first_kernel = parse(key, v)?,
            "first_stride" => self.first_stride = parse(key, v)?,
            "widths" => {
                let w: Vec<usize> = parse_list(key, v)?;
                self.widths = w
                    .try_into()
                    .map_err(|w: Vec<usize>| Usage(format!("widths needs 3 values, got {}", w.len())))?;
            }
            "d_model" => self.d_model = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "ffn_multiplier" => self.ffn_multiplier = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "pre_norm" => self.pre_norm = parse_bool(key, v)?,
            "decoder_depth" => self.decoder_depth = parse(key, v)?,
            "bn_momentum" => self.bn_momentum = parse(key, v)?,
            "num_masks" => self.num_masks = parse_list(key, v)?,
            "mask_ratio" => self.mask_ratio = parse_list(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "balance" => {
                self.balance = match v {
                    "similarity" => Balance::Similarity,
                    "coding_rate" => Balance::CodingRate,
                    _ => return Err(Usage(format!("balance must be similarity or coding_rate, got {v:?}"))),
                }
            }
            "tcr" => self.tcr = parse_bool(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "decay_all" => self.decay_all = parse_bool(key, v)?,
            "probe_epochs" => self.probe_epochs = parse(key, v)?,
            "probe_batch_size" => self.probe_batch_size = parse(key, v)?,
            "probe_lr" => self.probe_lr = parse(key, v)?,
            "fraction" => self.fraction = parse(key, v)?,
            "split" => {
                self.split = match v {
                    "train" => EvalSplit::Train,
                    "val" => EvalSplit::Val,
                    "test" => EvalSplit::Test,
                    "all" => EvalSplit::All,
                    _ => return Err(Usage(format!("split must be train, val, test or all, got {v:?}"))),
                }
            }
            _ => unreachable!("every key in KEYS is handled"),
        }
        self.explicit.insert(canon);
        Ok(())
    }

    /// Applies a config file: one `key=value` per line, `#` comments and blank lines ignored.
    pub fn apply_file(&mut self, text: &str, origin: &str) -> Result<(), Usage> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Usage(format!("{origin}:{}: expected key=value, got {line:?}", no + 1)))?;
            self.set(k.trim(), v)
                .map_err(|Usage(m)| Usage(format!("{origin}:{}: {m}", no + 1)))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "data" => path_str(&self.data),
            "checkpoint" => path_str(&self.checkpoint),
            "out" => path_str(&self.out),
            "seed" => join(&self.seeds),
            "classes" => self.classes.to_string(),
            "channels" => self.channels.to_string(),
            "length" => self.length.to_string(),
            "samples_per_class" => self.samples_per_class.to_string(),
            "noise_std" => self.noise_std.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "signature_seed" => self.signature_seed.to_string(),
            "phase_jitter" => self.phase_jitter.to_string(),
            "burst_jitter" => self.burst_jitter.to_string(),
            "distractors" => self.distractors.to_string(),
            "distractor_amplitude" => self.distractor_amplitude.to_string(),
            "split_train" => self.split_train.to_string(),
            "split_val" => self.split_val.to_string(),
            "split_test" => self.split_test.to_string(),
            "split_seed" => self.split_seed.to_string(),
            "first_kernel" => self.first_kernel.to_string(),
            "first_stride" => self.first_stride.to_string(),
            "widths" => join(&self.widths),
            "d_model" => self.d_model.to_string(),
            "heads" => self.heads.to_string(),
            "depth" => self.depth.to_string(),
            "ffn_multiplier" => self.ffn_multiplier.to_string(),
            "dropout" => self.dropout.to_string(),
            "pre_norm" => self.pre_norm.to_string(),
            "decoder_depth" => self.decoder_depth.to_string(),
            "bn_momentum" => self.bn_momentum.to_string(),
            "num_masks" => join(&self.num_masks),
            "mask_ratio" => join(&self.mask_ratio),
            "lambda" => self.lambda.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "balance" => match self.balance {
                Balance::Similarity => "similarity".into(),
                Balance::CodingRate => "coding_rate".into(),
            },
            "tcr" => self.tcr.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "decay_all" => self.decay_all.to_string(),
            "probe_epochs" => self.probe_epochs.to_string(),
            "probe_batch_size" => self.probe_batch_size.to_string(),
            "probe_lr" => self.probe_lr.to_string(),
            "fraction" => self.fraction.to_string(),
            "split" => self.split.as_str().into(),
            _ => String::new(),
        }
    }

    /// The resolved configuration in the config-file format.
    pub fn echo(&self) -> String {
        KEYS.iter().map(|k| format!("{k}={}\n", self.get(k))).collect()
    }

    /// Checks that hold before any data is read.
    pub fn validate(&self) -> Result<(), Usage> {
        if self.seeds.is_empty() {
            return Err(Usage("at least one seed is required".into()));
        }
        for &r in &self.mask_ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(Usage(format!(
                    "mask_ratio {r} must lie in [0, 1) so at least one patch stays visible"
                )));
            }
        }
        if self.num_masks.contains(&0) {
            return Err(Usage("num_masks must be positive".into()));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Usage(format!("fraction must lie in (0, 1], got {}", self.fraction)));
        }
        if self.probe_batch_size == 0 || !(self.probe_lr > 0.0) {
            return Err(Usage("probe_batch_size and probe_lr must be positive".into()));
        }
        self.train_config_at(self.num_masks[0], self.mask_ratio[0])
            .validate()
            .map_err(usage)?;
        Ok(())
    }

    /// Single value of a list key outside `ablate`.
    fn single<T: Copy>(&self, key: &str, xs: &[T]) -> Result<T, Usage> {
        match xs {
            [x] => Ok(*x),
            _ => Err(Usage(format!("{key} takes one value here, got {}", xs.len()))),
        }
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            classes: self.classes,
            channels: self.channels,
            length: self.length,
            samples_per_class: self.samples_per_class,
            noise_std: self.noise_std,
            seed: self.data_seed,
            signature_seed: self.signature_seed,
            phase_jitter: self.phase_jitter,
            burst_jitter: self.burst_jitter,
            signatures: Vec::new(),
            distractors: self.distractors,
            distractor_amplitude: self.distractor_amplitude,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split_train,
            val: self.split_val,
            test: self.split_test,
            seed: self.split_seed,
        }
    }

    /// Network for `channels` inputs of length `length` over `classes` classes.
    pub fn model_config(&self, channels: usize, length: usize, classes: usize) -> ModelConfig {
        let w = self.widths;
        ModelConfig {
            patcher: PatcherConfig {
                first_kernel: self.first_kernel,
                first_stride: self.first_stride,
                channel_widths: [w[0], w[1], w[2], self.d_model],
                input_channels: channels,
            },
            encoder: TransformerConfig {
                model_dim: self.d_model,
                heads: self.heads,
                depth: self.depth,
                ffn_multiplier: self.ffn_multiplier,
                dropout: self.dropout,
                pre_norm: self.pre_norm,
            },
            decoder_depth: self.decoder_depth,
            series_length: length,
            class_count: classes,
            bn_momentum: self.bn_momentum,
        }
    }

    /// Training settings with the given mask count and ratio.
    pub fn train_config_at(&self, count: usize, ratio: f64) -> TrainConfig {
        TrainConfig {
            optim: OptimConfig {
                learning_rate: self.lr,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                epochs: self.epochs,
                batch_size: self.batch_size,
                decay_all: self.decay_all,
                ..OptimConfig::default()
            },
            mask: MaskConfig {
                ratio,
                count,
                ..MaskConfig::default()
            },
            tcr: TcrConfig {
                epsilon: self.epsilon,
                lambda: self.lambda,
                balance: self.balance,
                disabled: !self.tcr,
            },
            split: self.split_spec(),
        }
    }

    /// Settings for a single pretrain, probe or finetune run.
    pub fn single_train_config(&self) -> Result<TrainConfig, Usage> {
        let count = self.single("num_masks", &self.num_masks)?;
        let ratio = self.single("mask_ratio", &self.mask_ratio)?;
        Ok(self.train_config_at(count, ratio))
    }

    /// Linear-probe settings used after each `ablate` grid point.
    pub fn probe_config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            optim: OptimConfig {
                epochs: self.probe_epochs,
                batch_size: self.probe_batch_size,
                learning_rate: self.probe_lr,
                ..base.optim
            },
            ..*base
        }
    }
}

/// Checks that `count` distinct masks at `ratio` exist over the model's patch count.
pub fn check_masks(model: &ModelConfig, count: usize, ratio: f64) -> Result<(), Usage> {
    let p = model.patches();
    let h = hidden_count(p, ratio).map_err(usage)?;
    if !enough_distinct_masks(p, h, count) {
        return Err(Usage(format!(
            "num_masks {count} exceeds the distinct masks hiding {h} of {p} patches"
        )));
    }
    Ok(())
}

pub fn usage(e: mtslof::Error) -> Usage {
    Usage(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut a = RunConfig::default();
        a.set("num_masks", "1,5,20").unwrap();
        a.set("widths", "8,16,16").unwrap();
        a.set("balance", "coding_rate").unwrap();
        a.set("data", "x.bin").unwrap();
        let mut b = RunConfig::default();
        b.apply_file(&a.echo(), "echo").unwrap();
        assert_eq!(a.echo(), b.echo());
    }

    #[test]
    fn every_key_is_settable() {
        let base = RunConfig::default();
        for k in KEYS {
            let mut c = RunConfig::default();
            c.set(k, &base.get(k)).unwrap();
            assert!(c.explicit.contains(k));
        }
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        let mut c = RunConfig::default();
        assert!(c.set("d_modle", "4").is_err());
        assert!(c.set("d_model", "four").is_err());
        assert!(c.set("widths", "1,2").is_err());
        let err = c.apply_file("epochs=2\nbogus=1\n", "f.cfg").unwrap_err();
        assert!(err.0.contains("f.cfg:2"), "{}", err.0);
        assert!(c.apply_file("no equals sign", "f").is_err());
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let mut c = RunConfig::default();
        c.apply_file("# header\n\nepochs = 3 # trailing\n", "f").unwrap();
        assert_eq!(c.epochs, 3);
        assert!(c.explicit.contains("epochs"));
    }

    #[test]
    fn full_mask_ratio_is_a_config_error() {
        let mut c = RunConfig::default();
        c.set("mask_ratio", "1.0").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("fraction", "0").unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn defaults_match_core_defaults() {
        let c = RunConfig::default();
        let m = c.model_config(2, 128, 3);
        assert_eq!(m, ModelConfig::default());
        assert_eq!(c.single_train_config().unwrap(), TrainConfig::default());
        assert_eq!(c.synthetic(), SyntheticConfig::default());
    }

    #[test]
    fn too_many_masks_for_the_patch_count() {
        let c = RunConfig::default();
        let m = c.model_config(2, 128, 3);
        let p = m.patches();
        let h = hidden_count(p, 0.8).unwrap();
        let binom = (0..h).fold(1u128, |c, i| c * (p - i) as u128 / (i + 1) as u128) as usize;
        assert!(check_masks(&m, binom, 0.8).is_ok());
        assert!(check_masks(&m, binom + 1, 0.8).is_err());
    }
}
