//! Pretraining, linear probing, fine-tuning and evaluation.

mod metrics;
mod optim;

pub use metrics::{argmax, Metrics};
pub use optim::{AdamW, OptimConfig};

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::ModelConfig;
use crate::data::{batch_iter, normalize, split, Dataset, NormStats, Split, SplitSpec};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::{ParamId, Pass};
use crate::ssl::mask::{sample_masks, sample_stream, MaskConfig};
use crate::ssl::{lof_loss, TcrConfig};
use crate::tensor::Tensor;

/// Rows per forward pass when extracting frozen features.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub mask: MaskConfig,
    pub tcr: TcrConfig,
    pub split: SplitSpec,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.tcr.validate()?;
        self.split.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Pretrain,
    Probe,
    Finetune,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Pretrain => "pretrain",
            Mode::Probe => "probe",
            Mode::Finetune => "finetune",
        }
    }
}

/// Loss and optional metrics on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitRecord {
    pub loss: f64,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: SplitRecord,
    pub val: Option<SplitRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub seed: u64,
    pub mode: Mode,
    /// One record per completed epoch.
    pub history: Vec<EpochRecord>,
    pub test: Option<SplitRecord>,
    pub checkpoint: Option<PathBuf>,
    pub train_samples: usize,
    pub warnings: Vec<String>,
}

impl TrainRun {
    fn new(seed: u64, mode: Mode) -> Self {
        Self {
            seed,
            mode,
            history: Vec::new(),
            test: None,
            checkpoint: None,
            train_samples: 0,
            warnings: Vec::new(),
        }
    }
}

/// A dataset split with z-scoring fitted on (or carried over to) its training part.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    pub split: Split,
    pub stats: NormStats,
    pub warnings: Vec<String>,
}

impl Prepared {
    /// With `stats` absent they are fitted on the training indices only.
    pub fn new(ds: &Dataset, spec: &SplitSpec, stats: Option<&NormStats>) -> Result<Self> {
        ds.validate()?;
        let split = split(ds.len(), spec)?;
        let mut warnings = Vec::new();
        let stats = match stats {
            Some(s) => s.clone(),
            None => {
                let (s, w) = NormStats::fit(&ds.subset(&split.train));
                warnings.extend(w);
                s
            }
        };
        let (data, stats, w) = normalize(ds, Some(&stats))?;
        warnings.extend(w);
        Ok(Self {
            data,
            split,
            stats,
            warnings,
        })
    }
}

fn check_input(cfg: &ModelConfig, ds: &Dataset) -> Result<()> {
    let want = [cfg.patcher.input_channels, cfg.series_length];
    let got = [ds.channels, ds.length];
    if want != got {
        return Err(Error::shape("model input (channels, length)", &want, &got));
    }
    Ok(())
}

fn with_context(e: Error, epoch: usize, step: u64) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, step {step}: {m}")),
        other => other,
    }
}

/// Shuffled batches with a trailing single-sample batch folded into its predecessor,
/// since batch statistics need two samples.
fn batches(idx: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut out = batch_iter(idx, batch_size, seed, epoch);
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

/// Self-supervised pretraining of backbone, decoder and mask token. The classifier head
/// is never updated.
pub fn pretrain(ds: &Dataset, model_cfg: ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<(Model<f32>, TrainRun)> {
    cfg.validate()?;
    check_input(&model_cfg, ds)?;
    let prep = Prepared::new(ds, &cfg.split, None)?;
    let mut model = Model::<f32>::new(model_cfg, seed)?;
    model.norm = Some(prep.stats.clone());
    let mut run = TrainRun::new(seed, Mode::Pretrain);
    run.warnings.extend(prep.warnings.iter().cloned());
    run.train_samples = prep.split.train.len();
    let head = [model.backbone.head.weight, model.backbone.head.bias];
    let p = model.cfg.patches();
    let mut opt = AdamW::new(cfg.optim);
    let mut step: u64 = 0;
    for epoch in 0..cfg.optim.epochs {
        let (mut sum, mut sim_sum, mut tcr_sum, mut count) = (0.0, 0.0, 0.0, 0usize);
        for batch in batches(&prep.split.train, cfg.optim.batch_size, seed, epoch as u64) {
            let sets = batch
                .iter()
                .enumerate()
                .map(|(i, _)| sample_masks(p, &cfg.mask, &mut sample_stream(seed, step, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let x = prep.data.batch::<f32>(&batch);
            let Model {
                params,
                backbone,
                decoder,
                ..
            } = &mut model;
            let mut pass = Pass::new(params, true, seed ^ step.wrapping_mul(0xD1B5_4A32_D192_ED03));
            let xv = pass.input(x);
            let (loss, m) = lof_loss(&mut pass, backbone, decoder, xv, &sets, &cfg.tcr)
                .map_err(|e| with_context(e, epoch, step))?;
            pass.graph.backward(loss)?;
            let grads: Vec<(ParamId, Tensor<f32>)> =
                pass.param_grads().into_iter().filter(|(id, _)| !head.contains(id)).collect();
            drop(pass);
            opt.step(&mut model.params, &grads)
                .map_err(|e| with_context(e, epoch, step))?;
            sum += m.total * batch.len() as f64;
            sim_sum += m.sim * batch.len() as f64;
            tcr_sum += m.tcr_mean * batch.len() as f64;
            count += batch.len();
            step += 1;
        }
        let loss = sum / count.max(1) as f64;
        log::info!(
            "pretrain seed={seed} epoch={epoch} loss={loss:.6} sim={:.6} tcr={:.6}",
            sim_sum / count.max(1) as f64,
            tcr_sum / count.max(1) as f64
        );
        run.history.push(EpochRecord {
            epoch,
            train: SplitRecord { loss, metrics: None },
            val: None,
        });
    }
    Ok((model, run))
}

/// Eval-mode pooled representations `[idx.len(), d]` of already-normalized data.
pub fn features(model: &mut Model<f32>, data: &Dataset, idx: &[usize]) -> Result<Tensor<f32>> {
    let d = model.cfg.model_dim();
    let mut out = Vec::with_capacity(idx.len() * d);
    for chunk in idx.chunks(EVAL_CHUNK) {
        let z = model.embed(&data.batch::<f32>(chunk))?;
        out.extend_from_slice(z.data());
    }
    Tensor::new(&[idx.len(), d], out)
}

/// Cross-entropy and metrics of the current head applied to precomputed features.
fn score_features(model: &mut Model<f32>, feats: &Tensor<f32>, labels: &[usize]) -> Result<SplitRecord> {
    let backbone = model.backbone.clone();
    let mut pass = Pass::frozen(&mut model.params, false, 0);
    let z = pass.input(feats.clone());
    let logits = backbone.classify(&mut pass, z)?;
    let loss = pass.graph.cross_entropy(logits, labels)?;
    let classes = model.cfg.class_count;
    let metrics = Metrics::from_logits(&pass.graph.value(logits).to_f64(), classes, labels);
    Ok(SplitRecord {
        loss: pass.graph.value(loss).item() as f64,
        metrics: Some(metrics),
    })
}

/// Loss and metrics of the full model on `idx` of already-normalized data.
pub fn evaluate(model: &mut Model<f32>, data: &Dataset, idx: &[usize]) -> Result<SplitRecord> {
    if idx.is_empty() {
        return Err(Error::EmptySplit("evaluation split is empty".into()));
    }
    let feats = features(model, data, idx)?;
    score_features(model, &feats, &data.labels_of(idx))
}

fn prepare_downstream(model: &mut Model<f32>, ds: &Dataset, cfg: &TrainConfig) -> Result<Prepared> {
    cfg.validate()?;
    check_input(&model.cfg, ds)?;
    let prep = Prepared::new(ds, &cfg.split, model.norm.as_ref())?;
    model.norm = Some(prep.stats.clone());
    model.set_head_classes(ds.classes)?;
    Ok(prep)
}

/// Per-dimension standardization of probe features, fitted on the training split.
#[derive(Debug, Clone)]
struct FeatureScaler {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl FeatureScaler {
    fn fit(x: &Tensor<f32>) -> Self {
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for i in 0..n {
            for (j, &v) in x.row(i).iter().enumerate() {
                mean[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
        }
        let nf = n.max(1) as f64;
        let scale = (0..d)
            .map(|j| {
                mean[j] /= nf;
                ((sq[j] / nf - mean[j] * mean[j]).max(0.0) + crate::autograd::NORM_EPS).sqrt()
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = self.mean.len();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - self.mean[i % d]) / self.scale[i % d]) as f32)
            .collect();
        Tensor::new(x.shape(), data)
    }

    /// Rewrites the head so it acts on raw features: `W/s` and `b − (W/s)·μ`.
    fn fold_into(&self, model: &mut Model<f32>) -> Result<()> {
        let d = self.mean.len();
        let (wid, bid) = (model.backbone.head.weight, model.backbone.head.bias);
        let mut w = model.params.get(wid).to_f64();
        let mut b = model.params.get(bid).to_f64();
        for (c, bc) in b.iter_mut().enumerate() {
            for j in 0..d {
                w[c * d + j] /= self.scale[j];
                *bc -= w[c * d + j] * self.mean[j];
            }
        }
        let shape_w = model.params.get(wid).shape().to_vec();
        let shape_b = model.params.get(bid).shape().to_vec();
        *model.params.get_mut(wid) = Tensor::from_f64(&shape_w, &w)?;
        *model.params.get_mut(bid) = Tensor::from_f64(&shape_b, &b)?;
        Ok(())
    }
}

/// Trains a fresh linear head on frozen eval-mode representations, standardized with
/// training-split feature statistics; the standardization is folded into the head
/// afterwards. Only the head of the
/// returned model differs from `pretrained`.
pub fn linear_probe(
    ds: &Dataset,
    pretrained: &Model<f32>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model<f32>, TrainRun, Metrics)> {
    let mut model = pretrained.clone();
    let prep = prepare_downstream(&mut model, ds, cfg)?;
    let mut run = TrainRun::new(seed, Mode::Probe);
    run.warnings.extend(prep.warnings.iter().cloned());
    run.train_samples = prep.split.train.len();

    let raw_train = features(&mut model, &prep.data, &prep.split.train)?;
    let scaler = FeatureScaler::fit(&raw_train);
    let train_x = scaler.apply(&raw_train)?;
    let val_x = scaler.apply(&features(&mut model, &prep.data, &prep.split.val)?)?;
    let test_x = features(&mut model, &prep.data, &prep.split.test)?;
    let d = model.cfg.model_dim();
    let backbone = model.backbone.clone();
    let head = [backbone.head.weight, backbone.head.bias];
    let mut opt = AdamW::new(cfg.optim);
    // positions into the training split
    let local: Vec<usize> = (0..prep.split.train.len()).collect();
    for epoch in 0..cfg.optim.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in batch_iter(&local, cfg.optim.batch_size, seed, epoch as u64) {
            let mut rows = Vec::with_capacity(batch.len() * d);
            for &i in &batch {
                rows.extend_from_slice(train_x.row(i));
            }
            let labels: Vec<usize> = batch.iter().map(|&i| prep.data.labels[prep.split.train[i]] as usize).collect();
            let mut pass = Pass::new(&mut model.params, false, seed);
            let z = pass.input(Tensor::new(&[batch.len(), d], rows)?);
            let logits = backbone.classify(&mut pass, z)?;
            let loss = pass.graph.cross_entropy(logits, &labels)?;
            let value = pass.graph.value(loss).item() as f64;
            pass.graph.backward(loss)?;
            let grads: Vec<_> = pass.param_grads().into_iter().filter(|(id, _)| head.contains(id)).collect();
            drop(pass);
            opt.step(&mut model.params, &grads)
                .map_err(|e| with_context(e, epoch, count as u64))?;
            sum += value * batch.len() as f64;
            count += batch.len();
        }
        let train = SplitRecord {
            loss: sum / count.max(1) as f64,
            metrics: None,
        };
        let val = if prep.split.val.is_empty() {
            None
        } else {
            Some(score_features(&mut model, &val_x, &prep.data.labels_of(&prep.split.val))?)
        };
        run.history.push(EpochRecord { epoch, train, val });
    }
    scaler.fold_into(&mut model)?;
    let test = score_features(&mut model, &test_x, &prep.data.labels_of(&prep.split.test))?;
    let metrics = test.metrics.clone().expect("scored");
    run.test = Some(test);
    Ok((model, run, metrics))
}

/// Training indices kept for fine-tuning: `round(fraction * n)`, at least one, chosen by
/// a seeded shuffle of the training split.
pub fn label_subset(train: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    let k = ((fraction * train.len() as f64).round() as usize).clamp(1, train.len().max(1));
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5EED);
    order.shuffle(&mut rng);
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// End-to-end supervised training of every parameter on a labeled fraction of the
/// training split, starting from a fresh zero head.
pub fn finetune(
    ds: &Dataset,
    pretrained: &Model<f32>,
    fraction: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model<f32>, TrainRun, Metrics)> {
    let mut model = pretrained.clone();
    let prep = prepare_downstream(&mut model, ds, cfg)?;
    let subset = label_subset(&prep.split.train, fraction, seed)?;
    let mut run = TrainRun::new(seed, Mode::Finetune);
    run.warnings.extend(prep.warnings.iter().cloned());
    run.train_samples = subset.len();
    let mut seen = vec![false; ds.classes];
    for &i in &subset {
        seen[prep.data.labels[i] as usize] = true;
    }
    let missing: Vec<usize> = (0..ds.classes).filter(|&k| !seen[k]).collect();
    if !missing.is_empty() {
        let w = format!(
            "labeled subset of {} samples lacks classes {missing:?}",
            subset.len()
        );
        log::warn!("{w}");
        run.warnings.push(w);
    }

    let mut opt = AdamW::new(cfg.optim);
    let mut step: u64 = 0;
    for epoch in 0..cfg.optim.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in batches(&subset, cfg.optim.batch_size, seed, epoch as u64) {
            let x = prep.data.batch::<f32>(&batch);
            let labels = prep.data.labels_of(&batch);
            let backbone = model.backbone.clone();
            let mut pass = Pass::new(&mut model.params, true, seed ^ step.wrapping_mul(0xD1B5_4A32_D192_ED03));
            let xv = pass.input(x);
            let z = backbone.represent(&mut pass, xv)?;
            let logits = backbone.classify(&mut pass, z)?;
            let loss = pass.graph.cross_entropy(logits, &labels)?;
            let value = pass.graph.value(loss).item() as f64;
            pass.graph.backward(loss)?;
            let grads = pass.param_grads();
            drop(pass);
            opt.step(&mut model.params, &grads)
                .map_err(|e| with_context(e, epoch, step))?;
            sum += value * batch.len() as f64;
            count += batch.len();
            step += 1;
        }
        let train = SplitRecord {
            loss: sum / count.max(1) as f64,
            metrics: None,
        };
        let val = if prep.split.val.is_empty() {
            None
        } else {
            Some(evaluate(&mut model, &prep.data, &prep.split.val)?)
        };
        run.history.push(EpochRecord { epoch, train, val });
    }
    let test = evaluate(&mut model, &prep.data, &prep.split.test)?;
    let metrics = test.metrics.clone().expect("scored");
    run.test = Some(test);
    Ok((model, run, metrics))
}

/// Probes a source-domain backbone on a target dataset, keeping the source
/// normalization statistics.
pub fn transfer_eval(
    source: &Model<f32>,
    target: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TrainRun, Metrics)> {
    check_input(&source.cfg, target)?;
    let (_, run, metrics) = linear_probe(target, source, cfg, seed)?;
    Ok((run, metrics))
}

/// Header for per-epoch metric CSVs with `classes` per-class F1 columns.
pub fn csv_header(classes: usize) -> String {
    let mut s = String::from("epoch,split,loss,accuracy,macro_f1");
    for k in 0..classes {
        let _ = write!(s, ",per_class_f1_{k}");
    }
    s
}

fn csv_row(out: &mut String, epoch: usize, split: &str, rec: &SplitRecord, classes: usize) {
    let _ = write!(out, "{epoch},{split},{:.6}", rec.loss);
    match &rec.metrics {
        Some(m) => {
            let _ = write!(out, ",{:.6},{:.6}", m.accuracy, m.macro_f1);
            for f in &m.per_class_f1 {
                let _ = write!(out, ",{f:.6}");
            }
        }
        None => out.push_str(&",".repeat(2 + classes)),
    }
    out.push('\n');
}

/// Per-epoch history followed by a test row when present.
pub fn history_csv(run: &TrainRun, classes: usize) -> String {
    let mut out = csv_header(classes);
    out.push('\n');
    for rec in &run.history {
        csv_row(&mut out, rec.epoch, "train", &rec.train, classes);
        if let Some(v) = &rec.val {
            csv_row(&mut out, rec.epoch, "val", v, classes);
        }
    }
    if let Some(t) = &run.test {
        csv_row(&mut out, run.history.len(), "test", t, classes);
    }
    out
}

/// Flat `key=value` summary.
pub fn summary(run: &TrainRun) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed={}", run.seed);
    let _ = writeln!(s, "mode={}", run.mode.as_str());
    let _ = writeln!(s, "epochs={}", run.history.len());
    let _ = writeln!(s, "train_samples={}", run.train_samples);
    if let Some(last) = run.history.last() {
        let _ = writeln!(s, "final_train_loss={:.6}", last.train.loss);
    }
    if let Some(m) = run.test.as_ref().and_then(|t| t.metrics.as_ref()) {
        let _ = writeln!(s, "accuracy={:.6}", m.accuracy);
        let _ = writeln!(s, "macro_f1={:.6}", m.macro_f1);
    }
    if let Some(p) = &run.checkpoint {
        let _ = writeln!(s, "checkpoint={}", p.display());
    }
    let _ = writeln!(s, "warnings={}", run.warnings.len());
    s
}
