//! Command implementations. Every artifact is written atomically.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;

use mtslof::backbone::ModelConfig;
use mtslof::data::{generate_synthetic, import_csv, load_dataset, write_dataset, Dataset};
use mtslof::train::{
    evaluate, features, finetune, history_csv, linear_probe, pretrain, Metrics, Prepared, TrainRun,
};
use mtslof::Model;

use crate::config::{check_masks, usage, EvalSplit, RunConfig, MODEL_KEYS};
use crate::Usage;

/// Writes through a temporary file in the target directory, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Reads the binary dataset format, or single-channel CSV for `.csv` paths.
pub fn load_data(path: &Path) -> Result<Dataset> {
    let ds = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        import_csv(&text, &name)
    } else {
        load_dataset(path)
    };
    ds.with_context(|| format!("loading dataset {}", path.display()))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Usage(format!("--{key} is required for this command")).into())
}

/// `dir/seed-<seed>.ckpt` when `path` is a directory, else `path` itself.
pub fn checkpoint_for(path: &Path, seed: u64) -> PathBuf {
    if path.is_dir() {
        path.join(format!("seed-{seed}.ckpt"))
    } else {
        path.to_path_buf()
    }
}

fn model_value(m: &ModelConfig, key: &str) -> String {
    let w = m.patcher.channel_widths;
    match key {
        "first_kernel" => m.patcher.first_kernel.to_string(),
        "first_stride" => m.patcher.first_stride.to_string(),
        "widths" => format!("{},{},{}", w[0], w[1], w[2]),
        "d_model" => m.encoder.model_dim.to_string(),
        "heads" => m.encoder.heads.to_string(),
        "depth" => m.encoder.depth.to_string(),
        "ffn_multiplier" => m.encoder.ffn_multiplier.to_string(),
        "decoder_depth" => m.decoder_depth.to_string(),
        _ => String::new(),
    }
}

/// Rejects data or explicit model settings that disagree with a checkpoint, naming the field.
fn check_compat(cfg: &RunConfig, model: &ModelConfig, ds: &Dataset, path: &Path) -> Result<()> {
    let fields = [
        ("channels", model.patcher.input_channels, ds.channels),
        ("length", model.series_length, ds.length),
    ];
    for (name, want, got) in fields {
        if want != got {
            return Err(Usage(format!(
                "{name} mismatch: checkpoint {} expects {name}={want}, dataset has {name}={got}",
                path.display()
            ))
            .into());
        }
    }
    for &key in MODEL_KEYS {
        if !cfg.explicit.contains(key) {
            continue;
        }
        let (have, want) = (model_value(model, key), cfg.get(key));
        if have != want {
            return Err(Usage(format!(
                "{key} mismatch: checkpoint {} has {key}={have}, config has {key}={want}",
                path.display()
            ))
            .into());
        }
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, ds: &Dataset, seed: u64) -> Result<(Model<f32>, PathBuf)> {
    let path = checkpoint_for(required(&cfg.checkpoint, "checkpoint")?, seed);
    let model = Model::<f32>::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    check_compat(cfg, &model.cfg, ds, &path)?;
    Ok((model, path))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// One downstream result per seed.
struct SeedResult {
    seed: u64,
    train_samples: usize,
    metrics: Metrics,
}

/// `seed,train_samples,accuracy,macro_f1` rows followed by their mean.
fn metrics_csv(rows: &[SeedResult]) -> String {
    let mut s = String::from("seed,train_samples,accuracy,macro_f1\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6}",
            r.seed, r.train_samples, r.metrics.accuracy, r.metrics.macro_f1
        );
    }
    let _ = writeln!(
        s,
        "mean,{:.6},{:.6},{:.6}",
        mean(rows.iter().map(|r| r.train_samples as f64)),
        mean(rows.iter().map(|r| r.metrics.accuracy)),
        mean(rows.iter().map(|r| r.metrics.macro_f1))
    );
    s
}

fn print_final(rows: &[SeedResult]) {
    for r in rows {
        println!(
            "seed={} train_samples={} accuracy={:.6} macro_f1={:.6}",
            r.seed, r.train_samples, r.metrics.accuracy, r.metrics.macro_f1
        );
    }
    println!(
        "accuracy={:.6} macro_f1={:.6}",
        mean(rows.iter().map(|r| r.metrics.accuracy)),
        mean(rows.iter().map(|r| r.metrics.macro_f1))
    );
}

fn write_run(dir: &Path, model: &Model<f32>, run: &TrainRun, classes: usize) -> Result<()> {
    write_atomic(&dir.join(format!("seed-{}.ckpt", run.seed)), &model.to_bytes()?)?;
    write_atomic(&dir.join(format!("seed-{}.csv", run.seed)), history_csv(run, classes).as_bytes())
}

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.out, "out")?;
    let syn = cfg.synthetic();
    syn.validate().map_err(usage)?;
    let ds = generate_synthetic(&syn)?;
    write_atomic(out, &write_dataset(&ds))?;
    println!("n={} m={} t={} c={}", ds.len(), ds.channels, ds.length, ds.classes);
    Ok(())
}

pub fn pretrain_cmd(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(required(&cfg.data, "data")?)?;
    let out = required(&cfg.out, "out")?;
    let tcfg = cfg.single_train_config()?;
    let mcfg = cfg.model_config(ds.channels, ds.length, ds.classes);
    mcfg.validate().map_err(usage)?;
    check_masks(&mcfg, tcfg.mask.count, tcfg.mask.ratio)?;
    write_atomic(&out.join("config.txt"), cfg.echo().as_bytes())?;
    let runs: Vec<Result<f64>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (model, run) = pretrain(&ds, mcfg, &tcfg, seed)?;
            write_run(out, &model, &run, ds.classes)?;
            Ok(run.history.last().map_or(f64::NAN, |r| r.train.loss))
        })
        .collect();
    let mut csv = String::from("seed,final_loss\n");
    let mut losses = Vec::new();
    for (&seed, r) in cfg.seeds.iter().zip(runs) {
        let loss = r.with_context(|| format!("pretraining seed {seed}"))?;
        println!("seed={seed} final_loss={loss:.6}");
        let _ = writeln!(csv, "{seed},{loss:.6}");
        losses.push(loss);
    }
    let _ = writeln!(csv, "mean,{:.6}", mean(losses.iter().copied()));
    write_atomic(&out.join("metrics.csv"), csv.as_bytes())?;
    println!("final_loss={:.6}", mean(losses.into_iter()));
    Ok(())
}

#[derive(Clone, Copy)]
enum Downstream {
    Probe,
    Finetune,
}

fn downstream(cfg: &RunConfig, kind: Downstream) -> Result<()> {
    let ds = load_data(required(&cfg.data, "data")?)?;
    let tcfg = cfg.single_train_config()?;
    if let Some(out) = &cfg.out {
        write_atomic(&out.join("config.txt"), cfg.echo().as_bytes())?;
    }
    let results: Vec<Result<SeedResult>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (pre, _) = load_model(cfg, &ds, seed)?;
            let (model, run, metrics) = match kind {
                Downstream::Probe => linear_probe(&ds, &pre, &tcfg, seed)?,
                Downstream::Finetune => finetune(&ds, &pre, cfg.fraction, &tcfg, seed)?,
            };
            if let Some(out) = &cfg.out {
                write_run(out, &model, &run, ds.classes)?;
            }
            Ok(SeedResult {
                seed,
                train_samples: run.train_samples,
                metrics,
            })
        })
        .collect();
    let rows = cfg
        .seeds
        .iter()
        .zip(results)
        .map(|(seed, r)| r.with_context(|| format!("seed {seed}")))
        .collect::<Result<Vec<_>>>()?;
    if let Downstream::Finetune = kind {
        for r in &rows {
            println!("seed={} fraction={} train_samples={}", r.seed, cfg.fraction, r.train_samples);
        }
    }
    if let Some(out) = &cfg.out {
        write_atomic(&out.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    }
    print_final(&rows);
    Ok(())
}

pub fn probe_cmd(cfg: &RunConfig) -> Result<()> {
    downstream(cfg, Downstream::Probe)
}

pub fn finetune_cmd(cfg: &RunConfig) -> Result<()> {
    downstream(cfg, Downstream::Finetune)
}

fn split_indices(prep: &Prepared, which: EvalSplit) -> Vec<usize> {
    match which {
        EvalSplit::Train => prep.split.train.clone(),
        EvalSplit::Val => prep.split.val.clone(),
        EvalSplit::Test => prep.split.test.clone(),
        EvalSplit::All => (0..prep.data.len()).collect(),
    }
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(required(&cfg.data, "data")?)?;
    let mut rows = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (mut model, path) = load_model(cfg, &ds, seed)?;
        if model.cfg.class_count != ds.classes {
            return Err(Usage(format!(
                "classes mismatch: checkpoint {} has classes={}, dataset has classes={}",
                path.display(),
                model.cfg.class_count,
                ds.classes
            ))
            .into());
        }
        let prep = Prepared::new(&ds, &cfg.split_spec(), model.norm.as_ref())?;
        let idx = split_indices(&prep, cfg.split);
        let rec = evaluate(&mut model, &prep.data, &idx)?;
        rows.push(SeedResult {
            seed,
            train_samples: idx.len(),
            metrics: rec.metrics.expect("evaluate scores"),
        });
    }
    if let Some(out) = &cfg.out {
        write_atomic(out, metrics_csv(&rows).as_bytes())?;
    }
    print_final(&rows);
    Ok(())
}

/// `index,label,z_0..z_{d-1}` for every sample, in dataset order.
pub fn embeddings_csv(model: &mut Model<f32>, ds: &Dataset, cfg: &RunConfig) -> Result<String> {
    let prep = Prepared::new(ds, &cfg.split_spec(), model.norm.as_ref())?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let z = features(model, &prep.data, &all)?;
    let d = model.cfg.model_dim();
    let mut s = String::from("index,label");
    for j in 0..d {
        let _ = write!(s, ",z_{j}");
    }
    s.push('\n');
    for i in 0..ds.len() {
        let _ = write!(s, "{i},{}", ds.labels[i]);
        for v in z.row(i) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_cmd(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(required(&cfg.data, "data")?)?;
    let out = required(&cfg.out, "out")?;
    let seed = cfg.seeds[0];
    let (mut model, path) = load_model(cfg, &ds, seed)?;
    let csv = embeddings_csv(&mut model, &ds, cfg)?;
    write_atomic(out, csv.as_bytes())?;
    println!(
        "rows={} dim={} checkpoint={}",
        ds.len(),
        model.cfg.model_dim(),
        path.display()
    );
    Ok(())
}

fn dedup<T: PartialEq + Copy>(xs: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::with_capacity(xs.len());
    for &x in xs {
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

/// Grid points of the mask sweep in row order, duplicates removed.
pub fn ablation_grid(cfg: &RunConfig) -> Vec<(usize, f64)> {
    let ratios = dedup(&cfg.mask_ratio);
    dedup(&cfg.num_masks)
        .into_iter()
        .flat_map(|n| ratios.iter().map(move |&r| (n, r)))
        .collect()
}

fn ablate_point(cfg: &RunConfig, ds: &Dataset, count: usize, ratio: f64, seed: u64) -> Result<Metrics> {
    let tcfg = cfg.train_config_at(count, ratio);
    let mcfg = cfg.model_config(ds.channels, ds.length, ds.classes);
    mcfg.validate().map_err(usage)?;
    check_masks(&mcfg, count, ratio)?;
    let (model, _) = pretrain(ds, mcfg, &tcfg, seed)?;
    let (_, _, metrics) = linear_probe(ds, &model, &cfg.probe_config(&tcfg), seed)?;
    Ok(metrics)
}

/// Pretrain and probe at every grid point for every seed; one row per point with the
/// seed mean, NaN when any seed failed.
pub fn ablate_cmd(cfg: &RunConfig) -> Result<()> {
    let ds = load_data(required(&cfg.data, "data")?)?;
    let out = required(&cfg.out, "out")?;
    let grid = ablation_grid(cfg);
    let jobs: Vec<(usize, u64)> = (0..grid.len())
        .flat_map(|g| cfg.seeds.iter().map(move |&s| (g, s)))
        .collect();
    let results: Vec<Result<Metrics>> = jobs
        .par_iter()
        .map(|&(g, seed)| ablate_point(cfg, &ds, grid[g].0, grid[g].1, seed))
        .collect();
    let mut csv = String::from("mask_count,mask_ratio,accuracy,macro_f1\n");
    let per_point = cfg.seeds.len();
    for (g, &(count, ratio)) in grid.iter().enumerate() {
        let chunk = &results[g * per_point..(g + 1) * per_point];
        let mut ok = Vec::with_capacity(per_point);
        for (seed, r) in cfg.seeds.iter().zip(chunk) {
            match r {
                Ok(m) => {
                    println!(
                        "mask_count={count} mask_ratio={ratio} seed={seed} accuracy={:.6} macro_f1={:.6}",
                        m.accuracy, m.macro_f1
                    );
                    ok.push(m);
                }
                Err(e) => eprintln!("warning: mask_count={count} mask_ratio={ratio} seed={seed} failed: {e:#}"),
            }
        }
        let (acc, f1) = if ok.len() == per_point {
            (
                mean(ok.iter().map(|m| m.accuracy)),
                mean(ok.iter().map(|m| m.macro_f1)),
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        let _ = writeln!(csv, "{count},{ratio},{acc:.6},{f1:.6}");
    }
    write_atomic(out, csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_dedupes_in_order() {
        let mut cfg = RunConfig::default();
        cfg.set("num_masks", "20,1,20").unwrap();
        cfg.set("mask_ratio", "0.8,0.5,0.8").unwrap();
        assert_eq!(ablation_grid(&cfg), vec![(20, 0.8), (20, 0.5), (1, 0.8), (1, 0.5)]);
    }

    #[test]
    fn checkpoint_dir_resolves_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(checkpoint_for(dir.path(), 7), dir.path().join("seed-7.ckpt"));
        let file = dir.path().join("x.ckpt");
        assert_eq!(checkpoint_for(&file, 7), file);
    }

    #[test]
    fn atomic_write_replaces_and_creates_parents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/out.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
