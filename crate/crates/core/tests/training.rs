use mtslof::backbone::{ModelConfig, PatcherConfig};
use mtslof::data::{generate_synthetic, split, Dataset, SplitSpec, SyntheticConfig};
use mtslof::layers::TransformerConfig;
use mtslof::ssl::MaskConfig;
use mtslof::train::{
    evaluate, finetune, history_csv, label_subset, linear_probe, pretrain, summary, transfer_eval, OptimConfig,
    Prepared, TrainConfig,
};
use mtslof::{Error, Model};

fn model_cfg() -> ModelConfig {
    ModelConfig {
        patcher: PatcherConfig {
            first_kernel: 8,
            first_stride: 1,
            channel_widths: [8, 16, 16, 16],
            input_channels: 2,
        },
        encoder: TransformerConfig {
            model_dim: 16,
            heads: 2,
            depth: 1,
            ffn_multiplier: 2,
            dropout: 0.0,
            pre_norm: true,
        },
        decoder_depth: 1,
        series_length: 64,
        class_count: 3,
        bn_momentum: 0.1,
    }
}

fn data(seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        length: 64,
        samples_per_class: 20,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        optim: OptimConfig {
            epochs,
            batch_size: 16,
            learning_rate: 1e-3,
            ..Default::default()
        },
        mask: MaskConfig {
            ratio: 0.5,
            count: 4,
            seed: 0,
        },
        ..Default::default()
    }
}

#[test]
fn zero_epochs_leave_initialization() {
    let ds = data(1);
    let (m, run) = pretrain(&ds, model_cfg(), &train_cfg(0), 5).unwrap();
    assert!(run.history.is_empty());
    let init = Model::<f32>::new(model_cfg(), 5).unwrap();
    for (id, e) in init.params.iter() {
        assert_eq!(m.params.get(id).data(), e.value.data(), "{}", e.name);
    }
}

#[test]
fn pretraining_is_deterministic_and_learns() {
    let ds = data(2);
    let cfg = train_cfg(4);
    let (a, ra) = pretrain(&ds, model_cfg(), &cfg, 9).unwrap();
    let (b, rb) = pretrain(&ds, model_cfg(), &cfg, 9).unwrap();
    assert_eq!(ra.history, rb.history);
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(ra.history.len(), 4);
    assert!(ra.history[3].train.loss < ra.history[0].train.loss);
    // the head never moves
    let init = Model::<f32>::new(model_cfg(), 9).unwrap();
    assert_eq!(a.params.get(a.backbone.head.weight).data(), init.params.get(init.backbone.head.weight).data());
}

#[test]
fn probe_only_changes_head() {
    let ds = data(3);
    let (m, _) = pretrain(&ds, model_cfg(), &train_cfg(1), 1).unwrap();
    let before = m.to_bytes().unwrap();
    let (probed, run, metrics) = linear_probe(&ds, &m, &train_cfg(3), 1).unwrap();
    assert_eq!(m.to_bytes().unwrap(), before);
    for (id, e) in m.params.iter() {
        if !e.name.starts_with("head.") {
            assert_eq!(probed.params.get(id).data(), e.value.data(), "{}", e.name);
        }
    }
    assert_eq!(run.history.len(), 3);
    assert!(run.history.iter().all(|r| r.val.is_some()));
    assert!((0.0..=1.0).contains(&metrics.accuracy));
    let csv = history_csv(&run, 3);
    assert!(csv.starts_with("epoch,split,loss,accuracy,macro_f1,per_class_f1_0,per_class_f1_1,per_class_f1_2\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2 + 1);
    assert!(summary(&run).contains("mode=probe"));
}

#[test]
fn constant_labels_give_majority_baseline() {
    let mut ds = data(4);
    ds.labels.iter_mut().for_each(|l| *l = 1);
    let (m, _) = pretrain(&ds, model_cfg(), &train_cfg(0), 1).unwrap();
    let (_, _, metrics) = linear_probe(&ds, &m, &train_cfg(5), 1).unwrap();
    assert_eq!(metrics.accuracy, 1.0);
    // absent classes score zero, so macro-F1 is 1/c
    assert!((metrics.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn finetune_subset_contract() {
    let ds = data(5);
    let sp = split(ds.len(), &SplitSpec::default()).unwrap();
    let a = label_subset(&sp.train, 0.05, 7).unwrap();
    assert_eq!(a, label_subset(&sp.train, 0.05, 7).unwrap());
    assert_eq!(a.len(), ((0.05 * sp.train.len() as f64).round() as usize).max(1));
    assert!(a.iter().all(|i| sp.train.contains(i)));
    assert_eq!(label_subset(&sp.train, 1.0, 7).unwrap().len(), sp.train.len());
    assert!(label_subset(&sp.train, 0.0, 7).is_err());

    let (m, _) = pretrain(&ds, model_cfg(), &train_cfg(0), 1).unwrap();
    let (_, run, _) = finetune(&ds, &m, 0.05, &train_cfg(1), 7).unwrap();
    assert_eq!(run.train_samples, 2);
    assert!(run.warnings.iter().any(|w| w.contains("lacks classes")));
}

#[test]
fn memorizes_tiny_training_set() {
    let ds = data(6);
    let (m, _) = pretrain(&ds, model_cfg(), &train_cfg(0), 1).unwrap();
    let cfg = TrainConfig {
        optim: OptimConfig {
            epochs: 60,
            batch_size: 8,
            learning_rate: 3e-3,
            ..Default::default()
        },
        ..train_cfg(0)
    };
    let tiny = ds.subset(&(0..60).step_by(6).collect::<Vec<_>>());
    let (mut tuned, _, _) = finetune(&tiny, &m, 1.0, &cfg, 3).unwrap();
    let prep = Prepared::new(&tiny, &cfg.split, tuned.norm.as_ref()).unwrap();
    let rec = evaluate(&mut tuned, &prep.data, &prep.split.train).unwrap();
    assert_eq!(rec.metrics.unwrap().accuracy, 1.0);
}

#[test]
fn transfer_contracts() {
    let ds = data(7);
    let (m, _) = pretrain(&ds, model_cfg(), &train_cfg(1), 2).unwrap();
    let (_, _, in_domain) = linear_probe(&ds, &m, &train_cfg(2), 4).unwrap();
    let (_, same) = transfer_eval(&m, &ds, &train_cfg(2), 4).unwrap();
    assert_eq!(same, in_domain);

    let short = generate_synthetic(&SyntheticConfig {
        length: 48,
        samples_per_class: 5,
        ..Default::default()
    })
    .unwrap();
    assert!(matches!(transfer_eval(&m, &short, &train_cfg(1), 4), Err(Error::Shape { .. })));
}
