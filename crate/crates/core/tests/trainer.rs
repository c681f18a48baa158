use std::fs;

use dwc::data::{Dataset, DatasetParams, Triplet};
use dwc::model::{DwcModel, Stream};
use dwc::trainer::{read_metrics, train, Alternation, TrainConfig, Trainer, CHECKPOINT_FILE, METRICS_FILE};
use dwc::Error;

fn small_dataset() -> Dataset {
    Dataset::generate(DatasetParams {
        n: 96,
        ..Default::default()
    })
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        dim: 8,
        batch_size: 4,
        epochs: 2,
        learning_rate: 0.05,
        log_wall_time: false,
        ..Default::default()
    }
}

fn batch(ds: &Dataset) -> Vec<Triplet> {
    ds.train[..4].to_vec()
}

/// Loss of one step evaluated at `model`, before its update.
fn loss_at(trainer: &mut Trainer, model: &DwcModel, b: &[Triplet], stream: Stream) -> f64 {
    trainer.model = model.clone();
    trainer.train_step(b, stream).unwrap().l_total
}

fn check_update_is_scaled_gradient(stream: Stream, names: &[&str]) {
    let ds = small_dataset();
    // Soft labels are detached constants while finite differences would see
    // them move, so compare with hard labels only.
    let cfg = TrainConfig {
        no_ssg: true,
        ..small_config()
    };
    let lr = cfg.learning_rate;
    let mut trainer = Trainer::new(cfg, &ds).unwrap();
    let b = batch(&ds);
    let before = trainer.model.clone();
    trainer.train_step(&b, stream).unwrap();
    let after = trainer.model.clone();
    let h = 1e-5;
    for name in names {
        let id = before.store.find(name).unwrap_or_else(|| panic!("no param {name}"));
        for k in [0, before.store.get(id).numel() / 2] {
            let mut plus = before.clone();
            plus.store.get_mut(id).data_mut()[k] += h;
            let mut minus = before.clone();
            minus.store.get_mut(id).data_mut()[k] -= h;
            let numeric =
                (loss_at(&mut trainer, &plus, &b, stream) - loss_at(&mut trainer, &minus, &b, stream)) / (2.0 * h);
            let step = before.store.get(id).data()[k] - after.store.get(id).data()[k];
            let rel = (step - lr * numeric).abs() / (lr * numeric).abs().max(1e-9);
            assert!(rel < 1e-4, "{name}[{k}]: update {step} vs lr*grad {}", lr * numeric);
        }
    }
}

#[test]
fn trainable_update_is_learning_rate_times_gradient() {
    check_update_is_scaled_gradient(
        Stream::Trainable,
        &[
            "enc.conv1.weight",
            "enc.conv2.bias",
            "enc.embed",
            "enc.rnn.wh",
            "emd.combiner.weight",
        ],
    );
}

#[test]
fn frozen_head_update_is_learning_rate_times_gradient() {
    let ds = small_dataset();
    let m = DwcModel::new(ds.schema(), small_config().model_config()).unwrap();
    let names: Vec<String> = m
        .stream_params(Stream::Frozen)
        .iter()
        .map(|&id| m.store.name(id).to_string())
        .collect();
    assert!(!names.is_empty());
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    check_update_is_scaled_gradient(Stream::Frozen, &refs);
}

#[test]
fn a_step_only_moves_the_active_stream() {
    let ds = small_dataset();
    let mut trainer = Trainer::new(small_config(), &ds).unwrap();
    let b = batch(&ds);
    for stream in [Stream::Trainable, Stream::Frozen] {
        let before = trainer.model.clone();
        trainer.train_step(&b, stream).unwrap();
        let active = before.stream_params(stream);
        let mut moved = 0;
        for id in before.store.ids() {
            let changed = before.store.get(id) != trainer.model.store.get(id);
            if active.contains(&id) {
                moved += usize::from(changed);
            } else {
                assert!(!changed, "{} moved during a {stream} step", before.store.name(id));
            }
        }
        assert!(moved > 0, "no {stream} parameter moved");
    }
}

#[test]
fn no_distill_total_equals_contrastive_term() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        no_distill: true,
        ..small_config()
    };
    let out = train(&cfg, &ds, None).unwrap();
    assert!(!out.metrics.is_empty());
    for m in &out.metrics {
        assert_eq!(m.l_distill, 0.0);
        assert_eq!(m.l_total, m.l_mmc);
    }
}

#[test]
fn distillation_is_active_by_default() {
    let ds = small_dataset();
    let out = train(&small_config(), &ds, None).unwrap();
    let streams: Vec<&str> = out.metrics.iter().map(|m| m.stream.as_str()).collect();
    assert_eq!(streams, ["trainable", "frozen", "trainable", "frozen"]);
    for m in &out.metrics {
        assert!(m.l_distill > 0.0);
        assert!((m.l_total - m.l_mmc - m.l_distill).abs() < 1e-12);
        let a = m.mean_alpha.unwrap();
        assert!(a > 0.0 && a < 1.0);
    }
}

#[test]
fn single_stream_trains_every_step_without_distillation() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        single_stream: true,
        ..small_config()
    };
    let trainer = Trainer::new(cfg.clone(), &ds).unwrap();
    assert!((0..6).all(|s| trainer.stream_for(0, s) == Stream::Trainable));
    let out = train(&cfg, &ds, None).unwrap();
    assert_eq!(out.metrics.len(), 2);
    assert!(out
        .metrics
        .iter()
        .all(|m| m.stream == "trainable" && m.l_distill == 0.0));
}

#[test]
fn no_emd_logs_no_alpha_and_leaves_the_frozen_side_fixed() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        no_emd: true,
        ..small_config()
    };
    let before = DwcModel::new(ds.schema(), cfg.model_config()).unwrap();
    assert!(before.stream_params(Stream::Frozen).is_empty());
    let out = train(&cfg, &ds, None).unwrap();
    assert!(out.metrics.iter().all(|m| m.mean_alpha.is_none()));
    assert!(out.metrics.iter().any(|m| m.stream == "frozen"));
    let frozen = before.frozen.as_ref().unwrap().params();
    for id in frozen {
        assert_eq!(before.store.get(id), out.model.store.get(id));
    }
}

#[test]
fn epoch_alternation_switches_per_epoch() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        alternation: Alternation::Epoch,
        ..small_config()
    };
    let trainer = Trainer::new(cfg.clone(), &ds).unwrap();
    assert_eq!(trainer.stream_for(0, 1), Stream::Trainable);
    assert_eq!(trainer.stream_for(1, 0), Stream::Frozen);
    let out = train(&cfg, &ds, None).unwrap();
    let streams: Vec<&str> = out.metrics.iter().map(|m| m.stream.as_str()).collect();
    assert_eq!(streams, ["trainable", "frozen"]);
}

#[test]
fn identical_seeds_reproduce_logs_and_checkpoints() {
    let ds = small_dataset();
    let cfg = small_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&cfg, &ds, Some(a.path())).unwrap();
    train(&cfg, &ds, Some(b.path())).unwrap();
    for file in [METRICS_FILE, CHECKPOINT_FILE, "model.bin"] {
        assert_eq!(
            fs::read(a.path().join(file)).unwrap(),
            fs::read(b.path().join(file)).unwrap(),
            "{file}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    train(&TrainConfig { seed: 1, ..cfg }, &ds, Some(c.path())).unwrap();
    assert_ne!(
        fs::read(a.path().join("model.bin")).unwrap(),
        fs::read(c.path().join("model.bin")).unwrap()
    );
}

#[test]
fn metrics_file_has_exactly_the_logged_fields() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small_config(), &ds, Some(dir.path())).unwrap();
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(
            keys,
            [
                "epoch",
                "l_distill",
                "l_mmc",
                "l_total",
                "mean_alpha",
                "seconds",
                "stream"
            ]
        );
        assert_eq!(v["seconds"], 0.0);
    }
    assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), out.metrics);
}

#[test]
fn wall_time_is_logged_when_enabled() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        log_wall_time: true,
        epochs: 1,
        ..small_config()
    };
    let out = train(&cfg, &ds, None).unwrap();
    assert!(out.metrics.iter().all(|m| m.seconds > 0.0));
}

#[test]
fn divergence_stops_with_a_batch_dump() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..small_config()
    };
    match train(&cfg, &ds, Some(dir.path())) {
        Err(Error::NonFinite { dump, .. }) => {
            let text = fs::read_to_string(&dump).unwrap();
            assert!(dump.starts_with(dir.path()));
            assert!(text.starts_with("query_id\ttarget_id\tdominance\ttokens\n"));
            assert_eq!(text.lines().count(), 1 + cfg.batch_size);
        }
        other => panic!("expected a non-finite error, got {:?}", other.map(|o| o.metrics)),
    }
}

#[test]
fn rejects_invalid_batches_and_configs() {
    let ds = small_dataset();
    let mut trainer = Trainer::new(small_config(), &ds).unwrap();
    assert!(matches!(
        trainer.train_step(&[], Stream::Trainable),
        Err(Error::Param(_))
    ));
    assert!(matches!(
        trainer.train_step(&ds.train[..5], Stream::Trainable),
        Err(Error::Param(_))
    ));
    let mut single = Trainer::new(
        TrainConfig {
            single_stream: true,
            ..small_config()
        },
        &ds,
    )
    .unwrap();
    assert!(matches!(
        single.train_step(&batch(&ds), Stream::Frozen),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        Trainer::new(
            TrainConfig {
                lambda: 1.5,
                ..small_config()
            },
            &ds
        ),
        Err(Error::Config(_))
    ));
    let tiny = Dataset::generate(DatasetParams {
        n: 8,
        ..Default::default()
    })
    .unwrap();
    assert!(matches!(
        train(
            &TrainConfig {
                batch_size: 32,
                ..small_config()
            },
            &tiny,
            None
        ),
        Err(Error::Param(_))
    ));
}
