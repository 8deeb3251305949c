use super::*;
use crate::datagen::{build_corpus, SynthConfig};
use crate::tsre::Variant;

fn adam_cfg(lr: f64, wd: f64) -> AdamConfig {
    AdamConfig {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: wd,
    }
}

#[test]
fn adam_two_step_trace() {
    let cfg = adam_cfg(0.1, 0.01);
    let mut theta = vec![1.0, -2.0];
    let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
    adam_update(&mut theta, &[0.5, -1.0], &mut m, &mut v, 1, &cfg);
    // first step: m̂ = g, v̂ = g², so the move is lr·(sign g + wd·θ) up to ε
    assert!((theta[0] - 0.899000002).abs() < 1e-12);
    assert!((theta[1] + 1.898000001).abs() < 1e-12);
    adam_update(&mut theta, &[0.1, 0.3], &mut m, &mut v, 2, &cfg);
    assert!((theta[0] - 0.8177969063826518).abs() < 1e-12);
    assert!((theta[1] + 1.8533171424282264).abs() < 1e-12);
    assert!((m[0] - 0.055).abs() < 1e-15 && (v[1] - 0.001089).abs() < 1e-15);
}

#[test]
fn zero_lr_is_a_no_op_and_decay_alone_shrinks() {
    let mut theta = vec![0.3, -0.7];
    let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
    adam_update(&mut theta, &[1.0, 2.0], &mut m, &mut v, 1, &adam_cfg(0.0, 0.5));
    assert_eq!(theta, vec![0.3, -0.7]);
    let mut theta2 = vec![0.3, -0.7];
    let (mut m2, mut v2) = (vec![0.0; 2], vec![0.0; 2]);
    adam_update(&mut theta2, &[0.0, 0.0], &mut m2, &mut v2, 1, &adam_cfg(0.1, 0.5));
    assert!((theta2[0] - 0.3 * 0.95).abs() < 1e-15);
    assert!((theta2[1] + 0.7 * 0.95).abs() < 1e-15);
}

#[test]
fn stage_names_round_trip() {
    for s in [Stage::Base, Stage::TsreFinetune] {
        assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        assert_eq!(serde_json::to_value(s).unwrap(), s.name());
    }
    assert!("warmup".parse::<Stage>().is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        },
        TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            val_every: 0,
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn batches_are_a_function_of_step() {
    let n = 23;
    let a = batch_indices(4, 7, n, 5).unwrap();
    assert_eq!(a, batch_indices(4, 7, n, 5).unwrap());
    // one epoch (4 full batches) covers distinct samples
    let mut seen: Vec<usize> = (0..4).flat_map(|s| batch_indices(4, s, n, 5).unwrap()).collect();
    seen.sort_unstable();
    seen.dedup();
    assert_eq!(seen.len(), 20);
    assert_ne!(batch_indices(4, 0, n, 5).unwrap(), batch_indices(4, 4, n, 5).unwrap());
    assert!(batch_indices(0, 0, 3, 5).is_err());
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        num_layers: 1,
        hidden_dim: 16,
        num_heads: 2,
        ff_dim: 16,
        embed_dim: 8,
        ..EncoderConfig::default()
    }
}

fn tiny_corpus(k: usize) -> Corpus {
    build_corpus(&SynthConfig {
        num_images: 24,
        num_speakers: 6,
        k,
        seed: 5,
        split_images: [16, 4, 4],
        ..SynthConfig::default()
    })
    .unwrap()
}

fn spec(stage: Stage, steps: u64) -> RunSpec {
    RunSpec {
        encoder: tiny_encoder(),
        tsre: (stage == Stage::TsreFinetune).then(|| TsreConfig::new(Variant::Scl)),
        loss: LossConfig::default(),
        train: TrainConfig {
            learning_rate: 3e-3,
            batch_size: 8,
            max_steps: steps,
            seed: 11,
            stage,
            val_every: 3,
            ..TrainConfig::default()
        },
    }
}

#[test]
fn base_training_reduces_loss_and_keeps_image_frozen() {
    let corpus = tiny_corpus(1);
    let s = spec(Stage::Base, 12);
    let fresh = RetrievalModel::new(s.encoder.clone(), s.train.seed).unwrap();
    let out = train(&s, &corpus, None, &RunOutput::default()).unwrap();
    let first: f64 = out.log[..2].iter().map(|e| e.loss).sum();
    let last: f64 = out.log[10..].iter().map(|e| e.loss).sum();
    assert!(last < first, "loss {first} -> {last}");
    assert_eq!(out.last.step, 12);
    assert_eq!(out.last.adam.step, 12);
    let proj = |p: &ParamStore| p.by_path("image/proj").unwrap().data().to_vec();
    assert_eq!(proj(&out.last.params), proj(&fresh.params));
    assert_ne!(
        out.last.params.by_path("speech/input/w").unwrap().data(),
        fresh.params.by_path("speech/input/w").unwrap().data()
    );
    assert_eq!(out.log.iter().filter(|e| e.val.is_some()).count(), 4);
    let best = out.best.best.unwrap();
    assert_eq!(best.step, out.best.step);
}

#[test]
fn training_is_deterministic() {
    let corpus = tiny_corpus(1);
    let s = spec(Stage::Base, 4);
    let a = train(&s, &corpus, None, &RunOutput::default()).unwrap();
    let b = train(&s, &corpus, None, &RunOutput::default()).unwrap();
    assert_eq!(a.last, b.last);
    assert_eq!(a.log, b.log);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let corpus = tiny_corpus(1);
    let dir = tempfile::tempdir().unwrap();
    let full = train(&spec(Stage::Base, 7), &corpus, None, &RunOutput::default()).unwrap();

    let out = RunOutput {
        dir: Some(dir.path().to_path_buf()),
    };
    train(&spec(Stage::Base, 4), &corpus, None, &out).unwrap();
    let ck = Checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(ck.step, 4);
    let resumed = train(&spec(Stage::Base, 7), &corpus, Some(&ck), &out).unwrap();
    assert_eq!(resumed.last.params, full.last.params);
    assert_eq!(resumed.last.adam, full.last.adam);
    let lines = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let logged: Vec<LogEntry> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(logged.iter().map(|e| e.step).collect::<Vec<_>>(), (1..=7).collect::<Vec<_>>());
    assert_eq!(logged.last().unwrap().loss, full.log.last().unwrap().loss);
}

#[test]
fn resume_rejects_a_different_config() {
    let corpus = tiny_corpus(1);
    let ck = train(&spec(Stage::Base, 2), &corpus, None, &RunOutput::default()).unwrap().last;
    let mut other = spec(Stage::Base, 4);
    other.train.learning_rate = 1e-2;
    assert!(matches!(train(&other, &corpus, Some(&ck), &RunOutput::default()), Err(Error::Config(_))));
}

#[test]
fn finetune_trains_only_adapters_and_head() {
    let base_corpus = tiny_corpus(1);
    let base = train(&spec(Stage::Base, 3), &base_corpus, None, &RunOutput::default()).unwrap().last;
    let corpus = tiny_corpus(2);
    let out = train(&spec(Stage::TsreFinetune, 3), &corpus, Some(&base), &RunOutput::default()).unwrap();
    let after = &out.last.params;
    let mut changed_head = false;
    for (_, path, t) in base.params.iter() {
        let now = after.by_path(path).unwrap().data();
        if FINETUNE_FROZEN.iter().any(|f| path.starts_with(f)) || path.starts_with(IMAGE_PREFIX) {
            assert_eq!(now, t.data(), "{path} moved");
        } else if path.starts_with("speech/head/") && now != t.data() {
            changed_head = true;
        }
    }
    assert!(changed_head);
    assert!(out.last.tsre_param_count() > 0);
    assert!(out.last.model().unwrap().tsre().is_some());
}

#[test]
fn finetune_requires_base_checkpoint() {
    let corpus = tiny_corpus(2);
    let err = train(&spec(Stage::TsreFinetune, 2), &corpus, None, &RunOutput::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn checkpoint_round_trips_through_container() {
    let corpus = tiny_corpus(1);
    let base = train(&spec(Stage::Base, 2), &corpus, None, &RunOutput::default()).unwrap().last;
    let ft = train(&spec(Stage::TsreFinetune, 2), &tiny_corpus(2), Some(&base), &RunOutput::default())
        .unwrap()
        .last;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    ft.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ft);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"TSRELAB1");
}

#[test]
fn non_finite_training_is_numerical_error() {
    let corpus = tiny_corpus(1);
    let mut s = spec(Stage::Base, 3);
    s.train.learning_rate = 1e300;
    match train(&s, &corpus, None, &RunOutput::default()) {
        Err(e) => assert!(e.is_numerical(), "{e}"),
        Ok(_) => panic!("expected divergence"),
    }
}
