use molmark::codec::{CodecConfig, Variant};
use molmark::molecule::Molecule;
use molmark::synth::synthetic_corpus;
use molmark::training::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, EpochMetrics, StopRule, TrainConfig, Trainer,
};

fn tiny(epochs: usize, seed: u64) -> TrainConfig {
    let mut codec = CodecConfig::new(4);
    codec.channels = 4;
    codec.d_model = 4;
    codec.growth = 2;
    let mut cfg = TrainConfig::new(codec, epochs, seed);
    cfg.batch_size = 4;
    cfg.augment = true;
    cfg
}

fn corpus() -> Vec<Molecule> {
    synthetic_corpus(10, 4, 8, 77).unwrap()
}

fn run(cfg: TrainConfig) -> (Vec<EpochMetrics>, Trainer<f64>) {
    let mut t = Trainer::<f64>::new(cfg).unwrap();
    let trace = t.train(&corpus(), |_, _| Ok(())).unwrap();
    (trace, t)
}

#[test]
fn same_seed_same_trace() {
    let (a, ta) = run(tiny(4, 3));
    let (b, tb) = run(tiny(4, 3));
    assert_eq!(a, b);
    assert_eq!(checkpoint_bytes(&ta.state), checkpoint_bytes(&tb.state));
    let (c, _) = run(tiny(4, 4));
    assert_ne!(a, c);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (full, done) = run(tiny(6, 9));
    let (head, half) = run(tiny(3, 9));
    assert_eq!(&full[..3], &head[..]);

    let mut state = checkpoint_from_bytes::<f64>(&checkpoint_bytes(&half.state)).unwrap();
    state.config.epochs = 6;
    let mut resumed = Trainer::from_checkpoint(state).unwrap();
    let tail = resumed.train(&corpus(), |_, _| Ok(())).unwrap();
    assert_eq!(&full[3..], &tail[..]);
    assert_eq!(checkpoint_bytes(&done.state)[..], checkpoint_bytes(&resumed.state)[..]);
}

#[test]
fn train_to_dir_writes_log_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(4, 1);
    cfg.checkpoint_every = 2;
    let mut t = Trainer::<f32>::new(cfg).unwrap();
    t.train_to_dir(&corpus(), dir.path()).unwrap();
    let log = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "L_E", "L_D", "gamma", "lambda_E", "lambda_D", "displacement"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    for f in ["checkpoint_epoch0002.mwm", "checkpoint_epoch0004.mwm", "checkpoint.mwm"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let back = load_checkpoint::<f32>(&dir.path().join("checkpoint.mwm")).unwrap();
    assert_eq!(back.epoch, 4);
    assert_eq!(checkpoint_bytes(&back), checkpoint_bytes(&t.state));
}

#[test]
fn stop_rule_ends_training_early() {
    let mut cfg = tiny(50, 2);
    cfg.stop = Some(StopRule {
        accuracy: 0.0,
        displacement: f64::INFINITY,
        patience: 2,
    });
    let (trace, t) = run(cfg);
    assert_eq!(trace.len(), 2);
    assert_eq!(t.state.epoch, 2);
}

#[test]
fn every_variant_trains() {
    for v in Variant::ALL {
        let mut cfg = tiny(2, 5);
        cfg.codec = cfg.codec.with_variant(v);
        let (trace, _) = run(cfg);
        assert!(trace.iter().all(|m| m.loss_e.is_finite() && m.loss_d.is_finite()), "{v}");
    }
}

#[test]
fn checkpoint_layout_must_match_config() {
    let (_, t) = run(tiny(0, 1));
    let mut state = t.state.clone();
    state.config.codec.channels = 6;
    assert!(Trainer::from_checkpoint(state).is_err());
}
