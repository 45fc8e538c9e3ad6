use std::io::Cursor;

use super::*;
use crate::model::Hyperparams;
use crate::params::Grads;
use crate::tensor::Tensor;
use crate::vocab::parse_pretrained;

fn corpus() -> Vec<Pair> {
    [
        ("the big dog ran home", "the dog ran home"),
        ("a small cat sat on the mat", "a cat sat"),
        ("the dog saw a cat", "the dog saw the cat"),
        ("zorp ate the big mat", "zorp ate the mat"),
        ("the old man walked slowly home", "the man walked home"),
        ("a cat ran", "a cat ran"),
    ]
    .iter()
    .map(|(s, t)| Pair::from_text(s, t))
    .collect()
}

fn hp() -> Hyperparams {
    Hyperparams {
        hidden: 6,
        layers: 1,
        embedding_dim: 4,
        max_len: 10,
        output_min_count: 2,
        ..Hyperparams::default()
    }
}

fn config() -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        dropout: 0.2,
        validation_sample: 16,
        patience: 1,
        max_epochs: 3,
        seed: 7,
        stopping: StopCriterion::Loss,
    }
}

fn model(hp: Hyperparams) -> Seq2Seq {
    Seq2Seq::build(hp, &corpus(), None, 11).unwrap()
}

#[test]
fn adam_descends_a_convex_quadratic() {
    let target = [1.5, -2.0, 0.25];
    let curv = [1.0, 4.0, 0.5];
    let mut store = ParamStore::new();
    store.add("x", Tensor::vector(vec![0.0; 3]));
    let mut adam = Adam::with_rates(&store, 0.01, BETA1, BETA2, EPSILON);
    let f = |x: &[f64]| -> f64 {
        x.iter()
            .zip(&target)
            .zip(&curv)
            .map(|((x, c), a)| a * (x - c) * (x - c))
            .sum()
    };
    let mut prev = f(store.values()[0].data());
    let mut converged = None;
    for step in 1..=20_000 {
        let x = store.values()[0].data().to_vec();
        let g: Vec<f64> = x
            .iter()
            .zip(&target)
            .zip(&curv)
            .map(|((x, c), a)| 2.0 * a * (x - c))
            .collect();
        adam.step(&mut store, &Grads(vec![g])).unwrap();
        let now = f(store.values()[0].data());
        if step > 50 && step < 300 {
            assert!(now <= prev + 1e-12, "step {step}: {now} > {prev}");
        }
        prev = now;
        let dist = store.values()[0]
            .data()
            .iter()
            .zip(&target)
            .map(|(x, c)| (x - c).abs())
            .fold(0.0, f64::max);
        if dist < 1e-6 {
            converged = Some(step);
            break;
        }
    }
    assert!(converged.is_some(), "no convergence, loss {prev}");
}

#[test]
fn validation_of_one_pair_is_its_loss() {
    let m = model(hp());
    let p = corpus()[0].clone();
    let direct = m.pair_losses(&[&p], false).unwrap()[0];
    let v = evaluate_validation(&m, std::slice::from_ref(&p), false).unwrap();
    assert_eq!(v, direct);
    assert!(evaluate_validation(&m, &[], false).is_err());
}

#[test]
fn validation_ignores_pair_order() {
    let m = model(hp());
    let pairs = corpus();
    let mut rev = pairs.clone();
    rev.reverse();
    for bce in [false, true] {
        assert_eq!(
            evaluate_validation(&m, &pairs, bce).unwrap(),
            evaluate_validation(&m, &rev, bce).unwrap()
        );
    }
}

#[test]
fn empty_splits_are_rejected() {
    assert!(Trainer::new(model(hp()), Vec::new(), &corpus(), config()).is_err());
    assert!(Trainer::new(model(hp()), corpus(), &[], config()).is_err());
    let bad = TrainConfig {
        batch_size: 0,
        ..config()
    };
    assert!(Trainer::new(model(hp()), corpus(), &corpus(), bad).is_err());
}

#[test]
fn cross_entropy_only_runs_one_phase() {
    let ckpt = train(model(hp()), corpus(), &corpus(), config()).unwrap();
    assert!(!ckpt.history.is_empty());
    assert!(ckpt.history.iter().all(|r| r.phase == Phase::CrossEntropy));
    assert!(ckpt.history.len() <= config().max_epochs);
    assert!(ckpt.state.as_ref().unwrap().progress.finished);
}

#[test]
fn patience_zero_stops_at_first_bad_check() {
    let cfg = TrainConfig {
        patience: 0,
        max_epochs: 30,
        // large learning signal per epoch is not needed; any bad check ends it
        ..config()
    };
    let ckpt = train(model(hp()), corpus(), &corpus(), cfg).unwrap();
    let first_bad = ckpt.history.iter().position(|r| !r.improved);
    match first_bad {
        Some(i) => assert_eq!(i + 1, ckpt.history.len()),
        None => assert_eq!(ckpt.history.len(), 30),
    }
}

#[test]
fn two_part_phase_follows_cross_entropy() {
    let hp = Hyperparams {
        use_bce_loss: true,
        ..hp()
    };
    let ckpt = train(model(hp), corpus(), &corpus(), config()).unwrap();
    let start = ckpt
        .history
        .iter()
        .position(|r| r.phase == Phase::TwoPart)
        .expect("phase 2 ran");
    assert!(ckpt.history[..start].iter().all(|r| r.phase == Phase::CrossEntropy));
    assert_eq!(ckpt.history[start].epoch, 0);
    assert_eq!(ckpt.history[start].train_loss, None);
    // the checkpoint keeps the best two-part score
    let best = ckpt.history[start..]
        .iter()
        .map(|r| r.valid_score)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(ckpt.best_score, Some(best));
}

#[test]
fn training_is_deterministic() {
    let a = train(model(hp()), corpus(), &corpus(), config()).unwrap();
    let b = train(model(hp()), corpus(), &corpus(), config()).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let mut t = Trainer::new(model(hp()), corpus(), &corpus(), config()).unwrap();
    t.run_for(1).unwrap();
    let ckpt = t.checkpoint();
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);

    let a = ckpt.model().unwrap();
    let b = back.model().unwrap();
    let src = crate::vocab::tokenize("the dog ran");
    assert_eq!(
        a.decode_generate(&src).unwrap().tokens,
        b.decode_generate(&src).unwrap().tokens
    );
}

#[test]
fn future_versions_are_rejected() {
    let ckpt = Trainer::new(model(hp()), corpus(), &corpus(), config())
        .unwrap()
        .checkpoint();
    let mut bytes = ckpt.to_bytes();
    bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&bytes, "mem") {
        Err(Error::Version { found, expected }) => {
            assert_eq!(found, CHECKPOINT_VERSION + 1);
            assert_eq!(expected, CHECKPOINT_VERSION);
        }
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn corrupt_files_are_rejected() {
    let bytes = Trainer::new(model(hp()), corpus(), &corpus(), config())
        .unwrap()
        .checkpoint()
        .to_bytes();
    let is_corrupt = |b: &[u8]| matches!(Checkpoint::from_bytes(b, "mem"), Err(Error::Corrupt { .. }));
    assert!(is_corrupt(&bytes[..bytes.len() - 3]));
    assert!(is_corrupt(b"hello"));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(is_corrupt(&extra));
    let mut bad_header = bytes.clone();
    bad_header[20] = b'#';
    assert!(is_corrupt(&bad_header));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let cfg = TrainConfig {
        patience: 5,
        max_epochs: 4,
        ..config()
    };
    let hp = Hyperparams {
        use_bce_loss: true,
        ..hp()
    };
    let full = train(model(hp.clone()), corpus(), &corpus(), cfg.clone()).unwrap();

    let mut t = Trainer::new(model(hp), corpus(), &corpus(), cfg).unwrap();
    let mut bytes = Vec::new();
    for _ in 0..6 {
        if t.run_for(1).unwrap() {
            break;
        }
        bytes = t.checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes, "mem").unwrap();
        t = Trainer::resume(ckpt, corpus(), &corpus()).unwrap();
    }
    let resumed = t.run().unwrap();
    assert!(!bytes.is_empty());
    assert_eq!(resumed.to_bytes(), full.to_bytes());
}

#[test]
fn fixed_embeddings_never_move() {
    let text = "the 0.1 0.2 0.3 0.4\ndog 0.5 -0.5 0.25 1.0\ncat -1 0 1 0\n";
    let table = parse_pretrained(Cursor::new(text), 4, "mem").unwrap();
    let hp = Hyperparams {
        trainable_embed_count: Some(3),
        ..hp()
    };
    let m = Seq2Seq::build(hp, &corpus(), Some(&table), 3).unwrap();
    let before = m.layout().fixed().clone();
    assert!(before.len() > 0);
    let ckpt = train(m, corpus(), &corpus(), config()).unwrap();
    assert_eq!(ckpt.layout.fixed(), &before);
    let back = Checkpoint::from_bytes(&ckpt.to_bytes(), "mem").unwrap();
    assert_eq!(back.layout.fixed(), &before);
}

#[test]
fn bleu_stopping_prefers_higher_scores() {
    let cfg = TrainConfig {
        stopping: StopCriterion::Bleu,
        max_epochs: 2,
        ..config()
    };
    let ckpt = train(model(hp()), corpus(), &corpus(), cfg).unwrap();
    let best = ckpt
        .history
        .iter()
        .map(|r| r.valid_score)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(ckpt.best_score, Some(best));
}
