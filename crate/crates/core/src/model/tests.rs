use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{Tape, Tensor};
use crate::vocab::{Slot, CPY, EOS};

fn corpus() -> Vec<Pair> {
    [
        ("the big dog ran home", "the dog ran home"),
        ("a small cat sat on the mat", "a cat sat"),
        ("the dog saw a cat", "the dog saw the cat"),
        ("zorp ate the big mat", "zorp ate the mat"),
    ]
    .iter()
    .map(|(s, t)| Pair::from_text(s, t))
    .collect()
}

fn tiny_hp() -> Hyperparams {
    Hyperparams {
        hidden: 8,
        embedding_dim: 5,
        max_len: 10,
        output_min_count: 2,
        ..Hyperparams::default()
    }
}

fn tiny(hp: Hyperparams, seed: u64) -> Seq2Seq {
    Seq2Seq::build(hp, &corpus(), None, seed).unwrap()
}

fn words(s: &str) -> Vec<String> {
    crate::vocab::tokenize(s)
}

#[test]
fn variants_round_trip() {
    for name in [
        "S4",
        "S4-attn",
        "S4-feed",
        "S4+gv",
        "S4+bce",
        "S4+gv+bce",
        "S4+bce-feed",
        "S4+gv+bce-feed",
        "S4+bce-attn-feed",
    ] {
        let hp = Hyperparams::variant(name).unwrap();
        let again = Hyperparams::variant(&hp.variant_name()).unwrap();
        assert_eq!(hp, again, "{name}");
    }
    assert!(!Hyperparams::variant("S4-attn").unwrap().use_attention);
    assert!(!Hyperparams::variant("S4+bce-feed").unwrap().use_copy_feed);
    assert!(Hyperparams::variant("S5").is_err());
    assert!(Hyperparams::variant("S4+foo").is_err());
}

#[test]
fn all_flag_combinations_construct() {
    for bits in 0..8u8 {
        let hp = Hyperparams {
            use_attention: bits & 1 != 0,
            use_copy_feed: bits & 2 != 0,
            use_bce_loss: bits & 4 != 0,
            ..tiny_hp()
        };
        let m = tiny(hp, 1);
        let g = m.decode_generate(&words("the dog")).unwrap();
        assert!(g.tokens.len() <= m.hyperparams().max_len);
    }
}

#[test]
fn invalid_hyperparams_are_rejected() {
    let hp = Hyperparams {
        max_len: 0,
        ..tiny_hp()
    };
    assert!(Seq2Seq::build(hp, &corpus(), None, 0).is_err());
    assert!(Seq2Seq::build(tiny_hp(), &[], None, 0).is_err());
}

#[test]
fn parameter_count_depends_only_on_shapes() {
    let a = tiny(tiny_hp(), 1);
    let b = tiny(tiny_hp(), 2);
    assert_eq!(a.params().numel(), b.params().numel());
    assert_ne!(a.params(), b.params());
    let h = 8;
    let v = a.output_vocab().len();
    let n_in = a.input_vocab().len();
    let gru = h * 3 * h + 3 * h + h * 2 * h + h * h;
    let embed = n_in * 5 + 5 * h + h;
    let expected = embed + (embed + 5) + 4 * gru + 2 * (h * h + h) + 2 * h * v + v;
    assert_eq!(a.params().numel(), expected);
}

#[test]
fn from_params_rejects_wrong_shapes() {
    let m = tiny(tiny_hp(), 1);
    let (hp, iv, layout, ov, mut params) = m.into_parts();
    let id = params.find("out.b").unwrap();
    *params.get_mut(id) = Tensor::zeros(&[3]);
    assert!(Seq2Seq::from_params(hp, iv, layout, ov, params).is_err());
}

fn encoder_values(m: &Seq2Seq, src: &[&str]) -> (Vec<Vec<f64>>, usize) {
    let sources: Vec<Vec<String>> = src.iter().map(|s| words(s)).collect();
    let batch = m.source_batch(&sources).unwrap();
    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape);
    let enc = m.encode(&mut tape, &bound, &batch, &mut Mode::eval()).unwrap();
    let steps = enc.steps();
    let mut out = Vec::new();
    for l in 0..m.hyperparams().layers {
        for &v in enc.layer(l) {
            out.push(tape.value(v).data().to_vec());
        }
    }
    (out, steps)
}

#[test]
fn single_token_input_has_one_step() {
    let m = tiny(tiny_hp(), 3);
    let (vals, steps) = encoder_values(&m, &["dog"]);
    assert_eq!(steps, 1);
    assert_eq!(vals.len(), 2);
}

#[test]
fn empty_source_is_a_contract_error() {
    let m = tiny(tiny_hp(), 3);
    let empty: Vec<String> = Vec::new();
    assert!(matches!(m.decode_generate(&empty), Err(Error::Contract(_))));
}

#[test]
fn source_longer_than_max_len_is_truncated() {
    let m = tiny(tiny_hp(), 3);
    let long = vec!["dog".to_string(); 25];
    let batch = m.source_batch(&[long]).unwrap();
    assert_eq!(batch.source_lens(), &[10]);
}

#[test]
fn zero_weights_give_zero_hiddens() {
    let mut m = tiny(tiny_hp(), 3);
    for t in m.params_mut().values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let (vals, _) = encoder_values(&m, &["the big dog", "a cat"]);
    assert!(vals.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn encoder_is_invariant_to_vocabulary_permutation() {
    let m = tiny(tiny_hp(), 5);
    let (hp, iv, layout, ov, params) = m.clone().into_parts();
    // reverse the non-special ids and their trainable rows
    let specials = iv.num_specials();
    let n = iv.len();
    let perm: Vec<usize> = (0..n)
        .map(|i| if i < specials { i } else { n - 1 - (i - specials) })
        .collect();
    let mut tokens = vec![String::new(); n];
    let mut counts = vec![0u64; n];
    for old in 0..n {
        tokens[perm[old]] = iv.token(old).to_string();
        counts[perm[old]] = iv.count(old);
    }
    let iv2 = Vocabulary::from_tokens(&tokens, &counts, false).unwrap();
    assert_eq!(iv2.tokens(), tokens.as_slice());
    assert!(layout.slots().iter().all(|s| matches!(s, Slot::Trainable(_))));
    let layout2 = EmbeddingLayout::new(
        (0..n).map(Slot::Trainable).collect(),
        Tensor::zeros(&[0, 5]),
        5,
    )
    .unwrap();
    let mut params2 = params.clone();
    for name in ["enc.embed.trainable", "dec.embed.trainable"] {
        let id = params.find(name).unwrap();
        let old = params.get(id);
        let new = params2.get_mut(id);
        for r in 0..n {
            let dst = perm[r] * 5;
            new.data_mut()[dst..dst + 5].copy_from_slice(old.row(r));
        }
    }
    let m2 = Seq2Seq::from_params(hp, iv2, Arc::new(layout2), ov, params2).unwrap();
    let src = ["the big dog ran", "zorp sat"];
    assert_eq!(encoder_values(&m, &src), encoder_values(&m2, &src));
    let pair = Pair::from_text("the big dog ran", "the dog ran");
    assert_eq!(
        m.pair_losses(&[&pair], true).unwrap(),
        m2.pair_losses(&[&pair], true).unwrap()
    );
}

#[test]
fn decode_train_shapes_and_attention() {
    let m = tiny(tiny_hp(), 7);
    let pair = Pair::from_text("the big dog ran home", "");
    let (dists, trace) = m.decode_train(&pair, &mut Mode::eval()).unwrap();
    assert_eq!(dists.len(), 1);
    assert_eq!(trace.len(), 1);

    let pair = Pair::from_text("the big dog ran home", "the dog ran home");
    let (dists, trace) = m.decode_train(&pair, &mut Mode::eval()).unwrap();
    assert_eq!(dists.len(), 5);
    for (d, s) in dists.iter().zip(&trace.steps) {
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(d.iter().all(|&p| p > 0.0));
        assert_eq!(s.attention.len(), 5);
        assert!((s.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(s.argmax, argmax(&s.attention));
    }
}

#[test]
fn training_mode_is_deterministic_per_seed() {
    let m = tiny(tiny_hp(), 7);
    let pair = Pair::from_text("the big dog ran home", "the dog ran home");
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.decode_train(&pair, &mut Mode::train(0.5, &mut rng)).unwrap().0
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
    let eval = m.decode_train(&pair, &mut Mode::eval()).unwrap().0;
    assert_ne!(run(1), eval);
}

#[test]
fn without_attention_the_top_sequence_is_never_read() {
    for attention in [false, true] {
        let m = tiny(
            Hyperparams {
                use_attention: attention,
                ..tiny_hp()
            },
            2,
        );
        let pair = Pair::from_text("the big dog ran home", "the dog ran");
        let batch = m.pair_batch(&[&pair]).unwrap();
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape);
        let mut mode = Mode::eval();
        let enc = m.encode(&mut tape, &bound, &batch, &mut mode).unwrap();
        let fwd = m.decode_teacher(&mut tape, &bound, &enc, &batch, &mut mode).unwrap();
        assert_eq!(enc.top_reads() == 0, !attention);
        assert_eq!(fwd.attention.iter().all(Option::is_none), !attention);
        let out_w = m.params().get(m.params().find("out.w").unwrap());
        assert_eq!(out_w.rows(), if attention { 16 } else { 8 });
        let traces = m.traces(&tape, &batch, &fwd);
        if !attention {
            for s in &traces[0].steps {
                assert_eq!(s.argmax, 0);
                assert!(s.attention.iter().all(|&a| (a - 0.2).abs() < 1e-15));
            }
        }
    }
}

#[test]
fn tape_loss_matches_plain_loss() {
    let m = tiny(tiny_hp(), 9);
    let pairs = corpus();
    let refs: Vec<&Pair> = pairs.iter().collect();
    for use_bce in [false, true] {
        let losses = m.pair_losses(&refs, use_bce).unwrap();
        for (p, &l) in pairs.iter().zip(&losses) {
            let (dists, trace) = m.decode_train(p, &mut Mode::eval()).unwrap();
            let batch = m.pair_batch(&[p]).unwrap();
            let targets = batch.target_ids(0);
            let mut tgt_words = batch.targets[0].clone();
            tgt_words.push(crate::vocab::EOS_TOKEN.into());
            let kappa = copy_targets(&p.source, &trace.argmaxes(), &tgt_words);
            let plain = loss_total(&dists, &targets, &kappa, CPY, use_bce).unwrap();
            assert!((plain - l).abs() < 1e-12, "{plain} vs {l}");
        }
        // batch loss on the tape is the mean of the row losses
        let batch = m.pair_batch(&refs).unwrap();
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape);
        let loss = m
            .batch_loss(&mut tape, &bound, &batch, &mut Mode::eval(), use_bce, None)
            .unwrap();
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        assert!((tape.value(loss).item() - mean).abs() < 1e-12);
    }
}

#[test]
fn padding_does_not_change_row_losses() {
    let m = tiny(tiny_hp(), 4);
    let pairs = corpus();
    let refs: Vec<&Pair> = pairs.iter().collect();
    let together = m.pair_losses(&refs, true).unwrap();
    for (p, &l) in pairs.iter().zip(&together) {
        let alone = m.pair_losses(&[p], true).unwrap()[0];
        assert!((alone - l).abs() < 1e-12);
    }
    let sources: Vec<Vec<String>> = pairs.iter().map(|p| p.source.clone()).collect();
    let batched = m.generate(&sources).unwrap();
    for (s, g) in sources.iter().zip(&batched) {
        assert_eq!(&m.decode_generate(s).unwrap(), g);
    }
}

#[test]
fn copy_target_mapping() {
    let m = tiny(tiny_hp(), 1);
    let src = words("zorp ate");
    // "the" is frequent enough for the output vocabulary
    assert!(m.output_vocab().get("the").is_some());
    assert_eq!(m.target_id("the", &src), m.output_vocab().id("the"));
    assert_eq!(m.target_id("zorp", &src), CPY);
    assert_eq!(m.target_id("qux", &src), crate::vocab::UNK);
}

fn set_bias(m: &mut Seq2Seq, id: usize, value: f64) {
    let b = m.params().find("out.b").unwrap();
    m.params_mut().get_mut(b).data_mut()[id] = value;
}

#[test]
fn generation_respects_max_len_and_vocabulary() {
    for seed in 0..4 {
        let mut m = tiny(tiny_hp(), seed);
        // keep EOS unlikely so sentences run long
        set_bias(&mut m, EOS, -5.0);
        for p in corpus() {
            let g = m.decode_generate(&p.source).unwrap();
            assert!(g.tokens.len() <= 10);
            assert_eq!(g.tokens.len(), g.trace.len());
            for (tok, step) in g.tokens.iter().zip(&g.trace.steps) {
                assert!(m.output_vocab().get(tok).is_some() || p.source.contains(tok));
                assert!((step.attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn eos_first_gives_empty_output() {
    let mut m = tiny(tiny_hp(), 2);
    set_bias(&mut m, EOS, 50.0);
    let g = m.decode_generate(&words("the dog")).unwrap();
    assert!(g.tokens.is_empty() && g.trace.is_empty());
}

#[test]
fn copy_emission_resolves_to_attended_word() {
    let mut m = tiny(tiny_hp(), 2);
    set_bias(&mut m, CPY, 50.0);
    let src = words("the huge dog");
    let g = m.decode_generate(&src).unwrap();
    assert_eq!(g.tokens.len(), 10);
    for (tok, s) in g.tokens.iter().zip(&g.trace.steps) {
        assert_eq!(s.token, CPY);
        assert_eq!(tok, &src[s.argmax]);
    }
    assert_eq!(g.trace.copies(), 10);
}

#[test]
fn feed_flag_only_matters_after_copies() {
    let mut m = tiny(tiny_hp(), 6);
    set_bias(&mut m, CPY, -50.0);
    let src = words("the big dog ran home");
    let a = m.decode_generate(&src).unwrap();
    m.set_copy_feed(false);
    let b = m.decode_generate(&src).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trace.copies(), 0);

    // with copies the two variants feed different inputs
    set_bias(&mut m, CPY, 0.0);
    let cpy_col = |m: &mut Seq2Seq| {
        let w = m.params().find("out.w").unwrap();
        let t = m.params_mut().get_mut(w);
        let v = t.cols();
        for r in 0..t.rows() {
            t.data_mut()[r * v + CPY] = if r % 2 == 0 { 3.0 } else { -3.0 };
        }
    };
    cpy_col(&mut m);
    m.set_copy_feed(true);
    let fed = m.decode_generate(&src).unwrap();
    m.set_copy_feed(false);
    let marked = m.decode_generate(&src).unwrap();
    if fed.trace.copies() > 0 {
        let first = fed.trace.steps.iter().position(|s| s.token == CPY).unwrap();
        assert_eq!(fed.trace.steps[..=first], marked.trace.steps[..=first]);
    }
}

#[test]
fn ground_truth_alignment_overrides_attention() {
    let m = tiny(tiny_hp(), 8);
    let pair = Pair::from_text("the big dog ran", "dog ran");
    let one_hot = vec![vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 0.0]];
    let (_, trace) = m.decode_with_gt_alignments(&pair, &one_hot).unwrap();
    assert_eq!(trace.steps[0].attention, vec![0.0, 0.0, 1.0, 0.0]);
    let (_, model_trace) = m.decode_train(&pair, &mut Mode::eval()).unwrap();
    // unaligned second row and the EOS step keep the model attention
    assert_ne!(trace.steps[1].attention, vec![0.0; 4]);
    assert!((trace.steps[1].attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);

    let two = vec![vec![0.0, 2.0, 2.0, 0.0], vec![0.0; 4]];
    let (_, trace) = m.decode_with_gt_alignments(&pair, &two).unwrap();
    assert_eq!(trace.steps[0].attention, vec![0.0, 0.5, 0.5, 0.0]);

    let zeros = vec![vec![0.0; 4]; 2];
    let (d_gt, t_gt) = m.decode_with_gt_alignments(&pair, &zeros).unwrap();
    let (d, _) = m.decode_train(&pair, &mut Mode::eval()).unwrap();
    assert_eq!(d_gt, d);
    assert_eq!(t_gt, model_trace);

    assert!(matches!(
        m.decode_with_gt_alignments(&pair, &[vec![0.0; 3], vec![0.0; 3]]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn one_hot_alignment_context_is_the_encoder_state() {
    let m = tiny(tiny_hp(), 8);
    let pair = Pair::from_text("the big dog ran", "dog");
    let batch = m.pair_batch(&[&pair]).unwrap();
    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape);
    let mut mode = Mode::eval();
    let enc = m.encode(&mut tape, &bound, &batch, &mut mode).unwrap();
    let memory = enc.top_sequence().unwrap();
    let gt = vec![vec![Some(vec![0.0, 1.0, 0.0, 0.0])]];
    let fwd = m
        .decode_teacher_with(&mut tape, &bound, &enc, &batch, &mut mode, Some(&gt))
        .unwrap();
    let a = fwd.attention[0].unwrap();
    let c = tape.attn_context(a, memory).unwrap();
    let h1 = &tape.value(memory).data()[8..16];
    assert_eq!(tape.value(c).data(), h1);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut m = tiny(tiny_hp(), 12);
    // large weights keep every gradient well above the finite-difference
    // noise floor (about eps * |loss| / h)
    let scale = 15.0;
    for t in m.params_mut().values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    let pairs = corpus();
    let refs: Vec<&Pair> = pairs.iter().take(2).collect();
    let batch = m.pair_batch(&refs).unwrap();
    let kappa = {
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape);
        let mut mode = Mode::eval();
        let enc = m.encode(&mut tape, &bound, &batch, &mut mode).unwrap();
        let fwd = m.decode_teacher(&mut tape, &bound, &enc, &batch, &mut mode).unwrap();
        m.copy_flags(&tape, &batch, &fwd)
    };
    let loss_at = |m: &Seq2Seq| {
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape);
        let l = m
            .batch_loss(&mut tape, &bound, &batch, &mut Mode::eval(), true, Some(&kappa))
            .unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let bound = m.params().bind(&mut tape);
    let l = m
        .batch_loss(&mut tape, &bound, &batch, &mut Mode::eval(), true, Some(&kappa))
        .unwrap();
    tape.backward(l).unwrap();
    let grads = bound.grads(&tape, m.params());
    drop(tape);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        let len = m.params().get(id).len();
        // a few coordinates per tensor keep the test fast
        for k in 0..len {
            let orig = m.params().get(id).data()[k];
            m.params_mut().get_mut(id).data_mut()[k] = orig + h;
            let up = loss_at(&m);
            m.params_mut().get_mut(id).data_mut()[k] = orig - h;
            let down = loss_at(&m);
            m.params_mut().get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = crate::tensor::relative_error(grads.get(id)[k], numeric);
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-4, "{worst}");
}
