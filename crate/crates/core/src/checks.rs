//! Finite-difference gradient checks for every tape op and for the full
//! training loss of a tiny model.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{Hyperparams, Mode, Pair, Seq2Seq};
use crate::tensor::{relative_error, OpKind, Result as TResult, Tape, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-4;
/// Weight multiplier for the model check; keeps every gradient far above
/// the finite-difference noise floor.
pub const MODEL_WEIGHT_SCALE: f64 = 15.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Op kinds recorded on the checked tape.
    pub ops: BTreeSet<OpKind>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    /// The check furthest above (or closest to) its tolerance.
    pub fn worst(&self) -> Option<&CheckResult> {
        self.checks
            .iter()
            .max_by(|a, b| (a.max_rel_error / a.tolerance).total_cmp(&(b.max_rel_error / b.tolerance)))
    }

    pub fn covered_ops(&self) -> BTreeSet<OpKind> {
        self.checks.iter().flat_map(|c| c.ops.iter().copied()).collect()
    }

    /// `key=value` lines, one group per check, then a summary.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s.push_str(&format!(
                "check={} max_rel_error={:.3e} tolerance={:.0e} coordinates={} status={}\n",
                c.name,
                c.max_rel_error,
                c.tolerance,
                c.coordinates,
                if c.passed() { "ok" } else { "FAIL" }
            ));
        }
        let ops: Vec<&str> = self.covered_ops().iter().map(|k| k.name()).collect();
        s.push_str(&format!("ops={}\n", ops.join(",")));
        if let Some(w) = self.worst() {
            s.push_str(&format!("worst={} worst_error={:.3e}\n", w.name, w.max_rel_error));
        }
        s.push_str(&format!("passed={}\n", self.passed()));
        s
    }
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> TResult<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut r = |shape: &[usize]| random(rng, shape, -1.0, 1.0);
    let m23 = r(&[2, 3]);
    let m34 = r(&[3, 4]);
    let a23 = r(&[2, 3]);
    let b23 = r(&[2, 3]);
    let bias = r(&[3]);
    let wide = r(&[3, 5]);
    let tall = r(&[4, 3]);
    let enc = r(&[2, 3, 4]);
    let q = r(&[2, 4]);
    let attn_w = r(&[2, 3]);
    let s0 = r(&[2, 3]);
    let s1 = r(&[2, 3]);
    let s2 = r(&[2, 3]);
    let positive = random(rng, &[2, 3], 0.5, 2.0);
    let negative = random(rng, &[2, 3], -3.0, -0.2);
    let case = |name, inputs: Vec<&Tensor>, build: Build| OpCase {
        name,
        inputs: inputs.into_iter().cloned().collect(),
        build,
    };
    vec![
        case("matmul", vec![&m23, &m34], Box::new(|t, v| t.matmul(v[0], v[1]))),
        case("add", vec![&a23, &b23], Box::new(|t, v| t.add(v[0], v[1]))),
        case("sub", vec![&a23, &b23], Box::new(|t, v| t.sub(v[0], v[1]))),
        case("mul", vec![&a23, &b23], Box::new(|t, v| t.mul(v[0], v[1]))),
        case("add_bias", vec![&a23, &bias], Box::new(|t, v| t.add_bias(v[0], v[1]))),
        case("sigmoid", vec![&a23], Box::new(|t, v| t.sigmoid(v[0]))),
        case("tanh", vec![&a23], Box::new(|t, v| t.tanh(v[0]))),
        case("log", vec![&positive], Box::new(|t, v| t.log(v[0]))),
        case("neg", vec![&a23], Box::new(|t, v| t.neg(v[0]))),
        case("one_minus", vec![&a23], Box::new(|t, v| t.one_minus(v[0]))),
        case("scale", vec![&a23], Box::new(|t, v| t.scale(v[0], -2.5))),
        case("log1mexp", vec![&negative], Box::new(|t, v| t.log1mexp(v[0]))),
        case("softmax", vec![&wide], Box::new(|t, v| t.softmax_rows(v[0]))),
        case(
            "softmax_masked",
            vec![&wide],
            Box::new(|t, v| t.softmax_rows_masked(v[0], &[5, 2, 4])),
        ),
        case("log_softmax", vec![&wide], Box::new(|t, v| t.log_softmax_rows(v[0]))),
        case("concat_rows", vec![&a23, &tall], Box::new(|t, v| t.concat(v[0], v[1], 0))),
        case("concat_cols", vec![&a23, &m23], Box::new(|t, v| t.concat(v[0], v[1], 1))),
        case(
            "gather_rows",
            vec![&tall],
            Box::new(|t, v| t.gather_rows(v[0], &[3, 0, 3, 1])),
        ),
        case(
            "merge_rows",
            vec![&a23, &tall],
            Box::new(|t, v| t.merge_rows(&[(v[0], vec![1, 4]), (v[1], vec![0, 2, 5, 6])], 7)),
        ),
        case("slice_rows", vec![&tall], Box::new(|t, v| t.slice_rows(v[0], 1, 2))),
        case("slice_cols", vec![&wide], Box::new(|t, v| t.slice_cols(v[0], 1, 3))),
        case(
            "blend_rows",
            vec![&a23, &b23],
            Box::new(|t, v| t.blend_rows(&[true, false], v[0], v[1])),
        ),
        case(
            "dropout",
            vec![&wide],
            Box::new(|t, v| {
                // a fresh rng per evaluation reproduces the same mask
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                t.dropout(v[0], 0.4, true, &mut rng)
            }),
        ),
        case("stack", vec![&s0, &s1, &s2], Box::new(|t, v| t.stack(v))),
        case("attn_scores", vec![&enc, &q], Box::new(|t, v| t.attn_scores(v[0], v[1]))),
        case("attn_context", vec![&attn_w, &enc], Box::new(|t, v| t.attn_context(v[0], v[1]))),
        case("pick", vec![&wide], Box::new(|t, v| t.pick(v[0], &[4, 0, 2]))),
        case("sum", vec![&a23], Box::new(|t, v| t.sum(v[0]))),
        case("add_n", vec![&a23, &b23, &s0], Box::new(|t, v| t.add_n(v))),
    ]
}

/// Contracts an op output to a scalar with fixed weights of both signs.
fn contract(t: &mut Tape, out: Var, weights: &[f64]) -> TResult<Var> {
    let n = t.value(out).len();
    t.weighted_sum(out, &weights[..n])
}

fn check_case(case: &OpCase, wrt: usize, weights: &[f64], fault: Option<OpKind>) -> Result<CheckResult> {
    let eval = |inputs: &[Tensor]| -> TResult<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let out = (case.build)(&mut t, &vars)?;
        let s = contract(&mut t, out, weights)?;
        Ok(t.value(s).item())
    };
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(k, x)| tape.leaf(x.clone(), k == wrt))
        .collect();
    let out = (case.build)(&mut tape, &vars)?;
    let s = contract(&mut tape, out, weights)?;
    tape.backward(s)?;
    let n = case.inputs[wrt].len();
    let analytic = tape
        .grad_data(vars[wrt])
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; n]);
    let ops = tape.kinds().filter(|k| *k != OpKind::Leaf).collect();
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let mut inputs = case.inputs.clone();
        inputs[wrt].data_mut()[k] += STEP;
        let up = eval(&inputs)?;
        inputs[wrt].data_mut()[k] -= 2.0 * STEP;
        let down = eval(&inputs)?;
        worst = worst.max(relative_error(a, (up - down) / (2.0 * STEP)));
    }
    let name = if case.inputs.len() > 1 {
        format!("{}[{wrt}]", case.name)
    } else {
        case.name.to_string()
    };
    Ok(CheckResult {
        name,
        ops,
        max_rel_error: worst,
        tolerance: OP_TOLERANCE,
        coordinates: n,
    })
}

/// Every op, one check per differentiable input.
pub fn check_ops(fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let weights: Vec<f64> = (0..64)
        .map(|k| {
            let w = rng.gen_range(0.5..1.5);
            if k % 2 == 0 { w } else { -w }
        })
        .collect();
    let mut out = Vec::new();
    for case in op_cases(&mut rng) {
        for wrt in 0..case.inputs.len() {
            out.push(check_case(&case, wrt, &weights, fault)?);
        }
    }
    Ok(out)
}

/// Pairs over a 20-word vocabulary with sentences of at most 6 words.
pub fn tiny_corpus(seed: u64) -> Vec<Pair> {
    let words: Vec<String> = (0..20).map(|k| format!("w{k:02}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..4)
        .map(|_| {
            let n = rng.gen_range(2..=6);
            let source: Vec<String> = (0..n).map(|_| words[rng.gen_range(0..20)].clone()).collect();
            // keep some source words so the copy path is exercised
            let target = source
                .iter()
                .take(rng.gen_range(1..=n))
                .map(|w| if rng.gen_bool(0.3) { words[rng.gen_range(0..20)].clone() } else { w.clone() })
                .collect();
            Pair::new(source, target)
        })
        .collect()
}

pub fn tiny_hyperparams(use_attention: bool) -> Hyperparams {
    Hyperparams {
        layers: 2,
        hidden: 8,
        embedding_dim: 6,
        max_len: 8,
        use_attention,
        use_bce_loss: true,
        output_vocab_size: 20,
        output_min_count: 1,
        ..Hyperparams::default()
    }
}

/// Full two-part loss gradient of a tiny model, every coordinate. The copy
/// flags are computed once and held fixed, since they come from an argmax.
pub fn check_model(use_attention: bool, fault: Option<OpKind>) -> Result<CheckResult> {
    let pairs = tiny_corpus(3);
    let mut model = Seq2Seq::build(tiny_hyperparams(use_attention), &pairs, None, 12)?;
    for t in model.params_mut().values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= MODEL_WEIGHT_SCALE);
    }
    let refs: Vec<&Pair> = pairs.iter().take(2).collect();
    let batch = model.pair_batch(&refs)?;
    let kappa = {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape);
        let mut mode = Mode::eval();
        let enc = model.encode(&mut tape, &bound, &batch, &mut mode)?;
        let fwd = model.decode_teacher(&mut tape, &bound, &enc, &batch, &mut mode)?;
        model.copy_flags(&tape, &batch, &fwd)
    };
    let loss_at = |m: &Seq2Seq| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape);
        let l = m.batch_loss(&mut tape, &bound, &batch, &mut Mode::eval(), true, Some(&kappa))?;
        Ok(tape.value(l).item())
    };
    let (grads, ops) = {
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        let bound = model.params().bind(&mut tape);
        let l = model.batch_loss(&mut tape, &bound, &batch, &mut Mode::eval(), true, Some(&kappa))?;
        tape.backward(l)?;
        let ops: BTreeSet<OpKind> = tape.kinds().filter(|k| *k != OpKind::Leaf).collect();
        (bound.grads(&tape, model.params()), ops)
    };
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        for k in 0..model.params().get(id).len() {
            let orig = model.params().get(id).data()[k];
            model.params_mut().get_mut(id).data_mut()[k] = orig + STEP;
            let up = loss_at(&model)?;
            model.params_mut().get_mut(id).data_mut()[k] = orig - STEP;
            let down = loss_at(&model)?;
            model.params_mut().get_mut(id).data_mut()[k] = orig;
            worst = worst.max(relative_error(grads.get(id)[k], (up - down) / (2.0 * STEP)));
            coordinates += 1;
        }
    }
    Ok(CheckResult {
        name: if use_attention { "loss_total".into() } else { "loss_total-attn".into() },
        ops,
        max_rel_error: worst,
        tolerance: LOSS_TOLERANCE,
        coordinates,
    })
}

/// Op checks followed by the model checks with and without attention.
pub fn run_suite(fault: Option<OpKind>) -> Result<SuiteReport> {
    let mut checks = check_ops(fault)?;
    checks.push(check_model(true, fault)?);
    checks.push(check_model(false, fault)?);
    Ok(SuiteReport { checks })
}
