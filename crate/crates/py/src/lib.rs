//! Python bindings for the s4 simplifier.
//!
//! Sentences cross the boundary as plain strings and are tokenized on the
//! Rust side.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use s4_core::aligner::{self, Document, Match, DEFAULT_GAMMA};
use s4_core::checks::run_suite;
use s4_core::corpus::{synth_generate, RuleMix, SynthConfig};
use s4_core::metrics::{self, EvalReport};
use s4_core::model::{Hyperparams, Pair, Seq2Seq};
use s4_core::trainer::{self, Checkpoint, StopCriterion, TrainConfig};
use s4_core::vocab::tokenize as core_tokenize;
use s4_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tokenize_all(lines: &[String]) -> Vec<Vec<String>> {
    lines.iter().map(|l| core_tokenize(l)).collect()
}

fn pairs(raw: Vec<(String, String)>) -> Vec<Pair> {
    raw.iter().map(|(s, t)| Pair::from_text(s, t)).collect()
}

/// Splits text into lowercase word and punctuation tokens.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    core_tokenize(text)
}

/// `(kind, complex, split_point, simple, order, score)`.
type MatchRow = (String, usize, Option<usize>, usize, Option<String>, f64);

/// Sentence alignment between a complex and a simplified document.
#[pyclass(module = "s4simplify", frozen, get_all)]
struct Alignment {
    score: f64,
    /// `split_point` and `order` are `None` for single matches.
    matches: Vec<MatchRow>,
    skipped_complex: Vec<usize>,
    skipped_simple: Vec<usize>,
    lines: String,
}

#[pymethods]
impl Alignment {
    fn __repr__(&self) -> String {
        format!(
            "Alignment(score={:.4}, matches={}, skipped={})",
            self.score,
            self.matches.len(),
            self.skipped_complex.len() + self.skipped_simple.len()
        )
    }
}

/// Aligns two documents given as lists of sentences.
#[pyfunction]
#[pyo3(signature = (complex, simple, gamma = DEFAULT_GAMMA))]
fn align(complex: Vec<String>, simple: Vec<String>, gamma: f64) -> Alignment {
    let c = Document::new(tokenize_all(&complex));
    let s = Document::new(tokenize_all(&simple));
    let r = aligner::align(&c, &s, gamma);
    let matches = r
        .matches
        .iter()
        .map(|m| match *m {
            Match::Single { i, j, score } => ("single".to_string(), i, None, j, None, score),
            Match::Split { i, p, j, order, score } => {
                ("split".to_string(), i, Some(p), j, Some(order.to_string()), score)
            }
        })
        .collect();
    Alignment {
        score: r.score,
        matches,
        lines: r.to_lines(),
        skipped_complex: r.skipped_complex,
        skipped_simple: r.skipped_simple,
    }
}

/// Corpus BLEU (0-100) with n-grams up to `n`.
#[pyfunction]
#[pyo3(signature = (candidates, references, n = 4))]
fn bleu(candidates: Vec<String>, references: Vec<String>, n: usize) -> PyResult<f64> {
    let scores = metrics::bleu_scores(&tokenize_all(&candidates), &tokenize_all(&references), n).map_err(py_err)?;
    Ok(scores[n - 1])
}

#[pyfunction]
fn rouge_l(candidates: Vec<String>, references: Vec<String>) -> PyResult<f64> {
    metrics::rouge_l(&tokenize_all(&candidates), &tokenize_all(&references)).map_err(py_err)
}

#[pyfunction]
fn flesch(sentences: Vec<String>) -> PyResult<f64> {
    metrics::flesch(&tokenize_all(&sentences)).map_err(py_err)
}

/// Word-level Levenshtein distance.
#[pyfunction]
fn edit_distance(a: &str, b: &str) -> usize {
    metrics::edit_distance_words(&core_tokenize(a), &core_tokenize(b))
}

/// Every evaluation metric, keyed as in the command-line report.
#[pyfunction]
fn evaluate(sources: Vec<String>, outputs: Vec<String>, references: Vec<String>) -> PyResult<BTreeMap<String, f64>> {
    let report = EvalReport::compute(&tokenize_all(&sources), &tokenize_all(&outputs), &tokenize_all(&references))
        .map_err(py_err)?;
    Ok(report
        .key_values()
        .lines()
        .filter_map(|l| {
            let (k, v) = l.split_once('=')?;
            Some((k.to_string(), v.parse().ok()?))
        })
        .collect())
}

/// Synthetic parallel corpus as `(article, complex, simple)` rows.
#[pyfunction]
#[pyo3(signature = (pairs = 2000, vocab_size = 200, copy = 0.85, substitute = 0.07, split = 0.04, delete = 0.04, pairs_per_article = 10, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn synth_corpus(
    pairs: usize,
    vocab_size: usize,
    copy: f64,
    substitute: f64,
    split: f64,
    delete: f64,
    pairs_per_article: usize,
    seed: u64,
) -> PyResult<Vec<(String, String, String)>> {
    let cfg = SynthConfig {
        vocab_size,
        pairs,
        mix: RuleMix {
            copy,
            substitute,
            split,
            delete,
        },
        pairs_per_article,
        seed,
    };
    let s = synth_generate(&cfg).map_err(py_err)?;
    Ok(s.corpus
        .records
        .iter()
        .map(|r| (r.article.clone(), r.pair.source.join(" "), r.pair.target.join(" ")))
        .collect())
}

/// Runs the gradient-check suite; returns `(passed, worst_check, worst_error)`.
#[pyfunction]
fn gradcheck() -> PyResult<(bool, String, f64)> {
    let r = run_suite(None).map_err(py_err)?;
    let (name, err) = r.worst().map_or((String::new(), 0.0), |w| (w.name.clone(), w.max_rel_error));
    Ok((r.passed(), name, err))
}

/// A trained simplification model.
#[pyclass(module = "s4simplify")]
struct Model {
    inner: Seq2Seq,
    history: Vec<(String, usize, Option<f64>, f64)>,
}

#[pymethods]
impl Model {
    /// Loads the best weights from a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(py_err)?;
        Self::from_checkpoint(&ckpt)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.hyperparams().variant_name()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params().numel()
    }

    /// `(phase, epoch, train_loss, valid_score)` per validation check.
    #[getter]
    fn history(&self) -> Vec<(String, usize, Option<f64>, f64)> {
        self.history.clone()
    }

    #[getter]
    fn copy_feed(&self) -> bool {
        self.inner.hyperparams().use_copy_feed
    }

    #[setter]
    fn set_copy_feed(&mut self, on: bool) {
        self.inner.set_copy_feed(on);
    }

    /// Greedy simplification of each sentence.
    fn simplify(&self, py: Python<'_>, sentences: Vec<String>) -> PyResult<Vec<String>> {
        let toks = tokenize_all(&sentences);
        let gens = py.detach(|| self.inner.generate(&toks)).map_err(py_err)?;
        Ok(gens.into_iter().map(|g| g.tokens.join(" ")).collect())
    }

    /// Share of emitted tokens produced by the copy token.
    fn copy_rate(&self, py: Python<'_>, sentences: Vec<String>) -> PyResult<f64> {
        let toks = tokenize_all(&sentences);
        let gens = py.detach(|| self.inner.generate(&toks)).map_err(py_err)?;
        let copies: usize = gens.iter().map(|g| g.trace.copies()).sum();
        let total: usize = gens.iter().map(|g| g.trace.len()).sum();
        Ok(if total == 0 { 0.0 } else { copies as f64 / total as f64 })
    }

    fn __repr__(&self) -> String {
        format!("Model(variant={:?}, parameters={})", self.variant(), self.num_parameters())
    }
}

impl Model {
    fn from_checkpoint(ckpt: &Checkpoint) -> PyResult<Self> {
        let history = ckpt
            .history
            .iter()
            .map(|r| (format!("{:?}", r.phase), r.epoch, r.train_loss, r.valid_score))
            .collect();
        Ok(Model {
            inner: ckpt.model().map_err(py_err)?,
            history,
        })
    }
}

/// Trains a model on `(complex, simple)` pairs and optionally writes the
/// checkpoint.
#[pyfunction]
#[pyo3(signature = (
    train_pairs, valid_pairs, *, variant = "S4", layers = 1, hidden = 64, embedding_dim = 32,
    max_len = 50, output_min_count = 1, batch_size = 16, dropout = 0.0, patience = 3,
    max_epochs = 10, stop = "loss", seed = 0, checkpoint = None
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    train_pairs: Vec<(String, String)>,
    valid_pairs: Vec<(String, String)>,
    variant: &str,
    layers: usize,
    hidden: usize,
    embedding_dim: usize,
    max_len: usize,
    output_min_count: u64,
    batch_size: usize,
    dropout: f64,
    patience: usize,
    max_epochs: usize,
    stop: &str,
    seed: u64,
    checkpoint: Option<PathBuf>,
) -> PyResult<Model> {
    let hp = Hyperparams {
        layers,
        hidden,
        embedding_dim,
        max_len,
        output_min_count,
        ..Hyperparams::variant(variant).map_err(py_err)?
    };
    let stopping = match stop {
        "loss" => StopCriterion::Loss,
        "bleu" => StopCriterion::Bleu,
        other => return Err(PyValueError::new_err(format!("stop must be 'loss' or 'bleu', got {other:?}"))),
    };
    let config = TrainConfig {
        batch_size,
        dropout,
        validation_sample: TrainConfig::default().validation_sample,
        patience,
        max_epochs,
        seed,
        stopping,
    };
    let (tr, va) = (pairs(train_pairs), pairs(valid_pairs));
    let ckpt = py
        .detach(|| -> s4_core::Result<Checkpoint> {
            let model = Seq2Seq::build(hp, &tr, None, seed)?;
            let ckpt = trainer::train(model, tr.clone(), &va, config)?;
            if let Some(path) = &checkpoint {
                ckpt.save(path)?;
            }
            Ok(ckpt)
        })
        .map_err(py_err)?;
    Model::from_checkpoint(&ckpt)
}

#[pymodule]
pub fn s4simplify(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Alignment>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(flesch, m)?)?;
    m.add_function(wrap_pyfunction!(edit_distance, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
