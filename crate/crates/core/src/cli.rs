//! The `s4` command line.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage or input error.
//! Machine-readable output is `key=value`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::aligner::{align, Document, DEFAULT_GAMMA};
use crate::checks::run_suite;
use crate::corpus::{
    alignment_matrix, dedup_identical, read_alignments, read_parallel_tsv, save_parallel_tsv, split_by_article,
    synth_generate, write_pretrained, RuleMix, SynthConfig, DEFAULT_FRACTIONS,
};
use crate::error::{Error, Result};
use crate::metrics::{bleu, gt_alignment_confusion, EvalReport};
use crate::model::{Hyperparams, Pair, Seq2Seq};
use crate::tensor::OpKind;
use crate::trainer::{Checkpoint, EpochRecord, Phase, StopCriterion, TrainConfig, Trainer};
use crate::vocab::{build_input_layout, build_output_vocab, load_pretrained, tokenize, Vocabulary};

#[derive(Parser, Debug)]
#[command(name = "s4", version, about = "Sentence simplification with a copying encoder-decoder")]
#[command(args_override_self = true)]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "S4_SEED", default_value_t = 0)]
    pub seed: u64,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Align the sentences of a complex and a simplified document.
    Align(AlignArgs),
    /// Write the input and output vocabularies of a corpus.
    Vocab(VocabArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Simplify one sentence per line.
    Simplify(SimplifyArgs),
    /// Score outputs against references.
    Evaluate(EvaluateArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic corpus with gold alignments.
    Synth(SynthArgs),
    /// Train once per trainable-embedding count and report BLEU-4.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    /// Complex document, one sentence per line.
    pub complex: PathBuf,
    /// Simplified document, one sentence per line.
    pub simple: PathBuf,
    /// Skip penalty.
    #[arg(long, default_value_t = DEFAULT_GAMMA, allow_negative_numbers = true)]
    pub gamma: f64,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Named variant such as S4, S4+gv+bce or S4-feed.
    #[arg(long, default_value = "S4")]
    pub variant: String,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub no_attention: bool,
    #[arg(long)]
    pub no_copy_feed: bool,
    /// Add the copy loss in a second training phase.
    #[arg(long)]
    pub bce: bool,
    /// Trainable embedding rows; the rest come frozen from --pretrained.
    #[arg(long)]
    pub trainable_embeddings: Option<usize>,
    /// Word vectors, one `token v1 .. vN` per line.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub output_vocab_size: Option<usize>,
    #[arg(long)]
    pub output_min_count: Option<u64>,
}

impl ModelArgs {
    pub fn hyperparams(&self) -> Result<Hyperparams> {
        let mut hp = Hyperparams::variant(&self.variant)?;
        if let Some(v) = self.layers {
            hp.layers = v;
        }
        if let Some(v) = self.hidden {
            hp.hidden = v;
        }
        if let Some(v) = self.embedding_dim {
            hp.embedding_dim = v;
        }
        if let Some(v) = self.max_len {
            hp.max_len = v;
        }
        if self.no_attention {
            hp.use_attention = false;
        }
        if self.no_copy_feed {
            hp.use_copy_feed = false;
        }
        if self.bce {
            hp.use_bce_loss = true;
        }
        if self.trainable_embeddings.is_some() {
            hp.trainable_embed_count = self.trainable_embeddings;
        }
        if let Some(v) = self.output_vocab_size {
            hp.output_vocab_size = v;
        }
        if let Some(v) = self.output_min_count {
            hp.output_min_count = v;
        }
        hp.validate()?;
        Ok(hp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StopArg {
    Loss,
    Bleu,
}

#[derive(Args, Debug, Clone)]
pub struct TrainFlags {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub validation_sample: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Early-stopping signal.
    #[arg(long, value_enum)]
    pub stop: Option<StopArg>,
}

impl TrainFlags {
    pub fn config(&self, seed: u64) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            dropout: self.dropout.unwrap_or(d.dropout),
            validation_sample: self.validation_sample.unwrap_or(d.validation_sample),
            patience: self.patience.unwrap_or(d.patience),
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            seed,
            stopping: match self.stop {
                None | Some(StopArg::Loss) => StopCriterion::Loss,
                Some(StopArg::Bleu) => StopCriterion::Bleu,
            },
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Corpus TSV: article_id, complex, simple.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Separate validation TSV; by default articles are split 70/10/20.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Keep pairs whose two sides are identical.
    #[arg(long)]
    pub keep_identical: bool,
    /// Write the train/valid/test splits here.
    #[arg(long)]
    pub split_dir: Option<PathBuf>,
}

/// Training, validation and test pairs.
pub struct Data {
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl DataArgs {
    pub fn load(&self, seed: u64) -> Result<Data> {
        let mut corpus = read_parallel_tsv(&self.corpus)?;
        if !self.keep_identical {
            corpus = dedup_identical(&corpus);
        }
        let data = match &self.valid {
            Some(v) => Data {
                train: corpus.pairs(),
                valid: read_parallel_tsv(v)?.pairs(),
                test: Vec::new(),
            },
            None => {
                let split = split_by_article(&corpus, DEFAULT_FRACTIONS, seed)?;
                if let Some(dir) = &self.split_dir {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                    save_parallel_tsv(&split.train, dir.join("train.tsv"))?;
                    save_parallel_tsv(&split.validation, dir.join("valid.tsv"))?;
                    save_parallel_tsv(&split.test, dir.join("test.tsv"))?;
                }
                Data {
                    train: split.train.pairs(),
                    valid: split.validation.pairs(),
                    test: split.test.pairs(),
                }
            }
        };
        Ok(data)
    }
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Receives input.vocab and output.vocab (`token<TAB>count`).
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimplifyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Feed the copy marker instead of the copied word.
    #[arg(long)]
    pub no_copy_feed: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub references: PathBuf,
    /// Source sentences, for the edit distance.
    #[arg(long)]
    pub originals: PathBuf,
    /// With --gold-corpus and --gold-alignments: also report the
    /// copy/change confusion matrix under gold attention.
    #[arg(long, requires_all = ["gold_corpus", "gold_alignments"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub gold_corpus: Option<PathBuf>,
    #[arg(long)]
    pub gold_alignments: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CheckSize {
    Tiny,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "tiny")]
    pub size: CheckSize,
    /// Corrupt the adjoint of one op (checker self-test).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value = "corpus")]
    pub stem: String,
    #[arg(long, default_value_t = 200)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 2000)]
    pub pairs: usize,
    #[arg(long, default_value_t = RuleMix::default().copy)]
    pub copy: f64,
    #[arg(long, default_value_t = RuleMix::default().substitute)]
    pub substitute: f64,
    #[arg(long, default_value_t = RuleMix::default().split)]
    pub split: f64,
    #[arg(long, default_value_t = RuleMix::default().delete)]
    pub delete: f64,
    #[arg(long, default_value_t = 10)]
    pub pairs_per_article: usize,
    /// Also write random word vectors of this size to `<stem>.vec`.
    #[arg(long)]
    pub pretrained_dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainFlags,
    /// Trainable-row counts to try.
    #[arg(long = "counts", value_delimiter = ',', default_values_t = [2usize, 200, 1000])]
    pub counts: Vec<usize>,
    /// Write each checkpoint here as `trainable-<count>.ckpt`.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
}

/// Result of a subcommand that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    CheckFailed,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::CheckFailed => 1,
        }
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(o) => ExitCode::from(o.code()),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(fs::File::create(p).map_err(|e| Error::io(p, e))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn emit(out: &mut dyn Write, text: &str, path: Option<&Path>) -> Result<()> {
    let name = path.map_or_else(|| PathBuf::from("<stdout>"), Path::to_path_buf);
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(name, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_text(path)?.lines().map(tokenize).collect())
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Align(a) => cmd_align(a),
        Command::Vocab(a) => cmd_vocab(a),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Simplify(a) => cmd_simplify(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a, cli.seed),
        Command::Sweep(a) => cmd_sweep(a, cli.seed),
    }
}

fn cmd_align(a: &AlignArgs) -> Result<Outcome> {
    if !a.gamma.is_finite() {
        return Err(Error::Contract(format!("gamma must be finite, got {}", a.gamma)));
    }
    let complex = Document::from_lines(&read_text(&a.complex)?);
    let simple = Document::from_lines(&read_text(&a.simple)?);
    let result = align(&complex, &simple, a.gamma);
    let mut out = output(a.out.as_deref())?;
    emit(&mut *out, &result.to_lines(), a.out.as_deref())?;
    Ok(Outcome::Success)
}

fn write_vocab(v: &Vocabulary, path: &Path) -> Result<()> {
    let mut s = String::new();
    for (t, c) in v.tokens().iter().zip(v.counts()) {
        s.push_str(&format!("{t}\t{c}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn load_table(model: &ModelArgs, hp: &Hyperparams) -> Result<Option<crate::vocab::PretrainedTable>> {
    match &model.pretrained {
        Some(p) => Ok(Some(load_pretrained(p, hp.embedding_dim)?)),
        None => {
            if hp.trainable_embed_count.is_some() {
                log::warn!("no --pretrained file; rows beyond the trainable block map to <unk>");
            }
            Ok(None)
        }
    }
}

fn cmd_vocab(a: &VocabArgs) -> Result<Outcome> {
    let hp = a.model.hyperparams()?;
    let corpus = read_parallel_tsv(&a.corpus)?;
    let pairs = corpus.pairs();
    let table = load_table(&a.model, &hp)?;
    let sentences: Vec<&[String]> = pairs
        .iter()
        .flat_map(|p| [p.source.as_slice(), p.target.as_slice()])
        .collect();
    let (input, _) = build_input_layout(
        sentences.iter().copied(),
        table.as_ref(),
        hp.trainable_embed_count,
        hp.embedding_dim,
    )?;
    let output = build_output_vocab(pairs.iter().map(|p| p.target.as_slice()), hp.output_vocab_size, hp.output_min_count);
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    write_vocab(&input, &a.out_dir.join("input.vocab"))?;
    write_vocab(&output, &a.out_dir.join("output.vocab"))?;
    println!("input_vocab={}", input.len());
    println!("output_vocab={}", output.len());
    Ok(Outcome::Success)
}

fn record_line(r: &EpochRecord) -> String {
    let phase = match r.phase {
        Phase::CrossEntropy => "cross_entropy",
        Phase::TwoPart => "two_part",
    };
    let train = r.train_loss.map_or_else(|| "none".to_string(), |l| format!("{l:.6}"));
    format!(
        "phase={phase} epoch={} train_loss={train} valid_score={:.6} improved={}",
        r.epoch, r.valid_score, r.improved
    )
}

/// Trains with per-epoch progress lines on stdout.
fn train_verbose(mut t: Trainer) -> Result<Checkpoint> {
    let mut shown = t.history().len();
    while !t.is_finished() {
        t.run_for(1)?;
        for r in &t.history()[shown..] {
            println!("{}", record_line(r));
        }
        shown = t.history().len();
    }
    Ok(t.checkpoint())
}

fn cmd_train(a: &TrainArgs, seed: u64) -> Result<Outcome> {
    let data = a.data.load(seed)?;
    let trainer = match &a.resume {
        Some(path) => Trainer::resume(Checkpoint::load(path)?, data.train, &data.valid)?,
        None => {
            let hp = a.model.hyperparams()?;
            let config = a.train.config(seed)?;
            let table = load_table(&a.model, &hp)?;
            let model = Seq2Seq::build(hp, &data.train, table.as_ref(), seed)?;
            println!("variant={}", model.hyperparams().variant_name());
            println!("parameters={}", model.params().numel());
            Trainer::new(model, data.train, &data.valid, config)?
        }
    };
    let ckpt = train_verbose(trainer)?;
    ckpt.save(&a.checkpoint)?;
    println!("checkpoint={}", a.checkpoint.display());
    match ckpt.best_score {
        Some(s) => println!("best_score={s:.6}"),
        None => println!("best_score=none"),
    }
    Ok(Outcome::Success)
}

fn cmd_simplify(a: &SimplifyArgs) -> Result<Outcome> {
    let mut model = Checkpoint::load(&a.checkpoint)?.model()?;
    if a.no_copy_feed {
        model.set_copy_feed(false);
    }
    let lines = read_lines(&a.input)?;
    let nonempty: Vec<&Vec<String>> = lines.iter().filter(|l| !l.is_empty()).collect();
    let mut generated = model.generate(&nonempty)?.into_iter();
    let mut text = String::new();
    for l in &lines {
        if !l.is_empty() {
            let g = generated.next().expect("one output per non-empty line");
            text.push_str(&g.tokens.join(" "));
        }
        text.push('\n');
    }
    let mut out = output(a.out.as_deref())?;
    emit(&mut *out, &text, a.out.as_deref())?;
    Ok(Outcome::Success)
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<Outcome> {
    let cands = read_lines(&a.candidates)?;
    let refs = read_lines(&a.references)?;
    let origs = read_lines(&a.originals)?;
    if cands.len() != refs.len() || cands.len() != origs.len() {
        return Err(Error::Contract(format!(
            "line counts differ: {} candidates, {} references, {} originals",
            cands.len(),
            refs.len(),
            origs.len()
        )));
    }
    let mut report = EvalReport::compute(&origs, &cands, &refs)?;
    if let (Some(ckpt), Some(corpus), Some(links)) = (&a.checkpoint, &a.gold_corpus, &a.gold_alignments) {
        let model = Checkpoint::load(ckpt)?.model()?;
        let pairs = read_parallel_tsv(corpus)?.pairs();
        let links = read_alignments(links, pairs.len())?;
        let mats: Vec<Vec<Vec<f64>>> = pairs
            .iter()
            .zip(&links)
            .map(|(p, l)| alignment_matrix(l, p.target.len(), p.source.len()))
            .collect();
        report.confusion = Some(gt_alignment_confusion(&model, &pairs, &mats)?);
    }
    print!("{}", report.key_values());
    Ok(Outcome::Success)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Outcome> {
    let CheckSize::Tiny = a.size;
    let fault = match &a.inject_fault {
        None => None,
        Some(name) => Some(
            OpKind::from_name(name).ok_or_else(|| Error::Contract(format!("unknown op {name:?}")))?,
        ),
    };
    let report = run_suite(fault)?;
    print!("{}", report.key_values());
    if report.passed() {
        Ok(Outcome::Success)
    } else {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed())
            .map(|c| c.name.as_str())
            .collect();
        println!("failed={}", failed.join(","));
        Ok(Outcome::CheckFailed)
    }
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> Result<Outcome> {
    let cfg = SynthConfig {
        vocab_size: a.vocab_size,
        pairs: a.pairs,
        mix: RuleMix {
            copy: a.copy,
            substitute: a.substitute,
            split: a.split,
            delete: a.delete,
        },
        pairs_per_article: a.pairs_per_article,
        seed,
    };
    let synth = synth_generate(&cfg)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    synth.save(&a.out_dir, &a.stem)?;
    println!("pairs={}", synth.corpus.len());
    println!("corpus={}", a.out_dir.join(format!("{}.tsv", a.stem)).display());
    if let Some(dim) = a.pretrained_dim {
        let path = a.out_dir.join(format!("{}.vec", a.stem));
        let mut buf = Vec::new();
        write_pretrained(&synth.pretrained(dim, seed), &mut buf).map_err(|e| Error::io(&path, e))?;
        fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        println!("pretrained={}", path.display());
    }
    Ok(Outcome::Success)
}

fn cmd_sweep(a: &SweepArgs, seed: u64) -> Result<Outcome> {
    let data = a.data.load(seed)?;
    let eval_pairs = if data.test.is_empty() { &data.valid } else { &data.test };
    let config = a.train.config(seed)?;
    let base = a.model.hyperparams()?;
    let table = load_table(&a.model, &base)?;
    if let Some(dir) = &a.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut all_unchanged = true;
    for &count in &a.counts {
        let hp = Hyperparams {
            trainable_embed_count: Some(count),
            ..base.clone()
        };
        let model = Seq2Seq::build(hp, &data.train, table.as_ref(), seed)?;
        let before = model.layout().fixed().clone();
        let ckpt = Trainer::new(model, data.train.clone(), &data.valid, config.clone())?.run()?;
        let unchanged = ckpt.layout.fixed() == &before;
        all_unchanged &= unchanged;
        let trained = ckpt.model()?;
        let sources: Vec<&[String]> = eval_pairs.iter().map(|p| p.source.as_slice()).collect();
        let outputs: Vec<Vec<String>> = trained.generate(&sources)?.into_iter().map(|g| g.tokens).collect();
        let refs: Vec<Vec<String>> = eval_pairs.iter().map(|p| p.target.clone()).collect();
        let score = bleu(&outputs, &refs, 4);
        println!(
            "trainable={count} fixed_rows={} bleu4={score:.2} fixed_unchanged={unchanged}",
            before.rows()
        );
        if let Some(dir) = &a.checkpoint_dir {
            ckpt.save(dir.join(format!("trainable-{count}.ckpt")))?;
        }
    }
    println!("fixed_unchanged={all_unchanged}");
    Ok(if all_unchanged { Outcome::Success } else { Outcome::CheckFailed })
}
