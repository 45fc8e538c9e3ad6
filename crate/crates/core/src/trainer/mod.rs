//! Optimisation: Adam, length-bucketed minibatches, early stopping and the
//! two-phase schedule (cross-entropy first, then the two-part loss).

mod adam;
mod batching;
mod checkpoint;

pub use adam::{Adam, BETA1, BETA2, EPSILON, LEARNING_RATE};
pub use batching::make_batches;
pub use checkpoint::{Checkpoint, RngState, TrainState, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Mode, Pair, Seq2Seq};
use crate::params::ParamStore;
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    CrossEntropy,
    TwoPart,
}

/// What early stopping monitors on the validation sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopCriterion {
    /// Mean validation loss, lower is better.
    Loss,
    /// Corpus BLEU-4 of greedy outputs, higher is better.
    Bleu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dropout: f64,
    pub validation_sample: usize,
    /// Non-improving validation checks tolerated before a phase ends.
    pub patience: usize,
    /// Epoch limit per phase.
    pub max_epochs: usize,
    pub seed: u64,
    pub stopping: StopCriterion,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            dropout: 0.7,
            validation_sample: 1024,
            patience: 3,
            max_epochs: 30,
            seed: 0,
            stopping: StopCriterion::Loss,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Contract("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Contract(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.validation_sample == 0 {
            return Err(Error::Contract("validation_sample must be at least 1".into()));
        }
        Ok(())
    }
}

/// One validation check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    /// Epoch within the phase; 0 is the check made when phase 2 starts.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub valid_score: f64,
    pub improved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub phase: Phase,
    pub epoch: usize,
    pub bad_checks: usize,
    pub best_score: Option<f64>,
    pub finished: bool,
}

/// Mean per-pair loss with dropout disabled. Pairs are evaluated in a
/// canonical order, so the result does not depend on their order.
pub fn evaluate_validation(model: &Seq2Seq, pairs: &[Pair], use_bce: bool) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("validation needs at least one pair".into()));
    }
    let mut refs: Vec<&Pair> = pairs.iter().collect();
    refs.sort();
    let mut total = 0.0;
    for chunk in refs.chunks(64) {
        total += model.pair_losses(chunk, use_bce)?.iter().sum::<f64>();
    }
    Ok(total / pairs.len() as f64)
}

/// Corpus BLEU-4 of greedy outputs against the targets.
pub fn evaluate_bleu(model: &Seq2Seq, pairs: &[Pair]) -> Result<f64> {
    let sources: Vec<&[String]> = pairs.iter().map(|p| p.source.as_slice()).collect();
    let outputs = model.generate(&sources)?;
    let cands: Vec<Vec<String>> = outputs.into_iter().map(|g| g.tokens).collect();
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.target.clone()).collect();
    Ok(crate::metrics::bleu(&cands, &refs, 4))
}

/// Seeded sample of at most `n` validation pairs, in corpus order.
fn validation_sample(valid: &[Pair], n: usize, seed: u64) -> Vec<Pair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c69_6461_7465);
    let mut idx = rand::seq::index::sample(&mut rng, valid.len(), n.min(valid.len())).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| valid[i].clone()).collect()
}

/// Owns the model during training. Supports pausing after any number of
/// epochs through [`Trainer::checkpoint`] and [`Trainer::resume`].
pub struct Trainer {
    model: Seq2Seq,
    best: ParamStore,
    config: TrainConfig,
    train: Vec<Pair>,
    valid: Vec<Pair>,
    adam: Adam,
    rng: ChaCha8Rng,
    progress: Progress,
    history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(model: Seq2Seq, train: Vec<Pair>, valid: &[Pair], config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Contract("training split is empty".into()));
        }
        if valid.is_empty() {
            return Err(Error::Contract("validation split is empty".into()));
        }
        let valid = validation_sample(valid, config.validation_sample, config.seed);
        Ok(Trainer {
            best: model.params().clone(),
            adam: Adam::new(model.params()),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            progress: Progress {
                phase: Phase::CrossEntropy,
                epoch: 0,
                bad_checks: 0,
                best_score: None,
                finished: config.max_epochs == 0,
            },
            history: Vec::new(),
            model,
            config,
            train,
            valid,
        })
    }

    /// Continues a paused run. `train` and `valid` must be the corpus the
    /// run started with.
    pub fn resume(ckpt: Checkpoint, train: Vec<Pair>, valid: &[Pair]) -> Result<Self> {
        let state = ckpt
            .state
            .ok_or_else(|| Error::Contract("checkpoint holds no training state".into()))?;
        let model = Seq2Seq::from_params(
            ckpt.hyperparams,
            ckpt.input_vocab,
            ckpt.layout,
            ckpt.output_vocab,
            state.current,
        )?;
        let mut t = Trainer::new(model, train, valid, ckpt.config)?;
        t.best = ckpt.best;
        t.adam = state.adam;
        t.rng = state.rng.restore();
        t.progress = state.progress;
        t.history = ckpt.history;
        Ok(t)
    }

    pub fn model(&self) -> &Seq2Seq {
        &self.model
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn is_finished(&self) -> bool {
        self.progress.finished
    }

    /// The model with the best parameters seen so far.
    pub fn best_model(&self) -> Result<Seq2Seq> {
        let (hp, iv, layout, ov, _) = self.model.clone().into_parts();
        Seq2Seq::from_params(hp, iv, layout, ov, self.best.clone())
    }

    /// Trains to completion and returns the final checkpoint.
    pub fn run(mut self) -> Result<Checkpoint> {
        while !self.progress.finished {
            self.run_for(1)?;
        }
        Ok(self.checkpoint())
    }

    /// Runs at most `epochs` epochs; returns whether training finished.
    pub fn run_for(&mut self, epochs: usize) -> Result<bool> {
        for _ in 0..epochs {
            if self.progress.finished {
                break;
            }
            self.epoch()?;
        }
        Ok(self.progress.finished)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            hyperparams: self.model.hyperparams().clone(),
            config: self.config.clone(),
            input_vocab: self.model.input_vocab().clone(),
            output_vocab: self.model.output_vocab().clone(),
            layout: self.model.layout().clone(),
            best: self.best.clone(),
            best_score: self.progress.best_score,
            history: self.history.clone(),
            state: Some(TrainState {
                current: self.model.params().clone(),
                adam: self.adam.clone(),
                rng: RngState::capture(&self.rng),
                progress: self.progress.clone(),
            }),
        }
    }

    fn better(&self, new: f64, old: Option<f64>) -> bool {
        match (old, self.config.stopping) {
            (None, _) => true,
            (Some(old), StopCriterion::Loss) => new < old,
            (Some(old), StopCriterion::Bleu) => new > old,
        }
    }

    fn validation_score(&self) -> Result<f64> {
        match self.config.stopping {
            StopCriterion::Loss => evaluate_validation(
                &self.model,
                &self.valid,
                self.progress.phase == Phase::TwoPart,
            ),
            StopCriterion::Bleu => evaluate_bleu(&self.model, &self.valid),
        }
    }

    fn epoch(&mut self) -> Result<()> {
        let train_loss = self.train_epoch()?;
        self.progress.epoch += 1;
        let score = self.validation_score()?;
        let improved = self.better(score, self.progress.best_score);
        if improved {
            self.progress.best_score = Some(score);
            self.progress.bad_checks = 0;
            self.best = self.model.params().clone();
        } else {
            self.progress.bad_checks += 1;
        }
        log::info!(
            "phase={:?} epoch={} train_loss={train_loss:.5} valid={score:.5}{}",
            self.progress.phase,
            self.progress.epoch,
            if improved { " *" } else { "" }
        );
        self.history.push(EpochRecord {
            phase: self.progress.phase,
            epoch: self.progress.epoch,
            train_loss: Some(train_loss),
            valid_score: score,
            improved,
        });
        let phase_done = self.progress.bad_checks > self.config.patience
            || self.progress.epoch >= self.config.max_epochs;
        if phase_done {
            if self.progress.phase == Phase::CrossEntropy && self.model.hyperparams().use_bce_loss {
                self.start_two_part()?;
            } else {
                self.progress.finished = true;
            }
        }
        Ok(())
    }

    /// Phase 2 starts from the phase-1 best with fresh Adam moments. The
    /// best model is re-scored under the two-part loss so that phase 2 only
    /// replaces it on a real improvement.
    fn start_two_part(&mut self) -> Result<()> {
        *self.model.params_mut() = self.best.clone();
        self.adam = Adam::new(self.model.params());
        self.progress.phase = Phase::TwoPart;
        self.progress.epoch = 0;
        self.progress.bad_checks = 0;
        let score = self.validation_score()?;
        self.progress.best_score = Some(score);
        self.history.push(EpochRecord {
            phase: Phase::TwoPart,
            epoch: 0,
            train_loss: None,
            valid_score: score,
            improved: true,
        });
        Ok(())
    }

    fn train_epoch(&mut self) -> Result<f64> {
        let lens: Vec<usize> = self.train.iter().map(|p| p.source.len()).collect();
        let batches = make_batches(&lens, self.config.batch_size, &mut self.rng);
        let use_bce = self.progress.phase == Phase::TwoPart;
        let mut total = 0.0;
        for idx in &batches {
            let refs: Vec<&Pair> = idx.iter().map(|&i| &self.train[i]).collect();
            let batch = self.model.pair_batch(&refs)?;
            let (loss, grads) = {
                let mut tape = Tape::new();
                let bound = self.model.params().bind(&mut tape);
                let mut mode = Mode::train(self.config.dropout, &mut self.rng);
                let loss = self
                    .model
                    .batch_loss(&mut tape, &bound, &batch, &mut mode, use_bce, None)?;
                tape.backward(loss)?;
                (tape.value(loss).item(), bound.grads(&tape, self.model.params()))
            };
            if !loss.is_finite() {
                return Err(Error::Contract(format!("training loss became {loss}")));
            }
            self.adam.step(self.model.params_mut(), &grads)?;
            total += loss * idx.len() as f64;
        }
        Ok(total / self.train.len() as f64)
    }
}

/// Trains `model` to completion.
pub fn train(model: Seq2Seq, train: Vec<Pair>, valid: &[Pair], config: TrainConfig) -> Result<Checkpoint> {
    Trainer::new(model, train, valid, config)?.run()
}

#[cfg(test)]
mod tests;
