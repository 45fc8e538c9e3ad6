use std::cell::Cell;

use serde::{Deserialize, Serialize};

use super::layers::{argmax, gru_cell, output_log_probs};
use super::{Batch, Mode, Pair, Seq2Seq};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::{EmbedKey, CPY, EOS_TOKEN};

/// Encoder activations for one batch.
#[derive(Debug)]
pub struct EncoderState {
    layers: Vec<Vec<Var>>,
    finals: Vec<Var>,
    top: Option<Var>,
    lens: Vec<usize>,
    top_reads: Cell<usize>,
}

impl EncoderState {
    /// Final state of every layer, `[B, H]` each.
    pub fn finals(&self) -> &[Var] {
        &self.finals
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn steps(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    /// Per-step states of layer `l`, `[B, H]` each. Reading the top layer
    /// counts as a read of the attention memory.
    pub fn layer(&self, l: usize) -> &[Var] {
        if l + 1 == self.layers.len() {
            self.top_reads.set(self.top_reads.get() + 1);
        }
        &self.layers[l]
    }

    /// The attention memory `[B, T, H]`; `None` when attention is disabled.
    pub fn top_sequence(&self) -> Option<Var> {
        self.top_reads.set(self.top_reads.get() + 1);
        self.top
    }

    /// How many times the top-layer sequence has been read.
    pub fn top_reads(&self) -> usize {
        self.top_reads.get()
    }
}

/// Tape handles produced by a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Per step, `[B, V]` log-probabilities.
    pub log_probs: Vec<Var>,
    /// Per step, `[B, T]` attention weights (absent without attention).
    pub attention: Vec<Option<Var>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Attention over the source positions.
    pub attention: Vec<f64>,
    /// Most attended source position (lowest index on ties).
    pub argmax: usize,
    /// Emitted output id.
    pub token: usize,
    /// Emitted surface token; copy emissions resolve to the attended word.
    pub surface: String,
    pub p_copy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<TraceStep>,
}

impl DecodeTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Steps whose emission went through the copy token.
    pub fn copies(&self) -> usize {
        self.steps.iter().filter(|s| s.token == CPY).count()
    }

    pub fn argmaxes(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.argmax).collect()
    }
}

/// Per-row attention override: `Some(row)` replaces the model attention.
pub(crate) type AttentionOverride = Vec<Vec<Option<Vec<f64>>>>;

impl Seq2Seq {
    pub fn encode<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &Bound,
        batch: &Batch,
        mode: &mut Mode,
    ) -> Result<EncoderState> {
        let n = batch.size();
        let h = self.hp.hidden;
        let keys: Vec<EmbedKey> = batch.src_ids.iter().map(|&i| EmbedKey::Token(i)).collect();
        let emb = self.wiring.enc_embed.embed(tape, bound, &keys)?;
        let emb = mode.apply(tape, emb)?;
        let zero = tape.constant(Tensor::zeros(&[n, h]));
        let mut state = vec![zero; self.hp.layers];
        let mut layers = vec![Vec::with_capacity(batch.src_steps); self.hp.layers];
        for t in 0..batch.src_steps {
            let keep: Vec<bool> = batch.src_lens.iter().map(|&l| t < l).collect();
            let full = keep.iter().all(|&k| k);
            let mut x = tape.slice_rows(emb, t * n, n)?;
            for (l, ids) in self.wiring.enc.iter().enumerate() {
                let next = gru_cell(tape, x, state[l], &ids.vars(bound))?;
                state[l] = if full {
                    next
                } else {
                    tape.blend_rows(&keep, next, state[l])?
                };
                layers[l].push(state[l]);
                x = state[l];
            }
        }
        let top = if self.hp.use_attention {
            let seq = tape.stack(&layers[self.hp.layers - 1])?;
            Some(mode.apply(tape, seq)?)
        } else {
            None
        };
        Ok(EncoderState {
            layers,
            finals: state,
            top,
            lens: batch.src_lens.clone(),
            top_reads: Cell::new(0),
        })
    }

    /// Decoder initial states from the encoder finals.
    pub(crate) fn bridge<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &Bound,
        enc: &EncoderState,
    ) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.hp.layers);
        for (l, &(w, b)) in self.wiring.bridge.iter().enumerate() {
            let x = tape.matmul(enc.finals[l], bound[w])?;
            out.push(tape.add_bias(x, bound[b])?);
        }
        Ok(out)
    }

    /// One decoder step for the whole batch. `x` is the embedded input
    /// `[B, H]`; `state` is updated in place.
    pub(crate) fn decoder_step<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &Bound,
        enc: &EncoderState,
        x: Var,
        state: &mut [Var],
        mode: &mut Mode,
        gt: Option<(&[bool], Tensor)>,
    ) -> Result<(Var, Option<Var>)> {
        let mut input = x;
        for (l, ids) in self.wiring.dec.iter().enumerate() {
            state[l] = gru_cell(tape, input, state[l], &ids.vars(bound))?;
            input = state[l];
        }
        let top = input;
        let memory = if self.hp.use_attention {
            enc.top_sequence()
        } else {
            None
        };
        let (context, weights) = match memory {
            Some(memory) => {
                let scores = tape.attn_scores(memory, top)?;
                let mut weights = tape.softmax_rows_masked(scores, &enc.lens)?;
                if let Some((keep, rows)) = gt {
                    let fixed = tape.constant(rows);
                    weights = tape.blend_rows(keep, fixed, weights)?;
                }
                let c = tape.attn_context(weights, memory)?;
                (Some(mode.apply(tape, c)?), Some(weights))
            }
            None => (None, None),
        };
        let d = mode.apply(tape, top)?;
        let lp = output_log_probs(
            tape,
            context,
            d,
            bound[self.wiring.out_w],
            bound[self.wiring.out_b],
        )?;
        Ok((lp, weights))
    }

    pub(crate) fn embed_decoder<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &Bound,
        keys: &[EmbedKey],
    ) -> Result<Var> {
        self.wiring.dec_embed.embed(tape, bound, keys)
    }

    /// Teacher-forced decoding of a pair batch.
    pub fn decode_teacher<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &Bound,
        enc: &EncoderState,
        batch: &Batch,
        mode: &mut Mode,
    ) -> Result<Forward> {
        self.decode_teacher_with(tape, bound, enc, batch, mode, None)
    }

    pub(crate) fn decode_teacher_with<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &Bound,
        enc: &EncoderState,
        batch: &Batch,
        mode: &mut Mode,
        gt: Option<&AttentionOverride>,
    ) -> Result<Forward> {
        let n = batch.size();
        if batch.tgt_steps == 0 {
            return Err(Error::Contract("teacher forcing needs targets".into()));
        }
        let emb = self.embed_decoder(tape, bound, &batch.dec_keys)?;
        let emb = mode.apply(tape, emb)?;
        let mut state = self.bridge(tape, bound, enc)?;
        let mut fwd = Forward {
            log_probs: Vec::with_capacity(batch.tgt_steps),
            attention: Vec::with_capacity(batch.tgt_steps),
        };
        let width = batch.src_steps;
        for i in 0..batch.tgt_steps {
            let x = tape.slice_rows(emb, i * n, n)?;
            let override_rows = gt.map(|rows| {
                let mut keep = vec![false; n];
                let mut data = vec![0.0; n * width];
                for b in 0..n {
                    if let Some(Some(row)) = rows[b].get(i) {
                        keep[b] = true;
                        data[b * width..b * width + row.len()].copy_from_slice(row);
                    }
                }
                (keep, Tensor::matrix(n, width, data))
            });
            let gt_arg = override_rows.as_ref().map(|(k, t)| (k.as_slice(), t.clone()));
            let (lp, a) = self.decoder_step(tape, bound, enc, x, &mut state, mode, gt_arg)?;
            fwd.log_probs.push(lp);
            fwd.attention.push(a);
        }
        Ok(fwd)
    }

    /// Most attended source position of row `b` at step `i`; position 0
    /// when attention is disabled.
    pub(crate) fn attention_row(
        &self,
        tape: &Tape,
        batch: &Batch,
        fwd_attention: Option<Var>,
        b: usize,
    ) -> Vec<f64> {
        let m = batch.src_lens[b];
        match fwd_attention {
            Some(a) => tape.value(a).row(b)[..m].to_vec(),
            None => vec![1.0 / m as f64; m],
        }
    }

    /// Copy indicators for every row: the target word equals the source
    /// word at the argmax-attention position. The EOS step is never a copy.
    pub fn copy_flags(&self, tape: &Tape, batch: &Batch, fwd: &Forward) -> Vec<Vec<bool>> {
        (0..batch.size())
            .map(|b| {
                let argmaxes: Vec<usize> = (0..batch.tgt_lens[b])
                    .map(|i| self.attention_argmax(tape, batch, fwd.attention[i], b))
                    .collect();
                let mut targets = batch.targets[b].clone();
                targets.push(EOS_TOKEN.to_string());
                super::copy_targets(&batch.sources[b], &argmaxes, &targets)
            })
            .collect()
    }

    fn attention_argmax(&self, tape: &Tape, batch: &Batch, a: Option<Var>, b: usize) -> usize {
        match a {
            Some(a) => argmax(&tape.value(a).row(b)[..batch.src_lens[b]]),
            None => 0,
        }
    }

    /// Batch loss on the tape: mean over rows of the per-sentence loss.
    /// `kappa` selects the two-part loss.
    pub fn loss_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        batch: &Batch,
        fwd: &Forward,
        kappa: Option<&[Vec<bool>]>,
    ) -> Result<Var> {
        let n = batch.size();
        let mut terms = Vec::new();
        for (i, &lp) in fwd.log_probs.iter().enumerate() {
            let w: Vec<f64> = batch
                .tgt_lens
                .iter()
                .map(|&l| if i < l { -1.0 / (l * n) as f64 } else { 0.0 })
                .collect();
            let targets = &batch.tgt_ids[i * n..(i + 1) * n];
            let picked = tape.pick(lp, targets)?;
            terms.push(tape.weighted_sum(picked, &w)?);
            if let Some(kappa) = kappa {
                let flag = |b: usize| kappa[b].get(i).copied().unwrap_or(false);
                let w_copy: Vec<f64> = (0..n).map(|b| if flag(b) { w[b] } else { 0.0 }).collect();
                let w_keep: Vec<f64> = (0..n).map(|b| if flag(b) { 0.0 } else { w[b] }).collect();
                let lc = tape.pick(lp, &vec![CPY; n])?;
                if w_copy.iter().any(|&x| x != 0.0) {
                    terms.push(tape.weighted_sum(lc, &w_copy)?);
                }
                if w_keep.iter().any(|&x| x != 0.0) {
                    let l1m = tape.log1mexp(lc)?;
                    terms.push(tape.weighted_sum(l1m, &w_keep)?);
                }
            }
        }
        Ok(tape.add_n(&terms)?)
    }

    /// Per-row losses read off a finished forward pass.
    pub fn row_losses(
        &self,
        tape: &Tape,
        batch: &Batch,
        fwd: &Forward,
        kappa: Option<&[Vec<bool>]>,
    ) -> Vec<f64> {
        (0..batch.size())
            .map(|b| {
                let len = batch.tgt_lens[b];
                let mut total = 0.0;
                for i in 0..len {
                    let row = tape.value(fwd.log_probs[i]).row(b);
                    total -= row[batch.tgt_ids[i * batch.size() + b]];
                    if let Some(kappa) = kappa {
                        let lc = row[CPY];
                        total -= if kappa[b][i] {
                            lc
                        } else {
                            crate::tensor::log1mexp(lc)
                        };
                    }
                }
                total / len as f64
            })
            .collect()
    }

    /// Builds the training loss for `batch`. `kappa_override` pins the copy
    /// indicators instead of deriving them from the attention argmax.
    pub fn batch_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &Bound,
        batch: &Batch,
        mode: &mut Mode,
        use_bce: bool,
        kappa_override: Option<&[Vec<bool>]>,
    ) -> Result<Var> {
        let enc = self.encode(tape, bound, batch, mode)?;
        let fwd = self.decode_teacher(tape, bound, &enc, batch, mode)?;
        if !use_bce {
            return self.loss_on_tape(tape, batch, &fwd, None);
        }
        let derived;
        let kappa = match kappa_override {
            Some(k) => k,
            None => {
                derived = self.copy_flags(tape, batch, &fwd);
                &derived
            }
        };
        self.loss_on_tape(tape, batch, &fwd, Some(kappa))
    }

    /// Per-pair losses with dropout disabled.
    pub fn pair_losses(&self, pairs: &[&Pair], use_bce: bool) -> Result<Vec<f64>> {
        let batch = self.pair_batch(pairs)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut mode = Mode::eval();
        let enc = self.encode(&mut tape, &bound, &batch, &mut mode)?;
        let fwd = self.decode_teacher(&mut tape, &bound, &enc, &batch, &mut mode)?;
        let kappa = use_bce.then(|| self.copy_flags(&tape, &batch, &fwd));
        Ok(self.row_losses(&tape, &batch, &fwd, kappa.as_deref()))
    }

    /// Builds traces (attention, argmax, greedy emission) for every row of
    /// a teacher-forced pass.
    pub fn traces(&self, tape: &Tape, batch: &Batch, fwd: &Forward) -> Vec<DecodeTrace> {
        (0..batch.size())
            .map(|b| DecodeTrace {
                steps: (0..batch.tgt_lens[b])
                    .map(|i| {
                        let attention = self.attention_row(tape, batch, fwd.attention[i], b);
                        let j = argmax(&attention);
                        let lp = tape.value(fwd.log_probs[i]).row(b);
                        let token = argmax(lp);
                        self.trace_step(attention, j, token, lp[CPY].exp(), &batch.sources[b])
                    })
                    .collect(),
            })
            .collect()
    }

    pub(crate) fn trace_step(
        &self,
        attention: Vec<f64>,
        argmax: usize,
        token: usize,
        p_copy: f64,
        source: &[String],
    ) -> TraceStep {
        let surface = if token == CPY {
            source[argmax].clone()
        } else {
            self.output_vocab.token(token).to_string()
        };
        TraceStep {
            attention,
            argmax,
            token,
            surface,
            p_copy,
        }
    }

    /// Teacher-forced pass over one pair: per-step output distributions and
    /// the trace. Dropout is active when `mode` is a training mode.
    pub fn decode_train(&self, pair: &Pair, mode: &mut Mode) -> Result<(Vec<Vec<f64>>, DecodeTrace)> {
        let batch = self.pair_batch(&[pair])?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let enc = self.encode(&mut tape, &bound, &batch, mode)?;
        let fwd = self.decode_teacher(&mut tape, &bound, &enc, &batch, mode)?;
        let dists = fwd
            .log_probs
            .iter()
            .map(|&lp| tape.value(lp).data().iter().map(|v| v.exp()).collect())
            .collect();
        let trace = self.traces(&tape, &batch, &fwd).remove(0);
        Ok((dists, trace))
    }

    /// Teacher-forced decoding with attention replaced by count-normalised
    /// ground-truth alignments. `alignment[i][j]` links target word `i` to
    /// source word `j`; rows without any link keep the model attention, as
    /// does the EOS step.
    pub fn decode_with_gt_alignments(
        &self,
        pair: &Pair,
        alignment: &[Vec<f64>],
    ) -> Result<(Vec<Vec<f64>>, DecodeTrace)> {
        if !self.hp.use_attention {
            return Err(Error::Contract(
                "ground-truth alignment decoding needs attention".into(),
            ));
        }
        let m = pair.source.len();
        if alignment.len() != pair.target.len() || alignment.iter().any(|r| r.len() != m) {
            return Err(Error::Contract(format!(
                "alignment matrix is {}x{}, sentences are {}x{m}",
                alignment.len(),
                alignment.first().map_or(0, Vec::len),
                pair.target.len()
            )));
        }
        let batch = self.pair_batch(&[pair])?;
        let m_used = batch.src_lens[0];
        let rows: Vec<Option<Vec<f64>>> = alignment
            .iter()
            .take(batch.targets[0].len())
            .map(|r| {
                let r = &r[..m_used];
                let total: f64 = r.iter().sum();
                (total > 0.0).then(|| r.iter().map(|v| v / total).collect())
            })
            .collect();
        let gt = vec![rows];
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut mode = Mode::eval();
        let enc = self.encode(&mut tape, &bound, &batch, &mut mode)?;
        let fwd = self.decode_teacher_with(&mut tape, &bound, &enc, &batch, &mut mode, Some(&gt))?;
        let dists = fwd
            .log_probs
            .iter()
            .map(|&lp| tape.value(lp).data().iter().map(|v| v.exp()).collect())
            .collect();
        let trace = self.traces(&tape, &batch, &fwd).remove(0);
        Ok((dists, trace))
    }
}
