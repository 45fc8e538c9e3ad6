use super::forward::DecodeTrace;
use super::layers::argmax;
use super::{Mode, Seq2Seq};
use crate::error::Result;
use crate::tensor::Tape;
use crate::vocab::{EmbedKey, BOS, CPY, EOS, PAD};

/// Greedy output for one source sentence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Generation {
    pub tokens: Vec<String>,
    pub trace: DecodeTrace,
}

/// Sentences decoded per tape.
const CHUNK: usize = 64;

impl Seq2Seq {
    /// Greedy decoding of one sentence.
    pub fn decode_generate(&self, source: &[String]) -> Result<Generation> {
        Ok(self.generate(&[source])?.remove(0))
    }

    /// Greedy decoding, batched. Stops each row at EOS or `max_len`.
    ///
    /// A copy emission resolves to the most attended source word. With copy
    /// feeding that word is the next decoder input; without it the decoder
    /// sees the copy marker instead.
    pub fn generate<S: AsRef<[String]>>(&self, sources: &[S]) -> Result<Vec<Generation>> {
        let mut out = Vec::with_capacity(sources.len());
        for chunk in sources.chunks(CHUNK) {
            out.extend(self.generate_chunk(chunk)?);
        }
        Ok(out)
    }

    fn generate_chunk<S: AsRef<[String]>>(&self, sources: &[S]) -> Result<Vec<Generation>> {
        let batch = self.source_batch(sources)?;
        let n = batch.size();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut mode = Mode::eval();
        let enc = self.encode(&mut tape, &bound, &batch, &mut mode)?;
        let mut state = self.bridge(&mut tape, &bound, &enc)?;
        let mut keys = vec![EmbedKey::Token(BOS); n];
        let mut done = vec![false; n];
        let mut out = vec![Generation::default(); n];
        for _ in 0..self.hp.max_len {
            let x = self.embed_decoder(&mut tape, &bound, &keys)?;
            let (lp, a) = self.decoder_step(&mut tape, &bound, &enc, x, &mut state, &mut mode, None)?;
            for b in 0..n {
                if done[b] {
                    keys[b] = EmbedKey::Token(PAD);
                    continue;
                }
                let row = tape.value(lp).row(b);
                let token = greedy(row);
                if token == EOS {
                    done[b] = true;
                    keys[b] = EmbedKey::Token(PAD);
                    continue;
                }
                let p_copy = row[CPY].exp();
                let attention = self.attention_row(&tape, &batch, a, b);
                let j = if a.is_some() { argmax(&attention) } else { 0 };
                let step = self.trace_step(attention, j, token, p_copy, &batch.sources[b]);
                keys[b] = if token != CPY {
                    EmbedKey::Token(self.out_to_in[token])
                } else if self.hp.use_copy_feed {
                    EmbedKey::Token(self.input_vocab.id(&step.surface))
                } else {
                    EmbedKey::CopyMarker
                };
                out[b].tokens.push(step.surface.clone());
                out[b].trace.steps.push(step);
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}

/// Argmax over the output distribution, never choosing PAD or BOS (they
/// are not valid emissions).
fn greedy(log_probs: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &v) in log_probs.iter().enumerate().skip(EOS + 1) {
        if v > log_probs[best] {
            best = i;
        }
    }
    best
}
