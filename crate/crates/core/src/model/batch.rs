use serde::{Deserialize, Serialize};

use super::Seq2Seq;
use crate::error::{Error, Result};
use crate::vocab::{EmbedKey, BOS, EOS, PAD};

/// A tokenized complex/simple sentence pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl Pair {
    pub fn new(source: Vec<String>, target: Vec<String>) -> Self {
        Pair { source, target }
    }

    /// Tokenizes both sides with [`crate::vocab::tokenize`].
    pub fn from_text(source: &str, target: &str) -> Self {
        Pair {
            source: crate::vocab::tokenize(source),
            target: crate::vocab::tokenize(target),
        }
    }
}

/// Padded, id-mapped batch. All id sequences are time-major.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Truncated source tokens.
    pub sources: Vec<Vec<String>>,
    /// Truncated target tokens, without EOS. Empty for generation batches.
    pub targets: Vec<Vec<String>>,
    pub(crate) src_ids: Vec<usize>,
    pub(crate) src_lens: Vec<usize>,
    pub(crate) src_steps: usize,
    pub(crate) dec_keys: Vec<EmbedKey>,
    pub(crate) tgt_ids: Vec<usize>,
    /// Decoder steps per row, including the EOS step.
    pub(crate) tgt_lens: Vec<usize>,
    pub(crate) tgt_steps: usize,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.sources.len()
    }

    pub fn source_lens(&self) -> &[usize] {
        &self.src_lens
    }

    pub fn target_lens(&self) -> &[usize] {
        &self.tgt_lens
    }

    /// Output-vocabulary targets of row `b`, EOS included.
    pub fn target_ids(&self, b: usize) -> Vec<usize> {
        let n = self.size();
        (0..self.tgt_lens[b]).map(|i| self.tgt_ids[i * n + b]).collect()
    }
}

impl Seq2Seq {
    /// Encoder-only batch for generation.
    pub fn source_batch<S: AsRef<[String]>>(&self, sources: &[S]) -> Result<Batch> {
        let mut batch = self.encoder_side(sources.iter().map(|s| s.as_ref()))?;
        batch.targets = vec![Vec::new(); batch.size()];
        batch.tgt_lens = vec![0; batch.size()];
        Ok(batch)
    }

    /// Batch for teacher-forced decoding. Sources are truncated to
    /// `max_len` tokens, targets to `max_len - 1` so that EOS fits.
    pub fn pair_batch(&self, pairs: &[&Pair]) -> Result<Batch> {
        let mut batch = self.encoder_side(pairs.iter().map(|p| p.source.as_slice()))?;
        let n = pairs.len();
        let keep = self.hp.max_len - 1;
        batch.targets = pairs
            .iter()
            .map(|p| p.target[..p.target.len().min(keep)].to_vec())
            .collect();
        batch.tgt_lens = batch.targets.iter().map(|t| t.len() + 1).collect();
        batch.tgt_steps = batch.tgt_lens.iter().copied().max().unwrap_or(0);
        batch.dec_keys = vec![EmbedKey::Token(PAD); batch.tgt_steps * n];
        batch.tgt_ids = vec![PAD; batch.tgt_steps * n];
        for b in 0..n {
            let tgt = &batch.targets[b];
            let src = &batch.sources[b];
            batch.dec_keys[b] = EmbedKey::Token(BOS);
            for (i, word) in tgt.iter().enumerate() {
                batch.dec_keys[(i + 1) * n + b] = EmbedKey::Token(self.input_vocab.id(word));
                batch.tgt_ids[i * n + b] = self.target_id(word, src);
            }
            batch.tgt_ids[tgt.len() * n + b] = EOS;
        }
        Ok(batch)
    }

    fn encoder_side<'s>(&self, sources: impl Iterator<Item = &'s [String]>) -> Result<Batch> {
        let sources: Vec<Vec<String>> = sources
            .map(|s| s[..s.len().min(self.hp.max_len)].to_vec())
            .collect();
        if sources.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if let Some(b) = sources.iter().position(Vec::is_empty) {
            return Err(Error::Contract(format!("source sentence {b} is empty")));
        }
        let n = sources.len();
        let src_lens: Vec<usize> = sources.iter().map(Vec::len).collect();
        let src_steps = src_lens.iter().copied().max().unwrap_or(0);
        let mut src_ids = vec![PAD; src_steps * n];
        for (b, s) in sources.iter().enumerate() {
            for (t, w) in s.iter().enumerate() {
                src_ids[t * n + b] = self.input_vocab.id(w);
            }
        }
        Ok(Batch {
            sources,
            targets: Vec::new(),
            src_ids,
            src_lens,
            src_steps,
            dec_keys: Vec::new(),
            tgt_ids: Vec::new(),
            tgt_lens: Vec::new(),
            tgt_steps: 0,
        })
    }
}
