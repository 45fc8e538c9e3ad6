//! Attentive GRU encoder-decoder with copy feeding and the two-part loss.
//!
//! All forward passes are batched. Per-step matrices are `[B, H]`; encoder
//! inputs are laid out time-major (row `t * B + b`). Padded encoder steps
//! freeze the hidden state, padded attention positions are masked and
//! padded decoder steps get zero loss weight.

mod batch;
mod forward;
mod generate;
mod layers;
mod loss;

pub use batch::{Batch, Pair};
pub use forward::{DecodeTrace, EncoderState, Forward, TraceStep};
pub use generate::Generation;
pub use layers::{argmax, attend, gru_cell, output_log_probs, GruVars};
pub use loss::{copy_targets, loss_bce, loss_ce, loss_total};

use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::vocab::{
    build_input_layout, build_output_vocab, EmbeddingLayout, MixedEmbeddingTable, PretrainedTable,
    Vocabulary, INIT_SCALE,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub layers: usize,
    pub hidden: usize,
    pub embedding_dim: usize,
    pub max_len: usize,
    pub use_attention: bool,
    pub use_copy_feed: bool,
    pub use_bce_loss: bool,
    /// `None`: every training token gets a trainable row and no
    /// pre-trained vectors are used.
    pub trainable_embed_count: Option<usize>,
    pub output_vocab_size: usize,
    pub output_min_count: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            layers: 2,
            hidden: 512,
            embedding_dim: 300,
            max_len: 50,
            use_attention: true,
            use_copy_feed: true,
            use_bce_loss: false,
            trainable_embed_count: None,
            output_vocab_size: 10_000,
            output_min_count: 7,
        }
    }
}

/// Trainable rows used by the `+gv` variants.
pub const GV_TRAINABLE: usize = 5000;

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("embedding_dim", self.embedding_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Contract(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Parses a variant name such as `S4`, `S4-attn`, `S4+gv+bce-feed`.
    pub fn variant(name: &str) -> Result<Self> {
        let bad = || Error::Contract(format!("unknown model variant {name:?}"));
        let mut rest = name.strip_prefix("S4").ok_or_else(bad)?;
        let mut hp = Hyperparams::default();
        while !rest.is_empty() {
            let sign = rest.as_bytes()[0];
            let body = &rest[1..];
            let end = body.find(['+', '-']).unwrap_or(body.len());
            match (sign, &body[..end]) {
                (b'-', "attn") => hp.use_attention = false,
                (b'-', "feed") => hp.use_copy_feed = false,
                (b'+', "bce") => hp.use_bce_loss = true,
                (b'+', "gv") => hp.trainable_embed_count = Some(GV_TRAINABLE),
                _ => return Err(bad()),
            }
            rest = &body[end..];
        }
        Ok(hp)
    }

    pub fn variant_name(&self) -> String {
        let mut s = String::from("S4");
        if self.trainable_embed_count.is_some() {
            s.push_str("+gv");
        }
        if self.use_bce_loss {
            s.push_str("+bce");
        }
        if !self.use_attention {
            s.push_str("-attn");
        }
        if !self.use_copy_feed {
            s.push_str("-feed");
        }
        s
    }

    fn output_features(&self) -> usize {
        if self.use_attention {
            2 * self.hidden
        } else {
            self.hidden
        }
    }
}

/// Dropout policy for one forward pass.
pub struct Mode<'r> {
    ratio: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> Mode<'r> {
    pub fn eval() -> Self {
        Mode {
            ratio: 0.0,
            rng: None,
        }
    }

    pub fn train(ratio: f64, rng: &'r mut dyn RngCore) -> Self {
        Mode {
            ratio,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub(crate) fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> crate::tensor::Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => tape.dropout(x, self.ratio, true, rng),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct GruIds {
    wx: ParamId,
    bx: ParamId,
    uzr: ParamId,
    uh: ParamId,
}

impl GruIds {
    fn vars(&self, bound: &crate::params::Bound) -> GruVars {
        GruVars {
            wx: bound[self.wx],
            bx: bound[self.bx],
            uzr: bound[self.uzr],
            uh: bound[self.uh],
        }
    }
}

#[derive(Clone, Debug)]
struct Wiring {
    enc_embed: MixedEmbeddingTable,
    dec_embed: MixedEmbeddingTable,
    enc: Vec<GruIds>,
    dec: Vec<GruIds>,
    bridge: Vec<(ParamId, ParamId)>,
    out_w: ParamId,
    out_b: ParamId,
}

/// The full model: hyperparameters, vocabularies and parameters.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    hp: Hyperparams,
    input_vocab: Arc<Vocabulary>,
    output_vocab: Arc<Vocabulary>,
    params: ParamStore,
    wiring: Wiring,
    /// Output id to the input id fed back to the decoder.
    out_to_in: Vec<usize>,
}

fn register_gru<R: RngCore>(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) {
    store.add(format!("{prefix}.wx"), uniform(&[input, 3 * hidden], INIT_SCALE, rng));
    store.add(format!("{prefix}.bx"), Tensor::zeros(&[3 * hidden]));
    store.add(format!("{prefix}.uzr"), uniform(&[hidden, 2 * hidden], INIT_SCALE, rng));
    store.add(format!("{prefix}.uh"), uniform(&[hidden, hidden], INIT_SCALE, rng));
}

impl Seq2Seq {
    /// Builds both vocabularies from `pairs` and initialises parameters
    /// from `seed`. Pre-trained vectors are used only when
    /// `hp.trainable_embed_count` is set.
    pub fn build(
        hp: Hyperparams,
        pairs: &[Pair],
        pretrained: Option<&PretrainedTable>,
        seed: u64,
    ) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Contract("cannot build a model from an empty corpus".into()));
        }
        let both = pairs
            .iter()
            .flat_map(|p| [p.source.as_slice(), p.target.as_slice()]);
        let sentences: Vec<&[String]> = both.collect();
        let (input_vocab, layout) = build_input_layout(
            sentences.iter().copied(),
            pretrained,
            hp.trainable_embed_count,
            hp.embedding_dim,
        )?;
        let output_vocab = build_output_vocab(
            pairs.iter().map(|p| p.target.as_slice()),
            hp.output_vocab_size,
            hp.output_min_count,
        );
        Self::new(hp, input_vocab, layout, output_vocab, seed)
    }

    /// Fresh parameters for the given vocabularies.
    pub fn new(
        hp: Hyperparams,
        input_vocab: Vocabulary,
        layout: EmbeddingLayout,
        output_vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        hp.validate()?;
        if layout.dim() != hp.embedding_dim {
            return Err(Error::Contract(format!(
                "embedding layout has dimension {}, hyperparameters say {}",
                layout.dim(),
                hp.embedding_dim
            )));
        }
        let layout = Arc::new(layout);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = hp.hidden;
        MixedEmbeddingTable::register(layout.clone(), h, false, "enc.embed", &mut store, &mut rng);
        for l in 0..hp.layers {
            register_gru(&mut store, &format!("enc.l{l}"), h, h, &mut rng);
        }
        MixedEmbeddingTable::register(layout.clone(), h, true, "dec.embed", &mut store, &mut rng);
        for l in 0..hp.layers {
            register_gru(&mut store, &format!("dec.l{l}"), h, h, &mut rng);
        }
        for l in 0..hp.layers {
            store.add(format!("bridge.l{l}.w"), uniform(&[h, h], INIT_SCALE, &mut rng));
            store.add(format!("bridge.l{l}.b"), Tensor::zeros(&[h]));
        }
        let v = output_vocab.len();
        store.add("out.w", uniform(&[hp.output_features(), v], INIT_SCALE, &mut rng));
        store.add("out.b", Tensor::zeros(&[v]));
        Self::from_params(hp, input_vocab, layout, output_vocab, store)
    }

    /// Wraps existing parameters, checking every name and shape.
    pub fn from_params(
        hp: Hyperparams,
        input_vocab: Vocabulary,
        layout: Arc<EmbeddingLayout>,
        output_vocab: Vocabulary,
        params: ParamStore,
    ) -> Result<Self> {
        hp.validate()?;
        if !output_vocab.has_copy() || input_vocab.has_copy() {
            return Err(Error::Contract(
                "the copy token belongs to the output vocabulary only".into(),
            ));
        }
        if layout.slots().len() != input_vocab.len() {
            return Err(Error::Contract(format!(
                "layout has {} rows for an input vocabulary of {}",
                layout.slots().len(),
                input_vocab.len()
            )));
        }
        let h = hp.hidden;
        let find = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .find(&name)
                .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
            if params.get(id).shape() != shape {
                return Err(Error::Contract(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let gru = |prefix: String| -> Result<GruIds> {
            Ok(GruIds {
                wx: find(format!("{prefix}.wx"), &[h, 3 * h])?,
                bx: find(format!("{prefix}.bx"), &[3 * h])?,
                uzr: find(format!("{prefix}.uzr"), &[h, 2 * h])?,
                uh: find(format!("{prefix}.uh"), &[h, h])?,
            })
        };
        let embed = |prefix: &str, marker: bool| -> Result<MixedEmbeddingTable> {
            let table = MixedEmbeddingTable::attach(layout.clone(), marker, prefix, &params)?;
            find(format!("{prefix}.proj_w"), &[layout.dim(), h])?;
            find(format!("{prefix}.proj_b"), &[h])?;
            Ok(table)
        };
        let v = output_vocab.len();
        let wiring = Wiring {
            enc_embed: embed("enc.embed", false)?,
            dec_embed: embed("dec.embed", true)?,
            enc: (0..hp.layers).map(|l| gru(format!("enc.l{l}"))).collect::<Result<_>>()?,
            dec: (0..hp.layers).map(|l| gru(format!("dec.l{l}"))).collect::<Result<_>>()?,
            bridge: (0..hp.layers)
                .map(|l| {
                    Ok((
                        find(format!("bridge.l{l}.w"), &[h, h])?,
                        find(format!("bridge.l{l}.b"), &[h])?,
                    ))
                })
                .collect::<Result<_>>()?,
            out_w: find("out.w".into(), &[hp.output_features(), v])?,
            out_b: find("out.b".into(), &[v])?,
        };
        let expected = 6 + 4 * 2 * hp.layers + 2 * hp.layers + 2;
        if params.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} parameter tensors, found {}",
                params.len()
            )));
        }
        let out_to_in = output_vocab
            .tokens()
            .iter()
            .map(|t| input_vocab.id(t))
            .collect();
        Ok(Seq2Seq {
            hp,
            input_vocab: Arc::new(input_vocab),
            output_vocab: Arc::new(output_vocab),
            params,
            wiring,
            out_to_in,
        })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    /// Switches between copy feeding and feeding the copy marker. Only
    /// generation is affected, so one trained model serves both variants.
    pub fn set_copy_feed(&mut self, on: bool) {
        self.hp.use_copy_feed = on;
    }

    /// Switches the loss between cross-entropy only and the two-part loss.
    pub fn set_bce_loss(&mut self, on: bool) {
        self.hp.use_bce_loss = on;
    }

    pub fn input_vocab(&self) -> &Vocabulary {
        &self.input_vocab
    }

    pub fn output_vocab(&self) -> &Vocabulary {
        &self.output_vocab
    }

    pub fn layout(&self) -> &Arc<EmbeddingLayout> {
        self.wiring.enc_embed.layout()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_parts(self) -> (Hyperparams, Vocabulary, Arc<EmbeddingLayout>, Vocabulary, ParamStore) {
        let layout = self.wiring.enc_embed.layout().clone();
        (
            self.hp,
            Arc::unwrap_or_clone(self.input_vocab),
            layout,
            Arc::unwrap_or_clone(self.output_vocab),
            self.params,
        )
    }

    /// Output id used as the cross-entropy target for `word`: the word
    /// itself when it is in the output vocabulary, otherwise the copy token
    /// when the source contains it, otherwise UNK.
    pub fn target_id(&self, word: &str, source: &[String]) -> usize {
        match self.output_vocab.get(word) {
            Some(id) => id,
            None if source.iter().any(|s| s == word) => crate::vocab::CPY,
            None => crate::vocab::UNK,
        }
    }
}

#[cfg(test)]
mod tests;
