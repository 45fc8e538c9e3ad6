//! Tokenisation, vocabularies and the mixed trainable/pre-trained embedding
//! table.
//!
//! Input-side ids index a [`Vocabulary`] whose rows are split between a
//! trainable block (specials plus the most frequent training tokens) and a
//! frozen block filled from a pre-trained vector file. Both blocks feed one
//! trainable affine projection into the model's hidden size.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Output vocabulary only.
pub const CPY: usize = 4;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<s>";
pub const EOS_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";
pub const CPY_TOKEN: &str = "<cpy>";

/// Initialisation range for trainable rows.
pub const INIT_SCALE: f64 = 0.08;

/// Lowercases, splits on whitespace, and splits every non-alphanumeric
/// character into its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars().flat_map(char::to_lowercase) {
            if c.is_alphanumeric() {
                word.push(c);
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_string());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

pub fn count_tokens<'a, I, S>(sentences: I) -> HashMap<String, u64>
where
    I: IntoIterator<Item = &'a S>,
    S: AsRef<[String]> + 'a + ?Sized,
{
    let mut counts = HashMap::new();
    for s in sentences {
        for tok in s.as_ref() {
            *counts.entry(tok.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Tokens sorted by descending count, ties lexicographic.
fn ranked(counts: &HashMap<String, u64>) -> Vec<(&str, u64)> {
    let mut ranked: Vec<(&str, u64)> = counts.iter().map(|(t, &c)| (t.as_str(), c)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked
}

/// Token <-> id tables. Specials occupy the lowest ids in the order
/// PAD, BOS, EOS, UNK and, for output vocabularies only, CPY.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    has_copy: bool,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn with_specials(has_copy: bool) -> Self {
        let mut tokens: Vec<String> = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if has_copy {
            tokens.push(CPY_TOKEN.to_string());
        }
        let counts = vec![0; tokens.len()];
        let mut v = Vocabulary {
            tokens,
            counts,
            has_copy,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    fn push(&mut self, token: &str, count: u64) {
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
        self.counts.push(count);
    }

    /// Restores the lookup table after deserialisation.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn from_tokens(tokens: &[String], counts: &[u64], has_copy: bool) -> Result<Self> {
        let mut v = Self::with_specials(has_copy);
        let n = v.num_specials();
        if tokens.len() < n || tokens[..n] != v.tokens[..] || counts.len() != tokens.len() {
            return Err(Error::Contract(
                "vocabulary table does not start with the expected specials".into(),
            ));
        }
        v.tokens = tokens.to_vec();
        v.counts = counts.to_vec();
        v.rebuild_index();
        if v.index.len() != v.tokens.len() {
            return Err(Error::Contract("vocabulary has duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn num_specials(&self) -> usize {
        if self.has_copy {
            5
        } else {
            4
        }
    }

    pub fn has_copy(&self) -> bool {
        self.has_copy
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or UNK.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < self.num_specials()
    }
}

/// Specials plus up to `max_size` of the most frequent tokens occurring at
/// least `min_count` times; ties at the cutoff go to the lexicographically
/// smaller token.
pub fn build_output_vocab<'a, I, S>(sentences: I, max_size: usize, min_count: u64) -> Vocabulary
where
    I: IntoIterator<Item = &'a S>,
    S: AsRef<[String]> + 'a + ?Sized,
{
    let counts = count_tokens(sentences);
    let mut vocab = Vocabulary::with_specials(true);
    for (tok, c) in ranked(&counts)
        .into_iter()
        .filter(|&(_, c)| c >= min_count)
        .take(max_size)
    {
        if vocab.get(tok).is_none() {
            vocab.push(tok, c);
        }
    }
    vocab
}

/// Pre-trained vectors keyed by token, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainedTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
}

impl PretrainedTable {
    pub fn new(dim: usize) -> Self {
        PretrainedTable {
            dim,
            ..Default::default()
        }
    }

    /// Inserts a vector; returns false (and keeps the old one) on duplicates.
    pub fn insert(&mut self, token: &str, vector: &[f64]) -> Result<bool> {
        if vector.len() != self.dim {
            return Err(Error::Contract(format!(
                "vector for {token} has {} values, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if self.index.contains_key(token) {
            return Ok(false);
        }
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
        self.vectors.extend_from_slice(vector);
        Ok(true)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index
            .get(token)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }
}

/// Parses `<token> <f1> ... <f_dim>` lines. Blank lines are ignored;
/// duplicate tokens keep their first vector and log a warning.
pub fn parse_pretrained<R: BufRead>(reader: R, dim: usize, source_name: &str) -> Result<PretrainedTable> {
    let mut table = PretrainedTable::new(dim);
    let mut values = Vec::with_capacity(dim);
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else {
            continue;
        };
        values.clear();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::parse(source_name, lineno, format!("bad float {f:?}")))?;
            values.push(v);
        }
        if values.len() != dim {
            return Err(Error::parse(
                source_name,
                lineno,
                format!("expected {dim} values for {token:?}, found {}", values.len()),
            ));
        }
        if !table.insert(token, &values)? {
            log::warn!("{source_name}:{lineno}: duplicate token {token:?} ignored");
        }
    }
    Ok(table)
}

pub fn load_pretrained(path: impl AsRef<Path>, dim: usize) -> Result<PretrainedTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_pretrained(BufReader::new(file), dim, &path.display().to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Trainable(usize),
    Fixed(usize),
}

/// The row partition shared by the encoder and decoder tables.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingLayout {
    slots: Vec<Slot>,
    trainable_rows: usize,
    fixed: Arc<Tensor>,
    dim: usize,
}

impl EmbeddingLayout {
    pub fn new(slots: Vec<Slot>, fixed: Tensor, dim: usize) -> Result<Self> {
        let trainable_rows = slots
            .iter()
            .filter(|s| matches!(s, Slot::Trainable(_)))
            .count();
        let fixed_rows = slots.len() - trainable_rows;
        if fixed.len() != fixed_rows * dim {
            return Err(Error::Contract(format!(
                "fixed block holds {} values, expected {fixed_rows}x{dim}",
                fixed.len()
            )));
        }
        Ok(EmbeddingLayout {
            slots,
            trainable_rows,
            fixed: Arc::new(fixed),
            dim,
        })
    }

    pub fn slot(&self, id: usize) -> Option<Slot> {
        self.slots.get(id).copied()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn trainable_rows(&self) -> usize {
        self.trainable_rows
    }

    pub fn fixed(&self) -> &Tensor {
        &self.fixed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// Builds the input vocabulary and its row partition.
///
/// With `trainable_count = None` every training token gets a trainable row
/// and `pretrained` is ignored. Otherwise the top `trainable_count` tokens
/// are trainable and every other pre-trained token gets a frozen row; a
/// token present in both keeps its trainable row.
pub fn build_input_layout<'a, I, S>(
    sentences: I,
    pretrained: Option<&PretrainedTable>,
    trainable_count: Option<usize>,
    dim: usize,
) -> Result<(Vocabulary, EmbeddingLayout)>
where
    I: IntoIterator<Item = &'a S>,
    S: AsRef<[String]> + 'a + ?Sized,
{
    let counts = count_tokens(sentences);
    let mut vocab = Vocabulary::with_specials(false);
    let ranked = ranked(&counts);
    let take = trainable_count.unwrap_or(ranked.len());
    for &(tok, c) in ranked.iter().take(take) {
        if vocab.get(tok).is_none() {
            vocab.push(tok, c);
        }
    }
    let mut slots: Vec<Slot> = (0..vocab.len()).map(Slot::Trainable).collect();
    let mut fixed = Vec::new();
    if let (Some(table), Some(_)) = (pretrained, trainable_count) {
        if table.dim() != dim {
            return Err(Error::Contract(format!(
                "pre-trained vectors have dimension {}, model expects {dim}",
                table.dim()
            )));
        }
        for tok in table.tokens() {
            if vocab.get(tok).is_some() {
                continue;
            }
            let c = counts.get(tok).copied().unwrap_or(0);
            slots.push(Slot::Fixed(fixed.len() / dim));
            vocab.push(tok, c);
            fixed.extend_from_slice(table.get(tok).expect("token in table"));
        }
    }
    let rows = fixed.len() / dim.max(1);
    let layout = EmbeddingLayout::new(slots, Tensor::matrix(rows, dim, fixed), dim)?;
    Ok((vocab, layout))
}

/// What a decoder or encoder input position looks up.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedKey {
    Token(usize),
    /// The decoder-side row for a fed-back copy token.
    CopyMarker,
}

/// A mixed embedding table: trainable rows and a projection live in a
/// [`ParamStore`], frozen rows live in the shared layout.
#[derive(Clone, Debug)]
pub struct MixedEmbeddingTable {
    layout: Arc<EmbeddingLayout>,
    trainable: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    marker_row: Option<usize>,
}

impl MixedEmbeddingTable {
    /// Registers `<prefix>.trainable`, `<prefix>.proj_w` and `<prefix>.proj_b`.
    /// With `copy_marker` the trainable block gets one extra row for
    /// [`EmbedKey::CopyMarker`].
    pub fn register<R: Rng + ?Sized>(
        layout: Arc<EmbeddingLayout>,
        out_dim: usize,
        copy_marker: bool,
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let rows = layout.trainable_rows() + usize::from(copy_marker);
        let trainable = store.add(
            format!("{prefix}.trainable"),
            uniform(&[rows, layout.dim()], INIT_SCALE, rng),
        );
        let proj_w = store.add(
            format!("{prefix}.proj_w"),
            uniform(&[layout.dim(), out_dim], INIT_SCALE, rng),
        );
        let proj_b = store.add(format!("{prefix}.proj_b"), Tensor::zeros(&[out_dim]));
        MixedEmbeddingTable {
            marker_row: copy_marker.then(|| layout.trainable_rows()),
            layout,
            trainable,
            proj_w,
            proj_b,
        }
    }

    /// Reattaches a table to parameters that already exist in `store`.
    pub fn attach(
        layout: Arc<EmbeddingLayout>,
        copy_marker: bool,
        prefix: &str,
        store: &ParamStore,
    ) -> Result<Self> {
        let find = |suffix: &str| {
            store
                .find(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::Contract(format!("missing parameter {prefix}.{suffix}")))
        };
        let table = MixedEmbeddingTable {
            marker_row: copy_marker.then(|| layout.trainable_rows()),
            trainable: find("trainable")?,
            proj_w: find("proj_w")?,
            proj_b: find("proj_b")?,
            layout,
        };
        let rows = table.layout.trainable_rows() + usize::from(copy_marker);
        if store.get(table.trainable).shape() != [rows, table.layout.dim()] {
            return Err(Error::Contract(format!(
                "{prefix}.trainable has shape {:?}, layout needs [{rows}, {}]",
                store.get(table.trainable).shape(),
                table.layout.dim()
            )));
        }
        Ok(table)
    }

    pub fn layout(&self) -> &Arc<EmbeddingLayout> {
        &self.layout
    }

    pub fn trainable_param(&self) -> ParamId {
        self.trainable
    }

    pub fn projection_params(&self) -> (ParamId, ParamId) {
        (self.proj_w, self.proj_b)
    }

    /// Row lookup followed by the affine projection: `[keys.len(), out_dim]`.
    /// Gradients reach trainable rows only.
    pub fn embed<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        bound: &Bound,
        keys: &[EmbedKey],
    ) -> Result<Var> {
        let n = keys.len();
        let mut t_ids = Vec::new();
        let mut t_dest = Vec::new();
        let mut f_ids = Vec::new();
        let mut f_dest = Vec::new();
        for (k, key) in keys.iter().enumerate() {
            let slot = match *key {
                EmbedKey::Token(id) => self.layout.slot(id).ok_or(
                    crate::tensor::TensorError::Index {
                        index: id,
                        len: self.layout.slots().len(),
                    },
                )?,
                EmbedKey::CopyMarker => Slot::Trainable(self.marker_row.ok_or_else(|| {
                    Error::Contract("this table has no copy-marker row".into())
                })?),
            };
            match slot {
                Slot::Trainable(r) => {
                    t_ids.push(r);
                    t_dest.push(k);
                }
                Slot::Fixed(r) => {
                    f_ids.push(r);
                    f_dest.push(k);
                }
            }
        }
        let rows = if f_ids.is_empty() {
            tape.gather_rows(bound[self.trainable], &t_ids)?
        } else {
            let frozen = self.layout.fixed().gather_rows(&f_ids)?;
            let frozen = tape.constant(frozen);
            let mut parts = vec![(frozen, f_dest)];
            if !t_ids.is_empty() {
                let t = tape.gather_rows(bound[self.trainable], &t_ids)?;
                parts.push((t, t_dest));
            }
            tape.merge_rows(&parts, n)?
        };
        let projected = tape.matmul(rows, bound[self.proj_w])?;
        Ok(tape.add_bias(projected, bound[self.proj_b])?)
    }
}
