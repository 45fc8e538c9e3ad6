//! Sentence alignment between a complex and a simplified document, with
//! two-way sentence splits, plus diff-style word alignment.
//!
//! `a(i, j)` is the best score for aligning complex sentences `i..` with
//! simple sentences `j..`. It is 0 once either document is exhausted;
//! otherwise the best of
//!
//! * match `i` with `j`: `d(i, j) + a(i+1, j+1)`
//! * skip complex `i`: `gamma + a(i+1, j)`
//! * skip simple `j`: `gamma + a(i, j+1)`
//! * split `i` before word `p` and give the fragments to `j` and `j+1` in
//!   either order: `sigma(frag, s_j) + sigma(frag', s_j+1) + a(i+1, j+2)`
//!
//! where `sigma` is directional smoothed sentence BLEU-4 and `d` is the
//! smaller of both directions. Fragments are `words[..p]` and `words[p..]`
//! for `p` in `1..len`.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 10.0;

/// Tokenized sentences in reading order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub sentences: Vec<Vec<String>>,
}

impl Document {
    pub fn new(sentences: Vec<Vec<String>>) -> Self {
        Document { sentences }
    }

    /// One sentence per non-blank line.
    pub fn from_lines(text: &str) -> Self {
        Document {
            sentences: text
                .lines()
                .map(crate::vocab::tokenize)
                .filter(|s| !s.is_empty())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SplitOrder {
    /// Prefix goes to simple sentence `j`, suffix to `j + 1`.
    PrefixFirst,
    /// Prefix goes to `j + 1`, suffix to `j`.
    SuffixFirst,
}

impl fmt::Display for SplitOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitOrder::PrefixFirst => "prefix-first",
            SplitOrder::SuffixFirst => "suffix-first",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Match {
    Single {
        i: usize,
        j: usize,
        score: f64,
    },
    /// Complex sentence `i` split before word `p`, covering `j` and `j + 1`.
    Split {
        i: usize,
        p: usize,
        j: usize,
        order: SplitOrder,
        score: f64,
    },
}

impl Match {
    pub fn complex(&self) -> usize {
        match *self {
            Match::Single { i, .. } | Match::Split { i, .. } => i,
        }
    }

    pub fn score(&self) -> f64 {
        match *self {
            Match::Single { score, .. } | Match::Split { score, .. } => score,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub matches: Vec<Match>,
    pub skipped_complex: Vec<usize>,
    pub skipped_simple: Vec<usize>,
    /// Skips that paid the penalty. Sentences left over once the other
    /// document is exhausted are listed as skipped but cost nothing.
    pub skip_actions: usize,
    pub score: f64,
}

impl AlignmentResult {
    pub fn skipped(&self) -> usize {
        self.skipped_complex.len() + self.skipped_simple.len()
    }

    /// Checks that indices are used at most once and consumed in order.
    pub fn check(&self, d_comp: usize, d_simp: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        let mut next_i = 0;
        let mut next_j = 0;
        let mut used_c = vec![false; d_comp];
        let mut used_s = vec![false; d_simp];
        for m in &self.matches {
            let (i, js) = match *m {
                Match::Single { i, j, .. } => (i, vec![j]),
                Match::Split { i, j, .. } => (i, vec![j, j + 1]),
            };
            if i < next_i || i >= d_comp || js[0] < next_j || js.iter().any(|&j| j >= d_simp) {
                return bad(format!("match {m:?} out of order or out of range"));
            }
            used_c[i] = true;
            for &j in &js {
                used_s[j] = true;
            }
            next_i = i + 1;
            next_j = js[js.len() - 1] + 1;
        }
        for &i in &self.skipped_complex {
            if i >= d_comp || std::mem::replace(&mut used_c[i], true) {
                return bad(format!("complex sentence {i} used twice"));
            }
        }
        for &j in &self.skipped_simple {
            if j >= d_simp || std::mem::replace(&mut used_s[j], true) {
                return bad(format!("simple sentence {j} used twice"));
            }
        }
        if used_c.iter().chain(&used_s).any(|u| !u) {
            return bad("some sentence is neither matched nor skipped".into());
        }
        Ok(())
    }

    /// Tab-separated lines: matches, then `SKIP_C` and `SKIP_S`.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for m in &self.matches {
            match m {
                Match::Single { i, j, score } => out.push_str(&format!("SINGLE\t{i}\t{j}\t{score:.4}\n")),
                Match::Split { i, p, j, order, score } => {
                    out.push_str(&format!("SPLIT\t{i}\t{p}\t{j}\t{order}\t{score:.4}\n"))
                }
            }
        }
        for i in &self.skipped_complex {
            out.push_str(&format!("SKIP_C\t{i}\n"));
        }
        for j in &self.skipped_simple {
            out.push_str(&format!("SKIP_S\t{j}\n"));
        }
        out
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Directional sentence BLEU-4 of `cand` against `reference`, 0-100.
///
/// Orders 2-4 with no matching n-gram get add-one smoothing; no unigram
/// match gives 0. Either sentence empty gives 0.
pub fn sigma(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cc = ngrams(cand, n);
        let rc = ngrams(reference, n);
        let hits: usize = cc
            .iter()
            .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
        let total = cand.len().saturating_sub(n - 1);
        let p = if hits > 0 {
            hits as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            1.0 / (total + 1) as f64
        };
        log_sum += p.ln();
    }
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * (log_sum / 4.0).exp()
}

/// Symmetric similarity: the smaller BLEU-4 of the two directions.
pub fn sentence_sim(a: &[String], b: &[String]) -> f64 {
    sigma(a, b).min(sigma(b, a))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Action {
    Match(f64),
    SkipComplex,
    SkipSimple,
    Split { p: usize, order: SplitOrder, score: f64 },
}

/// Split options for sentence `i` against `j`, `j + 1`, in tie-break order.
fn split_options<'a>(
    sent: &'a [String],
    first: &'a [String],
    second: &'a [String],
) -> impl Iterator<Item = (usize, SplitOrder, f64)> + 'a {
    (1..sent.len()).flat_map(move |p| {
        let (pre, suf) = sent.split_at(p);
        [
            (p, SplitOrder::PrefixFirst, sigma(pre, first) + sigma(suf, second)),
            (p, SplitOrder::SuffixFirst, sigma(pre, second) + sigma(suf, first)),
        ]
    })
}

/// Work counters of one [`align`] run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AlignStats {
    /// Memo cells filled.
    pub cells: usize,
    /// Split candidates scored.
    pub splits: usize,
}

/// Optimal alignment by dynamic programming.
///
/// Ties go to the first of: match, skip complex, skip simple, then splits
/// by increasing `p`, prefix-first before suffix-first.
pub fn align(complex: &Document, simple: &Document, gamma: f64) -> AlignmentResult {
    align_with_stats(complex, simple, gamma).0
}

pub fn align_with_stats(complex: &Document, simple: &Document, gamma: f64) -> (AlignmentResult, AlignStats) {
    let (dc, ds) = (complex.len(), simple.len());
    let mut stats = AlignStats::default();
    // a[i][j] with a zero border row and column
    let mut a = vec![vec![0.0f64; ds + 1]; dc + 1];
    let mut act = vec![vec![Action::SkipComplex; ds]; dc];
    for i in (0..dc).rev() {
        for j in (0..ds).rev() {
            stats.cells += 1;
            let d = sentence_sim(&complex.sentences[i], &simple.sentences[j]);
            let mut best = d + a[i + 1][j + 1];
            let mut best_act = Action::Match(d);
            for (v, ac) in [
                (gamma + a[i + 1][j], Action::SkipComplex),
                (gamma + a[i][j + 1], Action::SkipSimple),
            ] {
                if v > best {
                    best = v;
                    best_act = ac;
                }
            }
            if j + 1 < ds {
                let rest = a[i + 1][j + 2];
                for (p, order, s) in split_options(
                    &complex.sentences[i],
                    &simple.sentences[j],
                    &simple.sentences[j + 1],
                ) {
                    stats.splits += 1;
                    let v = s + rest;
                    if v > best {
                        best = v;
                        best_act = Action::Split { p, order, score: s };
                    }
                }
            }
            a[i][j] = best;
            act[i][j] = best_act;
        }
    }

    let mut result = AlignmentResult {
        score: a[0][0],
        ..Default::default()
    };
    let (mut i, mut j) = (0, 0);
    while i < dc && j < ds {
        match act[i][j] {
            Action::Match(score) => {
                result.matches.push(Match::Single { i, j, score });
                i += 1;
                j += 1;
            }
            Action::SkipComplex => {
                result.skipped_complex.push(i);
                result.skip_actions += 1;
                i += 1;
            }
            Action::SkipSimple => {
                result.skipped_simple.push(j);
                result.skip_actions += 1;
                j += 1;
            }
            Action::Split { p, order, score } => {
                result.matches.push(Match::Split { i, p, j, order, score });
                i += 1;
                j += 2;
            }
        }
    }
    result.skipped_complex.extend(i..dc);
    result.skipped_simple.extend(j..ds);
    (result, stats)
}

pub const BRUTE_FORCE_MAX_SENTENCES: usize = 5;
pub const BRUTE_FORCE_MAX_WORDS: usize = 8;

/// Exhaustive search over every action sequence. Returns the best score
/// and every alignment that reaches it.
pub fn brute_force_align(
    complex: &Document,
    simple: &Document,
    gamma: f64,
) -> Result<(f64, Vec<AlignmentResult>)> {
    if complex.len() > BRUTE_FORCE_MAX_SENTENCES || simple.len() > BRUTE_FORCE_MAX_SENTENCES {
        return Err(Error::Contract(format!(
            "brute force handles at most {BRUTE_FORCE_MAX_SENTENCES} sentences per document"
        )));
    }
    let longest = complex
        .sentences
        .iter()
        .chain(&simple.sentences)
        .map(Vec::len)
        .max()
        .unwrap_or(0);
    if longest > BRUTE_FORCE_MAX_WORDS {
        return Err(Error::Contract(format!(
            "brute force handles sentences of at most {BRUTE_FORCE_MAX_WORDS} words"
        )));
    }
    let mut paths = Vec::new();
    enumerate(complex, simple, gamma, 0, 0, &mut Vec::new(), &mut paths);
    let best = paths.iter().map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
    let optimal = paths
        .into_iter()
        .filter(|(s, _)| *s == best)
        .map(|(score, actions)| replay(complex.len(), simple.len(), score, &actions))
        .collect();
    Ok((best, optimal))
}

/// Collects `(score, actions)` for every complete sequence from `(i, j)`.
/// Scores are summed from the last action backwards, the same order the
/// recurrence uses.
fn enumerate(
    complex: &Document,
    simple: &Document,
    gamma: f64,
    i: usize,
    j: usize,
    prefix: &mut Vec<Action>,
    out: &mut Vec<(f64, Vec<Action>)>,
) {
    if i >= complex.len() || j >= simple.len() {
        out.push((0.0, prefix.clone()));
        return;
    }
    let mut branch = |action: Action, gain: f64, ni: usize, nj: usize, out: &mut Vec<(f64, Vec<Action>)>| {
        let start = out.len();
        prefix.push(action);
        enumerate(complex, simple, gamma, ni, nj, prefix, out);
        prefix.pop();
        for (score, _) in &mut out[start..] {
            *score += gain;
        }
    };
    let d = sentence_sim(&complex.sentences[i], &simple.sentences[j]);
    branch(Action::Match(d), d, i + 1, j + 1, out);
    branch(Action::SkipComplex, gamma, i + 1, j, out);
    branch(Action::SkipSimple, gamma, i, j + 1, out);
    if j + 1 < simple.len() {
        let sent = &complex.sentences[i];
        for p in 1..sent.len() {
            let (pre, suf) = sent.split_at(p);
            let (a, b) = (&simple.sentences[j], &simple.sentences[j + 1]);
            for (order, s) in [
                (SplitOrder::PrefixFirst, sigma(pre, a) + sigma(suf, b)),
                (SplitOrder::SuffixFirst, sigma(pre, b) + sigma(suf, a)),
            ] {
                branch(Action::Split { p, order, score: s }, s, i + 1, j + 2, out);
            }
        }
    }
}

fn replay(dc: usize, ds: usize, score: f64, actions: &[Action]) -> AlignmentResult {
    let mut r = AlignmentResult {
        score,
        ..Default::default()
    };
    let (mut i, mut j) = (0, 0);
    for a in actions {
        match *a {
            Action::Match(score) => {
                r.matches.push(Match::Single { i, j, score });
                i += 1;
                j += 1;
            }
            Action::SkipComplex => {
                r.skipped_complex.push(i);
                r.skip_actions += 1;
                i += 1;
            }
            Action::SkipSimple => {
                r.skipped_simple.push(j);
                r.skip_actions += 1;
                j += 1;
            }
            Action::Split { p, order, score } => {
                r.matches.push(Match::Split { i, p, j, order, score });
                i += 1;
                j += 2;
            }
        }
    }
    r.skipped_complex.extend(i..dc);
    r.skipped_simple.extend(j..ds);
    r
}

/// Longest common contiguous block of `a[alo..ahi]` and `b[blo..bhi]`:
/// earliest in `a`, then earliest in `b`, among the longest.
fn longest_block(a: &[String], b: &[String], alo: usize, ahi: usize, blo: usize, bhi: usize) -> (usize, usize, usize) {
    let (mut bi, mut bj, mut bk) = (alo, blo, 0);
    let mut prev = vec![0usize; bhi - blo + 1];
    for i in alo..ahi {
        let mut cur = vec![0usize; bhi - blo + 1];
        for j in blo..bhi {
            if a[i] == b[j] {
                let k = prev[j - blo] + 1;
                cur[j - blo + 1] = k;
                if k > bk {
                    bi = i + 1 - k;
                    bj = j + 1 - k;
                    bk = k;
                }
            }
        }
        prev = cur;
    }
    (bi, bj, bk)
}

/// Word pairs `(complex index, simple index)` matched by recursive
/// longest-common-block matching, in increasing order.
pub fn lcs_word_pairs(complex: &[String], simple: &[String]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    let mut stack = vec![(0, complex.len(), 0, simple.len())];
    while let Some((alo, ahi, blo, bhi)) = stack.pop() {
        if alo >= ahi || blo >= bhi {
            continue;
        }
        let (i, j, k) = longest_block(complex, simple, alo, ahi, blo, bhi);
        if k == 0 {
            continue;
        }
        pairs.extend((0..k).map(|o| (i + o, j + o)));
        stack.push((alo, i, blo, j));
        stack.push((i + k, ahi, j + k, bhi));
    }
    pairs.sort_unstable();
    pairs
}

/// Binary word alignment, one row per simple word and one column per
/// complex word.
pub fn lcs_word_align(complex: &[String], simple: &[String]) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; complex.len()]; simple.len()];
    for (c, s) in lcs_word_pairs(complex, simple) {
        m[s][c] = 1.0;
    }
    m
}

/// Scales every non-zero row to sum to 1; zero rows stay zero.
pub fn normalize_alignments(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                row.clone()
            } else {
                row.iter().map(|v| v / s).collect()
            }
        })
        .collect()
}
