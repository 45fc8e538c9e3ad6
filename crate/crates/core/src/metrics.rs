//! Corpus BLEU, ROUGE-L, Flesch reading ease, word edit distance and the
//! copy/change confusion matrix.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DecodeTrace, Pair, Seq2Seq};
use crate::vocab::CPY;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Contract("empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    Ok(())
}

/// Corpus BLEU-1 .. BLEU-`max_n` on a 0-100 scale, one reference per
/// candidate.
///
/// An order with no n-grams on either side (all sentences shorter than n)
/// counts as precision 1; no candidate n-grams against some reference
/// n-grams counts as precision 0.
pub fn bleu_scores(
    candidates: &[Vec<String>],
    references: &[Vec<String>],
    max_n: usize,
) -> Result<Vec<f64>> {
    check_corpus(candidates, references)?;
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut ref_totals = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=max_n {
            let cc = ngram_counts(c, n);
            let rc = ngram_counts(r, n);
            matches[n - 1] += cc
                .iter()
                .map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
            totals[n - 1] += c.len().saturating_sub(n - 1);
            ref_totals[n - 1] += r.len().saturating_sub(n - 1);
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let mut log_sum = 0.0;
    let mut out = Vec::with_capacity(max_n);
    let mut zero = false;
    for n in 0..max_n {
        let p = match (totals[n], ref_totals[n]) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (t, _) => matches[n] as f64 / t as f64,
        };
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += p.ln();
        }
        out.push(if zero || bp == 0.0 {
            0.0
        } else {
            100.0 * bp * (log_sum / (n + 1) as f64).exp()
        });
    }
    Ok(out)
}

/// Corpus BLEU-`n` (0-100). Returns 0 for an empty corpus.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>], n: usize) -> f64 {
    bleu_scores(candidates, references, n)
        .map(|s| s[n - 1])
        .unwrap_or(0.0)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean sentence-level ROUGE-L F1 on a 0-100 scale.
pub fn rouge_l(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            if c.is_empty() && r.is_empty() {
                return 1.0;
            }
            let l = lcs_len(c, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / c.len() as f64;
            let rec = l / r.len() as f64;
            2.0 * p * rec / (p + rec)
        })
        .sum();
    Ok(100.0 * total / candidates.len() as f64)
}

/// A token counts as a word when it contains a letter or digit.
pub fn is_word(token: &str) -> bool {
    token.chars().any(char::is_alphanumeric)
}

/// Vowel-group syllable estimate: maximal runs of `aeiouy`, minus one for a
/// final `e` unless that leaves zero; at least 1.
pub fn syllables(word: &str) -> usize {
    let w = word.to_lowercase();
    let mut groups = 0;
    let mut in_group = false;
    for ch in w.chars() {
        let vowel = "aeiouy".contains(ch);
        if vowel && !in_group {
            groups += 1;
        }
        in_group = vowel;
    }
    if w.ends_with('e') && groups > 1 {
        groups -= 1;
    }
    groups.max(1)
}

/// Flesch reading ease over tokenized sentences. Sentences without any
/// word are ignored.
pub fn flesch(sentences: &[Vec<String>]) -> Result<f64> {
    let mut n_sent = 0usize;
    let mut n_words = 0usize;
    let mut n_syll = 0usize;
    for s in sentences {
        let words: Vec<&String> = s.iter().filter(|t| is_word(t)).collect();
        if words.is_empty() {
            continue;
        }
        n_sent += 1;
        n_words += words.len();
        n_syll += words.iter().map(|w| syllables(w)).sum::<usize>();
    }
    if n_words == 0 {
        return Err(Error::Contract("Flesch score needs at least one word".into()));
    }
    Ok(206.835 - 1.015 * (n_words as f64 / n_sent as f64) - 84.6 * (n_syll as f64 / n_words as f64))
}

/// Word-level Levenshtein distance with unit costs.
pub fn edit_distance_words<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean token count per sentence.
pub fn avg_words(sentences: &[Vec<String>]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Contract("average words of an empty corpus".into()));
    }
    Ok(sentences.iter().map(Vec::len).sum::<usize>() as f64 / sentences.len() as f64)
}

/// Copy/change decisions: `counts[generated][ground_truth]`, index 0 is
/// copy and 1 is change.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub counts: [[u64; 2]; 2],
    /// Change/change positions where the generated word is the reference word.
    pub change_correct: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Share of agreed changes that produced the right word.
    pub fn change_accuracy(&self) -> Option<f64> {
        let n = self.counts[1][1];
        (n > 0).then(|| self.change_correct as f64 / n as f64)
    }

    pub fn merge(&mut self, other: &Confusion) {
        for g in 0..2 {
            for t in 0..2 {
                self.counts[g][t] += other.counts[g][t];
            }
        }
        self.change_correct += other.change_correct;
    }
}

/// One sentence decoded with ground-truth attention.
pub struct AlignedDecode<'a> {
    pub source: &'a [String],
    pub target: &'a [String],
    /// `alignment[i][j] > 0` links target word `i` to source word `j`.
    pub alignment: &'a [Vec<f64>],
    pub trace: &'a DecodeTrace,
}

/// Tallies copy/change decisions over every aligned target position.
///
/// The generated action is copy when the emitted token is the copy token or
/// equals an aligned source word; the ground-truth action is copy when the
/// reference word equals an aligned source word.
pub fn copy_change_confusion<'a>(items: impl IntoIterator<Item = AlignedDecode<'a>>) -> Confusion {
    let mut c = Confusion::default();
    for item in items {
        for (i, row) in item.alignment.iter().enumerate() {
            let aligned: Vec<&String> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .filter_map(|(j, _)| item.source.get(j))
                .collect();
            let (Some(step), Some(truth)) = (item.trace.steps.get(i), item.target.get(i)) else {
                continue;
            };
            if aligned.is_empty() {
                continue;
            }
            let gen_copy = step.token == CPY || aligned.contains(&&step.surface);
            let gt_copy = aligned.contains(&truth);
            let g = usize::from(!gen_copy);
            let t = usize::from(!gt_copy);
            c.counts[g][t] += 1;
            if !gen_copy && !gt_copy && &step.surface == truth {
                c.change_correct += 1;
            }
        }
    }
    c
}

/// Decodes every pair with its gold alignment as attention and tallies the
/// copy/change decisions. `alignments[k]` is a `[target][source]` matrix.
pub fn gt_alignment_confusion(model: &Seq2Seq, pairs: &[Pair], alignments: &[Vec<Vec<f64>>]) -> Result<Confusion> {
    if pairs.len() != alignments.len() {
        return Err(Error::Contract(format!(
            "{} pairs but {} alignment matrices",
            pairs.len(),
            alignments.len()
        )));
    }
    let mut total = Confusion::default();
    for (pair, align) in pairs.iter().zip(alignments) {
        let (_, trace) = model.decode_with_gt_alignments(pair, align)?;
        total.merge(&copy_change_confusion([AlignedDecode {
            source: &pair.source,
            target: &pair.target,
            alignment: align,
            trace: &trace,
        }]));
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: [f64; 4],
    pub rouge: f64,
    pub flesch: f64,
    pub avg_words: f64,
    /// Mean word edit distance between each source and its output.
    pub edit_dist: f64,
    pub confusion: Option<Confusion>,
}

impl EvalReport {
    /// Scores `outputs` against `references`; `sources` feed the edit
    /// distance.
    pub fn compute(
        sources: &[Vec<String>],
        outputs: &[Vec<String>],
        references: &[Vec<String>],
    ) -> Result<Self> {
        check_corpus(outputs, references)?;
        check_corpus(outputs, sources)?;
        let b = bleu_scores(outputs, references, 4)?;
        let edit = sources
            .iter()
            .zip(outputs)
            .map(|(s, o)| edit_distance_words(s, o))
            .sum::<usize>() as f64
            / outputs.len() as f64;
        Ok(EvalReport {
            bleu: [b[0], b[1], b[2], b[3]],
            rouge: rouge_l(outputs, references)?,
            flesch: flesch(outputs).unwrap_or(f64::NAN),
            avg_words: avg_words(outputs)?,
            edit_dist: edit,
            confusion: None,
        })
    }

    /// `key=value` lines.
    pub fn key_values(&self) -> String {
        let mut s = String::new();
        for (i, b) in self.bleu.iter().enumerate() {
            s.push_str(&format!("B-{}={b:.2}\n", i + 1));
        }
        s.push_str(&format!("Rouge={:.2}\n", self.rouge));
        s.push_str(&format!("Flesch={:.2}\n", self.flesch));
        s.push_str(&format!("Avg.Words={:.2}\n", self.avg_words));
        s.push_str(&format!("Edit.Dist={:.2}\n", self.edit_dist));
        if let Some(c) = &self.confusion {
            s.push_str(&format!("copy_copy={}\n", c.counts[0][0]));
            s.push_str(&format!("copy_change={}\n", c.counts[0][1]));
            s.push_str(&format!("change_copy={}\n", c.counts[1][0]));
            s.push_str(&format!("change_change={}\n", c.counts[1][1]));
            match c.change_accuracy() {
                Some(a) => s.push_str(&format!("change_accuracy={:.2}\n", 100.0 * a)),
                None => s.push_str("change_accuracy=none\n"),
            }
        }
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>6} {:>6} {:>6} {:>6} {:>6} {:>7} {:>9} {:>9}",
            "B-1", "B-2", "B-3", "B-4", "Rouge", "Flesch", "Avg.Words", "Edit.Dist"
        )?;
        writeln!(
            f,
            "{:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>7.2} {:>9.2} {:>9.2}",
            self.bleu[0],
            self.bleu[1],
            self.bleu[2],
            self.bleu[3],
            self.rouge,
            self.flesch,
            self.avg_words,
            self.edit_dist
        )?;
        if let Some(c) = &self.confusion {
            writeln!(f, "{:>12} {:>8} {:>8}", "gen \\ gt", "copy", "change")?;
            writeln!(f, "{:>12} {:>8} {:>8}", "copy", c.counts[0][0], c.counts[0][1])?;
            writeln!(f, "{:>12} {:>8} {:>8}", "change", c.counts[1][0], c.counts[1][1])?;
        }
        Ok(())
    }
}
