//! Parallel corpora: TSV input and output, article-level splits,
//! deduplication, document alignment into pairs, and a synthetic corpus
//! generator with gold word alignments and a gold substitution dictionary.
//!
//! File formats:
//!
//! * corpus: `article_id<TAB>complex<TAB>simple`, tokens separated by spaces
//! * gold alignments: `pair_index<TAB>i<TAB>j`, linking simple-side word `i`
//!   to complex-side word `j`
//! * gold dictionary: `complex_word<TAB>simple_word`

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::{align, Document, Match};
use crate::error::{Error, Result};
use crate::model::Pair;
use crate::vocab::{tokenize, PretrainedTable};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub article: String,
    pub pair: Pair,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub records: Vec<Record>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn pairs(&self) -> Vec<Pair> {
        self.records.iter().map(|r| r.pair.clone()).collect()
    }

    /// Article ids in order of first appearance.
    pub fn articles(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .map(|r| r.article.as_str())
            .filter(|a| seen.insert(*a))
            .collect()
    }
}

pub fn parse_parallel_tsv<R: BufRead>(reader: R, source_name: &str) -> Result<ParallelCorpus> {
    let mut corpus = ParallelCorpus::default();
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::parse(source_name, lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::parse(
                source_name,
                lineno,
                format!("expected 3 tab-separated columns, found {}", cols.len()),
            ));
        }
        corpus.records.push(Record {
            article: cols[0].trim().to_string(),
            pair: Pair::new(tokenize(cols[1]), tokenize(cols[2])),
        });
    }
    Ok(corpus)
}

pub fn read_parallel_tsv(path: impl AsRef<Path>) -> Result<ParallelCorpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_parallel_tsv(BufReader::new(file), &path.display().to_string())
}

pub fn write_parallel_tsv<W: Write>(corpus: &ParallelCorpus, mut out: W) -> std::io::Result<()> {
    for r in &corpus.records {
        writeln!(
            out,
            "{}\t{}\t{}",
            r.article,
            r.pair.source.join(" "),
            r.pair.target.join(" ")
        )?;
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

pub fn save_parallel_tsv(corpus: &ParallelCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = create(path)?;
    write_parallel_tsv(corpus, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.10, 0.20];

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitCorpus {
    pub train: ParallelCorpus,
    pub validation: ParallelCorpus,
    pub test: ParallelCorpus,
    pub tags: BTreeMap<String, SplitTag>,
}

/// Shuffles the articles with `seed` and partitions them by `fractions`
/// (train, validation, test). Pairs follow their article.
pub fn split_by_article(corpus: &ParallelCorpus, fractions: [f64; 3], seed: u64) -> Result<SplitCorpus> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let mut articles: Vec<&str> = corpus.articles();
    articles.sort_unstable();
    articles.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = articles.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_valid = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let mut out = SplitCorpus::default();
    for (k, a) in articles.iter().enumerate() {
        let tag = if k < n_train {
            SplitTag::Train
        } else if k < n_train + n_valid {
            SplitTag::Validation
        } else {
            SplitTag::Test
        };
        out.tags.insert(a.to_string(), tag);
    }
    for r in &corpus.records {
        let part = match out.tags[&r.article] {
            SplitTag::Train => &mut out.train,
            SplitTag::Validation => &mut out.validation,
            SplitTag::Test => &mut out.test,
        };
        part.records.push(r.clone());
    }
    Ok(out)
}

/// Drops pairs whose two sides are token-identical.
pub fn dedup_identical(corpus: &ParallelCorpus) -> ParallelCorpus {
    ParallelCorpus {
        records: corpus
            .records
            .iter()
            .filter(|r| r.pair.source != r.pair.target)
            .cloned()
            .collect(),
    }
}

pub const MAX_LEVELS: usize = 5;

/// One article at several simplification levels, most complex first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArticleSet {
    pub id: String,
    pub levels: Vec<Document>,
}

impl ArticleSet {
    pub fn new(id: impl Into<String>, levels: Vec<Document>) -> Result<Self> {
        if !(2..=MAX_LEVELS).contains(&levels.len()) {
            return Err(Error::Contract(format!(
                "an article needs 2 to {MAX_LEVELS} levels, got {}",
                levels.len()
            )));
        }
        Ok(ArticleSet { id: id.into(), levels })
    }

    /// Aligns every level but the last against the last one. A split match
    /// pairs the complex sentence with both simple sentences joined.
    pub fn aligned_pairs(&self, gamma: f64) -> Vec<Record> {
        let simple = self.levels.last().expect("at least two levels");
        let mut out = Vec::new();
        for complex in &self.levels[..self.levels.len() - 1] {
            for m in align(complex, simple, gamma).matches {
                let (i, target) = match m {
                    Match::Single { i, j, .. } => (i, simple.sentences[j].clone()),
                    Match::Split { i, j, .. } => {
                        (i, [simple.sentences[j].clone(), simple.sentences[j + 1].clone()].concat())
                    }
                };
                out.push(Record {
                    article: self.id.clone(),
                    pair: Pair::new(complex.sentences[i].clone(), target),
                });
            }
        }
        out
    }
}

/// Word links `(simple index, complex index)` for one pair.
pub type Links = Vec<(usize, usize)>;

/// Dense `[target_len][source_len]` 0/1 matrix from links.
pub fn alignment_matrix(links: &[(usize, usize)], target_len: usize, source_len: usize) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; source_len]; target_len];
    for &(i, j) in links {
        if i < target_len && j < source_len {
            m[i][j] = 1.0;
        }
    }
    m
}

pub fn write_alignments<W: Write>(links: &[Links], mut out: W) -> std::io::Result<()> {
    for (k, pair) in links.iter().enumerate() {
        for (i, j) in pair {
            writeln!(out, "{k}\t{i}\t{j}")?;
        }
    }
    Ok(())
}

/// Reads an alignment sidecar for a corpus of `pairs` pairs.
pub fn read_alignments(path: impl AsRef<Path>, pairs: usize) -> Result<Vec<Links>> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut links = vec![Vec::new(); pairs];
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let nums: Vec<usize> = line
            .split('\t')
            .map(|f| f.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(&name, n + 1, "expected three integers"))?;
        match nums[..] {
            [k, i, j] if k < pairs => links[k].push((i, j)),
            [k, _, _] => return Err(Error::parse(&name, n + 1, format!("pair index {k} out of range"))),
            _ => return Err(Error::parse(&name, n + 1, "expected three integers")),
        }
    }
    Ok(links)
}

pub fn write_dictionary<W: Write>(dict: &BTreeMap<String, String>, mut out: W) -> std::io::Result<()> {
    for (k, v) in dict {
        writeln!(out, "{k}\t{v}")?;
    }
    Ok(())
}

pub fn read_dictionary(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dict = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match line.split('\t').collect::<Vec<_>>()[..] {
            [k, v] => {
                dict.insert(k.to_string(), v.to_string());
            }
            _ => return Err(Error::parse(&name, n + 1, "expected two tab-separated columns")),
        }
    }
    Ok(dict)
}

/// `<token> <f1> ... <f_dim>` lines.
pub fn write_pretrained<W: Write>(table: &PretrainedTable, mut out: W) -> std::io::Result<()> {
    for t in table.tokens() {
        let v = table.get(t).expect("listed token");
        let nums: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        writeln!(out, "{t} {}", nums.join(" "))?;
    }
    Ok(())
}

/// Share of pairs produced by each rewrite rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleMix {
    pub copy: f64,
    pub substitute: f64,
    pub split: f64,
    pub delete: f64,
}

impl Default for RuleMix {
    fn default() -> Self {
        RuleMix {
            copy: 0.85,
            substitute: 0.07,
            split: 0.04,
            delete: 0.04,
        }
    }
}

impl RuleMix {
    fn validate(&self) -> Result<()> {
        let parts = [self.copy, self.substitute, self.split, self.delete];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "rule mix {parts:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub pairs: usize,
    pub mix: RuleMix,
    pub pairs_per_article: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 200,
            pairs: 2000,
            mix: RuleMix::default(),
            pairs_per_article: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Cat {
    Det,
    Adj,
    Noun,
    Verb,
    Adv,
    Conj,
    Stop,
}

const SYL_ONSETS: &[u8] = b"bdfgklmnprstvz";
const SYL_VOWELS: &[u8] = b"aeiou";

/// Pronounceable pseudo-word number `k`.
fn pseudo_word(k: usize) -> String {
    let n = SYL_ONSETS.len() * SYL_VOWELS.len();
    let syl = |s: usize| {
        let mut w = String::new();
        w.push(SYL_ONSETS[s / SYL_VOWELS.len()] as char);
        w.push(SYL_VOWELS[s % SYL_VOWELS.len()] as char);
        w
    };
    let mut w = syl(k % n) + &syl((k / n) % n);
    if k >= n * n {
        w += &syl(k / (n * n) % n);
    }
    w
}

struct Lexicon {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjs: Vec<String>,
    advs: Vec<String>,
    dict: BTreeMap<String, String>,
}

impl Lexicon {
    fn new(vocab_size: usize) -> Self {
        let content = vocab_size - 4;
        let n_noun = content * 2 / 5;
        let n_verb = content / 4;
        let n_adj = content / 5;
        let mut words = (0..content).map(pseudo_word);
        let mut take = |n: usize| words.by_ref().take(n).collect::<Vec<_>>();
        let nouns = take(n_noun);
        let verbs = take(n_verb);
        let adjs = take(n_adj);
        let advs = take(content - n_noun - n_verb - n_adj);
        let mut dict = BTreeMap::new();
        for class in [&adjs, &verbs] {
            let k = (class.len() / 3).max(1);
            for (key, value) in class[..k].iter().zip(&class[k..2 * k]) {
                dict.insert(key.clone(), value.clone());
            }
        }
        Lexicon {
            nouns,
            verbs,
            adjs,
            advs,
            dict,
        }
    }

    fn words(&self) -> Vec<String> {
        let mut w: Vec<String> = ["the", "a", "and", "."].iter().map(|s| s.to_string()).collect();
        for class in [&self.nouns, &self.verbs, &self.adjs, &self.advs] {
            w.extend(class.iter().cloned());
        }
        w
    }

    fn pick<R: Rng>(&self, class: &[String], keys: bool, rng: &mut R) -> String {
        let pool: Vec<&String> = class
            .iter()
            .filter(|w| self.dict.contains_key(*w) == keys)
            .collect();
        pool.choose(rng).map(|s| s.to_string()).unwrap_or_else(|| class[0].clone())
    }

    /// `det [adj] noun verb det [adj] noun [adv]`. `modifiers` forces at
    /// least one adjective or adverb; `key` forces one dictionary word.
    fn clause<R: Rng>(&self, modifiers: bool, key: bool, rng: &mut R) -> Vec<(String, Cat)> {
        let det = |rng: &mut R| if rng.gen_bool(0.5) { "the" } else { "a" }.to_string();
        let mut opt = [rng.gen_bool(0.4), rng.gen_bool(0.4), rng.gen_bool(0.3)];
        if modifiers && !opt.iter().any(|&o| o) {
            opt[rng.gen_range(0..3)] = true;
        }
        // which slot carries the dictionary word: 0/1 adjectives, 2 verb
        let key_slot = key.then(|| rng.gen_range(0..3));
        if let Some(s) = key_slot.filter(|&s| s < 2) {
            opt[s] = true;
        }
        let mut c = vec![(det(rng), Cat::Det)];
        if opt[0] {
            c.push((self.pick(&self.adjs, key_slot == Some(0), rng), Cat::Adj));
        }
        c.push((self.pick(&self.nouns, false, rng), Cat::Noun));
        c.push((self.pick(&self.verbs, key_slot == Some(2), rng), Cat::Verb));
        c.push((det(rng), Cat::Det));
        if opt[1] {
            c.push((self.pick(&self.adjs, key_slot == Some(1), rng), Cat::Adj));
        }
        c.push((self.pick(&self.nouns, false, rng), Cat::Noun));
        if opt[2] {
            c.push((self.pick(&self.advs, false, rng), Cat::Adv));
        }
        c
    }
}

fn words_of(tagged: &[(String, Cat)]) -> Vec<String> {
    tagged.iter().map(|(w, _)| w.clone()).collect()
}

/// Identity rewrite.
pub fn rule_copy(sentence: &[String]) -> (Vec<String>, Links) {
    (sentence.to_vec(), (0..sentence.len()).map(|i| (i, i)).collect())
}

/// Replaces every dictionary key; positions are unchanged.
pub fn rule_substitute(sentence: &[String], dict: &BTreeMap<String, String>) -> (Vec<String>, Links) {
    let out = sentence
        .iter()
        .map(|w| dict.get(w).unwrap_or(w).clone())
        .collect();
    (out, (0..sentence.len()).map(|i| (i, i)).collect())
}

/// Turns the first `marker` into a sentence break `"."`; the marker and
/// the inserted stop stay unaligned.
pub fn rule_split(sentence: &[String], marker: &str) -> (Vec<String>, Links) {
    match sentence.iter().position(|w| w == marker) {
        None => rule_copy(sentence),
        Some(m) => {
            let mut out = sentence.to_vec();
            out[m] = ".".into();
            let links = (0..sentence.len()).filter(|&i| i != m).map(|i| (i, i)).collect();
            (out, links)
        }
    }
}

/// Removes the words at the flagged positions.
pub fn rule_delete(sentence: &[String], drop: &[bool]) -> (Vec<String>, Links) {
    let mut out = Vec::new();
    let mut links = Vec::new();
    for (j, w) in sentence.iter().enumerate() {
        if !drop.get(j).copied().unwrap_or(false) {
            links.push((out.len(), j));
            out.push(w.clone());
        }
    }
    (out, links)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub corpus: ParallelCorpus,
    /// Gold links per pair, `(simple index, complex index)`.
    pub alignments: Vec<Links>,
    pub dictionary: BTreeMap<String, String>,
    /// Every word the generator can emit.
    pub words: Vec<String>,
}

impl SynthCorpus {
    /// Dense gold alignment of pair `k`, one row per simple word.
    pub fn alignment_matrix(&self, k: usize) -> Vec<Vec<f64>> {
        let p = &self.corpus.records[k].pair;
        alignment_matrix(&self.alignments[k], p.target.len(), p.source.len())
    }

    /// Random vectors for every generator word, uniform in [-0.5, 0.5].
    pub fn pretrained(&self, dim: usize, seed: u64) -> PretrainedTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = PretrainedTable::new(dim);
        for w in &self.words {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..=0.5)).collect();
            table.insert(w, &v).expect("dimension matches");
        }
        table
    }

    /// Writes `<stem>.tsv`, `<stem>.align` and `<stem>.dict`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        save_parallel_tsv(&self.corpus, dir.join(format!("{stem}.tsv")))?;
        let path = dir.join(format!("{stem}.align"));
        let mut w = create(&path)?;
        write_alignments(&self.alignments, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))?;
        let path = dir.join(format!("{stem}.dict"));
        let mut w = create(&path)?;
        write_dictionary(&self.dictionary, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&path, e))
    }
}

/// Deterministic toy corpus: sentences from a small grammar, rewritten by
/// one rule each according to the mix.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthCorpus> {
    if config.vocab_size < 20 {
        return Err(Error::Contract(format!(
            "synthetic vocabulary needs at least 20 words, got {}",
            config.vocab_size
        )));
    }
    if config.pairs_per_article == 0 {
        return Err(Error::Contract("pairs_per_article must be positive".into()));
    }
    config.mix.validate()?;
    let lex = Lexicon::new(config.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.mix;
    let mut out = SynthCorpus {
        corpus: ParallelCorpus::default(),
        alignments: Vec::with_capacity(config.pairs),
        dictionary: lex.dict.clone(),
        words: lex.words(),
    };
    let stop = || (".".to_string(), Cat::Stop);
    for k in 0..config.pairs {
        let r: f64 = rng.gen();
        let (source, (target, links)) = if r < m.copy {
            let mut s = lex.clause(false, false, &mut rng);
            s.push(stop());
            let s = words_of(&s);
            let t = rule_copy(&s);
            (s, t)
        } else if r < m.copy + m.substitute {
            let mut s = lex.clause(false, true, &mut rng);
            s.push(stop());
            let s = words_of(&s);
            let t = rule_substitute(&s, &lex.dict);
            (s, t)
        } else if r < m.copy + m.substitute + m.split {
            let mut s = lex.clause(false, false, &mut rng);
            s.push(("and".into(), Cat::Conj));
            s.extend(lex.clause(false, false, &mut rng));
            s.push(stop());
            let s = words_of(&s);
            let t = rule_split(&s, "and");
            (s, t)
        } else {
            let mut s = lex.clause(true, false, &mut rng);
            s.push(stop());
            let drop: Vec<bool> = s.iter().map(|(_, c)| matches!(c, Cat::Adj | Cat::Adv)).collect();
            let s = words_of(&s);
            let t = rule_delete(&s, &drop);
            (s, t)
        };
        out.corpus.records.push(Record {
            article: format!("a{:05}", k / config.pairs_per_article),
            pair: Pair::new(source, target),
        });
        out.alignments.push(links);
    }
    Ok(out)
}

/// Distinct words over both sides of a corpus.
pub fn corpus_words(corpus: &ParallelCorpus) -> BTreeSet<String> {
    corpus
        .records
        .iter()
        .flat_map(|r| r.pair.source.iter().chain(&r.pair.target))
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn tsv_reading() {
        assert!(parse_parallel_tsv(Cursor::new(""), "x").unwrap().is_empty());
        let c = parse_parallel_tsv(Cursor::new("a1\tThe Cat sat.\tthe cat sat .\n\na2\tx\ty\n"), "x").unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.records[0].pair.source, toks("the cat sat ."));
        assert_eq!(c.articles(), vec!["a1", "a2"]);
        match parse_parallel_tsv(Cursor::new("a1\tx\ty\na2\tonly two\n"), "c.tsv") {
            Err(Error::Parse { line, source_name, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(source_name, "c.tsv");
            }
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn tsv_round_trip() {
        let synth = synth_generate(&SynthConfig {
            pairs: 50,
            ..Default::default()
        })
        .unwrap();
        let mut buf = Vec::new();
        write_parallel_tsv(&synth.corpus, &mut buf).unwrap();
        let back = parse_parallel_tsv(Cursor::new(&buf), "mem").unwrap();
        assert_eq!(back, synth.corpus);
    }

    #[test]
    fn splits_partition_articles() {
        let synth = synth_generate(&SynthConfig {
            pairs: 400,
            ..Default::default()
        })
        .unwrap();
        let all_train = split_by_article(&synth.corpus, [1.0, 0.0, 0.0], 1).unwrap();
        assert_eq!(all_train.train, synth.corpus);
        assert!(all_train.validation.is_empty() && all_train.test.is_empty());

        let s = split_by_article(&synth.corpus, DEFAULT_FRACTIONS, 1).unwrap();
        assert_eq!(s.train.len() + s.validation.len() + s.test.len(), 400);
        let ids = |c: &ParallelCorpus| c.articles().into_iter().map(String::from).collect::<BTreeSet<_>>();
        let (a, b, c) = (ids(&s.train), ids(&s.validation), ids(&s.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!((a.len(), b.len(), c.len()), (28, 4, 8));
        assert!(split_by_article(&synth.corpus, [0.5, 0.2, 0.2], 1).is_err());
        assert_eq!(split_by_article(&synth.corpus, DEFAULT_FRACTIONS, 1).unwrap(), s);
    }

    #[test]
    fn dedup_examples() {
        let rec = |s: &str, t: &str| Record {
            article: "a".into(),
            pair: Pair::new(toks(s), toks(t)),
        };
        let c = ParallelCorpus {
            records: vec![rec("the cat", "the cat"), rec("the cat", "the dog")],
        };
        let d = dedup_identical(&c);
        assert_eq!(d.records, vec![rec("the cat", "the dog")]);
        assert_eq!(dedup_identical(&d), d);
    }

    #[test]
    fn rules() {
        let dict: BTreeMap<String, String> = [("big".to_string(), "huge".to_string())].into();
        let (t, links) = rule_substitute(&toks("the big dog"), &dict);
        assert_eq!(t, toks("the huge dog"));
        assert_eq!(links, vec![(0, 0), (1, 1), (2, 2)]);
        let (t, links) = rule_split(&toks("x y and z ."), "and");
        assert_eq!(t, toks("x y . z ."));
        assert_eq!(links, vec![(0, 0), (1, 1), (3, 3), (4, 4)]);
        let (t, links) = rule_delete(&toks("a red cat ran fast"), &[false, true, false, false, true]);
        assert_eq!(t, toks("a cat ran"));
        assert_eq!(links, vec![(0, 0), (1, 2), (2, 3)]);
    }

    #[test]
    fn all_copy_corpus_dedups_to_nothing() {
        let cfg = SynthConfig {
            pairs: 100,
            mix: RuleMix {
                copy: 1.0,
                substitute: 0.0,
                split: 0.0,
                delete: 0.0,
            },
            ..Default::default()
        };
        let s = synth_generate(&cfg).unwrap();
        assert!(s.corpus.records.iter().all(|r| r.pair.source == r.pair.target));
        assert!(dedup_identical(&s.corpus).is_empty());
    }

    #[test]
    fn generator_contracts() {
        assert!(synth_generate(&SynthConfig {
            vocab_size: 19,
            ..Default::default()
        })
        .is_err());
        let bad_mix = RuleMix {
            copy: 0.5,
            ..RuleMix::default()
        };
        assert!(synth_generate(&SynthConfig {
            mix: bad_mix,
            ..Default::default()
        })
        .is_err());
        let s = synth_generate(&SynthConfig {
            vocab_size: 20,
            pairs: 30,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.words.len(), 20);
        assert!(corpus_words(&s.corpus).iter().all(|w| s.words.contains(w)));
    }

    #[test]
    fn sidecars_round_trip() {
        let s = synth_generate(&SynthConfig {
            pairs: 60,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path(), "c").unwrap();
        assert_eq!(read_parallel_tsv(dir.path().join("c.tsv")).unwrap(), s.corpus);
        assert_eq!(read_alignments(dir.path().join("c.align"), 60).unwrap(), s.alignments);
        assert_eq!(read_dictionary(dir.path().join("c.dict")).unwrap(), s.dictionary);
    }

    #[test]
    fn pretrained_file_round_trips() {
        let s = synth_generate(&SynthConfig {
            vocab_size: 30,
            pairs: 5,
            ..Default::default()
        })
        .unwrap();
        let table = s.pretrained(6, 2);
        let mut buf = Vec::new();
        write_pretrained(&table, &mut buf).unwrap();
        let back = crate::vocab::parse_pretrained(Cursor::new(&buf), 6, "mem").unwrap();
        assert_eq!(back.tokens(), table.tokens());
        for t in table.tokens() {
            assert_eq!(back.get(t), table.get(t));
        }
    }

    #[test]
    fn article_levels_align_into_pairs() {
        let complex = Document::from_lines("the old man walked home and he slept\nbirds sang loudly\n");
        let middle = Document::from_lines("the old man walked home\nbirds sang loudly\n");
        let simple = Document::from_lines("the old man walked home\nand he slept\nbirds sang\n");
        let set = ArticleSet::new("art", vec![complex, middle, simple]).unwrap();
        let pairs = set.aligned_pairs(0.0);
        assert!(pairs.iter().any(|r| r.pair.source == toks("the old man walked home and he slept")
            && r.pair.target == toks("the old man walked home and he slept")));
        assert!(pairs.iter().all(|r| r.article == "art"));
        assert!(ArticleSet::new("x", vec![Document::default()]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gold_links_are_consistent(seed: u64, vocab in 20usize..120) {
            let s = synth_generate(&SynthConfig { vocab_size: vocab, pairs: 60, seed, ..Default::default() }).unwrap();
            for (r, links) in s.corpus.records.iter().zip(&s.alignments) {
                for &(i, j) in links {
                    let (t, w) = (&r.pair.target[i], &r.pair.source[j]);
                    prop_assert!(t == w || s.dictionary.get(w) == Some(t), "{} -> {}", w, t);
                }
            }
        }

        #[test]
        fn generation_is_deterministic(seed: u64) {
            let cfg = SynthConfig { pairs: 40, seed, ..Default::default() };
            let bytes = |c: &SynthCorpus| {
                let mut b = Vec::new();
                write_parallel_tsv(&c.corpus, &mut b).unwrap();
                write_alignments(&c.alignments, &mut b).unwrap();
                b
            };
            prop_assert_eq!(bytes(&synth_generate(&cfg).unwrap()), bytes(&synth_generate(&cfg).unwrap()));
        }
    }
}
