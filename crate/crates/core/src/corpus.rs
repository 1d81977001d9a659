//! Tokenized, labeled document collections and a synthetic generator whose
//! label-bearing word position can be dialed in.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const PAD: u32 = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["<bos>", "<eos>", "<unk>", "<pad>"];

pub const DEFAULT_MAX_VOCAB: usize = 20_000;
pub const DEFAULT_MIN_FREQ: u64 = 1;
pub const DEFAULT_MAX_DOC_LEN: usize = 60;

/// Token/id map with dense ids and four reserved entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: BTreeMap<String, u32>,
    freq: Vec<u64>,
}

impl Vocabulary {
    /// Vocabulary from an ordered token list (reserved tokens are prepended).
    pub fn from_tokens<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            id_of: BTreeMap::new(),
            freq: Vec::new(),
        };
        for t in RESERVED_TOKENS {
            v.insert(t, 0)?;
        }
        for w in words {
            v.insert(w.as_ref(), 0)?;
        }
        Ok(v)
    }

    fn insert(&mut self, tok: &str, freq: u64) -> Result<()> {
        if self.id_of.contains_key(tok) {
            return Err(Error::Config(format!("duplicate vocabulary token {tok:?}")));
        }
        self.id_of.insert(tok.to_string(), self.tokens.len() as u32);
        self.tokens.push(tok.to_string());
        self.freq.push(freq);
        Ok(())
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

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, tok: &str) -> Option<u32> {
        self.id_of.get(tok).copied()
    }

    /// Training-split frequency of `id` (0 for reserved ids).
    pub fn freq(&self, id: u32) -> u64 {
        self.freq[id as usize]
    }

    pub fn encode<S: AsRef<str>>(&self, toks: &[S]) -> Vec<u32> {
        toks.iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    pub fn decode_text(&self, ids: &[u32]) -> String {
        self.decode(ids).join(" ")
    }

    /// Stable 64-bit content hash of the token list.
    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
    }
}

/// Whitespace tokenizer. Blank input is an error.
pub fn tokenize(text: &str, lowercase: bool) -> Result<Vec<String>> {
    let toks: Vec<String> = text
        .split_whitespace()
        .map(|t| if lowercase { t.to_lowercase() } else { t.to_string() })
        .collect();
    if toks.is_empty() {
        return Err(Error::EmptyDocument);
    }
    Ok(toks)
}

/// Keeps the `max_size - 4` most frequent tokens with frequency at least
/// `min_freq`; ties go to the lexicographically smaller token.
pub fn build_vocab<S: AsRef<str>>(docs: &[Vec<S>], max_size: usize, min_freq: u64) -> Result<Vocabulary> {
    if max_size < NUM_RESERVED + 1 {
        return Err(Error::Config(format!(
            "vocabulary max_size must be at least {}, got {max_size}",
            NUM_RESERVED + 1
        )));
    }
    if docs.is_empty() {
        return Err(Error::InsufficientData("no documents to build a vocabulary from".into()));
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for d in docs {
        for t in d {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !RESERVED_TOKENS.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size - NUM_RESERVED);

    let mut v = Vocabulary::from_tokens::<&str>(&[])?;
    for (t, c) in ranked {
        v.insert(t, c)?;
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// One document: token ids without BOS/EOS, plus its class.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Document {
    pub token_ids: Vec<u32>,
    pub label: usize,
}

impl Document {
    pub fn new(token_ids: Vec<u32>, label: usize) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::EmptyDocument);
        }
        Ok(Document { token_ids, label })
    }

    /// Token count excluding BOS/EOS.
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Documents of one split sharing a vocabulary and label set.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCorpus {
    pub docs: Vec<Document>,
    pub num_classes: usize,
    pub labels: Arc<Vec<String>>,
    pub vocab: Arc<Vocabulary>,
    pub split: Split,
}

impl LabeledCorpus {
    pub fn new(
        docs: Vec<Document>,
        labels: Arc<Vec<String>>,
        vocab: Arc<Vocabulary>,
        split: Split,
    ) -> Result<Self> {
        let num_classes = labels.len();
        if num_classes < 2 {
            return Err(Error::DegenerateLabels);
        }
        for d in &docs {
            if d.label >= num_classes {
                return Err(Error::Contract(format!(
                    "label {} out of range for {num_classes} classes",
                    d.label
                )));
            }
            if d.is_empty() {
                return Err(Error::EmptyDocument);
            }
            if let Some(&bad) = d.token_ids.iter().find(|&&t| t as usize >= vocab.len()) {
                return Err(Error::Contract(format!("token id {bad} outside vocabulary")));
            }
        }
        Ok(LabeledCorpus {
            docs,
            num_classes,
            labels,
            vocab,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn label_ids(&self) -> Vec<usize> {
        self.docs.iter().map(|d| d.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for d in &self.docs {
            c[d.label] += 1;
        }
        c
    }

    /// Same vocabulary and labels, different documents.
    pub fn with_docs(&self, docs: Vec<Document>) -> LabeledCorpus {
        LabeledCorpus {
            docs,
            num_classes: self.num_classes,
            labels: self.labels.clone(),
            vocab: self.vocab.clone(),
            split: self.split,
        }
    }

    /// Empirical label entropy in nats.
    pub fn label_entropy(&self) -> f64 {
        let n = self.docs.len() as f64;
        self.class_counts()
            .into_iter()
            .filter(|&c| c > 0)
            .map(|c| {
                let p = c as f64 / n;
                -p * libm::log(p)
            })
            .sum()
    }

    /// `q`-quantile of document lengths (nearest rank).
    pub fn length_quantile(&self, q: f64) -> usize {
        let mut lens: Vec<usize> = self.docs.iter().map(Document::len).collect();
        if lens.is_empty() {
            return 0;
        }
        lens.sort_unstable();
        let rank = libm::ceil(q * lens.len() as f64) as usize;
        lens[rank.clamp(1, lens.len()) - 1]
    }
}

/// Train/valid/test splits over one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplits {
    pub train: LabeledCorpus,
    pub valid: LabeledCorpus,
    pub test: LabeledCorpus,
}

impl CorpusSplits {
    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.train.vocab
    }

    pub fn get(&self, split: Split) -> &LabeledCorpus {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// A parsed `label<TAB>text` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub line: usize,
    pub label: String,
    pub tokens: Vec<String>,
}

/// Parses UTF-8 TSV text, one `label<TAB>text` document per line. Blank
/// lines are skipped; line numbers are 1-based.
pub fn parse_tsv(text: &str, lowercase: bool) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let Some((label, body)) = line.split_once('\t') else {
            return Err(Error::Parse {
                line: lineno,
                message: "expected label<TAB>text".into(),
            });
        };
        let label = label.trim();
        if label.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "empty label".into(),
            });
        }
        let tokens = tokenize(body, lowercase).map_err(|_| Error::Parse {
            line: lineno,
            message: "empty document text".into(),
        })?;
        out.push(RawRecord {
            line: lineno,
            label: label.to_string(),
            tokens,
        });
    }
    Ok(out)
}

/// Sorted distinct label strings; numeric labels sort numerically.
pub fn label_set(records: &[RawRecord]) -> Vec<String> {
    let mut labels: Vec<String> = records.iter().map(|r| r.label.clone()).collect();
    labels.sort_by(|a, b| match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    });
    labels.dedup();
    labels
}

/// Encodes records against a fixed vocabulary and label set, truncating
/// documents to `max_len` tokens.
pub fn encode_records(
    records: &[RawRecord],
    labels: Arc<Vec<String>>,
    vocab: Arc<Vocabulary>,
    split: Split,
    max_len: usize,
) -> Result<LabeledCorpus> {
    let mut docs = Vec::with_capacity(records.len());
    for r in records {
        let Some(label) = labels.iter().position(|l| *l == r.label) else {
            return Err(Error::Label {
                line: r.line,
                label: r.label.clone(),
            });
        };
        let mut ids = vocab.encode(&r.tokens);
        ids.truncate(max_len.max(1));
        docs.push(Document::new(ids, label)?);
    }
    LabeledCorpus::new(docs, labels, vocab, split)
}

/// Samples exactly `n_per_class` documents per class without replacement.
///
/// The result depends only on the multiset of input documents and the seed,
/// not on their order.
pub fn subsample_balanced(corpus: &LabeledCorpus, n_per_class: usize, seed: u64) -> Result<LabeledCorpus> {
    let mut by_class: Vec<Vec<&Document>> = vec![Vec::new(); corpus.num_classes];
    for d in &corpus.docs {
        by_class[d.label].push(d);
    }
    let mut picked = Vec::with_capacity(n_per_class * corpus.num_classes);
    for (c, docs) in by_class.iter_mut().enumerate() {
        if docs.len() < n_per_class {
            return Err(Error::InsufficientData(format!(
                "class {c} has {} documents, {n_per_class} requested",
                docs.len()
            )));
        }
        docs.sort();
        let mut r = rng::rng(rng::derive(seed, c as u64));
        docs.shuffle(&mut r);
        picked.extend(docs[..n_per_class].iter().map(|d| (*d).clone()));
    }
    Ok(corpus.with_docs(picked))
}

/// Where the class marker word is placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerPosition {
    /// Zero-based token index.
    Fixed(usize),
    /// Uniformly random index inside each document.
    Uniform,
}

/// Recipe for a synthetic labeled corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    /// Number of background word types (marker words come on top).
    pub vocab_size: usize,
    /// Inclusive document length range.
    pub doc_len_range: (usize, usize),
    pub marker_position: MarkerPosition,
    pub marker_strength: f64,
    /// Exponent of the Zipfian background unigram distribution.
    pub zipf_exponent: f64,
    pub num_train: usize,
    pub num_valid: usize,
    pub num_test: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 4,
            vocab_size: 200,
            doc_len_range: (8, 15),
            marker_position: MarkerPosition::Fixed(5),
            marker_strength: 1.0,
            zipf_exponent: 1.0,
            num_train: 4000,
            num_valid: 500,
            num_test: 500,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.doc_len_range;
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 classes".into()));
        }
        if self.vocab_size < 1 {
            return Err(Error::Config("synthetic vocab_size must be positive".into()));
        }
        if lo < 1 || lo > hi {
            return Err(Error::Config(format!("invalid doc_len_range ({lo}, {hi})")));
        }
        if let MarkerPosition::Fixed(p) = self.marker_position {
            if p >= lo {
                return Err(Error::Config(format!(
                    "marker_position {p} must be below the minimum length {lo}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.marker_strength) {
            return Err(Error::Config(format!(
                "marker_strength {} outside [0, 1]",
                self.marker_strength
            )));
        }
        if !(self.zipf_exponent >= 0.0) {
            return Err(Error::Config("zipf_exponent must be non-negative".into()));
        }
        Ok(())
    }

    pub fn background_word(i: usize) -> String {
        format!("w{i}")
    }

    pub fn marker_word(class: usize) -> String {
        format!("c{class}")
    }
}

/// Synthetic corpus: background Zipfian unigram noise where, with probability
/// `marker_strength`, the token at the marker position is replaced by the
/// label's marker word. Labels are uniform over classes.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<CorpusSplits> {
    spec.validate()?;
    let mut words: Vec<String> = (0..spec.vocab_size).map(SynthSpec::background_word).collect();
    words.extend((0..spec.num_classes).map(SynthSpec::marker_word));
    let vocab = Arc::new(Vocabulary::from_tokens(&words)?);
    let labels: Arc<Vec<String>> = Arc::new((0..spec.num_classes).map(|c| c.to_string()).collect());

    let weights: Vec<f64> = (0..spec.vocab_size)
        .map(|r| libm::pow(r as f64 + 1.0, -spec.zipf_exponent))
        .collect();
    let total: f64 = weights.iter().sum();
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in &weights {
        acc += w / total;
        cdf.push(acc);
    }
    let first_bg = NUM_RESERVED as u32;
    let first_marker = first_bg + spec.vocab_size as u32;

    let gen = |n: usize, split: Split, tag: u64| -> Result<LabeledCorpus> {
        let mut r = rng::rng(rng::derive(seed, tag));
        let (lo, hi) = spec.doc_len_range;
        let mut docs = Vec::with_capacity(n);
        for _ in 0..n {
            let label = r.random_range(0..spec.num_classes);
            let len = r.random_range(lo..=hi);
            let mut ids: Vec<u32> = (0..len)
                .map(|_| {
                    let u: f64 = r.random();
                    let k = cdf.partition_point(|&c| c < u).min(spec.vocab_size - 1);
                    first_bg + k as u32
                })
                .collect();
            let pos = match spec.marker_position {
                MarkerPosition::Fixed(p) => p,
                MarkerPosition::Uniform => r.random_range(0..len),
            };
            let u: f64 = r.random();
            if u < spec.marker_strength {
                ids[pos] = first_marker + label as u32;
            }
            docs.push(Document::new(ids, label)?);
        }
        LabeledCorpus::new(docs, labels.clone(), vocab.clone(), split)
    };
    Ok(CorpusSplits {
        train: gen(spec.num_train, Split::Train, 1)?,
        valid: gen(spec.num_valid, Split::Valid, 2)?,
        test: gen(spec.num_test, Split::Test, 3)?,
    })
}

/// Serializes a corpus to the `label<TAB>text` format.
pub fn to_tsv(corpus: &LabeledCorpus) -> String {
    let mut s = String::new();
    for d in &corpus.docs {
        s.push_str(&corpus.labels[d.label]);
        s.push('\t');
        s.push_str(&corpus.vocab.decode_text(&d.token_ids));
        s.push('\n');
    }
    s
}
