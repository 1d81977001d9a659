//! Reading and writing `label<TAB>text` corpora.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use vaelab_core::corpus::{
    build_vocab, encode_records, label_set, parse_tsv, to_tsv, CorpusSplits, LabeledCorpus, Split, Vocabulary,
    DEFAULT_MAX_DOC_LEN, DEFAULT_MAX_VOCAB, DEFAULT_MIN_FREQ,
};
use vaelab_core::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub max_vocab: usize,
    pub min_freq: u64,
    pub max_doc_len: usize,
    pub lowercase: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            max_vocab: DEFAULT_MAX_VOCAB,
            min_freq: DEFAULT_MIN_FREQ,
            max_doc_len: DEFAULT_MAX_DOC_LEN,
            lowercase: false,
        }
    }
}

/// Vocabulary and label set shared by the splits of one corpus.
#[derive(Debug, Clone)]
pub struct Lexicon {
    pub vocab: Arc<Vocabulary>,
    pub labels: Arc<Vec<String>>,
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))
}

/// Loads one TSV file. Without a lexicon, vocabulary and labels are built
/// from this file.
pub fn load_corpus(path: &Path, split: Split, lexicon: Option<&Lexicon>, opts: &LoadOptions) -> anyhow::Result<(LabeledCorpus, Lexicon)> {
    let text = read(path)?;
    let records = parse_tsv(&text, opts.lowercase).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    if records.is_empty() {
        return Err(anyhow::anyhow!("{}: {}", path.display(), Error::InsufficientData("no documents".into())));
    }
    let lex = match lexicon {
        Some(l) => l.clone(),
        None => {
            let toks: Vec<Vec<String>> = records.iter().map(|r| r.tokens.clone()).collect();
            Lexicon {
                vocab: Arc::new(build_vocab(&toks, opts.max_vocab, opts.min_freq)?),
                labels: Arc::new(label_set(&records)),
            }
        }
    };
    let corpus = encode_records(&records, lex.labels.clone(), lex.vocab.clone(), split, opts.max_doc_len)
        .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    Ok((corpus, lex))
}

/// Loads `train.tsv`, `valid.tsv` and `test.tsv` from `dir`; the lexicon
/// comes from the training split.
pub fn load_splits(dir: &Path, opts: &LoadOptions) -> anyhow::Result<CorpusSplits> {
    let (train, lex) = load_corpus(&dir.join("train.tsv"), Split::Train, None, opts)?;
    let (valid, _) = load_corpus(&dir.join("valid.tsv"), Split::Valid, Some(&lex), opts)?;
    let (test, _) = load_corpus(&dir.join("test.tsv"), Split::Test, Some(&lex), opts)?;
    Ok(CorpusSplits { train, valid, test })
}

pub fn write_splits(dir: &Path, splits: &CorpusSplits) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    for c in [&splits.train, &splits.valid, &splits.test] {
        fs::write(dir.join(format!("{}.tsv", c.split.name())), to_tsv(c))?;
    }
    Ok(())
}
