//! Subcommand implementations. Every artifact of one experiment lives under
//! `<output root>/<run id>/`, next to `config.resolved.toml`.

mod agreement;
mod diagnose;
mod report;
mod ssl;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};

use vaelab_core::corpus::{synth_corpus, CorpusSplits};
use vaelab_core::decode::{default_max_len, Strategy};
use vaelab_core::models::{ModelCheckpoint, Seq2SeqModel};

use crate::checkpoint;
use crate::config::{Cell, ExperimentConfig};
use crate::corpus_io::{load_splits, write_splits};

pub use report::report;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// A validated experiment bound to its run directory.
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub workers: usize,
    pub resume: bool,
}

impl Experiment {
    pub fn open(cfg: ExperimentConfig, workers: usize, resume: bool) -> anyhow::Result<Self> {
        cfg.validate()?;
        let dir = cfg.run_dir();
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let resolved = cfg.resolved();
        let path = dir.join(RESOLVED_CONFIG);
        match fs::read_to_string(&path) {
            Ok(existing) if existing == resolved => {}
            Ok(_) => bail!("{} holds a different configuration", path.display()),
            Err(_) => fs::write(&path, resolved)?,
        }
        Ok(Experiment {
            cfg,
            dir,
            workers: workers.max(1),
            resume,
        })
    }

    pub fn corpus(&self) -> anyhow::Result<CorpusSplits> {
        match (&self.cfg.corpus.synth, &self.cfg.corpus.path) {
            (Some(s), _) => Ok(synth_corpus(&s.spec()?, self.cfg.corpus.seed)?),
            (None, Some(p)) => load_splits(p, &self.cfg.load_options()),
            (None, None) => bail!("corpus: no source configured"),
        }
    }

    pub fn cells(&self, corpus: &CorpusSplits) -> anyhow::Result<Vec<Cell>> {
        self.cfg.cells_for(corpus.vocab().len())
    }

    pub fn cell_dir(&self, cell: &Cell) -> PathBuf {
        self.dir.join("cells").join(&cell.id)
    }

    pub fn checkpoint_path(&self, cell: &Cell) -> PathBuf {
        self.cell_dir(cell).join("checkpoint.bin")
    }

    pub fn load_model(&self, cell: &Cell, corpus: &CorpusSplits) -> anyhow::Result<Seq2SeqModel> {
        let path = self.checkpoint_path(cell);
        if !path.is_file() {
            bail!("no checkpoint for {} (run `train` first)", cell.id);
        }
        let ck: ModelCheckpoint = checkpoint::load(&path)?;
        ck.check_vocab(corpus.vocab())?;
        Ok(ck.model()?)
    }

    pub fn strategy(&self) -> Strategy {
        match self.cfg.decode.strategy.as_str() {
            "beam" => Strategy::Beam(self.cfg.decode.beam_size),
            _ => Strategy::Greedy,
        }
    }

    pub fn max_len(&self, corpus: &CorpusSplits) -> usize {
        match self.cfg.decode.max_len {
            0 => default_max_len(&corpus.train),
            n => n,
        }
    }
}

/// Shortest round-trip decimal form.
pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn synth(exp: &Experiment) -> anyhow::Result<PathBuf> {
    if exp.cfg.corpus.synth.is_none() {
        bail!("synth: the config has no [corpus.synth] section");
    }
    let dir = exp.dir.join("corpus");
    write_splits(&dir, &exp.corpus()?)?;
    Ok(dir)
}

pub fn train(exp: &Experiment) -> anyhow::Result<()> {
    train::run(exp)
}

pub fn diagnose(exp: &Experiment) -> anyhow::Result<()> {
    diagnose::run(exp)
}

pub fn decode(exp: &Experiment) -> anyhow::Result<()> {
    diagnose::decode(exp)
}

pub fn ssl(exp: &Experiment) -> anyhow::Result<()> {
    ssl::run(exp)
}

pub fn agreement(exp: &Experiment) -> anyhow::Result<()> {
    agreement::run(exp)
}

/// Collects per-cell failures into one error after every cell ran.
fn summarize<T>(what: &str, results: Vec<(String, anyhow::Result<T>)>) -> anyhow::Result<Vec<(String, T)>> {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (id, r) in results {
        match r {
            Ok(v) => ok.push((id, v)),
            Err(e) => failed.push(format!("{id}: {e:#}")),
        }
    }
    if failed.is_empty() {
        Ok(ok)
    } else {
        bail!("{what} failed for {} cell(s):\n  {}", failed.len(), failed.join("\n  "))
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}
