//! Experiment configuration (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vaelab_core::corpus::{MarkerPosition, SynthSpec};
use vaelab_core::models::{Architecture, DecoderKind, EncoderKind};
use vaelab_core::objectives::{FreeBitsFlavor, PretrainKind, RateConfig, Seeds, TrainConfig};

use crate::corpus_io::LoadOptions;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ENV: &str = "VAELAB_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
    #[serde(default)]
    pub decode: DecodeSection,
    #[serde(default)]
    pub ssl: SslSection,
    #[serde(default)]
    pub agreement: AgreementSection,
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Directory with `train.tsv`, `valid.tsv` and `test.tsv`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_max_vocab")]
    pub max_vocab: usize,
    #[serde(default = "d_one")]
    pub min_freq: u64,
    #[serde(default = "d_max_doc_len")]
    pub max_doc_len: usize,
    #[serde(default)]
    pub lowercase: bool,
}

fn d_max_vocab() -> usize {
    20_000
}
fn d_one() -> u64 {
    1
}
fn d_max_doc_len() -> usize {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MarkerSetting {
    /// Zero-based index.
    Fixed(usize),
    /// The string `"uniform"`.
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub num_classes: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub marker_position: MarkerSetting,
    pub marker_strength: f64,
    pub zipf_exponent: f64,
    pub num_train: usize,
    pub num_valid: usize,
    pub num_test: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthSpec::default();
        SynthSection {
            num_classes: s.num_classes,
            vocab_size: s.vocab_size,
            min_len: s.doc_len_range.0,
            max_len: s.doc_len_range.1,
            marker_position: MarkerSetting::Fixed(5),
            marker_strength: s.marker_strength,
            zipf_exponent: s.zipf_exponent,
            num_train: s.num_train,
            num_valid: s.num_valid,
            num_test: s.num_test,
        }
    }
}

impl SynthSection {
    pub fn spec(&self) -> anyhow::Result<SynthSpec> {
        let marker_position = match &self.marker_position {
            MarkerSetting::Fixed(p) => MarkerPosition::Fixed(*p),
            MarkerSetting::Named(s) if s == "uniform" => MarkerPosition::Uniform,
            MarkerSetting::Named(s) => bail!("corpus.synth.marker_position: expected an integer or \"uniform\", got {s:?}"),
        };
        let spec = SynthSpec {
            num_classes: self.num_classes,
            vocab_size: self.vocab_size,
            doc_len_range: (self.min_len, self.max_len),
            marker_position,
            marker_strength: self.marker_strength,
            zipf_exponent: self.zipf_exponent,
            num_train: self.num_train,
            num_valid: self.num_valid,
            num_test: self.num_test,
        };
        spec.validate().context("corpus.synth")?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoders: Vec<String>,
    pub decoder: String,
    /// `none`, `pre-ae`, `pre-lm` or `pre-uni`.
    pub pretrain: String,
    pub lambdas: Vec<f64>,
    pub latent_dims: Vec<usize>,
    pub flavor: String,
    pub anneal_epochs: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub unigram_hidden: usize,
    pub dropout: f64,
    /// Also train an unconditional language model per seed.
    pub language_model_baseline: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            encoders: vec!["lstm-last".into()],
            decoder: "lstm".into(),
            pretrain: "none".into(),
            lambdas: vec![8.0],
            latent_dims: vec![16],
            flavor: "delta".into(),
            anneal_epochs: 0,
            embed_dim: 32,
            hidden_dim: 64,
            unigram_hidden: 64,
            dropout: 0.0,
            language_model_baseline: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_halvings: usize,
    pub max_epochs: usize,
    /// Epoch cap of the first phase of two-phase pipelines.
    pub phase1_max_epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            clip_norm: t.clip_norm,
            batch_size: t.batch_size,
            patience: t.patience,
            max_halvings: t.max_halvings,
            max_epochs: 30,
            phase1_max_epochs: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    /// Document lengths to profile; empty means the most common test length.
    pub lengths: Vec<usize>,
    pub iwae_samples: usize,
    /// IWAE runs on the first this-many test documents.
    pub iwae_docs: usize,
    pub argmax_threshold: f64,
    pub z_seed: u64,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection {
            lengths: Vec::new(),
            iwae_samples: 50,
            iwae_docs: 200,
            argmax_threshold: 0.5,
            z_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    /// `greedy` or `beam`.
    pub strategy: String,
    pub beam_size: usize,
    /// 0 means 1.5 times the 99th-percentile training length.
    pub max_len: usize,
    pub z_seed: u64,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection {
            strategy: "greedy".into(),
            beam_size: 5,
            max_len: 0,
            z_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslSection {
    /// Labeled documents per class; 0 is the full-data regime.
    pub regimes: Vec<usize>,
    pub subsample_seeds: usize,
    pub c_grid: Vec<f64>,
    pub folds: usize,
    pub repeats: usize,
    pub cv_seed: u64,
    pub z_seed: u64,
}

impl Default for SslSection {
    fn default() -> Self {
        SslSection {
            regimes: vec![5, 50],
            subsample_seeds: 5,
            c_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            folds: 5,
            repeats: 2,
            cv_seed: 0,
            z_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgreementSection {
    pub bow_dim: usize,
    pub bow_epochs: usize,
    pub ppl_samples: usize,
    pub ppl_docs: usize,
}

impl Default for AgreementSection {
    fn default() -> Self {
        AgreementSection {
            bow_dim: 200,
            bow_epochs: 30,
            ppl_samples: 10,
            ppl_docs: 200,
        }
    }
}

/// One trainable grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: String,
    pub arch: Architecture,
    /// `None` for the language-model baseline.
    pub rate: Option<RateConfig>,
    pub pretrain: Option<PretrainKind>,
    /// Position of the seed in the seed list.
    pub seed_index: usize,
    pub seed: u64,
}

impl Cell {
    pub fn is_baseline(&self) -> bool {
        self.arch.encoder.is_none()
    }

    /// Label of the VAE hyperparameters, shared across seeds.
    pub fn hyper(&self) -> String {
        match self.rate {
            Some(r) => format!("lam{}-d{}", r.lambda, self.arch.latent_dim),
            None => "lm".into(),
        }
    }

    /// Label of the model family, shared across hyperparameters and seeds.
    pub fn variant(&self) -> String {
        match self.pretrain {
            Some(p) => format!("{}-{}", self.arch.describe(), p.name()),
            None => self.arch.describe(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        // toml errors carry the line, column and offending key.
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| anyhow!("invalid config: {e}"))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| path.display().to_string())?;
        // Relative corpus paths are relative to the config file.
        if let (Some(p), Some(dir)) = (&cfg.corpus.path, path.parent()) {
            if p.is_relative() {
                cfg.corpus.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn with_seed_offset(mut self, k: u64) -> Self {
        for s in &mut self.seeds {
            *s += k;
        }
        self
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds: the seed list must not be empty");
        }
        match (&self.corpus.path, &self.corpus.synth) {
            (Some(_), Some(_)) | (None, None) => bail!("corpus: set exactly one of `path` and `synth`"),
            (Some(p), None) => {
                for f in ["train.tsv", "valid.tsv", "test.tsv"] {
                    if !p.join(f).is_file() {
                        bail!("corpus.path: {} does not exist", p.join(f).display());
                    }
                }
            }
            (None, Some(s)) => {
                s.spec()?;
            }
        }
        if self.model.lambdas.is_empty() || self.model.latent_dims.is_empty() || self.model.encoders.is_empty() {
            bail!("model: encoders, lambdas and latent_dims must be nonempty");
        }
        self.cells()?;
        self.train_config(0, false).validate()?;
        if !matches!(self.decode.strategy.as_str(), "greedy" | "beam") {
            bail!("decode.strategy: expected \"greedy\" or \"beam\", got {:?}", self.decode.strategy);
        }
        if self.ssl.subsample_seeds < 1 || self.ssl.c_grid.is_empty() {
            bail!("ssl: need at least one subsample seed and one C value");
        }
        Ok(())
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            max_vocab: self.corpus.max_vocab,
            min_freq: self.corpus.min_freq,
            max_doc_len: self.corpus.max_doc_len,
            lowercase: self.corpus.lowercase,
        }
    }

    pub fn train_config(&self, seed: u64, phase1: bool) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            clip_norm: t.clip_norm,
            batch_size: t.batch_size,
            patience: t.patience,
            max_halvings: t.max_halvings,
            max_epochs: if phase1 { t.phase1_max_epochs } else { t.max_epochs },
            seeds: Seeds::from_one(if phase1 { seed.wrapping_add(0x5048_4153_4531) } else { seed }),
        }
    }

    /// Grid cells for a vocabulary of `vocab_size` types (0 when unknown).
    pub fn cells_for(&self, vocab_size: usize) -> anyhow::Result<Vec<Cell>> {
        let m = &self.model;
        let decoder = DecoderKind::parse(&m.decoder).ok_or_else(|| anyhow!("model.decoder: unknown decoder {:?}", m.decoder))?;
        let flavor = FreeBitsFlavor::parse(&m.flavor).ok_or_else(|| anyhow!("model.flavor: unknown flavor {:?}", m.flavor))?;
        let pretrain = match m.pretrain.as_str() {
            "none" => None,
            p => Some(PretrainKind::parse(p).ok_or_else(|| anyhow!("model.pretrain: unknown pipeline {p:?}"))?),
        };
        let base = |encoder, d| Architecture {
            encoder,
            decoder,
            vocab_size,
            embed_dim: m.embed_dim,
            hidden_dim: m.hidden_dim,
            latent_dim: d,
            unigram_hidden: m.unigram_hidden,
            dropout: m.dropout,
        };
        let mut cells = Vec::new();
        for (si, &seed) in self.seeds.iter().enumerate() {
            for e in &m.encoders {
                let enc = EncoderKind::parse(e).ok_or_else(|| anyhow!("model.encoders: unknown encoder {e:?}"))?;
                for &lambda in &m.lambdas {
                    for &d in &m.latent_dims {
                        let rate = RateConfig {
                            lambda,
                            flavor,
                            anneal_epochs: m.anneal_epochs,
                        };
                        rate.validate().context("model.lambdas")?;
                        let arch = base(Some(enc), d);
                        let mut cell = Cell {
                            id: String::new(),
                            arch,
                            rate: Some(rate),
                            pretrain,
                            seed_index: si,
                            seed,
                        };
                        cell.id = format!("{}-{}-s{seed}", cell.variant(), cell.hyper());
                        cells.push(cell);
                    }
                }
            }
            if m.language_model_baseline {
                cells.push(Cell {
                    id: format!("lm-s{seed}"),
                    arch: Architecture {
                        encoder: None,
                        decoder: DecoderKind::LstmUnconditional,
                        ..base(None, m.latent_dims[0])
                    },
                    rate: None,
                    pretrain: None,
                    seed_index: si,
                    seed,
                });
            }
        }
        Ok(cells)
    }

    pub fn cells(&self) -> anyhow::Result<Vec<Cell>> {
        self.cells_for(0)
    }

    /// The configuration exactly as used, serialized.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the resolved config.
    pub fn run_id(&self) -> String {
        let digest = Sha256::digest(self.resolved().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// `$VAELAB_OUT`, else `output_dir`, else `runs`.
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(OUTPUT_ENV)
            .map(PathBuf::from)
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(self.run_id())
    }
}
