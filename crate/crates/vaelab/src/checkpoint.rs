//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes   | content                                             |
//! |---------|-----------------------------------------------------|
//! | 8       | magic `VAELABCK`                                    |
//! | 4       | format version (u32, currently 1)                   |
//! | 4       | header length `H` (u32)                             |
//! | H       | UTF-8 JSON header: architecture, vocabulary hash,   |
//! |         | training metadata, and `params`: a list of          |
//! |         | `{name, group, rows, cols}` in storage order        |
//! | 8 * n   | every parameter's values as f64, row-major, in the  |
//! |         | order of `params`                                   |
//! | 32      | SHA-256 of all preceding bytes                      |

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vaelab_core::models::{Architecture, DecoderKind, EncoderKind, ModelCheckpoint, ParamGroup, ParamSet, TrainingMeta};
use vaelab_core::objectives::{FreeBitsFlavor, RateConfig, Seeds};
use vaelab_core::Tensor;

const MAGIC: &[u8; 8] = b"VAELABCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchHeader {
    encoder: Option<String>,
    decoder: String,
    vocab_size: usize,
    embed_dim: usize,
    hidden_dim: usize,
    latent_dim: usize,
    unigram_hidden: usize,
    dropout: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RateHeader {
    lambda: f64,
    flavor: String,
    anneal_epochs: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaHeader {
    rate: Option<RateHeader>,
    seeds: [u64; 3],
    epoch: usize,
    note: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamHeader {
    name: String,
    group: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchHeader,
    vocab_hash: u64,
    meta: MetaHeader,
    params: Vec<ParamHeader>,
}

pub fn to_bytes(ck: &ModelCheckpoint) -> Vec<u8> {
    let a = &ck.arch;
    let header = Header {
        arch: ArchHeader {
            encoder: a.encoder.map(|e| e.name().to_string()),
            decoder: a.decoder.name().to_string(),
            vocab_size: a.vocab_size,
            embed_dim: a.embed_dim,
            hidden_dim: a.hidden_dim,
            latent_dim: a.latent_dim,
            unigram_hidden: a.unigram_hidden,
            dropout: a.dropout,
        },
        vocab_hash: ck.vocab_hash,
        meta: MetaHeader {
            rate: ck.meta.rate.map(|r| RateHeader {
                lambda: r.lambda,
                flavor: r.flavor.name().to_string(),
                anneal_epochs: r.anneal_epochs,
            }),
            seeds: [ck.meta.seeds.init, ck.meta.seeds.data, ck.meta.seeds.sample],
            epoch: ck.meta.epoch,
            note: ck.meta.note.clone(),
        },
        params: ck
            .params
            .iter()
            .map(|p| ParamHeader {
                name: p.name.clone(),
                group: p.group.name().to_string(),
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * ck.params.num_scalars() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in ck.params.iter() {
        for x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn from_bytes(bytes: &[u8]) -> anyhow::Result<ModelCheckpoint> {
    if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
        bail!("not a checkpoint file");
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        bail!("checkpoint checksum mismatch");
    }
    let version = u32::from_le_bytes(body[8..12].try_into()?);
    if version != VERSION {
        bail!("unsupported checkpoint version {version}");
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into()?) as usize;
    let json = body.get(16..16 + hlen).ok_or_else(|| anyhow!("truncated header"))?;
    let h: Header = serde_json::from_slice(json).context("checkpoint header")?;
    let arch = Architecture {
        encoder: match &h.arch.encoder {
            Some(e) => Some(EncoderKind::parse(e).ok_or_else(|| anyhow!("unknown encoder {e}"))?),
            None => None,
        },
        decoder: DecoderKind::parse(&h.arch.decoder).ok_or_else(|| anyhow!("unknown decoder {}", h.arch.decoder))?,
        vocab_size: h.arch.vocab_size,
        embed_dim: h.arch.embed_dim,
        hidden_dim: h.arch.hidden_dim,
        latent_dim: h.arch.latent_dim,
        unigram_hidden: h.arch.unigram_hidden,
        dropout: h.arch.dropout,
    };
    let mut data = &body[16 + hlen..];
    let mut params = ParamSet::new();
    for p in &h.params {
        let n = p.rows * p.cols;
        if data.len() < 8 * n {
            bail!("truncated data for {}", p.name);
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[8 * n..];
        let group = ParamGroup::parse(&p.group).ok_or_else(|| anyhow!("unknown group {}", p.group))?;
        params.push(&p.name, group, Tensor::from_vec(p.rows, p.cols, values));
    }
    if !data.is_empty() {
        bail!("{} trailing bytes after parameter data", data.len());
    }
    let rate = match h.meta.rate {
        Some(r) => Some(RateConfig {
            lambda: r.lambda,
            flavor: FreeBitsFlavor::parse(&r.flavor).ok_or_else(|| anyhow!("unknown flavor {}", r.flavor))?,
            anneal_epochs: r.anneal_epochs,
        }),
        None => None,
    };
    let ck = ModelCheckpoint {
        arch,
        vocab_hash: h.vocab_hash,
        params,
        meta: TrainingMeta {
            rate,
            seeds: Seeds::new(h.meta.seeds[0], h.meta.seeds[1], h.meta.seeds[2]),
            epoch: h.meta.epoch,
            note: h.meta.note,
        },
    };
    // Validates names and shapes against the architecture.
    ck.model()?;
    Ok(ck)
}

pub fn save(path: &Path, ck: &ModelCheckpoint) -> anyhow::Result<()> {
    // Write then rename, so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, to_bytes(ck))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> anyhow::Result<ModelCheckpoint> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    from_bytes(&bytes).with_context(|| path.display().to_string())
}
