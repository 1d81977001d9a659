//! CSV artifacts. Every file starts with one `# schema: NAME vN` comment
//! line, followed by an ordinary CSV header.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};

/// A schema name and version, e.g. `profile v1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schema {
    pub name: &'static str,
    pub version: u32,
    pub columns: &'static [&'static str],
}

impl Schema {
    pub fn comment(&self) -> String {
        format!("# schema: {} v{}", self.name, self.version)
    }
}

pub const EPOCHS: Schema = Schema {
    name: "epochs",
    version: 1,
    columns: &["epoch", "lr", "train_rate", "train_distortion", "train_objective", "valid_rate", "valid_distortion", "valid_objective", "beta"],
};

pub const PROFILE: Schema = Schema {
    name: "profile",
    version: 1,
    columns: &["cell", "model_id", "lambda", "length", "position", "mean_loss", "n_docs"],
};

pub const RELATIVE: Schema = Schema {
    name: "relative-improvement",
    version: 1,
    columns: &["cell", "model_id", "lambda", "length", "position", "relative_improvement"],
};

pub const ARGMAX: Schema = Schema {
    name: "argmax",
    version: 1,
    columns: &["cell", "component", "position", "fraction"],
};

pub const DIAGNOSE: Schema = Schema {
    name: "diagnose",
    version: 1,
    columns: &[
        "cell",
        "model_id",
        "lambda",
        "kl",
        "first_word_acc",
        "length_match",
        "mid_word_acc",
        "oracle_first_word_acc",
        "oracle_length_match",
        "oracle_mid_word_acc",
        "iwae_nats_per_token",
        "iwae_ppl",
        "consistent_components",
    ],
};

pub const AGREEMENT: Schema = Schema {
    name: "agreement",
    version: 1,
    columns: &["cell", "agree", "first_word_acc", "mid_word_acc", "length_match", "approx_ppl"],
};

/// Writes `rows` under `schema`; each row must have one field per column.
pub fn write_csv(path: &Path, schema: &Schema, rows: &[Vec<String>]) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{}", schema.comment())?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(schema.columns)?;
        for r in rows {
            if r.len() != schema.columns.len() {
                bail!("{} row has {} fields, schema has {}", schema.name, r.len(), schema.columns.len());
            }
            w.write_record(r)?;
        }
        w.flush()?;
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf).with_context(|| format!("cannot write {}", path.display()))
}

/// Reads a CSV artifact: schema comment, header and records.
pub fn read_csv(path: &Path) -> anyhow::Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let Some(schema) = first.strip_prefix("# schema: ") else {
        bail!("{}: missing schema comment", path.display());
    };
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok((schema.to_string(), header, rows))
}
