use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};

use crate::config::ExperimentConfig;
use crate::table::read_csv;

fn table(out: &mut String, header: &[String], rows: &[Vec<String>]) {
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

fn csv_section(out: &mut String, title: &str, path: &Path) -> anyhow::Result<()> {
    let _ = writeln!(out, "## {title}\n");
    if !path.is_file() {
        let _ = writeln!(out, "(not run)\n");
        return Ok(());
    }
    let (_, header, rows) = read_csv(path)?;
    table(out, &header, &rows);
    Ok(())
}

/// Final-epoch summary of each trained cell, from its `epochs.csv`.
fn training_section(out: &mut String, dir: &Path) -> anyhow::Result<()> {
    let _ = writeln!(out, "## Training\n");
    let cells = dir.join("cells");
    let Ok(entries) = fs::read_dir(&cells) else {
        let _ = writeln!(out, "(not run)\n");
        return Ok(());
    };
    let mut ids: Vec<String> = entries.filter_map(|e| e.ok()).map(|e| e.file_name().to_string_lossy().into_owned()).collect();
    ids.sort();
    let header: Vec<String> = ["cell", "epochs", "best_epoch", "valid_rate", "valid_distortion", "valid_objective"]
        .map(String::from)
        .to_vec();
    let mut rows = Vec::new();
    for id in ids {
        let p = cells.join(&id).join("epochs.csv");
        if !p.is_file() {
            continue;
        }
        let (_, h, recs) = read_csv(&p)?;
        let col = |name: &str| h.iter().position(|c| c == name).with_context(|| format!("{}: no column {name}", p.display()));
        let (ci, cr, cd, co) = (col("epoch")?, col("valid_rate")?, col("valid_distortion")?, col("valid_objective")?);
        let best = recs
            .iter()
            .filter_map(|r| r[co].parse::<f64>().ok().map(|v| (v, r)))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((_, r)) = best {
            rows.push(vec![id, recs.len().to_string(), r[ci].clone(), r[cr].clone(), r[cd].clone(), r[co].clone()]);
        }
    }
    table(out, &header, &rows);
    Ok(())
}

fn ssl_section(out: &mut String, dir: &Path) -> anyhow::Result<()> {
    let _ = writeln!(out, "## Semi-supervised probes\n");
    let Ok(entries) = fs::read_dir(dir.join("ssl")) else {
        let _ = writeln!(out, "(not run)\n");
        return Ok(());
    };
    let mut paths: Vec<_> = entries.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    paths.sort();
    let header: Vec<String> = ["variant", "regime", "mean_f1", "sigma_init", "sigma_resid"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for p in paths {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&p)?).with_context(|| p.display().to_string())?;
        let field = |k: &str| match &v["variance"][k] {
            serde_json::Value::Null => "n/a".to_string(),
            x => x.to_string(),
        };
        rows.push(vec![
            v["variant"].as_str().unwrap_or("?").to_string(),
            v["regime"].as_str().unwrap_or("?").to_string(),
            field("mean"),
            field("sigma_init"),
            field("sigma_resid"),
        ]);
    }
    table(out, &header, &rows);
    Ok(())
}

/// Aggregates existing artifacts without writing into the run directory.
pub fn report(cfg: &ExperimentConfig, out: Option<&Path>) -> anyhow::Result<String> {
    let dir = cfg.run_dir();
    if !dir.is_dir() {
        bail!("no run directory at {} (run `train` first)", dir.display());
    }
    let mut s = format!("# {} ({})\n\n", if cfg.name.is_empty() { "experiment" } else { &cfg.name }, cfg.run_id());
    training_section(&mut s, &dir)?;
    csv_section(&mut s, "Diagnostics", &dir.join("diagnose/summary.csv"))?;
    csv_section(&mut s, "Reconstruction agreement", &dir.join("agreement.csv"))?;
    ssl_section(&mut s, &dir)?;
    if let Some(p) = out {
        fs::write(p, &s).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(s)
}
