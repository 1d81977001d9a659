use std::collections::BTreeMap;
use std::fs;

use anyhow::bail;

use vaelab_core::corpus::CorpusSplits;
use vaelab_core::decode::reconstruct_all;
use vaelab_core::diagnostics::{
    argmax_position_stats, corpus_ppl, label_oracle_baseline, memorization_metrics, position_loss_profile,
    relative_improvement, LossProfile,
};
use vaelab_core::models::kl_rows;

use super::{num, summarize, Experiment};
use crate::config::Cell;
use crate::pool;
use crate::table::{write_csv, ARGMAX, DIAGNOSE, PROFILE, RELATIVE};

/// Profiled lengths: the configured list, else the most common test length.
fn lengths(exp: &Experiment, corpus: &CorpusSplits) -> Vec<usize> {
    if !exp.cfg.diagnose.lengths.is_empty() {
        return exp.cfg.diagnose.lengths.clone();
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for d in &corpus.test.docs {
        *counts.entry(d.len()).or_default() += 1;
    }
    // Ties go to the shorter length.
    let best = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)));
    best.map(|(&l, _)| vec![l]).unwrap_or_default()
}

fn lambda_of(cell: &Cell) -> String {
    cell.rate.map(|r| num(r.lambda)).unwrap_or_default()
}

struct CellReport {
    profiles: Vec<LossProfile>,
    argmax: Vec<Vec<String>>,
    summary: Option<Vec<String>>,
}

pub fn run(exp: &Experiment) -> anyhow::Result<()> {
    let corpus = exp.corpus()?;
    let cells = exp.cells(&corpus)?;
    let lens = lengths(exp, &corpus);
    let dcfg = &exp.cfg.diagnose;
    let oracle = label_oracle_baseline(&corpus.train, &corpus.test)?;
    let test_docs: Vec<&[u32]> = corpus.test.docs.iter().map(|d| &d.token_ids[..]).collect();
    let iwae_docs = &corpus.test.docs[..dcfg.iwae_docs.min(corpus.test.len())];
    let max_len = exp.max_len(&corpus);

    let results = pool::run(exp.workers, &cells, |cell| {
        let r = (|| -> anyhow::Result<CellReport> {
            let model = exp.load_model(cell, &corpus)?;
            let mut profiles = Vec::new();
            for &l in &lens {
                profiles.push(position_loss_profile(&model, &corpus.test.docs, l, dcfg.z_seed)?);
            }
            if cell.is_baseline() {
                return Ok(CellReport {
                    profiles,
                    argmax: Vec::new(),
                    summary: None,
                });
            }
            let post = model.posterior(&test_docs)?;
            let kl = kl_rows(&post).iter().sum::<f64>() / test_docs.len() as f64;
            let recon = reconstruct_all(&model, &test_docs, exp.strategy(), max_len, dcfg.z_seed)?;
            let mem = memorization_metrics(&test_docs, &recon)?;
            let ppl = corpus_ppl(&model, iwae_docs, dcfg.iwae_samples, dcfg.z_seed)?;
            let mut argmax = Vec::new();
            let mut consistent = String::new();
            if model.arch.encoder.is_some_and(|e| e.is_max_pooled()) {
                let rep = argmax_position_stats(&model, &corpus.test.docs, dcfg.argmax_threshold)?;
                for (j, c) in rep.components.iter().enumerate() {
                    argmax.push(vec![cell.id.clone(), j.to_string(), c.position.to_string(), num(c.fraction)]);
                }
                consistent = rep.consistent.to_string();
            }
            let summary = vec![
                cell.id.clone(),
                model.arch.describe(),
                lambda_of(cell),
                num(kl),
                num(mem.first_word_acc),
                num(mem.length_match),
                num(mem.mid_word_acc),
                num(oracle.first_word_acc),
                num(oracle.length_match),
                num(oracle.mid_word_acc),
                num(ppl.nats / ppl.tokens as f64),
                num(ppl.ppl),
                consistent,
            ];
            Ok(CellReport {
                profiles,
                argmax,
                summary: Some(summary),
            })
        })();
        (cell.id.clone(), r)
    });
    let reports = summarize("diagnose", results)?;

    let mut profile_rows = Vec::new();
    let mut relative_rows = Vec::new();
    let mut argmax_rows = Vec::new();
    let mut summary_rows = Vec::new();
    for (cell, (_, rep)) in cells.iter().zip(&reports) {
        for p in &rep.profiles {
            for (i, v) in p.per_position.iter().enumerate() {
                profile_rows.push(vec![
                    cell.id.clone(),
                    p.model_id.clone(),
                    lambda_of(cell),
                    p.doc_len.to_string(),
                    (i + 1).to_string(),
                    num(*v),
                    p.n_docs.to_string(),
                ]);
            }
        }
        // Relative improvement against the language model of the same seed.
        let baseline = cells
            .iter()
            .zip(&reports)
            .find(|(c, _)| c.is_baseline() && c.seed == cell.seed)
            .map(|(_, (_, r))| r);
        if let (false, Some(base)) = (cell.is_baseline(), baseline) {
            for (p, b) in rep.profiles.iter().zip(&base.profiles) {
                if p.per_position.len() != b.per_position.len() {
                    continue; // unigram decoders have no EOS slot
                }
                for (i, v) in relative_improvement(p, b)?.iter().enumerate() {
                    relative_rows.push(vec![
                        cell.id.clone(),
                        p.model_id.clone(),
                        lambda_of(cell),
                        p.doc_len.to_string(),
                        (i + 1).to_string(),
                        num(*v),
                    ]);
                }
            }
        }
        argmax_rows.extend(rep.argmax.iter().cloned());
        summary_rows.extend(rep.summary.iter().cloned());
    }
    let dir = exp.dir.join("diagnose");
    write_csv(&dir.join("profile.csv"), &PROFILE, &profile_rows)?;
    write_csv(&dir.join("relative.csv"), &RELATIVE, &relative_rows)?;
    write_csv(&dir.join("argmax.csv"), &ARGMAX, &argmax_rows)?;
    write_csv(&dir.join("summary.csv"), &DIAGNOSE, &summary_rows)?;
    Ok(())
}

/// Writes `decode/{cell}.tsv` for every VAE cell.
pub fn decode(exp: &Experiment) -> anyhow::Result<()> {
    let corpus = exp.corpus()?;
    let cells: Vec<Cell> = exp.cells(&corpus)?.into_iter().filter(|c| !c.is_baseline()).collect();
    if cells.is_empty() {
        bail!("decode: the grid has no VAE cells");
    }
    let vocab = corpus.vocab().clone();
    let docs: Vec<&[u32]> = corpus.test.docs.iter().map(|d| &d.token_ids[..]).collect();
    let max_len = exp.max_len(&corpus);
    let z_seed = exp.cfg.decode.z_seed;
    let strategy = exp.strategy();
    let strategy_name = match strategy {
        vaelab_core::decode::Strategy::Greedy => "greedy".to_string(),
        vaelab_core::decode::Strategy::Beam(b) => format!("beam{b}"),
    };
    let dir = exp.dir.join("decode");
    fs::create_dir_all(&dir)?;
    let results = pool::run(exp.workers, &cells, |cell| {
        let r = (|| -> anyhow::Result<()> {
            let model = exp.load_model(cell, &corpus)?;
            let recon = reconstruct_all(&model, &docs, strategy, max_len, z_seed)?;
            let mut out = String::from("doc_id\tsource\treconstruction\tstrategy\tz_seed\n");
            for (i, (src, rec)) in docs.iter().zip(&recon).enumerate() {
                out += &format!(
                    "{i}\t{}\t{}\t{strategy_name}\t{z_seed}\n",
                    vocab.decode_text(src),
                    vocab.decode_text(rec)
                );
            }
            fs::write(dir.join(format!("{}.tsv", cell.id)), out)?;
            Ok(())
        })();
        (cell.id.clone(), r)
    });
    summarize("decode", results).map(|_| ())
}
