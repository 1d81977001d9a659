use std::collections::BTreeMap;

use anyhow::bail;
use serde_json::json;

use vaelab_core::rng::derive;
use vaelab_core::ssl::{
    sample_features, ssl_protocol, variance_decomposition, ProbeCell, ProbeLabels, Regime, SslConfig,
};

use super::{summarize, write_json, Experiment};
use crate::config::Cell;
use crate::pool;

fn regime_name(r: Regime) -> String {
    match r {
        Regime::PerClass(n) => format!("n{n}"),
        Regime::Full => "full".into(),
    }
}

/// Runs the semi-supervised protocol for every model family and regime and
/// writes `ssl/{variant}-{regime}.json`.
pub fn run(exp: &Experiment) -> anyhow::Result<()> {
    let corpus = exp.corpus()?;
    let cells: Vec<Cell> = exp.cells(&corpus)?.into_iter().filter(|c| !c.is_baseline()).collect();
    if cells.is_empty() {
        bail!("ssl: the grid has no VAE cells");
    }
    let s = &exp.cfg.ssl;
    // Features are drawn once per trained encoder and shared by all regimes.
    let feats = pool::run(exp.workers, &cells, |cell| {
        let r = (|| -> anyhow::Result<ProbeCell> {
            let model = exp.load_model(cell, &corpus)?;
            Ok(ProbeCell {
                hyper: cell.hyper(),
                init: cell.seed_index,
                train: sample_features(&model, &corpus.train, derive(s.z_seed, 0))?,
                valid: sample_features(&model, &corpus.valid, derive(s.z_seed, 1))?,
                test: sample_features(&model, &corpus.test, derive(s.z_seed, 2))?,
            })
        })();
        (cell.id.clone(), r)
    });
    let feats = summarize("ssl features", feats)?;

    let mut groups: BTreeMap<String, Vec<ProbeCell>> = BTreeMap::new();
    for (cell, (_, pc)) in cells.iter().zip(feats) {
        groups.entry(cell.variant()).or_default().push(pc);
    }
    let (train_y, valid_y, test_y) = (corpus.train.label_ids(), corpus.valid.label_ids(), corpus.test.label_ids());
    let labels = ProbeLabels {
        train: &train_y,
        valid: &valid_y,
        test: &test_y,
        num_classes: corpus.train.num_classes,
    };
    let mut jobs = Vec::new();
    for variant in groups.keys() {
        for &n in &s.regimes {
            let regime = if n == 0 { Regime::Full } else { Regime::PerClass(n) };
            jobs.push((variant.clone(), regime));
        }
    }
    let results = pool::run(exp.workers, &jobs, |(variant, regime)| {
        let name = format!("{variant}-{}", regime_name(*regime));
        let r = (|| -> anyhow::Result<()> {
            let cfg = SslConfig {
                regime: *regime,
                subsample_seeds: (0..s.subsample_seeds as u64).collect(),
                c_grid: s.c_grid.clone(),
                folds: s.folds,
                repeats: s.repeats,
                cv_seed: s.cv_seed,
                ..SslConfig::default()
            };
            let m = ssl_protocol(&groups[variant], labels, &cfg)?;
            let variance = match variance_decomposition(&m.f) {
                Ok(v) => json!({
                    "mean": v.mean,
                    "sigma_init": v.sigma_init,
                    "sigma_resid": v.sigma_resid,
                    "ms_error": v.ms_error,
                }),
                Err(e) => json!({ "unavailable": e.to_string() }),
            };
            let selections: Vec<_> = m
                .selections
                .iter()
                .map(|x| {
                    json!({
                        "subsample": x.subsample,
                        "init": x.init,
                        "hyper": x.hyper,
                        "c": x.c,
                        "selection_score": x.selection_score,
                    })
                })
                .collect();
            let doc = json!({
                "variant": variant,
                "regime": regime_name(*regime),
                "f": m.f,
                "variance": variance,
                "selections": selections,
            });
            write_json(&exp.dir.join("ssl").join(format!("{name}.json")), &doc)
        })();
        (name, r)
    });
    summarize("ssl", results).map(|_| ())
}
