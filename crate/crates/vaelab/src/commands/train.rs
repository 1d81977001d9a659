use std::fs;

use vaelab_core::models::Seq2SeqModel;
use vaelab_core::objectives::{pretrain_pipeline, sgd_train, EpochRecord, Objective};

use super::{num, summarize, Experiment};
use crate::checkpoint;
use crate::config::Cell;
use crate::pool;
use crate::table::{write_csv, EPOCHS};

fn epoch_rows(history: &[EpochRecord]) -> Vec<Vec<String>> {
    history
        .iter()
        .map(|h| {
            vec![
                h.epoch.to_string(),
                num(h.lr),
                num(h.train.rate),
                num(h.train.distortion),
                num(h.train.objective),
                num(h.valid.rate),
                num(h.valid.distortion),
                num(h.valid.objective),
                num(h.valid.beta),
            ]
        })
        .collect()
}

fn describe(cell: &Cell) -> String {
    let mut s = format!("id = {:?}\nvariant = {:?}\nhyper = {:?}\nseed = {}\n", cell.id, cell.variant(), cell.hyper(), cell.seed);
    if let Some(r) = cell.rate {
        s += &format!("lambda = {}\nflavor = {:?}\nanneal_epochs = {}\n", r.lambda, r.flavor.name(), r.anneal_epochs);
    }
    s
}

pub fn run(exp: &Experiment) -> anyhow::Result<()> {
    let corpus = exp.corpus()?;
    let cells = exp.cells(&corpus)?;
    let results = pool::run(exp.workers, &cells, |cell| {
        let path = exp.checkpoint_path(cell);
        if exp.resume && checkpoint::load(&path).is_ok() {
            eprintln!("{}: checkpoint found, skipping", cell.id);
            return (cell.id.clone(), Ok(()));
        }
        let r = (|| -> anyhow::Result<()> {
            let dir = exp.cell_dir(cell);
            fs::create_dir_all(&dir)?;
            let tc = exp.cfg.train_config(cell.seed, false);
            let outcome = if cell.is_baseline() {
                let m = Seq2SeqModel::new(cell.arch.clone(), tc.seeds.init)?;
                sgd_train(m, &corpus.train, &corpus.valid, &tc, &Objective::LanguageModel, &[])?
            } else if let Some(kind) = cell.pretrain {
                let p1 = exp.cfg.train_config(cell.seed, true);
                let rate = cell.rate.expect("VAE cells have a rate");
                let out = pretrain_pipeline(kind, &cell.arch, &rate, &p1, &tc, &corpus)?;
                write_csv(&dir.join("epochs_phase1.csv"), &EPOCHS, &epoch_rows(&out.phase1.history))?;
                out.phase2
            } else {
                let m = Seq2SeqModel::new(cell.arch.clone(), tc.seeds.init)?;
                let rate = cell.rate.expect("VAE cells have a rate");
                sgd_train(m, &corpus.train, &corpus.valid, &tc, &Objective::Elbo(rate), &[])?
            };
            write_csv(&dir.join("epochs.csv"), &EPOCHS, &epoch_rows(&outcome.history))?;
            fs::write(dir.join("cell.toml"), describe(cell))?;
            checkpoint::save(&path, &outcome.checkpoint)?;
            eprintln!("{}: best epoch {} of {}", cell.id, outcome.best_epoch, outcome.history.len());
            Ok(())
        })();
        (cell.id.clone(), r)
    });
    summarize("train", results).map(|_| ())
}
