use anyhow::bail;

use vaelab_core::decode::reconstruct_all;
use vaelab_core::diagnostics::{corpus_ppl, memorization_metrics};
use vaelab_core::ssl::{agreement_of, bow_reference_classifier, BowConfig, Window};

use super::{num, summarize, Experiment};
use crate::config::Cell;
use crate::pool;
use crate::table::{write_csv, AGREEMENT};

/// Label agreement of reconstructions under a bag-of-words classifier, with
/// the memorization metrics and an approximate perplexity.
pub fn run(exp: &Experiment) -> anyhow::Result<()> {
    let corpus = exp.corpus()?;
    let cells: Vec<Cell> = exp.cells(&corpus)?.into_iter().filter(|c| !c.is_baseline()).collect();
    if cells.is_empty() {
        bail!("agreement: the grid has no VAE cells");
    }
    let a = &exp.cfg.agreement;
    let bow = BowConfig {
        dim: a.bow_dim,
        max_epochs: a.bow_epochs,
        seed: exp.cfg.seeds[0],
        ..BowConfig::default()
    };
    let (reference, ref_f1) = bow_reference_classifier(&corpus.train, &corpus.valid, &corpus.test, Window::All, &bow)?;
    eprintln!("reference classifier test macro-F1 {ref_f1:.4}");
    let docs: Vec<&[u32]> = corpus.test.docs.iter().map(|d| &d.token_ids[..]).collect();
    let golds = corpus.test.label_ids();
    let ppl_docs = &corpus.test.docs[..a.ppl_docs.min(corpus.test.len())];
    let max_len = exp.max_len(&corpus);
    let z_seed = exp.cfg.decode.z_seed;
    let results = pool::run(exp.workers, &cells, |cell| {
        let r = (|| -> anyhow::Result<Vec<String>> {
            let model = exp.load_model(cell, &corpus)?;
            let recon = reconstruct_all(&model, &docs, exp.strategy(), max_len, z_seed)?;
            let agree = agreement_of(&reference, &recon, &golds, corpus.test.num_classes);
            let mem = memorization_metrics(&docs, &recon)?;
            let ppl = corpus_ppl(&model, ppl_docs, a.ppl_samples, z_seed)?;
            Ok(vec![
                cell.id.clone(),
                num(agree),
                num(mem.first_word_acc),
                num(mem.mid_word_acc),
                num(mem.length_match),
                num(ppl.ppl),
            ])
        })();
        (cell.id.clone(), r)
    });
    let rows: Vec<Vec<String>> = summarize("agreement", results)?.into_iter().map(|(_, r)| r).collect();
    write_csv(&exp.dir.join("agreement.csv"), &AGREEMENT, &rows)
}
