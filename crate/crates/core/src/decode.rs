//! Greedy and beam-search generation from a latent vector.
//!
//! Hypotheses never contain BOS or PAD. EOS ends a hypothesis and is not
//! stored in its token list, but its log-probability is part of the score.
//! A hypothesis that reaches `max_len` tokens without EOS stays unfinished.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::corpus::{LabeledCorpus, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::models::{sample_latent, DecoderState, Seq2SeqModel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens, without BOS and EOS.
    pub tokens: Vec<u32>,
    /// Sum of the chosen per-step log-probabilities (EOS included when finished).
    pub logp: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

fn emittable(tok: usize) -> bool {
    tok != BOS as usize && tok != PAD as usize
}

/// `ceil(1.5 * p99)` of the corpus document lengths.
pub fn default_max_len(corpus: &LabeledCorpus) -> usize {
    let p99 = corpus.length_quantile(0.99).max(1);
    (3 * p99).div_ceil(2)
}

/// Greedy decoding of every row of `z` (`n x d`); ties go to the lowest id.
pub fn greedy_decode_rows(model: &Seq2SeqModel, z: &Tensor, max_len: usize) -> Result<Vec<BeamHypothesis>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let n = z.rows();
    let mut state = model.decoder_start(n)?;
    let mut out = vec![
        BeamHypothesis {
            tokens: Vec::new(),
            logp: 0.0,
            finished: false,
        };
        n
    ];
    let mut prev = vec![BOS; n];
    for _ in 0..max_len {
        if out.iter().all(|h| h.finished) {
            break;
        }
        let (next, lp) = model.decoder_step(&state, Some(z), &prev)?;
        for (i, h) in out.iter_mut().enumerate() {
            if h.finished {
                continue;
            }
            let row = lp.row(i);
            let mut best = EOS as usize;
            for (k, &v) in row.iter().enumerate() {
                if emittable(k) && v > row[best] {
                    best = k;
                }
            }
            // EOS (id 1) is the lowest emittable id, so `>` keeps the lowest on ties.
            h.logp += row[best];
            if best == EOS as usize {
                h.finished = true;
            } else {
                h.tokens.push(best as u32);
                prev[i] = best as u32;
            }
        }
        state = next;
    }
    Ok(out)
}

pub fn greedy_decode(model: &Seq2SeqModel, z: &Tensor, max_len: usize) -> Result<BeamHypothesis> {
    Ok(greedy_decode_rows(model, &z.slice_rows(0, 1), max_len)?.remove(0))
}

/// Higher score first, then the lexicographically smaller sequence (EOS
/// counts as token id 1 at the end of a finished hypothesis).
fn rank(a_score: f64, a_seq: (&[u32], Option<u32>), b_score: f64, b_seq: (&[u32], Option<u32>)) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_seq.0.iter().chain(a_seq.1.iter()).cmp(b_seq.0.iter().chain(b_seq.1.iter())))
}

fn better(a: &BeamHypothesis, b: &BeamHypothesis) -> bool {
    let tail = |h: &BeamHypothesis| h.finished.then_some(EOS);
    rank(a.logp, (&a.tokens, tail(a)), b.logp, (&b.tokens, tail(b))) == Ordering::Less
}

/// Length-unnormalized beam search. Candidates that end in EOS move to a
/// pool of finished hypotheses; the best finished one is returned, or the
/// best unfinished one when nothing finished within `max_len` tokens.
pub fn beam_decode(model: &Seq2SeqModel, z: &Tensor, beam_size: usize, max_len: usize) -> Result<BeamHypothesis> {
    if beam_size == 0 || max_len == 0 {
        return Err(Error::Config("beam_size and max_len must be at least 1".into()));
    }
    let z = z.slice_rows(0, 1);
    let mut live: Vec<BeamHypothesis> = vec![BeamHypothesis {
        tokens: Vec::new(),
        logp: 0.0,
        finished: false,
    }];
    let mut state: DecoderState = model.decoder_start(1)?;
    let mut pool: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let prev: Vec<u32> = live.iter().map(|h| *h.tokens.last().unwrap_or(&BOS)).collect();
        let (next, lp) = model.decoder_step(&state, Some(&z), &prev)?;
        // (score, parent, token)
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * lp.cols());
        for (i, h) in live.iter().enumerate() {
            for (k, &v) in lp.row(i).iter().enumerate() {
                if emittable(k) {
                    cands.push((h.logp + v, i, k));
                }
            }
        }
        // A candidate's sequence is its parent's tokens plus the new id (EOS included).
        cands.sort_by(|a, b| rank(a.0, (&live[a.1].tokens, Some(a.2 as u32)), b.0, (&live[b.1].tokens, Some(b.2 as u32))));
        cands.truncate(beam_size);
        let mut keep_rows = Vec::new();
        let mut next_live = Vec::new();
        for (score, parent, tok) in cands {
            let mut tokens = live[parent].tokens.clone();
            if tok == EOS as usize {
                pool.push(BeamHypothesis {
                    tokens,
                    logp: score,
                    finished: true,
                });
            } else {
                tokens.push(tok as u32);
                next_live.push(BeamHypothesis {
                    tokens,
                    logp: score,
                    finished: false,
                });
                keep_rows.push(parent);
            }
        }
        state = DecoderState {
            h: next.h.select_rows(&keep_rows),
            c: next.c.select_rows(&keep_rows),
        };
        live = next_live;
    }
    let candidates = if pool.is_empty() { &live } else { &pool };
    let mut best = candidates[0].clone();
    for h in &candidates[1..] {
        if better(h, &best) {
            best = h.clone();
        }
    }
    Ok(best)
}

/// Encode, draw one seeded latent sample, decode.
pub fn reconstruct(model: &Seq2SeqModel, doc: &[u32], strategy: Strategy, max_len: usize, seed: u64) -> Result<Vec<u32>> {
    let post = model.posterior(&[doc])?;
    let z = sample_latent(&post, seed);
    Ok(match strategy {
        Strategy::Greedy => greedy_decode(model, &z, max_len)?.tokens,
        Strategy::Beam(b) => beam_decode(model, &z, b, max_len)?.tokens,
    })
}

/// Reconstructions of many documents; document `i` uses the latent seed
/// `derive(seed, i)`. Greedy decoding is batched across documents.
pub fn reconstruct_all<D: AsRef<[u32]>>(
    model: &Seq2SeqModel,
    docs: &[D],
    strategy: Strategy,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    let post = model.posterior(docs)?;
    let d = model.arch.latent_dim;
    let mut z = Tensor::zeros(docs.len(), d);
    for i in 0..docs.len() {
        let zi = sample_latent(&post.row(i), crate::rng::derive(seed, i as u64));
        z.row_mut(i).copy_from_slice(zi.row(0));
    }
    match strategy {
        Strategy::Greedy => Ok(greedy_decode_rows(model, &z, max_len)?
            .into_iter()
            .map(|h| h.tokens)
            .collect()),
        Strategy::Beam(b) => (0..docs.len())
            .map(|i| Ok(beam_decode(model, &z.slice_rows(i, i + 1), b, max_len)?.tokens))
            .collect(),
    }
}

#[cfg(test)]
mod tests;
