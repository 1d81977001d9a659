use super::*;
use crate::models::{Architecture, DecoderKind, EncoderKind, ParamGroup};
use crate::objectives::{sgd_train, Objective, Seeds, TrainConfig};
use crate::rng;
use proptest::prelude::{prop_assert, proptest};

fn model(vocab: usize, seed: u64) -> Seq2SeqModel {
    let arch = Architecture {
        embed_dim: 3,
        hidden_dim: 5,
        latent_dim: 2,
        dropout: 0.0,
        ..Architecture::new(EncoderKind::LstmLast, DecoderKind::LstmConditional, vocab)
    };
    let mut m = Seq2SeqModel::new(arch, seed).unwrap();
    // Sharpen the output layer so that decisions are not all near-uniform.
    let i = m.params.find("dec.out.w").unwrap();
    m.params.value_mut(i).scale_in_place(4.0);
    m
}

fn set_eos_bias(m: &mut Seq2SeqModel, bias: f64) {
    let i = m.params.find("dec.out.b").unwrap();
    m.params.value_mut(i).set(0, EOS as usize, bias);
}

fn latent(seed: u64) -> Tensor {
    rng::standard_normal(1, 2, seed).map(|x| 2.0 * x)
}

/// Teacher-forced score of `tokens`, with the EOS term when `finished`.
fn score(m: &Seq2SeqModel, z: &Tensor, tokens: &[u32], finished: bool) -> f64 {
    let lp = m.decoder_logits(Some(z), tokens).unwrap();
    let mut s = 0.0;
    for (t, &k) in tokens.iter().enumerate() {
        s += lp.get(t, k as usize);
    }
    if finished {
        s += lp.get(tokens.len(), EOS as usize);
    }
    s
}

/// Best finished sequence of at most `max_len - 1` tokens, ties to the
/// lexicographically smaller sequence.
fn exhaustive(m: &Seq2SeqModel, z: &Tensor, max_len: usize) -> BeamHypothesis {
    let alphabet: Vec<u32> = (0..m.arch.vocab_size as u32)
        .filter(|&k| k != BOS && k != PAD && k != EOS)
        .collect();
    let mut best: Option<BeamHypothesis> = None;
    let mut frontier: Vec<Vec<u32>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            let h = BeamHypothesis {
                tokens: seq.clone(),
                logp: score(m, z, seq, true),
                finished: true,
            };
            if best.as_ref().is_none_or(|b| better(&h, b)) {
                best = Some(h);
            }
            for &k in &alphabet {
                let mut s = seq.clone();
                s.push(k);
                next.push(s);
            }
        }
        frontier = next;
    }
    best.unwrap()
}

#[test]
fn uniform_decoder_stops_on_the_lowest_id() {
    let mut m = model(7, 1);
    for p in m.params.iter_mut().filter(|p| p.group == ParamGroup::Decoder) {
        p.value = Tensor::zeros(p.value.rows(), p.value.cols());
    }
    let h = greedy_decode(&m, &latent(1), 10).unwrap();
    // EOS is the lowest id that may be emitted.
    assert!(h.tokens.is_empty() && h.finished);
    assert!((h.logp + libm::log(7.0)).abs() < 1e-15);
}

#[test]
fn certain_eos_gives_an_empty_sequence() {
    let mut m = model(7, 2);
    set_eos_bias(&mut m, 1e4);
    let h = greedy_decode(&m, &latent(2), 10).unwrap();
    assert_eq!(h.tokens, Vec::<u32>::new());
    assert!(h.finished);
    assert_eq!(beam_decode(&m, &latent(2), 3, 10).unwrap(), h);
}

#[test]
fn unfinished_at_max_len_without_eos() {
    let mut m = model(7, 3);
    set_eos_bias(&mut m, -1e4);
    let h = greedy_decode(&m, &latent(3), 4).unwrap();
    assert_eq!(h.tokens.len(), 4);
    assert!(!h.finished);
    let b = beam_decode(&m, &latent(3), 4, 4).unwrap();
    assert!(!b.finished);
    assert!(b.logp >= h.logp);
}

#[test]
fn beam_of_one_is_greedy() {
    let m = model(9, 4);
    for s in 0..100 {
        let z = latent(s);
        let g = greedy_decode(&m, &z, 12).unwrap();
        let b = beam_decode(&m, &z, 1, 12).unwrap();
        assert_eq!(g, b, "latent {s}");
        assert!((g.logp - score(&m, &z, &g.tokens, g.finished)).abs() < 1e-12);
    }
}

#[test]
fn batched_greedy_matches_single_rows() {
    let m = model(9, 5);
    let z = rng::standard_normal(6, 2, 8);
    let rows = greedy_decode_rows(&m, &z, 10).unwrap();
    for (i, h) in rows.iter().enumerate() {
        assert_eq!(h, &greedy_decode(&m, &z.slice_rows(i, i + 1), 10).unwrap());
    }
}

#[test]
fn wide_beam_is_exhaustive_search() {
    for (vocab, seed) in [(5, 6), (8, 7)] {
        let m = model(vocab, seed);
        let max_len = 4;
        let content = vocab - 3;
        let width = content.pow(max_len as u32) + 1;
        for s in 0..10 {
            let z = latent(100 + s);
            let want = exhaustive(&m, &z, max_len);
            let got = beam_decode(&m, &z, width, max_len).unwrap();
            assert_eq!(got.tokens, want.tokens, "vocab {vocab} latent {s}");
            assert!((got.logp - want.logp).abs() < 1e-12);
            let g = greedy_decode(&m, &z, max_len).unwrap();
            if g.finished {
                assert!(g.logp <= got.logp);
            }
        }
    }
}

#[test]
fn beam_finds_what_greedy_misses() {
    let m = model(8, 11);
    let mut witnessed = false;
    for s in 0..100 {
        let z = latent(s);
        let g = greedy_decode(&m, &z, 4).unwrap();
        let best = exhaustive(&m, &z, 4);
        if g.finished && best.logp > g.logp + 1e-9 {
            witnessed = true;
            let b = beam_decode(&m, &z, 200, 4).unwrap();
            assert_eq!(b.tokens, best.tokens);
        }
    }
    assert!(witnessed, "no latent where greedy is suboptimal");
}

#[test]
fn beam_score_grows_with_width() {
    let m = model(9, 12);
    let mut checked = 0;
    for s in 0..100 {
        let z = latent(s);
        let scores: Vec<(bool, f64)> = (1..=8)
            .map(|b| {
                let h = beam_decode(&m, &z, b, 10).unwrap();
                (h.finished, h.logp)
            })
            .collect();
        for w in scores.windows(2) {
            if w[0].0 == w[1].0 {
                assert!(w[1].1 >= w[0].1 - 1e-12, "latent {s}: {scores:?}");
                checked += 1;
            }
        }
    }
    assert!(checked > 500);
}

proptest! {
    #[test]
    fn outputs_never_contain_reserved_tokens(seed in 0u64..500, beam in 1usize..5, z in proptest::collection::vec(-3.0f64..3.0, 2)) {
        let mut m = model(7, seed);
        // Make BOS and PAD attractive; they must still never be emitted.
        let i = m.params.find("dec.out.b").unwrap();
        m.params.value_mut(i).set(0, BOS as usize, 5.0);
        m.params.value_mut(i).set(0, PAD as usize, 5.0);
        let z = Tensor::row_vector(z);
        for h in [greedy_decode(&m, &z, 8).unwrap(), beam_decode(&m, &z, beam, 8).unwrap()] {
            prop_assert!(h.tokens.iter().all(|&t| t != BOS && t != PAD && t != EOS));
            prop_assert!(h.tokens.len() <= 8);
        }
    }
}

#[test]
fn reconstruction_is_seeded() {
    let m = model(9, 13);
    let doc = [4u32, 5, 6, 7];
    let a = reconstruct(&m, &doc, Strategy::Beam(3), 10, 5).unwrap();
    assert_eq!(a, reconstruct(&m, &doc, Strategy::Beam(3), 10, 5).unwrap());
    let all = reconstruct_all(&m, &[&doc[..], &doc[..2]], Strategy::Greedy, 10, 5).unwrap();
    assert_eq!(all, reconstruct_all(&m, &[&doc[..], &doc[..2]], Strategy::Greedy, 10, 5).unwrap());
}

#[test]
fn unigram_models_cannot_decode_step_by_step() {
    let arch = Architecture {
        embed_dim: 3,
        hidden_dim: 4,
        latent_dim: 2,
        unigram_hidden: 4,
        ..Architecture::new(EncoderKind::BowMax, DecoderKind::Unigram, 7)
    };
    let m = Seq2SeqModel::new(arch, 1).unwrap();
    assert!(matches!(greedy_decode(&m, &latent(1), 3), Err(Error::Config(_))));
}

#[test]
fn overfit_autoencoder_reconstructs_its_training_set() {
    use crate::corpus::{Document, LabeledCorpus, Split, Vocabulary};
    use alloc::sync::Arc;
    let words: Vec<alloc::string::String> = (0..6).map(|i| alloc::format!("w{i}")).collect();
    let vocab = Arc::new(Vocabulary::from_tokens(&words).unwrap());
    let raw: [&[u32]; 5] = [&[4, 5, 6], &[7, 8, 9, 4], &[9, 9, 5], &[6, 4, 8, 7, 5], &[8, 6]];
    let docs: Vec<Document> = raw.iter().map(|d| Document::new(d.to_vec(), 0).unwrap()).collect();
    let labels = Arc::new(vec!["a".into(), "b".into()]);
    let corpus = LabeledCorpus::new(docs, labels, vocab.clone(), Split::Train).unwrap();
    let arch = Architecture {
        embed_dim: 8,
        hidden_dim: 24,
        latent_dim: 4,
        dropout: 0.0,
        ..Architecture::new(EncoderKind::LstmLast, DecoderKind::LstmConditional, vocab.len())
    };
    let cfg = TrainConfig {
        lr: 1.0,
        batch_size: 5,
        patience: 100,
        max_halvings: 8,
        max_epochs: 3000,
        seeds: Seeds::from_one(3),
        ..TrainConfig::default()
    };
    let m = Seq2SeqModel::new(arch, 3).unwrap();
    let out = sgd_train(m, &corpus, &corpus, &cfg, &Objective::Autoencoder, &[]).unwrap();
    let tokens: usize = raw.iter().map(|d| d.len() + 1).sum();
    let per_token = out.best().valid.distortion * 5.0 / tokens as f64;
    assert!(per_token < 0.01, "distortion {per_token} nats/token after {} epochs", out.history.len());
    let m = out.model().unwrap();
    let post = m.posterior(&raw).unwrap();
    for (i, d) in raw.iter().enumerate() {
        let h = greedy_decode(&m, &post.mu.slice_rows(i, i + 1), 10).unwrap();
        assert_eq!(&h.tokens[..], *d);
    }
}
