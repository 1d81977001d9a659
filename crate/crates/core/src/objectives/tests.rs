use super::*;
use crate::corpus::{synth_corpus, CorpusSplits, MarkerPosition, SynthSpec};
use crate::models::{Architecture, DecoderKind, EncoderKind, ParamGroup};
use alloc::vec;
use proptest::prelude::*;

fn post(mu: &[f64], sigma2: &[f64]) -> LatentPosterior {
    LatentPosterior {
        mu: Tensor::row_vector(mu.to_vec()),
        sigma2: Tensor::row_vector(sigma2.to_vec()),
    }
}

#[test]
fn kl_closed_form_examples() {
    assert_eq!(kl_diag_gauss(&post(&[0.0, 0.0], &[1.0, 1.0])).total, 0.0);
    let kl = kl_diag_gauss(&post(&[1.0, 0.0], &[1.0, 1.0]));
    assert_eq!(kl.total, 0.5);
    assert_eq!(kl.components, vec![0.5, 0.0]);
}

#[test]
fn kl_matches_monte_carlo() {
    let p = post(&[0.4, -1.3, 0.0], &[0.3, 1.7, 0.05]);
    let exact = kl_diag_gauss(&p).total;
    let n = 1_000_000;
    let eps = rng::standard_normal(n, 3, 99);
    let (mut sum, mut sum2) = (0.0, 0.0);
    for i in 0..n {
        // log q(z) - log p(z) at z = mu + sigma * eps
        let mut d = 0.0;
        for j in 0..3 {
            let s2 = p.sigma2.get(0, j);
            let e = eps.get(i, j);
            let z = p.mu.get(0, j) + libm::sqrt(s2) * e;
            d += -0.5 * libm::log(s2) - 0.5 * e * e + 0.5 * z * z;
        }
        sum += d;
        sum2 += d * d;
    }
    let mean = sum / n as f64;
    let se = libm::sqrt((sum2 / n as f64 - mean * mean) / n as f64);
    assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
}

#[test]
fn free_bits_examples() {
    let d = RateConfig::delta(8.0);
    assert_eq!(apply_free_bits(3.1, &[3.1], &d, 1).unwrap(), 8.0);
    assert_eq!(apply_free_bits(9.4, &[9.4], &d, 1).unwrap(), 9.4);
    let pc = RateConfig::per_component(2.0);
    assert_eq!(apply_free_bits(1.0, &[0.1, 0.9], &pc, 1).unwrap(), 2.0);
    assert_eq!(apply_free_bits(1.0, &[0.1, 0.9], &RateConfig::plain(), 1).unwrap(), 1.0);
    assert!(matches!(
        apply_free_bits(1.0, &[0.1, 0.1], &d, 1),
        Err(Error::Contract(_))
    ));
}

#[test]
fn annealing_weight_ramps_linearly() {
    let cfg = RateConfig {
        anneal_epochs: 10,
        ..RateConfig::delta(4.0)
    };
    assert_eq!(cfg.beta(1), 0.1);
    assert_eq!(cfg.beta(10), 1.0);
    assert_eq!(cfg.beta(25), 1.0);
    assert_eq!(RateConfig::plain().beta(1), 1.0);
    assert!((apply_free_bits(2.0, &[2.0], &cfg, 5).unwrap() - 2.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn free_bits_output_is_at_least_lambda(
        comps in proptest::collection::vec(0.0f64..20.0, 1..8),
        lambda in 0.0f64..30.0,
    ) {
        let total: f64 = comps.iter().sum();
        let d = apply_free_bits(total, &comps, &RateConfig::delta(lambda), 1).unwrap();
        let pc = apply_free_bits(total, &comps, &RateConfig::per_component(lambda), 1).unwrap();
        prop_assert!(d >= lambda);
        prop_assert!(pc >= lambda * (1.0 - 1e-12));
        prop_assert!(pc >= total - 1e-12);
    }

    #[test]
    fn tape_free_bits_agree_with_scalar_version(
        comps in proptest::collection::vec(0.0f64..5.0, 1..6),
        lambda in 0.0f64..10.0,
        flavor in 0usize..3,
        epoch in 1usize..6,
    ) {
        let cfg = RateConfig {
            lambda,
            flavor: [FreeBitsFlavor::None, FreeBitsFlavor::Delta, FreeBitsFlavor::PerComponent][flavor],
            anneal_epochs: 4,
        };
        let total: f64 = comps.iter().sum();
        let want = apply_free_bits(total, &comps, &cfg, epoch).unwrap();
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::row_vector(comps.clone()));
        let got = free_bits_vars(&mut tape, c, &cfg, epoch);
        prop_assert!((tape.value(got).item() - want).abs() < 1e-12);
    }
}

fn tiny_arch(encoder: EncoderKind, decoder: DecoderKind, vocab: usize) -> Architecture {
    Architecture {
        embed_dim: 3,
        hidden_dim: 4,
        latent_dim: 2,
        unigram_hidden: 5,
        dropout: 0.2,
        ..Architecture::new(encoder, decoder, vocab)
    }
}

#[test]
fn objective_is_distortion_when_posterior_is_prior() {
    let mut m = Seq2SeqModel::new(tiny_arch(EncoderKind::LstmLast, DecoderKind::LstmConditional, 8), 3).unwrap();
    for p in m.params.iter_mut().filter(|p| p.group == ParamGroup::Latent) {
        p.value = Tensor::zeros(p.value.rows(), p.value.cols());
    }
    let docs: [&[u32]; 2] = [&[4, 5, 6], &[7, 7, 4]];
    let r = elbo_loss(&m, &docs, &RateConfig::delta(0.0), 1, 11).unwrap();
    assert_eq!(r.rate, 0.0);
    assert_eq!(r.objective, r.distortion);
}

/// Gradients of the latent-head parameters under `objective`, with fixed noise.
fn latent_grads(m: &Seq2SeqModel, docs: &[&[u32]], objective: &Objective) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, |_| true);
    let eps = rng::standard_normal(docs.len(), m.arch.latent_dim, 4);
    let (loss, _) = batch_objective(m, &mut tape, &bound, docs, objective, 1, Some(eps), &mut ForwardCtx::eval()).unwrap();
    let grads = tape.backward(loss).unwrap();
    m.params
        .iter()
        .zip(bound.vars())
        .filter(|(p, _)| p.group == ParamGroup::Latent)
        .map(|(_, &v)| grads.get(v).unwrap().clone())
        .collect()
}

#[test]
fn active_clamp_blocks_the_kl_gradient() {
    let m = Seq2SeqModel::new(tiny_arch(EncoderKind::LstmMax, DecoderKind::LstmConditional, 8), 5).unwrap();
    let docs: [&[u32]; 3] = [&[4, 5, 6], &[7, 7, 4], &[5, 6, 7]];
    let clamped = latent_grads(&m, &docs, &Objective::Elbo(RateConfig::delta(1e6)));
    let recon = latent_grads(&m, &docs, &Objective::Reconstruction);
    assert_eq!(clamped, recon);
    let open = latent_grads(&m, &docs, &Objective::Elbo(RateConfig::delta(0.0)));
    assert_ne!(open, recon);

    let pc = latent_grads(&m, &docs, &Objective::Elbo(RateConfig::per_component(1e6)));
    assert_eq!(pc, recon);
}

#[test]
fn batch_objective_matches_per_document_loop() {
    for (enc, dec) in [
        (EncoderKind::LstmAvg, DecoderKind::LstmConditional),
        (EncoderKind::BowMax, DecoderKind::Unigram),
    ] {
        let m = Seq2SeqModel::new(tiny_arch(enc, dec, 9), 8).unwrap();
        let docs: [&[u32]; 3] = [&[4, 5, 6, 8], &[7, 7, 4, 4], &[5, 6, 7, 8]];
        let cfg = RateConfig {
            anneal_epochs: 3,
            ..RateConfig::per_component(1.5)
        };
        let eps = rng::standard_normal(3, 2, 12);
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, |_| false);
        let (_, batched) = batch_objective(
            &m,
            &mut tape,
            &bound,
            &docs,
            &Objective::Elbo(cfg),
            2,
            Some(eps.clone()),
            &mut ForwardCtx::eval(),
        )
        .unwrap();

        let (mut rate, mut dist) = (0.0, 0.0);
        let mut comps = vec![0.0; 2];
        for (i, doc) in docs.iter().enumerate() {
            let p = m.posterior(&[*doc]).unwrap();
            let kl = kl_diag_gauss(&p);
            rate += kl.total / 3.0;
            for (c, k) in comps.iter_mut().zip(&kl.components) {
                *c += k / 3.0;
            }
            let mut z = p.mu.clone();
            for j in 0..2 {
                z.set(0, j, p.mu.get(0, j) + libm::sqrt(p.sigma2.get(0, j)) * eps.get(i, j));
            }
            dist += m.nll_matrix(Some(&z), &[*doc]).unwrap().sum() / 3.0;
        }
        let objective = apply_free_bits(comps.iter().sum(), &comps, &cfg, 2).unwrap() + dist;
        assert!((batched.rate - rate).abs() < 1e-10);
        assert!((batched.distortion - dist).abs() < 1e-10);
        assert!((batched.objective - objective).abs() < 1e-10);
    }
}

#[test]
fn sampled_objectives_need_noise() {
    let m = Seq2SeqModel::new(tiny_arch(EncoderKind::LstmLast, DecoderKind::LstmConditional, 8), 3).unwrap();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, |_| true);
    let r = batch_objective(&m, &mut tape, &bound, &[&[4]], &Objective::Reconstruction, 1, None, &mut ForwardCtx::eval());
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn clipping_scales_to_the_threshold() {
    assert!((clip_factor(50.0, 5.0) - 0.1).abs() < 1e-16);
    assert_eq!(clip_factor(4.0, 5.0), 1.0);
}

fn small_corpus(seed: u64) -> CorpusSplits {
    let spec = SynthSpec {
        num_classes: 2,
        vocab_size: 12,
        doc_len_range: (3, 5),
        marker_position: MarkerPosition::Fixed(0),
        num_train: 48,
        num_valid: 16,
        num_test: 16,
        ..SynthSpec::default()
    };
    synth_corpus(&spec, seed).unwrap()
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: 3,
        seeds: Seeds::from_one(seed),
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let data = small_corpus(1);
    let v = data.vocab().len();
    let m = Seq2SeqModel::new(tiny_arch(EncoderKind::LstmLast, DecoderKind::LstmConditional, v), 2).unwrap();
    let cfg = TrainConfig {
        lr: 0.0,
        ..quick_cfg(3)
    };
    let out = sgd_train(m.clone(), &data.train, &data.valid, &cfg, &Objective::Elbo(RateConfig::plain()), &[]).unwrap();
    assert_eq!(out.checkpoint.params, m.params);
    assert_eq!(out.history.len(), 3);
}

#[test]
fn training_is_bitwise_reproducible() {
    let data = small_corpus(4);
    let v = data.vocab().len();
    let run = || {
        let m = Seq2SeqModel::new(tiny_arch(EncoderKind::LstmMax, DecoderKind::LstmConditional, v), 7).unwrap();
        sgd_train(m, &data.train, &data.valid, &quick_cfg(9), &Objective::Elbo(RateConfig::delta(1.0)), &[]).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let first = a.history[0].train.objective;
    assert!(a.best().valid.objective < first, "training made no progress");
}

#[test]
fn halving_schedule_follows_validation() {
    let mut s = HalvingSchedule::new(&TrainConfig::default());
    let script = [5.0, 4.0, 4.5, 4.2, 3.9, 4.0, 4.0, 3.95, 3.9, 3.9, 3.9, 3.9];
    let mut lrs = Vec::new();
    let mut stopped_at = None;
    for (i, v) in script.iter().enumerate() {
        let step = s.observe(*v);
        lrs.push(s.lr);
        if step.stop {
            stopped_at = Some(i + 1);
            break;
        }
    }
    // Halvings after epochs 4, 7, 9 and 11; the fourth ends training.
    assert_eq!(lrs, vec![0.5, 0.5, 0.5, 0.25, 0.25, 0.25, 0.125, 0.125, 0.0625, 0.0625, 0.03125]);
    assert_eq!(stopped_at, Some(11));
    assert_eq!(s.best_epoch, 5);
    assert_eq!(s.best, 3.9);
}

#[test]
fn training_returns_the_best_epoch() {
    let data = small_corpus(4);
    let v = data.vocab().len();
    let m = Seq2SeqModel::new(tiny_arch(EncoderKind::BowMax, DecoderKind::Unigram, v), 7).unwrap();
    let cfg = TrainConfig {
        max_epochs: 6,
        ..quick_cfg(2)
    };
    let out = sgd_train(m, &data.train, &data.valid, &cfg, &Objective::Elbo(RateConfig::plain()), &[]).unwrap();
    let best = out.best().valid.objective;
    assert!(out.history.iter().all(|r| r.valid.objective >= best));
    assert_eq!(out.checkpoint.meta.epoch, out.best_epoch);
    let again = crate::objectives::train::evaluate(
        &out.model().unwrap(),
        &data.valid,
        &Objective::Elbo(RateConfig::plain()),
        out.best_epoch,
        cfg.batch_size,
        rng::derive(cfg.seeds.sample, 0x7661_6c69_64),
    )
    .unwrap();
    assert_eq!(again.objective, best);
}

#[test]
fn divergence_is_reported() {
    let data = small_corpus(4);
    let v = data.vocab().len();
    let m = Seq2SeqModel::new(tiny_arch(EncoderKind::BowMax, DecoderKind::Unigram, v), 7).unwrap();
    let cfg = TrainConfig {
        lr: 1e306,
        ..quick_cfg(2)
    };
    let r = sgd_train(m, &data.train, &data.valid, &cfg, &Objective::Elbo(RateConfig::plain()), &[]);
    assert!(matches!(r, Err(Error::Divergence { .. })), "{r:?}");
}

#[test]
fn frozen_groups_do_not_move() {
    let data = small_corpus(5);
    let v = data.vocab().len();
    let m = Seq2SeqModel::new(tiny_arch(EncoderKind::LstmAvg, DecoderKind::LstmConditional, v), 1).unwrap();
    let out = sgd_train(
        m.clone(),
        &data.train,
        &data.valid,
        &quick_cfg(1),
        &Objective::Elbo(RateConfig::plain()),
        &[ParamGroup::Encoder, ParamGroup::Latent],
    )
    .unwrap();
    let p = &out.checkpoint.params;
    assert_eq!(p.checksum(Some(ParamGroup::Encoder)), m.params.checksum(Some(ParamGroup::Encoder)));
    assert_eq!(p.checksum(Some(ParamGroup::Latent)), m.params.checksum(Some(ParamGroup::Latent)));
    assert_ne!(p.checksum(Some(ParamGroup::Decoder)), m.params.checksum(Some(ParamGroup::Decoder)));
}

#[test]
fn batches_are_length_homogeneous_and_cover_the_corpus() {
    let data = small_corpus(6);
    let batches = make_batches(&data.train.docs, 5, 3);
    let mut seen: Vec<usize> = batches.iter().flatten().cloned().collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..data.train.len()).collect::<Vec<_>>());
    for b in &batches {
        assert!(b.len() <= 5);
        let len = data.train.docs[b[0]].len();
        assert!(b.iter().all(|&i| data.train.docs[i].len() == len));
    }
    assert_eq!(batches, make_batches(&data.train.docs, 5, 3));
    assert_ne!(batches, make_batches(&data.train.docs, 5, 4));
}

fn pipeline_cfgs() -> (TrainConfig, TrainConfig) {
    let mut a = quick_cfg(1);
    a.max_epochs = 2;
    let mut b = quick_cfg(2);
    b.max_epochs = 2;
    (a, b)
}

#[test]
fn pre_ae_resets_the_decoder() {
    let data = small_corpus(7);
    let arch = tiny_arch(EncoderKind::LstmLast, DecoderKind::LstmConditional, data.vocab().len());
    let (c1, c2) = pipeline_cfgs();
    let out = pretrain_pipeline(PretrainKind::PreAe, &arch, &RateConfig::delta(1.0), &c1, &c2, &data).unwrap();
    let p1 = &out.phase1.checkpoint.params;
    let mut reset = out.phase1.model().unwrap();
    reset.reinit_group(ParamGroup::Decoder, c2.seeds.init);
    assert_ne!(
        reset.params.checksum(Some(ParamGroup::Decoder)),
        p1.checksum(Some(ParamGroup::Decoder))
    );
    assert_eq!(
        reset.params.checksum(Some(ParamGroup::Encoder)),
        p1.checksum(Some(ParamGroup::Encoder))
    );
    // The reset decoder is the fresh initializer's draw, not the phase-1 weights.
    let fresh = Seq2SeqModel::new(arch.clone(), c2.seeds.init).unwrap();
    assert_eq!(
        reset.params.checksum(Some(ParamGroup::Decoder)),
        fresh.params.checksum(Some(ParamGroup::Decoder))
    );
    assert_eq!(out.phase1.history[0].train.rate > 0.0, true);
    assert_eq!(out.phase1.checkpoint.meta.rate, None);
}

#[test]
fn pre_lm_keeps_the_language_model_frozen() {
    let data = small_corpus(8);
    let arch = tiny_arch(EncoderKind::LstmAvg, DecoderKind::LstmConditional, data.vocab().len());
    let (c1, c2) = pipeline_cfgs();
    let out = pretrain_pipeline(PretrainKind::PreLm, &arch, &RateConfig::delta(1.0), &c1, &c2, &data).unwrap();
    let lm = &out.phase1.checkpoint.params;
    let vae = &out.phase2.checkpoint.params;
    for (from, to) in [
        ("dec.embed", "enc.embed"),
        ("dec.lstm.wx", "enc.lstm.wx"),
        ("dec.lstm.wh", "enc.lstm.wh"),
        ("dec.lstm.b", "enc.lstm.b"),
    ] {
        assert_eq!(lm.value(lm.find(from).unwrap()), vae.value(vae.find(to).unwrap()));
    }

    let wrong = tiny_arch(EncoderKind::LstmLast, DecoderKind::LstmConditional, data.vocab().len());
    assert!(matches!(
        pretrain_pipeline(PretrainKind::PreLm, &wrong, &RateConfig::plain(), &c1, &c2, &data),
        Err(Error::Config(_))
    ));
}

#[test]
fn pre_uni_phase_two_keeps_the_rate() {
    let data = small_corpus(9);
    let arch = tiny_arch(EncoderKind::BowMax, DecoderKind::LstmConditional, data.vocab().len());
    let (c1, c2) = pipeline_cfgs();
    let out = pretrain_pipeline(PretrainKind::PreUni, &arch, &RateConfig::delta(1.0), &c1, &c2, &data).unwrap();
    let phase1_rate = out.phase1.best().valid.rate;
    for rec in &out.phase2.history {
        assert!((rec.valid.rate - phase1_rate).abs() < 1e-12, "{} vs {phase1_rate}", rec.valid.rate);
    }
    // Independent recomputation with the frozen encoder.
    let post = out.phase2.model().unwrap().posterior(&data.valid.docs.iter().map(|d| d.token_ids.clone()).collect::<Vec<_>>()).unwrap();
    let kl: f64 = crate::models::kl_rows(&post).iter().sum::<f64>() / data.valid.len() as f64;
    assert!((kl - phase1_rate).abs() < 1e-12);

    let unigram_final = Architecture {
        decoder: DecoderKind::Unigram,
        ..arch
    };
    assert!(matches!(
        pretrain_pipeline(PretrainKind::PreUni, &unigram_final, &RateConfig::plain(), &c1, &c2, &data),
        Err(Error::Config(_))
    ));
}
