//! Encoders, the Gaussian latent head, and decoders of the sequence-to-sequence
//! VAE, plus the unconditional LSTM language model.
//!
//! Batches handed to the tape-level methods are homogeneous in length; the
//! inference helpers group mixed-length inputs internally.

mod checkpoint;
mod lstm;
mod params;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

pub use checkpoint::{ModelCheckpoint, TrainingMeta};
pub use lstm::{LstmState, LstmVars};
pub use params::{Bound, Init, Param, ParamGroup, ParamSet};

use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Floor applied to posterior variances.
pub const SIGMA2_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EncoderKind {
    /// Last LSTM hidden state.
    LstmLast,
    /// Componentwise max over LSTM hidden states.
    LstmMax,
    /// Mean over LSTM hidden states.
    LstmAvg,
    /// Componentwise max over word embeddings, no recurrence.
    BowMax,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 4] = [
        EncoderKind::LstmLast,
        EncoderKind::LstmMax,
        EncoderKind::LstmAvg,
        EncoderKind::BowMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::LstmLast => "lstm-last",
            EncoderKind::LstmMax => "lstm-max",
            EncoderKind::LstmAvg => "lstm-avg",
            EncoderKind::BowMax => "bow-max",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_recurrent(self) -> bool {
        !matches!(self, EncoderKind::BowMax)
    }

    pub fn is_max_pooled(self) -> bool {
        matches!(self, EncoderKind::LstmMax | EncoderKind::BowMax)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DecoderKind {
    /// LSTM decoder fed `[embedding; z]` at every step.
    LstmConditional,
    /// One softmax over the vocabulary from an MLP on `z`, shared by all positions.
    Unigram,
    /// LSTM language model; ignores `z`.
    LstmUnconditional,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [
        DecoderKind::LstmConditional,
        DecoderKind::Unigram,
        DecoderKind::LstmUnconditional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecoderKind::LstmConditional => "lstm",
            DecoderKind::Unigram => "unigram",
            DecoderKind::LstmUnconditional => "lstm-lm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn is_recurrent(self) -> bool {
        !matches!(self, DecoderKind::Unigram)
    }
}

/// Architecture descriptor. `encoder == None` is the plain language model.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub encoder: Option<EncoderKind>,
    pub decoder: DecoderKind,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub unigram_hidden: usize,
    pub dropout: f64,
}

impl Architecture {
    pub fn new(encoder: EncoderKind, decoder: DecoderKind, vocab_size: usize) -> Self {
        Architecture {
            encoder: Some(encoder),
            decoder,
            vocab_size,
            embed_dim: 256,
            hidden_dim: 512,
            latent_dim: 16,
            unigram_hidden: 512,
            dropout: 0.5,
        }
    }

    pub fn language_model(vocab_size: usize) -> Self {
        Architecture {
            encoder: None,
            ..Self::new(EncoderKind::LstmLast, DecoderKind::LstmUnconditional, vocab_size)
        }
    }

    pub fn has_latent(&self) -> bool {
        self.encoder.is_some()
    }

    /// Width of the encoder representation `r`.
    pub fn repr_dim(&self) -> usize {
        match self.encoder {
            Some(EncoderKind::BowMax) => self.embed_dim,
            _ => self.hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= EOS as usize {
            return Err(Error::Config(format!("vocab_size {} too small", self.vocab_size)));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.latent_dim == 0 || self.unigram_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.encoder.is_none() && self.decoder != DecoderKind::LstmUnconditional {
            return Err(Error::Config("a model without encoder must use the lstm-lm decoder".into()));
        }
        Ok(())
    }

    pub fn describe(&self) -> alloc::string::String {
        format!(
            "{}-{}",
            self.encoder.map_or("none", EncoderKind::name),
            self.decoder.name()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LstmIdx {
    wx: usize,
    wh: usize,
    b: usize,
}

impl LstmIdx {
    fn bind(&self, b: &Bound) -> LstmVars {
        LstmVars {
            wx: b.var(self.wx),
            wh: b.var(self.wh),
            b: b.var(self.b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LatentIdx {
    mu_w: usize,
    mu_b: usize,
    lv_w: usize,
    lv_b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum DecoderIdx {
    Lstm {
        embed: usize,
        lstm: LstmIdx,
        wz: Option<usize>,
        out_w: usize,
        out_b: usize,
    },
    Unigram {
        w1: usize,
        w2: usize,
        b: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    enc_embed: Option<usize>,
    enc_lstm: Option<LstmIdx>,
    latent: Option<LatentIdx>,
    dec: DecoderIdx,
}

struct Builder<'a> {
    params: &'a mut ParamSet,
    seed: u64,
}

impl Builder<'_> {
    fn add(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize, init: Init) -> usize {
        let idx = self.params.len() as u64;
        let t = params::init_tensor(rows, cols, init, rng::derive(self.seed, idx));
        self.params.push(name, group, t)
    }

    fn lstm(&mut self, prefix: &str, group: ParamGroup, input: usize, hidden: usize) -> LstmIdx {
        let a = 1.0 / libm::sqrt(hidden as f64);
        LstmIdx {
            wx: self.add(&format!("{prefix}.wx"), group, input, 4 * hidden, Init::Uniform(a)),
            wh: self.add(&format!("{prefix}.wh"), group, hidden, 4 * hidden, Init::Uniform(a)),
            b: self.add(&format!("{prefix}.b"), group, 1, 4 * hidden, Init::Uniform(a)),
        }
    }

    fn linear(&mut self, prefix: &str, group: ParamGroup, input: usize, output: usize) -> (usize, usize) {
        let a = 1.0 / libm::sqrt(input as f64);
        (
            self.add(&format!("{prefix}.w"), group, input, output, Init::Uniform(a)),
            self.add(&format!("{prefix}.b"), group, 1, output, Init::Uniform(a)),
        )
    }
}

fn build(arch: &Architecture, seed: u64) -> (ParamSet, Layout) {
    use ParamGroup::*;
    let mut params = ParamSet::new();
    let mut bld = Builder {
        params: &mut params,
        seed,
    };
    let (v, e, h, d) = (arch.vocab_size, arch.embed_dim, arch.hidden_dim, arch.latent_dim);
    let mut enc_embed = None;
    let mut enc_lstm = None;
    let mut latent = None;
    if let Some(kind) = arch.encoder {
        enc_embed = Some(bld.add("enc.embed", Encoder, v, e, Init::Normal));
        if kind.is_recurrent() {
            enc_lstm = Some(bld.lstm("enc.lstm", Encoder, e, h));
        }
        let r = arch.repr_dim();
        let (mu_w, mu_b) = bld.linear("lat.mu", Latent, r, d);
        let (lv_w, lv_b) = bld.linear("lat.logvar", Latent, r, d);
        latent = Some(LatentIdx { mu_w, mu_b, lv_w, lv_b });
    }
    let dec = match arch.decoder {
        DecoderKind::LstmConditional | DecoderKind::LstmUnconditional => {
            let embed = bld.add("dec.embed", Decoder, v, e, Init::Normal);
            let lstm = bld.lstm("dec.lstm", Decoder, e, h);
            let wz = (arch.decoder == DecoderKind::LstmConditional).then(|| {
                let a = 1.0 / libm::sqrt(h as f64);
                bld.add("dec.lstm.wz", Decoder, d, 4 * h, Init::Uniform(a))
            });
            let (out_w, out_b) = bld.linear("dec.out", Decoder, h, v);
            DecoderIdx::Lstm {
                embed,
                lstm,
                wz,
                out_w,
                out_b,
            }
        }
        DecoderKind::Unigram => {
            let a1 = 1.0 / libm::sqrt(d as f64);
            let w1 = bld.add("dec.uni.w1", Decoder, d, arch.unigram_hidden, Init::Uniform(a1));
            let (w2, b) = bld.linear("dec.uni.out", Decoder, arch.unigram_hidden, v);
            DecoderIdx::Unigram { w1, w2, b }
        }
    };
    (
        params,
        Layout {
            enc_embed,
            enc_lstm,
            latent,
            dec,
        },
    )
}

/// Dropout switch plus a seed stream for the masks of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub train: bool,
    seed: u64,
    calls: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            seed: 0,
            calls: 0,
        }
    }

    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            train: true,
            seed,
            calls: 0,
        }
    }

    pub fn next_seed(&mut self) -> u64 {
        self.calls += 1;
        rng::derive(self.seed, self.calls)
    }
}

/// Diagonal Gaussian posterior, one row per document.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub mu: Tensor,
    pub sigma2: Tensor,
}

impl LatentPosterior {
    pub fn rows(&self) -> usize {
        self.mu.rows()
    }

    pub fn row(&self, i: usize) -> LatentPosterior {
        LatentPosterior {
            mu: self.mu.slice_rows(i, i + 1),
            sigma2: self.sigma2.slice_rows(i, i + 1),
        }
    }
}

/// Tape handles of a posterior.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    pub mu: Var,
    pub sigma2: Var,
}

/// Encoder output on the tape: the pooled representation and the
/// per-position vectors it was pooled from.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub r: Var,
    pub positions: Vec<Var>,
}

/// Reparameterized draw `z = mu + sqrt(sigma2) * eps`, `eps ~ N(0, I)` from `seed`.
pub fn sample_latent(post: &LatentPosterior, seed: u64) -> Tensor {
    let eps = rng::standard_normal(post.mu.rows(), post.mu.cols(), seed);
    let mut z = post.mu.clone();
    for ((zi, s2), e) in z.data_mut().iter_mut().zip(post.sigma2.data()).zip(eps.data()) {
        *zi += libm::sqrt(*s2) * e;
    }
    z
}

/// Tape version of [`sample_latent`] with explicit noise.
pub fn sample_latent_vars(tape: &mut Tape, post: PosteriorVars, eps: Tensor) -> Result<Var> {
    let sigma = tape.sqrt(post.sigma2);
    let e = tape.constant(eps);
    let noise = tape.mul(sigma, e)?;
    tape.add(post.mu, noise)
}

fn check_batch(tokens: &[&[u32]], vocab: usize) -> Result<usize> {
    let Some(first) = tokens.first() else {
        return Err(Error::InsufficientData("empty batch".into()));
    };
    let len = first.len();
    if len == 0 {
        return Err(Error::EmptyDocument);
    }
    for t in tokens {
        if t.len() != len {
            return Err(Error::Contract(format!(
                "batch documents must share one length, got {len} and {}",
                t.len()
            )));
        }
        if let Some(&bad) = t.iter().find(|&&x| x as usize >= vocab) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {vocab}")));
        }
    }
    Ok(len)
}

/// Row ids in time-major order (`t * B + b`).
fn time_major(tokens: &[&[u32]], len: usize, shift_bos: bool) -> Vec<usize> {
    let mut ids = Vec::with_capacity(tokens.len() * (len + 1));
    let steps = if shift_bos { len + 1 } else { len };
    for t in 0..steps {
        for doc in tokens {
            let id = if shift_bos {
                if t == 0 {
                    BOS
                } else {
                    doc[t - 1]
                }
            } else {
                doc[t]
            };
            ids.push(id as usize);
        }
    }
    ids
}

/// Groups indices of `docs` by length, in increasing length order.
pub fn group_by_length<D: AsRef<[u32]>>(docs: &[D]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, d) in docs.iter().enumerate() {
        groups.entry(d.as_ref().len()).or_default().push(i);
    }
    groups
}

/// Incremental decoder state; one row per hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Tensor,
    pub c: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    pub arch: Architecture,
    pub params: ParamSet,
    layout: Layout,
}

impl Seq2SeqModel {
    /// Freshly initialized model.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (params, layout) = build(&arch, seed);
        Ok(Seq2SeqModel { arch, params, layout })
    }

    /// Wraps existing parameters, checking names and shapes against the architecture.
    pub fn from_params(arch: Architecture, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        let (template, layout) = build(&arch, 0);
        params.check_compatible(&template)?;
        Ok(Seq2SeqModel { arch, params, layout })
    }

    /// Redraws every parameter of `group` from the initializer keyed by `seed`.
    pub fn reinit_group(&mut self, group: ParamGroup, seed: u64) {
        let (fresh, _) = build(&self.arch, seed);
        for (p, f) in self.params.iter_mut().zip(fresh.iter()) {
            if p.group == group {
                p.value = f.value.clone();
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    fn latent_idx(&self) -> Result<LatentIdx> {
        self.layout
            .latent
            .ok_or_else(|| Error::Config(format!("model {} has no latent head", self.arch.describe())))
    }

    /// Encoder forward for a length-homogeneous batch.
    pub fn encode_vars(&self, tape: &mut Tape, bound: &Bound, tokens: &[&[u32]]) -> Result<Encoded> {
        let kind = self
            .arch
            .encoder
            .ok_or_else(|| Error::Config("model has no encoder".into()))?;
        let len = check_batch(tokens, self.arch.vocab_size)?;
        let b = tokens.len();
        let embed = bound.var(self.layout.enc_embed.expect("encoder embedding"));
        let ids = time_major(tokens, len, false);
        let emb = tape.gather(embed, &ids)?;
        let positions: Vec<Var> = match self.layout.enc_lstm {
            None => (0..len)
                .map(|t| tape.slice_rows(emb, t * b, (t + 1) * b))
                .collect::<Result<_>>()?,
            Some(idx) => {
                let lstm = idx.bind(bound);
                let proj = lstm.project_input(tape, emb)?;
                let hdim = self.arch.hidden_dim;
                let mut state = LstmState {
                    h: tape.constant(Tensor::zeros(b, hdim)),
                    c: tape.constant(Tensor::zeros(b, hdim)),
                };
                let mut hs = Vec::with_capacity(len);
                for t in 0..len {
                    let p = tape.slice_rows(proj, t * b, (t + 1) * b)?;
                    state = lstm.step_projected(tape, state, p)?;
                    hs.push(state.h);
                }
                hs
            }
        };
        let r = match kind {
            EncoderKind::LstmLast => *positions.last().expect("nonempty"),
            EncoderKind::LstmMax | EncoderKind::BowMax => tape.max_over(&positions)?,
            EncoderKind::LstmAvg => tape.mean_over(&positions)?,
        };
        Ok(Encoded { r, positions })
    }

    /// `mu = L1 r`, `sigma2 = max(exp(L2 r), floor)`.
    pub fn posterior_vars(&self, tape: &mut Tape, bound: &Bound, r: Var) -> Result<PosteriorVars> {
        let idx = self.latent_idx()?;
        let mw = tape.matmul(r, bound.var(idx.mu_w))?;
        let mu = tape.add_row(mw, bound.var(idx.mu_b))?;
        let lw = tape.matmul(r, bound.var(idx.lv_w))?;
        let logvar = tape.add_row(lw, bound.var(idx.lv_b))?;
        let s2 = tape.exp(logvar);
        let sigma2 = tape.clamp_min(s2, SIGMA2_FLOOR);
        Ok(PosteriorVars { mu, sigma2 })
    }

    /// Per-position negative log-likelihoods as a time-major column: `(L+1)B`
    /// rows for recurrent decoders (targets `x_1..x_L, EOS`), `LB` rows for the
    /// unigram decoder.
    pub fn decoder_nll(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Option<Var>,
        tokens: &[&[u32]],
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let len = check_batch(tokens, self.arch.vocab_size)?;
        let b = tokens.len();
        let p = self.arch.dropout;
        match self.layout.dec {
            DecoderIdx::Lstm {
                embed,
                lstm,
                wz,
                out_w,
                out_b,
            } => {
                let zproj = match wz {
                    Some(wz) => {
                        let z = z.ok_or_else(|| Error::Contract("conditional decoder needs z".into()))?;
                        if tape.value(z).rows() != b {
                            return Err(Error::Shape {
                                op: "decoder z",
                                left: tape.value(z).shape(),
                                right: (b, self.arch.latent_dim),
                            });
                        }
                        Some(tape.matmul(z, bound.var(wz))?)
                    }
                    None => None,
                };
                let lstm = lstm.bind(bound);
                let ids = time_major(tokens, len, true);
                let emb = tape.gather(bound.var(embed), &ids)?;
                let emb = tape.dropout(emb, p, ctx.train, ctx.next_seed())?;
                let proj = lstm.project_input(tape, emb)?;
                let hdim = self.arch.hidden_dim;
                let mut state = LstmState {
                    h: tape.constant(Tensor::zeros(b, hdim)),
                    c: tape.constant(Tensor::zeros(b, hdim)),
                };
                let mut hs = Vec::with_capacity(len + 1);
                for t in 0..=len {
                    let mut pt = tape.slice_rows(proj, t * b, (t + 1) * b)?;
                    if let Some(zp) = zproj {
                        pt = tape.add(pt, zp)?;
                    }
                    state = lstm.step_projected(tape, state, pt)?;
                    hs.push(state.h);
                }
                let hcat = tape.concat_rows(&hs)?;
                let hcat = tape.dropout(hcat, p, ctx.train, ctx.next_seed())?;
                let lw = tape.matmul(hcat, bound.var(out_w))?;
                let logits = tape.add_row(lw, bound.var(out_b))?;
                let logp = tape.log_softmax(logits);
                let rows: Vec<usize> = (0..(len + 1) * b).collect();
                let mut targets = Vec::with_capacity(rows.len());
                for t in 0..=len {
                    for doc in tokens {
                        targets.push(if t < len { doc[t] } else { EOS } as usize);
                    }
                }
                let picked = tape.pick(logp, &rows, &targets)?;
                Ok(tape.scale(picked, -1.0))
            }
            DecoderIdx::Unigram { w1, w2, b: bias } => {
                let z = z.ok_or_else(|| Error::Contract("unigram decoder needs z".into()))?;
                let logp = self.unigram_vars(tape, bound, z, ctx, w1, w2, bias)?;
                let mut rows = Vec::with_capacity(len * b);
                let mut cols = Vec::with_capacity(len * b);
                for t in 0..len {
                    for (i, doc) in tokens.iter().enumerate() {
                        rows.push(i);
                        cols.push(doc[t] as usize);
                    }
                }
                let picked = tape.pick(logp, &rows, &cols)?;
                Ok(tape.scale(picked, -1.0))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn unigram_vars(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        ctx: &mut ForwardCtx,
        w1: usize,
        w2: usize,
        bias: usize,
    ) -> Result<Var> {
        let h = tape.matmul(z, bound.var(w1))?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.arch.dropout, ctx.train, ctx.next_seed())?;
        let lw = tape.matmul(h, bound.var(w2))?;
        let logits = tape.add_row(lw, bound.var(bias))?;
        Ok(tape.log_softmax(logits))
    }

    /// Posterior for documents of any lengths; row `i` belongs to `docs[i]`.
    pub fn posterior<D: AsRef<[u32]>>(&self, docs: &[D]) -> Result<LatentPosterior> {
        let d = self.arch.latent_dim;
        let mut mu = Tensor::zeros(docs.len(), d);
        let mut sigma2 = Tensor::zeros(docs.len(), d);
        for (_, idx) in group_by_length(docs) {
            let batch: Vec<&[u32]> = idx.iter().map(|&i| docs[i].as_ref()).collect();
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, |_| false);
            let enc = self.encode_vars(&mut tape, &bound, &batch)?;
            let post = self.posterior_vars(&mut tape, &bound, enc.r)?;
            for (k, &i) in idx.iter().enumerate() {
                mu.row_mut(i).copy_from_slice(tape.value(post.mu).row(k));
                sigma2.row_mut(i).copy_from_slice(tape.value(post.sigma2).row(k));
            }
        }
        Ok(LatentPosterior { mu, sigma2 })
    }

    /// Encoder representation `r` for documents of any lengths.
    pub fn representation<D: AsRef<[u32]>>(&self, docs: &[D]) -> Result<Tensor> {
        let mut out = Tensor::zeros(docs.len(), self.arch.repr_dim());
        for (_, idx) in group_by_length(docs) {
            let batch: Vec<&[u32]> = idx.iter().map(|&i| docs[i].as_ref()).collect();
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, |_| false);
            let enc = self.encode_vars(&mut tape, &bound, &batch)?;
            for (k, &i) in idx.iter().enumerate() {
                out.row_mut(i).copy_from_slice(tape.value(enc.r).row(k));
            }
        }
        Ok(out)
    }

    /// Per-position vectors the encoder pools over (hidden states, or
    /// embeddings for the bag-of-words encoder), for one length-homogeneous
    /// batch: entry `t` is `B x R`.
    pub fn encoder_positions(&self, tokens: &[&[u32]]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let enc = self.encode_vars(&mut tape, &bound, tokens)?;
        Ok(enc.positions.iter().map(|&v| tape.value(v).clone()).collect())
    }

    /// Eval-mode per-position NLL for a length-homogeneous batch, as a
    /// `B x P` matrix (`P = L + 1` for recurrent decoders, `L` for unigram).
    /// `z` has one row per document and is ignored by the language model.
    pub fn nll_matrix(&self, z: Option<&Tensor>, tokens: &[&[u32]]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let zv = z.map(|z| tape.constant(z.clone()));
        let nll = self.decoder_nll(&mut tape, &bound, zv, tokens, &mut ForwardCtx::eval())?;
        let col = tape.value(nll);
        let b = tokens.len();
        let steps = col.rows() / b;
        let mut out = Tensor::zeros(b, steps);
        for t in 0..steps {
            for i in 0..b {
                out.set(i, t, col.get(t * b + i, 0));
            }
        }
        Ok(out)
    }

    /// Teacher-forced per-position log-distributions for one document:
    /// `(L+1) x V` for recurrent decoders (predicting `x_1..x_L, EOS`), and
    /// the single shared `1 x V` row for the unigram decoder.
    pub fn decoder_logits(&self, z: Option<&Tensor>, doc: &[u32]) -> Result<Tensor> {
        if let DecoderIdx::Unigram { .. } = self.layout.dec {
            let z = z.ok_or_else(|| Error::Contract("unigram decoder needs z".into()))?;
            return self.unigram_logits(z);
        }
        let state = self.decoder_start(1)?;
        let mut out = Tensor::zeros(doc.len() + 1, self.arch.vocab_size);
        let mut state = state;
        let mut prev = BOS;
        for t in 0..=doc.len() {
            let (next, lp) = self.decoder_step(&state, z, &[prev])?;
            out.row_mut(t).copy_from_slice(lp.row(0));
            state = next;
            if t < doc.len() {
                prev = doc[t];
            }
        }
        Ok(out)
    }

    /// The unigram decoder's log-distribution over the vocabulary (`1 x V` per row of `z`).
    pub fn unigram_logits(&self, z: &Tensor) -> Result<Tensor> {
        let DecoderIdx::Unigram { w1, w2, b } = self.layout.dec else {
            return Err(Error::Config("model does not have a unigram decoder".into()));
        };
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let zv = tape.constant(z.clone());
        let lp = self.unigram_vars(&mut tape, &bound, zv, &mut ForwardCtx::eval(), w1, w2, b)?;
        Ok(tape.value(lp).clone())
    }

    /// Zero recurrent state for `rows` hypotheses.
    pub fn decoder_start(&self, rows: usize) -> Result<DecoderState> {
        if !self.arch.decoder.is_recurrent() {
            return Err(Error::Config("step-wise decoding needs a recurrent decoder".into()));
        }
        Ok(DecoderState {
            h: Tensor::zeros(rows, self.arch.hidden_dim),
            c: Tensor::zeros(rows, self.arch.hidden_dim),
        })
    }

    /// Feeds `prev` (one token per row) and returns the next state with the
    /// log-distribution over the following token (`rows x V`, eval mode).
    pub fn decoder_step(
        &self,
        state: &DecoderState,
        z: Option<&Tensor>,
        prev: &[u32],
    ) -> Result<(DecoderState, Tensor)> {
        let DecoderIdx::Lstm {
            embed,
            lstm,
            wz,
            out_w,
            out_b,
        } = self.layout.dec
        else {
            return Err(Error::Config("step-wise decoding needs a recurrent decoder".into()));
        };
        let rows = prev.len();
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let ids: Vec<usize> = prev.iter().map(|&t| t as usize).collect();
        let emb = tape.gather(bound.var(embed), &ids)?;
        let lstm = lstm.bind(&bound);
        let mut proj = lstm.project_input(&mut tape, emb)?;
        if let Some(wz) = wz {
            let z = z.ok_or_else(|| Error::Contract("conditional decoder needs z".into()))?;
            let zr = if z.rows() == rows { z.clone() } else { z.repeat_row(0, rows) };
            let zv = tape.constant(zr);
            let zp = tape.matmul(zv, bound.var(wz))?;
            proj = tape.add(proj, zp)?;
        }
        let s = LstmState {
            h: tape.constant(state.h.clone()),
            c: tape.constant(state.c.clone()),
        };
        let next = lstm.step_projected(&mut tape, s, proj)?;
        let lw = tape.matmul(next.h, bound.var(out_w))?;
        let logits = tape.add_row(lw, bound.var(out_b))?;
        let lp = tape.log_softmax(logits);
        Ok((
            DecoderState {
                h: tape.value(next.h).clone(),
                c: tape.value(next.c).clone(),
            },
            tape.value(lp).clone(),
        ))
    }
}

/// Closed-form KL of a diagonal Gaussian posterior against `N(0, I)`,
/// summed over components for each row.
pub fn kl_rows(post: &LatentPosterior) -> Vec<f64> {
    (0..post.rows())
        .map(|i| {
            post.mu
                .row(i)
                .iter()
                .zip(post.sigma2.row(i))
                .map(|(m, s2)| 0.5 * (m * m + s2 - 1.0 - libm::log(*s2)))
                .sum()
        })
        .collect()
}

/// Number of decoder prediction slots for a document of length `len`.
pub fn prediction_slots(decoder: DecoderKind, len: usize) -> usize {
    if decoder.is_recurrent() {
        len + 1
    } else {
        len
    }
}
