//! Character-level encoder-decoder with NVIB denoising self-attention in the
//! topmost encoder layers.
//!
//! Layers are post-norm (`LN(x + sublayer(x))`) with a single attention head
//! and fixed sinusoidal positions. An NVIB layer projects its input vectors
//! to DP parameters, replaces self-attention by denoising attention and keeps
//! the output projection, residual, normalisation and feed-forward block of a
//! standard layer. Vectors pruned in the final encoder layer are removed from
//! the decoder's cross-attention memory.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{DpVars, Graph, ParamId, ParamStore, ProjVars, Var};
use crate::matrix::Matrix;
use crate::nvib::DpParams;
use crate::real::Real;
use crate::tokenizer::{BOS, EOS};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// NVIB layers, placed at the top of the encoder.
    pub n_nvib_layers: usize,
    /// Model width.
    pub p: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Pseudo-counts at or below this value are pruned.
    pub alpha_threshold: f64,
    /// Initial standard deviation of the NVIB components, `exp(b_sigma)`.
    pub init_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_enc_layers: 6,
            n_dec_layers: 2,
            n_nvib_layers: 3,
            p: 64,
            d_ff: 256,
            n_heads: 1,
            dropout: 0.1,
            vocab_size: 100,
            alpha_threshold: crate::nvib::DEFAULT_ALPHA_THRESHOLD,
            init_sigma: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_nvib_layers > self.n_enc_layers {
            return bad("n_nvib_layers exceeds n_enc_layers");
        }
        if self.n_heads != 1 {
            return bad("only a single attention head is supported");
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 {
            return bad("encoder and decoder need at least one layer");
        }
        if self.p == 0 || self.d_ff == 0 {
            return bad("widths must be positive");
        }
        if self.vocab_size <= crate::tokenizer::N_SPECIALS {
            return bad("vocabulary has no data characters");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.alpha_threshold >= 0.0) {
            return bad("alpha_threshold must be non-negative");
        }
        if !(self.init_sigma > 0.0) {
            return bad("init_sigma must be positive");
        }
        Ok(())
    }

    /// Index of the lowest NVIB layer, if any.
    pub fn first_nvib_layer(&self) -> Option<usize> {
        (self.n_nvib_layers > 0).then(|| self.n_enc_layers - self.n_nvib_layers)
    }

    pub fn is_nvib_layer(&self, layer: usize) -> bool {
        self.first_nvib_layer()
            .is_some_and(|f| layer >= f && layer < self.n_enc_layers)
    }
}

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// Sampled denoising attention, dropout active.
    Train,
    /// Posterior-mean denoising attention with thresholding, no dropout.
    Eval,
}

/// Per-layer record for analysis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<T> {
    pub layer: usize,
    pub nvib: bool,
    pub mode: Mode,
    /// `n x (n+1)` for NVIB layers (prior column last), `n x n` otherwise.
    pub weights: Matrix<T>,
    /// `n + 1` pseudo-counts (prior last) for NVIB layers, empty otherwise.
    pub alpha: Vec<T>,
    /// Retained flags of the `n` data vectors.
    pub retained: Vec<bool>,
}

impl<T: Real> LayerTrace<T> {
    /// Fraction of data vectors retained.
    pub fn retention(&self) -> f64 {
        if self.retained.is_empty() {
            return 0.0;
        }
        self.retained.iter().filter(|&&r| r).count() as f64 / self.retained.len() as f64
    }
}

/// Retained fraction per NVIB layer, `(layer, fraction)`, counting data
/// pseudo-counts strictly above `threshold`.
pub fn count_retention<T: Real>(traces: &[LayerTrace<T>], threshold: f64) -> Vec<(usize, f64)> {
    traces
        .iter()
        .filter(|t| t.nvib)
        .map(|t| {
            let n = t.alpha.len().saturating_sub(1);
            let kept = t.alpha[..n].iter().filter(|a| a.f64() > threshold).count();
            (t.layer, if n == 0 { 0.0 } else { kept as f64 / n as f64 })
        })
        .collect()
}

/// Encoder output.
pub struct Encoded<T> {
    /// Final hidden vectors, `n x p`.
    pub hidden: Var,
    /// Which final vectors the decoder may attend to.
    pub memory_mask: Vec<bool>,
    pub traces: Vec<LayerTrace<T>>,
    /// DP parameter nodes per NVIB layer, bottom to top.
    pub nvib: Vec<DpVars>,
    pub final_dp: Option<DpParams<T>>,
    /// Output of every encoder layer, bottom to top.
    pub layers: Vec<Var>,
}

/// Encoder failure carrying the traces computed so far.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodeError<T> {
    pub error: Error,
    pub traces: Vec<LayerTrace<T>>,
}

impl<T> From<EncodeError<T>> for Error {
    fn from(e: EncodeError<T>) -> Self {
        e.error
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: Option<ParamId>,
    w_o: ParamId,
    b_o: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NvibIds {
    w_alpha: ParamId,
    b_alpha: ParamId,
    w_mu: ParamId,
    b_mu: ParamId,
    w_sigma: ParamId,
    b_sigma: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct FfIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct EncLayerIds {
    attn: AttnIds,
    nvib: Option<NvibIds>,
    ln1: NormIds,
    ff: FfIds,
    ln2: NormIds,
}

#[derive(Clone, Copy, Debug)]
struct DecLayerIds {
    self_attn: AttnIds,
    ln1: NormIds,
    cross: AttnIds,
    ln2: NormIds,
    ff: FfIds,
    ln3: NormIds,
}

#[derive(Clone, Debug)]
struct Ids {
    embed: ParamId,
    enc: Vec<EncLayerIds>,
    dec: Vec<DecLayerIds>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Model weights plus architecture.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: Ids,
}

struct Init<'a, R: ?Sized, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<R: Rng + ?Sized, T: Real> Init<'_, R, T> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let rng = &mut *self.rng;
        let m = Matrix::from_fn(rows, cols, |_, _| {
            let x: f64 = StandardNormal.sample(rng);
            T::c(std * x)
        });
        self.store.add(name, m)
    }

    fn filled(&mut self, name: String, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Matrix::filled(rows, cols, T::c(v)))
    }

    fn dense(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        self.normal(name, fan_in, fan_out, 1.0 / libm::sqrt(fan_in as f64))
    }

    fn attn(&mut self, prefix: &str, p: usize, with_v: bool) -> AttnIds {
        AttnIds {
            w_q: self.dense(format!("{prefix}.w_q"), p, p),
            w_k: self.dense(format!("{prefix}.w_k"), p, p),
            w_v: with_v.then(|| self.dense(format!("{prefix}.w_v"), p, p)),
            w_o: self.dense(format!("{prefix}.w_o"), p, p),
            b_o: self.filled(format!("{prefix}.b_o"), 1, p, 0.0),
        }
    }

    fn norm(&mut self, prefix: &str, p: usize) -> NormIds {
        NormIds {
            gain: self.filled(format!("{prefix}.gain"), 1, p, 1.0),
            bias: self.filled(format!("{prefix}.bias"), 1, p, 0.0),
        }
    }

    fn ff(&mut self, prefix: &str, p: usize, d_ff: usize) -> FfIds {
        FfIds {
            w1: self.dense(format!("{prefix}.w1"), p, d_ff),
            b1: self.filled(format!("{prefix}.b1"), 1, d_ff, 0.0),
            w2: self.dense(format!("{prefix}.w2"), d_ff, p),
            b2: self.filled(format!("{prefix}.b2"), 1, p, 0.0),
        }
    }

    fn nvib(&mut self, prefix: &str, p: usize, init_sigma: f64) -> NvibIds {
        // Pseudo-counts start near 1, means near the input vectors and
        // standard deviations at `init_sigma`.
        let w_alpha = self.normal(format!("{prefix}.w_alpha"), 1, p, 0.01);
        let b_alpha = self.filled(format!("{prefix}.b_alpha"), 1, 1, 0.0);
        let eye = Matrix::from_fn(p, p, |i, j| if i == j { T::one() } else { T::zero() });
        let w_mu = self.store.add(format!("{prefix}.w_mu"), eye);
        let b_mu = self.filled(format!("{prefix}.b_mu"), 1, p, 0.0);
        let w_sigma = self.normal(format!("{prefix}.w_sigma"), p, p, 0.01);
        let b_sigma = self.filled(format!("{prefix}.b_sigma"), 1, p, libm::log(init_sigma));
        NvibIds {
            w_alpha,
            b_alpha,
            w_mu,
            b_mu,
            w_sigma,
            b_sigma,
        }
    }
}

impl<T: Real> Model<T> {
    /// Randomly initialised model.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let p = config.p;
        let ids = {
            let mut init = Init { store: &mut store, rng };
            let embed = init.normal("embed".into(), config.vocab_size, p, 1.0 / libm::sqrt(p as f64));
            let enc = (0..config.n_enc_layers)
                .map(|l| {
                    let nv = config.is_nvib_layer(l);
                    let pre = format!("enc.{l}");
                    EncLayerIds {
                        attn: init.attn(&format!("{pre}.attn"), p, !nv),
                        nvib: nv.then(|| init.nvib(&format!("{pre}.nvib"), p, config.init_sigma)),
                        ln1: init.norm(&format!("{pre}.ln1"), p),
                        ff: init.ff(&format!("{pre}.ff"), p, config.d_ff),
                        ln2: init.norm(&format!("{pre}.ln2"), p),
                    }
                })
                .collect();
            let dec = (0..config.n_dec_layers)
                .map(|l| {
                    let pre = format!("dec.{l}");
                    DecLayerIds {
                        self_attn: init.attn(&format!("{pre}.self"), p, true),
                        ln1: init.norm(&format!("{pre}.ln1"), p),
                        cross: init.attn(&format!("{pre}.cross"), p, true),
                        ln2: init.norm(&format!("{pre}.ln2"), p),
                        ff: init.ff(&format!("{pre}.ff"), p, config.d_ff),
                        ln3: init.norm(&format!("{pre}.ln3"), p),
                    }
                })
                .collect();
            let out_w = init.dense("out.w".into(), p, config.vocab_size);
            let out_b = init.filled("out.b".into(), 1, config.vocab_size, 0.0);
            Ids {
                embed,
                enc,
                dec,
                out_w,
                out_b,
            }
        };
        Ok(Self {
            config,
            params: store,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replaces every parameter by name. Shapes must match.
    pub fn load_params(&mut self, named: &[(String, Matrix<T>)]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let id = self
                .params
                .find(name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown tensor {name}")))?;
            let slot = self.params.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::InvalidConfig(format!("shape mismatch for {name}")));
            }
            *slot = value.clone();
        }
        Ok(())
    }

    fn embed_positions(&self, g: &mut Graph<T>, tokens: &[usize], mode: Mode, rng: &mut (impl Rng + ?Sized)) -> Var {
        let table = g.param(&self.params, self.ids.embed);
        let e = g.embed(table, tokens);
        let e = g.scale(e, T::c(libm::sqrt(self.config.p as f64)));
        let pe = g.constant(sinusoidal(tokens.len(), self.config.p));
        let x = g.add(e, pe);
        self.dropout(g, x, mode, rng)
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, mode: Mode, rng: &mut (impl Rng + ?Sized)) -> Var {
        match mode {
            Mode::Train => g.dropout(x, self.config.dropout, rng),
            Mode::Eval => x,
        }
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, ids: NormIds) -> Var {
        let gain = g.param(&self.params, ids.gain);
        let bias = g.param(&self.params, ids.bias);
        g.layer_norm(x, gain, bias, T::c(LN_EPS))
    }

    fn feed_forward(&self, g: &mut Graph<T>, x: Var, ids: FfIds, mode: Mode, rng: &mut (impl Rng + ?Sized)) -> Var {
        let [w1, b1, w2, b2] = [ids.w1, ids.b1, ids.w2, ids.b2].map(|id| g.param(&self.params, id));
        let h = g.linear(x, w1, b1);
        let h = g.relu(h);
        let f = g.linear(h, w2, b2);
        self.dropout(g, f, mode, rng)
    }

    fn out_proj(&self, g: &mut Graph<T>, a: Var, ids: AttnIds, mode: Mode, rng: &mut (impl Rng + ?Sized)) -> Var {
        let w_o = g.param(&self.params, ids.w_o);
        let b_o = g.param(&self.params, ids.b_o);
        let o = g.linear(a, w_o, b_o);
        self.dropout(g, o, mode, rng)
    }

    fn attention(&self, g: &mut Graph<T>, x: Var, kv: Var, ids: AttnIds, causal: bool) -> (Var, Var) {
        let w_q = g.param(&self.params, ids.w_q);
        let w_k = g.param(&self.params, ids.w_k);
        let w_v = g.param(&self.params, ids.w_v.expect("standard attention has a value map"));
        let q = g.matmul(x, w_q);
        let k = g.matmul(kv, w_k);
        let v = g.matmul(kv, w_v);
        g.attention(q, k, v, causal)
    }

    /// Runs the encoder on one sequence.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        tokens: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> core::result::Result<Encoded<T>, EncodeError<T>> {
        let fail = |error, traces| EncodeError { error, traces };
        if tokens.is_empty() {
            return Err(fail(Error::EmptySequence, Vec::new()));
        }
        let n = tokens.len();
        let thr = T::c(self.config.alpha_threshold);
        let mut x = self.embed_positions(g, tokens, mode, rng);
        let mut log_alpha_prev = g.constant(Matrix::zeros(1, n));
        let mut traces = Vec::with_capacity(self.ids.enc.len());
        let mut nvib_out = Vec::new();
        let mut final_dp = None;
        let mut layers = Vec::with_capacity(self.ids.enc.len());

        for (l, ids) in self.ids.enc.iter().enumerate() {
            let (a, trace) = match ids.nvib {
                None => {
                    let (a, w) = self.attention(g, x, x, ids.attn, false);
                    let trace = LayerTrace {
                        layer: l,
                        nvib: false,
                        mode,
                        weights: g.value(w).clone(),
                        alpha: Vec::new(),
                        retained: vec![true; n],
                    };
                    (a, trace)
                }
                Some(nv) => {
                    let pv = self.proj_vars(g, ids.attn, nv);
                    let dp = g
                        .nvib_project(x, log_alpha_prev, pv, l)
                        .map_err(|e| fail(e, traces.clone()))?;
                    let params = g.dp_params(&dp);
                    let mut retained: Vec<bool> = params.alpha.iter().map(|&a| a > thr).collect();
                    retained[n] = true;
                    let (a, w) = match mode {
                        Mode::Train => {
                            let (z, log_pi) = g.nvib_sample(&dp, rng).map_err(|e| fail(e, traces.clone()))?;
                            g.nvib_attention_train(x, z, log_pi, pv.w_q, pv.w_k)
                        }
                        Mode::Eval => g.nvib_attention_test(x, &dp, &retained, pv.w_q, pv.w_k),
                    }
                    .map_err(|e| fail(e, traces.clone()))?;
                    log_alpha_prev = dp.log_alpha;
                    nvib_out.push(dp);
                    let trace = LayerTrace {
                        layer: l,
                        nvib: true,
                        mode,
                        weights: g.value(w).clone(),
                        alpha: params.alpha.clone(),
                        retained: retained[..n].to_vec(),
                    };
                    if l + 1 == self.ids.enc.len() {
                        let mut p = params;
                        for (i, &keep) in retained.iter().enumerate() {
                            p.retained[i] = keep;
                            if !keep {
                                p.alpha[i] = T::zero();
                            }
                        }
                        final_dp = Some(p);
                    }
                    (a, trace)
                }
            };
            traces.push(trace);
            let o = self.out_proj(g, a, ids.attn, mode, rng);
            let r = g.add(x, o);
            let h = self.norm(g, r, ids.ln1);
            let f = self.feed_forward(g, h, ids.ff, mode, rng);
            let r = g.add(h, f);
            x = self.norm(g, r, ids.ln2);
            layers.push(x);
        }

        let last = traces.last().expect("at least one encoder layer");
        let mut memory_mask = last.retained.clone();
        if last.nvib && !memory_mask.iter().any(|&m| m) {
            match mode {
                Mode::Eval => {
                    let layer = last.layer;
                    return Err(fail(Error::FinalLayerPruned { layer }, traces));
                }
                Mode::Train => {
                    // Keep the single strongest vector so the decoder always has memory.
                    let best = (0..n)
                        .max_by(|&i, &j| last.alpha[i].partial_cmp(&last.alpha[j]).unwrap())
                        .unwrap();
                    memory_mask[best] = true;
                }
            }
        }
        Ok(Encoded {
            hidden: x,
            memory_mask,
            traces,
            nvib: nvib_out,
            final_dp,
            layers,
        })
    }

    fn proj_vars(&self, g: &mut Graph<T>, attn: AttnIds, nv: NvibIds) -> ProjVars {
        let mut p = |id| g.param(&self.params, id);
        ProjVars {
            w_alpha: p(nv.w_alpha),
            b_alpha: p(nv.b_alpha),
            w_mu: p(nv.w_mu),
            b_mu: p(nv.b_mu),
            w_sigma: p(nv.w_sigma),
            b_sigma: p(nv.b_sigma),
            w_q: p(attn.w_q),
            w_k: p(attn.w_k),
        }
    }

    /// Decoder logits (`len(prefix) x vocab`) for teacher-forced `prefix`.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        prefix: &[usize],
        memory: Var,
        memory_mask: &[bool],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if prefix.is_empty() {
            return Err(Error::EmptySequence);
        }
        let kept: Vec<usize> = memory_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let mem = g.select_rows(memory, &kept);
        let mut y = self.embed_positions(g, prefix, mode, rng);
        for ids in &self.ids.dec {
            let (a, _) = self.attention(g, y, y, ids.self_attn, true);
            let o = self.out_proj(g, a, ids.self_attn, mode, rng);
            let r = g.add(y, o);
            y = self.norm(g, r, ids.ln1);
            let (c, _) = self.attention(g, y, mem, ids.cross, false);
            let o = self.out_proj(g, c, ids.cross, mode, rng);
            let r = g.add(y, o);
            y = self.norm(g, r, ids.ln2);
            let f = self.feed_forward(g, y, ids.ff, mode, rng);
            let r = g.add(y, f);
            y = self.norm(g, r, ids.ln3);
        }
        let w = g.param(&self.params, self.ids.out_w);
        let b = g.param(&self.params, self.ids.out_b);
        Ok(g.linear(y, w, b))
    }

    /// Greedy decoding in eval mode, at most `max_len` characters.
    pub fn greedy_decode(&self, tokens: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let mut g = Graph::new(false);
        let mut rng = NoRng;
        let enc = self.encode(&mut g, tokens, Mode::Eval, &mut rng)?;
        let kept: Vec<usize> = enc
            .memory_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect();
        let memory = g.value(enc.hidden).select_rows(&kept);
        let mut state = DecoderState::new(self, &memory);
        let mut out = Vec::new();
        let mut prev = BOS;
        for _ in 0..max_len {
            let logits = state.step(self, prev);
            let next = argmax(&logits);
            if next == EOS {
                break;
            }
            out.push(next);
            prev = next;
        }
        Ok(out)
    }

    /// Eval-mode encoder traces for one sequence.
    pub fn traces(&self, tokens: &[usize]) -> core::result::Result<Vec<LayerTrace<T>>, EncodeError<T>> {
        let mut g = Graph::new(false);
        self.encode(&mut g, tokens, Mode::Eval, &mut NoRng).map(|e| e.traces)
    }
}

/// Placeholder random source for eval mode, which never draws.
pub(crate) struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval mode does not draw random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval mode does not draw random numbers")
    }
    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("eval mode does not draw random numbers")
    }
}

fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fixed sinusoidal position table, `n x p`.
pub fn sinusoidal<T: Real>(n: usize, p: usize) -> Matrix<T> {
    let rows: Vec<T> = (0..n).flat_map(|pos| sinusoidal_row::<T>(pos, p)).collect();
    Matrix::from_vec(n, p, rows)
}

/// Incremental eval-mode decoder with cached keys and values.
struct DecoderState<'a, T> {
    model: &'a Model<T>,
    pos: usize,
    layers: Vec<LayerCache<T>>,
}

struct LayerCache<T> {
    self_k: Vec<T>,
    self_v: Vec<T>,
    cross_k: Matrix<T>,
    cross_v: Matrix<T>,
}

impl<'a, T: Real> DecoderState<'a, T> {
    fn new(model: &'a Model<T>, memory: &Matrix<T>) -> Self {
        let layers = model
            .ids
            .dec
            .iter()
            .map(|ids| LayerCache {
                self_k: Vec::new(),
                self_v: Vec::new(),
                cross_k: memory.matmul(model.params.get(ids.cross.w_k)),
                cross_v: memory.matmul(
                    model
                        .params
                        .get(ids.cross.w_v.expect("cross attention has a value map")),
                ),
            })
            .collect();
        Self { model, pos: 0, layers }
    }

    fn p(&self, id: ParamId) -> &'a Matrix<T> {
        self.model.params.get(id)
    }

    fn linear(&self, x: &Matrix<T>, w: ParamId, b: ParamId) -> Matrix<T> {
        let mut h = x.matmul(self.p(w));
        h.add_assign(self.p(b));
        h
    }

    fn norm(&self, x: &Matrix<T>, ids: NormIds) -> Matrix<T> {
        let row = x.as_slice();
        let pf = T::c(row.len() as f64);
        let mean = row.iter().copied().sum::<T>() / pf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / pf;
        let s = T::one() / (var + T::c(LN_EPS)).sqrt();
        let (g, b) = (self.p(ids.gain).as_slice(), self.p(ids.bias).as_slice());
        Matrix::from_fn(1, row.len(), |_, h| (row[h] - mean) * s * g[h] + b[h])
    }

    /// Logits for the next token after feeding `token` at the current position.
    fn step(&mut self, model: &Model<T>, token: usize) -> Vec<T> {
        let cfg = &model.config;
        let scale = T::c(libm::sqrt(cfg.p as f64));
        let pe = sinusoidal_row::<T>(self.pos, cfg.p);
        let emb = self.p(model.ids.embed).row(token);
        let mut x = Matrix::from_fn(1, cfg.p, |_, h| emb[h] * scale + pe[h]);
        for (l, ids) in model.ids.dec.iter().enumerate() {
            let q = x.matmul(self.p(ids.self_attn.w_q));
            let k = x.matmul(self.p(ids.self_attn.w_k));
            let v = x.matmul(self.p(ids.self_attn.w_v.expect("self attention has a value map")));
            let cache = &mut self.layers[l];
            cache.self_k.extend_from_slice(k.as_slice());
            cache.self_v.extend_from_slice(v.as_slice());
            let rows = self.pos + 1;
            let keys = Matrix::from_vec(rows, cfg.p, cache.self_k.clone());
            let vals = Matrix::from_vec(rows, cfg.p, cache.self_v.clone());
            let a = attend(&q, &keys, &vals);
            let o = self.linear(&a, ids.self_attn.w_o, ids.self_attn.b_o);
            x.add_assign(&o);
            x = self.norm(&x, ids.ln1);

            let q = x.matmul(self.p(ids.cross.w_q));
            let cache = &self.layers[l];
            let c = attend(&q, &cache.cross_k, &cache.cross_v);
            let o = self.linear(&c, ids.cross.w_o, ids.cross.b_o);
            x.add_assign(&o);
            x = self.norm(&x, ids.ln2);

            let h = self
                .linear(&x, ids.ff.w1, ids.ff.b1)
                .map(|v| if v > T::zero() { v } else { T::zero() });
            let f = self.linear(&h, ids.ff.w2, ids.ff.b2);
            x.add_assign(&f);
            x = self.norm(&x, ids.ln3);
        }
        self.pos += 1;
        self.linear(&x, model.ids.out_w, model.ids.out_b).into_vec()
    }
}

fn attend<T: Real>(q: &Matrix<T>, keys: &Matrix<T>, vals: &Matrix<T>) -> Matrix<T> {
    let scale = T::c(1.0 / libm::sqrt(q.cols() as f64));
    let mut w = q.matmul_nt(keys);
    w.scale_in_place(scale);
    let mask = vec![true; w.cols()];
    crate::nvib::masked_softmax(w.row_mut(0), &mask).expect("non-empty key set");
    w.matmul(vals)
}

fn sinusoidal_row<T: Real>(pos: usize, p: usize) -> Vec<T> {
    (0..p)
        .map(|i| {
            let rate = libm::pow(10000.0, -((i / 2 * 2) as f64) / p as f64);
            let angle = pos as f64 * rate;
            T::c(if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(n_nvib: usize) -> ModelConfig {
        ModelConfig {
            n_enc_layers: 3,
            n_dec_layers: 2,
            n_nvib_layers: n_nvib,
            p: 8,
            d_ff: 16,
            vocab_size: 12,
            ..Default::default()
        }
    }

    #[test]
    fn incremental_decoder_matches_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::<f64>::new(small(2), &mut rng).unwrap();
        let tokens = [4, 7, 9, 5, 11];
        let mut g = Graph::new(false);
        let enc = model.encode(&mut g, &tokens, Mode::Eval, &mut NoRng).unwrap();
        let prefix = [BOS, 6, 8, 10];
        let logits = model
            .decode(&mut g, &prefix, enc.hidden, &enc.memory_mask, Mode::Eval, &mut NoRng)
            .unwrap();
        let logits = g.value(logits).clone();
        let kept: Vec<usize> = enc
            .memory_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect();
        let memory = g.value(enc.hidden).select_rows(&kept);
        let mut state = DecoderState::new(&model, &memory);
        for (t, &tok) in prefix.iter().enumerate() {
            let row = state.step(&model, tok);
            for (a, b) in row.iter().zip(logits.row(t)) {
                assert!((a - b).abs() < 1e-10, "position {t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn retention_counting() {
        let trace = |alpha: [f64; 4]| LayerTrace {
            layer: 0,
            nvib: true,
            mode: Mode::Eval,
            weights: Matrix::zeros(3, 4),
            alpha: alpha.to_vec(),
            retained: vec![true; 3],
        };
        let traces = [
            trace([1.0, 1.0, 1.0, 1.0]),
            trace([1.0, 0.05, 1.0, 1.0]),
            trace([0.05, 0.05, 1.0, 1.0]),
        ];
        let r: Vec<f64> = count_retention(&traces, 0.1).into_iter().map(|(_, f)| f).collect();
        assert_eq!(r[0], 1.0);
        assert!((r[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((r[2] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig {
            n_nvib_layers: 7,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            n_heads: 2,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
