//! Noisy-deletion reconstruction objective, NVIB loss weighting, schedules
//! and the rectified Adam optimiser.
//!
//! The loss of one sequence is
//! `L_R + anneal · Σ_l β_l (λ_D L_D^l + λ_G L_G^l)` with `λ` rescaled by the
//! sequence length and model width. A batch averages per-sequence losses.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::matrix::Matrix;
use crate::model::{Mode, Model};
use crate::real::Real;
use crate::tokenizer::{Vocab, BOS, EOS};
use crate::{Error, Result};

/// Optimisation and regularisation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub deletion_prob: f64,
    /// Length-independent Dirichlet KL weight `λ'_D`.
    pub lambda_d: f64,
    /// Length- and width-independent Gaussian KL weight `λ'_G`.
    pub lambda_g: f64,
    /// Extra prior pseudo-count per input position.
    pub alpha_delta: f64,
    /// Fraction of training at which the KL ramp starts.
    pub anneal_start: f64,
    /// Fraction of training at which the KL ramp reaches full weight.
    pub anneal_end: f64,
    pub max_len: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 2000,
            batch_size: 32,
            grad_clip_norm: 0.1,
            deletion_prob: 0.1,
            lambda_d: 1.0,
            lambda_g: 1e-2,
            alpha_delta: 0.25,
            anneal_start: 0.3,
            anneal_end: 0.6,
            max_len: 64,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(0.0..1.0).contains(&self.deletion_prob) {
            return bad("deletion_prob must lie in [0, 1)");
        }
        if !(0.0 <= self.anneal_start && self.anneal_start <= self.anneal_end && self.anneal_end <= 1.0) {
            return bad("anneal window must be ordered within [0, 1]");
        }
        if self.steps == 0 || self.batch_size == 0 || self.max_len == 0 {
            return bad("steps, batch_size and max_len must be positive");
        }
        if !(self.lr > 0.0) || !(self.grad_clip_norm > 0.0) {
            return bad("lr and grad_clip_norm must be positive");
        }
        if self.lambda_d < 0.0 || self.lambda_g < 0.0 || self.alpha_delta < 0.0 {
            return bad("KL weights and alpha_delta must be non-negative");
        }
        Ok(())
    }
}

/// Deletes each non-special token independently with probability `prob`.
/// If every deletable token would go, one of them, chosen uniformly, is kept.
pub fn noise_delete<R: Rng + ?Sized>(tokens: &[usize], prob: f64, rng: &mut R) -> Vec<usize> {
    if prob <= 0.0 {
        return tokens.to_vec();
    }
    let keep: Vec<bool> = tokens
        .iter()
        .map(|&t| Vocab::is_special(t) || rng.random::<f64>() >= prob)
        .collect();
    let deletable: Vec<usize> = (0..tokens.len()).filter(|&i| !Vocab::is_special(tokens[i])).collect();
    let mut keep = keep;
    if !deletable.is_empty() && deletable.iter().all(|&i| !keep[i]) {
        keep[deletable[rng.random_range(0..deletable.len())]] = true;
    }
    tokens.iter().zip(&keep).filter(|(_, &k)| k).map(|(&t, _)| t).collect()
}

/// `β_l = l / Σ_{j=1}^{N} j` for `l = 1..=N`.
pub fn beta_weights(n: usize) -> Vec<f64> {
    let total = (n * (n + 1) / 2) as f64;
    (1..=n).map(|l| l as f64 / total).collect()
}

/// `(λ_D, λ_G) = (λ'_D / n, λ'_G / (n d))`.
pub fn scale_lambdas(lambda_d: f64, lambda_g: f64, n: usize, d: usize) -> (f64, f64) {
    (lambda_d / n as f64, lambda_g / (n * d) as f64)
}

/// KL weight: 0 before `start`, linear to 1 at `end` (fractions of `total`).
pub fn anneal_factor(step: usize, total: usize, start: f64, end: f64) -> f64 {
    let f = step as f64 / total as f64;
    if f <= start {
        0.0
    } else if f >= end {
        1.0
    } else {
        (f - start) / (end - start)
    }
}

/// Cosine cool-down from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    let f = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * f))
}

/// Per-sequence or batch-averaged loss decomposition.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Reconstruction cross-entropy per token.
    pub ce: f64,
    /// Raw Dirichlet KL per NVIB layer (bottom to top).
    pub kl_d: Vec<f64>,
    /// Raw Gaussian KL per NVIB layer.
    pub kl_g: Vec<f64>,
    /// `λ_D L_D` per layer with the length-scaled `λ_D`.
    pub weighted_kl_d: Vec<f64>,
    /// `λ_G L_G` per layer with the length- and width-scaled `λ_G`.
    pub weighted_kl_g: Vec<f64>,
    pub beta: Vec<f64>,
    pub anneal: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `ce + anneal · Σ β_l (λ_D L_D + λ_G L_G)` from the stored parts.
    pub fn recompute_total(&self) -> f64 {
        let reg: f64 = self
            .beta
            .iter()
            .zip(self.weighted_kl_d.iter().zip(&self.weighted_kl_g))
            .map(|(b, (d, g))| b * (d + g))
            .sum();
        self.ce + self.anneal * reg
    }

    /// Element-wise mean of several breakdowns.
    pub fn mean(parts: &[LossBreakdown]) -> LossBreakdown {
        let k = parts.len() as f64;
        let mut out = parts[0].clone();
        let avg = |f: &dyn Fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / k;
        out.ce = avg(&|p| p.ce);
        out.total = avg(&|p| p.total);
        for l in 0..out.kl_d.len() {
            out.kl_d[l] = avg(&|p| p.kl_d[l]);
            out.kl_g[l] = avg(&|p| p.kl_g[l]);
            out.weighted_kl_d[l] = avg(&|p| p.weighted_kl_d[l]);
            out.weighted_kl_g[l] = avg(&|p| p.weighted_kl_g[l]);
        }
        out
    }
}

/// One forward pass over a (noised input, clean target) pair.
pub struct SequenceLoss<T> {
    pub graph: Graph<T>,
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Retention per NVIB layer in this pass.
    pub retention: Vec<f64>,
    /// Teacher-forced argmax hits and target length.
    pub correct: usize,
    pub tokens: usize,
}

/// Builds the graph of the full objective for one sequence.
///
/// `input` is the (noised) encoder input and `clean` the reconstruction
/// target, both without specials. In [`Mode::Eval`] the graph is not
/// recorded and dropout/sampling are disabled.
#[allow(clippy::too_many_arguments)]
pub fn sequence_loss<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    input: &[usize],
    clean: &[usize],
    cfg: &TrainConfig,
    anneal: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<SequenceLoss<T>> {
    let mut g = Graph::new(mode == Mode::Train);
    let enc = model.encode(&mut g, input, mode, rng)?;
    let mut prefix = Vec::with_capacity(clean.len() + 1);
    prefix.push(BOS);
    prefix.extend_from_slice(clean);
    let mut targets = clean.to_vec();
    targets.push(EOS);
    let logits = model.decode(&mut g, &prefix, enc.hidden, &enc.memory_mask, mode, rng)?;
    let ce = g.cross_entropy(logits, &targets);

    let correct = {
        let l = g.value(logits);
        (0..targets.len())
            .filter(|&i| {
                let row = l.row(i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best == targets[i]
            })
            .count()
    };

    let n = input.len();
    let (lam_d, lam_g) = scale_lambdas(cfg.lambda_d, cfg.lambda_g, n, model.config().p);
    let beta = beta_weights(enc.nvib.len());
    let prior_total = T::c(1.0 + n as f64 * cfg.alpha_delta);
    let mut terms = vec![(ce, T::one())];
    let mut bd = LossBreakdown {
        beta: beta.clone(),
        anneal,
        ..Default::default()
    };
    for (l, dp) in enc.nvib.iter().enumerate() {
        let kd = g.nvib_kl_dirichlet(dp, prior_total)?;
        let kg = g.nvib_kl_gaussian(dp);
        let (vd, vg) = (g.scalar(kd).f64(), g.scalar(kg).f64());
        bd.kl_d.push(vd);
        bd.kl_g.push(vg);
        bd.weighted_kl_d.push(lam_d * vd);
        bd.weighted_kl_g.push(lam_g * vg);
        let w = anneal * beta[l];
        if w > 0.0 {
            terms.push((kd, T::c(w * lam_d)));
            terms.push((kg, T::c(w * lam_g)));
        }
    }
    let loss = g.weighted_sum(&terms);
    bd.ce = g.scalar(ce).f64();
    bd.total = g.scalar(loss).f64();
    if !bd.total.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    let retention = enc.traces.iter().filter(|t| t.nvib).map(|t| t.retention()).collect();
    Ok(SequenceLoss {
        graph: g,
        loss,
        breakdown: bd,
        retention,
        correct,
        tokens: targets.len(),
    })
}

/// Eval-mode reconstruction CE per token of `clean` given encoder `input`.
pub fn reconstruction_ce<T: Real>(model: &Model<T>, input: &[usize], clean: &[usize]) -> Result<f64> {
    let mut g = Graph::new(false);
    let mut rng = crate::model::NoRng;
    let enc = model.encode(&mut g, input, Mode::Eval, &mut rng)?;
    let mut prefix = Vec::with_capacity(clean.len() + 1);
    prefix.push(BOS);
    prefix.extend_from_slice(clean);
    let mut targets = clean.to_vec();
    targets.push(EOS);
    let logits = model.decode(&mut g, &prefix, enc.hidden, &enc.memory_mask, Mode::Eval, &mut rng)?;
    let ce = g.cross_entropy(logits, &targets);
    Ok(g.scalar(ce).f64())
}

/// Loss and parameter gradients of one training sequence. The encoder input
/// is a fresh deletion-noised copy of `clean`.
pub fn sequence_gradients<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    clean: &[usize],
    cfg: &TrainConfig,
    anneal: f64,
    rng: &mut R,
) -> Result<(SequenceLoss<T>, Vec<Option<Matrix<T>>>)> {
    let input = noise_delete(clean, cfg.deletion_prob, rng);
    let out = sequence_loss(model, &input, clean, cfg, anneal, Mode::Train, rng)?;
    let grads = out.graph.backward(out.loss);
    let pg = out.graph.param_grads(&grads, model.params().len());
    Ok((out, pg))
}

/// Adds `g` scaled by `s` into `acc`.
pub fn accumulate_grads<T: Real>(acc: &mut [Matrix<T>], g: &[Option<Matrix<T>>], s: T) {
    for (a, g) in acc.iter_mut().zip(g) {
        if let Some(g) = g {
            a.axpy(s, g);
        }
    }
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Matrix<T>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().map(|g| g.sum_sq().f64()).sum::<f64>());
    if norm > max_norm {
        let s = T::c(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// Adam with variance rectification during the early steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RAdam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// Without rectification this is plain bias-corrected Adam.
    pub rectify: bool,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
}

impl<T: Real> RAdam<T> {
    pub fn new(shapes: &[Matrix<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || shapes.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            rectify: true,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Plain Adam.
    pub fn adam(shapes: &[Matrix<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            rectify: false,
            ..Self::new(shapes, beta1, beta2, eps)
        }
    }

    /// One update of `params` with learning rate `lr`.
    pub fn update(&mut self, params: &mut [Matrix<T>], grads: &[Matrix<T>], lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - libm::pow(b1, t);
        let b2t = libm::pow(b2, t);
        let bc2 = 1.0 - b2t;
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2t / bc2;
        let rect = if !self.rectify {
            Some(1.0)
        } else if rho_t > 5.0 {
            Some(libm::sqrt(
                (rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t),
            ))
        } else {
            None
        };
        let (tb1, tb2) = (T::c(b1), T::c(b2));
        let (ob1, ob2) = (T::c(1.0 - b1), T::c(1.0 - b2));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let ps = p.as_mut_slice();
            let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
            for i in 0..ps.len() {
                let gi = g.as_slice()[i];
                ms[i] = tb1 * ms[i] + ob1 * gi;
                vs[i] = tb2 * vs[i] + ob2 * gi * gi;
                let m_hat = ms[i].f64() / bc1;
                let delta = match rect {
                    Some(r) => {
                        let v_hat = libm::sqrt(vs[i].f64() / bc2);
                        lr * r * m_hat / (v_hat + self.eps)
                    }
                    None => lr * m_hat,
                };
                ps[i] -= T::c(delta);
            }
        }
    }
}

/// Independent random stream for example `idx` of optimisation step `step`.
/// Streams do not depend on how examples are scheduled across threads.
pub fn example_rng(seed: u64, step: u64, idx: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step << 20) ^ idx);
    rng
}

/// Result of one training example, ready for reduction.
pub struct ExampleGrads<T> {
    pub breakdown: LossBreakdown,
    pub retention: Vec<f64>,
    pub grads: Vec<Option<Matrix<T>>>,
}

/// Summary of one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    /// Mean retention per NVIB layer over the batch.
    pub retention: Vec<f64>,
}

/// Model, optimiser state and step counter.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub opt: RAdam<T>,
    pub cfg: TrainConfig,
    pub step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = RAdam::new(model.params().values(), cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Self { model, opt, cfg, step: 0 })
    }

    pub fn anneal(&self) -> f64 {
        anneal_factor(self.step, self.cfg.steps, self.cfg.anneal_start, self.cfg.anneal_end)
    }

    /// Forward and backward pass of example `idx` in the current step. Pure
    /// given the trainer state, so examples may run in any order or in parallel.
    pub fn example(&self, idx: usize, clean: &[usize]) -> Result<ExampleGrads<T>> {
        let mut rng = example_rng(self.cfg.seed, self.step as u64, idx as u64);
        let (out, grads) = sequence_gradients(&self.model, clean, &self.cfg, self.anneal(), &mut rng)
            .map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step: self.step },
                e => e,
            })?;
        Ok(ExampleGrads {
            breakdown: out.breakdown,
            retention: out.retention,
            grads,
        })
    }

    /// Averages example gradients in order, clips, and takes one optimiser step.
    pub fn apply(&mut self, examples: Vec<ExampleGrads<T>>) -> Result<StepReport> {
        let k = examples.len();
        if k == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut acc = self.model.params().zeros_like();
        let s = T::c(1.0 / k as f64);
        for ex in &examples {
            accumulate_grads(&mut acc, &ex.grads, s);
        }
        let grad_norm = clip_grad_norm(&mut acc, self.cfg.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step });
        }
        let lr = cosine_lr(self.cfg.lr, self.step, self.cfg.steps);
        self.opt.update(self.model.params_mut().values_mut(), &acc, lr);
        let parts: Vec<LossBreakdown> = examples.iter().map(|e| e.breakdown.clone()).collect();
        let layers = examples[0].retention.len();
        let retention = (0..layers)
            .map(|l| examples.iter().map(|e| e.retention[l]).sum::<f64>() / k as f64)
            .collect();
        let report = StepReport {
            step: self.step,
            lr,
            grad_norm,
            loss: LossBreakdown::mean(&parts),
            retention,
        };
        self.step += 1;
        Ok(report)
    }

    /// Sequential step over a batch of clean sequences.
    pub fn step(&mut self, batch: &[Vec<usize>]) -> Result<StepReport> {
        let examples = batch
            .iter()
            .enumerate()
            .map(|(i, s)| self.example(i, s))
            .collect::<Result<Vec<_>>>()?;
        self.apply(examples)
    }
}

/// Eval-mode measurements of one sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExampleEval {
    /// Reconstruction CE per token with a deletion-noised input.
    pub noisy_ce: f64,
    /// Reconstruction CE per token with the clean input.
    pub clean_ce: f64,
    /// Greedy-decoding character accuracy from the clean input.
    pub accuracy: f64,
    /// Teacher-forced next-character accuracy from the clean input.
    pub forced_accuracy: f64,
    /// Eval-mode retention per NVIB layer on the clean input.
    pub retention: Vec<f64>,
}

/// Evaluates one validation sequence. The noised copy is drawn from
/// `example_rng(seed, u64::MAX, idx)` so it is the same on every call.
pub fn evaluate_example<T: Real>(
    model: &Model<T>,
    idx: usize,
    clean: &[usize],
    cfg: &TrainConfig,
) -> Result<ExampleEval> {
    let mut rng = example_rng(cfg.seed, u64::MAX >> 20, idx as u64);
    let noised = noise_delete(clean, cfg.deletion_prob, &mut rng);
    let noisy = sequence_loss(model, &noised, clean, cfg, 1.0, Mode::Eval, &mut rng)?;
    let plain = sequence_loss(model, clean, clean, cfg, 1.0, Mode::Eval, &mut rng)?;
    let decoded = model.greedy_decode(clean, clean.len() + clean.len() / 2 + 4)?;
    Ok(ExampleEval {
        noisy_ce: noisy.breakdown.ce,
        clean_ce: plain.breakdown.ce,
        accuracy: char_accuracy(&decoded, clean),
        forced_accuracy: plain.correct as f64 / plain.tokens as f64,
        retention: plain.retention,
    })
}

/// Mean of per-sequence evaluations.
pub fn mean_eval(parts: &[ExampleEval]) -> ExampleEval {
    let k = parts.len().max(1) as f64;
    let avg = |f: &dyn Fn(&ExampleEval) -> f64| parts.iter().map(f).sum::<f64>() / k;
    let layers = parts.first().map_or(0, |p| p.retention.len());
    ExampleEval {
        noisy_ce: avg(&|p| p.noisy_ce),
        clean_ce: avg(&|p| p.clean_ce),
        accuracy: avg(&|p| p.accuracy),
        forced_accuracy: avg(&|p| p.forced_accuracy),
        retention: (0..layers).map(|l| avg(&|p| p.retention[l])).collect(),
    }
}

/// Levenshtein distance.
pub fn edit_distance<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character accuracy of a reconstruction: `max(0, 1 − edit / len(target))`.
pub fn char_accuracy(pred: &[usize], target: &[usize]) -> f64 {
    if target.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    (1.0 - edit_distance(pred, target) as f64 / target.len() as f64).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_examples() {
        let b = beta_weights(6);
        for (l, &x) in b.iter().enumerate() {
            assert_eq!(x, (l + 1) as f64 / 21.0);
        }
        assert_eq!(beta_weights(1), vec![1.0]);
    }

    #[test]
    fn lambda_and_anneal_examples() {
        assert_eq!(scale_lambdas(1.0, 1e-2, 10, 64), (0.1, 1.5625e-5));
        assert_eq!(scale_lambdas(0.3, 0.7, 1, 1), (0.3, 0.7));
        assert_eq!(anneal_factor(300, 1000, 0.3, 0.6), 0.0);
        assert!((anneal_factor(450, 1000, 0.3, 0.6) - 0.5).abs() < 1e-12);
        assert_eq!(anneal_factor(900, 1000, 0.3, 0.6), 1.0);
    }

    #[test]
    fn deletion_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = vec![5, 6, 7];
        assert_eq!(noise_delete(&t, 0.0, &mut rng), t);
        assert_eq!(noise_delete(&[BOS, EOS], 0.9, &mut rng), vec![BOS, EOS]);
        for _ in 0..100 {
            assert!(!noise_delete(&t, 0.99, &mut rng).is_empty());
        }
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance(b"kitten", b"sitting"), 3);
        assert_eq!(edit_distance::<u8>(b"", b"abc"), 3);
        assert_eq!(char_accuracy(&[1, 2, 3], &[1, 2, 3]), 1.0);
    }

    #[test]
    fn radam_starts_with_plain_momentum_steps() {
        let mut p = vec![Matrix::filled(1, 1, 1.0f64)];
        let g = vec![Matrix::filled(1, 1, 2.0)];
        let mut opt = RAdam::new(&p, 0.9, 0.999, 1e-8);
        opt.update(&mut p, &g, 0.1);
        // Step 1 is un-rectified SGD with bias-corrected momentum: m̂ = g.
        assert!((p[0][(0, 0)] - (1.0 - 0.2)).abs() < 1e-12);
    }
}
