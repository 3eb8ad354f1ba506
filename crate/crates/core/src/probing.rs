//! Probing classifiers on frozen encoder representations.
//!
//! A probe sees the set of retained vectors of one encoder layer. The
//! aggregating probe averages them and applies a two-layer MLP; the
//! attention probe maps each vector through a two-layer MLP, pools with a
//! single learnable query and classifies linearly.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::matrix::Matrix;
use crate::model::{Mode, Model};
use crate::real::Real;
use crate::training::RAdam;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Aggregating,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Encoder layer whose outputs are probed (0 = bottom).
    pub layer: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn aggregating(layer: usize, n_classes: usize) -> Self {
        Self {
            kind: ProbeKind::Aggregating,
            hidden: 256,
            epochs: 10,
            batch_size: 128,
            lr: 1e-4,
            layer,
            n_classes,
            seed: 0,
        }
    }

    pub fn attention(layer: usize, n_classes: usize) -> Self {
        Self {
            kind: ProbeKind::Attention,
            hidden: 256,
            epochs: 50,
            batch_size: 256,
            lr: 1e-3,
            layer,
            n_classes,
            seed: 0,
        }
    }

    pub fn defaults(kind: ProbeKind, layer: usize, n_classes: usize) -> Self {
        match kind {
            ProbeKind::Aggregating => Self::aggregating(layer, n_classes),
            ProbeKind::Attention => Self::attention(layer, n_classes),
        }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.layer >= depth {
            return Err(Error::LayerOutOfRange {
                layer: self.layer,
                depth,
            });
        }
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 || self.n_classes < 2 || !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(
                "probe needs positive sizes, lr > 0 and at least two classes".into(),
            ));
        }
        Ok(())
    }
}

/// Eval-mode outputs of encoder `layer` at the positions that layer retains
/// (every position for standard layers), one row per vector.
pub fn extract_representations<T: Real>(model: &Model<T>, tokens: &[usize], layer: usize) -> Result<Matrix<T>> {
    let depth = model.config().n_enc_layers;
    if layer >= depth {
        return Err(Error::LayerOutOfRange { layer, depth });
    }
    let mut g = Graph::new(false);
    let enc = model.encode(&mut g, tokens, Mode::Eval, &mut crate::model::NoRng)?;
    let trace = &enc.traces[layer];
    let kept: Vec<usize> = if trace.nvib {
        (0..tokens.len()).filter(|&i| trace.retained[i]).collect()
    } else {
        (0..tokens.len()).collect()
    };
    if kept.is_empty() {
        return Err(Error::FinalLayerPruned { layer });
    }
    Ok(g.value(enc.layers[layer]).select_rows(&kept))
}

/// Rows sorted by a total order on their values, making every set function
/// of the rows bitwise independent of their original order.
pub fn canonical_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b))
            .map(|(u, v)| u.f64().total_cmp(&v.f64()))
            .find(|o| o.is_ne())
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    x.select_rows(&idx)
}

/// Probe parameters.
pub struct Probe<T> {
    pub config: ProbeConfig,
    pub params: ParamStore<T>,
    ids: Vec<ParamId>,
}

fn init<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let std = libm::sqrt(2.0 / (rows + cols) as f64);
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| T::c(normal.sample(rng)))
}

impl<T: Real> Probe<T> {
    pub fn new<R: Rng + ?Sized>(config: ProbeConfig, width: usize, rng: &mut R) -> Self {
        let (h, c, p) = (config.hidden, config.n_classes, width);
        let mut params = ParamStore::new();
        let mut ids = Vec::new();
        let mut add = |name: &str, m: Matrix<T>| ids.push(params.add(name, m));
        match config.kind {
            ProbeKind::Aggregating => {
                add("w1", init(p, h, rng));
                add("b1", Matrix::zeros(1, h));
                add("w2", init(h, c, rng));
                add("b2", Matrix::zeros(1, c));
            }
            ProbeKind::Attention => {
                add("w1", init(p, h, rng));
                add("b1", Matrix::zeros(1, h));
                add("w2", init(h, p, rng));
                add("b2", Matrix::zeros(1, p));
                add("query", init(1, p, rng));
                add("w_k", init(p, p, rng));
                add("w_v", init(p, p, rng));
                add("w_out", init(p, c, rng));
                add("b_out", Matrix::zeros(1, c));
            }
        }
        Self { config, params, ids }
    }

    /// Logits (`1 x n_classes`) for one vector set.
    pub fn forward(&self, g: &mut Graph<T>, set: &Matrix<T>) -> Var {
        let x = g.constant(canonical_rows(set));
        let p: Vec<Var> = self.ids.iter().map(|&id| g.param(&self.params, id)).collect();
        match self.config.kind {
            ProbeKind::Aggregating => {
                let k = set.rows();
                let avg = g.constant(Matrix::filled(1, k, T::c(1.0 / k as f64)));
                let m = g.matmul(avg, x);
                let h = g.linear(m, p[0], p[1]);
                let h = g.relu(h);
                g.linear(h, p[2], p[3])
            }
            ProbeKind::Attention => {
                let h = g.linear(x, p[0], p[1]);
                let h = g.relu(h);
                let m = g.linear(h, p[2], p[3]);
                let k = g.matmul(m, p[5]);
                let v = g.matmul(m, p[6]);
                let (pooled, _) = g.attention(p[4], k, v, false);
                g.linear(pooled, p[7], p[8])
            }
        }
    }

    pub fn predict(&self, set: &Matrix<T>) -> usize {
        let mut g = Graph::new(false);
        let logits = self.forward(&mut g, set);
        let row = g.value(logits).row(0);
        (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
    }
}

/// Accuracy and macro-F1 of `pred` against `gold`.
pub fn classification_scores(pred: &[usize], gold: &[usize], n_classes: usize) -> (f64, f64) {
    if gold.is_empty() {
        return (0.0, 0.0);
    }
    let acc = pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64;
    let mut f1 = 0.0;
    let mut present = 0;
    for c in 0..n_classes {
        let tp = pred.iter().zip(gold).filter(|&(&p, &g)| p == c && g == c).count() as f64;
        let fp = pred.iter().zip(gold).filter(|&(&p, &g)| p == c && g != c).count() as f64;
        let fn_ = pred.iter().zip(gold).filter(|&(&p, &g)| p != c && g == c).count() as f64;
        if tp + fn_ == 0.0 && fp == 0.0 {
            continue;
        }
        present += 1;
        if tp > 0.0 {
            f1 += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
    }
    (acc, if present == 0 { 0.0 } else { f1 / present as f64 })
}

/// Seeded 80/10/10 split of `0..n` into (train, validation, test) indices.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = n / 10;
    let n_test = n / 10;
    let test = idx.split_off(n - n_test);
    let val = idx.split_off(n - n_test - n_val);
    (idx, val, test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub kind: ProbeKind,
    pub layer: usize,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub test_f1: f64,
}

/// Trains a probe on `sets` with class `labels` and reports the test metrics
/// of the epoch with the best validation accuracy.
pub fn train_probe<T: Real>(
    sets: &[Matrix<T>],
    labels: &[usize],
    config: &ProbeConfig,
) -> Result<(Probe<T>, ProbeReport)> {
    if sets.is_empty() || sets.len() != labels.len() {
        return Err(Error::EmptyCorpus);
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::SingleClass);
    }
    if labels.iter().any(|&l| l >= config.n_classes) || sets.iter().any(|s| s.rows() == 0) {
        return Err(Error::InvalidConfig("label out of range or empty vector set".into()));
    }
    let width = sets[0].cols();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe = Probe::new(config.clone(), width, &mut rng);
    let mut opt = RAdam::adam(probe.params.values(), 0.9, 0.999, 1e-8);
    let (mut train, val, test) = split_indices(sets.len(), config.seed);
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let score = |probe: &Probe<T>, idx: &[usize]| {
        let pred: Vec<usize> = idx.iter().map(|&i| probe.predict(&sets[i])).collect();
        let gold: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        classification_scores(&pred, &gold, config.n_classes)
    };

    let mut best: Option<(f64, usize, Vec<Matrix<T>>)> = None;
    for epoch in 0..config.epochs {
        train.shuffle(&mut rng);
        for batch in train.chunks(config.batch_size) {
            let mut acc = probe.params.zeros_like();
            let s = T::c(1.0 / batch.len() as f64);
            for &i in batch {
                let mut g = Graph::new(true);
                let logits = probe.forward(&mut g, &sets[i]);
                let loss = g.cross_entropy(logits, &[labels[i]]);
                let grads = g.backward(loss);
                for (a, gr) in acc.iter_mut().zip(g.param_grads(&grads, probe.params.len())) {
                    if let Some(gr) = gr {
                        a.axpy(s, &gr);
                    }
                }
            }
            opt.update(probe.params.values_mut(), &acc, config.lr);
        }
        let (val_acc, _) = if val.is_empty() { score(&probe, &train) } else { score(&probe, &val) };
        if best.as_ref().is_none_or(|(b, _, _)| val_acc >= *b) {
            best = Some((val_acc, epoch, probe.params.values().to_vec()));
        }
    }
    let (val_accuracy, best_epoch, values) = best.expect("at least one epoch");
    probe.params.values_mut().clone_from_slice(&values);
    let (test_accuracy, test_f1) = if test.is_empty() { (0.0, 0.0) } else { score(&probe, &test) };
    let report = ProbeReport {
        kind: config.kind,
        layer: config.layer,
        best_epoch,
        val_accuracy,
        test_accuracy,
        test_f1,
    };
    Ok((probe, report))
}

/// Sequential per-layer probing of `model` on a labelled dataset. Examples
/// that cannot be represented at a layer (fully pruned) are skipped there.
pub fn layerwise_report<T: Real>(
    model: &Model<T>,
    inputs: &[Vec<usize>],
    labels: &[usize],
    kinds: &[ProbeKind],
    n_classes: usize,
    seed: u64,
    tweak: impl Fn(&mut ProbeConfig),
) -> Result<Vec<ProbeReport>> {
    let mut out = Vec::new();
    for layer in 0..model.config().n_enc_layers {
        let mut sets = Vec::new();
        let mut ys = Vec::new();
        for (x, &y) in inputs.iter().zip(labels) {
            match extract_representations(model, x, layer) {
                Ok(s) => {
                    sets.push(s);
                    ys.push(y);
                }
                Err(Error::FinalLayerPruned { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        for &kind in kinds {
            let mut cfg = ProbeConfig::defaults(kind, layer, n_classes);
            cfg.seed = seed;
            tweak(&mut cfg);
            out.push(train_probe(&sets, &ys, &cfg)?.1);
        }
    }
    Ok(out)
}

/// Checksum of every parameter value, for asserting a model is unchanged.
pub fn param_checksum<T: Real>(params: &ParamStore<T>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for m in params.values() {
        for v in m.as_slice() {
            h ^= v.f64().to_bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes() {
        let (a, b, c) = split_indices(100, 1);
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn scores() {
        assert_eq!(classification_scores(&[0, 1, 1], &[0, 1, 1], 2), (1.0, 1.0));
        let (acc, f1) = classification_scores(&[0, 0, 0, 0], &[0, 0, 1, 1], 2);
        assert_eq!(acc, 0.5);
        assert!((f1 - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn canonical_rows_ignore_order() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.0], vec![1.0, 1.0]]);
        let b = a.select_rows(&[2, 0, 1]);
        assert_eq!(canonical_rows::<f64>(&a), canonical_rows(&b));
    }

    #[test]
    fn single_class_is_an_error() {
        let sets = vec![Matrix::<f64>::zeros(2, 3); 5];
        let cfg = ProbeConfig::aggregating(0, 2);
        assert!(matches!(train_probe(&sets, &[1; 5], &cfg), Err(Error::SingleClass)));
    }
}
