//! Define-by-run reverse-mode differentiation over matrices.
//!
//! A [`Graph`] records one forward pass. Each operation stores its output
//! values and, when recording, a backward closure mapping output gradients to
//! input gradients. NVIB operations are single fused nodes whose backward
//! closures call the kernel backward functions of [`crate::nvib`].
//!
//! Graphs are cheap and meant to be built per sequence. With recording off
//! (evaluation) no closures are allocated.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::matrix::Matrix;
use crate::nvib::{self, DpParams, DpParamsGrad, NvibProjection, SampleCache, SampledMixture};
use crate::real::Real;
use crate::Result;

/// Handle to one output of a graph node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    node: u32,
    slot: u32,
}

impl Var {
    fn new(node: usize, slot: usize) -> Self {
        Self {
            node: node as u32,
            slot: slot as u32,
        }
    }
}

/// Identifier of a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

type Backward<T> = Box<dyn Fn(&Ctx<'_, T>, &[Option<Matrix<T>>], &mut Grads<T>)>;

struct Node<T> {
    values: Vec<Matrix<T>>,
    needs_grad: bool,
    backward: Option<Backward<T>>,
}

/// Read access to forward values during the backward sweep.
pub struct Ctx<'a, T> {
    nodes: &'a [Node<T>],
}

impl<T> Ctx<'_, T> {
    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.node as usize].values[v.slot as usize]
    }
}

/// Gradient accumulator indexed by [`Var`].
pub struct Grads<T> {
    slots: Vec<Vec<Option<Matrix<T>>>>,
    wanted: Vec<bool>,
}

impl<T: Real> Grads<T> {
    /// Whether any gradient flowing into `v` can reach a trainable leaf.
    pub fn wants(&self, v: Var) -> bool {
        self.wanted[v.node as usize]
    }

    /// Adds `g` to the gradient of `v`.
    pub fn add(&mut self, v: Var, g: Matrix<T>) {
        if !self.wants(v) {
            return;
        }
        let slot = &mut self.slots[v.node as usize][v.slot as usize];
        match slot {
            Some(acc) => acc.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.slots[v.node as usize][v.slot as usize].as_ref()
    }

    fn take_node(&mut self, node: usize) -> Vec<Option<Matrix<T>>> {
        let k = self.slots[node].len();
        core::mem::replace(&mut self.slots[node], vec![None; k])
    }
}

/// Named trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<alloc::string::String>,
    values: Vec<Matrix<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<alloc::string::String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn values_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.values
    }

    pub fn values(&self) -> &[Matrix<T>] {
        &self.values
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Zero tensors shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Matrix<T>> {
        self.values.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect()
    }
}

/// Outputs of the fused pseudo-count/mean/std-dev projection.
#[derive(Clone, Copy, Debug)]
pub struct DpVars {
    /// `1 x (n+1)`, prior last.
    pub alpha: Var,
    /// `1 x n` raw log pseudo-counts for the next layer's skip connection.
    pub log_alpha: Var,
    pub mu: Var,
    pub sigma: Var,
}

/// Parameter handles of an NVIB projection inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct ProjVars {
    pub w_alpha: Var,
    pub b_alpha: Var,
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_sigma: Var,
    pub b_sigma: Var,
    pub w_q: Var,
    pub w_k: Var,
}

/// One recorded forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
    bound: Vec<Option<Var>>,
}

impl<T: Real> Graph<T> {
    /// `record = false` evaluates without storing backward closures.
    pub fn new(record: bool) -> Self {
        Self {
            nodes: Vec::new(),
            record,
            bound: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.node as usize].values[v.slot as usize]
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn needs(&self, inputs: &[Var]) -> bool {
        self.record && inputs.iter().any(|v| self.nodes[v.node as usize].needs_grad)
    }

    fn push(
        &mut self,
        values: Vec<Matrix<T>>,
        inputs: &[Var],
        backward: impl Fn(&Ctx<'_, T>, &[Option<Matrix<T>>], &mut Grads<T>) + 'static,
    ) -> usize {
        let needs_grad = self.needs(inputs);
        let backward: Option<Backward<T>> = if needs_grad { Some(Box::new(backward)) } else { None };
        self.nodes.push(Node {
            values,
            needs_grad,
            backward,
        });
        self.nodes.len() - 1
    }

    fn push1(
        &mut self,
        value: Matrix<T>,
        inputs: &[Var],
        backward: impl Fn(&Ctx<'_, T>, &Matrix<T>, &mut Grads<T>) + 'static,
    ) -> Var {
        let id = self.push(vec![value], inputs, move |ctx, g, grads| {
            if let Some(g) = &g[0] {
                backward(ctx, g, grads)
            }
        });
        Var::new(id, 0)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node {
            values: vec![value],
            needs_grad: self.record,
            backward: None,
        });
        Var::new(self.nodes.len() - 1, 0)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node {
            values: vec![value],
            needs_grad: false,
            backward: None,
        });
        Var::new(self.nodes.len() - 1, 0)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if self.bound.len() < store.len() {
            self.bound.resize(store.len(), None);
        }
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be a scalar");
        let mut grads = Grads {
            slots: self.nodes.iter().map(|n| vec![None; n.values.len()]).collect(),
            wanted: self.nodes.iter().map(|n| n.needs_grad).collect(),
        };
        grads.add(loss, Matrix::scalar(T::one()));
        let ctx = Ctx { nodes: &self.nodes };
        for id in (0..=loss.node as usize).rev() {
            let node = &self.nodes[id];
            let Some(bw) = &node.backward else { continue };
            let g = grads.take_node(id);
            if g.iter().any(Option::is_some) {
                bw(&ctx, &g, &mut grads);
            }
            grads.slots[id] = g;
        }
        grads
    }

    /// Gradients of every bound parameter, `None` for parameters unused in this graph.
    pub fn param_grads(&self, grads: &Grads<T>, n_params: usize) -> Vec<Option<Matrix<T>>> {
        (0..n_params)
            .map(|i| self.bound.get(i).copied().flatten().and_then(|v| grads.get(v).cloned()))
            .collect()
    }

    // ---- dense operations -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push1(out, &[a, b], move |ctx, g, grads| {
            if grads.wants(a) {
                grads.add(a, g.matmul_nt(ctx.value(b)));
            }
            if grads.wants(b) {
                grads.add(b, ctx.value(a).matmul_tn(g));
            }
        })
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        self.push1(out, &[a, b], move |ctx, g, grads| {
            if grads.wants(a) {
                grads.add(a, g.matmul(ctx.value(b)));
            }
            if grads.wants(b) {
                grads.add(b, g.matmul_tn(ctx.value(a)));
            }
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push1(out, &[a, b], move |_, g, grads| {
            grads.add(a, g.clone());
            grads.add(b, g.clone());
        })
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).clone();
        assert_eq!(r.shape(), (1, self.value(a).cols()), "bias shape mismatch");
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.as_slice()) {
                *o += b;
            }
        }
        self.push1(out, &[a, row], move |_, g, grads| {
            grads.add(a, g.clone());
            grads.add(row, g.col_sums());
        })
    }

    /// `a · w + b` with `b` a `1 x c` row.
    pub fn linear(&mut self, a: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(a, w);
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push1(out, &[a], move |_, g, grads| grads.add(a, g.map(|x| x * s)))
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push1(out, &[a], move |ctx, g, grads| {
            let (r, c) = ctx.value(a).shape();
            grads.add(a, Matrix::filled(r, c, g.item()));
        })
    }

    /// `Σ w_i x_i` over `1 x 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let total = terms.iter().fold(T::zero(), |acc, &(v, w)| acc + w * self.scalar(v));
        let terms_owned: Vec<(Var, T)> = terms.to_vec();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push1(Matrix::scalar(total), &inputs, move |_, g, grads| {
            for &(v, w) in &terms_owned {
                grads.add(v, Matrix::scalar(w * g.item()));
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push1(out, &[a], move |ctx, g, grads| {
            grads.add(
                a,
                ctx.value(a)
                    .zip_map(g, |x, gi| if x > T::zero() { gi } else { T::zero() }),
            );
        })
    }

    /// Inverted dropout. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = T::c(1.0 / (1.0 - rate));
        let (r, c) = self.value(a).shape();
        let mask = Matrix::from_fn(r, c, |_, _| if rng.random::<f64>() < rate { T::zero() } else { keep });
        let out = self.value(a).zip_map(&mask, |x, m| x * m);
        self.push1(out, &[a], move |_, g, grads| {
            grads.add(a, g.zip_map(&mask, |x, m| x * m))
        })
    }

    /// Row-wise layer normalisation with gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (n, p) = xv.shape();
        let gv = self.value(gain).as_slice().to_vec();
        let bv = self.value(bias).as_slice().to_vec();
        let mut xhat = Matrix::zeros(n, p);
        let mut inv_std = vec![T::zero(); n];
        let pf = T::c(p as f64);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / pf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / pf;
            let s = T::one() / (var + eps).sqrt();
            inv_std[i] = s;
            for (o, &v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let out = Matrix::from_fn(n, p, |i, h| xhat[(i, h)] * gv[h] + bv[h]);
        self.push1(out, &[x, gain, bias], move |ctx, g, grads| {
            let gv = ctx.value(gain).as_slice();
            let mut dx = Matrix::zeros(n, p);
            let mut dg = Matrix::zeros(1, p);
            for i in 0..n {
                let gr = g.row(i);
                let xr = xhat.row(i);
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for h in 0..p {
                    let d = gr[h] * gv[h];
                    m1 += d;
                    m2 += d * xr[h];
                    dg[(0, h)] += gr[h] * xr[h];
                }
                m1 /= pf;
                m2 /= pf;
                for h in 0..p {
                    dx[(i, h)] = inv_std[i] * (gr[h] * gv[h] - m1 - xr[h] * m2);
                }
            }
            grads.add(x, dx);
            grads.add(gain, dg);
            grads.add(bias, g.col_sums());
        })
    }

    /// Scaled dot-product attention `softmax(q kᵀ/√d) v`, optionally causal.
    /// Returns `(output, weights)`; gradients flow through both.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> (Var, Var) {
        let qv = self.value(q);
        let kv = self.value(k);
        let d = qv.cols();
        let scale = T::c(1.0 / libm::sqrt(d as f64));
        let mut w = qv.matmul_nt(kv);
        let (m, n) = w.shape();
        for i in 0..m {
            let row = w.row_mut(i);
            let mask: Vec<bool> = (0..n).map(|j| !causal || j <= i).collect();
            for x in row.iter_mut() {
                *x *= scale;
            }
            nvib::masked_softmax(row, &mask).expect("causal row always has a visible key");
        }
        let out = w.matmul(self.value(v));
        let me = self.nodes.len();
        let id = self.push(vec![out, w], &[q, k, v], move |ctx, g, grads| {
            let w = &ctx.nodes[me].values[1];
            let mut dw = match &g[1] {
                Some(gw) => gw.clone(),
                None => Matrix::zeros(w.rows(), w.cols()),
            };
            if let Some(go) = &g[0] {
                dw.add_assign(&go.matmul_nt(ctx.value(v)));
                if grads.wants(v) {
                    grads.add(v, w.matmul_tn(go));
                }
            }
            let mut ds = softmax_rows_backward(w, &dw);
            ds.scale_in_place(scale);
            if grads.wants(q) {
                grads.add(q, ds.matmul(ctx.value(k)));
            }
            if grads.wants(k) {
                grads.add(k, ds.matmul_tn(ctx.value(q)));
            }
        });
        (Var::new(id, 0), Var::new(id, 1))
    }

    /// Rows of `table` at `ids`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let out = self.value(table).select_rows(ids);
        let ids = ids.to_vec();
        self.push1(out, &[table], move |ctx, g, grads| {
            let t = ctx.value(table);
            let mut dt = Matrix::zeros(t.rows(), t.cols());
            for (r, &id) in ids.iter().enumerate() {
                for (o, &x) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                    *o += x;
                }
            }
            grads.add(table, dt);
        })
    }

    /// Rows of `a` at `idx` (used to gather retained memory vectors).
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        self.embed(a, idx)
    }

    /// Mean token cross-entropy of `logits` (`m x V`) against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let (m, vsz) = lv.shape();
        assert_eq!(targets.len(), m, "target length mismatch");
        let mut probs = Matrix::zeros(m, vsz);
        let mut loss = T::zero();
        for i in 0..m {
            let row = lv.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for (p, &x) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (x - max).exp();
                total += *p;
            }
            for p in probs.row_mut(i) {
                *p /= total;
            }
            loss += max + total.ln() - row[targets[i]];
        }
        let inv_m = T::c(1.0 / m as f64);
        let targets = targets.to_vec();
        self.push1(Matrix::scalar(loss * inv_m), &[logits], move |_, g, grads| {
            let s = g.item() * inv_m;
            let mut d = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                d[(i, t)] -= T::one();
            }
            d.scale_in_place(s);
            grads.add(logits, d);
        })
    }

    // ---- NVIB operations --------------------------------------------------

    fn projection(&self, pv: &ProjVars) -> NvibProjection<T> {
        proj_from_ctx(&Ctx { nodes: &self.nodes }, pv)
    }

    /// Fused pseudo-count, mean and standard-deviation projection with the
    /// prior component appended.
    pub fn nvib_project(&mut self, hidden: Var, log_alpha_prev: Var, pv: ProjVars, layer: usize) -> Result<DpVars> {
        let proj = self.projection(&pv);
        let prev = self.value(log_alpha_prev).as_slice().to_vec();
        let params = nvib::project_dp_params(self.value(hidden), &prev, &proj, layer)?;
        let n = params.n();
        let values = vec![
            Matrix::row_vector(&params.alpha),
            Matrix::row_vector(&params.log_alpha),
            params.mu,
            params.sigma,
        ];
        let inputs = [
            hidden,
            log_alpha_prev,
            pv.w_alpha,
            pv.b_alpha,
            pv.w_mu,
            pv.b_mu,
            pv.w_sigma,
            pv.b_sigma,
        ];
        let me = self.nodes.len();
        let id = self.push(values, &inputs, move |ctx, g, grads| {
            let vals = &ctx.nodes[me].values;
            let params = DpParams {
                alpha: vals[0].as_slice().to_vec(),
                log_alpha: vals[1].as_slice().to_vec(),
                mu: vals[2].clone(),
                sigma: vals[3].clone(),
                retained: vec![true; n + 1],
            };
            let p = params.p();
            let mut dg = DpParamsGrad::zeros(n, p);
            if let Some(x) = &g[0] {
                dg.alpha.copy_from_slice(x.as_slice());
            }
            if let Some(x) = &g[1] {
                dg.log_alpha.copy_from_slice(x.as_slice());
            }
            if let Some(x) = &g[2] {
                dg.mu = x.clone();
            }
            if let Some(x) = &g[3] {
                dg.sigma = x.clone();
            }
            let proj = proj_from_ctx(ctx, &pv);
            let r = nvib::project_dp_params_backward(ctx.value(hidden), &proj, &params, &dg);
            grads.add(hidden, r.hidden);
            grads.add(log_alpha_prev, Matrix::row_vector(&r.log_alpha_prev));
            grads.add(pv.w_alpha, Matrix::row_vector(&r.w_alpha));
            grads.add(pv.b_alpha, Matrix::scalar(r.b_alpha));
            grads.add(pv.w_mu, r.w_mu);
            grads.add(pv.b_mu, Matrix::row_vector(&r.b_mu));
            grads.add(pv.w_sigma, r.w_sigma);
            grads.add(pv.b_sigma, Matrix::row_vector(&r.b_sigma));
        });
        Ok(DpVars {
            alpha: Var::new(id, 0),
            log_alpha: Var::new(id, 1),
            mu: Var::new(id, 2),
            sigma: Var::new(id, 3),
        })
    }

    /// Current values of projected DP parameters (all components retained).
    pub fn dp_params(&self, dp: &DpVars) -> DpParams<T> {
        let alpha = self.value(dp.alpha).as_slice().to_vec();
        let k = alpha.len();
        DpParams {
            alpha,
            log_alpha: self.value(dp.log_alpha).as_slice().to_vec(),
            mu: self.value(dp.mu).clone(),
            sigma: self.value(dp.sigma).clone(),
            retained: vec![true; k],
        }
    }

    /// One draw from the DP. Returns `(z, log_pi)` with `log_pi` as `1 x (n+1)`.
    pub fn nvib_sample<R: Rng + ?Sized>(&mut self, dp: &DpVars, rng: &mut R) -> Result<(Var, Var)> {
        let params = self.dp_params(dp);
        let (mix, cache): (SampledMixture<T>, SampleCache<T>) = nvib::sample_dp(&params, rng)?;
        let values = vec![mix.z, Matrix::row_vector(&mix.log_pi)];
        let (alpha, mu, sigma) = (dp.alpha, dp.mu, dp.sigma);
        let id = self.push(values, &[alpha, mu, sigma], move |ctx, g, grads| {
            let a = ctx.value(alpha);
            let k = a.cols();
            let p = ctx.value(mu).cols();
            let dz = g[0].clone().unwrap_or_else(|| Matrix::zeros(k, p));
            let dlp = g[1].clone().unwrap_or_else(|| Matrix::zeros(1, k));
            let params = DpParams {
                alpha: a.as_slice().to_vec(),
                log_alpha: vec![T::zero(); k - 1],
                mu: ctx.value(mu).clone(),
                sigma: ctx.value(sigma).clone(),
                retained: vec![true; k],
            };
            let r = nvib::sample_dp_backward(&params, &cache, &dz, dlp.as_slice());
            grads.add(alpha, Matrix::row_vector(&r.alpha));
            grads.add(mu, r.mu);
            grads.add(sigma, r.sigma);
        });
        Ok((Var::new(id, 0), Var::new(id, 1)))
    }

    /// Training-time denoising attention over a sampled mixture. Returns
    /// `(output, weights)`; only `output` carries gradients.
    pub fn nvib_attention_train(
        &mut self,
        queries: Var,
        z: Var,
        log_pi: Var,
        w_q: Var,
        w_k: Var,
    ) -> Result<(Var, Var)> {
        let proj = qk_projection(self.value(w_q), self.value(w_k));
        let mix = SampledMixture::new(self.value(z).clone(), self.value(log_pi).as_slice().to_vec());
        let fwd = nvib::denoising_attention_train(self.value(queries), &mix, &proj)?;
        let values = vec![fwd.output.clone(), fwd.weights.clone()];
        let id = self.push(values, &[queries, z, log_pi, w_q, w_k], move |ctx, g, grads| {
            let Some(go) = &g[0] else { return };
            let proj = qk_projection(ctx.value(w_q), ctx.value(w_k));
            let mix = SampledMixture::new(ctx.value(z).clone(), ctx.value(log_pi).as_slice().to_vec());
            let r = nvib::denoising_attention_train_backward(ctx.value(queries), &mix, &proj, &fwd, go);
            grads.add(queries, r.queries_raw);
            grads.add(z, r.z);
            grads.add(log_pi, Matrix::row_vector(&r.log_pi));
            grads.add(w_q, r.w_q);
            grads.add(w_k, r.w_k);
        });
        Ok((Var::new(id, 0), Var::new(id, 1)))
    }

    /// Test-time (posterior-mean) denoising attention over thresholded
    /// parameters. `retained` flags all `n + 1` components; dropped ones must
    /// have `alpha = 0` in the `alpha` node or are zeroed here.
    #[allow(clippy::too_many_arguments)]
    pub fn nvib_attention_test(
        &mut self,
        queries: Var,
        dp: &DpVars,
        retained: &[bool],
        w_q: Var,
        w_k: Var,
    ) -> Result<(Var, Var)> {
        let proj = qk_projection(self.value(w_q), self.value(w_k));
        let mut params = self.dp_params(dp);
        apply_retained(&mut params, retained);
        let fwd = nvib::denoising_attention_test(self.value(queries), &params, &proj)?;
        let values = vec![fwd.output.clone(), fwd.weights.clone()];
        let (alpha, mu, sigma) = (dp.alpha, dp.mu, dp.sigma);
        let retained = retained.to_vec();
        let id = self.push(values, &[queries, alpha, mu, sigma, w_q, w_k], move |ctx, g, grads| {
            let Some(go) = &g[0] else { return };
            let proj = qk_projection(ctx.value(w_q), ctx.value(w_k));
            let k = retained.len();
            let mut params = DpParams {
                alpha: ctx.value(alpha).as_slice().to_vec(),
                log_alpha: vec![T::zero(); k - 1],
                mu: ctx.value(mu).clone(),
                sigma: ctx.value(sigma).clone(),
                retained: vec![true; k],
            };
            apply_retained(&mut params, &retained);
            let r = nvib::denoising_attention_test_backward(ctx.value(queries), &params, &proj, &fwd, go)
                .expect("forward succeeded on the same parameters");
            grads.add(queries, r.queries_raw);
            grads.add(alpha, Matrix::row_vector(&r.alpha));
            grads.add(mu, r.mu);
            grads.add(sigma, r.sigma);
            grads.add(w_q, r.w_q);
            grads.add(w_k, r.w_k);
        });
        Ok((Var::new(id, 0), Var::new(id, 1)))
    }

    /// Gaussian KL term of a layer (all components, weighted by `α/α₀`).
    pub fn nvib_kl_gaussian(&mut self, dp: &DpVars) -> Var {
        let (alpha, mu, sigma) = (dp.alpha, dp.mu, dp.sigma);
        let kl = nvib::kl_gaussian(self.value(alpha).as_slice(), self.value(mu), self.value(sigma));
        self.push1(Matrix::scalar(kl), &[alpha, mu, sigma], move |ctx, g, grads| {
            let s = g.item();
            let mut r = nvib::kl_gaussian_grad(ctx.value(alpha).as_slice(), ctx.value(mu), ctx.value(sigma));
            r.mu.scale_in_place(s);
            r.sigma.scale_in_place(s);
            grads.add(alpha, Matrix::row_vector(&r.alpha).map(|x| x * s));
            grads.add(mu, r.mu);
            grads.add(sigma, r.sigma);
        })
    }

    /// Dirichlet KL term between the layer's total pseudo-count (prior
    /// included) and the length-conditioned prior total.
    pub fn nvib_kl_dirichlet(&mut self, dp: &DpVars, prior_total: T) -> Result<Var> {
        let alpha = dp.alpha;
        let a0 = self.value(alpha).sum();
        let kl = nvib::kl_dirichlet(a0, prior_total)?;
        let (da, _) = nvib::kl_dirichlet_grad(a0, prior_total)?;
        Ok(self.push1(Matrix::scalar(kl), &[alpha], move |ctx, g, grads| {
            let k = ctx.value(alpha).cols();
            grads.add(alpha, Matrix::filled(1, k, da * g.item()));
        }))
    }
}

fn qk_projection<T: Real>(w_q: &Matrix<T>, w_k: &Matrix<T>) -> NvibProjection<T> {
    let p = w_q.rows();
    NvibProjection {
        w_alpha: Vec::new(),
        b_alpha: T::zero(),
        w_mu: Matrix::zeros(p, 0),
        b_mu: Vec::new(),
        w_sigma: Matrix::zeros(p, 0),
        b_sigma: Vec::new(),
        w_q: w_q.clone(),
        w_k: w_k.clone(),
    }
}

fn proj_from_ctx<T: Real>(ctx: &Ctx<'_, T>, pv: &ProjVars) -> NvibProjection<T> {
    NvibProjection {
        w_alpha: ctx.value(pv.w_alpha).as_slice().to_vec(),
        b_alpha: ctx.value(pv.b_alpha).item(),
        w_mu: ctx.value(pv.w_mu).clone(),
        b_mu: ctx.value(pv.b_mu).as_slice().to_vec(),
        w_sigma: ctx.value(pv.w_sigma).clone(),
        b_sigma: ctx.value(pv.b_sigma).as_slice().to_vec(),
        w_q: ctx.value(pv.w_q).clone(),
        w_k: ctx.value(pv.w_k).clone(),
    }
}

fn apply_retained<T: Real>(params: &mut DpParams<T>, retained: &[bool]) {
    assert_eq!(retained.len(), params.alpha.len(), "retained mask length mismatch");
    for (i, &keep) in retained.iter().enumerate() {
        params.retained[i] = keep;
        if !keep {
            params.alpha[i] = T::zero();
        }
    }
}

/// `dS = W ⊙ (dW − rowsum(dW ⊙ W))`.
fn softmax_rows_backward<T: Real>(w: &Matrix<T>, dw: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        let wr = w.row(i);
        let gr = dw.row(i);
        let dot: T = wr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for (o, (&a, &b)) in out.row_mut(i).iter_mut().zip(wr.iter().zip(gr)) {
            *o = a * (b - dot);
        }
    }
    out
}
