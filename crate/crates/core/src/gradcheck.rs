//! Finite-difference certification of the NVIB kernels' analytic gradients.
//!
//! Each kernel is wrapped as a scalar objective `Σ c ⊙ outputs` with random
//! weights `c`, its inputs flattened into one vector, and every coordinate
//! of the analytic gradient is compared with a central difference.
//!
//! The sampling step is certified separately on `E[f(π)]`: the analytic
//! estimate averages implicit-reparameterisation gradients over draws from
//! [`sample_dp`], while the reference differentiates a Monte-Carlo
//! expectation built from inverse-CDF Gamma variates with common random
//! numbers.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::matrix::Matrix;
use crate::nvib::{
    denoising_attention_test, denoising_attention_test_backward, denoising_attention_train,
    denoising_attention_train_backward, kl_dirichlet, kl_dirichlet_grad, kl_gaussian, kl_gaussian_grad,
    project_dp_params, project_dp_params_backward, sample_dp, sample_dp_backward, DpParams, DpParamsGrad,
    NvibProjection, SampledMixture,
};
use crate::special::{gamma_ln_pdf, gamma_p};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative error between analytic and numeric gradients.
pub const REL_TOLERANCE: f64 = 1e-4;

/// Outcome of one certification.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    /// Worst relative error (deterministic checks) or worst z-score (sampling).
    pub worst: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Relative error of one gradient vector against its finite-difference
/// estimate. Coordinates are compared relative to the larger of their own
/// magnitude and 1% of the largest coordinate of the vector.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (1e-2 * scale).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Cursor over a flattened parameter vector.
struct Reader<'a> {
    data: &'a [f64],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [f64]) -> Self {
        Self { data, pos: 0 }
    }

    fn take(&mut self, k: usize) -> Vec<f64> {
        let out = self.data[self.pos..self.pos + k].to_vec();
        self.pos += k;
        out
    }

    fn scalar(&mut self) -> f64 {
        self.take(1)[0]
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, self.take(rows * cols))
    }
}

fn normal_vec<R: Rng + ?Sized>(k: usize, scale: f64, rng: &mut R) -> Vec<f64> {
    (0..k)
        .map(|_| {
            let x: f64 = StandardNormal.sample(rng);
            scale * x
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn flatten_proj(proj: &NvibProjection<f64>, out: &mut Vec<f64>) {
    out.extend_from_slice(&proj.w_alpha);
    out.push(proj.b_alpha);
    out.extend_from_slice(proj.w_mu.as_slice());
    out.extend_from_slice(&proj.b_mu);
    out.extend_from_slice(proj.w_sigma.as_slice());
    out.extend_from_slice(&proj.b_sigma);
}

fn read_proj(r: &mut Reader<'_>, p: usize, template: &NvibProjection<f64>) -> NvibProjection<f64> {
    NvibProjection {
        w_alpha: r.take(p),
        b_alpha: r.scalar(),
        w_mu: r.matrix(p, p),
        b_mu: r.take(p),
        w_sigma: r.matrix(p, p),
        b_sigma: r.take(p),
        w_q: template.w_q.clone(),
        w_k: template.w_k.clone(),
    }
}

fn report(name: &str, instances: usize, worst: f64, threshold: f64) -> CheckReport {
    CheckReport {
        name: name.into(),
        instances,
        worst,
        threshold,
        passed: worst < threshold,
    }
}

/// Certifies [`kl_dirichlet`] on `instances` random argument pairs.
pub fn check_kl_dirichlet<R: Rng + ?Sized>(instances: usize, rng: &mut R) -> CheckReport {
    let dist = Uniform::new(0.2, 40.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let x = [dist.sample(rng), dist.sample(rng)];
        let (da, db) = kl_dirichlet_grad(x[0], x[1]).unwrap();
        let num = numeric_gradient(&x, |v| kl_dirichlet(v[0], v[1]).unwrap());
        worst = worst.max(relative_error(&[da, db], &num));
    }
    report("kl_dirichlet", instances, worst, REL_TOLERANCE)
}

/// Certifies [`kl_gaussian`] with respect to pseudo-counts, means and
/// standard deviations.
pub fn check_kl_gaussian<R: Rng + ?Sized>(instances: usize, rng: &mut R) -> CheckReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let k = rng.random_range(1..=5);
        let p = rng.random_range(1..=4);
        let mut x: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..3.0)).collect();
        x.extend(normal_vec(k * p, 1.0, rng));
        x.extend((0..k * p).map(|_| rng.random_range(0.3..2.0)));
        let eval = |v: &[f64]| {
            let mut r = Reader::new(v);
            let alpha = r.take(k);
            let mu = r.matrix(k, p);
            let sigma = r.matrix(k, p);
            kl_gaussian(&alpha, &mu, &sigma)
        };
        let mut r = Reader::new(&x);
        let (alpha, mu, sigma) = (r.take(k), r.matrix(k, p), r.matrix(k, p));
        let g = kl_gaussian_grad(&alpha, &mu, &sigma);
        let mut analytic = g.alpha.clone();
        analytic.extend_from_slice(g.mu.as_slice());
        analytic.extend_from_slice(g.sigma.as_slice());
        worst = worst.max(relative_error(&analytic, &numeric_gradient(&x, eval)));
    }
    report("kl_gaussian", instances, worst, REL_TOLERANCE)
}

/// Certifies [`project_dp_params`] with respect to the hidden vectors, the
/// skip-connection input and every head parameter.
pub fn check_project_dp_params<R: Rng + ?Sized>(instances: usize, rng: &mut R) -> CheckReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(1..=4);
        let p = rng.random_range(2..=4);
        let template = NvibProjection::<f64>::random(p, p, 0.4, rng);
        let mut x = normal_vec(n * p, 1.0, rng);
        x.extend(normal_vec(n, 0.5, rng));
        flatten_proj(&template, &mut x);
        // Objective weights over alpha (n+1), log_alpha (n), mu and sigma of data rows.
        let c = normal_vec((n + 1) + n + 2 * n * p, 1.0, rng);
        let eval = |v: &[f64]| {
            let mut r = Reader::new(v);
            let hidden = r.matrix(n, p);
            let prev = r.take(n);
            let proj = read_proj(&mut r, p, &template);
            let out = project_dp_params(&hidden, &prev, &proj, 0).unwrap();
            let mut s = dot(&c[..n + 1], &out.alpha);
            s += dot(&c[n + 1..2 * n + 1], &out.log_alpha);
            s += dot(&c[2 * n + 1..2 * n + 1 + n * p], &out.mu.as_slice()[..n * p]);
            s += dot(&c[2 * n + 1 + n * p..], &out.sigma.as_slice()[..n * p]);
            s
        };
        let mut r = Reader::new(&x);
        let hidden = r.matrix(n, p);
        let prev = r.take(n);
        let proj = read_proj(&mut r, p, &template);
        let out = project_dp_params(&hidden, &prev, &proj, 0).unwrap();
        let mut grad = DpParamsGrad::zeros(n, p);
        grad.alpha.copy_from_slice(&c[..n + 1]);
        grad.log_alpha.copy_from_slice(&c[n + 1..2 * n + 1]);
        grad.mu.as_mut_slice()[..n * p].copy_from_slice(&c[2 * n + 1..2 * n + 1 + n * p]);
        grad.sigma.as_mut_slice()[..n * p].copy_from_slice(&c[2 * n + 1 + n * p..]);
        let g = project_dp_params_backward(&hidden, &proj, &out, &grad);
        let mut analytic = g.hidden.into_vec();
        analytic.extend_from_slice(&g.log_alpha_prev);
        analytic.extend_from_slice(&g.w_alpha);
        analytic.push(g.b_alpha);
        analytic.extend_from_slice(g.w_mu.as_slice());
        analytic.extend_from_slice(&g.b_mu);
        analytic.extend_from_slice(g.w_sigma.as_slice());
        analytic.extend_from_slice(&g.b_sigma);
        worst = worst.max(relative_error(&analytic, &numeric_gradient(&x, eval)));
    }
    report("project_dp_params", instances, worst, REL_TOLERANCE)
}

/// Certifies [`denoising_attention_train`] with respect to queries, sampled
/// vectors, log weights and the query/key maps.
pub fn check_denoising_attention_train<R: Rng + ?Sized>(instances: usize, rng: &mut R) -> CheckReport {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let m = rng.random_range(1..=3);
        let k = rng.random_range(1..=5);
        let p = rng.random_range(2..=4);
        let d = rng.random_range(1..=4);
        let base = NvibProjection::<f64>::random(p, d, 0.5, rng);
        let mut x = normal_vec(m * p, 1.0, rng);
        x.extend(normal_vec(k * p, 1.0, rng));
        x.extend(normal_vec(k, 0.7, rng));
        x.extend_from_slice(base.w_q.as_slice());
        x.extend_from_slice(base.w_k.as_slice());
        let c = normal_vec(m * p, 1.0, rng);
        let unpack = |v: &[f64]| {
            let mut r = Reader::new(v);
            let q = r.matrix(m, p);
            let z = r.matrix(k, p);
            let lp = r.take(k);
            let mut proj = base.clone();
            proj.w_q = r.matrix(p, d);
            proj.w_k = r.matrix(p, d);
            (q, SampledMixture::new(z, lp), proj)
        };
        let eval = |v: &[f64]| {
            let (q, mix, proj) = unpack(v);
            dot(
                &c,
                denoising_attention_train(&q, &mix, &proj).unwrap().output.as_slice(),
            )
        };
        let (q, mix, proj) = unpack(&x);
        let fwd = denoising_attention_train(&q, &mix, &proj).unwrap();
        let g = denoising_attention_train_backward(&q, &mix, &proj, &fwd, &Matrix::from_vec(m, p, c.clone()));
        let mut analytic = g.queries_raw.into_vec();
        analytic.extend_from_slice(g.z.as_slice());
        analytic.extend_from_slice(&g.log_pi);
        analytic.extend_from_slice(g.w_q.as_slice());
        analytic.extend_from_slice(g.w_k.as_slice());
        worst = worst.max(relative_error(&analytic, &numeric_gradient(&x, eval)));
    }
    report("denoising_attention_train", instances, worst, REL_TOLERANCE)
}

/// Certifies [`denoising_attention_test`] with respect to queries,
/// pseudo-counts, means, standard deviations and the query/key maps. Some
/// instances carry a pruned component.
pub fn check_denoising_attention_test<R: Rng + ?Sized>(instances: usize, rng: &mut R) -> CheckReport {
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let m = rng.random_range(1..=3);
        let n = rng.random_range(1..=4);
        let k = n + 1;
        let p = rng.random_range(2..=4);
        let d = rng.random_range(1..=4);
        let base = NvibProjection::<f64>::random(p, d, 0.5, rng);
        let dropped = if inst % 3 == 0 {
            Some(rng.random_range(0..n))
        } else {
            None
        };
        let mut x = normal_vec(m * p, 1.0, rng);
        x.extend((0..k).map(|_| rng.random_range(0.2..3.0)));
        x.extend(normal_vec(k * p, 1.0, rng));
        x.extend((0..k * p).map(|_| rng.random_range(0.3..2.0)));
        x.extend_from_slice(base.w_q.as_slice());
        x.extend_from_slice(base.w_k.as_slice());
        let c = normal_vec(m * p, 1.0, rng);
        let unpack = |v: &[f64]| {
            let mut r = Reader::new(v);
            let q = r.matrix(m, p);
            let alpha = r.take(k);
            let mu = r.matrix(k, p);
            let sigma = r.matrix(k, p);
            let mut proj = base.clone();
            proj.w_q = r.matrix(p, d);
            proj.w_k = r.matrix(p, d);
            let mut retained = vec![true; k];
            let mut alpha = alpha;
            if let Some(j) = dropped {
                retained[j] = false;
                alpha[j] = 0.0;
            }
            let params = DpParams {
                alpha,
                log_alpha: vec![0.0; n],
                mu,
                sigma,
                retained,
            };
            (q, params, proj)
        };
        let eval = |v: &[f64]| {
            let (q, params, proj) = unpack(v);
            dot(
                &c,
                denoising_attention_test(&q, &params, &proj).unwrap().output.as_slice(),
            )
        };
        let (q, params, proj) = unpack(&x);
        let fwd = denoising_attention_test(&q, &params, &proj).unwrap();
        let g =
            denoising_attention_test_backward(&q, &params, &proj, &fwd, &Matrix::from_vec(m, p, c.clone())).unwrap();
        let mut analytic = g.queries_raw.into_vec();
        analytic.extend_from_slice(&g.alpha);
        analytic.extend_from_slice(g.mu.as_slice());
        analytic.extend_from_slice(g.sigma.as_slice());
        analytic.extend_from_slice(g.w_q.as_slice());
        analytic.extend_from_slice(g.w_k.as_slice());
        let numeric = numeric_gradient(&x, eval);
        if let Some(j) = dropped {
            // Dropped rows are constants of the objective: the analytic path
            // must report exact zeros there.
            let off = m * p;
            let rows_ok = analytic[off + j] == 0.0
                && (0..p).all(|h| analytic[off + k + j * p + h] == 0.0)
                && (0..p).all(|h| analytic[off + k + k * p + j * p + h] == 0.0);
            if !rows_ok {
                worst = f64::INFINITY;
            }
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    report("denoising_attention_test", instances, worst, REL_TOLERANCE)
}

/// Quantile of `Gamma(a, 1)` at probability `u`, by Halley iteration on the
/// regularised incomplete gamma function.
pub fn gamma_quantile(a: f64, u: f64) -> f64 {
    let a1 = a - 1.0;
    let mut x = if a > 1.0 {
        let pp = if u < 0.5 { u } else { 1.0 - u };
        let t = libm::sqrt(-2.0 * libm::log(pp));
        let mut z = (2.30753 + t * 0.27061) / (1.0 + t * (0.99229 + t * 0.04481)) - t;
        if u < 0.5 {
            z = -z;
        }
        let base = 1.0 - 1.0 / (9.0 * a) - z / (3.0 * libm::sqrt(a));
        (a * base * base * base).max(1e-3)
    } else {
        let t = 1.0 - a * (0.253 + a * 0.12);
        if u < t {
            libm::pow(u / t, 1.0 / a)
        } else {
            1.0 - libm::log(1.0 - (u - t) / (1.0 - t))
        }
    };
    for _ in 0..100 {
        if x <= 0.0 {
            return 0.0;
        }
        let err = gamma_p(a, x) - u;
        let dens = libm::exp(gamma_ln_pdf(a, x));
        let ratio = err / dens;
        let step = ratio / (1.0 - 0.5 * (ratio * (a1 / x - 1.0)).min(1.0));
        let next = x - step;
        x = if next <= 0.0 { 0.5 * x } else { next };
        if step.abs() < 1e-15 * x {
            break;
        }
    }
    x
}

/// Functional of the mixture weights used by the sampling certification.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightFunctional {
    /// `Σ π_j²`
    SquaredNorm,
    /// `-Σ π_j ln π_j`
    Entropy,
}

impl WeightFunctional {
    fn value(self, pi: &[f64]) -> f64 {
        match self {
            Self::SquaredNorm => pi.iter().map(|p| p * p).sum(),
            Self::Entropy => -pi
                .iter()
                .map(|&p| if p > 0.0 { p * libm::log(p) } else { 0.0 })
                .sum::<f64>(),
        }
    }

    /// `∂f/∂ log π_j`.
    fn grad_log_pi(self, pi: &[f64]) -> Vec<f64> {
        match self {
            Self::SquaredNorm => pi.iter().map(|p| 2.0 * p * p).collect(),
            Self::Entropy => pi
                .iter()
                .map(|&p| if p > 0.0 { -p * (libm::log(p) + 1.0) } else { 0.0 })
                .collect(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SquaredNorm => "squared_norm",
            Self::Entropy => "entropy",
        }
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var / n))
}

/// Per-component comparison of the sampling-gradient certification.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingComparison {
    pub analytic: Vec<(f64, f64)>,
    pub numeric: Vec<(f64, f64)>,
    /// `|analytic − numeric| / sqrt(se_a² + se_n²)` per data component.
    pub z_scores: Vec<f64>,
}

/// Compares `d/dα E[f(π)]` from implicit reparameterisation against finite
/// differences of a common-random-number Monte-Carlo expectation.
pub fn compare_sampling_gradient<R: Rng + ?Sized>(
    alpha: &[f64],
    functional: WeightFunctional,
    samples: usize,
    rng: &mut R,
) -> SamplingComparison {
    let n = alpha.len();
    let params = DpParams::with_prior(
        alpha.iter().map(|a| libm::log(*a)).collect(),
        Matrix::zeros(n, 1),
        Matrix::filled(n, 1, 1.0),
    );
    let full: Vec<f64> = params.alpha.clone();
    let k = full.len();

    let mut per_sample: Vec<Vec<f64>> = vec![Vec::with_capacity(samples); n];
    for _ in 0..samples {
        let (_, cache) = sample_dp(&params, rng).unwrap();
        let g = functional.grad_log_pi(&cache.pi);
        let grad = sample_dp_backward(&params, &cache, &Matrix::zeros(k, 1), &g);
        for (i, acc) in per_sample.iter_mut().enumerate() {
            acc.push(grad.alpha[i]);
        }
    }
    let analytic: Vec<(f64, f64)> = per_sample.iter().map(|v| mean_and_se(v)).collect();

    let h = 1e-3;
    let mut quotients: Vec<Vec<f64>> = vec![Vec::with_capacity(samples); n];
    let mut gam = vec![0.0; k];
    for _ in 0..samples {
        let u: Vec<f64> = (0..k).map(|_| rng.random_range(1e-12..1.0)).collect();
        for j in 0..k {
            gam[j] = gamma_quantile(full[j], u[j]);
        }
        for i in 0..n {
            let eval = |a: f64| {
                let mut g = gam.clone();
                g[i] = gamma_quantile(a, u[i]);
                let s: f64 = g.iter().sum();
                let pi: Vec<f64> = g.iter().map(|x| x / s).collect();
                functional.value(&pi)
            };
            quotients[i].push((eval(full[i] + h) - eval(full[i] - h)) / (2.0 * h));
        }
    }
    let numeric: Vec<(f64, f64)> = quotients.iter().map(|v| mean_and_se(v)).collect();
    let z_scores = analytic
        .iter()
        .zip(&numeric)
        .map(|(&(ma, sa), &(mn, sn))| (ma - mn).abs() / libm::sqrt(sa * sa + sn * sn))
        .collect();
    SamplingComparison {
        analytic,
        numeric,
        z_scores,
    }
}

/// Certifies the sampling gradient for one functional at a fixed set of
/// pseudo-counts. Passes when every component agrees within 3 standard errors.
pub fn check_sampling_gradient<R: Rng + ?Sized>(
    functional: WeightFunctional,
    samples: usize,
    rng: &mut R,
) -> CheckReport {
    let alpha = [0.6, 1.7, 3.2];
    let cmp = compare_sampling_gradient(&alpha, functional, samples, rng);
    let worst = cmp.z_scores.iter().copied().fold(0.0, f64::max);
    let mut rep = report("sample_dp", samples, worst, 3.0);
    rep.name = alloc::format!("sample_dp[{}]", functional.name());
    rep
}

/// Runs every certification at the acceptance sizes.
pub fn run_all<R: Rng + ?Sized>(instances: usize, samples: usize, rng: &mut R) -> Vec<CheckReport> {
    vec![
        check_kl_dirichlet(instances, rng),
        check_kl_gaussian(instances, rng),
        check_project_dp_params(instances, rng),
        check_denoising_attention_train(instances, rng),
        check_denoising_attention_test(instances, rng),
        check_sampling_gradient(WeightFunctional::SquaredNorm, samples, rng),
        check_sampling_gradient(WeightFunctional::Entropy, samples, rng),
    ]
}
