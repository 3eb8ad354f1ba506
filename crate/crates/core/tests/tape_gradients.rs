use nvib_core::autodiff::{Graph, ProjVars, Var};
use nvib_core::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randm(r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    Matrix::from_fn(r, c, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        scale * x
    })
}

/// Compares tape gradients of `build` with central differences over every
/// entry of every input.
fn check(inputs: Vec<Matrix<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Matrix<f64>]| {
        let mut g = Graph::new(false);
        let vars: Vec<Var> = xs.iter().map(|m| g.leaf(m.clone())).collect();
        let out = build(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new(true);
    let vars: Vec<Var> = inputs.iter().map(|m| g.leaf(m.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);

    let h = nvib_core::gradcheck::FD_STEP;
    let mut worst = 0.0f64;
    let mut probe = inputs.clone();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(inputs[i].rows(), inputs[i].cols()));
        let mut numeric = Vec::new();
        for j in 0..inputs[i].len() {
            let orig = probe[i].as_slice()[j];
            probe[i].as_mut_slice()[j] = orig + h;
            let up = eval(&probe);
            probe[i].as_mut_slice()[j] = orig - h;
            let down = eval(&probe);
            probe[i].as_mut_slice()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        worst = worst.max(nvib_core::gradcheck::relative_error(analytic.as_slice(), &numeric));
    }
    worst
}

/// Random linear read-out of a node, making any output a scalar objective.
fn readout(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let (r, c) = g.value(v).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(randm(r, c, 1.0, &mut rng));
    let prod = g.add(v, w);
    // (v + w)² summed has gradient 2(v + w): non-trivial in every entry.
    let sq = g.matmul_nt(prod, prod);
    g.sum(sq)
}

#[test]
fn dense_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = randm(3, 4, 1.0, &mut rng);
    let b = randm(4, 2, 1.0, &mut rng);
    let c = randm(5, 4, 1.0, &mut rng);
    let bias = randm(1, 2, 1.0, &mut rng);
    let e = check(vec![a.clone(), b.clone(), bias], |g, v| {
        let h = g.linear(v[0], v[1], v[2]);
        let h = g.relu(h);
        let h = g.scale(h, 0.7);
        readout(g, h, 11)
    });
    assert!(e < 1e-5, "linear/relu/scale {e}");
    let e = check(vec![a.clone(), c], |g, v| {
        let h = g.matmul_nt(v[0], v[1]);
        readout(g, h, 12)
    });
    assert!(e < 1e-5, "matmul_nt {e}");
}

#[test]
fn layer_norm_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = randm(4, 6, 2.0, &mut rng);
    let gain = randm(1, 6, 1.0, &mut rng);
    let bias = randm(1, 6, 1.0, &mut rng);
    let e = check(vec![x, gain, bias], |g, v| {
        let h = g.layer_norm(v[0], v[1], v[2], 1e-5);
        readout(g, h, 13)
    });
    assert!(e < 1e-5, "{e}");
}

#[test]
fn attention_op_both_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for causal in [false, true] {
        let q = randm(4, 3, 1.0, &mut rng);
        let k = randm(4, 3, 1.0, &mut rng);
        let v = randm(4, 5, 1.0, &mut rng);
        let e = check(vec![q, k, v], |g, x| {
            let (out, w) = g.attention(x[0], x[1], x[2], causal);
            let a = readout(g, out, 14);
            let b = readout(g, w, 15);
            g.weighted_sum(&[(a, 1.0), (b, 0.5)])
        });
        assert!(e < 1e-5, "causal={causal} {e}");
    }
}

#[test]
fn embedding_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let table = randm(6, 3, 1.0, &mut rng);
    let w = randm(3, 6, 1.0, &mut rng);
    let e = check(vec![table, w], |g, v| {
        let h = g.embed(v[0], &[1, 3, 1, 5]);
        let logits = g.matmul(h, v[1]);
        g.cross_entropy(logits, &[0, 2, 2, 5])
    });
    assert!(e < 1e-5, "{e}");
}

#[test]
fn dropout_matches_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randm(5, 5, 1.0, &mut rng);
    let e = check(vec![x], |g, v| {
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let h = g.dropout(v[0], 0.3, &mut r);
        readout(g, h, 16)
    });
    assert!(e < 1e-5, "{e}");
}

fn proj_inputs(p: usize, rng: &mut ChaCha8Rng) -> Vec<Matrix<f64>> {
    vec![
        randm(1, p, 0.3, rng),
        randm(1, 1, 0.3, rng),
        randm(p, p, 0.3, rng),
        randm(1, p, 0.3, rng),
        randm(p, p, 0.3, rng),
        randm(1, p, 0.3, rng),
        randm(p, p, 0.3, rng),
        randm(p, p, 0.3, rng),
    ]
}

fn proj_vars(v: &[Var]) -> ProjVars {
    ProjVars {
        w_alpha: v[0],
        b_alpha: v[1],
        w_mu: v[2],
        b_mu: v[3],
        w_sigma: v[4],
        b_sigma: v[5],
        w_q: v[6],
        w_k: v[7],
    }
}

#[test]
fn nvib_eval_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, p) = (4, 3);
    let mut inputs = vec![randm(n, p, 1.0, &mut rng), randm(1, n, 0.5, &mut rng)];
    inputs.extend(proj_inputs(p, &mut rng));
    let e = check(inputs, |g, v| {
        let pv = proj_vars(&v[2..]);
        let dp = g.nvib_project(v[0], v[1], pv, 0).unwrap();
        let kl_g = g.nvib_kl_gaussian(&dp);
        let kl_d = g.nvib_kl_dirichlet(&dp, 1.0 + 0.25 * n as f64).unwrap();
        let mut retained = vec![true; n + 1];
        retained[2] = false;
        let (out, _) = g.nvib_attention_test(v[0], &dp, &retained, pv.w_q, pv.w_k).unwrap();
        let r = readout(g, out, 17);
        let skip = readout(g, dp.log_alpha, 18);
        g.weighted_sum(&[(kl_g, 1.0), (kl_d, 0.3), (r, 0.1), (skip, 0.05)])
    });
    assert!(e < 1e-5, "{e}");
}

#[test]
fn nvib_train_chain_through_gaussian_path() {
    // The pseudo-count head is held constant so that the Gamma draws (the
    // common random numbers) do not move under finite differences; the
    // pseudo-count gradient is certified statistically in gradcheck.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, p) = (3, 4);
    let hidden = randm(n, p, 1.0, &mut rng);
    let w_alpha = randm(1, p, 0.3, &mut rng);
    let mut inputs = vec![randm(2, p, 1.0, &mut rng)];
    inputs.extend(proj_inputs(p, &mut rng).into_iter().skip(2));
    let e = check(inputs, move |g, v| {
        let h = g.constant(hidden.clone());
        let zeros = g.constant(Matrix::zeros(1, n));
        let pv = ProjVars {
            w_alpha: g.constant(w_alpha.clone()),
            b_alpha: g.constant(Matrix::scalar(0.2)),
            w_mu: v[1],
            b_mu: v[2],
            w_sigma: v[3],
            b_sigma: v[4],
            w_q: v[5],
            w_k: v[6],
        };
        let dp = g.nvib_project(h, zeros, pv, 0).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1234);
        let (z, log_pi) = g.nvib_sample(&dp, &mut r).unwrap();
        let (out, _) = g.nvib_attention_train(v[0], z, log_pi, pv.w_q, pv.w_k).unwrap();
        let kl = g.nvib_kl_gaussian(&dp);
        let r = readout(g, out, 19);
        g.weighted_sum(&[(r, 1.0), (kl, 0.5)])
    });
    assert!(e < 1e-5, "{e}");
}
