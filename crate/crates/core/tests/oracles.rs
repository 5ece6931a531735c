//! Production code checked against independent, slower reference
//! implementations.

mod common;

use bnp::bayesopt::{expected_improvement, gp_posterior, normal_cdf};
use bnp::bootstrap::{
    compute_residuals, ensemble_log_density, predict_with, reconstruct, BootstrapDraws, EnsemblePrediction, Randomness,
    VariantFlags,
};
use bnp::diffcore::{Mlp, ParamStore, Tape};
use bnp::evalsuite::gaussian_quantile;
use bnp::npmodels::{column, Model, ModelKind};
use bnp::taskgen::{kernel_eval, KernelSpec};
use common::{mixture_oracle, small_task, tiny_model};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn linear(store: &ParamStore, lin: &bnp::diffcore::Linear, rows: &Rows) -> Rows {
    let w = store.value(lin.w);
    let b = store.value(lin.b);
    rows.iter()
        .map(|r| {
            (0..lin.d_out)
                .map(|o| b.get(0, o) + (0..lin.d_in).map(|i| r[i] * w.get(i, o)).sum::<f64>())
                .collect()
        })
        .collect()
}

fn relu(rows: Rows) -> Rows {
    rows.into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect()
}

/// Layers `first..` of an MLP, ReLU after each of the first `ℓ − 2` layers.
fn mlp_from(store: &ParamStore, mlp: &Mlp, mut rows: Rows, first: usize) -> Rows {
    let l = mlp.layers.len();
    for (i, lin) in mlp.layers.iter().enumerate().skip(first) {
        rows = linear(store, lin, &rows);
        if i + 2 < l {
            rows = relu(rows);
        }
    }
    rows
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn to_gauss(rows: &Rows) -> (Vec<f64>, Vec<f64>) {
    (
        rows.iter().map(|r| r[0]).collect(),
        rows.iter().map(|r| 0.1 + 0.9 * softplus(r[1])).collect(),
    )
}

/// Encoder representation per target row.
fn representation(model: &Model, xc: &[f64], yc: &[f64], xt: &[f64]) -> Rows {
    let mut tape = Tape::inference(&model.store);
    let x = column(&mut tape, xc);
    let y = column(&mut tape, yc);
    let t = column(&mut tape, xt);
    let rep = model.encode_det(&mut tape, x, y, xc.len(), Some(t)).unwrap();
    let v = tape.value(rep.var);
    (0..xt.len())
        .map(|i| v.row_slice(if v.rows() == 1 { 0 } else { i }).to_vec())
        .collect()
}

fn with_inputs(rep: &Rows, xt: &[f64]) -> Rows {
    rep.iter()
        .zip(xt)
        .map(|(r, &x)| r.iter().copied().chain([x]).collect())
        .collect()
}

/// One component at a time: residuals, reconstructed labels, bootstrap
/// representation and the adapted decoder, all computed sequentially.
fn sequential_bootstrap(
    model: &Model,
    xc: &[f64],
    yc: &[f64],
    xt: &[f64],
    draws: &BootstrapDraws,
    flags: VariantFlags,
) -> (Vec<f64>, Vec<f64>) {
    let skip_paired = flags.skip_paired || flags.naive_bootstrap;
    let skip_adapt = flags.skip_adaptation || flags.naive_bootstrap;
    let resampled: Vec<(Vec<f64>, Vec<f64>)> = draws
        .paired
        .iter()
        .map(|m| {
            if skip_paired {
                (xc.to_vec(), yc.to_vec())
            } else {
                (m.iter().map(|&i| xc[i]).collect(), m.iter().map(|&i| yc[i]).collect())
            }
        })
        .collect();
    let residuals = compute_residuals(model, xc, yc, &resampled).unwrap();
    let contexts = reconstruct(&residuals, &draws.residual);
    let dec = &model.net.dec;
    let base_in = with_inputs(&representation(model, xc, yc, xt), xt);
    let h1 = linear(&model.store, &dec.layers[0], &base_in);
    let (mut mu, mut sigma) = (vec![], vec![]);
    for ctx in &contexts {
        assert_eq!(ctx.x, xc);
        let phi = representation(model, &ctx.x, &ctx.y, xt);
        let raw = if skip_adapt {
            mlp_from(&model.store, dec, with_inputs(&phi, xt), 0)
        } else {
            let a = linear(&model.store, model.net.adapt.as_ref().unwrap(), &phi);
            let h: Rows = h1
                .iter()
                .zip(&a)
                .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u + v).max(0.0)).collect())
                .collect();
            mlp_from(&model.store, dec, h, 1)
        };
        let (m, s) = to_gauss(&raw);
        mu.extend(m);
        sigma.extend(s);
    }
    (mu, sigma)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "row {i}: {x} vs {y}");
    }
}

#[test]
fn batched_bootstrap_matches_sequential_oracle() {
    for kind in [ModelKind::Bnp, ModelKind::Banp] {
        for variant in ["full", "no-paired", "no-adapt", "no-baseloss"] {
            let flags = VariantFlags::parse(variant).unwrap();
            let model = tiny_model(kind, 21);
            let task = small_task(4, 6, 14);
            let (xc, yc) = (task.xc(), task.yc());
            let xt = task.x.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let draws = BootstrapDraws::sample(&mut rng, xc.len(), 5).unwrap();
            let pred = predict_with(&model, &xc, &yc, &xt, &Randomness::Bootstrap(draws.clone()), flags).unwrap();
            let (mu, sigma) = sequential_bootstrap(&model, &xc, &yc, &xt, &draws, flags);
            assert_close(&pred.mu, &mu, 1e-10);
            assert_close(&pred.sigma, &sigma, 1e-10);
        }
    }
}

#[test]
fn naive_bootstrap_matches_sequential_oracle() {
    for kind in [ModelKind::Cnp, ModelKind::Canp] {
        let flags = VariantFlags::parse("naive").unwrap();
        let model = tiny_model(kind, 5);
        let task = small_task(8, 7, 15);
        let (xc, yc) = (task.xc(), task.yc());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = BootstrapDraws::sample(&mut rng, xc.len(), 4).unwrap();
        let pred = predict_with(&model, &xc, &yc, &task.x, &Randomness::Bootstrap(draws.clone()), flags).unwrap();
        let (mu, sigma) = sequential_bootstrap(&model, &xc, &yc, &task.x, &draws, flags);
        assert_close(&pred.mu, &mu, 1e-10);
        assert_close(&pred.sigma, &sigma, 1e-10);
    }
}

#[test]
fn ensemble_density_matches_brute_force_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..500 {
        let k = rng.random_range(1..=8);
        let n = rng.random_range(1..=5);
        let mu: Vec<f64> = (0..k * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sigma: Vec<f64> = (0..k * n).map(|_| rng.random_range(0.1..2.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let pred = EnsemblePrediction::new(k, n, mu.clone(), sigma.clone()).unwrap();
        let got = ensemble_log_density(&pred, &y).unwrap();
        for i in 0..n {
            let m: Vec<f64> = (0..k).map(|j| mu[j * n + i]).collect();
            let s: Vec<f64> = (0..k).map(|j| sigma[j * n + i]).collect();
            assert!((got[i] - mixture_oracle(y[i], &m, &s)).abs() < 1e-10);
        }
    }
}

/// Standard normal CDF by composite Simpson integration of the density.
fn cdf_by_quadrature(z: f64) -> f64 {
    let lo = -12.0;
    let steps = 20_000;
    let h = (z - lo) / steps as f64;
    let f = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = f(lo) + f(z);
    for i in 1..steps {
        acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

#[test]
fn quantile_matches_bisection_on_quadrature_cdf() {
    for &p in &[0.01, 0.1, 0.25, 0.5, 0.6, 0.8413, 0.9, 0.975, 0.999] {
        let (mut a, mut b) = (-8.0, 8.0);
        for _ in 0..60 {
            let c = 0.5 * (a + b);
            if cdf_by_quadrature(c) < p {
                a = c;
            } else {
                b = c;
            }
        }
        let z = 0.5 * (a + b);
        assert!((gaussian_quantile(0.0, 1.0, p).unwrap() - z).abs() < 1e-7, "p = {p}");
        assert!((gaussian_quantile(1.5, 2.0, p).unwrap() - (1.5 + 2.0 * z)).abs() < 2e-7);
        assert!((normal_cdf(z) - p).abs() < 1e-9);
    }
}

#[test]
fn expected_improvement_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let mu = rng.random_range(-1.0..1.0);
        let sigma = rng.random_range(0.05..1.0);
        let best = rng.random_range(-1.0..1.0);
        // ∫ max(best − y, 0) N(y | μ, σ²) dy over y < best
        let lo = mu - 12.0 * sigma;
        let steps = 40_000;
        let oracle = if best <= lo {
            0.0
        } else {
            let h = (best - lo) / steps as f64;
            let f = |y: f64| {
                let z = (y - mu) / sigma;
                (best - y) * (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
            };
            let mut acc = f(lo) + f(best);
            for i in 1..steps {
                acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        };
        let ei = expected_improvement(mu, sigma, best);
        assert!((ei - oracle).abs() < 1e-8, "{ei} vs {oracle}");
    }
}

#[test]
fn gp_posterior_matches_dense_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kernel in [
        KernelSpec::rbf(1.0, 0.4),
        KernelSpec::matern52(0.7, 0.3),
        KernelSpec::periodic(1.2, 0.5, 0.9),
    ] {
        let n = 8;
        let ox: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let oy: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xs: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
        let noise = 0.05;
        // the factorisation always carries a 1e-6·s² diagonal jitter
        let diag = noise + 1e-6 * kernel.variance();
        let kmat = DMatrix::from_fn(n, n, |i, j| {
            kernel_eval(&kernel, ox[i], ox[j]) + if i == j { diag } else { 0.0 }
        });
        let inv = kmat.try_inverse().unwrap();
        let y = DVector::from_column_slice(&oy);
        let (mean, var) = gp_posterior(&kernel, &ox, &oy, &xs, noise).unwrap();
        for (t, &x) in xs.iter().enumerate() {
            let ks = DVector::from_fn(n, |i, _| kernel_eval(&kernel, ox[i], x));
            let m = (ks.transpose() * &inv * &y)[0];
            let v = kernel_eval(&kernel, x, x) - (ks.transpose() * &inv * &ks)[0];
            assert!((mean[t] - m).abs() < 1e-8, "mean {} vs {m}", mean[t]);
            assert!((var[t] - v.max(0.0)).abs() < 1e-8, "var {} vs {v}", var[t]);
        }
    }
}

#[test]
fn gp_oracle_beats_random_search() {
    use bnp::bayesopt::{bo_benchmark, mean_final_regret, Surrogate};
    let gp = bo_benchmark(
        &Surrogate::oracle(bnp::taskgen::KernelFamily::Rbf),
        "rbf",
        100,
        50,
        1,
        5,
    )
    .unwrap();
    let random = bo_benchmark(&Surrogate::Random, "rbf", 100, 50, 1, 5).unwrap();
    for (a, b) in gp.iter().zip(&random) {
        assert_eq!(a.rows[0], b.rows[0], "shared initial design");
    }
    let (g, r) = (mean_final_regret(&gp), mean_final_regret(&random));
    assert!(g < r, "gp {g} vs random {r}");
}
