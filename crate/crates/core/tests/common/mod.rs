//! Helpers shared by the integration tests.
#![allow(dead_code)]

use bnp::diffcore::{Tape, Var};
use bnp::npmodels::{ArchConfig, Model, ModelKind};
use bnp::taskgen::{Task, TaskDist};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_model(kind: ModelKind, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arch = ArchConfig::regression_1d(kind, 8);
    arch.n_head = 2;
    let mut m = Model::new(kind, arch, &mut rng).unwrap();
    // nonzero adaptation weights so its gradient path is exercised
    if let Some(a) = m.net.adapt {
        for id in [a.w, a.b] {
            for v in m.store.value_mut(id).data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    m
}

pub fn small_task(seed: u64, n_context: usize, n: usize) -> Task {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = x.iter().map(|v| v.sin() + 0.3 * rng.random::<f64>()).collect();
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        idx.swap(i, rng.random_range(0..=i));
    }
    Task::new(x, y, idx[..n_context].to_vec()).unwrap()
}

pub fn rbf_task(seed: u64) -> Task {
    TaskDist::named("rbf").unwrap().task(seed, "tests", 0).unwrap()
}

/// Worst relative error between the analytic gradient of `loss` and central
/// differences over `coords` randomly chosen parameter coordinates.
pub fn gradient_check<F>(model: &mut Model, coords: usize, seed: u64, loss: F) -> f64
where
    F: Fn(&Model, &mut Tape<'_>) -> Var,
{
    let analytic = {
        let mut tape = Tape::new(&model.store);
        let l = loss(model, &mut tape);
        let g = tape.backward(l).unwrap();
        let mut s = model.store.clone();
        s.zero_grads();
        s.accumulate(&g, 1.0);
        s.flat_grads()
    };
    let eval = |m: &Model| {
        let mut tape = Tape::inference(&m.store);
        let l = loss(m, &mut tape);
        tape.scalar(l).unwrap()
    };
    let n = model.store.num_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let i = rng.random_range(0..n);
        let orig = model.store.flat_get(i);
        model.store.flat_set(i, orig + h);
        let up = eval(model);
        model.store.flat_set(i, orig - h);
        let down = eval(model);
        model.store.flat_set(i, orig);
        let fd = (up - down) / (2.0 * h);
        let a = analytic[i];
        worst = worst.max(relative_error(a, fd));
    }
    worst
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// `log (1/k) Σ_j N(y | μ_j, σ_j²)` with double-double accumulation.
pub fn mixture_oracle(y: f64, mu: &[f64], sigma: &[f64]) -> f64 {
    let logs: Vec<f64> = mu
        .iter()
        .zip(sigma)
        .map(|(m, s)| {
            let z = (y - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for l in &logs {
        let v = (l - top).exp();
        let s = hi + v;
        let bp = s - hi;
        lo += (hi - (s - bp)) + (v - bp);
        hi = s;
    }
    top + (hi + lo).ln() - (mu.len() as f64).ln()
}
