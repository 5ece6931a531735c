//! Walks one task through the bootstrap: paired resampling, residuals under
//! each resampled context, and the reconstructed contexts, then prints the
//! ensemble a BNP builds from them.
//!
//! `cargo run --example bootstrap_pipeline`

use bnp::bootstrap::{compute_residuals, make_bootstrap_context, paired_bootstrap, predict_ensemble, VariantFlags};
use bnp::npmodels::{ArchConfig, Model, ModelKind};
use bnp::taskgen::TaskDist;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bnp::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let task = TaskDist::named("rbf")?.task(0, "example", 3)?;
    let (xc, yc) = (task.xc(), task.yc());
    let model = Model::new(ModelKind::Bnp, ArchConfig::regression_1d(ModelKind::Bnp, 32), &mut rng)?;

    let resampled = paired_bootstrap(&mut rng, &xc, &yc, 3)?;
    for (j, (bx, _)) in resampled.iter().enumerate() {
        let kept = xc.iter().filter(|x| bx.contains(x)).count();
        println!("resample {j}: {kept} of {} context pairs drawn at least once", xc.len());
    }
    let residuals = compute_residuals(&model, &xc, &yc, &resampled)?;
    for ctx in make_bootstrap_context(&mut rng, &residuals) {
        let moved = ctx.y.iter().zip(&yc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("context {}: inputs unchanged, max |y~ - y| = {moved:.3}", ctx.j);
    }

    let xt: Vec<f64> = (0..9).map(|i| -2.0 + 0.5 * i as f64).collect();
    let pred = predict_ensemble(&model, &xc, &yc, &xt, 50, VariantFlags::default(), &mut rng)?;
    let (mean, sd) = pred.moments();
    println!("\n     x   mixture mean   mixture sd");
    for i in 0..xt.len() {
        println!("{:>6.2} {:>14.4} {:>12.4}", xt[i], mean[i], sd[i]);
    }
    Ok(())
}
