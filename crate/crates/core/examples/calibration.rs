//! Calibration error and sharpness of synthetic Gaussian predictions: exact
//! draws, over-confident and under-confident predictors.
//!
//! `cargo run --example calibration`

use bnp::bootstrap::EnsemblePrediction;
use bnp::evalsuite::{calibration_error, calibration_levels, sharpness};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> bnp::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 20_000;
    let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = mu
        .iter()
        .map(|m| m + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let levels = calibration_levels(10);
    println!("predicted sd      CE   sharpness");
    for sd in [0.1, 0.2, 0.3, 0.45, 0.6] {
        let pred = EnsemblePrediction::single(mu.clone(), vec![sd; n])?;
        println!(
            "{sd:>12.2} {:>7.4} {:>11.4}",
            calibration_error(&pred, &y, &levels)?,
            sharpness(&pred)?
        );
    }
    let below: Vec<f64> = mu.iter().map(|m| m - 10.0).collect();
    let pred = EnsemblePrediction::single(mu, vec![0.3; n])?;
    println!(
        "\nall targets far below the mean, levels 0.25/0.5/0.75: CE = {}",
        calibration_error(&pred, &below, &[0.25, 0.5, 0.75])?
    );
    Ok(())
}
