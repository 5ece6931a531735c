//! Trains a small model of any family on RBF tasks and prints the loss curve.
//!
//! `cargo run --release --example train_model -- [model] [steps]`

use bnp::npmodels::ModelKind;
use bnp::train::{train, TrainConfig, TrainOutput, LOG_HEADER};

fn main() -> bnp::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = ModelKind::parse(&args.next().unwrap_or_else(|| "cnp".into()))?;
    let steps = args.next().map(|s| s.parse().expect("steps")).unwrap_or(1000);
    let cfg = TrainConfig {
        model,
        steps,
        batch: 16,
        d_h: 64,
        log_every: steps.div_ceil(10).max(1),
        ..TrainConfig::default()
    };
    println!("{LOG_HEADER}");
    let mut log = |r: &bnp::train::LogRow| println!("{}", r.csv());
    train(
        &cfg,
        TrainOutput {
            dir: None,
            on_log: Some(&mut log),
        },
    )?;
    Ok(())
}
