//! Trains the bootstrap variants side by side on a short schedule and prints
//! their target log-likelihood on heavy-tailed-noise tasks.
//!
//! `cargo run --release --example ablation -- [steps]`

use bnp::cli::ablation_configs;
use bnp::evalsuite::{evaluate, EvalConfig};
use bnp::train::{train, TrainConfig, TrainOutput};

fn main() -> bnp::Result<()> {
    let steps = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("steps"))
        .unwrap_or(1000);
    let base = TrainConfig {
        steps,
        batch: 16,
        d_h: 32,
        log_every: 0,
        ..TrainConfig::default()
    };
    println!("variant          target_ll  sharpness");
    for (name, cfg) in ablation_configs(&base) {
        let model = train(&cfg, TrainOutput::default())?.model()?;
        let e = EvalConfig {
            dataset: "t-noise".into(),
            batches: 20,
            k: 20,
            flags: cfg.variant,
            ..EvalConfig::default()
        };
        let r = evaluate(&model, &e)?;
        println!("{name:<16} {:>9.4} {:>10.4}", r.target_ll, r.sharpness);
    }
    Ok(())
}
