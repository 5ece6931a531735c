//! Trains CNP and BNP briefly, then compares them on clean RBF tasks and on
//! tasks with heavy-tailed noise.
//!
//! `cargo run --release --example evaluate -- [steps]`

use bnp::evalsuite::{evaluate, EvalConfig, CSV_HEADER};
use bnp::npmodels::ModelKind;
use bnp::train::{train, TrainConfig, TrainOutput};

fn main() -> bnp::Result<()> {
    let steps = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("steps"))
        .unwrap_or(2000);
    println!("{CSV_HEADER}");
    for model in [ModelKind::Cnp, ModelKind::Bnp] {
        let cfg = TrainConfig {
            model,
            steps,
            batch: 16,
            d_h: 32,
            log_every: 0,
            ..TrainConfig::default()
        };
        let trained = train(&cfg, TrainOutput::default())?.model()?;
        for dataset in ["rbf", "t-noise"] {
            let e = EvalConfig {
                dataset: dataset.into(),
                batches: 20,
                k: 20,
                ..EvalConfig::default()
            };
            println!("{}", evaluate(&trained, &e)?.csv_row());
        }
    }
    Ok(())
}
