//! Expected-improvement search on GP prior functions with the GP oracle
//! surrogate and with random search, or with a trained checkpoint.
//!
//! `cargo run --release --example bayes_opt -- [checkpoint]`

use bnp::bayesopt::{bo_benchmark, mean_final_regret, Surrogate};
use bnp::taskgen::KernelFamily;
use bnp::train::Checkpoint;

fn main() -> bnp::Result<()> {
    let (functions, iters) = (8, 30);
    let ckpt = std::env::args()
        .nth(1)
        .map(|p| Checkpoint::load(p.as_ref()))
        .transpose()?;
    let model = ckpt.as_ref().map(Checkpoint::model).transpose()?;
    let mut surrogates = vec![Surrogate::oracle(KernelFamily::Rbf), Surrogate::Random];
    if let (Some(model), Some(ck)) = (model.as_ref(), ckpt.as_ref()) {
        surrogates.push(Surrogate::Model {
            model,
            k: 10,
            flags: ck.config.variant,
        });
    }
    println!("surrogate       final regret  final cumulative regret");
    for s in &surrogates {
        let traces = bo_benchmark(s, "rbf", functions, iters, 1, 0)?;
        let cum = traces.iter().map(|t| t.final_cum_regret()).sum::<f64>() / traces.len() as f64;
        println!("{:<15} {:>12.4} {:>24.3}", s.label(), mean_final_regret(&traces), cum);
    }
    Ok(())
}
