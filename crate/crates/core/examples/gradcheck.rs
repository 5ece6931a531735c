//! Compares reverse-mode gradients of each training loss with central finite
//! differences on a tiny network.
//!
//! `cargo run --example gradcheck`

use bnp::diffcore::Tape;
use bnp::npmodels::{ArchConfig, Model, ModelKind};
use bnp::taskgen::TaskDist;
use bnp::train::{sample_loss_randomness, task_loss, LossConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> bnp::Result<()> {
    let task = TaskDist::named("rbf")?.task(0, "example", 0)?;
    let cfg = LossConfig {
        k: 3,
        detach: false,
        ..LossConfig::default()
    };
    println!("model  params  max_rel_err");
    for kind in ModelKind::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut arch = ArchConfig::regression_1d(kind, 8);
        arch.n_head = 2;
        let mut model = Model::new(kind, arch, &mut rng)?;
        let randomness = sample_loss_randomness(&model, &task, &cfg, &mut rng)?;

        let analytic = {
            let mut tape = Tape::new(&model.store);
            let loss = task_loss(&model, &mut tape, &task, &randomness, &cfg)?;
            let g = tape.backward(loss)?;
            let mut s = model.store.clone();
            s.zero_grads();
            s.accumulate(&g, 1.0);
            s.flat_grads()
        };
        let value = |m: &Model| -> bnp::Result<f64> {
            let mut tape = Tape::inference(&m.store);
            let loss = task_loss(m, &mut tape, &task, &randomness, &cfg)?;
            tape.scalar(loss)
        };
        let h = 1e-6;
        let n = model.store.num_scalars();
        let mut worst: f64 = 0.0;
        for i in (0..n).step_by((n / 200).max(1)) {
            let orig = model.store.flat_get(i);
            model.store.flat_set(i, orig + h);
            let up = value(&model)?;
            model.store.flat_set(i, orig - h);
            let down = value(&model)?;
            model.store.flat_set(i, orig);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-4));
        }
        println!("{:<6} {n:>6}  {worst:.2e}", kind.as_str());
    }
    Ok(())
}
