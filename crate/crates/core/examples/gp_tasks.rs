//! Samples tasks from every task family and summarises them; pass `csv` to
//! dump the RBF tasks in the `dump-tasks` format instead.
//!
//! `cargo run --example gp_tasks -- [csv]`

use bnp::taskgen::{tasks_to_csv, TaskDist};

fn main() -> bnp::Result<()> {
    if std::env::args().nth(1).as_deref() == Some("csv") {
        let tasks = TaskDist::named("rbf")?.batch(0, "example", 0, 4)?;
        print!("{}", tasks_to_csv(&tasks));
        return Ok(());
    }
    println!("family      tasks  mean|c|  mean n  var(y)");
    for name in ["rbf", "matern", "periodic", "t-noise"] {
        let tasks = TaskDist::named(name)?.batch(0, "example", 0, 500)?;
        let c = tasks.iter().map(|t| t.n_context()).sum::<usize>() as f64 / tasks.len() as f64;
        let n = tasks.iter().map(|t| t.n()).sum::<usize>() as f64 / tasks.len() as f64;
        let ys: Vec<f64> = tasks.iter().flat_map(|t| t.y.iter().copied()).collect();
        let m = ys.iter().sum::<f64>() / ys.len() as f64;
        let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64;
        println!("{name:<10} {:>6} {c:>8.2} {n:>7.2} {v:>7.3}", tasks.len());
    }
    Ok(())
}
