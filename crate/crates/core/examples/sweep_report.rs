//! Runs a configuration (optionally a sweep over one or more axes) and prints
//! the per-cell summary table.
//!
//! ```text
//! cargo run --release --example sweep_report -- kind=nn trials=10 sweep:epsilon=5e-4,2e-3
//! ```
//!
//! Plain `key=value` arguments set base options; `sweep:key=v1,v2` adds an axis.

use bombworks::config::{ExperimentConfig, SweepPlan};
use bombworks::eval;

fn main() -> bombworks::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut base = ExperimentConfig::default();
    base.trials = 10;
    let mut sweep = String::from("[sweep]\n");
    for arg in std::env::args().skip(1) {
        let (key, value) = arg
            .split_once('=')
            .ok_or_else(|| bombworks::Error::Config(format!("expected key=value, got '{arg}'")))?;
        match key.strip_prefix("sweep:") {
            Some(axis) => sweep.push_str(&format!("{axis} = {value}\n")),
            None => base.set(key, value)?,
        }
    }
    let plan = SweepPlan::parse(&sweep, base.clone())?;
    let started = std::time::Instant::now();
    let out = eval::run_sweep(&plan, base.workers)?;
    print!("{}", eval::summary_csv(&out));
    for c in &out.cells {
        if let Some(acc) = c.baseline_accuracy {
            println!("cell {} baseline validation accuracy {acc:.4}", c.cell.index);
        }
    }
    println!("elapsed {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
