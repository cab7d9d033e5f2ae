//! The trial harness behind every experiment: repeated attacks with fresh
//! targets, aggregated into the success, confidence, flipping and
//! perturbation metrics.
//!
//! ```text
//! cargo run --release --example trial_harness -- 10
//! ```

use bombworks::config::ExperimentConfig;
use bombworks::eval;

fn main() -> bombworks::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.trials = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    cfg.embedding_attack.lambda = 0.04;
    let (report, records) = eval::run_experiment(&cfg)?;
    println!("{:>5} {:>7} {:>6} {:>6} {:>10} {:>9}", "trial", "target", "from", "to", "p(to)", "flipping");
    for r in &records {
        println!(
            "{:>5} {:>7} {:>6} {:>6} {:>10.3} {:>9.4}",
            r.trial,
            r.target_id,
            r.true_label,
            r.infected_label,
            r.infected_confidence,
            r.flipping_rate()
        );
    }
    println!(
        "success {:.3}, confidence {}, flipping median {:.4}, perturbation median {:.3} permille",
        report.success_rate,
        report.confidence_mean.map_or("n/a".into(), |c| format!("{c:.3}")),
        report.flipping_median,
        report.perturbation_permille_median
    );
    // the per-trial CSV is enough to rebuild the summary
    let back = eval::parse_results_csv(&eval::results_csv(&records))?;
    println!("results.csv round trip exact: {}", back == records);
    Ok(())
}
