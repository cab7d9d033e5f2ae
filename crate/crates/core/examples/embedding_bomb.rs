//! Crafts a logic bomb into a word embedding: one validation sequence is
//! pushed into another class while everything else barely moves.
//!
//! ```text
//! cargo run --release --example embedding_bomb -- 0.04
//! ```
//!
//! The optional argument is the regularization weight lambda.

use bombworks::attack_embedding::{self, LogicBomb};
use bombworks::config::ExperimentConfig;
use bombworks::eval;
use bombworks::io::Precision;
use bombworks::mlc::Mlc;

fn main() -> bombworks::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.embedding_attack.lambda = std::env::args().nth(1).map_or(Ok(0.04), |s| s.parse()).unwrap_or(0.04);
    let ctx = eval::build_embedding_context(&cfg)?;
    println!("clean validation accuracy {:.3}", ctx.baseline_accuracy);

    let target = ctx.eligible[0];
    let x = &ctx.validation[target];
    let class = 1 - ctx.validation_labels[target];
    let bomb = LogicBomb::single(x.clone(), class);
    let res = attack_embedding::craft_embedding_bomb(&ctx.m, &bomb, &ctx.reference, &cfg.embedding_attack)?;

    let before = ctx.host.predict_proba(&ctx.m.features(x)?)?;
    let after = ctx.host.predict_proba(&res.m_hat.features(x)?)?;
    println!(
        "target {}: p(class {class}) {:.3} -> {:.3}",
        ctx.validation_ids[target], before[class], after[class]
    );
    let others: Vec<_> = ctx.validation.iter().collect();
    let flips = eval::classification_flipping_rate(&ctx.host, &ctx.m, &res.m_hat, &others, &[target])?;
    println!(
        "lambda {}: {} perturbed columns, linf {:.4}, max ||E x|| on R {:.4} (delta {}), flipping rate {:.4}, {} iterations",
        cfg.embedding_attack.lambda,
        res.columns.len(),
        res.feasibility.linf,
        res.feasibility.max_constraint,
        cfg.embedding_attack.delta,
        flips,
        res.iterations
    );

    let dir = std::env::temp_dir().join("bombworks_embedding_bomb");
    attack_embedding::write_bundle(&res, &dir, Precision::F64)?;
    println!("bundle written to {}", dir.display());
    Ok(())
}
