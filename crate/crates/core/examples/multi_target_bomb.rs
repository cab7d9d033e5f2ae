//! One perturbation carrying several triggers at once, each with its own
//! bomb class.
//!
//! ```text
//! cargo run --release --example multi_target_bomb -- 3
//! ```

use bombworks::attack_embedding::{self, LogicBomb, Target};
use bombworks::config::ExperimentConfig;
use bombworks::eval;
use bombworks::mlc::Mlc;

fn main() -> bombworks::Result<()> {
    let count: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let mut cfg = ExperimentConfig::default();
    cfg.embedding_attack.lambda = 0.04;
    let ctx = eval::build_embedding_context(&cfg)?;

    let picks: Vec<usize> = ctx.eligible.iter().step_by(7).take(count).cloned().collect();
    let bomb = LogicBomb::new(
        picks
            .iter()
            .map(|&i| Target {
                input: ctx.validation[i].clone(),
                class: 1 - ctx.validation_labels[i],
            })
            .collect(),
    )?;
    let res = attack_embedding::craft_embedding_bomb(&ctx.m, &bomb, &ctx.reference, &cfg.embedding_attack)?;
    for (t, &i) in bomb.targets.iter().zip(&picks) {
        let p = ctx.host.predict_proba(&res.m_hat.features(&t.input)?)?;
        println!("target {:>4}: wanted class {}, now p = {:.3}", ctx.validation_ids[i], t.class, p[t.class]);
    }
    let others: Vec<_> = ctx.validation.iter().collect();
    println!(
        "{} columns touched, flipping rate {:.4}",
        res.columns.len(),
        eval::classification_flipping_rate(&ctx.host, &ctx.m, &res.m_hat, &others, &picks)?
    );
    Ok(())
}
