//! Feature-space vetting: compare each probe's features with those of its
//! nearest input-space neighbours and see where the bomb trigger ranks.
//!
//! ```text
//! cargo run --release --example vet_probes
//! ```

use bombworks::attack_embedding::{self, LogicBomb};
use bombworks::config::ExperimentConfig;
use bombworks::defense;
use bombworks::eval;

fn main() -> bombworks::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.embedding_attack.lambda = 0.04;
    let ctx = eval::build_embedding_context(&cfg)?;
    let probes: Vec<_> = ctx.validation.iter().take(200).collect();

    for (n, &target) in ctx.eligible.iter().filter(|&&i| i < probes.len()).take(5).enumerate() {
        let class = 1 - ctx.validation_labels[target];
        let bomb = LogicBomb::single(ctx.validation[target].clone(), class);
        let res = attack_embedding::craft_embedding_bomb(&ctx.m, &bomb, &ctx.reference, &cfg.embedding_attack)?;
        let clean = defense::vet_anomaly(&ctx.m, &probes, 5, 3.0)?;
        let bombed = defense::vet_anomaly(&res.m_hat, &probes, 5, 3.0)?;
        println!(
            "bomb {n}: trigger score {:.2} -> {:.2}, rank {} -> {} of {}, flagged {} -> {}",
            clean.scores[target],
            bombed.scores[target],
            clean.rank(target),
            bombed.rank(target),
            probes.len(),
            clean.flagged.len(),
            bombed.flagged.len()
        );
    }
    Ok(())
}
