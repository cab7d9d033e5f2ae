//! Noise injection as a countermeasure: how much uniform noise on the
//! shipped embedding it takes to defuse bombs, and what it costs in clean
//! accuracy.
//!
//! ```text
//! cargo run --release --example noise_defense -- 10
//! ```

use bombworks::attack_embedding::{self, LogicBomb};
use bombworks::classifiers;
use bombworks::config::ExperimentConfig;
use bombworks::defense;
use bombworks::embedding;
use bombworks::eval;
use bombworks::mlc::Mlc;
use bombworks::numeric::RngStream;

fn main() -> bombworks::Result<()> {
    let bombs: usize = std::env::args().nth(1).map_or(Ok(10), |s| s.parse()).unwrap_or(10);
    let mut cfg = ExperimentConfig::default();
    cfg.embedding_attack.lambda = 0.04;
    let ctx = eval::build_embedding_context(&cfg)?;

    let mut crafted = Vec::new();
    for &target in ctx.eligible.iter().take(bombs) {
        let class = 1 - ctx.validation_labels[target];
        let x = &ctx.validation[target];
        let res = attack_embedding::craft_embedding_bomb(
            &ctx.m,
            &LogicBomb::single(x.clone(), class),
            &ctx.reference,
            &cfg.embedding_attack,
        )?;
        crafted.push((x, class, res.m_hat));
    }

    println!("{:>8} {:>10} {:>10} {:>10}", "rho", "armed", "mean p", "accuracy");
    for rho in [0.0, 1e-3, 1e-2, 1e-1, 3e-1, 1.0] {
        let (mut armed, mut p_sum, mut acc_sum) = (0, 0.0, 0.0);
        for (i, (x, class, m_hat)) in crafted.iter().enumerate() {
            let noisy = defense::noise_inject(m_hat, rho, &mut RngStream::new(i as u64))?;
            let feats = ctx
                .validation
                .iter()
                .map(|v| embedding::extract(&noisy, v))
                .collect::<bombworks::Result<Vec<_>>>()?;
            acc_sum += classifiers::accuracy(&ctx.host, &feats, &ctx.validation_labels)?;
            let p = ctx.host.predict_proba(&noisy.features(x)?)?;
            p_sum += p[*class];
            armed += usize::from(ctx.host.predict(&noisy.features(x)?)?.0 == *class);
        }
        let k = crafted.len() as f64;
        println!(
            "{rho:>8} {:>10} {:>10.3} {:>10.3}",
            format!("{armed}/{}", crafted.len()),
            p_sum / k,
            acc_sum / k
        );
    }
    Ok(())
}
