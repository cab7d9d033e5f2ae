//! Parameter-diff auditing: a precision round trip stays inside the f32
//! band, a logic bomb does not.
//!
//! ```text
//! cargo run --release --example audit_models
//! ```

use bombworks::attack_embedding::{self, LogicBomb};
use bombworks::config::ExperimentConfig;
use bombworks::defense;
use bombworks::embedding;
use bombworks::eval;
use bombworks::io::Precision;

fn main() -> bombworks::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.embedding_attack.lambda = 0.04;
    let ctx = eval::build_embedding_context(&cfg)?;
    let target = ctx.eligible[0];
    let bomb = LogicBomb::single(ctx.validation[target].clone(), 1 - ctx.validation_labels[target]);
    let res = attack_embedding::craft_embedding_bomb(&ctx.m, &bomb, &ctx.reference, &cfg.embedding_attack)?;

    let (f32_copy, _) = embedding::decode_emb1(&embedding::encode_emb1(&ctx.m, Precision::F32))?;
    for (name, other) in [("f32 round trip", &f32_copy), ("bombed", &res.m_hat)] {
        let a = defense::diff_audit(&ctx.m, other, defense::precision_band(&ctx.m))?;
        println!(
            "{name:>15}: {} of {} entries beyond the f32 band, linf {:.2e}, explainable by precision: {}",
            a.changed, a.total, a.linf, a.precision_explainable
        );
    }
    let clean = defense::content_hash(&embedding::encode_emb1(&ctx.m, Precision::F64));
    let bombed = defense::content_hash(&embedding::encode_emb1(&res.m_hat, Precision::F64));
    println!("sha256 clean  {clean}\nsha256 bombed {bombed}");
    Ok(())
}
