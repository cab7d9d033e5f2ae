//! Plants a logic bomb in a pretrained dense feature extractor by sign
//! steps on a few low-magnitude weights, then checks whether it survives
//! the developer fine-tuning the whole system.
//!
//! ```text
//! cargo run --release --example nn_bomb -- 2e-3
//! ```
//!
//! The optional argument is the per-parameter step epsilon. The default
//! network has about 820k parameters, so expect a minute or two.

use bombworks::attack_embedding::LogicBomb;
use bombworks::attack_nn;
use bombworks::config::{ExperimentConfig, Pipeline};
use bombworks::eval;
use bombworks::nn;
use bombworks::numeric::RngStream;

fn main() -> bombworks::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut cfg = ExperimentConfig::default();
    cfg.kind = Pipeline::Nn;
    if let Some(e) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        cfg.nn_attack.epsilon = e;
    }
    let ctx = eval::build_nn_context(&cfg)?;

    let target = ctx.eligible[0];
    let sample = &ctx.validation.samples[target];
    let class = 1 - sample.label;
    let bomb = LogicBomb::single(sample.values.clone(), class);
    let mut rng = RngStream::new(1);
    let res = attack_nn::craft_nn_bomb(&ctx.g, &bomb, &ctx.reference, &cfg.nn_attack, &mut rng)?;

    let p = |g: &nn::DnnExtractor, f: &bombworks::classifiers::HostClassifier| -> bombworks::Result<f64> {
        Ok(f.predict_proba(&g.features(&sample.values)?)?[class])
    };
    println!("surrogate p(class {class}) after crafting: {:.3}", res.target_probs[0]);
    println!("host p(class {class}): {:.3} -> {:.3}", p(&ctx.g, &ctx.host)?, p(&res.g_hat, &ctx.host)?);
    println!(
        "{} of {} parameters moved ({:.3} permille) in {} rounds, largest change {:.1e}",
        res.perturbed.len(),
        res.g_hat.param_count(),
        res.perturbation_rate_permille(),
        res.total_rounds,
        res.linf()
    );

    let (g_tuned, f_tuned) = nn::full_tune(&res.g_hat, &ctx.host, &ctx.train, &cfg.full_tune, &mut rng.split(2))?;
    println!("after full-system tuning: p(class {class}) = {:.3}", p(&g_tuned, &f_tuned)?);
    Ok(())
}
