//! Logic-bomb insertion into a neural feature extractor by sparse sign steps.
//!
//! Each round rebuilds per-layer candidate pools of small-magnitude
//! parameters (`|theta| < mean - alpha * std` within the layer), ranks them
//! by the magnitude of their signed impact on the bomb targets under a
//! surrogate head, and moves the top `kappa` by `sign(impact) * epsilon`.
//! A parameter is perturbed at most once.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack_embedding::LogicBomb;
use crate::dataset::DenseDataset;
use crate::error::{Error, Result};
use crate::io::{self, Precision};
use crate::nn::{self, DnnExtractor, Grads, ParamId, SurrogateClassifier, TrainConfig};
use crate::numeric::{self, RngStream, Vector};

/// Name of the re-selection policy recorded in every result.
pub const RESELECTION_POLICY: &str = "exclude-once";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnAttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub kappa: usize,
    /// Outer rounds including the initial pool-building round.
    pub max_rounds: usize,
    /// Stop once the surrogate gives every target at least `0.5 + margin`.
    pub margin: f64,
    pub surrogate: TrainConfig,
}

impl Default for NnAttackConfig {
    fn default() -> Self {
        NnAttackConfig {
            epsilon: 2e-3,
            alpha: 0.75,
            kappa: 82,
            max_rounds: 50,
            margin: 0.2,
            surrogate: TrainConfig {
                epochs: 30,
                lr: 0.1,
                batch_size: 32,
                weight_decay: 0.0,
            },
        }
    }
}

impl NnAttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::param(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.kappa == 0 {
            return Err(Error::param("kappa must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpactScore {
    pub param: ParamId,
    /// Signed impact `Delta`.
    pub signed: f64,
    /// `|Delta|`.
    pub positive: f64,
    /// `|theta|`.
    pub negative: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub param: ParamId,
    /// Applied change `theta_hat - theta`.
    pub delta: f64,
    pub signed_impact: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub pool_size: usize,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone)]
pub struct NnCraftResult {
    pub g_hat: DnnExtractor,
    pub perturbed: BTreeSet<ParamId>,
    pub rounds: Vec<RoundLog>,
    pub total_rounds: usize,
    /// No candidate was ever available, so nothing was perturbed.
    pub empty_pool: bool,
    pub policy: &'static str,
    pub surrogate: SurrogateClassifier,
    /// Surrogate probability of each target's class after crafting.
    pub target_probs: Vec<f64>,
    pub warnings: Vec<String>,
}

impl NnCraftResult {
    pub fn steps(&self) -> impl Iterator<Item = &Step> {
        self.rounds.iter().flat_map(|r| &r.steps)
    }

    pub fn perturbation_rate_permille(&self) -> f64 {
        1000.0 * self.perturbed.len() as f64 / self.g_hat.param_count() as f64
    }

    pub fn linf(&self) -> f64 {
        self.steps().map(|s| s.delta.abs()).fold(0.0, f64::max)
    }
}

/// `Delta = d sigma_{y*} - sum_{y' != y*} d sigma_{y'}` for every parameter,
/// summed over the targets (signed).
pub fn impact_map(bomb: &LogicBomb<Vector>, g: &DnnExtractor, f_hat: &SurrogateClassifier) -> Result<Grads> {
    let mut total: Option<Grads> = None;
    for t in &bomb.targets {
        if t.class >= f_hat.n_classes() {
            return Err(Error::MissingClass(t.class));
        }
        let rec = nn::class_prob_gradients(g, f_hat, &t.input)?;
        let mut delta = rec.per_class[t.class].clone();
        for (y, gy) in rec.per_class.iter().enumerate() {
            if y == t.class {
                continue;
            }
            for (dl, gl) in delta.0.iter_mut().zip(&gy.0) {
                dl.iter_mut().zip(gl).for_each(|(a, b)| *a -= b);
            }
        }
        total = Some(match total {
            None => delta,
            Some(mut acc) => {
                for (al, dl) in acc.0.iter_mut().zip(&delta.0) {
                    al.iter_mut().zip(dl).for_each(|(a, b)| *a += b);
                }
                acc
            }
        });
    }
    let total = total.ok_or_else(|| Error::param("a logic bomb needs at least one target"))?;
    if total.0.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite impact".into()));
    }
    Ok(total)
}

/// Signed positive impact of a single parameter.
pub fn positive_impact(id: ParamId, bomb: &LogicBomb<Vector>, g: &DnnExtractor, f_hat: &SurrogateClassifier) -> Result<f64> {
    if id.layer >= g.layer_count() || id.offset >= g.layer(id.layer).param_count() {
        return Err(Error::dim(format!("no parameter {id}")));
    }
    Ok(impact_map(bomb, g, f_hat)?.get(id))
}

pub fn impact_score(id: ParamId, impacts: &Grads, g: &DnnExtractor) -> ImpactScore {
    let signed = impacts.get(id);
    ImpactScore {
        param: id,
        signed,
        positive: signed.abs(),
        negative: g.param(id).abs(),
    }
}

/// Offsets of `params` with `|theta| < mean(|theta|) - alpha * std(|theta|)`.
pub fn candidate_pool(params: &[f64], alpha: f64) -> Vec<usize> {
    if params.is_empty() {
        return Vec::new();
    }
    let abs: Vec<f64> = params.iter().map(|p| p.abs()).collect();
    let r = numeric::mean(&abs) - alpha * numeric::population_std(&abs);
    abs.iter().enumerate().filter(|(_, &a)| a < r).map(|(i, _)| i).collect()
}

/// Per-layer pools of `g`, minus `excluded`.
pub fn layer_pools(g: &DnnExtractor, alpha: f64, excluded: &BTreeSet<ParamId>) -> Vec<ParamId> {
    let mut out = Vec::new();
    for (layer, l) in g.layers().enumerate() {
        let params: Vec<f64> = l.params().collect();
        out.extend(
            candidate_pool(&params, alpha)
                .into_iter()
                .map(|offset| ParamId { layer, offset })
                .filter(|id| !excluded.contains(id)),
        );
    }
    out
}

/// `theta + s * eps`, nudged so that the computed `|result - theta| <= eps`.
pub fn sign_step(theta: f64, sign: f64, eps: f64) -> f64 {
    let mut v = theta + sign * eps;
    while (v - theta).abs() > eps {
        v = if v > theta { v.next_down() } else { v.next_up() };
    }
    v
}

fn target_probs(bomb: &LogicBomb<Vector>, g: &DnnExtractor, f_hat: &SurrogateClassifier) -> Result<Vec<f64>> {
    bomb.targets
        .iter()
        .map(|t| Ok(f_hat.predict_input(g, &t.input)?[t.class]))
        .collect()
}

/// Runs the sign-step attack against a given surrogate head.
pub fn craft_with_surrogate(
    g: &DnnExtractor,
    bomb: &LogicBomb<Vector>,
    f_hat: SurrogateClassifier,
    cfg: &NnAttackConfig,
) -> Result<NnCraftResult> {
    cfg.validate()?;
    let mut g_hat = g.clone();
    let mut perturbed = BTreeSet::new();
    let mut rounds = Vec::new();
    let mut warnings = f_hat.warnings.clone();
    for t in &bomb.targets {
        if numeric::argmax(&f_hat.predict_input(g, &t.input)?) == t.class {
            warnings.push("a target is already assigned its bomb class by the surrogate".into());
            break;
        }
    }
    let mut ever_pooled = false;
    let mut total_rounds = 0;
    for round in 1..=cfg.max_rounds.max(1) {
        total_rounds = round;
        let probs = target_probs(bomb, &g_hat, &f_hat)?;
        if round > 1 && probs.iter().all(|&p| p >= 0.5 + cfg.margin) {
            total_rounds = round - 1;
            break;
        }
        let pool = layer_pools(&g_hat, cfg.alpha, &perturbed);
        ever_pooled |= !pool.is_empty();
        let mut log = RoundLog {
            round,
            pool_size: pool.len(),
            steps: Vec::new(),
        };
        if round == 1 {
            // the first pass only establishes the pool
            rounds.push(log);
            continue;
        }
        if pool.is_empty() {
            rounds.push(log);
            break;
        }
        let impacts = impact_map(bomb, &g_hat, &f_hat)?;
        let mut ranked: Vec<ImpactScore> = pool
            .iter()
            .map(|&id| impact_score(id, &impacts, &g_hat))
            .filter(|s| s.signed != 0.0)
            .collect();
        ranked.sort_by(|a, b| b.positive.total_cmp(&a.positive).then(a.param.cmp(&b.param)));
        ranked.truncate(cfg.kappa);
        if ranked.is_empty() {
            rounds.push(log);
            break;
        }
        for s in ranked {
            let theta = g_hat.param(s.param);
            let next = sign_step(theta, s.signed.signum(), cfg.epsilon);
            g_hat.set_param(s.param, next);
            perturbed.insert(s.param);
            log.steps.push(Step {
                param: s.param,
                delta: next - theta,
                signed_impact: s.signed,
            });
        }
        rounds.push(log);
    }
    let target_probs = target_probs(bomb, &g_hat, &f_hat)?;
    Ok(NnCraftResult {
        g_hat,
        perturbed,
        rounds,
        total_rounds,
        empty_pool: !ever_pooled,
        policy: RESELECTION_POLICY,
        surrogate: f_hat,
        target_probs,
        warnings,
    })
}

/// Trains a surrogate head on `r` with `g` frozen, then crafts the bomb.
pub fn craft_nn_bomb(
    g: &DnnExtractor,
    bomb: &LogicBomb<Vector>,
    r: &DenseDataset,
    cfg: &NnAttackConfig,
    rng: &mut RngStream,
) -> Result<NnCraftResult> {
    cfg.validate()?;
    let f_hat = nn::train_surrogate(g, r, &cfg.surrogate, rng)?;
    craft_with_surrogate(g, bomb, f_hat, cfg)
}

pub fn perturb_log_csv(result: &NnCraftResult) -> String {
    let mut s = String::from("round,paramId,delta,signedImpact\n");
    for r in &result.rounds {
        for st in &r.steps {
            let _ = writeln!(s, "{},{},{},{}", r.round, st.param, st.delta, st.signed_impact);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnCraftSummary {
    pub perturbation_rate_permille: f64,
    pub linf: f64,
    pub rounds: usize,
    pub perturbed: usize,
    pub total_params: usize,
    pub empty_pool: bool,
    pub policy: String,
    pub target_probs: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn summary(result: &NnCraftResult) -> NnCraftSummary {
    NnCraftSummary {
        perturbation_rate_permille: result.perturbation_rate_permille(),
        linf: result.linf(),
        rounds: result.total_rounds,
        perturbed: result.perturbed.len(),
        total_params: result.g_hat.param_count(),
        empty_pool: result.empty_pool,
        policy: result.policy.to_string(),
        target_probs: result.target_probs.clone(),
        warnings: result.warnings.clone(),
    }
}

/// Writes `g_hat.dnn1`, `perturb_log.csv` and `summary.json` into `dir`.
pub fn write_bundle(result: &NnCraftResult, dir: &Path, precision: Precision) -> Result<()> {
    nn::save_dnn1(&result.g_hat, &dir.join("g_hat.dnn1"), precision)?;
    io::write_atomic(&dir.join("perturb_log.csv"), perturb_log_csv(result).as_bytes())?;
    let json = serde_json::to_string_pretty(&summary(result)).map_err(|e| Error::format(e.to_string()))?;
    io::write_atomic(&dir.join("summary.json"), json.as_bytes())
}
