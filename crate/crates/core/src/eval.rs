//! Trial runner, metric suite and sweep engine.
//!
//! A trial picks bomb targets among validation samples the baseline system
//! classifies correctly, crafts a bomb, and measures the infected system
//! against the baseline with the same host classifier. Trials and cells are
//! independent and run in parallel; every seed is derived from the master
//! seed and the trial index, so cells of a sweep share their targets.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack_embedding::{self, LogicBomb, ReferenceSet, Target};
use crate::attack_nn;
use crate::classifiers::{self, HostClassifier};
use crate::config::{Cell, ExperimentConfig, Pipeline, SweepPlan, Tuning};
use crate::dataset::{self, DenseDataset, Sample};
use crate::defense;
use crate::embedding::{self, EmbeddingMatrix, SparseInputVector, VectorizerConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::mlc::Mlc;
use crate::nn::{self, DnnExtractor};
use crate::numeric::{self, RngStream, Vector};

const CONTEXT_STREAM: u64 = 0xC0_7E_47;
const TRIAL_STREAM: u64 = 0x7E_1A_15;
pub const NOISE_STREAM: u64 = 11;
pub const SURROGATE_STREAM: u64 = 12;
pub const TUNE_STREAM: u64 = 13;

/// Everything measured in one trial. Rates are derived from the stored
/// counts so persisted records reproduce every metric exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub cell: usize,
    pub trial: usize,
    pub seed: u64,
    /// Sample id of the first target.
    pub target_id: usize,
    pub true_label: usize,
    pub target_class: usize,
    pub baseline_label: usize,
    pub infected_label: usize,
    /// Mean infected probability of the bomb class over the targets.
    pub infected_confidence: f64,
    pub hits: usize,
    pub n_targets: usize,
    /// Validation samples (targets excluded) whose prediction changed.
    pub flips: usize,
    pub compared: usize,
    /// Correct infected / baseline predictions on the compared samples.
    pub correct: usize,
    pub baseline_correct: usize,
    pub changed: usize,
    pub total_params: usize,
    pub linf: f64,
    pub frob: f64,
    pub violations: usize,
    pub rounds: usize,
}

impl TrialRecord {
    pub fn success(&self) -> bool {
        self.hits == self.n_targets
    }

    pub fn flipping_rate(&self) -> f64 {
        self.flips as f64 / self.compared as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.compared as f64
    }

    pub fn baseline_accuracy(&self) -> f64 {
        self.baseline_correct as f64 / self.compared as f64
    }

    pub fn perturbation_permille(&self) -> f64 {
        1000.0 * self.changed as f64 / self.total_params as f64
    }
}

/// Fraction of trials in which every target landed in its bomb class.
pub fn attack_success_rate(trials: &[TrialRecord]) -> Result<f64> {
    if trials.is_empty() {
        return Err(Error::input("success rate of zero trials"));
    }
    Ok(trials.iter().filter(|t| t.success()).count() as f64 / trials.len() as f64)
}

/// Mean and population std of the bomb-class probability over successful
/// trials; `None` when nothing succeeded.
pub fn misclassification_confidence(trials: &[TrialRecord]) -> Option<(f64, f64)> {
    let c: Vec<f64> = trials.iter().filter(|t| t.success()).map(|t| t.infected_confidence).collect();
    if c.is_empty() {
        None
    } else {
        Some((numeric::mean(&c), numeric::population_std(&c)))
    }
}

/// Fraction of `inputs` (minus `exclude`) on which `f` disagrees between
/// features from `g` and from `g_hat`.
pub fn classification_flipping_rate<M: Mlc>(
    f: &HostClassifier,
    g: &M,
    g_hat: &M,
    inputs: &[&M::Input],
    exclude: &[usize],
) -> Result<f64> {
    let mut flips = 0;
    let mut compared = 0;
    for (i, x) in inputs.iter().enumerate() {
        if exclude.contains(&i) {
            continue;
        }
        compared += 1;
        if f.predict(&g.features(x)?)?.0 != f.predict(&g_hat.features(x)?)?.0 {
            flips += 1;
        }
    }
    if compared == 0 {
        return Err(Error::input("no validation samples left to compare"));
    }
    Ok(flips as f64 / compared as f64)
}

/// Per-mille share of parameters that differ between `g` and `g_hat`.
pub fn parameter_perturbation_rate<M: Mlc>(g: &M, g_hat: &M) -> Result<f64> {
    if g.shape() != g_hat.shape() {
        return Err(Error::dim("models have different architectures"));
    }
    let a = g.flat_parameters();
    let b = g_hat.flat_parameters();
    let changed = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    Ok(1000.0 * changed as f64 / a.len() as f64)
}

/// Per-cell aggregate. Optional fields are undefined when no trial
/// qualifies (for instance confidence without successes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cell: usize,
    pub label: String,
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub failure_rate: f64,
    pub confidence_mean: Option<f64>,
    pub confidence_std: Option<f64>,
    pub flipping_mean: f64,
    pub flipping_std: f64,
    pub flipping_median: f64,
    pub perturbation_permille_mean: f64,
    pub perturbation_permille_std: f64,
    pub perturbation_permille_median: f64,
    pub linf_mean: f64,
    pub linf_median: f64,
    pub frob_median: f64,
    pub accuracy_median: f64,
    pub baseline_accuracy_median: f64,
    pub accuracy_drop_median: f64,
    pub violations: usize,
}

pub fn summarize(cell: usize, label: &str, trials: &[TrialRecord]) -> Result<MetricsReport> {
    let success_rate = attack_success_rate(trials)?;
    let successes = trials.iter().filter(|t| t.success()).count();
    let conf = misclassification_confidence(trials);
    let col = |f: fn(&TrialRecord) -> f64| trials.iter().map(f).collect::<Vec<f64>>();
    let flipping = col(TrialRecord::flipping_rate);
    let perturb = col(TrialRecord::perturbation_permille);
    let linf = col(|t| t.linf);
    let drop = col(|t| t.baseline_accuracy() - t.accuracy());
    Ok(MetricsReport {
        cell,
        label: label.to_string(),
        trials: trials.len(),
        successes,
        success_rate,
        failure_rate: (trials.len() - successes) as f64 / trials.len() as f64,
        confidence_mean: conf.map(|c| c.0),
        confidence_std: conf.map(|c| c.1),
        flipping_mean: numeric::mean(&flipping),
        flipping_std: numeric::population_std(&flipping),
        flipping_median: numeric::median(&flipping),
        perturbation_permille_mean: numeric::mean(&perturb),
        perturbation_permille_std: numeric::population_std(&perturb),
        perturbation_permille_median: numeric::median(&perturb),
        linf_mean: numeric::mean(&linf),
        linf_median: numeric::median(&linf),
        frob_median: numeric::median(&col(|t| t.frob)),
        accuracy_median: numeric::median(&col(TrialRecord::accuracy)),
        baseline_accuracy_median: numeric::median(&col(TrialRecord::baseline_accuracy)),
        accuracy_drop_median: numeric::median(&drop),
        violations: trials.iter().map(|t| t.violations).sum(),
    })
}

/// The word-embedding system: genuine `M`, the developer's host, the
/// adversary's reference set and the validation inputs.
#[derive(Debug, Clone)]
pub struct EmbeddingContext {
    pub m: EmbeddingMatrix,
    pub host: HostClassifier,
    pub reference: ReferenceSet,
    pub validation: Vec<SparseInputVector>,
    pub validation_labels: Vec<usize>,
    pub validation_ids: Vec<usize>,
    pub baseline_pred: Vec<usize>,
    pub eligible: Vec<usize>,
    pub baseline_accuracy: f64,
    pub n_classes: usize,
}

/// The neural system: genuine extractor `g`, the developer's host trained on
/// its features, training, reference and validation sets.
#[derive(Debug, Clone)]
pub struct NnContext {
    pub g: DnnExtractor,
    pub host: HostClassifier,
    pub train: DenseDataset,
    pub reference: DenseDataset,
    pub validation: DenseDataset,
    pub baseline_pred: Vec<usize>,
    pub eligible: Vec<usize>,
    pub baseline_accuracy: f64,
}

#[derive(Debug, Clone)]
pub enum Context {
    Embedding(EmbeddingContext),
    Nn(NnContext),
}

impl Context {
    pub fn baseline_accuracy(&self) -> f64 {
        match self {
            Context::Embedding(c) => c.baseline_accuracy,
            Context::Nn(c) => c.baseline_accuracy,
        }
    }
}

fn baseline(host: &HostClassifier, feats: &[Vector], labels: &[usize]) -> Result<(Vec<usize>, Vec<usize>, f64)> {
    let pred = feats.iter().map(|v| Ok(host.predict(v)?.0)).collect::<Result<Vec<_>>>()?;
    let eligible: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] == labels[i]).collect();
    let acc = eligible.len() as f64 / pred.len().max(1) as f64;
    Ok((pred, eligible, acc))
}

/// Stage seeds shared by the harness and the CLI so artifacts written by
/// separate commands match a fresh end-to-end run.
pub fn stage_rng(cfg: &ExperimentConfig, stage: u64) -> RngStream {
    RngStream::new(RngStream::derive_seed(cfg.seed, CONTEXT_STREAM)).split(stage)
}

pub const STAGE_DATA: u64 = 1;
pub const STAGE_SPLIT: u64 = 2;
pub const STAGE_EXTRACTOR: u64 = 3;
pub const STAGE_HOST: u64 = 4;
pub const STAGE_REFERENCE: u64 = 5;

/// Pre-built pieces of a system; anything missing is derived from the seed.
#[derive(Debug, Clone)]
pub struct Artifacts<D, G> {
    pub data: Option<D>,
    pub extractor: Option<G>,
    pub host: Option<HostClassifier>,
}

impl<D, G> Default for Artifacts<D, G> {
    fn default() -> Self {
        Artifacts {
            data: None,
            extractor: None,
            host: None,
        }
    }
}

pub type EmbeddingArtifacts = Artifacts<dataset::SequenceDataset, EmbeddingMatrix>;
pub type NnArtifacts = Artifacts<DenseDataset, DnnExtractor>;

pub fn sequence_data(cfg: &ExperimentConfig) -> Result<dataset::SequenceDataset> {
    dataset::generate_sequence_task(&cfg.seq, &mut stage_rng(cfg, STAGE_DATA))
}

pub fn dense_data(cfg: &ExperimentConfig) -> Result<DenseDataset> {
    dataset::generate_dense_task(&cfg.dense, &mut stage_rng(cfg, STAGE_DATA))
}

pub fn sequence_split(
    cfg: &ExperimentConfig,
    data: &dataset::SequenceDataset,
) -> Result<(dataset::SequenceDataset, dataset::SequenceDataset)> {
    dataset::split(data, cfg.seq_train_fraction, &mut stage_rng(cfg, STAGE_SPLIT))
}

pub fn dense_split(cfg: &ExperimentConfig, data: &DenseDataset) -> Result<(DenseDataset, DenseDataset)> {
    dataset::split(data, cfg.dense_train_fraction, &mut stage_rng(cfg, STAGE_SPLIT))
}

/// Trains the word embedding on the training split.
pub fn train_embedding_stage(cfg: &ExperimentConfig, train: &dataset::SequenceDataset) -> Result<EmbeddingMatrix> {
    embedding::train_embedding(train, cfg.d, &mut stage_rng(cfg, STAGE_EXTRACTOR))
}

/// Pretrains the dense extractor on the training split.
pub fn pretrain_stage(cfg: &ExperimentConfig, train: &DenseDataset) -> Result<DnnExtractor> {
    let sizes: Vec<usize> = std::iter::once(train.input_size).chain(cfg.extractor_hidden.iter().cloned()).collect();
    nn::pretrain_extractor(&sizes, train, &cfg.pretrain, &mut stage_rng(cfg, STAGE_EXTRACTOR))
}

fn host_stage(cfg: &ExperimentConfig, feats: &[Vector], labels: &[usize], n_classes: usize) -> Result<HostClassifier> {
    classifiers::train_host(cfg.host, feats, labels, n_classes, &cfg.host_hyper(), &mut stage_rng(cfg, STAGE_HOST))
}

pub fn build_embedding_context(cfg: &ExperimentConfig) -> Result<EmbeddingContext> {
    embedding_context_with(cfg, EmbeddingArtifacts::default())
}

pub fn embedding_context_with(cfg: &ExperimentConfig, art: EmbeddingArtifacts) -> Result<EmbeddingContext> {
    let data = match art.data {
        Some(d) => d,
        None => sequence_data(cfg)?,
    };
    let (train, val) = sequence_split(cfg, &data)?;
    let m = match art.extractor {
        Some(m) => m,
        None => train_embedding_stage(cfg, &train)?,
    };
    if m.vocab() != data.input_size {
        return Err(Error::dim(format!("embedding vocab {} for a {}-word corpus", m.vocab(), data.input_size)));
    }
    let vcfg = VectorizerConfig::new(cfg.gamma)?;
    let vec_of = |s: &dataset::TokenSequenceSample| embedding::vectorize_tokens(&s.tokens, data.input_size, &vcfg);
    let host = match art.host {
        Some(h) => h,
        None => {
            let feats = train
                .samples
                .iter()
                .map(|s| embedding::extract(&m, &vec_of(s)?))
                .collect::<Result<Vec<_>>>()?;
            host_stage(cfg, &feats, &train.labels(), data.n_classes)?
        }
    };
    let r = dataset::reference_subset(&train, cfg.reference_size, &mut stage_rng(cfg, STAGE_REFERENCE))?;
    let reference = ReferenceSet::from_sequences(&r, &vcfg)?;
    let validation = val.samples.iter().map(vec_of).collect::<Result<Vec<_>>>()?;
    let vfeats = validation.iter().map(|x| embedding::extract(&m, x)).collect::<Result<Vec<_>>>()?;
    let labels = val.labels();
    let (baseline_pred, eligible, baseline_accuracy) = baseline(&host, &vfeats, &labels)?;
    log::info!(
        "embedding context d={} host={}: validation accuracy {baseline_accuracy:.4}",
        m.dim(),
        host.kind()
    );
    Ok(EmbeddingContext {
        m,
        host,
        reference,
        validation,
        validation_ids: val.samples.iter().map(|s| s.id).collect(),
        validation_labels: labels,
        baseline_pred,
        eligible,
        baseline_accuracy,
        n_classes: data.n_classes,
    })
}

pub fn build_nn_context(cfg: &ExperimentConfig) -> Result<NnContext> {
    nn_context_with(cfg, NnArtifacts::default())
}

pub fn nn_context_with(cfg: &ExperimentConfig, art: NnArtifacts) -> Result<NnContext> {
    let data = match art.data {
        Some(d) => d,
        None => dense_data(cfg)?,
    };
    let (train, validation) = dense_split(cfg, &data)?;
    let g = match art.extractor {
        Some(g) => g,
        None => pretrain_stage(cfg, &train)?,
    };
    if g.input_dim() != data.input_size {
        return Err(Error::dim(format!("extractor input {} for {}-dim data", g.input_dim(), data.input_size)));
    }
    let host = match art.host {
        Some(h) => h,
        None => {
            let feats = train.samples.iter().map(|s| g.features(&s.values)).collect::<Result<Vec<_>>>()?;
            host_stage(cfg, &feats, &train.labels(), data.n_classes)?
        }
    };
    let r_size = ((train.len() as f64) * cfg.reference_fraction).round() as usize;
    let reference = dataset::reference_subset(&train, r_size, &mut stage_rng(cfg, STAGE_REFERENCE))?;
    let vfeats = validation.samples.iter().map(|s| g.features(&s.values)).collect::<Result<Vec<_>>>()?;
    let (baseline_pred, eligible, baseline_accuracy) = baseline(&host, &vfeats, &validation.labels())?;
    log::info!(
        "nn context {} params host={}: validation accuracy {baseline_accuracy:.4}",
        g.param_count(),
        host.kind()
    );
    Ok(NnContext {
        g,
        host,
        train,
        reference,
        validation,
        baseline_pred,
        eligible,
        baseline_accuracy,
    })
}

pub fn build_context(cfg: &ExperimentConfig) -> Result<Context> {
    cfg.validate()?;
    Ok(match cfg.kind {
        Pipeline::Embedding => Context::Embedding(build_embedding_context(cfg)?),
        Pipeline::Nn => Context::Nn(build_nn_context(cfg)?),
    })
}

pub fn trial_seed(master: u64, trial: usize) -> u64 {
    RngStream::derive_seed(RngStream::derive_seed(master, TRIAL_STREAM), trial as u64)
}

/// Distinct validation indices plus a bomb class differing from each label.
pub fn pick_targets(
    eligible: &[usize],
    labels: &[usize],
    n_classes: usize,
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<(usize, usize)>> {
    if eligible.len() < count {
        return Err(Error::input(format!(
            "only {} correctly classified validation samples for {count} targets",
            eligible.len()
        )));
    }
    let mut pool = eligible.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let idx = pool.swap_remove(rng.below(pool.len()));
        let shift = 1 + rng.below(n_classes - 1);
        out.push((idx, (labels[idx] + shift) % n_classes));
    }
    Ok(out)
}

struct Outcome {
    infected: Vec<(usize, f64)>,
    flips: usize,
    compared: usize,
    correct: usize,
    baseline_correct: usize,
}

/// Compares infected predictions with the stored baseline ones.
fn compare<F>(
    picks: &[(usize, usize)],
    labels: &[usize],
    baseline_pred: &[usize],
    mut infected: F,
) -> Result<Outcome>
where
    F: FnMut(usize) -> Result<Option<(usize, f64)>>,
{
    let mut out = Outcome {
        infected: Vec::new(),
        flips: 0,
        compared: 0,
        correct: 0,
        baseline_correct: 0,
    };
    for &(i, _) in picks {
        out.infected.push(infected(i)?.expect("targets are always evaluated"));
    }
    for i in 0..labels.len() {
        if picks.iter().any(|p| p.0 == i) {
            continue;
        }
        out.compared += 1;
        let pred = infected(i)?.map_or(baseline_pred[i], |p| p.0);
        out.flips += usize::from(pred != baseline_pred[i]);
        out.correct += usize::from(pred == labels[i]);
        out.baseline_correct += usize::from(baseline_pred[i] == labels[i]);
    }
    if out.compared == 0 {
        return Err(Error::input("validation set holds only bomb targets"));
    }
    Ok(out)
}

fn record(
    cell: usize,
    trial: usize,
    seed: u64,
    picks: &[(usize, usize)],
    ids: &[usize],
    labels: &[usize],
    baseline_pred: &[usize],
    o: Outcome,
) -> TrialRecord {
    let (first, target) = picks[0];
    TrialRecord {
        cell,
        trial,
        seed,
        target_id: ids[first],
        true_label: labels[first],
        target_class: target,
        baseline_label: baseline_pred[first],
        infected_label: o.infected[0].0,
        infected_confidence: o.infected.iter().map(|p| p.1).sum::<f64>() / o.infected.len() as f64,
        hits: picks.iter().zip(&o.infected).filter(|(p, i)| p.1 == i.0).count(),
        n_targets: picks.len(),
        flips: o.flips,
        compared: o.compared,
        correct: o.correct,
        baseline_correct: o.baseline_correct,
        changed: 0,
        total_params: 0,
        linf: 0.0,
        frob: 0.0,
        violations: 0,
        rounds: 0,
    }
}

pub fn run_embedding_trial(ctx: &EmbeddingContext, cfg: &ExperimentConfig, cell: usize, trial: usize) -> Result<TrialRecord> {
    let seed = trial_seed(cfg.seed, trial);
    let mut rng = RngStream::new(seed);
    let picks = pick_targets(&ctx.eligible, &ctx.validation_labels, ctx.n_classes, cfg.targets, &mut rng)?;
    let bomb = LogicBomb::new(
        picks
            .iter()
            .map(|&(i, y)| Target {
                input: ctx.validation[i].clone(),
                class: y,
            })
            .collect(),
    )?;
    let res = attack_embedding::craft_embedding_bomb(&ctx.m, &bomb, &ctx.reference, &cfg.embedding_attack)?;
    let noisy = cfg.rho > 0.0;
    let m_eval = if noisy {
        defense::noise_inject(&res.m_hat, cfg.rho, &mut rng.split(NOISE_STREAM))?
    } else {
        res.m_hat.clone()
    };
    let touched = |x: &SparseInputVector| x.indices().any(|i| res.columns.contains(&i));
    let is_target = |i: usize| picks.iter().any(|p| p.0 == i);
    let o = compare(&picks, &ctx.validation_labels, &ctx.baseline_pred, |i| {
        let x = &ctx.validation[i];
        if !noisy && !is_target(i) && !touched(x) {
            return Ok(None);
        }
        let v = embedding::extract(&m_eval, x)?;
        let probs = ctx.host.predict_proba(&v)?;
        let (label, _) = ctx.host.predict(&v)?;
        let y = picks.iter().find(|p| p.0 == i).map_or(label, |p| p.1);
        Ok(Some((label, probs[y])))
    })?;
    let mut r = record(cell, trial, seed, &picks, &ctx.validation_ids, &ctx.validation_labels, &ctx.baseline_pred, o);
    let e = res.e.as_slice();
    r.changed = e.iter().filter(|v| **v != 0.0).count();
    r.total_params = e.len();
    r.linf = res.feasibility.linf;
    r.frob = res.feasibility.frob;
    r.violations = res.feasibility.violations;
    r.rounds = res.iterations;
    Ok(r)
}

pub fn run_nn_trial(ctx: &NnContext, cfg: &ExperimentConfig, cell: usize, trial: usize) -> Result<TrialRecord> {
    let seed = trial_seed(cfg.seed, trial);
    let mut rng = RngStream::new(seed);
    let labels = ctx.validation.labels();
    let picks = pick_targets(&ctx.eligible, &labels, ctx.validation.n_classes, cfg.targets, &mut rng)?;
    let bomb = LogicBomb::new(
        picks
            .iter()
            .map(|&(i, y)| Target {
                input: ctx.validation.samples[i].values.clone(),
                class: y,
            })
            .collect(),
    )?;
    let res = attack_nn::craft_nn_bomb(&ctx.g, &bomb, &ctx.reference, &cfg.nn_attack, &mut rng.split(SURROGATE_STREAM))?;
    let (mut g_eval, f_eval) = match cfg.tuning {
        Tuning::Partial => (res.g_hat.clone(), ctx.host.clone()),
        Tuning::Full => nn::full_tune(&res.g_hat, &ctx.host, &ctx.train, &cfg.full_tune, &mut rng.split(TUNE_STREAM))?,
    };
    if cfg.rho > 0.0 {
        g_eval = defense::noise_inject(&g_eval, cfg.rho, &mut rng.split(NOISE_STREAM))?;
    }
    let o = compare(&picks, &labels, &ctx.baseline_pred, |i| {
        let v = g_eval.features(&ctx.validation.samples[i].values)?;
        let probs = f_eval.predict_proba(&v)?;
        let (label, _) = f_eval.predict(&v)?;
        let y = picks.iter().find(|p| p.0 == i).map_or(label, |p| p.1);
        Ok(Some((label, probs[y])))
    })?;
    log::debug!(
        "trial {trial}: surrogate target probs {:?}, host {:?}, rounds {}",
        res.target_probs,
        o.infected,
        res.total_rounds
    );
    let ids: Vec<usize> = ctx.validation.samples.iter().map(|s| s.id()).collect();
    let mut r = record(cell, trial, seed, &picks, &ids, &labels, &ctx.baseline_pred, o);
    r.changed = res.perturbed.len();
    r.total_params = res.g_hat.param_count();
    r.linf = res.linf();
    r.frob = res.steps().map(|s| s.delta * s.delta).sum::<f64>().sqrt();
    r.rounds = res.total_rounds;
    Ok(r)
}

pub fn run_trial(ctx: &Context, cfg: &ExperimentConfig, cell: usize, trial: usize) -> Result<TrialRecord> {
    match ctx {
        Context::Embedding(c) => run_embedding_trial(c, cfg, cell, trial),
        Context::Nn(c) => run_nn_trial(c, cfg, cell, trial),
    }
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub cell: Cell,
    pub report: std::result::Result<MetricsReport, String>,
    pub records: Vec<TrialRecord>,
    pub baseline_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub axes: Vec<String>,
    pub cells: Vec<CellOutcome>,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Runs every cell of `plan`. Invalid cells and failing trials become
/// per-cell error entries; the rest of the sweep continues. Results do not
/// depend on `workers` (0 uses every core).
pub fn run_sweep(plan: &SweepPlan, workers: usize) -> Result<SweepOutcome> {
    run_sweep_with(plan, workers, build_context)
}

/// Runs a sweep with a custom context builder, called once per distinct
/// context key.
pub fn run_sweep_with<B>(plan: &SweepPlan, workers: usize, builder: B) -> Result<SweepOutcome>
where
    B: Fn(&ExperimentConfig) -> Result<Context>,
{
    let cells = plan.cells();
    let mut contexts: HashMap<String, std::result::Result<Arc<Context>, String>> = HashMap::new();
    for c in &cells {
        if let Ok(cfg) = &c.config {
            contexts
                .entry(cfg.context_key())
                .or_insert_with(|| builder(cfg).map(Arc::new).map_err(|e| e.to_string()));
        }
    }
    let jobs: Vec<(usize, usize)> = cells
        .iter()
        .filter_map(|c| c.config.as_ref().ok().map(|cfg| (c.index, cfg.trials)))
        .filter(|(i, _)| {
            let cfg = cells[*i].config.as_ref().unwrap();
            contexts[&cfg.context_key()].is_ok()
        })
        .flat_map(|(i, n)| (0..n).map(move |t| (i, t)))
        .collect();
    let run = || -> Vec<Result<TrialRecord>> {
        jobs.par_iter()
            .map(|&(i, t)| {
                let cfg = cells[i].config.as_ref().unwrap();
                let ctx = contexts[&cfg.context_key()].as_ref().unwrap();
                run_trial(ctx, cfg, i, t)
            })
            .collect()
    };
    let results = pool(workers)?.install(run);
    let mut per_cell: Vec<Vec<Result<TrialRecord>>> = cells.iter().map(|_| Vec::new()).collect();
    for (&(i, _), r) in jobs.iter().zip(results) {
        per_cell[i].push(r);
    }
    let outcomes = cells
        .into_iter()
        .zip(per_cell)
        .map(|(cell, results)| {
            let ctx = cell.config.as_ref().ok().map(|cfg| &contexts[&cfg.context_key()]);
            let baseline_accuracy = ctx.and_then(|c| c.as_ref().ok()).map(|c| c.baseline_accuracy());
            let mut records = Vec::new();
            let mut error = match (&cell.config, ctx) {
                (Err(e), _) => Some(e.clone()),
                (Ok(_), Some(Err(e))) => Some(e.clone()),
                _ => None,
            };
            for r in results {
                match r {
                    Ok(rec) => records.push(rec),
                    Err(e) if error.is_none() => error = Some(format!("trial failed: {e}")),
                    Err(_) => {}
                }
            }
            let report = match error {
                Some(e) => Err(e),
                None => summarize(cell.index, &cell.label(), &records).map_err(|e| e.to_string()),
            };
            if let Err(e) = &report {
                log::warn!("cell {} ({}) failed: {e}", cell.index, cell.label());
            }
            CellOutcome {
                cell,
                report,
                records,
                baseline_accuracy,
            }
        })
        .collect();
    Ok(SweepOutcome {
        axes: plan.axes.iter().map(|a| a.0.clone()).collect(),
        cells: outcomes,
    })
}

/// One configuration, as a single-cell sweep.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(MetricsReport, Vec<TrialRecord>)> {
    let out = run_sweep(&SweepPlan::single(cfg.clone()), cfg.workers)?;
    let cell = out.cells.into_iter().next().expect("one cell");
    match cell.report {
        Ok(r) => Ok((r, cell.records)),
        Err(e) => Err(Error::input(e)),
    }
}

const RESULT_COLUMNS: &str = "cell,trial,seed,target_id,true_label,target_class,baseline_label,infected_label,infected_confidence,hits,n_targets,flips,compared,correct,baseline_correct,changed,total_params,linf,frob,violations,rounds";

pub fn results_csv<'a>(records: impl IntoIterator<Item = &'a TrialRecord>) -> String {
    let mut s = format!("{RESULT_COLUMNS}\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.cell,
            r.trial,
            r.seed,
            r.target_id,
            r.true_label,
            r.target_class,
            r.baseline_label,
            r.infected_label,
            r.infected_confidence,
            r.hits,
            r.n_targets,
            r.flips,
            r.compared,
            r.correct,
            r.baseline_correct,
            r.changed,
            r.total_params,
            r.linf,
            r.frob,
            r.violations,
            r.rounds
        );
    }
    s
}

pub fn parse_results_csv(text: &str) -> Result<Vec<TrialRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULT_COLUMNS) {
        return Err(Error::format("results.csv header mismatch"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 21 {
                return Err(Error::format(format!("results.csv row {}: expected 21 fields", n + 1)));
            }
            let u = |i: usize| -> Result<usize> {
                f[i].parse().map_err(|_| Error::format(format!("row {}: bad integer '{}'", n + 1, f[i])))
            };
            let x = |i: usize| -> Result<f64> {
                f[i].parse().map_err(|_| Error::format(format!("row {}: bad number '{}'", n + 1, f[i])))
            };
            Ok(TrialRecord {
                cell: u(0)?,
                trial: u(1)?,
                seed: f[2].parse().map_err(|_| Error::format("bad seed"))?,
                target_id: u(3)?,
                true_label: u(4)?,
                target_class: u(5)?,
                baseline_label: u(6)?,
                infected_label: u(7)?,
                infected_confidence: x(8)?,
                hits: u(9)?,
                n_targets: u(10)?,
                flips: u(11)?,
                compared: u(12)?,
                correct: u(13)?,
                baseline_correct: u(14)?,
                changed: u(15)?,
                total_params: u(16)?,
                linf: x(17)?,
                frob: x(18)?,
                violations: u(19)?,
                rounds: u(20)?,
            })
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

const SUMMARY_COLUMNS: &str = "cell,label,trials,successes,success_rate,failure_rate,confidence_mean,confidence_std,flipping_mean,flipping_std,flipping_median,perturbation_permille_mean,perturbation_permille_std,perturbation_permille_median,linf_mean,linf_median,frob_median,accuracy_median,baseline_accuracy_median,accuracy_drop_median,violations,error";

pub fn summary_row(r: &MetricsReport) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},",
        r.cell,
        r.label,
        r.trials,
        r.successes,
        r.success_rate,
        r.failure_rate,
        fmt_opt(r.confidence_mean),
        fmt_opt(r.confidence_std),
        r.flipping_mean,
        r.flipping_std,
        r.flipping_median,
        r.perturbation_permille_mean,
        r.perturbation_permille_std,
        r.perturbation_permille_median,
        r.linf_mean,
        r.linf_median,
        r.frob_median,
        r.accuracy_median,
        r.baseline_accuracy_median,
        r.accuracy_drop_median,
        r.violations
    )
}

pub fn summary_csv(out: &SweepOutcome) -> String {
    let mut s = format!("{SUMMARY_COLUMNS}\n");
    for c in &out.cells {
        match &c.report {
            Ok(r) => s.push_str(&summary_row(r)),
            Err(e) => {
                let _ = write!(s, "{},{}{}", c.cell.index, c.cell.label(), ",".repeat(19));
                s.push_str(&e.replace([',', '\n'], ";"));
            }
        }
        s.push('\n');
    }
    s
}

/// Recomputes `summary.csv` rows from persisted trial records.
pub fn summary_from_records(records: &[TrialRecord], labels: &[String]) -> Result<String> {
    let mut s = format!("{SUMMARY_COLUMNS}\n");
    for (cell, label) in labels.iter().enumerate() {
        let rows: Vec<TrialRecord> = records.iter().filter(|r| r.cell == cell).cloned().collect();
        s.push_str(&summary_row(&summarize(cell, label, &rows)?));
        s.push('\n');
    }
    Ok(s)
}

/// Metric series for plotting, one file per (metric, swept axis).
pub fn plot_series(out: &SweepOutcome) -> Vec<(String, String)> {
    type Getter = fn(&MetricsReport) -> Option<f64>;
    let metrics: [(&str, Getter); 7] = [
        ("success_rate", |r| Some(r.success_rate)),
        ("confidence_mean", |r| r.confidence_mean),
        ("flipping_median", |r| Some(r.flipping_median)),
        ("perturbation_permille_median", |r| Some(r.perturbation_permille_median)),
        ("linf_median", |r| Some(r.linf_median)),
        ("accuracy_median", |r| Some(r.accuracy_median)),
        ("accuracy_drop_median", |r| Some(r.accuracy_drop_median)),
    ];
    let mut files = Vec::new();
    for axis in &out.axes {
        for (name, get) in metrics {
            let mut s = format!("{axis},{name}\n");
            for c in &out.cells {
                let x = c.cell.assignment.iter().find(|(k, _)| k == axis).map(|(_, v)| v.clone());
                if let (Some(x), Ok(r)) = (x, &c.report) {
                    let _ = writeln!(s, "{x},{}", fmt_opt(get(r)));
                }
            }
            files.push((format!("{name}_vs_{}.csv", axis.replace(['.', '/'], "_")), s));
        }
    }
    files
}

/// Writes `results.csv`, `summary.csv` and `plotdata/` under `dir`.
pub fn write_outputs(out: &SweepOutcome, dir: &Path) -> Result<()> {
    io::write_atomic(
        &dir.join("results.csv"),
        results_csv(out.cells.iter().flat_map(|c| &c.records)).as_bytes(),
    )?;
    io::write_atomic(&dir.join("summary.csv"), summary_csv(out).as_bytes())?;
    std::fs::create_dir_all(dir.join("plotdata"))?;
    for (name, body) in plot_series(out) {
        io::write_atomic(&dir.join("plotdata").join(name), body.as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(hits: usize, conf: f64, flips: usize) -> TrialRecord {
        TrialRecord {
            cell: 0,
            trial: 0,
            seed: 1,
            target_id: 3,
            true_label: 0,
            target_class: 1,
            baseline_label: 0,
            infected_label: if hits == 1 { 1 } else { 0 },
            infected_confidence: conf,
            hits,
            n_targets: 1,
            flips,
            compared: 100,
            correct: 80,
            baseline_correct: 82,
            changed: 1,
            total_params: 1000,
            linf: 0.01,
            frob: 0.02,
            violations: 0,
            rounds: 5,
        }
    }

    #[test]
    fn success_rate_cases() {
        assert_eq!(attack_success_rate(&[rec(1, 0.9, 0), rec(1, 0.8, 0)]).unwrap(), 1.0);
        assert_eq!(attack_success_rate(&[rec(0, 0.1, 0)]).unwrap(), 0.0);
        let mut t: Vec<TrialRecord> = (0..25).map(|_| rec(1, 0.9, 0)).collect();
        t.extend((0..8).map(|_| rec(0, 0.2, 0)));
        assert!((attack_success_rate(&t).unwrap() - 25.0 / 33.0).abs() < 1e-15);
        assert!((attack_success_rate(&t).unwrap() - 0.758).abs() < 1e-3);
        assert!(attack_success_rate(&[]).is_err());
        let r = summarize(0, "x", &t).unwrap();
        assert_eq!(r.success_rate + r.failure_rate, 1.0);
    }

    #[test]
    fn confidence_cases() {
        assert_eq!(misclassification_confidence(&[rec(1, 0.76, 0)]), Some((0.76, 0.0)));
        let (m, s) = misclassification_confidence(&[rec(1, 0.7, 0), rec(1, 0.8, 0), rec(0, 0.1, 0)]).unwrap();
        assert!((m - 0.75).abs() < 1e-12 && (s - 0.05).abs() < 1e-12);
        assert_eq!(misclassification_confidence(&[rec(0, 0.3, 0)]), None);
        let r = summarize(0, "x", &[rec(0, 0.3, 0)]).unwrap();
        assert!(summary_row(&r).contains(",NA,NA,"));
    }

    #[test]
    fn flipping_and_perturbation_rates() {
        use crate::nn::{Activation, Block, Dense, Stack};
        let m = EmbeddingMatrix::from_columns(1, 2, vec![1.0, -1.0]).unwrap();
        let mut d = Dense::zeros(1, 2, Activation::Identity);
        d.weights = vec![-1.0, 1.0];
        let f = HostClassifier::from_parts(crate::classifiers::HostKind::Lr, Stack::new(vec![Block::Dense(d)]).unwrap(), 1.0).unwrap();
        let xs = [SparseInputVector::one_hot(2, 0), SparseInputVector::one_hot(2, 1), SparseInputVector::one_hot(2, 0)];
        let refs: Vec<&SparseInputVector> = xs.iter().collect();
        assert_eq!(classification_flipping_rate(&f, &m, &m, &refs, &[0]).unwrap(), 0.0);
        let flipped = EmbeddingMatrix::from_columns(1, 2, vec![-1.0, 1.0]).unwrap();
        assert_eq!(classification_flipping_rate(&f, &m, &flipped, &refs, &[0]).unwrap(), 1.0);
        assert!(classification_flipping_rate(&f, &m, &flipped, &refs[..1], &[0]).is_err());

        assert_eq!(parameter_perturbation_rate(&m, &m).unwrap(), 0.0);
        let mut big = EmbeddingMatrix::from_columns(10, 100, vec![0.5; 1000]).unwrap();
        let orig = big.clone();
        big.values_mut()[17] = 0.6;
        assert_eq!(parameter_perturbation_rate(&orig, &big).unwrap(), 1.0);
        assert!(parameter_perturbation_rate(&m, &orig).is_err());
    }

    #[test]
    fn results_round_trip_reproduces_summary() {
        let recs: Vec<TrialRecord> = (0..7)
            .map(|i| {
                let mut r = rec(i % 2, 0.61 + i as f64 / 97.0, i);
                r.trial = i;
                r.linf = 1.0 / (3.0 + i as f64);
                r
            })
            .collect();
        let parsed = parse_results_csv(&results_csv(&recs)).unwrap();
        assert_eq!(parsed, recs);
        let a = summary_row(&summarize(0, "c", &recs).unwrap());
        let b = summary_row(&summarize(0, "c", &parsed).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn target_picking_excludes_labels_and_duplicates() {
        let labels = vec![0, 1, 2, 0, 1, 2];
        let mut rng = RngStream::new(3);
        for _ in 0..50 {
            let picks = pick_targets(&[0, 2, 3, 5], &labels, 3, 3, &mut rng).unwrap();
            let mut idx: Vec<usize> = picks.iter().map(|p| p.0).collect();
            idx.sort_unstable();
            idx.dedup();
            assert_eq!(idx.len(), 3);
            assert!(picks.iter().all(|&(i, y)| y != labels[i] && y < 3));
        }
        assert!(pick_targets(&[0], &labels, 3, 2, &mut rng).is_err());
    }
}
