//! Command-line front end.
//!
//! Commands compose through a run directory (`--out`, default from the
//! config). Each command loads the artifacts it needs from there and derives
//! any missing ones from the master seed, so `gen-data`, `train-embedding`,
//! `train-baseline`, `craft` and `evaluate` can run in sequence or alone.
//!
//! Settings resolve as: built-in defaults, then `--config` (or the run
//! directory's `config.ini`), then `BOMBWORKS_SEED`, then `--set`, then
//! dedicated flags.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::attack_embedding::{self, LogicBomb, Target};
use crate::attack_nn;
use crate::classifiers::{self, HostClassifier};
use crate::config::{ExperimentConfig, Pipeline, SweepPlan};
use crate::dataset::{self, DenseDataset, SequenceDataset};
use crate::defense;
use crate::embedding::{self, EmbeddingMatrix, SparseInputVector, VectorizerConfig};
use crate::error::{Error, Result};
use crate::eval::{self, Context, EmbeddingArtifacts, NnArtifacts};
use crate::io::{self, Precision};
use crate::nn::{self, DnnExtractor};
use crate::numeric::RngStream;

/// Prints to stdout, ignoring a closed pipe.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

pub const SEED_ENV: &str = "BOMBWORKS_SEED";

const DATA_FILE: &str = "data.csv";
const EMBEDDING_FILE: &str = "M.emb1";
const EXTRACTOR_FILE: &str = "g.dnn1";
const HOST_FILE: &str = "host.dnn1";
const KEY_FILE: &str = "context.key";
const CONFIG_FILE: &str = "config.ini";
const DEFEND_STREAM: u64 = 0xDEF;

#[derive(Debug, Parser)]
#[command(name = "bombworks", version, about = "Craft, evaluate and defend against logic bombs in feature extractors")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// INI file with experiment settings.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// embedding or nn
    #[arg(long, global = true)]
    pub kind: Option<Pipeline>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// -v for progress, -vv for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic task into data.csv.
    GenData,
    /// Train the shipped extractor (M.emb1, or g.dnn1 for nn).
    TrainEmbedding,
    /// Train the host classifier and record its clean accuracy.
    TrainBaseline,
    /// Craft one logic bomb and write its bundle under craft/.
    Craft(CraftArgs),
    /// Run the trial harness and write results.csv, summary.csv and plotdata/.
    Evaluate,
    /// Run every cell of a sweep plan.
    Sweep {
        #[arg(long, value_name = "FILE")]
        plan: PathBuf,
    },
    /// Add uniform noise in [-rho, rho] to every parameter of a model.
    Defend {
        #[arg(long, value_name = "RHO")]
        noise: f64,
        /// Defaults to the crafted model of the run directory.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score validation probes (and crafted targets) for anomalies.
    Vet {
        /// Defaults to the crafted model of the run directory.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        probes: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 3.0)]
        threshold: f64,
    },
    /// Compare the parameters of two models.
    Audit {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        tolerance: f64,
        /// Also write the per-layer histogram CSV here.
        #[arg(long)]
        histogram: Option<PathBuf>,
    },
    /// SHA-256 of a model file.
    Hash { model: PathBuf },
}

#[derive(Debug, Args)]
pub struct CraftArgs {
    /// CSV of `id,class` rows naming samples of data.csv and their bomb
    /// classes. Without it the first trial's targets are used.
    #[arg(long, value_name = "FILE")]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub kappa: Option<usize>,
}

/// Exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Resolves the configuration for `cli` and returns it with the run directory.
pub fn resolve(g: &GlobalOpts, extra: &[(&str, String)]) -> Result<(ExperimentConfig, PathBuf)> {
    let sets = g
        .set
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let out = g
        .out
        .clone()
        .or_else(|| sets.iter().rev().find(|(k, _)| k == "out").map(|(_, v)| PathBuf::from(v)))
        .unwrap_or_else(|| PathBuf::from(&cfg.out));
    if g.config.is_none() && out.join(CONFIG_FILE).is_file() {
        cfg = ExperimentConfig::load(&out.join(CONFIG_FILE))?;
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.set("seed", &v).map_err(|_| Error::Config(format!("{SEED_ENV}='{v}' is not a seed")))?;
    }
    for (k, v) in &sets {
        cfg.set(k, v)?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(k) = g.kind {
        cfg.kind = k;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    if let Some(t) = g.trials {
        cfg.trials = t;
    }
    for (k, v) in extra {
        cfg.set(k, v)?;
    }
    cfg.out = out.to_string_lossy().into_owned();
    cfg.validate()?;
    Ok((cfg, out))
}

pub fn run(cli: Cli) -> Result<()> {
    let extra: Vec<(&str, String)> = match &cli.command {
        Command::Craft(a) => [
            ("lambda", a.lambda.map(|v| v.to_string())),
            ("delta", a.delta.map(|v| v.to_string())),
            ("n", a.n.map(|v| v.to_string())),
            ("epsilon", a.epsilon.map(|v| v.to_string())),
            ("alpha", a.alpha.map(|v| v.to_string())),
            ("kappa", a.kappa.map(|v| v.to_string())),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect(),
        _ => Vec::new(),
    };
    match cli.command {
        Command::Audit {
            a,
            b,
            tolerance,
            histogram,
        } => return audit(&a, &b, tolerance, histogram.as_deref()),
        Command::Hash { model } => return hash(&model),
        _ => {}
    }
    let (cfg, dir) = resolve(&cli.global, &extra)?;
    match cli.command {
        Command::GenData => gen_data(&cfg, &dir),
        Command::TrainEmbedding => train_extractor(&cfg, &dir),
        Command::TrainBaseline => train_baseline(&cfg, &dir),
        Command::Craft(a) => craft(&cfg, &dir, a.targets.as_deref()),
        Command::Evaluate => evaluate(&cfg, &dir),
        Command::Sweep { plan } => sweep(&cfg, &dir, &plan),
        Command::Defend { noise, model, output } => defend(&cfg, &dir, noise, model, output),
        Command::Vet {
            model,
            probes,
            k,
            threshold,
        } => vet(&cfg, &dir, model, probes, k, threshold),
        Command::Audit { .. } | Command::Hash { .. } => unreachable!(),
    }
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    io::write_atomic(&dir.join(CONFIG_FILE), cfg.to_ini().as_bytes())
}

/// Refuses to mix artifacts built under different system settings.
fn claim_dir(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let key = cfg.context_key();
    let path = dir.join(KEY_FILE);
    if path.is_file() {
        let stored = std::fs::read_to_string(&path)?;
        if stored.trim() != key {
            return Err(Error::Config(format!(
                "{} holds artifacts built with different settings; use a fresh --out",
                dir.display()
            )));
        }
    }
    io::write_atomic(&path, format!("{key}\n").as_bytes())
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::format(e.to_string()))
}

fn load_sequence_data(cfg: &ExperimentConfig, dir: &Path) -> Result<SequenceDataset> {
    let p = dir.join(DATA_FILE);
    if p.is_file() {
        return dataset::parse_sequence_csv(&std::fs::read_to_string(&p)?);
    }
    let d = eval::sequence_data(cfg)?;
    dataset::write_sequence_csv(&d, &p)?;
    Ok(d)
}

fn load_dense_data(cfg: &ExperimentConfig, dir: &Path) -> Result<DenseDataset> {
    let p = dir.join(DATA_FILE);
    if p.is_file() {
        return dataset::parse_dense_csv(&std::fs::read_to_string(&p)?);
    }
    let d = eval::dense_data(cfg)?;
    dataset::write_dense_csv(&d, &p)?;
    Ok(d)
}

fn load_embedding(cfg: &ExperimentConfig, dir: &Path, data: &SequenceDataset) -> Result<EmbeddingMatrix> {
    let p = dir.join(EMBEDDING_FILE);
    if p.is_file() {
        return embedding::load_emb1(&p);
    }
    let (train, _) = eval::sequence_split(cfg, data)?;
    let m = eval::train_embedding_stage(cfg, &train)?;
    embedding::save_emb1(&m, &p, cfg.precision)?;
    Ok(m)
}

fn load_extractor(cfg: &ExperimentConfig, dir: &Path, data: &DenseDataset) -> Result<DnnExtractor> {
    let p = dir.join(EXTRACTOR_FILE);
    if p.is_file() {
        return nn::load_dnn1(&p);
    }
    let (train, _) = eval::dense_split(cfg, data)?;
    let g = eval::pretrain_stage(cfg, &train)?;
    nn::save_dnn1(&g, &p, cfg.precision)?;
    Ok(g)
}

fn load_host(dir: &Path) -> Result<Option<HostClassifier>> {
    let p = dir.join(HOST_FILE);
    if p.is_file() {
        classifiers::load_host(&p).map(Some)
    } else {
        Ok(None)
    }
}

/// Loads or builds every stage of the clean system, saving what was missing.
fn system(cfg: &ExperimentConfig, dir: &Path) -> Result<Context> {
    claim_dir(cfg, dir)?;
    write_config(cfg, dir)?;
    let host = load_host(dir)?;
    let saved = host.is_some();
    let ctx = match cfg.kind {
        Pipeline::Embedding => {
            let data = load_sequence_data(cfg, dir)?;
            let m = load_embedding(cfg, dir, &data)?;
            Context::Embedding(eval::embedding_context_with(
                cfg,
                EmbeddingArtifacts {
                    data: Some(data),
                    extractor: Some(m),
                    host,
                },
            )?)
        }
        Pipeline::Nn => {
            let data = load_dense_data(cfg, dir)?;
            let g = load_extractor(cfg, dir, &data)?;
            Context::Nn(eval::nn_context_with(
                cfg,
                NnArtifacts {
                    data: Some(data),
                    extractor: Some(g),
                    host,
                },
            )?)
        }
    };
    if !saved {
        let host = match &ctx {
            Context::Embedding(c) => &c.host,
            Context::Nn(c) => &c.host,
        };
        classifiers::save_host(host, &dir.join(HOST_FILE), cfg.precision)?;
    }
    Ok(ctx)
}

fn gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    claim_dir(cfg, dir)?;
    write_config(cfg, dir)?;
    let (n, k) = match cfg.kind {
        Pipeline::Embedding => {
            let d = eval::sequence_data(cfg)?;
            dataset::write_sequence_csv(&d, &dir.join(DATA_FILE))?;
            (d.len(), d.n_classes)
        }
        Pipeline::Nn => {
            let d = eval::dense_data(cfg)?;
            dataset::write_dense_csv(&d, &dir.join(DATA_FILE))?;
            (d.len(), d.n_classes)
        }
    };
    say!("wrote {n} samples in {k} classes to {}", dir.join(DATA_FILE).display());
    Ok(())
}

fn train_extractor(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    claim_dir(cfg, dir)?;
    write_config(cfg, dir)?;
    let path = match cfg.kind {
        Pipeline::Embedding => {
            let data = load_sequence_data(cfg, dir)?;
            let (train, _) = eval::sequence_split(cfg, &data)?;
            let m = eval::train_embedding_stage(cfg, &train)?;
            let p = dir.join(EMBEDDING_FILE);
            embedding::save_emb1(&m, &p, cfg.precision)?;
            p
        }
        Pipeline::Nn => {
            let data = load_dense_data(cfg, dir)?;
            let (train, _) = eval::dense_split(cfg, &data)?;
            let g = eval::pretrain_stage(cfg, &train)?;
            let p = dir.join(EXTRACTOR_FILE);
            nn::save_dnn1(&g, &p, cfg.precision)?;
            p
        }
    };
    say!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct BaselineReport {
    kind: String,
    host: String,
    validation_size: usize,
    eligible_targets: usize,
    validation_accuracy: f64,
}

fn train_baseline(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let host = dir.join(HOST_FILE);
    if host.is_file() {
        std::fs::remove_file(&host)?;
    }
    let ctx = system(cfg, dir)?;
    let (n, eligible) = match &ctx {
        Context::Embedding(c) => (c.validation.len(), c.eligible.len()),
        Context::Nn(c) => (c.validation.len(), c.eligible.len()),
    };
    let report = BaselineReport {
        kind: cfg.kind.to_string(),
        host: cfg.host.to_string(),
        validation_size: n,
        eligible_targets: eligible,
        validation_accuracy: ctx.baseline_accuracy(),
    };
    io::write_atomic(&dir.join("baseline.json"), json(&report)?.as_bytes())?;
    say!(
        "{} host on {} features: validation accuracy {:.4}",
        cfg.host,
        cfg.kind,
        ctx.baseline_accuracy()
    );
    Ok(())
}

/// Parses `id,class` rows; a non-numeric first row is taken as a header.
pub fn parse_targets(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [a, b] => a.parse::<usize>().ok().zip(b.parse::<usize>().ok()),
            _ => None,
        };
        match parsed {
            Some(p) => out.push(p),
            None if i == 0 => {}
            None => return Err(Error::input(format!("targets line {}: expected 'id,class', got '{line}'", i + 1))),
        }
    }
    if out.is_empty() {
        return Err(Error::input("the targets file names no targets"));
    }
    Ok(out)
}

#[derive(Serialize)]
struct TargetOutcome {
    id: usize,
    true_label: usize,
    class: usize,
    baseline_label: usize,
    infected_label: usize,
    confidence: f64,
}

#[derive(Serialize)]
struct CraftReport {
    kind: String,
    targets: Vec<TargetOutcome>,
    success: bool,
    flipping_rate: f64,
    perturbation_permille: f64,
    linf: f64,
}

/// Bomb targets as `(data index, class)`: from `path`, else the first trial's.
fn bomb_targets<S: dataset::Sample>(
    cfg: &ExperimentConfig,
    path: Option<&Path>,
    validation: &dataset::LabeledDataset<S>,
    eligible: &[usize],
    n_classes: usize,
) -> Result<Vec<(usize, usize)>> {
    let listed = match path {
        Some(p) => parse_targets(&std::fs::read_to_string(p)?)?,
        None => {
            let mut rng = RngStream::new(eval::trial_seed(cfg.seed, 0));
            let labels = validation.labels();
            eval::pick_targets(eligible, &labels, n_classes, cfg.targets, &mut rng)?
                .into_iter()
                .map(|(i, y)| (validation.samples[i].id(), y))
                .collect()
        }
    };
    for &(_, class) in &listed {
        if class >= n_classes {
            return Err(Error::MissingClass(class));
        }
    }
    Ok(listed)
}

fn sample_index<S: dataset::Sample>(d: &dataset::LabeledDataset<S>, id: usize) -> Result<usize> {
    d.samples
        .iter()
        .position(|s| s.id() == id)
        .ok_or_else(|| Error::input(format!("no sample with id {id} in {DATA_FILE}")))
}

fn targets_csv(targets: &[(usize, usize)]) -> String {
    let mut s = String::from("id,class\n");
    for (id, c) in targets {
        s.push_str(&format!("{id},{c}\n"));
    }
    s
}

fn craft(cfg: &ExperimentConfig, dir: &Path, targets: Option<&Path>) -> Result<()> {
    let ctx = system(cfg, dir)?;
    let bundle = dir.join("craft");
    let report = match &ctx {
        Context::Embedding(c) => {
            let data = load_sequence_data(cfg, dir)?;
            let (_, val) = eval::sequence_split(cfg, &data)?;
            let listed = bomb_targets(cfg, targets, &val, &c.eligible, c.n_classes)?;
            let vcfg = VectorizerConfig::new(cfg.gamma)?;
            let inputs = listed
                .iter()
                .map(|&(id, _)| embedding::vectorize_tokens(&data.samples[sample_index(&data, id)?].tokens, data.input_size, &vcfg))
                .collect::<Result<Vec<_>>>()?;
            let bomb = LogicBomb::new(
                inputs
                    .iter()
                    .zip(&listed)
                    .map(|(x, &(_, class))| Target { input: x.clone(), class })
                    .collect(),
            )?;
            let res = attack_embedding::craft_embedding_bomb(&c.m, &bomb, &c.reference, &cfg.embedding_attack)?;
            attack_embedding::write_bundle(&res, &bundle, cfg.precision)?;
            embedding::save_emb1(&res.m_hat, &bundle.join("M_hat.emb1"), cfg.precision)?;
            let mut outcomes = Vec::new();
            for (x, &(id, class)) in inputs.iter().zip(&listed) {
                let s = &data.samples[sample_index(&data, id)?];
                let (baseline_label, _) = c.host.predict(&embedding::extract(&c.m, x)?)?;
                let v = embedding::extract(&res.m_hat, x)?;
                let (infected_label, _) = c.host.predict(&v)?;
                outcomes.push(TargetOutcome {
                    id,
                    true_label: s.label,
                    class,
                    baseline_label,
                    infected_label,
                    confidence: c.host.predict_proba(&v)?[class],
                });
            }
            let exclude = exclude_ids(&c.validation_ids, &listed);
            let inputs: Vec<&SparseInputVector> = c.validation.iter().collect();
            CraftReport {
                kind: cfg.kind.to_string(),
                success: outcomes.iter().all(|o| o.infected_label == o.class),
                targets: outcomes,
                flipping_rate: eval::classification_flipping_rate(&c.host, &c.m, &res.m_hat, &inputs, &exclude)?,
                perturbation_permille: eval::parameter_perturbation_rate(&c.m, &res.m_hat)?,
                linf: res.feasibility.linf,
            }
        }
        Context::Nn(c) => {
            let data = load_dense_data(cfg, dir)?;
            let listed = bomb_targets(cfg, targets, &c.validation, &c.eligible, c.validation.n_classes)?;
            let samples = listed
                .iter()
                .map(|&(id, _)| sample_index(&data, id).map(|i| &data.samples[i]))
                .collect::<Result<Vec<_>>>()?;
            let bomb = LogicBomb::new(
                samples
                    .iter()
                    .zip(&listed)
                    .map(|(s, &(_, class))| Target {
                        input: s.values.clone(),
                        class,
                    })
                    .collect(),
            )?;
            let mut rng = RngStream::new(eval::trial_seed(cfg.seed, 0)).split(eval::SURROGATE_STREAM);
            let res = attack_nn::craft_nn_bomb(&c.g, &bomb, &c.reference, &cfg.nn_attack, &mut rng)?;
            attack_nn::write_bundle(&res, &bundle, cfg.precision)?;
            let mut outcomes = Vec::new();
            for (s, &(id, class)) in samples.iter().zip(&listed) {
                let (baseline_label, _) = c.host.predict(&c.g.features(&s.values)?)?;
                let v = res.g_hat.features(&s.values)?;
                let (infected_label, _) = c.host.predict(&v)?;
                outcomes.push(TargetOutcome {
                    id,
                    true_label: s.label,
                    class,
                    baseline_label,
                    infected_label,
                    confidence: c.host.predict_proba(&v)?[class],
                });
            }
            let ids: Vec<usize> = c.validation.samples.iter().map(|s| s.id).collect();
            let exclude = exclude_ids(&ids, &listed);
            let inputs: Vec<&[f64]> = c.validation.samples.iter().map(|s| &*s.values).collect();
            CraftReport {
                kind: cfg.kind.to_string(),
                success: outcomes.iter().all(|o| o.infected_label == o.class),
                targets: outcomes,
                flipping_rate: eval::classification_flipping_rate(&c.host, &c.g, &res.g_hat, &inputs, &exclude)?,
                perturbation_permille: res.perturbation_rate_permille(),
                linf: res.linf(),
            }
        }
    };
    io::write_atomic(&bundle.join("targets.csv"), targets_csv(&listed_of(&report)).as_bytes())?;
    io::write_atomic(&bundle.join("report.json"), json(&report)?.as_bytes())?;
    write_config(cfg, &bundle)?;
    for t in &report.targets {
        say!(
            "target {} (label {}): baseline {} -> infected {} (wanted {}, p = {:.3})",
            t.id, t.true_label, t.baseline_label, t.infected_label, t.class, t.confidence
        );
    }
    say!(
        "success {}  flipping {:.4}  perturbation {:.4} permille  linf {:.3e}  -> {}",
        report.success,
        report.flipping_rate,
        report.perturbation_permille,
        report.linf,
        bundle.display()
    );
    Ok(())
}

fn listed_of(r: &CraftReport) -> Vec<(usize, usize)> {
    r.targets.iter().map(|t| (t.id, t.class)).collect()
}

fn exclude_ids(ids: &[usize], listed: &[(usize, usize)]) -> Vec<usize> {
    ids.iter()
        .enumerate()
        .filter(|(_, id)| listed.iter().any(|t| t.0 == **id))
        .map(|(i, _)| i)
        .collect()
}

fn report_outcome(out: &eval::SweepOutcome, dir: &Path) -> Result<()> {
    eval::write_outputs(out, dir)?;
    for c in &out.cells {
        match &c.report {
            Ok(r) => say!(
                "cell {} [{}] success {:.3}  flipping median {:.4}  perturbation median {:.4} permille",
                c.cell.index,
                c.cell.label(),
                r.success_rate,
                r.flipping_median,
                r.perturbation_permille_median
            ),
            Err(e) => say!("cell {} [{}] failed: {e}", c.cell.index, c.cell.label()),
        }
    }
    say!("wrote {}", dir.join("summary.csv").display());
    if out.cells.iter().all(|c| c.report.is_err()) {
        return Err(Error::input("every cell failed"));
    }
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let slot = Mutex::new(Some(system(cfg, dir)?));
    let out = eval::run_sweep_with(&SweepPlan::single(cfg.clone()), cfg.workers, |_| {
        slot.lock()
            .expect("context lock")
            .take()
            .ok_or_else(|| Error::input("context requested twice"))
    })?;
    report_outcome(&out, dir)
}

fn sweep(cfg: &ExperimentConfig, dir: &Path, plan: &Path) -> Result<()> {
    let text = std::fs::read_to_string(plan).map_err(|e| Error::Config(format!("cannot read {}: {e}", plan.display())))?;
    let plan = SweepPlan::parse(&text, cfg.clone())?;
    if plan.axes.is_empty() {
        log::warn!("plan has no [sweep] section; running a single cell");
    }
    write_config(&plan.base, dir)?;
    io::write_atomic(&dir.join("plan.ini"), text.as_bytes())?;
    let out = eval::run_sweep(&plan, plan.base.workers)?;
    report_outcome(&out, dir)
}

/// A model file of either container kind.
pub enum Model {
    Embedding(EmbeddingMatrix, Precision),
    Extractor(DnnExtractor, Precision),
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = read(path)?;
    if bytes.starts_with(b"EMB1") {
        let (m, p) = embedding::decode_emb1(&bytes)?;
        Ok(Model::Embedding(m, p))
    } else if bytes.starts_with(b"DNN1") {
        let (g, p) = nn::decode_dnn1(&bytes)?;
        Ok(Model::Extractor(g, p))
    } else {
        Err(Error::format(format!("{} is neither an EMB1 nor a DNN1 file", path.display())))
    }
}

fn crafted_model(cfg: &ExperimentConfig, dir: &Path) -> PathBuf {
    dir.join("craft").join(match cfg.kind {
        Pipeline::Embedding => "M_hat.emb1",
        Pipeline::Nn => "g_hat.dnn1",
    })
}

fn defend(cfg: &ExperimentConfig, dir: &Path, rho: f64, model: Option<PathBuf>, output: Option<PathBuf>) -> Result<()> {
    let src = model.unwrap_or_else(|| crafted_model(cfg, dir));
    let dst = output.unwrap_or_else(|| dir.join("defend").join(src.file_name().unwrap_or_default()));
    let mut rng = RngStream::new(RngStream::derive_seed(cfg.seed, DEFEND_STREAM));
    let audit = match load_model(&src)? {
        Model::Embedding(m, p) => {
            let noisy = defense::noise_inject(&m, rho, &mut rng)?;
            embedding::save_emb1(&noisy, &dst, p)?;
            defense::diff_audit(&m, &noisy, 0.0)?
        }
        Model::Extractor(g, p) => {
            let noisy = defense::noise_inject(&g, rho, &mut rng)?;
            nn::save_dnn1(&noisy, &dst, p)?;
            defense::diff_audit(&g, &noisy, 0.0)?
        }
    };
    say!(
        "noise rho = {rho}: {} of {} parameters changed, linf {:.3e} -> {}",
        audit.changed,
        audit.total,
        audit.linf,
        dst.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct VetOutput<'a> {
    model: String,
    probe_ids: Vec<usize>,
    target_ids: Vec<usize>,
    target_ranks: Vec<usize>,
    report: &'a defense::VetReport,
}

fn vet(cfg: &ExperimentConfig, dir: &Path, model: Option<PathBuf>, probes: usize, k: usize, threshold: f64) -> Result<()> {
    let path = model.unwrap_or_else(|| crafted_model(cfg, dir));
    let loaded = load_model(&path)?;
    let targets_file = dir.join("craft").join("targets.csv");
    let targets: Vec<usize> = if targets_file.is_file() {
        parse_targets(&std::fs::read_to_string(&targets_file)?)?.into_iter().map(|t| t.0).collect()
    } else {
        Vec::new()
    };
    let (report, ids) = match (&loaded, cfg.kind) {
        (Model::Embedding(m, _), Pipeline::Embedding) => {
            let data = load_sequence_data(cfg, dir)?;
            let (_, val) = eval::sequence_split(cfg, &data)?;
            let ids = probe_ids(&val, probes, &targets);
            let vcfg = VectorizerConfig::new(cfg.gamma)?;
            let xs = ids
                .iter()
                .map(|&id| embedding::vectorize_tokens(&data.samples[sample_index(&data, id)?].tokens, data.input_size, &vcfg))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&SparseInputVector> = xs.iter().collect();
            (defense::vet_anomaly(m, &refs, k, threshold)?, ids)
        }
        (Model::Extractor(g, _), Pipeline::Nn) => {
            let data = load_dense_data(cfg, dir)?;
            let (_, val) = eval::dense_split(cfg, &data)?;
            let ids = probe_ids(&val, probes, &targets);
            let xs = ids
                .iter()
                .map(|&id| sample_index(&data, id).map(|i| &*data.samples[i].values))
                .collect::<Result<Vec<_>>>()?;
            (defense::vet_anomaly(g, &xs, k, threshold)?, ids)
        }
        _ => {
            return Err(Error::Config(format!(
                "{} does not match kind = {}",
                path.display(),
                cfg.kind
            )))
        }
    };
    let ranks: Vec<usize> = targets
        .iter()
        .filter_map(|t| ids.iter().position(|i| i == t))
        .map(|i| report.rank(i))
        .collect();
    let out = VetOutput {
        model: path.display().to_string(),
        target_ids: targets.clone(),
        target_ranks: ranks.clone(),
        probe_ids: ids,
        report: &report,
    };
    let dst = dir.join("vet").join("vet.json");
    io::write_atomic(&dst, json(&out)?.as_bytes())?;
    say!(
        "{} of {} probes flagged above {threshold}; target ranks {:?} -> {}",
        report.flagged.len(),
        report.scores.len(),
        ranks,
        dst.display()
    );
    Ok(())
}

/// The first `n` validation ids plus any target ids not already among them.
fn probe_ids<S: dataset::Sample>(val: &dataset::LabeledDataset<S>, n: usize, targets: &[usize]) -> Vec<usize> {
    let mut ids: Vec<usize> = val.samples.iter().take(n).map(|s| s.id()).collect();
    for t in targets {
        if !ids.contains(t) {
            ids.push(*t);
        }
    }
    ids
}

fn audit(a: &Path, b: &Path, tolerance: f64, histogram: Option<&Path>) -> Result<()> {
    let report = match (load_model(a)?, load_model(b)?) {
        (Model::Embedding(x, _), Model::Embedding(y, _)) => defense::diff_audit(&x, &y, tolerance)?,
        (Model::Extractor(x, _), Model::Extractor(y, _)) => defense::diff_audit(&x, &y, tolerance)?,
        _ => return Err(Error::input("cannot audit an EMB1 model against a DNN1 model")),
    };
    if let Some(h) = histogram {
        io::write_atomic(h, report.histogram_csv().as_bytes())?;
    }
    say!("{}", json(&report)?);
    Ok(())
}

fn hash(path: &Path) -> Result<()> {
    let bytes = read(path)?;
    load_model(path)?;
    say!("{}  {}", defense::content_hash(&bytes), path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(args: &[&str]) -> GlobalOpts {
        let mut full = vec!["bombworks"];
        full.extend_from_slice(args);
        full.push("gen-data");
        Cli::try_parse_from(full).unwrap().global
    }

    #[test]
    fn flags_override_sets_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let ini = dir.path().join("c.ini");
        std::fs::write(&ini, "seed = 5\nlambda = 0.1\ntrials = 3\n").unwrap();
        let out = dir.path().join("run");
        let c = ini.to_str().unwrap();
        let o = out.to_str().unwrap();
        let (cfg, _) = resolve(&opts(&["--config", c, "--out", o]), &[]).unwrap();
        assert_eq!((cfg.seed, cfg.trials), (5, 3));
        let (cfg, _) = resolve(&opts(&["--config", c, "--out", o, "--set", "seed=6", "--seed", "7"]), &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        let (cfg, _) = resolve(&opts(&["--config", c, "--out", o, "--set", "seed=6"]), &[("lambda", "0.3".into())]).unwrap();
        assert_eq!((cfg.seed, cfg.embedding_attack.lambda), (6, 0.3));
        assert!(matches!(resolve(&opts(&["--set", "nonsense=1"]), &[]), Err(Error::Config(_))));
        assert!(matches!(resolve(&opts(&["--set", "novalue"]), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn targets_file_parsing() {
        assert_eq!(parse_targets("id,class\n4,1\n\n9, 0\n").unwrap(), vec![(4, 1), (9, 0)]);
        assert_eq!(parse_targets("3,2").unwrap(), vec![(3, 2)]);
        assert!(parse_targets("id,class\n").is_err());
        assert!(parse_targets("1,2\nx,y\n").is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::input("x")), 1);
    }
}
