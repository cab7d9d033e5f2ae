//! Experiment configuration as flat `key = value` text.
//!
//! `[section]` headers prefix the keys below them, so `[seq]` followed by
//! `vocab_size = 500` sets `seq.vocab_size`. Lines starting with `#` or `;`
//! are comments. A sweep plan is the same format with a `[sweep]` section
//! whose entries list comma separated values per axis.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack_embedding::EmbeddingAttackConfig;
use crate::attack_nn::NnAttackConfig;
use crate::classifiers::{HostHyper, HostKind};
use crate::dataset::{DenseTaskConfig, SequenceTaskConfig};
use crate::error::{Error, Result};
use crate::io::Precision;
use crate::nn::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pipeline {
    Embedding,
    Nn,
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pipeline::Embedding => "embedding",
            Pipeline::Nn => "nn",
        })
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(Pipeline::Embedding),
            "nn" => Ok(Pipeline::Nn),
            _ => Err(Error::Config(format!("unknown kind '{s}' (expected embedding or nn)"))),
        }
    }
}

/// How the developer integrates the shipped extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tuning {
    /// Only the host classifier is trained; the extractor is used as shipped.
    Partial,
    /// Extractor and classifier are tuned end to end after integration.
    Full,
}

impl fmt::Display for Tuning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tuning::Partial => "partial",
            Tuning::Full => "full",
        })
    }
}

impl FromStr for Tuning {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partial" => Ok(Tuning::Partial),
            "full" => Ok(Tuning::Full),
            _ => Err(Error::Config(format!("unknown tuning '{s}' (expected partial or full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub kind: Pipeline,
    pub seed: u64,
    pub trials: usize,
    /// Worker threads; 0 uses all available cores.
    pub workers: usize,
    pub out: String,
    pub precision: Precision,
    /// Targets per logic bomb.
    pub targets: usize,

    pub seq: SequenceTaskConfig,
    pub seq_train_fraction: f64,
    pub d: usize,
    pub gamma: f64,
    pub reference_size: usize,
    pub embedding_attack: EmbeddingAttackConfig,

    pub dense: DenseTaskConfig,
    pub dense_train_fraction: f64,
    pub reference_fraction: f64,
    pub extractor_hidden: Vec<usize>,
    pub pretrain: TrainConfig,
    pub nn_attack: NnAttackConfig,
    pub tuning: Tuning,
    pub full_tune: TrainConfig,

    pub host: HostKind,
    pub host_epochs: Option<usize>,
    pub host_lr: Option<f64>,
    pub host_weight_decay: Option<f64>,

    /// Noise-injection bound applied to the shipped extractor; 0 disables.
    pub rho: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: Pipeline::Embedding,
            seed: 2024,
            trials: 30,
            workers: 0,
            out: "runs/default".into(),
            precision: Precision::F64,
            targets: 1,
            seq: SequenceTaskConfig::default(),
            seq_train_fraction: 0.8,
            d: 100,
            gamma: 1.0,
            reference_size: 1000,
            embedding_attack: EmbeddingAttackConfig::default(),
            dense: DenseTaskConfig::default(),
            dense_train_fraction: 0.75,
            reference_fraction: 0.5,
            extractor_hidden: vec![1024, 32],
            pretrain: TrainConfig {
                epochs: 5,
                lr: 0.05,
                batch_size: 32,
                weight_decay: 0.1,
            },
            nn_attack: NnAttackConfig::default(),
            tuning: Tuning::Partial,
            full_tune: TrainConfig {
                epochs: 2,
                lr: 0.001,
                batch_size: 32,
                weight_decay: 0.0,
            },
            host: HostKind::Lr,
            host_epochs: None,
            host_lr: None,
            host_weight_decay: None,
            rho: 0.0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn list(xs: &[usize]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), |x| x.to_string())
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.trim() == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl ExperimentConfig {
    pub fn host_hyper(&self) -> HostHyper {
        let mut h = HostHyper::for_kind(self.host);
        if let Some(e) = self.host_epochs {
            h.epochs = e;
        }
        if let Some(lr) = self.host_lr {
            h.lr = lr;
        }
        if let Some(wd) = self.host_weight_decay {
            h.weight_decay = wd;
        }
        h
    }

    /// All keys with their current values, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.embedding_attack;
        let n = &self.nn_attack;
        vec![
            ("kind", self.kind.to_string()),
            ("seed", self.seed.to_string()),
            ("trials", self.trials.to_string()),
            ("workers", self.workers.to_string()),
            ("out", self.out.clone()),
            ("precision", self.precision.as_str().into()),
            ("targets", self.targets.to_string()),
            ("host", self.host.to_string()),
            ("host.epochs", opt(&self.host_epochs)),
            ("host.lr", opt(&self.host_lr)),
            ("host.weight_decay", opt(&self.host_weight_decay)),
            ("rho", format!("{}", self.rho)),
            ("seq.vocab_size", self.seq.vocab_size.to_string()),
            ("seq.n_samples", self.seq.n_samples.to_string()),
            ("seq.avg_length", self.seq.avg_length.to_string()),
            ("seq.signal_strength", format!("{}", self.seq.signal_strength)),
            ("seq.n_classes", self.seq.n_classes.to_string()),
            ("seq.train_fraction", format!("{}", self.seq_train_fraction)),
            ("d", self.d.to_string()),
            ("gamma", format!("{}", self.gamma)),
            ("reference_size", self.reference_size.to_string()),
            ("lambda", format!("{}", a.lambda)),
            ("delta", format!("{}", a.delta)),
            ("n", a.n.to_string()),
            ("solver.step", format!("{}", a.step)),
            ("solver.max_iterations", a.max_iterations.to_string()),
            ("solver.penalty_initial", format!("{}", a.penalty_initial)),
            ("solver.penalty_growth", format!("{}", a.penalty_growth)),
            ("solver.penalty_max", format!("{}", a.penalty_max)),
            ("solver.penalty_interval", a.penalty_interval.to_string()),
            ("solver.restrict_to_targets", a.restrict_to_targets.to_string()),
            ("dense.input_dim", self.dense.input_dim.to_string()),
            ("dense.n_samples", self.dense.n_samples.to_string()),
            ("dense.n_classes", self.dense.n_classes.to_string()),
            ("dense.margin", format!("{}", self.dense.margin)),
            ("dense.train_fraction", format!("{}", self.dense_train_fraction)),
            ("reference_fraction", format!("{}", self.reference_fraction)),
            ("extractor", list(&self.extractor_hidden)),
            ("pretrain.epochs", self.pretrain.epochs.to_string()),
            ("pretrain.lr", format!("{}", self.pretrain.lr)),
            ("pretrain.weight_decay", format!("{}", self.pretrain.weight_decay)),
            ("epsilon", format!("{}", n.epsilon)),
            ("alpha", format!("{}", n.alpha)),
            ("kappa", n.kappa.to_string()),
            ("max_rounds", n.max_rounds.to_string()),
            ("stop_margin", format!("{}", n.margin)),
            ("surrogate.epochs", n.surrogate.epochs.to_string()),
            ("surrogate.lr", format!("{}", n.surrogate.lr)),
            ("surrogate.weight_decay", format!("{}", n.surrogate.weight_decay)),
            ("tuning", self.tuning.to_string()),
            ("full_tune.epochs", self.full_tune.epochs.to_string()),
            ("full_tune.lr", format!("{}", self.full_tune.lr)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let a = &mut self.embedding_attack;
        let n = &mut self.nn_attack;
        match key.trim() {
            "kind" => self.kind = v.parse()?,
            "seed" => self.seed = parse(key, v)?,
            "trials" => self.trials = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "out" => self.out = v.to_string(),
            "precision" => self.precision = Precision::parse(v).map_err(|e| Error::Config(e.to_string()))?,
            "targets" => self.targets = parse(key, v)?,
            "host" => self.host = v.parse()?,
            "host.epochs" => self.host_epochs = parse_opt(key, v)?,
            "host.lr" => self.host_lr = parse_opt(key, v)?,
            "host.weight_decay" => self.host_weight_decay = parse_opt(key, v)?,
            "rho" => self.rho = parse(key, v)?,
            "seq.vocab_size" => self.seq.vocab_size = parse(key, v)?,
            "seq.n_samples" => self.seq.n_samples = parse(key, v)?,
            "seq.avg_length" => self.seq.avg_length = parse(key, v)?,
            "seq.signal_strength" => self.seq.signal_strength = parse(key, v)?,
            "seq.n_classes" => self.seq.n_classes = parse(key, v)?,
            "seq.train_fraction" => self.seq_train_fraction = parse(key, v)?,
            "d" => self.d = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "reference_size" => self.reference_size = parse(key, v)?,
            "lambda" => a.lambda = parse(key, v)?,
            "delta" => a.delta = parse(key, v)?,
            "n" => a.n = parse(key, v)?,
            "solver.step" => a.step = parse(key, v)?,
            "solver.max_iterations" => a.max_iterations = parse(key, v)?,
            "solver.penalty_initial" => a.penalty_initial = parse(key, v)?,
            "solver.penalty_growth" => a.penalty_growth = parse(key, v)?,
            "solver.penalty_max" => a.penalty_max = parse(key, v)?,
            "solver.penalty_interval" => a.penalty_interval = parse(key, v)?,
            "solver.restrict_to_targets" => a.restrict_to_targets = parse(key, v)?,
            "dense.input_dim" => self.dense.input_dim = parse(key, v)?,
            "dense.n_samples" => self.dense.n_samples = parse(key, v)?,
            "dense.n_classes" => self.dense.n_classes = parse(key, v)?,
            "dense.margin" => self.dense.margin = parse(key, v)?,
            "dense.train_fraction" => self.dense_train_fraction = parse(key, v)?,
            "reference_fraction" => self.reference_fraction = parse(key, v)?,
            "extractor" => self.extractor_hidden = parse_list(key, v)?,
            "pretrain.epochs" => self.pretrain.epochs = parse(key, v)?,
            "pretrain.lr" => self.pretrain.lr = parse(key, v)?,
            "pretrain.weight_decay" => self.pretrain.weight_decay = parse(key, v)?,
            "epsilon" => n.epsilon = parse(key, v)?,
            "alpha" => n.alpha = parse(key, v)?,
            "kappa" => n.kappa = parse(key, v)?,
            "max_rounds" => n.max_rounds = parse(key, v)?,
            "stop_margin" => n.margin = parse(key, v)?,
            "surrogate.epochs" => n.surrogate.epochs = parse(key, v)?,
            "surrogate.lr" => n.surrogate.lr = parse(key, v)?,
            "surrogate.weight_decay" => n.surrogate.weight_decay = parse(key, v)?,
            "tuning" => self.tuning = v.parse()?,
            "full_tune.epochs" => self.full_tune.epochs = parse(key, v)?,
            "full_tune.lr" => self.full_tune.lr = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.targets == 0 {
            return bad("targets must be at least 1".into());
        }
        if !(self.rho >= 0.0) {
            return bad(format!("rho must be >= 0, got {}", self.rho));
        }
        for (k, f) in [
            ("seq.train_fraction", self.seq_train_fraction),
            ("dense.train_fraction", self.dense_train_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("{k} must be in (0, 1), got {f}"));
            }
        }
        if !(self.reference_fraction > 0.0 && self.reference_fraction <= 1.0) {
            return bad(format!("reference_fraction must be in (0, 1], got {}", self.reference_fraction));
        }
        self.embedding_attack.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.nn_attack.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_ini(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies every `key = value` of an INI text on top of `self`.
    pub fn apply_ini(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_ini(text)?.settings {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_ini(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.apply_ini(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_ini(&text)
    }

    /// The settings that determine the trained system and reference set;
    /// cells sharing this key share one experiment context.
    pub fn context_key(&self) -> String {
        const SHARED: &[&str] = &["kind", "seed", "host", "host.epochs", "host.lr", "host.weight_decay"];
        let per_kind: &[&str] = match self.kind {
            Pipeline::Embedding => &[
                "seq.vocab_size",
                "seq.n_samples",
                "seq.avg_length",
                "seq.signal_strength",
                "seq.n_classes",
                "seq.train_fraction",
                "d",
                "gamma",
                "reference_size",
            ],
            Pipeline::Nn => &[
                "dense.input_dim",
                "dense.n_samples",
                "dense.n_classes",
                "dense.margin",
                "dense.train_fraction",
                "reference_fraction",
                "extractor",
                "pretrain.epochs",
                "pretrain.lr",
                "pretrain.weight_decay",
            ],
        };
        self.entries()
            .into_iter()
            .filter(|(k, _)| SHARED.contains(k) || per_kind.contains(k))
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";")
    }
}

/// Parsed INI text: ordered `(key, value)` settings plus sweep axes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IniDocument {
    pub settings: Vec<(String, String)>,
    pub sweep: Vec<(String, Vec<String>)>,
}

pub fn parse_ini(text: &str) -> Result<IniDocument> {
    let mut doc = IniDocument::default();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got '{line}'", lineno + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if section == "sweep" {
            let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            if values.is_empty() {
                return Err(Error::Config(format!("line {}: sweep axis '{k}' has no values", lineno + 1)));
            }
            doc.sweep.push((k.to_string(), values));
        } else if section.is_empty() {
            doc.settings.push((k.to_string(), v.to_string()));
        } else {
            doc.settings.push((format!("{section}.{k}"), v.to_string()));
        }
    }
    Ok(doc)
}

/// One cell of a sweep: its axis assignment and the resolved config (or the
/// reason it is invalid).
#[derive(Debug, Clone)]
pub struct Cell {
    pub index: usize,
    pub assignment: Vec<(String, String)>,
    pub config: std::result::Result<ExperimentConfig, String>,
}

impl Cell {
    pub fn label(&self) -> String {
        self.assignment.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub base: ExperimentConfig,
    pub axes: Vec<(String, Vec<String>)>,
}

impl SweepPlan {
    pub fn single(base: ExperimentConfig) -> Self {
        SweepPlan { base, axes: Vec::new() }
    }

    /// Plan text: settings apply on top of `base`, `[sweep]` lists the axes.
    pub fn parse(text: &str, base: ExperimentConfig) -> Result<Self> {
        let doc = parse_ini(text)?;
        let mut base = base;
        for (k, v) in &doc.settings {
            base.set(k, v)?;
        }
        Ok(SweepPlan { base, axes: doc.sweep })
    }

    /// Cartesian product of the axes; the first axis varies slowest.
    pub fn cells(&self) -> Vec<Cell> {
        let mut assignments: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (axis, values) in &self.axes {
            assignments = assignments
                .into_iter()
                .flat_map(|a| {
                    values.iter().map(move |v| {
                        let mut next = a.clone();
                        next.push((axis.clone(), v.clone()));
                        next
                    })
                })
                .collect();
        }
        assignments
            .into_iter()
            .enumerate()
            .map(|(index, assignment)| {
                let mut c = self.base.clone();
                let config = assignment
                    .iter()
                    .try_for_each(|(k, v)| c.set(k, v))
                    .and_then(|_| c.validate())
                    .map(|_| c)
                    .map_err(|e| e.to_string());
                Cell {
                    index,
                    assignment,
                    config,
                }
            })
            .collect()
    }
}
