//! Synthetic classification tasks, stratified splitting, reference subsets and
//! class centroids.
//!
//! Two task families exist. Sequence tasks are bags of vocabulary indices
//! (consumed by the word-embedding extractor), dense tasks are fixed-size real
//! vectors (consumed by the neural extractor). Every sample carries a stable
//! `id` so subsets can be checked for identity and containment.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{RngStream, Vector};

pub trait Sample: Clone {
    fn id(&self) -> usize;
    fn label(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequenceSample {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSample {
    pub id: usize,
    pub values: Vector,
    pub label: usize,
}

impl Sample for TokenSequenceSample {
    fn id(&self) -> usize {
        self.id
    }
    fn label(&self) -> usize {
        self.label
    }
}

impl Sample for DenseSample {
    fn id(&self) -> usize {
        self.id
    }
    fn label(&self) -> usize {
        self.label
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Full,
    Train,
    Validation,
    Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<S> {
    pub samples: Vec<S>,
    pub n_classes: usize,
    /// Vocabulary size for sequence tasks, input dimensionality for dense tasks.
    pub input_size: usize,
    pub role: Role,
}

pub type SequenceDataset = LabeledDataset<TokenSequenceSample>;
pub type DenseDataset = LabeledDataset<DenseSample>;

impl<S: Sample> LabeledDataset<S> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(Sample::label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for s in &self.samples {
            counts[s.label()] += 1;
        }
        counts
    }

    fn with_samples(&self, samples: Vec<S>, role: Role) -> Self {
        LabeledDataset {
            samples,
            n_classes: self.n_classes,
            input_size: self.input_size,
            role,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTaskConfig {
    pub vocab_size: usize,
    pub n_samples: usize,
    pub avg_length: usize,
    /// Mean fraction of tokens drawn from the class topic; 0 means no signal.
    pub signal_strength: f64,
    pub n_classes: usize,
}

impl Default for SequenceTaskConfig {
    fn default() -> Self {
        SequenceTaskConfig {
            vocab_size: 500,
            n_samples: 2000,
            avg_length: 20,
            signal_strength: 0.2,
            n_classes: 2,
        }
    }
}

/// Class-conditional token mixture.
///
/// Tokens come from a shared Zipf background, except that each sample draws a
/// per-sample fraction `s_i ~ U[0, 2 * signal_strength]` of its tokens from the
/// topic of its class (a disjoint block of the vocabulary per class). The log
/// odds of the label are therefore close to linear in the frequencies of the
/// class-indicative tokens, and samples with small `s_i` are ambiguous.
pub fn generate_sequence_task(cfg: &SequenceTaskConfig, rng: &mut RngStream) -> Result<SequenceDataset> {
    if cfg.vocab_size < 2 || cfg.n_samples < 2 || cfg.avg_length < 1 || cfg.n_classes < 2 {
        return Err(Error::param(format!("degenerate sequence task sizes: {cfg:?}")));
    }
    if !(0.0..=0.5).contains(&cfg.signal_strength) {
        return Err(Error::param("signal_strength must lie in [0, 0.5]"));
    }
    let vocab = cfg.vocab_size;
    let mut order: Vec<usize> = (0..vocab).collect();
    rng.shuffle(&mut order);

    let background = zipf_cumulative(&order, 1.0);
    let topic_size = (vocab / (4 * cfg.n_classes)).max(1);
    let mut topic_pool = order.clone();
    rng.shuffle(&mut topic_pool);
    let topics: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|c| {
            let start = (c * topic_size) % vocab;
            let members: Vec<usize> = (0..topic_size).map(|k| topic_pool[(start + k) % vocab]).collect();
            zipf_cumulative(&members, 0.7)
        })
        .collect();

    let lo = (cfg.avg_length / 2).max(1);
    let hi = cfg.avg_length + cfg.avg_length / 2;
    let samples = (0..cfg.n_samples)
        .map(|id| {
            let label = rng.below(cfg.n_classes);
            let len = lo + rng.below(hi - lo + 1);
            let s = (2.0 * cfg.signal_strength * rng.uniform()).min(1.0);
            let tokens = (0..len)
                .map(|_| {
                    if rng.uniform() < s {
                        rng.categorical(&topics[label])
                    } else {
                        rng.categorical(&background)
                    }
                })
                .collect();
            TokenSequenceSample { id, tokens, label }
        })
        .collect();
    Ok(LabeledDataset {
        samples,
        n_classes: cfg.n_classes,
        input_size: vocab,
        role: Role::Full,
    })
}

/// Cumulative table over the whole vocabulary, giving `members[rank]` weight
/// `1 / (rank + 1)^exponent` and every other token zero.
fn zipf_cumulative(members: &[usize], exponent: f64) -> Vec<f64> {
    let vocab = members.iter().max().map_or(0, |m| m + 1).max(members.len());
    let mut w = vec![0.0; vocab];
    for (rank, &tok) in members.iter().enumerate() {
        w[tok] = 1.0 / ((rank + 1) as f64).powf(exponent);
    }
    let mut acc = 0.0;
    w.iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTaskConfig {
    pub input_dim: usize,
    pub n_samples: usize,
    pub n_classes: usize,
    /// Distance between class means in units of the per-axis noise std.
    pub margin: f64,
}

impl Default for DenseTaskConfig {
    fn default() -> Self {
        DenseTaskConfig {
            input_dim: 768,
            n_samples: 1600,
            n_classes: 2,
            margin: 2.0,
        }
    }
}

/// Gaussian blobs with unit isotropic noise; class means are pairwise
/// `margin` apart along random orthonormal directions.
pub fn generate_dense_task(cfg: &DenseTaskConfig, rng: &mut RngStream) -> Result<DenseDataset> {
    if cfg.input_dim < 2 || cfg.n_samples < 2 || cfg.n_classes < 2 {
        return Err(Error::param(format!("degenerate dense task sizes: {cfg:?}")));
    }
    if cfg.n_classes > cfg.input_dim {
        return Err(Error::param("n_classes must not exceed input_dim"));
    }
    if !(cfg.margin >= 0.0) || !cfg.margin.is_finite() {
        return Err(Error::param(format!("margin must be >= 0, got {}", cfg.margin)));
    }
    let dim = cfg.input_dim;
    // Gram-Schmidt on random Gaussian directions
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes);
    while dirs.len() < cfg.n_classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for d in &dirs {
            let p: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(d).for_each(|(a, b)| *a -= p * b);
        }
        let n = crate::numeric::l2(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            dirs.push(v);
        }
    }
    let scale = cfg.margin / 2f64.sqrt();
    let samples = (0..cfg.n_samples)
        .map(|id| {
            let label = rng.below(cfg.n_classes);
            let values: Vec<f64> = (0..dim).map(|j| scale * dirs[label][j] + rng.normal()).collect();
            DenseSample {
                id,
                values: Vector::from(values),
                label,
            }
        })
        .collect();
    Ok(LabeledDataset {
        samples,
        n_classes: cfg.n_classes,
        input_size: dim,
        role: Role::Full,
    })
}

/// Stratified per-class sample counts summing to `round(fraction * n)`,
/// distributing the rounding remainder by largest fractional part.
fn stratified_counts(counts: &[usize], fraction: f64) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let target = (fraction * n as f64).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&c| c as f64 * fraction).collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: usize = target.saturating_sub(take.iter().sum());
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(counts.len() * 2) {
        if rest == 0 {
            break;
        }
        if take[c] < counts[c] {
            take[c] += 1;
            rest -= 1;
        }
    }
    take
}

/// Chooses, per class, a random subset of positions of the given size.
/// Returns a membership mask over `samples`.
fn stratified_mask<S: Sample>(d: &LabeledDataset<S>, fraction: f64, rng: &mut RngStream) -> Vec<bool> {
    let counts = d.class_counts();
    let take = stratified_counts(&counts, fraction);
    let mut mask = vec![false; d.len()];
    for (class, &k) in take.iter().enumerate() {
        let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d.samples[i].label() == class).collect();
        rng.shuffle(&mut idx);
        for &i in &idx[..k] {
            mask[i] = true;
        }
    }
    mask
}

/// Stratified split into `(train, validation)`; sample order is preserved.
pub fn split<S: Sample>(
    d: &LabeledDataset<S>,
    fraction: f64,
    rng: &mut RngStream,
) -> Result<(LabeledDataset<S>, LabeledDataset<S>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param(format!("split fraction must be in (0, 1), got {fraction}")));
    }
    let mask = stratified_mask(d, fraction, rng);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, m) in d.samples.iter().zip(mask) {
        if m {
            train.push(s.clone());
        } else {
            val.push(s.clone());
        }
    }
    Ok((d.with_samples(train, Role::Train), d.with_samples(val, Role::Validation)))
}

/// Stratified random subset `R` of the training set.
pub fn reference_subset<S: Sample>(
    train: &LabeledDataset<S>,
    size: usize,
    rng: &mut RngStream,
) -> Result<LabeledDataset<S>> {
    if size > train.len() {
        return Err(Error::param(format!(
            "reference size {size} exceeds training set size {}",
            train.len()
        )));
    }
    if size == train.len() {
        return Ok(train.with_samples(train.samples.clone(), Role::Reference));
    }
    let mask = stratified_mask(train, size as f64 / train.len() as f64, rng);
    let samples = train
        .samples
        .iter()
        .zip(mask)
        .filter_map(|(s, m)| m.then(|| s.clone()))
        .collect();
    Ok(train.with_samples(samples, Role::Reference))
}

/// Per-class mean input vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCentroids {
    pub centroids: Vec<Vector>,
}

impl ClassCentroids {
    /// Mean of `points` per class. Every class in `0..n_classes` needs at
    /// least one point.
    pub fn from_points<'a, I>(points: I, n_classes: usize, dim: usize) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [f64], usize)>,
    {
        let mut sums = vec![vec![0.0; dim]; n_classes];
        let mut counts = vec![0usize; n_classes];
        for (x, y) in points {
            if x.len() != dim {
                return Err(Error::dim(format!("point of length {} in a {dim}-dim centroid", x.len())));
            }
            if y >= n_classes {
                return Err(Error::input(format!("label {y} outside {n_classes} classes")));
            }
            sums[y].iter_mut().zip(x).for_each(|(s, v)| *s += v);
            counts[y] += 1;
        }
        Self::finish(sums, counts)
    }

    pub(crate) fn finish(sums: Vec<Vec<f64>>, counts: Vec<usize>) -> Result<Self> {
        let centroids = sums
            .into_iter()
            .zip(&counts)
            .enumerate()
            .map(|(class, (s, &c))| {
                if c == 0 {
                    return Err(Error::MissingClass(class));
                }
                Ok(Vector::from(s.into_iter().map(|v| v / c as f64).collect::<Vec<_>>()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassCentroids { centroids })
    }

    pub fn n_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn get(&self, class: usize) -> Result<&Vector> {
        self.centroids.get(class).ok_or(Error::MissingClass(class))
    }
}

/// Centroids of a dense dataset's raw inputs.
pub fn centroids(r: &DenseDataset) -> Result<ClassCentroids> {
    ClassCentroids::from_points(
        r.samples.iter().map(|s| (&s.values[..], s.label)),
        r.n_classes,
        r.input_size,
    )
}

pub fn write_sequence_csv(d: &SequenceDataset, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, sequence_csv(d).as_bytes())
}

pub fn sequence_csv(d: &SequenceDataset) -> String {
    let mut out = format!("#vocab_size={} classes={}\n", d.input_size, d.n_classes);
    for s in &d.samples {
        let toks: Vec<String> = s.tokens.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(out, "{},{}", s.label, toks.join(" "));
    }
    out
}

pub fn dense_csv(d: &DenseDataset) -> String {
    let mut out = format!("#dim={} classes={}\n", d.input_size, d.n_classes);
    for s in &d.samples {
        out.push_str(&s.label.to_string());
        for v in s.values.iter() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn write_dense_csv(d: &DenseDataset, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, dense_csv(d).as_bytes())
}

fn parse_header(line: &str, keys: [&str; 2]) -> Result<[usize; 2]> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::format("missing '#' header line"))?;
    let mut out = [None, None];
    for field in body.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad header field '{field}'")))?;
        if let Some(i) = keys.iter().position(|key| *key == k) {
            out[i] = Some(v.parse().map_err(|_| Error::format(format!("bad header value '{field}'")))?);
        }
    }
    match out {
        [Some(a), Some(b)] => Ok([a, b]),
        _ => Err(Error::format(format!("header must contain {} and {}", keys[0], keys[1]))),
    }
}

pub fn parse_sequence_csv(text: &str) -> Result<SequenceDataset> {
    let mut lines = text.lines();
    let [vocab, classes] = parse_header(lines.next().unwrap_or(""), ["vocab_size", "classes"])?;
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |m: &str| Error::format(format!("line {}: {m}", lineno + 2));
        let (label, toks) = line.split_once(',').ok_or_else(|| err("expected 'label,tokens'"))?;
        let label: usize = label.trim().parse().map_err(|_| err("bad label"))?;
        if label >= classes {
            return Err(err("label out of range"));
        }
        let tokens = toks
            .split_whitespace()
            .map(|t| match t.parse::<usize>() {
                Ok(v) if v < vocab => Ok(v),
                _ => Err(err("bad token")),
            })
            .collect::<Result<Vec<_>>>()?;
        if tokens.is_empty() {
            return Err(err("empty token sequence"));
        }
        samples.push(TokenSequenceSample {
            id: samples.len(),
            tokens,
            label,
        });
    }
    Ok(LabeledDataset {
        samples,
        n_classes: classes,
        input_size: vocab,
        role: Role::Full,
    })
}

pub fn parse_dense_csv(text: &str) -> Result<DenseDataset> {
    let mut lines = text.lines();
    let [dim, classes] = parse_header(lines.next().unwrap_or(""), ["dim", "classes"])?;
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let err = |m: &str| Error::format(format!("line {}: {m}", lineno + 2));
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| err("bad label"))?;
        if label >= classes {
            return Err(err("label out of range"));
        }
        let values = fields
            .map(|v| v.trim().parse::<f64>().map_err(|_| err("bad value")))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dim {
            return Err(err("wrong number of values"));
        }
        samples.push(DenseSample {
            id: samples.len(),
            values: Vector::new(values)?,
            label,
        });
    }
    Ok(LabeledDataset {
        samples,
        n_classes: classes,
        input_size: dim,
        role: Role::Full,
    })
}
