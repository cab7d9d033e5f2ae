//! Host classifiers `f`, trained by the system developer on extracted features.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Precision};
use crate::nn::{self, Activation, Block, Dense, Grads, Stack};
use crate::numeric::{self, RngStream, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HostKind {
    Lr,
    Svm,
    Mlp,
    /// MLP with `l` residual blocks prepended at the input end.
    ResMlp(usize),
}

impl fmt::Display for HostKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HostKind::Lr => write!(f, "lr"),
            HostKind::Svm => write!(f, "svm"),
            HostKind::Mlp => write!(f, "mlp"),
            HostKind::ResMlp(l) => write!(f, "resmlp{l}"),
        }
    }
}

impl FromStr for HostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "lr" => Ok(HostKind::Lr),
            "svm" => Ok(HostKind::Svm),
            "mlp" => Ok(HostKind::Mlp),
            _ => s
                .strip_prefix("resmlp")
                .and_then(|l| l.trim_start_matches([':', '(']).trim_end_matches(')').parse().ok())
                .map(HostKind::ResMlp)
                .ok_or_else(|| Error::Config(format!("unknown classifier kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostHyper {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
}

impl HostHyper {
    pub fn for_kind(kind: HostKind) -> Self {
        match kind {
            HostKind::Lr => HostHyper {
                epochs: 60,
                lr: 0.5,
                batch_size: 32,
                weight_decay: 1e-3,
                hidden: vec![],
            },
            HostKind::Svm => HostHyper {
                epochs: 60,
                lr: 0.1,
                batch_size: 32,
                weight_decay: 1e-3,
                hidden: vec![],
            },
            HostKind::Mlp | HostKind::ResMlp(_) => HostHyper {
                epochs: 40,
                lr: 0.05,
                batch_size: 32,
                weight_decay: 1e-4,
                hidden: vec![240, 60],
            },
        }
    }
}

/// A trained host classifier: a score network plus, for the SVM, a Platt
/// style scale `A` turning one-vs-rest margins into `softmax(A * scores)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HostClassifier {
    kind: HostKind,
    stack: Stack,
    scale: f64,
    weight_decay: f64,
    pub train_accuracy: f64,
}

impl HostClassifier {
    /// Assembles a classifier from explicit parts.
    pub fn from_parts(kind: HostKind, stack: Stack, scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::param(format!("confidence scale must be finite and >= 0, got {scale}")));
        }
        Ok(HostClassifier {
            kind,
            stack,
            scale,
            weight_decay: HostHyper::for_kind(kind).weight_decay,
            train_accuracy: f64::NAN,
        })
    }

    pub fn kind(&self) -> HostKind {
        self.kind
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn stack(&self) -> &Stack {
        &self.stack
    }

    pub(crate) fn stack_mut(&mut self) -> &mut Stack {
        &mut self.stack
    }

    pub(crate) fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn input_dim(&self) -> usize {
        self.stack.input_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.stack.output_dim()
    }

    pub fn scores(&self, v: &[f64]) -> Result<Vector> {
        self.stack.output(v)
    }

    pub fn predict_proba(&self, v: &[f64]) -> Result<Vector> {
        let s = self.scores(v)?;
        let scaled: Vec<f64> = s.iter().map(|x| x * self.scale).collect();
        numeric::softmax(&scaled)
    }

    /// `(label, confidence)`: argmax of the scores and that class's probability.
    pub fn predict(&self, v: &[f64]) -> Result<(usize, f64)> {
        let s = self.scores(v)?;
        let label = numeric::argmax(&s);
        let scaled: Vec<f64> = s.iter().map(|x| x * self.scale).collect();
        Ok((label, numeric::softmax(&scaled)?[label]))
    }

    /// Training loss and its gradient w.r.t. the raw scores.
    pub(crate) fn loss_grad(&self, scores: &[f64], label: usize) -> (f64, Vec<f64>) {
        match self.kind {
            HostKind::Svm => ovr_hinge(scores, label),
            _ => nn::softmax_xent(scores, label),
        }
    }

    fn fit(&mut self, features: &[Vector], labels: &[usize], hyper: &HostHyper, rng: &mut RngStream) -> Result<()> {
        let mut order: Vec<usize> = (0..features.len()).collect();
        for _ in 0..hyper.epochs {
            rng.shuffle(&mut order);
            for batch in order.chunks(hyper.batch_size.max(1)) {
                let mut grads = Grads::zeros_like(&self.stack);
                for &i in batch {
                    let (scores, cache) = self.stack.forward(&features[i])?;
                    let (_, d) = self.loss_grad(&scores, labels[i]);
                    self.stack.backward(&cache, &d, &mut grads);
                }
                self.stack
                    .sgd_step(&grads, hyper.lr, 1.0 / batch.len() as f64, hyper.weight_decay);
            }
        }
        if self.stack.blocks.iter().any(|b| b.layer().params().any(|p| !p.is_finite())) {
            return Err(Error::Numeric(format!("{} training diverged", self.kind)));
        }
        Ok(())
    }
}

fn ovr_hinge(scores: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = scores
        .iter()
        .enumerate()
        .map(|(c, &s)| {
            let t = if c == label { 1.0 } else { -1.0 };
            if t * s < 1.0 {
                loss += 1.0 - t * s;
                -t
            } else {
                0.0
            }
        })
        .collect();
    (loss, grad)
}

/// Mean negative log-likelihood of `softmax(a * scores)`.
fn platt_nll(a: f64, scores: &[Vector], labels: &[usize]) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(s, &y)| {
            let scaled: Vec<f64> = s.iter().map(|x| x * a).collect();
            -numeric::softmax_raw(&scaled)[y].max(1e-300).ln()
        })
        .sum::<f64>()
        / scores.len() as f64
}

/// Golden-section search for `A` over `log A in [-7, 7]`.
fn fit_platt_scale(scores: &[Vector], labels: &[usize]) -> f64 {
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (-7.0f64, 7.0f64);
    let f = |t: f64| platt_nll(t.exp(), scores, labels);
    let mut c = hi - phi * (hi - lo);
    let mut d = lo + phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..60 {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi * (hi - lo);
            fd = f(d);
        }
    }
    ((lo + hi) / 2.0).exp()
}

fn build_stack(kind: HostKind, input: usize, n_classes: usize, hidden: &[usize], rng: &RngStream) -> Result<Stack> {
    let mut blocks = Vec::new();
    if let HostKind::ResMlp(l) = kind {
        for j in 0..l {
            let mut d = Dense::init(input, input, Activation::Relu, &mut rng.split(1000 + j as u64));
            // keep the stacked residual branches small relative to the skip path
            d.weights.iter_mut().for_each(|w| *w *= 0.5);
            blocks.push(Block::Residual(d));
        }
    }
    let widths: Vec<usize> = match kind {
        HostKind::Lr | HostKind::Svm => vec![input, n_classes],
        HostKind::Mlp | HostKind::ResMlp(_) => std::iter::once(input)
            .chain(hidden.iter().cloned())
            .chain(std::iter::once(n_classes))
            .collect(),
    };
    let last = widths.len() - 2;
    for (i, w) in widths.windows(2).enumerate() {
        let act = if i == last { Activation::Identity } else { Activation::Relu };
        let layer = match kind {
            HostKind::Lr | HostKind::Svm => Dense::zeros(w[0], w[1], act),
            _ => Dense::init(w[0], w[1], act, &mut rng.split(i as u64)),
        };
        blocks.push(Block::Dense(layer));
    }
    Stack::new(blocks)
}

/// Trains a host classifier of the given kind on `(features, labels)`.
pub fn train_host(
    kind: HostKind,
    features: &[Vector],
    labels: &[usize],
    n_classes: usize,
    hyper: &HostHyper,
    rng: &mut RngStream,
) -> Result<HostClassifier> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::input("features and labels must be non-empty and aligned"));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::dim("ragged feature matrix"));
    }
    if labels.iter().any(|&y| y >= n_classes) {
        return Err(Error::input(format!("label out of range for {n_classes} classes")));
    }
    let mut present = vec![false; n_classes];
    labels.iter().for_each(|&y| present[y] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Degenerate("training labels contain a single class".into()));
    }
    let stack = build_stack(kind, dim, n_classes, &hyper.hidden, &rng.split(0))?;
    let mut f = HostClassifier {
        kind,
        stack,
        scale: 1.0,
        weight_decay: hyper.weight_decay,
        train_accuracy: f64::NAN,
    };
    f.fit(features, labels, hyper, &mut rng.split(1))?;
    let scores = features.iter().map(|v| f.scores(v)).collect::<Result<Vec<_>>>()?;
    if kind == HostKind::Svm {
        f.scale = fit_platt_scale(&scores, labels);
    }
    let correct = scores.iter().zip(labels).filter(|(s, &y)| numeric::argmax(s) == y).count();
    f.train_accuracy = correct as f64 / labels.len() as f64;
    log::debug!("trained {kind} host, training accuracy {:.4}", f.train_accuracy);
    Ok(f)
}

/// Accuracy of `f` on `(features, labels)`.
pub fn accuracy(f: &HostClassifier, features: &[Vector], labels: &[usize]) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::input("accuracy of an empty set"));
    }
    let mut correct = 0;
    for (v, &y) in features.iter().zip(labels) {
        if f.predict(v)?.0 == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / features.len() as f64)
}

pub fn encode_host(f: &HostClassifier, precision: Precision) -> Vec<u8> {
    let extra = vec![
        ("kind".to_string(), f.kind.to_string()),
        ("scale".to_string(), format!("{}", f.scale)),
    ];
    nn::encode_stack(&f.stack, precision, &extra)
}

pub fn decode_host(bytes: &[u8]) -> Result<HostClassifier> {
    let (stack, _, header) = nn::decode_stack(bytes)?;
    let kind: HostKind = io::header_field(&header, "kind")
        .ok_or_else(|| Error::format("host model lacks kind="))?
        .parse()
        .map_err(|_| Error::format("bad kind= in host model"))?;
    let scale: f64 = io::header_field(&header, "scale")
        .unwrap_or("1")
        .parse()
        .map_err(|_| Error::format("bad scale= in host model"))?;
    HostClassifier::from_parts(kind, stack, scale)
}

pub fn save_host(f: &HostClassifier, path: &Path, precision: Precision) -> Result<()> {
    io::write_atomic(path, &encode_host(f, precision))
}

pub fn load_host(path: &Path) -> Result<HostClassifier> {
    decode_host(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, sep: f64, seed: u64) -> (Vec<Vector>, Vec<usize>) {
        let mut rng = RngStream::new(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let c = if y == 1 { sep } else { -sep };
            xs.push(Vector::from(vec![c + rng.normal() * 0.5, c + rng.normal() * 0.5]));
            ys.push(y);
        }
        (xs, ys)
    }

    #[test]
    fn lr_separates_blobs() {
        let (xs, ys) = blobs(200, 3.0, 1);
        let f = train_host(HostKind::Lr, &xs, &ys, 2, &HostHyper::for_kind(HostKind::Lr), &mut RngStream::new(2)).unwrap();
        assert!(accuracy(&f, &xs, &ys).unwrap() >= 0.99);
        assert!(f.train_accuracy >= 0.99);
    }

    #[test]
    fn svm_classifies_class_centroids() {
        let (xs, ys) = blobs(200, 3.0, 3);
        let f = train_host(HostKind::Svm, &xs, &ys, 2, &HostHyper::for_kind(HostKind::Svm), &mut RngStream::new(4)).unwrap();
        assert_eq!(f.predict(&[3.0, 3.0]).unwrap().0, 1);
        assert_eq!(f.predict(&[-3.0, -3.0]).unwrap().0, 0);
        let (_, conf) = f.predict(&[3.0, 3.0]).unwrap();
        assert!((0.5..=1.0).contains(&conf));
        assert!(f.scale() > 0.0);
    }

    #[test]
    fn mlp_configuration_and_resmlp_zero_identity() {
        let (xs, ys) = blobs(60, 2.0, 5);
        let mut hyper = HostHyper::for_kind(HostKind::Mlp);
        assert_eq!(hyper.hidden, vec![240, 60]);
        hyper.epochs = 3;
        let a = train_host(HostKind::Mlp, &xs, &ys, 2, &hyper, &mut RngStream::new(6)).unwrap();
        let b = train_host(HostKind::ResMlp(0), &xs, &ys, 2, &hyper, &mut RngStream::new(6)).unwrap();
        assert_eq!(a.stack(), b.stack());
        for x in &xs {
            assert_eq!(a.predict(x).unwrap(), b.predict(x).unwrap());
        }
        let r = train_host(HostKind::ResMlp(2), &xs, &ys, 2, &hyper, &mut RngStream::new(6)).unwrap();
        assert_eq!(r.stack().blocks.iter().filter(|b| b.is_residual()).count(), 2);
    }

    #[test]
    fn single_class_is_degenerate() {
        let xs = vec![Vector::from(vec![1.0, 2.0]); 4];
        let r = train_host(HostKind::Lr, &xs, &[1, 1, 1, 1], 2, &HostHyper::for_kind(HostKind::Lr), &mut RngStream::new(0));
        assert!(matches!(r, Err(Error::Degenerate(_))));
    }

    #[test]
    fn zero_lr_is_uninformative_and_scaling_is_monotone() {
        let stack = Stack::new(vec![Block::Dense(Dense::zeros(3, 2, Activation::Identity))]).unwrap();
        let f = HostClassifier::from_parts(HostKind::Lr, stack, 1.0).unwrap();
        assert_eq!(f.predict(&[1.0, -1.0, 2.0]).unwrap(), (0, 0.5));
        assert!(matches!(f.predict(&[1.0]), Err(Error::Dimension(_))));

        let mut d = Dense::zeros(3, 2, Activation::Identity);
        d.weights = vec![0.2, -0.1, 0.3, -0.4, 0.5, 0.1];
        d.bias = vec![0.05, -0.02];
        let base = HostClassifier::from_parts(HostKind::Lr, Stack::new(vec![Block::Dense(d.clone())]).unwrap(), 1.0).unwrap();
        let mut d2 = d.clone();
        d2.weights.iter_mut().chain(d2.bias.iter_mut()).for_each(|w| *w *= 3.0);
        let scaled = HostClassifier::from_parts(HostKind::Lr, Stack::new(vec![Block::Dense(d2)]).unwrap(), 1.0).unwrap();
        let x = [1.0, 0.5, -2.0];
        let (l1, c1) = base.predict(&x).unwrap();
        let (l2, c2) = scaled.predict(&x).unwrap();
        assert_eq!(l1, l2);
        assert!(c2 > c1);
    }

    #[test]
    fn predict_matches_formula() {
        let mut rng = RngStream::new(11);
        let mut d = Dense::zeros(4, 3, Activation::Identity);
        d.weights.iter_mut().chain(d.bias.iter_mut()).for_each(|w| *w = rng.normal());
        let f = HostClassifier::from_parts(HostKind::Svm, Stack::new(vec![Block::Dense(d.clone())]).unwrap(), 1.7).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let s: Vec<f64> = (0..3)
            .map(|o| d.bias[o] + (0..4).map(|i| d.weights[o * 4 + i] * x[i]).sum::<f64>())
            .collect();
        let e: Vec<f64> = s.iter().map(|v| (1.7 * v).exp()).collect();
        let z: f64 = e.iter().sum();
        let best = (0..3).fold(0, |b, i| if s[i] > s[b] { i } else { b });
        let (label, conf) = f.predict(&x).unwrap();
        assert_eq!(label, best);
        assert!((conf - e[best] / z).abs() < 1e-12);
    }

    #[test]
    fn host_round_trip_and_kind_parsing() {
        let (xs, ys) = blobs(40, 2.0, 9);
        let mut hyper = HostHyper::for_kind(HostKind::ResMlp(1));
        hyper.epochs = 1;
        hyper.hidden = vec![5];
        let f = train_host(HostKind::ResMlp(1), &xs, &ys, 2, &hyper, &mut RngStream::new(1)).unwrap();
        let back = decode_host(&encode_host(&f, Precision::F64)).unwrap();
        assert_eq!(back.stack(), f.stack());
        assert_eq!(back.kind(), HostKind::ResMlp(1));
        assert!(nn::decode_dnn1(&encode_host(&f, Precision::F64)).is_err());
        for s in ["lr", "svm", "mlp", "resmlp3"] {
            assert_eq!(s.parse::<HostKind>().unwrap().to_string(), s);
        }
        assert!("tree".parse::<HostKind>().is_err());
    }
}
