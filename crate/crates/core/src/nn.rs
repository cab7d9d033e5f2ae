//! Feed-forward networks with exact backpropagation.
//!
//! [`Stack`] is the shared machinery: an ordered list of affine blocks, each
//! optionally followed by ReLU and optionally wrapped in an identity skip
//! connection. The neural feature extractor ([`DnnExtractor`]) is a stack of
//! plain affine+activation layers; host classifiers reuse the same type with
//! residual blocks.
//!
//! Parameters of block `i` are addressed by [`ParamId`] `(i, offset)` where
//! offsets `0..out*in` are the row-major weights and the following `out`
//! offsets are the biases.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifiers::HostClassifier;
use crate::dataset::{DenseDataset, Sample};
use crate::error::{Error, Result};
use crate::io::{self, Precision, Reader};
use crate::numeric::{self, RngStream, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// Fan-in scaled uniform init, `U[-b, b]` with `b = gain * sqrt(3 / fan_in)`
    /// (gain `sqrt(2)` for ReLU). Biases start at zero.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut RngStream) -> Self {
        let gain = match activation {
            Activation::Relu => 2f64.sqrt(),
            Activation::Identity => 1.0,
        };
        let bound = gain * (3.0 / inputs as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| rng.uniform_range(-bound, bound)).collect();
        Dense {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn param(&self, offset: usize) -> f64 {
        if offset < self.weights.len() {
            self.weights[offset]
        } else {
            self.bias[offset - self.weights.len()]
        }
    }

    pub fn param_mut(&mut self, offset: usize) -> &mut f64 {
        let nw = self.weights.len();
        if offset < nw {
            &mut self.weights[offset]
        } else {
            &mut self.bias[offset - nw]
        }
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(&self.bias).cloned()
    }

    fn preactivation(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                numeric::dot(row, x) + self.bias[o]
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad` (same layout as offsets)
    /// and returns the gradient with respect to the block input.
    fn backward_pre(&self, x: &[f64], dpre: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        let nw = self.weights.len();
        for o in 0..self.outputs {
            let d = dpre[o];
            if d == 0.0 {
                continue;
            }
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += d * x[i];
                dx[i] += d * row[i];
            }
            grad[nw + o] += d;
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Dense(Dense),
    /// `x + relu(W x + b)`; `W` is square.
    Residual(Dense),
}

impl Block {
    pub fn layer(&self) -> &Dense {
        match self {
            Block::Dense(d) | Block::Residual(d) => d,
        }
    }

    pub fn layer_mut(&mut self) -> &mut Dense {
        match self {
            Block::Dense(d) | Block::Residual(d) => d,
        }
    }

    pub fn is_residual(&self) -> bool {
        matches!(self, Block::Residual(_))
    }

    fn output(&self, x: &[f64], pre: &[f64]) -> Vec<f64> {
        match self {
            Block::Dense(d) => pre.iter().map(|&p| d.activation.apply(p)).collect(),
            Block::Residual(_) => x.iter().zip(pre).map(|(a, &p)| a + p.max(0.0)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub offset: usize,
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.offset)
    }
}

/// Activations retained by a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
}

/// Per-block flat gradients in [`ParamId`] offset layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(stack: &Stack) -> Self {
        Grads(stack.blocks.iter().map(|b| vec![0.0; b.layer().param_count()]).collect())
    }

    pub fn get(&self, id: ParamId) -> f64 {
        self.0[id.layer][id.offset]
    }

    fn add_scaled(&mut self, other: &Grads, c: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub blocks: Vec<Block>,
}

impl Stack {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::param("a network needs at least one layer"));
        }
        for (i, b) in blocks.iter().enumerate() {
            let l = b.layer();
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::dim(format!("layer {i} has inconsistent parameter arrays")));
            }
            if b.is_residual() && l.inputs != l.outputs {
                return Err(Error::dim(format!("residual layer {i} must be square")));
            }
            if i > 0 && blocks[i - 1].layer().outputs != l.inputs {
                return Err(Error::dim(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.inputs,
                    i - 1,
                    blocks[i - 1].layer().outputs
                )));
            }
        }
        Ok(Stack { blocks })
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].layer().inputs
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.last().unwrap().layer().outputs
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.layer().param_count()).sum()
    }

    pub fn param(&self, id: ParamId) -> f64 {
        self.blocks[id.layer].layer().param(id.offset)
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut f64 {
        self.blocks[id.layer].layer_mut().param_mut(id.offset)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.blocks.iter().enumerate().flat_map(|(layer, b)| {
            (0..b.layer().param_count()).map(move |offset| ParamId { layer, offset })
        })
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vector, ForwardCache)> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(format!(
                "input of length {} for a network expecting {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.blocks.len()),
            pres: Vec::with_capacity(self.blocks.len()),
        };
        let mut cur = x.to_vec();
        for b in &self.blocks {
            let pre = b.layer().preactivation(&cur);
            let out = b.output(&cur, &pre);
            cache.inputs.push(cur);
            cache.pres.push(pre);
            cur = out;
        }
        Ok((Vector::from(cur), cache))
    }

    pub fn output(&self, x: &[f64]) -> Result<Vector> {
        Ok(self.forward(x)?.0)
    }

    /// Backpropagates `dout` (gradient w.r.t. the stack output), accumulating
    /// into `grads`; returns the gradient w.r.t. the stack input.
    pub fn backward(&self, cache: &ForwardCache, dout: &[f64], grads: &mut Grads) -> Vec<f64> {
        let mut d = dout.to_vec();
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let x = &cache.inputs[i];
            let pre = &cache.pres[i];
            match b {
                Block::Dense(l) => {
                    let dpre: Vec<f64> = d.iter().zip(pre).map(|(g, &p)| g * l.activation.derivative(p)).collect();
                    d = l.backward_pre(x, &dpre, &mut grads.0[i]);
                }
                Block::Residual(l) => {
                    let dpre: Vec<f64> = d.iter().zip(pre).map(|(g, &p)| if p > 0.0 { *g } else { 0.0 }).collect();
                    let dx = l.backward_pre(x, &dpre, &mut grads.0[i]);
                    d.iter_mut().zip(dx).for_each(|(a, b)| *a += b);
                }
            }
        }
        d
    }

    /// `theta -= lr * (grad * grad_scale + weight_decay * theta)` on weights,
    /// and without decay on biases.
    pub(crate) fn sgd_step(&mut self, grads: &Grads, lr: f64, grad_scale: f64, weight_decay: f64) {
        for (b, g) in self.blocks.iter_mut().zip(&grads.0) {
            let l = b.layer_mut();
            let nw = l.weights.len();
            for (w, gw) in l.weights.iter_mut().zip(&g[..nw]) {
                *w -= lr * (gw * grad_scale + weight_decay * *w);
            }
            for (bb, gb) in l.bias.iter_mut().zip(&g[nw..]) {
                *bb -= lr * gb * grad_scale;
            }
        }
    }
}

/// The neural feature extractor `g`: plain affine+activation layers only.
#[derive(Debug, Clone, PartialEq)]
pub struct DnnExtractor {
    stack: Stack,
}

impl DnnExtractor {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        Ok(DnnExtractor {
            stack: Stack::new(layers.into_iter().map(Block::Dense).collect())?,
        })
    }

    /// Random ReLU network with layer widths `sizes[0] -> sizes[1] -> ...`.
    pub fn random(sizes: &[usize], rng: &mut RngStream) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::param(format!("bad extractor sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::init(w[0], w[1], Activation::Relu, &mut rng.split(i as u64)))
            .collect();
        Self::new(layers)
    }

    pub fn stack(&self) -> &Stack {
        &self.stack
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.stack.blocks.iter().map(Block::layer)
    }

    pub fn layer(&self, i: usize) -> &Dense {
        self.stack.blocks[i].layer()
    }

    pub fn layer_count(&self) -> usize {
        self.stack.blocks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.stack.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.stack.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.stack.param_count()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.stack.param_ids()
    }

    pub fn param(&self, id: ParamId) -> f64 {
        self.stack.param(id)
    }

    pub fn set_param(&mut self, id: ParamId, value: f64) {
        *self.stack.param_mut(id) = value;
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vector, ForwardCache)> {
        self.stack.forward(x)
    }

    pub fn features(&self, x: &[f64]) -> Result<Vector> {
        self.stack.output(x)
    }

    pub fn backward(&self, cache: &ForwardCache, dfeature: &[f64], grads: &mut Grads) -> Vec<f64> {
        self.stack.backward(cache, dfeature, grads)
    }

    pub(crate) fn stack_mut(&mut self) -> &mut Stack {
        &mut self.stack
    }

    pub fn map_params(&self, mut f: impl FnMut(ParamId, f64) -> f64) -> DnnExtractor {
        let mut out = self.clone();
        for id in self.param_ids().collect::<Vec<_>>() {
            let v = f(id, self.param(id));
            out.set_param(id, v);
        }
        out
    }
}

/// One fully connected layer plus softmax, trained on a frozen extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateClassifier {
    pub head: Dense,
    pub warnings: Vec<String>,
}

impl SurrogateClassifier {
    pub fn n_classes(&self) -> usize {
        self.head.outputs
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vector> {
        if feature.len() != self.head.inputs {
            return Err(Error::dim(format!(
                "feature of length {} for a head expecting {}",
                feature.len(),
                self.head.inputs
            )));
        }
        Ok(Vector::from(self.head.preactivation(feature)))
    }

    pub fn predict_proba(&self, feature: &[f64]) -> Result<Vector> {
        numeric::softmax(&self.logits(feature)?)
    }

    /// Class probabilities of the composition `f_hat(g(x))`.
    pub fn predict_input(&self, g: &DnnExtractor, x: &[f64]) -> Result<Vector> {
        self.predict_proba(&g.features(x)?)
    }
}

/// `d sigma_y / d theta` for every class `y` and every extractor parameter.
#[derive(Debug, Clone)]
pub struct GradientRecord {
    pub probs: Vector,
    pub per_class: Vec<Grads>,
}

impl GradientRecord {
    pub fn get(&self, class: usize, id: ParamId) -> f64 {
        self.per_class[class].get(id)
    }
}

/// Exact gradients of every class probability of `f_hat(g(x))` with respect
/// to every parameter of `g`, from one forward pass and one backward pass per
/// class.
pub fn class_prob_gradients(g: &DnnExtractor, f_hat: &SurrogateClassifier, x: &[f64]) -> Result<GradientRecord> {
    let (feature, cache) = g.forward(x)?;
    let logits = f_hat.logits(&feature)?;
    let probs = numeric::softmax(&logits)?;
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite activation".into()));
    }
    let k = probs.len();
    let mut per_class = Vec::with_capacity(k);
    for y in 0..k {
        // d sigma_y / d z_j = sigma_y (1[y=j] - sigma_j)
        let dlogits: Vec<f64> = (0..k)
            .map(|j| probs[y] * (if j == y { 1.0 } else { 0.0 } - probs[j]))
            .collect();
        let mut dfeature = vec![0.0; f_hat.head.inputs];
        for (j, &dz) in dlogits.iter().enumerate() {
            let row = &f_hat.head.weights[j * f_hat.head.inputs..(j + 1) * f_hat.head.inputs];
            crate::embedding::axpy(&mut dfeature, dz, row);
        }
        let mut grads = Grads::zeros_like(g.stack());
        g.backward(&cache, &dfeature, &mut grads);
        if grads.0.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        per_class.push(grads);
    }
    Ok(GradientRecord { probs, per_class })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 0.1,
            batch_size: 32,
            weight_decay: 0.0,
        }
    }
}

/// Softmax cross-entropy: returns `(loss, d loss / d logits)`.
pub(crate) fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = numeric::softmax_raw(logits);
    let loss = -p[label].max(1e-300).ln();
    p[label] -= 1.0;
    (loss, p)
}

/// Trains a linear softmax head on features precomputed from `inputs`.
pub(crate) fn train_softmax_head(
    features: &[Vector],
    labels: &[usize],
    n_classes: usize,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Dense> {
    let dim = features.first().map_or(0, |f| f.len());
    let mut stack = Stack::new(vec![Block::Dense(Dense::zeros(dim, n_classes, Activation::Identity))])?;
    let mut order: Vec<usize> = (0..features.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = Grads::zeros_like(&stack);
            for &i in batch {
                let (logits, cache) = stack.forward(&features[i])?;
                let (_, dl) = softmax_xent(&logits, labels[i]);
                stack.backward(&cache, &dl, &mut grads);
            }
            stack.sgd_step(&grads, cfg.lr, 1.0 / batch.len() as f64, cfg.weight_decay);
        }
    }
    let Block::Dense(head) = stack.blocks.pop().unwrap() else {
        unreachable!()
    };
    Ok(head)
}

/// Partial-system tuning of a surrogate head on the reference set; `g` stays
/// frozen.
pub fn train_surrogate(
    g: &DnnExtractor,
    r: &DenseDataset,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<SurrogateClassifier> {
    if r.is_empty() {
        return Err(Error::input("cannot train a surrogate on an empty reference set"));
    }
    let features = r
        .samples
        .iter()
        .map(|s| g.features(&s.values))
        .collect::<Result<Vec<_>>>()?;
    let labels = r.labels();
    let head = train_softmax_head(&features, &labels, r.n_classes, cfg, rng)?;
    let mut warnings = Vec::new();
    let present = r.class_counts().iter().filter(|&&c| c > 0).count();
    if present < 2 {
        let msg = format!("reference set has a single class ({present} present); surrogate is degenerate");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    Ok(SurrogateClassifier { head, warnings })
}

/// Trains a fresh extractor end to end with a temporary linear head. Stands
/// in for the third party that publishes the genuine extractor.
pub fn pretrain_extractor(
    sizes: &[usize],
    data: &DenseDataset,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<DnnExtractor> {
    let mut g = DnnExtractor::random(sizes, &mut rng.split(0))?;
    let mut head = Stack::new(vec![Block::Dense(Dense::init(
        g.feature_dim(),
        data.n_classes,
        Activation::Identity,
        &mut rng.split(1),
    ))])?;
    let mut shuffler = rng.split(2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        shuffler.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut gg = Grads::zeros_like(g.stack());
            let mut gh = Grads::zeros_like(&head);
            for &i in batch {
                let s = &data.samples[i];
                let (feat, gcache) = g.forward(&s.values)?;
                let (logits, hcache) = head.forward(&feat)?;
                let (_, dl) = softmax_xent(&logits, s.label);
                let dfeat = head.backward(&hcache, &dl, &mut gh);
                g.backward(&gcache, &dfeat, &mut gg);
            }
            let scale = 1.0 / batch.len() as f64;
            g.stack_mut().sgd_step(&gg, cfg.lr, scale, cfg.weight_decay);
            head.sgd_step(&gh, cfg.lr, scale, cfg.weight_decay);
        }
    }
    Ok(g)
}

/// Full-system tuning: updates both the extractor and the host classifier by
/// end-to-end descent on the host's training loss.
pub fn full_tune(
    g: &DnnExtractor,
    f: &HostClassifier,
    t: &DenseDataset,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(DnnExtractor, HostClassifier)> {
    if t.is_empty() {
        return Err(Error::input("cannot tune on an empty training set"));
    }
    let mut g = g.clone();
    let mut f = f.clone();
    if f.input_dim() != g.feature_dim() {
        return Err(Error::dim("host classifier does not match extractor features"));
    }
    let mut order: Vec<usize> = (0..t.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut gg = Grads::zeros_like(g.stack());
            let mut gf = Grads::zeros_like(f.stack());
            for &i in batch {
                let s = &t.samples[i];
                let (feat, gcache) = g.forward(&s.values)?;
                let (scores, fcache) = f.stack().forward(&feat)?;
                let (_, dscores) = f.loss_grad(&scores, s.label());
                let dfeat = f.stack().backward(&fcache, &dscores, &mut gf);
                g.backward(&gcache, &dfeat, &mut gg);
            }
            let scale = 1.0 / batch.len() as f64;
            let wd = f.weight_decay().max(cfg.weight_decay);
            g.stack_mut().sgd_step(&gg, cfg.lr, scale, cfg.weight_decay);
            f.stack_mut().sgd_step(&gf, cfg.lr, scale, wd);
        }
    }
    Ok((g, f))
}

/// Accumulated loss gradient over a dataset; used by tests and diagnostics.
pub fn dataset_gradient(
    g: &DnnExtractor,
    f_hat: &SurrogateClassifier,
    data: &DenseDataset,
) -> Result<Grads> {
    let mut total = Grads::zeros_like(g.stack());
    for s in &data.samples {
        let (feat, cache) = g.forward(&s.values)?;
        let (_, dl) = softmax_xent(&f_hat.logits(&feat)?, s.label);
        let mut dfeat = vec![0.0; feat.len()];
        for (j, &dz) in dl.iter().enumerate() {
            let row = &f_hat.head.weights[j * f_hat.head.inputs..(j + 1) * f_hat.head.inputs];
            crate::embedding::axpy(&mut dfeat, dz, row);
        }
        let mut grads = Grads::zeros_like(g.stack());
        g.backward(&cache, &dfeat, &mut grads);
        total.add_scaled(&grads, 1.0);
    }
    Ok(total)
}

/// Extra `key=value` fields carried on the `DNN1` header line.
pub(crate) type HeaderFields = Vec<(String, String)>;

pub(crate) fn encode_stack(stack: &Stack, precision: Precision, extra: &HeaderFields) -> Vec<u8> {
    let mut head = format!("DNN1 layers={} precision={}", stack.blocks.len(), precision.as_str());
    for (k, v) in extra {
        head.push_str(&format!(" {k}={v}"));
    }
    head.push('\n');
    let mut out = head.into_bytes();
    for (i, b) in stack.blocks.iter().enumerate() {
        let l = b.layer();
        let mut line = format!(
            "layer {i} in={} out={} act={}",
            l.inputs,
            l.outputs,
            if b.is_residual() { "relu" } else { l.activation.tag() }
        );
        if b.is_residual() {
            line.push_str(" skip=identity");
        }
        line.push('\n');
        out.extend_from_slice(line.as_bytes());
        io::put_floats(&mut out, l.weights.iter().chain(&l.bias).cloned(), precision);
    }
    out
}

pub(crate) fn decode_stack(bytes: &[u8]) -> Result<(Stack, Precision, String)> {
    let mut r = Reader::new(bytes);
    let header = r.line()?.to_string();
    if header.split_whitespace().next() != Some("DNN1") {
        return Err(Error::format("not a DNN1 file"));
    }
    let n = io::header_usize(&header, "layers")?;
    let precision = Precision::parse(io::header_field(&header, "precision").unwrap_or("f64"))?;
    let mut blocks = Vec::with_capacity(n);
    for i in 0..n {
        let line = r.line()?;
        let mut words = line.split_whitespace();
        if words.next() != Some("layer") || words.next() != Some(i.to_string().as_str()) {
            return Err(Error::format(format!("expected 'layer {i}' sub-header, got '{line}'")));
        }
        let inputs = io::header_usize(line, "in")?;
        let outputs = io::header_usize(line, "out")?;
        let activation = match io::header_field(line, "act") {
            Some("relu") => Activation::Relu,
            Some("none") => Activation::Identity,
            other => return Err(Error::format(format!("unknown activation {other:?}"))),
        };
        let values = r.floats(inputs * outputs + outputs, precision)?;
        let (w, b) = values.split_at(inputs * outputs);
        let dense = Dense {
            inputs,
            outputs,
            weights: w.to_vec(),
            bias: b.to_vec(),
            activation,
        };
        blocks.push(match io::header_field(line, "skip") {
            Some("identity") => Block::Residual(dense),
            None => Block::Dense(dense),
            Some(other) => return Err(Error::format(format!("unknown skip '{other}'"))),
        });
    }
    r.finish()?;
    Ok((Stack::new(blocks)?, precision, header))
}

pub fn encode_dnn1(g: &DnnExtractor, precision: Precision) -> Vec<u8> {
    encode_stack(&g.stack, precision, &Vec::new())
}

pub fn decode_dnn1(bytes: &[u8]) -> Result<(DnnExtractor, Precision)> {
    let (stack, precision, header) = decode_stack(bytes)?;
    if io::header_field(&header, "kind").is_some() {
        return Err(Error::format("file holds a host classifier, not an extractor"));
    }
    if stack.blocks.iter().any(Block::is_residual) {
        return Err(Error::format("extractor layers cannot have skip connections"));
    }
    Ok((DnnExtractor { stack }, precision))
}

pub fn save_dnn1(g: &DnnExtractor, path: &Path, precision: Precision) -> Result<()> {
    io::write_atomic(path, &encode_dnn1(g, precision))
}

pub fn load_dnn1(path: &Path) -> Result<DnnExtractor> {
    Ok(decode_dnn1(&std::fs::read(path)?)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dense_task, DenseTaskConfig};

    fn tiny(seed: u64) -> (DnnExtractor, SurrogateClassifier) {
        let mut rng = RngStream::new(seed);
        let g = DnnExtractor::random(&[4, 6, 5], &mut rng).unwrap();
        let mut head = Dense::init(5, 3, Activation::Identity, &mut rng.split(9));
        head.bias.iter_mut().for_each(|b| *b = rng.normal() * 0.1);
        (g, SurrogateClassifier { head, warnings: vec![] })
    }

    #[test]
    fn zero_and_identity_networks() {
        let g = DnnExtractor::new(vec![Dense::zeros(3, 4, Activation::Relu)]).unwrap();
        assert_eq!(g.features(&[1.0, -2.0, 3.0]).unwrap().as_ref(), &[0.0; 4]);

        let mut id = Dense::zeros(3, 3, Activation::Identity);
        for i in 0..3 {
            id.weights[i * 3 + i] = 1.0;
        }
        let g = DnnExtractor::new(vec![id]).unwrap();
        assert_eq!(g.features(&[1.0, -2.0, 3.0]).unwrap().as_ref(), &[1.0, -2.0, 3.0]);
        assert!(matches!(g.features(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn residual_stack_gradients_match_finite_differences() {
        let mut rng = RngStream::new(31);
        let mut checked = 0;
        for _ in 0..20 {
            let blocks = vec![
                Block::Dense(Dense::init(3, 4, Activation::Relu, &mut rng)),
                Block::Residual(Dense::init(4, 4, Activation::Relu, &mut rng)),
                Block::Residual(Dense::init(4, 4, Activation::Relu, &mut rng)),
                Block::Dense(Dense::init(4, 2, Activation::Identity, &mut rng)),
            ];
            let mut stack = Stack::new(blocks).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let c = [rng.normal(), rng.normal()];
            let loss = |s: &Stack, x: &[f64]| {
                let o = s.output(x).unwrap();
                c[0] * o[0] + c[1] * o[1]
            };
            let (_, cache) = stack.forward(&x).unwrap();
            // finite differences are meaningless next to a relu kink
            if cache.pres[..3].iter().flatten().any(|p| p.abs() < 1e-3) {
                continue;
            }
            checked += 1;
            let mut grads = Grads::zeros_like(&stack);
            let dx = stack.backward(&cache, &c, &mut grads);
            let h = 1e-5;
            let ids: Vec<ParamId> = stack.param_ids().collect();
            for id in ids {
                let orig = stack.param(id);
                *stack.param_mut(id) = orig + h;
                let up = loss(&stack, &x);
                *stack.param_mut(id) = orig - h;
                let down = loss(&stack, &x);
                *stack.param_mut(id) = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - grads.get(id)).abs() <= 1e-6 * (1.0 + fd.abs()), "{id}: {fd} vs {}", grads.get(id));
            }
            for i in 0..3 {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (loss(&stack, &xp) - loss(&stack, &xm)) / (2.0 * h);
                assert!((fd - dx[i]).abs() <= 1e-6 * (1.0 + fd.abs()));
            }
        }
        assert!(checked >= 5, "only {checked} kink-free draws");
    }

    #[test]
    fn forward_matches_layer_by_layer_reevaluation() {
        let mut rng = RngStream::new(5);
        let g = DnnExtractor::random(&[5, 7, 3], &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let mut h = x.clone();
        for l in g.layers() {
            let mut next = vec![0.0; l.outputs];
            for o in 0..l.outputs {
                let mut acc = l.bias[o];
                for i in 0..l.inputs {
                    acc += l.weights[o * l.inputs + i] * h[i];
                }
                next[o] = if acc > 0.0 { acc } else { 0.0 };
            }
            h = next;
        }
        let out = g.features(&x).unwrap();
        for (a, b) in out.iter().zip(&h) {
            assert!((a - b).abs() < 1e-12);
        }
        // purity
        assert_eq!(g.features(&x).unwrap(), out);
    }

    #[test]
    fn chaining_and_addressing() {
        let bad = DnnExtractor::new(vec![Dense::zeros(3, 4, Activation::Relu), Dense::zeros(5, 2, Activation::Relu)]);
        assert!(matches!(bad, Err(Error::Dimension(_))));
        let (g, _) = tiny(1);
        let ids: Vec<ParamId> = g.param_ids().collect();
        assert_eq!(ids.len(), g.param_count());
        let set: std::collections::BTreeSet<ParamId> = ids.iter().cloned().collect();
        assert_eq!(set.len(), ids.len());
        // every id reads back the value it writes
        let mut h = g.clone();
        for (k, id) in ids.iter().enumerate() {
            h.set_param(*id, k as f64);
        }
        for (k, id) in ids.iter().enumerate() {
            assert_eq!(h.param(*id), k as f64);
        }
    }

    #[test]
    fn probability_gradients_sum_to_zero_and_dead_paths_vanish() {
        let (g, f) = tiny(2);
        let x = [0.3, -1.0, 0.7, 0.2];
        let rec = class_prob_gradients(&g, &f, &x).unwrap();
        for id in g.param_ids() {
            let s: f64 = (0..3).map(|y| rec.get(y, id)).sum();
            assert!(s.abs() < 1e-12, "{id}: {s}");
        }
        // dead hidden unit: force its pre-activation negative
        let mut dead = g.clone();
        let l0 = dead.layer(0).clone();
        for i in 0..l0.inputs {
            dead.set_param(ParamId { layer: 0, offset: i }, 0.0);
        }
        dead.set_param(ParamId { layer: 0, offset: l0.weights.len() }, -1.0);
        let rec = class_prob_gradients(&dead, &f, &x).unwrap();
        for i in 0..l0.inputs {
            for y in 0..3 {
                assert_eq!(rec.get(y, ParamId { layer: 0, offset: i }), 0.0);
            }
        }
    }

    #[test]
    fn surrogate_separable_and_degenerate() {
        let data = generate_dense_task(
            &DenseTaskConfig {
                input_dim: 6,
                n_samples: 300,
                n_classes: 2,
                margin: 8.0,
            },
            &mut RngStream::new(3),
        )
        .unwrap();
        // [I; -I] followed by ReLU keeps the input linearly recoverable
        let mut split = Dense::zeros(6, 12, Activation::Relu);
        for i in 0..6 {
            split.weights[i * 6 + i] = 1.0;
            split.weights[(i + 6) * 6 + i] = -1.0;
        }
        let g = DnnExtractor::new(vec![split]).unwrap();
        let cfg = TrainConfig::default();
        let f = train_surrogate(&g, &data, &cfg, &mut RngStream::new(5)).unwrap();
        let correct = data
            .samples
            .iter()
            .filter(|s| numeric::argmax(&f.predict_input(&g, &s.values).unwrap()) == s.label)
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.95, "{correct}");
        assert_eq!(f, train_surrogate(&g, &data, &cfg, &mut RngStream::new(5)).unwrap());

        let mut one = data.clone();
        one.samples.retain(|s| s.label == 1);
        let f1 = train_surrogate(&g, &one, &cfg, &mut RngStream::new(5)).unwrap();
        assert!(!f1.warnings.is_empty());
        assert_eq!(numeric::argmax(&f1.predict_input(&g, &one.samples[0].values).unwrap()), 1);

        let mut empty = data.clone();
        empty.samples.clear();
        assert!(matches!(train_surrogate(&g, &empty, &cfg, &mut RngStream::new(5)), Err(Error::Input(_))));
    }

    #[test]
    fn dnn1_round_trip_and_header() {
        let (g, _) = tiny(7);
        let bytes = encode_dnn1(&g, Precision::F64);
        assert!(bytes.starts_with(b"DNN1 layers=2 precision=f64\nlayer 0 in=4 out=6 act=relu\n"));
        let (back, p) = decode_dnn1(&bytes).unwrap();
        assert_eq!(p, Precision::F64);
        assert_eq!(back, g);
        let (low, _) = decode_dnn1(&encode_dnn1(&g, Precision::F32)).unwrap();
        for id in g.param_ids() {
            assert!((low.param(id) - g.param(id)).abs() <= Precision::F32.roundtrip_bound(g.param(id).abs()));
        }
        assert!(decode_dnn1(&bytes[..bytes.len() - 1]).is_err());
    }
}
