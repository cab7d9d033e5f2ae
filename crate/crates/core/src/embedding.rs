//! Word-embedding feature extractor.
//!
//! A sequence is vectorized into a sparse weight vector over the vocabulary
//! (weights sum to one), and its feature vector is `M * x` where column `i` of
//! the `d x |E|` matrix `M` is the embedding of word `i`.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassCentroids, SequenceDataset, TokenSequenceSample};
use crate::error::{Error, Result};
use crate::io::{self, Precision, Reader};
use crate::numeric::{Matrix, RngStream, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VectorizerConfig {
    /// Time decay; word `k` (1-based) gets weight `gamma^(1-k)`.
    pub gamma: f64,
}

impl Default for VectorizerConfig {
    fn default() -> Self {
        VectorizerConfig { gamma: 1.0 }
    }
}

impl VectorizerConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::param(format!("gamma must be in (0, 1], got {gamma}")));
        }
        Ok(VectorizerConfig { gamma })
    }
}

/// Sparse `(index, weight)` pairs sorted by index with unique indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseInputVector {
    pub dim: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SparseInputVector {
    pub fn one_hot(dim: usize, index: usize) -> Self {
        SparseInputVector {
            dim,
            entries: vec![(index, 1.0)],
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for &(i, w) in &self.entries {
            v[i] += w;
        }
        v
    }

    pub fn weight(&self, index: usize) -> f64 {
        self.entries
            .binary_search_by_key(&index, |e| e.0)
            .map_or(0.0, |k| self.entries[k].1)
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }
}

pub fn vectorize(s: &TokenSequenceSample, cfg: &VectorizerConfig) -> Result<SparseInputVector> {
    vectorize_tokens(&s.tokens, usize::MAX, cfg)
}

/// Vectorizes against an explicit vocabulary size (checked).
pub fn vectorize_tokens(tokens: &[usize], vocab: usize, cfg: &VectorizerConfig) -> Result<SparseInputVector> {
    if tokens.is_empty() {
        return Err(Error::input("cannot vectorize an empty sequence"));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::dim(format!("token {t} outside vocabulary of {vocab}")));
    }
    // gamma^(1-k) / sum_j gamma^(1-j) == gamma^(L-k) / sum_j gamma^(L-j): no overflow
    let len = tokens.len();
    let mut entries: Vec<(usize, f64)> = tokens
        .iter()
        .enumerate()
        .map(|(k, &t)| (t, cfg.gamma.powi((len - 1 - k) as i32)))
        .collect();
    let total: f64 = entries.iter().map(|e| e.1).sum();
    entries.sort_by_key(|e| e.0);
    let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
    for (t, w) in entries {
        match merged.last_mut() {
            Some(last) if last.0 == t => last.1 += w,
            _ => merged.push((t, w)),
        }
    }
    merged.iter_mut().for_each(|e| e.1 /= total);
    let dim = if vocab == usize::MAX {
        merged.last().map_or(0, |e| e.0 + 1)
    } else {
        vocab
    };
    Ok(SparseInputVector { dim, entries: merged })
}

/// The `d x |E|` mapping matrix, stored column-major (one word per column).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    vocab: usize,
    columns: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn from_columns(dim: usize, vocab: usize, columns: Vec<f64>) -> Result<Self> {
        if dim * vocab != columns.len() || dim == 0 || vocab == 0 {
            return Err(Error::dim(format!(
                "{dim}x{vocab} embedding needs {} values, got {}",
                dim * vocab,
                columns.len()
            )));
        }
        if columns.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding entry".into()));
        }
        Ok(EmbeddingMatrix { dim, vocab, columns })
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        let (d, v) = m.shape();
        let mut cols = Vec::with_capacity(d * v);
        for c in 0..v {
            cols.extend((0..d).map(|r| m.get(r, c)));
        }
        Self::from_columns(d, v, cols)
    }

    pub fn to_matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.dim, self.vocab);
        for c in 0..self.vocab {
            for (r, v) in self.column(c).iter().enumerate() {
                m.set(r, c, *v);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.columns[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.columns
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.columns
    }

    pub fn column_norms(&self) -> Vec<f64> {
        (0..self.vocab).map(|i| crate::numeric::l2(self.column(i))).collect()
    }

    /// `M * x` for a dense `|E|`-vector.
    pub fn mul_dense(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.vocab {
            return Err(Error::dim(format!("input of length {} for vocab {}", x.len(), self.vocab)));
        }
        let mut out = vec![0.0; self.dim];
        for (i, &w) in x.iter().enumerate() {
            if w != 0.0 {
                axpy(&mut out, w, self.column(i));
            }
        }
        Ok(Vector::from(out))
    }
}

#[inline]
pub(crate) fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    out.iter_mut().zip(x).for_each(|(o, v)| *o += a * v);
}

/// Feature vector `M * x`.
pub fn extract(m: &EmbeddingMatrix, x: &SparseInputVector) -> Result<Vector> {
    let mut out = vec![0.0; m.dim];
    for &(i, w) in &x.entries {
        if i >= m.vocab {
            return Err(Error::dim(format!("index {i} outside vocabulary of {}", m.vocab)));
        }
        axpy(&mut out, w, m.column(i));
    }
    Ok(Vector::from(out))
}

/// `M + E` as a new matrix; `M` is left untouched.
pub fn apply_perturbation(m: &EmbeddingMatrix, e: &Matrix) -> Result<EmbeddingMatrix> {
    if e.shape() != (m.dim, m.vocab) {
        return Err(Error::dim(format!(
            "perturbation shape {:?} does not match embedding {}x{}",
            e.shape(),
            m.dim,
            m.vocab
        )));
    }
    let mut out = m.clone();
    for c in 0..m.vocab {
        for (r, v) in out.column_mut(c).iter_mut().enumerate() {
            *v += e.get(r, c);
        }
    }
    Ok(out)
}

/// Centroids of the vectorized inputs of a sequence dataset (dense `|E|`).
pub fn sequence_centroids(r: &SequenceDataset, cfg: &VectorizerConfig) -> Result<ClassCentroids> {
    let mut sums = vec![vec![0.0; r.input_size]; r.n_classes];
    let mut counts = vec![0usize; r.n_classes];
    for s in &r.samples {
        let x = vectorize_tokens(&s.tokens, r.input_size, cfg)?;
        for &(i, w) in &x.entries {
            sums[s.label][i] += w;
        }
        counts[s.label] += 1;
    }
    ClassCentroids::finish(sums, counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTrainConfig {
    /// Symmetric co-occurrence window (tokens on each side).
    pub window: usize,
    /// Randomized range finder oversampling columns.
    pub oversample: usize,
    pub power_iterations: usize,
}

impl Default for EmbeddingTrainConfig {
    fn default() -> Self {
        EmbeddingTrainConfig {
            window: 5,
            oversample: 20,
            power_iterations: 6,
        }
    }
}

pub fn train_embedding(corpus: &SequenceDataset, d: usize, rng: &mut RngStream) -> Result<EmbeddingMatrix> {
    train_embedding_with(corpus, d, &EmbeddingTrainConfig::default(), rng)
}

/// Truncated eigen-factorization of the positive PMI co-occurrence matrix.
///
/// Column `i` is `sqrt(|lambda_k|) * u_k[i]` over the `d` largest-magnitude
/// eigenpairs; the matrix is then rescaled so the mean column norm of words
/// seen in the corpus is 1.
pub fn train_embedding_with(
    corpus: &SequenceDataset,
    d: usize,
    cfg: &EmbeddingTrainConfig,
    rng: &mut RngStream,
) -> Result<EmbeddingMatrix> {
    let vocab = corpus.input_size;
    if d < 2 {
        return Err(Error::param("embedding dimension must be >= 2"));
    }
    if d > vocab {
        return Err(Error::param(format!("embedding dimension {d} exceeds vocabulary {vocab}")));
    }
    if corpus.is_empty() {
        return Err(Error::input("empty corpus"));
    }
    let ppmi = ppmi_matrix(corpus, cfg.window)?;
    let (values, vectors) = top_eigenpairs(&ppmi, d, cfg, rng);

    let mut columns = vec![0.0; d * vocab];
    for i in 0..vocab {
        for k in 0..d {
            columns[i * d + k] = values[k].abs().sqrt() * vectors[(i, k)];
        }
    }
    let mut m = EmbeddingMatrix::from_columns(d, vocab, columns)?;
    let norms: Vec<f64> = m.column_norms().into_iter().filter(|&n| n > 0.0).collect();
    if !norms.is_empty() {
        let scale = norms.len() as f64 / norms.iter().sum::<f64>();
        m.columns.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(m)
}

fn ppmi_matrix(corpus: &SequenceDataset, window: usize) -> Result<DMatrix<f64>> {
    let vocab = corpus.input_size;
    let mut counts = DMatrix::<f64>::zeros(vocab, vocab);
    for s in &corpus.samples {
        for (k, &a) in s.tokens.iter().enumerate() {
            if a >= vocab {
                return Err(Error::dim(format!("token {a} outside vocabulary of {vocab}")));
            }
            for &b in s.tokens.iter().skip(k + 1).take(window) {
                counts[(a, b)] += 1.0;
                counts[(b, a)] += 1.0;
            }
        }
    }
    let row: Vec<f64> = (0..vocab).map(|i| counts.row(i).sum()).collect();
    let total: f64 = row.iter().sum();
    if total == 0.0 {
        return Err(Error::Degenerate("corpus has no co-occurrences".into()));
    }
    let mut ppmi = counts;
    for i in 0..vocab {
        for j in 0..vocab {
            let c = ppmi[(i, j)];
            ppmi[(i, j)] = if c > 0.0 {
                (c * total / (row[i] * row[j])).ln().max(0.0)
            } else {
                0.0
            };
        }
    }
    Ok(ppmi)
}

/// Largest-magnitude eigenpairs of a symmetric matrix, sorted by `|lambda|`
/// descending. Uses a randomized range finder with power iterations, or a
/// dense eigendecomposition when the sketch would not be smaller than the
/// matrix.
fn top_eigenpairs(
    a: &DMatrix<f64>,
    d: usize,
    cfg: &EmbeddingTrainConfig,
    rng: &mut RngStream,
) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let k = d + cfg.oversample;
    let (values, vectors) = if k >= n {
        let eig = SymmetricEigen::new(a.clone());
        (eig.eigenvalues.iter().cloned().collect::<Vec<_>>(), eig.eigenvectors)
    } else {
        let omega = DMatrix::from_fn(n, k, |_, _| rng.normal());
        let mut q = (a * omega).qr().q();
        for _ in 0..cfg.power_iterations {
            q = (a * q).qr().q();
        }
        let small = q.transpose() * a * &q;
        let small = (&small + small.transpose()) * 0.5;
        let eig = SymmetricEigen::new(small);
        (eig.eigenvalues.iter().cloned().collect::<Vec<_>>(), q * eig.eigenvectors)
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].abs().total_cmp(&values[i].abs()).then(i.cmp(&j)));
    let mut out = DMatrix::zeros(n, d);
    let mut vals = Vec::with_capacity(d);
    for (c, &i) in order.iter().take(d).enumerate() {
        let mut col = vectors.column(i).into_owned();
        // deterministic sign: largest-magnitude entry positive
        let pivot = col.iter().cloned().fold(0.0_f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if pivot < 0.0 {
            col *= -1.0;
        }
        out.set_column(c, &col);
        vals.push(values[i]);
    }
    (vals, out)
}

/// `EMB1` container: a text header line then column-major little-endian floats.
pub fn encode_emb1(m: &EmbeddingMatrix, precision: Precision) -> Vec<u8> {
    let mut out = format!(
        "EMB1 d={} vocab={} precision={}\n",
        m.dim,
        m.vocab,
        precision.as_str()
    )
    .into_bytes();
    io::put_floats(&mut out, m.columns.iter().cloned(), precision);
    out
}

pub fn decode_emb1(bytes: &[u8]) -> Result<(EmbeddingMatrix, Precision)> {
    let mut r = Reader::new(bytes);
    let header = r.line()?;
    if header.split_whitespace().next() != Some("EMB1") {
        return Err(Error::format("not an EMB1 file"));
    }
    let d = io::header_usize(header, "d")?;
    let vocab = io::header_usize(header, "vocab")?;
    let precision = Precision::parse(io::header_field(header, "precision").unwrap_or("f64"))?;
    let values = r.floats(d * vocab, precision)?;
    r.finish()?;
    Ok((EmbeddingMatrix::from_columns(d, vocab, values)?, precision))
}

pub fn save_emb1(m: &EmbeddingMatrix, path: &Path, precision: Precision) -> Result<()> {
    io::write_atomic(path, &encode_emb1(m, precision))
}

pub fn load_emb1(path: &Path) -> Result<EmbeddingMatrix> {
    Ok(decode_emb1(&std::fs::read(path)?)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_sequence_task, SequenceTaskConfig};
    use proptest::prelude::*;

    fn seq(tokens: Vec<usize>) -> TokenSequenceSample {
        TokenSequenceSample { id: 0, tokens, label: 0 }
    }

    fn random_embedding(d: usize, vocab: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = RngStream::new(seed);
        EmbeddingMatrix::from_columns(d, vocab, (0..d * vocab).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn vectorize_weight_rules() {
        let x = vectorize(&seq(vec![3, 3, 5]), &VectorizerConfig::default()).unwrap();
        assert_eq!(x.entries.len(), 2);
        assert!((x.weight(3) - 2.0 / 3.0).abs() < 1e-15);
        assert!((x.weight(5) - 1.0 / 3.0).abs() < 1e-15);

        let y = vectorize(&seq(vec![0, 1]), &VectorizerConfig::new(0.5).unwrap()).unwrap();
        assert!((y.weight(0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.weight(1) - 2.0 / 3.0).abs() < 1e-15);

        assert!(vectorize(&seq(vec![]), &VectorizerConfig::default()).is_err());
        assert!(VectorizerConfig::new(0.0).is_err());
        assert!(VectorizerConfig::new(1.5).is_err());
        assert!(vectorize_tokens(&[1, 9], 5, &VectorizerConfig::default()).is_err());
    }

    #[test]
    fn vectorize_matches_positional_accumulation() {
        let mut rng = RngStream::new(12);
        let cfg = VectorizerConfig::new(0.97).unwrap();
        let tokens: Vec<usize> = (0..100).map(|_| rng.below(30)).collect();
        let x = vectorize_tokens(&tokens, 30, &cfg).unwrap();
        // brute force: w_k = gamma^(1-k), k = 1..L
        let w: Vec<f64> = (1..=tokens.len()).map(|k| cfg.gamma.powf(1.0 - k as f64)).collect();
        let total: f64 = w.iter().sum();
        let mut dense = vec![0.0; 30];
        for (k, &t) in tokens.iter().enumerate() {
            dense[t] += w[k] / total;
        }
        for (i, v) in dense.iter().enumerate() {
            assert!((x.weight(i) - v).abs() < 1e-12);
        }
        // very long sequences stay finite
        let long: Vec<usize> = (0..5000).map(|i| i % 7).collect();
        let lx = vectorize_tokens(&long, 7, &VectorizerConfig::new(0.5).unwrap()).unwrap();
        assert!(lx.entries.iter().all(|e| e.1.is_finite()));
        assert!((lx.entries.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn extract_selects_columns_and_checks_range() {
        let m = random_embedding(4, 6, 1);
        let f = extract(&m, &SparseInputVector::one_hot(6, 2)).unwrap();
        assert_eq!(f.as_ref(), m.column(2));
        assert!(extract(&m, &SparseInputVector::one_hot(7, 6)).is_err());
    }

    #[test]
    fn perturbation_is_additive_and_local() {
        let m = random_embedding(3, 5, 2);
        let zero = Matrix::zeros(3, 5);
        assert_eq!(apply_perturbation(&m, &zero).unwrap(), m);
        let mut e = Matrix::zeros(3, 5);
        e.set(1, 4, 0.5);
        let mh = apply_perturbation(&m, &e).unwrap();
        for c in 0..4 {
            assert_eq!(mh.column(c), m.column(c));
        }
        assert_ne!(mh.column(4), m.column(4));
        assert!(apply_perturbation(&m, &Matrix::zeros(5, 3)).is_err());

        let mut rng = RngStream::new(3);
        let e = Matrix::from_row_major(3, 5, (0..15).map(|_| rng.normal()).collect()).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.uniform()).collect();
        let mh = apply_perturbation(&m, &e).unwrap();
        let diff: Vec<f64> = mh
            .mul_dense(&x)
            .unwrap()
            .iter()
            .zip(m.mul_dense(&x).unwrap().iter())
            .map(|(a, b)| a - b)
            .collect();
        let ex = e.mul_vec(&x).unwrap();
        for (a, b) in diff.iter().zip(ex.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn emb1_round_trip() {
        let m = random_embedding(5, 7, 4);
        let (back, p) = decode_emb1(&encode_emb1(&m, Precision::F64)).unwrap();
        assert_eq!(p, Precision::F64);
        assert_eq!(back, m);
        let (low, _) = decode_emb1(&encode_emb1(&m, Precision::F32)).unwrap();
        let max_abs = crate::numeric::linf(m.values());
        let bound = Precision::F32.roundtrip_bound(max_abs);
        for (a, b) in low.values().iter().zip(m.values()) {
            assert!((a - b).abs() <= bound);
        }
        let bytes = encode_emb1(&m, Precision::F64);
        assert!(decode_emb1(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_emb1(b"EMB2 d=1 vocab=1\n").is_err());
        assert!(bytes.starts_with(b"EMB1 d=5 vocab=7 precision=f64\n"));
        assert_eq!(bytes.len(), 31 + 5 * 7 * 8);
    }

    #[test]
    fn training_is_deterministic_and_validates() {
        let cfg = SequenceTaskConfig {
            vocab_size: 40,
            n_samples: 200,
            avg_length: 20,
            ..Default::default()
        };
        let corpus = generate_sequence_task(&cfg, &mut RngStream::new(1)).unwrap();
        let a = train_embedding(&corpus, 8, &mut RngStream::new(2)).unwrap();
        let b = train_embedding(&corpus, 8, &mut RngStream::new(2)).unwrap();
        assert_eq!(a, b);
        let square = train_embedding(&corpus, 40, &mut RngStream::new(2)).unwrap();
        assert!(square.values().iter().all(|v| v.is_finite()));
        assert!(matches!(
            train_embedding(&corpus, 41, &mut RngStream::new(2)),
            Err(Error::Parameter(_))
        ));
        assert!(train_embedding(&corpus, 1, &mut RngStream::new(2)).is_err());
    }

    proptest! {
        #[test]
        fn extract_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let m = random_embedding(4, 9, seed);
            let mut rng = RngStream::new(seed + 1);
            let x: Vec<f64> = (0..9).map(|_| rng.uniform()).collect();
            let y: Vec<f64> = (0..9).map(|_| rng.uniform()).collect();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let lhs = m.mul_dense(&combo).unwrap();
            let fx = m.mul_dense(&x).unwrap();
            let fy = m.mul_dense(&y).unwrap();
            for k in 0..4 {
                prop_assert!((lhs[k] - (a * fx[k] + b * fy[k])).abs() < 1e-10);
            }
        }

        #[test]
        fn vectorized_weights_sum_to_one(tokens in prop::collection::vec(0usize..50, 1..200), gamma in 0.05f64..=1.0) {
            let x = vectorize_tokens(&tokens, 50, &VectorizerConfig::new(gamma).unwrap()).unwrap();
            prop_assert!((x.entries.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(x.entries.iter().all(|e| e.1 >= 0.0));
        }
    }
}
