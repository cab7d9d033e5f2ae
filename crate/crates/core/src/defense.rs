//! Countermeasures: noise injection, feature-space vetting and parameter
//! diff auditing.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::Precision;
use crate::mlc::Mlc;
use crate::numeric::{self, RngStream, Vector};

/// Adds i.i.d. `U[-rho, rho]` noise to every parameter of `mlc`.
pub fn noise_inject<M: Mlc>(mlc: &M, rho: f64, rng: &mut RngStream) -> Result<M> {
    let params = mlc.flat_parameters();
    let noise = numeric::uniform_noise(1, params.len(), rho, rng)?;
    let noisy: Vec<f64> = params.iter().zip(noise.as_slice()).map(|(p, n)| p + n).collect();
    mlc.with_parameters(&noisy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VetReport {
    pub k: usize,
    pub threshold: f64,
    pub scores: Vec<f64>,
    pub flagged: Vec<usize>,
}

impl VetReport {
    /// Zero-based rank of probe `i` by descending score (ties to lower index).
    pub fn rank(&self, i: usize) -> usize {
        self.scores
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > self.scores[i] || (s == self.scores[i] && j < i))
            .count()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format(e.to_string()))
    }
}

/// k-NN group discrepancy scores.
///
/// For each probe, its `k` nearest other probes in input space form a
/// group, including any probe tied with the `k`-th distance. The score is
/// the distance from the probe's feature vector to the group's mean
/// feature, divided by the group's mean distance to that mean.
pub fn vet_scores(coordinates: &[Vec<f64>], features: &[Vector], k: usize) -> Result<Vec<f64>> {
    let n = coordinates.len();
    if features.len() != n {
        return Err(Error::dim("one feature vector per probe is required"));
    }
    if k == 0 || k >= n {
        return Err(Error::param(format!("k must be in 1..{n}, got {k}")));
    }
    let dim = features[0].len();
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (numeric::l2_distance(&coordinates[i], &coordinates[j]), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        // every probe tied with the k-th distance joins, so order never matters
        let cutoff = others[k - 1].0;
        let group: Vec<(f64, usize)> = others.iter().cloned().take_while(|o| o.0 <= cutoff).collect();
        let k = group.len();
        let mut mean = vec![0.0; dim];
        for &(_, j) in &group {
            crate::embedding::axpy(&mut mean, 1.0 / k as f64, &features[j]);
        }
        let spread = group.iter().map(|&(_, j)| numeric::l2_distance(&features[j], &mean)).sum::<f64>() / k as f64;
        let dist = numeric::l2_distance(&features[i], &mean);
        // distances below rounding level of the features count as zero
        let floor = 1e-12 * (1.0 + numeric::l2(&features[i]));
        scores.push(if dist <= floor { 0.0 } else { dist / spread.max(floor) });
    }
    Ok(scores)
}

/// Scores every probe against its input-space neighbours under `mlc`.
pub fn vet_anomaly<M: Mlc>(mlc: &M, probes: &[&M::Input], k: usize, threshold: f64) -> Result<VetReport> {
    if k >= probes.len() {
        return Err(Error::param(format!("k = {k} needs more than {k} probes, got {}", probes.len())));
    }
    let coords: Vec<Vec<f64>> = probes.iter().map(|p| M::coordinates(p)).collect();
    let feats = probes.iter().map(|p| mlc.features(p)).collect::<Result<Vec<_>>>()?;
    let scores = vet_scores(&coords, &feats, k)?;
    let flagged = scores.iter().enumerate().filter(|(_, &s)| s > threshold).map(|(i, _)| i).collect();
    Ok(VetReport {
        k,
        threshold,
        scores,
        flagged,
    })
}

/// Decade bins of `|diff|`: `(0, 1e-12]`, `(1e-12, 1e-11]`, ..., `(1e-1, 1]`, `(1, inf)`.
pub const HISTOGRAM_EDGES: [f64; 14] = [
    1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, f64::INFINITY,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiff {
    pub name: String,
    pub params: usize,
    pub changed: usize,
    pub linf: f64,
    /// Counts of changed parameters per [`HISTOGRAM_EDGES`] bin.
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub linf: f64,
    pub frob: f64,
    pub changed: usize,
    pub total: usize,
    pub tolerance: f64,
    pub layers: Vec<LayerDiff>,
    /// Every difference fits within the f32 round-trip bound of `a`.
    pub precision_explainable: bool,
}

impl AuditReport {
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("layer,binLow,binHigh,count\n");
        for l in &self.layers {
            for (i, &c) in l.histogram.iter().enumerate() {
                let lo = if i == 0 { 0.0 } else { HISTOGRAM_EDGES[i - 1] };
                let _ = writeln!(s, "{},{},{},{}", l.name, lo, HISTOGRAM_EDGES[i], c);
            }
        }
        s
    }
}

/// The f32 serialization band for a model: differences within it are
/// explainable by a precision round trip.
pub fn precision_band<M: Mlc>(a: &M) -> f64 {
    let max_abs = a.flat_parameters().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Precision::F32.roundtrip_bound(max_abs)
}

/// Compares two same-shape models; a parameter counts as changed when
/// `|a - b| > tolerance`.
pub fn diff_audit<M: Mlc>(a: &M, b: &M, tolerance: f64) -> Result<AuditReport> {
    if a.shape() != b.shape() {
        return Err(Error::dim("models have different architectures"));
    }
    let band = precision_band(a);
    let mut layers = Vec::new();
    let (mut linf, mut sq, mut changed, mut total) = (0.0f64, 0.0, 0, 0);
    let mut explainable = true;
    for ((name, pa), (_, pb)) in a.parameter_groups().into_iter().zip(b.parameter_groups()) {
        let mut l = LayerDiff {
            name,
            params: pa.len(),
            changed: 0,
            linf: 0.0,
            histogram: vec![0; HISTOGRAM_EDGES.len()],
        };
        for (x, y) in pa.iter().zip(&pb) {
            let d = (x - y).abs();
            sq += d * d;
            l.linf = l.linf.max(d);
            if d > band {
                explainable = false;
            }
            if d > tolerance {
                l.changed += 1;
            }
            if d > 0.0 {
                let bin = HISTOGRAM_EDGES.iter().position(|&e| d <= e).unwrap_or(HISTOGRAM_EDGES.len() - 1);
                l.histogram[bin] += 1;
            }
        }
        linf = linf.max(l.linf);
        changed += l.changed;
        total += l.params;
        layers.push(l);
    }
    Ok(AuditReport {
        linf,
        frob: sq.sqrt(),
        changed,
        total,
        tolerance,
        layers,
        precision_explainable: explainable,
    })
}

/// Hex SHA-256 of a model file's bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{decode_emb1, encode_emb1, EmbeddingMatrix, SparseInputVector};
    use crate::nn::DnnExtractor;

    fn emb(seed: u64) -> EmbeddingMatrix {
        let mut rng = RngStream::new(seed);
        EmbeddingMatrix::from_columns(4, 12, (0..48).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn noise_is_bounded_and_zero_is_identity() {
        let m = emb(1);
        assert_eq!(noise_inject(&m, 0.0, &mut RngStream::new(2)).unwrap(), m);
        let noisy = noise_inject(&m, 0.05, &mut RngStream::new(2)).unwrap();
        assert!(diff_audit(&m, &noisy, 0.0).unwrap().linf <= 0.05);
        assert!(noise_inject(&m, -1.0, &mut RngStream::new(2)).is_err());
        let g = DnnExtractor::random(&[3, 5, 2], &mut RngStream::new(3)).unwrap();
        let ng = noise_inject(&g, 0.01, &mut RngStream::new(4)).unwrap();
        let a = diff_audit(&g, &ng, 0.0).unwrap();
        assert!(a.linf <= 0.01 && a.changed == a.total);
    }

    #[test]
    fn vetting_degenerate_and_permutation_invariant() {
        let m = emb(5);
        let same = SparseInputVector::one_hot(12, 3);
        let probes = vec![&same; 6];
        let r = vet_anomaly(&m, &probes, 2, 1.0).unwrap();
        assert!(r.scores.iter().all(|&s| s == 0.0));
        assert!(vet_anomaly(&m, &probes, 6, 1.0).is_err());

        let mut rng = RngStream::new(6);
        let xs: Vec<SparseInputVector> = (0..15)
            .map(|_| {
                let toks: Vec<usize> = (0..5).map(|_| rng.below(12)).collect();
                crate::embedding::vectorize_tokens(&toks, 12, &Default::default()).unwrap()
            })
            .collect();
        let refs: Vec<&SparseInputVector> = xs.iter().collect();
        let a = vet_anomaly(&m, &refs, 3, 2.0).unwrap();
        let rev: Vec<&SparseInputVector> = xs.iter().rev().collect();
        let b = vet_anomaly(&m, &rev, 3, 2.0).unwrap();
        for i in 0..15 {
            assert!((a.scores[i] - b.scores[14 - i]).abs() < 1e-12);
        }
        assert!(a.scores.iter().all(|&s| s >= 0.0));
        let flagged: Vec<usize> = (0..15).filter(|&i| a.scores[i] > 2.0).collect();
        assert_eq!(a.flagged, flagged);
    }

    #[test]
    fn audit_identity_precision_and_shapes() {
        let m = emb(7);
        let same = diff_audit(&m, &m, 0.0).unwrap();
        assert_eq!((same.linf, same.frob, same.changed), (0.0, 0.0, 0));
        assert!(same.precision_explainable);

        let (low, _) = decode_emb1(&encode_emb1(&m, Precision::F32)).unwrap();
        let a = diff_audit(&m, &low, 0.0).unwrap();
        assert!(a.linf <= precision_band(&m));
        assert!(a.precision_explainable);
        assert_eq!(diff_audit(&m, &low, precision_band(&m)).unwrap().changed, 0);

        let other = EmbeddingMatrix::from_columns(3, 16, vec![0.0; 48]).unwrap();
        assert!(matches!(diff_audit(&m, &other, 0.0), Err(Error::Dimension(_))));

        let csv = a.histogram_csv();
        assert!(csv.starts_with("layer,binLow,binHigh,count\n"));
        assert_eq!(csv.lines().count(), 1 + HISTOGRAM_EDGES.len());
    }

    #[test]
    fn hash_is_sha256() {
        assert_eq!(
            content_hash(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
