//! Logic-bomb crafting against a word-embedding extractor.
//!
//! The attack perturbs a few columns of `M` so that each bomb input `x*`
//! moves toward the feature-space centroid of its target class `y*` while
//! every reference input moves by at most `delta`:
//!
//! ```text
//! min_E  sum_t ||M^(x* - x_y*)|| - min_{y != y*} ||M^(x* - x_y)|| + lambda ||E||_F
//! s.t.   ||E x|| <= delta  for all x in R,     M^ = M + E
//! ```
//!
//! The constraints are folded into a ramped quadratic penalty and the
//! problem is solved by proximal gradient with backtracking; a final uniform
//! down-scaling makes the result feasible.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassCentroids, SequenceDataset};
use crate::embedding::{self, EmbeddingMatrix, SparseInputVector, VectorizerConfig};
use crate::error::{Error, Result};
use crate::io::{self, Precision};
use crate::numeric::{self, Matrix, Vector};

/// One bomb target: the trigger input and the class it should land in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target<X> {
    pub input: X,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogicBomb<X> {
    pub targets: Vec<Target<X>>,
}

impl<X> LogicBomb<X> {
    pub fn new(targets: Vec<Target<X>>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::param("a logic bomb needs at least one target"));
        }
        Ok(LogicBomb { targets })
    }

    pub fn single(input: X, class: usize) -> Self {
        LogicBomb {
            targets: vec![Target { input, class }],
        }
    }
}

/// The adversary's vectorized reference set and its class centroids.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    pub inputs: Vec<SparseInputVector>,
    pub labels: Vec<usize>,
    pub centroids: ClassCentroids,
}

impl ReferenceSet {
    pub fn from_sequences(r: &SequenceDataset, cfg: &VectorizerConfig) -> Result<Self> {
        let inputs = r
            .samples
            .iter()
            .map(|s| embedding::vectorize_tokens(&s.tokens, r.input_size, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(ReferenceSet {
            inputs,
            labels: r.labels(),
            centroids: embedding::sequence_centroids(r, cfg)?,
        })
    }
}

/// `mu(x, y)` for every class: softmax of negative feature-space distances
/// from `M x` to the projected centroids `M x_y`.
pub fn membership_all(m: &EmbeddingMatrix, x: &SparseInputVector, c: &ClassCentroids) -> Result<Vector> {
    let v = embedding::extract(m, x)?;
    let neg: Vec<f64> = c
        .centroids
        .iter()
        .map(|cy| Ok(-numeric::l2_distance(&v, &m.mul_dense(cy)?)))
        .collect::<Result<_>>()?;
    numeric::softmax(&neg)
}

pub fn membership(m: &EmbeddingMatrix, x: &SparseInputVector, y: usize, c: &ClassCentroids) -> Result<f64> {
    if y >= c.n_classes() {
        return Err(Error::MissingClass(y));
    }
    Ok(membership_all(m, x, c)?[y])
}

/// The `n` columns of `M` with the smallest l2 norm, ties to the lowest index.
pub fn select_columns(m: &EmbeddingMatrix, n: usize) -> Result<Vec<usize>> {
    select_columns_among(m, n, 0..m.vocab())
}

/// Lowest-norm selection restricted to `candidates`.
pub fn select_columns_among(
    m: &EmbeddingMatrix,
    n: usize,
    candidates: impl IntoIterator<Item = usize>,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::param("column budget n must be at least 1"));
    }
    if n > m.vocab() {
        return Err(Error::param(format!("column budget {n} exceeds vocabulary {}", m.vocab())));
    }
    let norms = m.column_norms();
    let mut cand: Vec<usize> = candidates.into_iter().collect();
    cand.sort_unstable();
    cand.dedup();
    if let Some(&bad) = cand.iter().find(|&&i| i >= m.vocab()) {
        return Err(Error::dim(format!("candidate column {bad} outside vocabulary")));
    }
    cand.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    cand.truncate(n);
    Ok(cand)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingAttackConfig {
    pub lambda: f64,
    pub delta: f64,
    pub n: usize,
    /// Initial proximal step; adapted by backtracking.
    pub step: f64,
    pub max_iterations: usize,
    pub penalty_initial: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    /// Iterations between penalty increases.
    pub penalty_interval: usize,
    /// Relative objective change counted as a plateau once the penalty is stable.
    pub plateau_tolerance: f64,
    pub plateau_patience: usize,
    /// Pick the lowest-norm columns among the words of the bomb inputs
    /// rather than over the whole vocabulary.
    pub restrict_to_targets: bool,
}

impl Default for EmbeddingAttackConfig {
    fn default() -> Self {
        EmbeddingAttackConfig {
            lambda: 0.12,
            delta: 0.3,
            n: 20,
            step: 1.0,
            max_iterations: 400,
            penalty_initial: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e5,
            penalty_interval: 40,
            plateau_tolerance: 1e-10,
            plateau_patience: 10,
            restrict_to_targets: true,
        }
    }
}

impl EmbeddingAttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::param(format!("delta must be > 0, got {}", self.delta)));
        }
        if self.n == 0 {
            return Err(Error::param("column budget n must be at least 1"));
        }
        if !(self.step > 0.0) || self.penalty_initial <= 0.0 || self.penalty_growth < 1.0 {
            return Err(Error::param("solver step and penalty schedule must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub max_constraint: f64,
    pub frob: f64,
    pub linf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    /// `max ||E x||` over the reference inputs.
    pub max_constraint: f64,
    pub frob: f64,
    pub linf: f64,
    pub violations: usize,
}

/// Recomputes constraint residuals of `e` on `inputs` from scratch.
pub fn feasibility(e: &Matrix, inputs: &[SparseInputVector], delta: f64) -> Result<Feasibility> {
    let em = EmbeddingMatrix::from_matrix(e)?;
    let mut max_constraint = 0.0f64;
    let mut violations = 0;
    for x in inputs {
        let s = numeric::l2(&embedding::extract(&em, x)?);
        max_constraint = max_constraint.max(s);
        if s > delta * (1.0 + 1e-6) {
            violations += 1;
        }
    }
    Ok(Feasibility {
        max_constraint,
        frob: numeric::l2(e.as_slice()),
        linf: numeric::linf(e.as_slice()),
        violations,
    })
}

/// Per-target data of the reduced problem over the selected columns.
///
/// For every class `y`, `offsets[y] = M (x* - x_y)` and
/// `coefficients[y] = (x* - x_y)` restricted to the selected columns, so the
/// perturbed feature difference is `offsets[y] + E_S coefficients[y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTerm {
    pub class: usize,
    pub offsets: Vec<Vec<f64>>,
    pub coefficients: Vec<Vec<f64>>,
}

/// The crafting problem restricted to `n` perturbed columns of dimension
/// `dim`; `E_S` is stored column-major (`dim` values per column).
#[derive(Debug, Clone)]
pub struct PerturbationProblem {
    pub dim: usize,
    pub n: usize,
    pub terms: Vec<TargetTerm>,
    /// Each constrained input restricted to the selected columns, as
    /// sparse `(local column, weight)` pairs.
    pub constraints: Vec<Vec<(usize, f64)>>,
    pub lambda: f64,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub e: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

impl PerturbationProblem {
    fn apply(&self, e: &[f64], coeffs: impl IntoIterator<Item = (usize, f64)>, out: &mut [f64]) {
        for (j, w) in coeffs {
            if w != 0.0 {
                embedding::axpy(out, w, &e[j * self.dim..(j + 1) * self.dim]);
            }
        }
    }

    fn feature_gap(&self, e: &[f64], term: &TargetTerm, y: usize) -> Vec<f64> {
        let mut u = term.offsets[y].clone();
        self.apply(e, term.coefficients[y].iter().cloned().enumerate(), &mut u);
        u
    }

    /// Index of the nearest competing class, ties to the lowest index.
    fn competitor(&self, norms: &[f64], target: usize) -> usize {
        (0..norms.len())
            .filter(|&y| y != target)
            .fold(None, |best: Option<usize>, y| match best {
                Some(b) if norms[b] <= norms[y] => Some(b),
                _ => Some(y),
            })
            .expect("at least two classes")
    }

    /// Distance terms plus penalty; gradient accumulated into `grad` if given.
    fn smooth(&self, e: &[f64], mu: f64, mut grad: Option<&mut [f64]>) -> f64 {
        let d = self.dim;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut value = 0.0;
        for term in &self.terms {
            let gaps: Vec<Vec<f64>> = (0..term.offsets.len()).map(|y| self.feature_gap(e, term, y)).collect();
            let norms: Vec<f64> = gaps.iter().map(|u| numeric::l2(u)).collect();
            let c = self.competitor(&norms, term.class);
            value += norms[term.class] - norms[c];
            if let Some(g) = grad.as_deref_mut() {
                for (y, sign) in [(term.class, 1.0), (c, -1.0)] {
                    if norms[y] == 0.0 {
                        continue;
                    }
                    for (j, &b) in term.coefficients[y].iter().enumerate() {
                        if b != 0.0 {
                            embedding::axpy(&mut g[j * d..(j + 1) * d], sign * b / norms[y], &gaps[y]);
                        }
                    }
                }
            }
        }
        let mut v = vec![0.0; d];
        for x in &self.constraints {
            v.iter_mut().for_each(|a| *a = 0.0);
            self.apply(e, x.iter().cloned(), &mut v);
            let s = numeric::l2(&v);
            if s > self.delta {
                value += mu * (s - self.delta).powi(2);
                if let Some(g) = grad.as_deref_mut() {
                    let k = 2.0 * mu * (s - self.delta) / s;
                    for &(j, w) in x {
                        embedding::axpy(&mut g[j * d..(j + 1) * d], k * w, &v);
                    }
                }
            }
        }
        value
    }

    pub fn max_constraint(&self, e: &[f64]) -> f64 {
        let mut v = vec![0.0; self.dim];
        self.constraints
            .iter()
            .map(|x| {
                v.iter_mut().for_each(|a| *a = 0.0);
                self.apply(e, x.iter().cloned(), &mut v);
                numeric::l2(&v)
            })
            .fold(0.0, f64::max)
    }

    /// Unpenalized objective: distance terms plus `lambda ||E||_F`.
    pub fn objective(&self, e: &[f64]) -> f64 {
        self.smooth_unpenalized(e) + self.lambda * numeric::l2(e)
    }

    fn smooth_unpenalized(&self, e: &[f64]) -> f64 {
        let mut plain = self.clone();
        plain.constraints.clear();
        plain.smooth(e, 0.0, None)
    }

    fn row(&self, iteration: usize, objective: f64, e: &[f64]) -> TraceRow {
        TraceRow {
            iteration,
            objective,
            max_constraint: self.max_constraint(e),
            frob: numeric::l2(e),
            linf: numeric::linf(e),
        }
    }

    pub fn solve(&self, cfg: &EmbeddingAttackConfig) -> Result<Solution> {
        if self.terms.iter().any(|t| t.offsets.len() < 2) {
            return Err(Error::input("every target needs at least two classes"));
        }
        let size = self.dim * self.n;
        let mut e = vec![0.0; size];
        let mut grad = vec![0.0; size];
        let mut mu = cfg.penalty_initial;
        let mut t = cfg.step;
        let composite = |p: &Self, e: &[f64], mu: f64| p.smooth(e, mu, None) + p.lambda * numeric::l2(e);
        let initial = composite(self, &e, mu);
        let mut trace = vec![self.row(0, initial, &e)];
        let mut current = initial;
        let mut plateau = 0;
        let mut iterations = 0;
        for it in 1..=cfg.max_iterations {
            iterations = it;
            let f0 = self.smooth(&e, mu, Some(&mut grad));
            let mut accepted = None;
            while t > 1e-14 {
                let mut cand: Vec<f64> = e.iter().zip(&grad).map(|(a, g)| a - t * g).collect();
                let norm = numeric::l2(&cand);
                let shrink = if norm > 0.0 { (1.0 - t * self.lambda / norm).max(0.0) } else { 0.0 };
                cand.iter_mut().for_each(|v| *v *= shrink);
                let f1 = self.smooth(&cand, mu, None);
                let (lin, quad) = cand.iter().zip(&e).zip(&grad).fold((0.0, 0.0), |(l, q), ((c, a), g)| {
                    let dlt = c - a;
                    (l + g * dlt, q + dlt * dlt)
                });
                if f1 <= f0 + lin + quad / (2.0 * t) + 1e-15 * f0.abs() {
                    accepted = Some((cand, f1));
                    break;
                }
                t *= 0.5;
            }
            let before = current;
            if let Some((cand, f1)) = accepted {
                let next = f1 + self.lambda * numeric::l2(&cand);
                if next <= current {
                    e = cand;
                    current = next;
                }
                t *= 1.5;
            } else {
                t = cfg.step;
            }
            trace.push(self.row(it, current, &e));
            let stable = mu >= cfg.penalty_max;
            if stable && (before - current).abs() <= cfg.plateau_tolerance * current.abs().max(1.0) {
                plateau += 1;
                if plateau >= cfg.plateau_patience {
                    break;
                }
            } else {
                plateau = 0;
            }
            if it % cfg.penalty_interval.max(1) == 0 && !stable {
                mu = (mu * cfg.penalty_growth).min(cfg.penalty_max);
                current = composite(self, &e, mu);
                plateau = 0;
            }
        }
        let mut warnings = Vec::new();
        if current >= initial {
            warnings.push(format!(
                "objective did not decrease in {iterations} iterations (stays at {current})"
            ));
        }
        // uniform down-scaling onto the feasible set
        let worst = self.max_constraint(&e);
        if worst > self.delta {
            let s = self.delta / worst;
            e.iter_mut().for_each(|v| *v *= s);
            while self.max_constraint(&e) > self.delta {
                e.iter_mut().for_each(|v| *v *= 1.0 - 1e-12);
            }
            let obj = self.objective(&e);
            trace.push(self.row(iterations + 1, obj, &e));
        }
        Ok(Solution {
            e,
            trace,
            iterations,
            warnings,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CraftResult {
    /// Full `d x |E|` perturbation, zero outside `columns`.
    pub e: Matrix,
    pub m_hat: EmbeddingMatrix,
    pub columns: Vec<usize>,
    pub trace: Vec<TraceRow>,
    pub feasibility: Feasibility,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

/// Builds the reduced problem for `bomb` on columns `cols`.
pub fn build_problem(
    m: &EmbeddingMatrix,
    bomb: &LogicBomb<SparseInputVector>,
    r: &ReferenceSet,
    cols: &[usize],
    cfg: &EmbeddingAttackConfig,
) -> Result<PerturbationProblem> {
    let k = r.centroids.n_classes();
    if k < 2 {
        return Err(Error::input("the reference set must contain at least two classes"));
    }
    let mut local = vec![usize::MAX; m.vocab()];
    for (j, &c) in cols.iter().enumerate() {
        local[c] = j;
    }
    let mut terms = Vec::with_capacity(bomb.targets.len());
    for t in &bomb.targets {
        if t.class >= k {
            return Err(Error::MissingClass(t.class));
        }
        let xs = t.input.to_dense();
        if xs.len() != m.vocab() {
            return Err(Error::dim(format!("bomb input of dim {} for vocab {}", xs.len(), m.vocab())));
        }
        let mut offsets = Vec::with_capacity(k);
        let mut coefficients = Vec::with_capacity(k);
        for y in 0..k {
            let diff: Vec<f64> = xs.iter().zip(r.centroids.get(y)?.iter()).map(|(a, b)| a - b).collect();
            offsets.push(m.mul_dense(&diff)?.into_inner());
            coefficients.push(cols.iter().map(|&c| diff[c]).collect());
        }
        terms.push(TargetTerm {
            class: t.class,
            offsets,
            coefficients,
        });
    }
    let constraints = r
        .inputs
        .iter()
        .map(|x| {
            x.entries
                .iter()
                .filter(|(i, _)| *i < local.len() && local[*i] != usize::MAX)
                .map(|&(i, w)| (local[i], w))
                .collect::<Vec<_>>()
        })
        .filter(|c| !c.is_empty())
        .collect();
    Ok(PerturbationProblem {
        dim: m.dim(),
        n: cols.len(),
        terms,
        constraints,
        lambda: cfg.lambda,
        delta: cfg.delta,
    })
}

/// Crafts a perturbation `E` embedding `bomb` into `m`.
pub fn craft_embedding_bomb(
    m: &EmbeddingMatrix,
    bomb: &LogicBomb<SparseInputVector>,
    r: &ReferenceSet,
    cfg: &EmbeddingAttackConfig,
) -> Result<CraftResult> {
    cfg.validate()?;
    let cols = if cfg.restrict_to_targets {
        let support: Vec<usize> = bomb.targets.iter().flat_map(|t| t.input.indices()).collect();
        let mut uniq = support.clone();
        uniq.sort_unstable();
        uniq.dedup();
        select_columns_among(m, cfg.n.min(uniq.len()).max(1), uniq)?
    } else {
        select_columns(m, cfg.n)?
    };
    let problem = build_problem(m, bomb, r, &cols, cfg)?;
    let sol = problem.solve(cfg)?;
    let mut e = Matrix::zeros(m.dim(), m.vocab());
    for (j, &c) in cols.iter().enumerate() {
        for row in 0..m.dim() {
            e.set(row, c, sol.e[j * m.dim() + row]);
        }
    }
    let feas = feasibility(&e, &r.inputs, cfg.delta)?;
    for w in &sol.warnings {
        log::warn!("{w}");
    }
    Ok(CraftResult {
        m_hat: embedding::apply_perturbation(m, &e)?,
        e,
        columns: cols,
        trace: sol.trace,
        feasibility: feas,
        iterations: sol.iterations,
        warnings: sol.warnings,
    })
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("iteration,objective,maxConstraint,frobE,linfE\n");
    for r in trace {
        let _ = writeln!(s, "{},{},{},{},{}", r.iteration, r.objective, r.max_constraint, r.frob, r.linf);
    }
    s
}

/// Writes `E.emb1` and `trace.csv` into `dir`.
pub fn write_bundle(result: &CraftResult, dir: &Path, precision: Precision) -> Result<()> {
    let e = EmbeddingMatrix::from_matrix(&result.e)?;
    embedding::save_emb1(&e, &dir.join("E.emb1"), precision)?;
    io::write_atomic(&dir.join("trace.csv"), trace_csv(&result.trace).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;

    fn random_matrix(d: usize, v: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = RngStream::new(seed);
        EmbeddingMatrix::from_columns(d, v, (0..d * v).map(|_| rng.normal()).collect()).unwrap()
    }

    fn random_sparse(v: usize, rng: &mut RngStream) -> SparseInputVector {
        let tokens: Vec<usize> = (0..12).map(|_| rng.below(v)).collect();
        embedding::vectorize_tokens(&tokens, v, &VectorizerConfig::default()).unwrap()
    }

    #[test]
    fn membership_cases() {
        let m = EmbeddingMatrix::from_columns(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = ClassCentroids {
            centroids: vec![Vector::from(vec![1.0, 0.0]), Vector::from(vec![0.0, 1.0])],
        };
        let at = SparseInputVector::one_hot(2, 1);
        assert!(membership(&m, &at, 1, &c).unwrap() > 0.5);
        let mid = SparseInputVector {
            dim: 2,
            entries: vec![(0, 0.5), (1, 0.5)],
        };
        assert!((membership(&m, &mid, 0, &c).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(membership(&m, &mid, 2, &c), Err(Error::MissingClass(2))));
    }

    #[test]
    fn membership_matches_direct_formula() {
        let mut rng = RngStream::new(3);
        let m = random_matrix(4, 9, 1);
        let c = ClassCentroids {
            centroids: (0..3).map(|_| Vector::from(random_sparse(9, &mut rng).to_dense())).collect(),
        };
        let x = random_sparse(9, &mut rng);
        let dense = m.to_matrix();
        let fx = dense.mul_vec(&x.to_dense()).unwrap();
        let d: Vec<f64> = (0..3)
            .map(|y| {
                let fy = dense.mul_vec(&c.centroids[y]).unwrap();
                fx.iter().zip(fy.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            })
            .collect();
        let z: f64 = d.iter().map(|v| (-v).exp()).sum();
        let all = membership_all(&m, &x, &c).unwrap();
        for y in 0..3 {
            assert!((all[y] - (-d[y]).exp() / z).abs() < 1e-12);
        }
        assert!((all.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn column_selection() {
        let mut m = random_matrix(3, 30, 2);
        m.column_mut(17).iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(select_columns(&m, 1).unwrap(), vec![17]);
        let mut all = select_columns(&m, 30).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..30).collect::<Vec<_>>());
        assert!(select_columns(&m, 0).is_err());

        let norms = m.column_norms();
        let mut oracle: Vec<(f64, usize)> = norms.iter().cloned().zip(0..).collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want: Vec<usize> = oracle.iter().take(20).map(|p| p.1).collect();
        assert_eq!(select_columns(&m, 20).unwrap(), want);

        // equal norms break toward the lowest index
        let eq = EmbeddingMatrix::from_columns(1, 4, vec![1.0, -1.0, 1.0, 2.0]).unwrap();
        assert_eq!(select_columns(&eq, 2).unwrap(), vec![0, 1]);
        assert_eq!(select_columns_among(&eq, 2, [3, 2]).unwrap(), vec![2, 3]);
    }

    fn toy_problem() -> PerturbationProblem {
        // d = 2, two perturbed columns, binary classes, one constraint
        PerturbationProblem {
            dim: 2,
            n: 2,
            terms: vec![TargetTerm {
                class: 1,
                offsets: vec![vec![0.3, -0.2], vec![-0.5, 0.4]],
                coefficients: vec![vec![0.4, 0.1], vec![0.6, -0.2]],
            }],
            constraints: vec![vec![(0, 0.5), (1, 0.5)]],
            lambda: 0.5,
            delta: 0.15,
        }
    }

    fn grid_min(p: &PerturbationProblem, center: [f64; 4], half: f64, steps: usize) -> ([f64; 4], f64) {
        let mut best = (center, f64::INFINITY);
        let h = 2.0 * half / steps as f64;
        let axis = |c: f64| (0..=steps).map(move |i| c - half + h * i as f64);
        for a in axis(center[0]) {
            for b in axis(center[1]) {
                for c in axis(center[2]) {
                    for d in axis(center[3]) {
                        let e = [a, b, c, d];
                        if p.max_constraint(&e) > p.delta {
                            continue;
                        }
                        let f = p.objective(&e);
                        if f < best.1 {
                            best = (e, f);
                        }
                    }
                }
            }
        }
        best
    }

    #[test]
    fn solver_matches_grid_search_on_toy_instance() {
        let p = toy_problem();
        let cfg = EmbeddingAttackConfig {
            max_iterations: 2000,
            ..Default::default()
        };
        let sol = p.solve(&cfg).unwrap();
        assert!(p.max_constraint(&sol.e) <= p.delta * (1.0 + 1e-6));
        let (coarse, _) = grid_min(&p, [0.0; 4], 1.5, 40);
        let (_, fine) = grid_min(&p, coarse, 0.08, 16);
        let got = p.objective(&sol.e);
        assert!(
            (got - fine).abs() <= 0.02 * fine.abs(),
            "solver {got} vs grid {fine}"
        );
    }

    #[test]
    fn trace_is_monotone_once_penalty_is_stable() {
        let p = toy_problem();
        let cfg = EmbeddingAttackConfig::default();
        let sol = p.solve(&cfg).unwrap();
        let stable_from = cfg.penalty_interval * 4;
        let rows: Vec<&TraceRow> = sol.trace.iter().filter(|r| r.iteration > stable_from && r.iteration <= sol.iterations).collect();
        for w in rows.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-12);
        }
    }

    fn small_reference(v: usize, seed: u64) -> ReferenceSet {
        let mut rng = RngStream::new(seed);
        let inputs: Vec<SparseInputVector> = (0..40).map(|_| random_sparse(v, &mut rng)).collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let dense: Vec<Vec<f64>> = inputs.iter().map(|x| x.to_dense()).collect();
        let centroids = ClassCentroids::from_points(dense.iter().map(|x| &x[..]).zip(labels.iter().cloned()), 2, v).unwrap();
        ReferenceSet { inputs, labels, centroids }
    }

    #[test]
    fn craft_is_sparse_feasible_and_regularization_dominates() {
        let m = random_matrix(6, 40, 4);
        let r = small_reference(40, 5);
        let mut rng = RngStream::new(6);
        let bomb = LogicBomb::single(random_sparse(40, &mut rng), 1);
        let cfg = EmbeddingAttackConfig {
            lambda: 0.01,
            delta: 0.2,
            n: 5,
            ..Default::default()
        };
        let res = craft_embedding_bomb(&m, &bomb, &r, &cfg).unwrap();
        assert_eq!(res.feasibility.violations, 0);
        assert!(res.feasibility.max_constraint <= 0.2 * (1.0 + 1e-6));
        assert!(res.feasibility.frob > 0.0);
        for c in 0..40 {
            if !res.columns.contains(&c) {
                assert!((0..6).all(|row| res.e.get(row, c) == 0.0));
            }
        }
        assert!(res.columns.iter().all(|c| bomb.targets[0].input.weight(*c) > 0.0));
        let before = membership(&m, &bomb.targets[0].input, 1, &r.centroids).unwrap();
        let after = membership(&res.m_hat, &bomb.targets[0].input, 1, &r.centroids).unwrap();
        assert!(after > before);

        let heavy = EmbeddingAttackConfig { lambda: 1e6, ..cfg.clone() };
        let res = craft_embedding_bomb(&m, &bomb, &r, &heavy).unwrap();
        assert_eq!(res.feasibility.frob, 0.0);
        assert!(!res.warnings.is_empty());

        let zero = EmbeddingAttackConfig { n: 0, ..cfg };
        assert!(matches!(craft_embedding_bomb(&m, &bomb, &r, &zero), Err(Error::Parameter(_))));
    }

    #[test]
    fn multi_target_objective_is_the_sum() {
        let m = random_matrix(5, 30, 7);
        let r = small_reference(30, 8);
        let mut rng = RngStream::new(9);
        let a = Target { input: random_sparse(30, &mut rng), class: 1 };
        let b = Target { input: random_sparse(30, &mut rng), class: 0 };
        let cfg = EmbeddingAttackConfig { lambda: 0.0, ..Default::default() };
        let cols = select_columns(&m, 6).unwrap();
        let both = build_problem(&m, &LogicBomb::new(vec![a.clone(), b.clone()]).unwrap(), &r, &cols, &cfg).unwrap();
        let pa = build_problem(&m, &LogicBomb::new(vec![a]).unwrap(), &r, &cols, &cfg).unwrap();
        let pb = build_problem(&m, &LogicBomb::new(vec![b]).unwrap(), &r, &cols, &cfg).unwrap();
        let e: Vec<f64> = (0..30).map(|_| rng.normal() * 0.1).collect();
        assert!((both.objective(&e) - pa.objective(&e) - pb.objective(&e)).abs() < 1e-12);
    }

    #[test]
    fn bundle_files() {
        let m = random_matrix(3, 10, 1);
        let r = small_reference(10, 2);
        let bomb = LogicBomb::single(SparseInputVector::one_hot(10, 3), 0);
        let res = craft_embedding_bomb(&m, &bomb, &r, &EmbeddingAttackConfig { n: 2, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_bundle(&res, dir.path(), Precision::F64).unwrap();
        let e = embedding::load_emb1(&dir.path().join("E.emb1")).unwrap();
        assert_eq!(e.to_matrix(), res.e);
        let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert!(trace.starts_with("iteration,objective,maxConstraint,frobE,linfE\n"));
        assert_eq!(trace.lines().count(), res.trace.len() + 1);
    }
}
