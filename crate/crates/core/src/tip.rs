//! Training-free cache-model classifier (Tip-Adapter) and its grid search.
//!
//! Logits are the zero-shot cosines plus an affinity-weighted vote of the
//! cached shots: `cos(f, w_i) + alpha * sum_j exp(-beta * (1 - cos(f, k_j))) * L[j, i]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::ClassView;
use crate::tensor::{dot, FeatureMatrix, Matrix};
use crate::zeroshot::{count_correct, cosine_logits, top1, unit_rows, LogitsMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TipParams {
    pub alpha: f64,
    pub beta: f64,
}

impl TipParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0) || !(beta > 0.0) || !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::Config(format!(
                "tip parameters need alpha >= 0 and beta > 0, got alpha={alpha} beta={beta}"
            )));
        }
        Ok(TipParams { alpha, beta })
    }
}

/// Shot embeddings (keys) with one-hot class labels (values).
#[derive(Clone, Debug, PartialEq)]
pub struct CacheModel {
    keys: Matrix<f64>,
    values: Matrix<f64>,
    labels: Vec<usize>,
}

impl CacheModel {
    /// Builds the cache from per-class shots; class `i` of the result is
    /// `support[i]`.
    pub fn from_support(support: &[FeatureMatrix]) -> Result<Self> {
        let n = support.len();
        let mut labels = Vec::new();
        for (c, s) in support.iter().enumerate() {
            labels.extend(std::iter::repeat(c).take(s.rows()));
        }
        if labels.is_empty() {
            return Err(Error::Cache("cache model has no shots".into()));
        }
        let keys = unit_rows(&Matrix::vstack(support)?, "cache keys")?;
        let mut values = Matrix::zeros(labels.len(), n);
        for (r, &c) in labels.iter().enumerate() {
            values.set(r, c, 1.0);
        }
        Ok(CacheModel { keys, values, labels })
    }

    pub fn keys(&self) -> &Matrix<f64> {
        &self.keys
    }

    /// `(N·K) × N` one-hot label matrix.
    pub fn values(&self) -> &Matrix<f64> {
        &self.values
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.values.cols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `Q × N` class votes, `sum_j exp(-beta (1 - cos)) L[j, :]`.
    fn votes(&self, unit_queries: &Matrix<f64>, beta: f64) -> Matrix<f64> {
        let n = self.n_classes();
        let mut out = Matrix::zeros(unit_queries.rows(), n);
        out.data_mut().par_chunks_mut(n.max(1)).enumerate().for_each(|(q, row)| {
            let f = unit_queries.row(q);
            for (j, &c) in self.labels.iter().enumerate() {
                row[c] += (-beta * (1.0 - dot(f, self.keys.row(j)))).exp();
            }
        });
        out
    }
}

pub fn tip_logits(
    queries: &FeatureMatrix,
    classes: &FeatureMatrix,
    cache: &CacheModel,
    params: TipParams,
) -> Result<LogitsMatrix> {
    if cache.is_empty() {
        return Err(Error::Cache("cache model has no shots".into()));
    }
    if cache.n_classes() != classes.rows() || cache.keys.cols() != classes.cols() {
        return Err(Error::shape(
            "tip cache",
            format!("{} classes of dim {}", classes.rows(), classes.cols()),
            format!("{} classes of dim {}", cache.n_classes(), cache.keys.cols()),
        ));
    }
    let mut logits = cosine_logits(queries, classes)?;
    let votes = cache.votes(&unit_rows(queries, "queries")?, params.beta);
    for (l, v) in logits.values.data_mut().iter_mut().zip(votes.data()) {
        *l += params.alpha * v;
    }
    Ok(logits)
}

/// Candidate values for the grid search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TipGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl Default for TipGrid {
    /// `alpha in {0.0, 0.1, .., 5.0}`, `beta in {0.5, 1.0, .., 10.0}`.
    fn default() -> Self {
        TipGrid {
            alphas: (0..=50).map(|i| i as f64 / 10.0).collect(),
            betas: (1..=20).map(|i| i as f64 / 2.0).collect(),
        }
    }
}

impl TipGrid {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.betas.is_empty() {
            return Err(Error::Config("tip search grid is empty".into()));
        }
        for &a in &self.alphas {
            for &b in &self.betas {
                TipParams::new(a, b)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TipSearch {
    pub best: TipParams,
    pub correct: usize,
    pub total: usize,
    pub grid: TipGrid,
}

impl TipSearch {
    pub fn accuracy(&self) -> f64 {
        100.0 * self.correct as f64 / self.total.max(1) as f64
    }
}

/// Exhaustive search for the `(alpha, beta)` with the highest top-1 on
/// `validation` (labels local to the view). Ties go to the smaller alpha,
/// then the smaller beta.
pub fn search_tip(view: &ClassView, grid: &TipGrid) -> Result<TipSearch> {
    grid.validate()?;
    let cache = CacheModel::from_support(&view.support)?;
    let base = cosine_logits(&view.queries, &view.text)?;
    let unit_q = unit_rows(&view.queries, "queries")?;

    // Votes depend on beta only; alpha is a per-entry affine scale on them.
    let per_beta: Vec<Vec<(TipParams, usize)>> = grid
        .betas
        .par_iter()
        .map(|&beta| {
            let votes = cache.votes(&unit_q, beta);
            grid.alphas
                .iter()
                .map(|&alpha| {
                    let mut l = base.clone();
                    for (x, v) in l.values.data_mut().iter_mut().zip(votes.data()) {
                        *x += alpha * v;
                    }
                    (TipParams { alpha, beta }, count_correct(&top1(&l), &view.labels))
                })
                .collect()
        })
        .collect();

    let mut best: Option<(TipParams, usize)> = None;
    for (p, c) in per_beta.into_iter().flatten() {
        let better = match best {
            None => true,
            Some((bp, bc)) => {
                c > bc || (c == bc && (p.alpha < bp.alpha || (p.alpha == bp.alpha && p.beta < bp.beta)))
            }
        };
        if better {
            best = Some((p, c));
        }
    }
    let (best, correct) = best.expect("grid is non-empty");
    Ok(TipSearch {
        best,
        correct,
        total: view.labels.len(),
        grid: grid.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{RngSeed, SeededRng};
    use crate::zeroshot::zeroshot_logits;

    fn random_rows(rows: usize, d: usize, rng: &mut SeededRng) -> FeatureMatrix {
        Matrix::new(rows, d, (0..rows * d).map(|_| rng.normal() as f32).collect()).unwrap()
    }

    /// Direct transcription of the cache-model formula with scalar loops.
    fn oracle(queries: &FeatureMatrix, classes: &FeatureMatrix, shots: &[FeatureMatrix], a: f64, b: f64) -> Vec<Vec<f64>> {
        let nrm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let cos = |x: &[f32], y: &[f32]| {
            x.iter().zip(y).map(|(p, q)| *p as f64 * *q as f64).sum::<f64>() / (nrm(x) * nrm(y))
        };
        let mut out = vec![];
        for q in 0..queries.rows() {
            let f = queries.row(q);
            let mut row = vec![];
            for i in 0..classes.rows() {
                let mut v = cos(f, classes.row(i));
                for (c, s) in shots.iter().enumerate() {
                    for j in 0..s.rows() {
                        let onehot = if c == i { 1.0 } else { 0.0 };
                        v += a * (-b * (1.0 - cos(f, s.row(j)))).exp() * onehot;
                    }
                }
                row.push(v);
            }
            out.push(row);
        }
        out
    }

    #[test]
    fn alpha_zero_is_zero_shot() {
        let mut rng = SeededRng::new(RngSeed(1));
        let (q, c) = (random_rows(5, 4, &mut rng), random_rows(3, 4, &mut rng));
        let shots: Vec<_> = (0..3).map(|_| random_rows(2, 4, &mut rng)).collect();
        let cache = CacheModel::from_support(&shots).unwrap();
        let tip = tip_logits(&q, &c, &cache, TipParams::new(0.0, 3.0).unwrap()).unwrap();
        assert_eq!(tip, zeroshot_logits(&q, &c).unwrap());
    }

    #[test]
    fn query_on_a_key_contributes_alpha() {
        let classes = Matrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
        let shots = vec![
            Matrix::from_rows(&[[0.0f32, 1.0]]).unwrap(),
            Matrix::from_rows(&[[0.6f32, 0.8]]).unwrap(),
        ];
        let cache = CacheModel::from_support(&shots).unwrap();
        // Query orthogonal to the class-0 key so that key contributes exp(-beta).
        let q = Matrix::from_rows(&[[0.6f32, 0.8]]).unwrap();
        let p = TipParams::new(2.0, 50.0).unwrap();
        let l = tip_logits(&q, &classes, &cache, p).unwrap();
        let zs = zeroshot_logits(&q, &classes).unwrap();
        assert!((l.values.get(0, 1) - zs.values.get(0, 1) - 2.0).abs() < 1e-6);
        assert!((l.values.get(0, 0) - zs.values.get(0, 0) - 2.0 * (-50.0f64 * 0.2).exp()).abs() < 1e-9);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = SeededRng::new(RngSeed(42));
        let (q, c) = (random_rows(6, 4, &mut rng), random_rows(2, 4, &mut rng));
        let shots: Vec<_> = (0..2).map(|_| random_rows(1, 4, &mut rng)).collect();
        let cache = CacheModel::from_support(&shots).unwrap();
        let got = tip_logits(&q, &c, &cache, TipParams::new(1.0, 5.5).unwrap()).unwrap();
        let want = oracle(&q, &c, &shots, 1.0, 5.5);
        for (r, row) in want.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                assert!((got.values.get(r, i) - v).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn cache_invariants_and_errors() {
        let shots = vec![Matrix::<f32>::zeros(0, 3), Matrix::zeros(0, 3)];
        assert!(matches!(CacheModel::from_support(&shots), Err(Error::Cache(_))));
        let mut rng = SeededRng::new(RngSeed(2));
        let shots: Vec<_> = (0..3).map(|_| random_rows(2, 3, &mut rng)).collect();
        let cache = CacheModel::from_support(&shots).unwrap();
        for r in 0..cache.len() {
            let row = cache.values().row(r);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
            assert_eq!(row[cache.labels()[r]], 1.0);
        }
        assert!(TipParams::new(-0.1, 1.0).is_err());
        assert!(TipParams::new(0.0, 0.0).is_err());
    }

    #[test]
    fn monotone_affine_and_permutation_invariant() {
        let mut rng = SeededRng::new(RngSeed(8));
        let (q, c) = (random_rows(4, 5, &mut rng), random_rows(3, 5, &mut rng));
        let shots: Vec<_> = (0..3).map(|_| random_rows(3, 5, &mut rng)).collect();
        let cache = CacheModel::from_support(&shots).unwrap();
        let at = |a: f64| tip_logits(&q, &c, &cache, TipParams::new(a, 4.0).unwrap()).unwrap().values;
        let (l0, l1, l2) = (at(0.0), at(1.0), at(2.0));
        for ((a, b), c2) in l0.data().iter().zip(l1.data()).zip(l2.data()) {
            assert!(b >= a && c2 >= b);
            assert!(((c2 - b) - (b - a)).abs() < 1e-12);
        }
        let reversed: Vec<_> = shots
            .iter()
            .map(|s| s.select_rows(&(0..s.rows()).rev().collect::<Vec<_>>()))
            .collect();
        let permuted = CacheModel::from_support(&reversed).unwrap();
        let lp = tip_logits(&q, &c, &permuted, TipParams::new(1.0, 4.0).unwrap()).unwrap();
        for (x, y) in lp.values.data().iter().zip(l1.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
