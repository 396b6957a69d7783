//! FID, R-precision and diversity over feature matrices (one row per item).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Diagonal loading applied by [`GaussianStats::fit`].
pub const COV_REG: f64 = 1e-6;
/// Negatives drawn per R-precision query.
pub const R_NEGATIVES: usize = 31;

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub cov: Vec<f64>,
    pub dim: usize,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        if cov.len() != dim * dim {
            return Err(Error::Metric(format!("covariance of {} entries for dimension {dim}", cov.len())));
        }
        let stats = Self { mean, cov, dim };
        let m = stats.cov_matrix();
        if (&m - m.transpose()).abs().max() > 1e-9 * (1.0 + m.abs().max()) {
            return Err(Error::Metric("covariance is not symmetric".into()));
        }
        Ok(stats)
    }

    /// Sample mean and unbiased covariance plus `COV_REG * I`.
    pub fn fit(features: &Array2<f64>) -> Result<Self> {
        let n = features.nrows();
        if n < 2 {
            return Err(Error::InsufficientPool { have: n, need: 2 });
        }
        let d = features.ncols();
        let mean = features.mean_axis(Axis(0)).expect("rows present");
        let centered = features - &mean;
        let mut cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        for i in 0..d {
            cov[[i, i]] += COV_REG;
        }
        let cov = (&cov + &cov.t()) * 0.5;
        Self::new(mean.to_vec(), cov.iter().copied().collect())
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.cov)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        SymmetricEigen::new(self.cov_matrix()).eigenvalues.iter().copied().collect()
    }
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`. The trace of the
/// product root is taken from the symmetric matrix `A^(1/2) S_b A^(1/2)`,
/// which shares the eigenvalues of `S_a S_b`.
pub fn fid(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::Metric(format!("dimensions {} and {} differ", a.dim, b.dim)));
    }
    let mu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = a.cov_matrix();
    let sb = b.cov_matrix();
    let ra = psd_sqrt(sa.clone());
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    Ok(mu + sa.trace() + sb.trace() - 2.0 * cross)
}

fn dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Top-1, top-2 and top-3 retrieval accuracy. Row `i` of `motion` is matched
/// to row `i` of `text` and ranked against 31 other rows drawn without
/// replacement; a negative at equal distance ranks ahead of the truth.
pub fn r_precision_all(text: &Array2<f64>, motion: &Array2<f64>, seed: u64) -> Result<[f64; 3]> {
    let n = text.nrows();
    if motion.dim() != text.dim() {
        return Err(Error::Metric("text and motion features differ in shape".into()));
    }
    if n < R_NEGATIVES + 1 {
        return Err(Error::InsufficientPool {
            have: n,
            need: R_NEGATIVES + 1,
        });
    }
    let mut rng = seed::child_rng(seed, "r_precision");
    let mut hits = [0usize; 3];
    for i in 0..n {
        let truth = dist(motion.row(i), text.row(i));
        let rank = index::sample(&mut rng, n - 1, R_NEGATIVES)
            .into_iter()
            .map(|j| if j >= i { j + 1 } else { j })
            .filter(|&j| dist(motion.row(i), text.row(j)) <= truth)
            .count();
        for (k, h) in hits.iter_mut().enumerate() {
            if rank <= k {
                *h += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / n as f64))
}

pub fn r_precision(text: &Array2<f64>, motion: &Array2<f64>, k: usize, seed: u64) -> Result<f64> {
    if !(1..=3).contains(&k) {
        return Err(Error::Metric(format!("k must be 1, 2 or 3, got {k}")));
    }
    Ok(r_precision_all(text, motion, seed)?[k - 1])
}

/// Mean distance between row `i` of `a` and row `i` of `b`.
pub fn paired_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() || a.nrows() == 0 {
        return Err(Error::Metric(format!("halves {:?} and {:?} cannot be paired", a.dim(), b.dim())));
    }
    let total: f64 = a.rows().into_iter().zip(b.rows()).map(|(x, y)| dist(x, y)).sum();
    Ok(total / a.nrows() as f64)
}

/// [`paired_distance`] between two disjoint random halves of size `m_d`.
pub fn diversity(features: &Array2<f64>, m_d: usize, seed: u64) -> Result<f64> {
    let n = features.nrows();
    if m_d == 0 || n < 2 * m_d {
        return Err(Error::InsufficientPool {
            have: n,
            need: 2 * m_d.max(1),
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::child_rng(seed, "diversity"));
    let first = features.select(Axis(0), &idx[..m_d]);
    let second = features.select(Axis(0), &idx[m_d..2 * m_d]);
    paired_distance(&first, &second)
}

/// Mean and 95% half-width `1.96 * sd / sqrt(R)` over repetitions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci: f64,
}

impl MeanCi {
    pub fn from_samples(samples: &[f64]) -> Self {
        let r = samples.len();
        if r == 0 {
            return Self { mean: f64::NAN, ci: f64::NAN };
        }
        let mean = samples.iter().sum::<f64>() / r as f64;
        let ci = if r > 1 {
            let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (r as f64 - 1.0);
            1.96 * var.sqrt() / (r as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, ci }
    }
}

impl std::fmt::Display for MeanCi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.ci)
    }
}
