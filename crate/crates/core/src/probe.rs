//! Linear probes and low-dimensional projections of frozen representations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary logistic regression on standardized features, fitted by Newton
/// iterations with a small ridge on the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

pub const DEFAULT_RIDGE: f64 = 1e-3;
const MAX_NEWTON_STEPS: usize = 100;

fn check_rows(rows: &[Vec<f64>]) -> Result<usize> {
    let p = rows
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Validation("probe needs at least one row".into()))?;
    if p == 0 || rows.iter().any(|r| r.len() != p) {
        return Err(Error::Validation(
            "probe rows must share a nonzero width".into(),
        ));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite probe feature".into()));
    }
    Ok(p)
}

impl LogisticProbe {
    pub fn fit(rows: &[Vec<f64>], labels: &[bool], ridge: f64) -> Result<Self> {
        let p = check_rows(rows)?;
        if labels.len() != rows.len() {
            return Err(Error::Validation(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let m = rows.len() as f64;
        let mean: Vec<f64> = (0..p)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m)
            .collect();
        let scale: Vec<f64> = (0..p)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / m;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let positives = labels.iter().filter(|&&l| l).count();
        if positives == 0 || positives == labels.len() {
            let bias = if positives == 0 { -1.0 } else { 1.0 };
            return Ok(LogisticProbe {
                mean,
                scale,
                weights: vec![0.0; p],
                bias,
            });
        }

        // Design matrix with a trailing intercept column.
        let x = DMatrix::from_fn(rows.len(), p + 1, |i, j| {
            if j == p {
                1.0
            } else {
                (rows[i][j] - mean[j]) / scale[j]
            }
        });
        let y = DVector::from_iterator(
            labels.len(),
            labels.iter().map(|&l| if l { 1.0 } else { 0.0 }),
        );
        let mut beta = DVector::zeros(p + 1);
        let mut penalty = DMatrix::identity(p + 1, p + 1) * ridge;
        penalty[(p, p)] = 0.0;
        for _ in 0..MAX_NEWTON_STEPS {
            let mu = (&x * &beta).map(|z| 1.0 / (1.0 + (-z).exp()));
            let w = mu.map(|v| (v * (1.0 - v)).max(1e-12));
            let mut grad = x.transpose() * (&mu - &y) + &penalty * &beta;
            let xw = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] * w[i]);
            let hess = x.transpose() * xw + &penalty + DMatrix::identity(p + 1, p + 1) * 1e-10;
            let chol = hess
                .cholesky()
                .ok_or_else(|| Error::Numeric("probe Hessian is not positive definite".into()))?;
            chol.solve_mut(&mut grad);
            beta -= &grad;
            if grad.amax() < 1e-10 {
                break;
            }
        }
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("probe fit diverged".into()));
        }
        Ok(LogisticProbe {
            mean,
            scale,
            weights: beta.rows(0, p).iter().copied().collect(),
            bias: beta[p],
        })
    }

    pub fn decision(&self, row: &[f64]) -> f64 {
        self.bias
            + row
                .iter()
                .enumerate()
                .map(|(j, v)| self.weights[j] * (v - self.mean[j]) / self.scale[j])
                .sum::<f64>()
    }

    pub fn predict(&self, row: &[f64]) -> bool {
        self.decision(row) > 0.0
    }

    /// Fraction of rows classified correctly.
    pub fn accuracy(&self, rows: &[Vec<f64>], labels: &[bool]) -> f64 {
        if rows.is_empty() {
            return f64::NAN;
        }
        let hits = rows
            .iter()
            .zip(labels)
            .filter(|(r, &l)| self.predict(r) == l)
            .count();
        hits as f64 / rows.len() as f64
    }
}

/// Fits on `(train, train_labels)` and reports accuracy on the test rows.
pub fn probe_accuracy(
    train: &[Vec<f64>],
    train_labels: &[bool],
    test: &[Vec<f64>],
    test_labels: &[bool],
) -> Result<f64> {
    Ok(LogisticProbe::fit(train, train_labels, DEFAULT_RIDGE)?.accuracy(test, test_labels))
}

/// Coordinates on the top two principal components (rows centered).
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let p = check_rows(rows)?;
    let m = rows.len();
    let mean: Vec<f64> = (0..p)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m as f64)
        .collect();
    let x = DMatrix::from_fn(m, p, |i, j| rows[i][j] - mean[j]);
    let cov = x.transpose() * &x / (m.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| -> DVector<f64> {
        order.get(k).map_or_else(
            || DVector::zeros(p),
            |&c| eig.eigenvectors.column(c).into_owned(),
        )
    };
    let (a0, a1) = (axis(0), axis(1));
    let proj0 = &x * a0;
    let proj1 = &x * a1;
    Ok((0..m).map(|i| [proj0[i], proj1[i]]).collect())
}
