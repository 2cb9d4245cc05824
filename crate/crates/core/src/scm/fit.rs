//! Least-squares fitting on samples and its closed-form population oracle.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{LinearScm, SampleMatrix};
use crate::error::{Error, Result};

/// Outcome of regressing one node on others (with intercept).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub target: usize,
    pub regressors: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// `target − fitted`, one entry per stacked sample.
    pub residuals: Vec<f64>,
}

impl FitResult {
    pub fn coefficient(&self, regressor: usize) -> Option<f64> {
        self.regressors
            .iter()
            .position(|&r| r == regressor)
            .map(|k| self.coefficients[k])
    }
}

/// Pearson correlation; 0 when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

fn check_regressors(n_nodes: usize, target: usize, regressors: &[usize]) -> Result<()> {
    if regressors.is_empty() {
        return Err(Error::Validation("regressor list is empty".into()));
    }
    if target >= n_nodes {
        return Err(Error::Validation(format!("target {target} out of range")));
    }
    for (k, &r) in regressors.iter().enumerate() {
        if r >= n_nodes {
            return Err(Error::Validation(format!("regressor {r} out of range")));
        }
        if r == target {
            return Err(Error::Validation(format!(
                "regressor list contains the target {target}"
            )));
        }
        if regressors[..k].contains(&r) {
            return Err(Error::RankDeficient { columns: vec![r] });
        }
    }
    Ok(())
}

/// Columns whose Cholesky pivot collapses relative to their own variance.
fn dependent_columns(gram: &DMatrix<f64>) -> Vec<usize> {
    let p = gram.nrows();
    let mut l = DMatrix::<f64>::zeros(p, p);
    let mut bad = Vec::new();
    for k in 0..p {
        let mut pivot = gram[(k, k)];
        for j in 0..k {
            pivot -= l[(k, j)] * l[(k, j)];
        }
        if gram[(k, k)] <= 0.0 || pivot <= 1e-10 * gram[(k, k)] {
            bad.push(k);
            continue;
        }
        let d = pivot.sqrt();
        l[(k, k)] = d;
        for r in k + 1..p {
            let mut v = gram[(r, k)];
            for j in 0..k {
                v -= l[(r, j)] * l[(k, j)];
            }
            l[(r, k)] = v / d;
        }
    }
    bad
}

/// Ordinary least squares of `target` on `regressors` with an intercept.
/// Vector-valued nodes contribute one row per dimension.
pub fn fit_ols(data: &SampleMatrix, target: usize, regressors: &[usize]) -> Result<FitResult> {
    check_regressors(data.n_nodes(), target, regressors)?;
    let p = regressors.len();
    let rows = data.n_samples() * data.dim();
    if rows <= p + 1 {
        return Err(Error::SampleSize {
            got: rows,
            need: p + 2,
        });
    }
    let y = data.column(target);
    let columns: Vec<Vec<f64>> = regressors.iter().map(|&r| data.column(r)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let y_mean = mean(&y);
    let x_means: Vec<f64> = columns.iter().map(|c| mean(c)).collect();
    let centered: Vec<Vec<f64>> = columns
        .iter()
        .zip(&x_means)
        .map(|(c, m)| c.iter().map(|v| v - m).collect())
        .collect();
    let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let gram = DMatrix::from_fn(p, p, |r, c| dot(&centered[r], &centered[c]));
    let bad = dependent_columns(&gram);
    if !bad.is_empty() {
        return Err(Error::RankDeficient {
            columns: bad.into_iter().map(|k| regressors[k]).collect(),
        });
    }
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::RankDeficient {
            columns: regressors.to_vec(),
        })?;
    let rhs = DVector::from_fn(p, |r, _| dot(&centered[r], &yc));
    let mut beta = chol.solve(&rhs);

    // One round of iterative refinement keeps residuals orthogonal to the
    // regressors at the level of the data's own rounding.
    let residual_of = |beta: &DVector<f64>| -> Vec<f64> {
        (0..rows)
            .map(|s| yc[s] - (0..p).map(|k| beta[k] * centered[k][s]).sum::<f64>())
            .collect()
    };
    let r = residual_of(&beta);
    let correction = chol.solve(&DVector::from_fn(p, |k, _| dot(&centered[k], &r)));
    beta += correction;

    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let intercept = y_mean
        - coefficients
            .iter()
            .zip(&x_means)
            .map(|(b, m)| b * m)
            .sum::<f64>();
    let residuals: Vec<f64> = (0..rows)
        .map(|s| {
            let fitted = intercept + (0..p).map(|k| coefficients[k] * columns[k][s]).sum::<f64>();
            y[s] - fitted
        })
        .collect();
    if residuals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite residuals".into()));
    }
    Ok(FitResult {
        target,
        regressors: regressors.to_vec(),
        coefficients,
        intercept,
        residuals,
    })
}

/// Population covariance of the node values implied by the SCM.
pub fn population_covariance(scm: &LinearScm) -> DMatrix<f64> {
    let n = scm.n_nodes();
    let total = scm.total_effects();
    let var: Vec<f64> = scm.noise().iter().map(|s| s.family.variance()).collect();
    DMatrix::from_fn(n, n, |a, b| {
        (0..n)
            .map(|k| total[a * n + k] * total[b * n + k] * var[k])
            .sum()
    })
}

/// Closed-form regression coefficients `Cov(R,R)⁻¹ Cov(R,target)` from the
/// model itself.
pub fn population_fit(scm: &LinearScm, target: usize, regressors: &[usize]) -> Result<Vec<f64>> {
    check_regressors(scm.n_nodes(), target, regressors)?;
    let cov = population_covariance(scm);
    let p = regressors.len();
    let crr = DMatrix::from_fn(p, p, |r, c| cov[(regressors[r], regressors[c])]);
    let crt = DVector::from_fn(p, |r, _| cov[(regressors[r], target)]);
    if !dependent_columns(&crr).is_empty() {
        return Err(Error::Degenerate(format!(
            "Cov(R,R) is singular for regressors {regressors:?}"
        )));
    }
    let chol = crr.cholesky().ok_or_else(|| {
        Error::Degenerate(format!(
            "Cov(R,R) is not positive definite for {regressors:?}"
        ))
    })?;
    Ok(chol.solve(&crt).iter().copied().collect())
}
