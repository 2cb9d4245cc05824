//! Classifying the causal relationship of two fitted variables from the
//! independence of their regression residuals.
//!
//! Regressing `X` on `Y` leaves `Σ_X`; regressing `Y` on `X` leaves `Σ_Y`.
//! With independent non-gaussian exogenous terms the residual of the effect
//! on its cause is independent of the cause, while the reverse fit leaves a
//! residual that still carries the cause's own noise:
//!
//! | `Σ_X ⟂ Y` | `Σ_Y ⟂ X` | verdict |
//! |-----------|-----------|---------|
//! | yes | no  | `Y → X` |
//! | no  | yes | `X → Y` |
//! | no  | no  | latent common cause `L → X, L → Y` |
//! | yes | yes | independent, or a common effect `X → L ← Y` |

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::independence::{independence_test, IndependenceConfig, IndependenceReport};
use crate::scm::{fit_ols, FitResult, SampleMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VerdictKind {
    YCausesX,
    XCausesY,
    LatentCommonCause,
    IndependentOrCommonEffect,
}

impl VerdictKind {
    /// Maps the two rejections (`Σ_X vs Y`, `Σ_Y vs X`) to a verdict.
    pub fn from_rejections(x_residual_dependent: bool, y_residual_dependent: bool) -> Self {
        match (x_residual_dependent, y_residual_dependent) {
            (false, true) => VerdictKind::YCausesX,
            (true, false) => VerdictKind::XCausesY,
            (true, true) => VerdictKind::LatentCommonCause,
            (false, false) => VerdictKind::IndependentOrCommonEffect,
        }
    }

    /// The verdict with the roles of `x` and `y` exchanged.
    pub fn swapped(self) -> Self {
        match self {
            VerdictKind::YCausesX => VerdictKind::XCausesY,
            VerdictKind::XCausesY => VerdictKind::YCausesX,
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminationConfig {
    pub independence: IndependenceConfig,
    /// `|coefficient|` below this counts as zero in multivariate screening.
    pub zero_threshold: f64,
    pub seed: u64,
}

impl Default for DiscriminationConfig {
    fn default() -> Self {
        DiscriminationConfig {
            independence: IndependenceConfig::default(),
            zero_threshold: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CausalVerdict {
    pub x: usize,
    pub y: usize,
    pub kind: VerdictKind,
    /// `Σ_X` tested against `Y`.
    pub x_residual_vs_y: IndependenceReport,
    /// `Σ_Y` tested against `X`.
    pub y_residual_vs_x: IndependenceReport,
}

/// Flat export record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub x: usize,
    pub y: usize,
    pub kind: VerdictKind,
    pub dcor_xy: f64,
    pub dcor_yx: f64,
    pub p_xy: f64,
    pub p_yx: f64,
}

impl From<&CausalVerdict> for VerdictRecord {
    fn from(v: &CausalVerdict) -> Self {
        VerdictRecord {
            x: v.x,
            y: v.y,
            kind: v.kind,
            dcor_xy: v.x_residual_vs_y.statistic,
            dcor_yx: v.y_residual_vs_x.statistic,
            p_xy: v.x_residual_vs_y.p_value,
            p_yx: v.y_residual_vs_x.p_value,
        }
    }
}

/// Bivariate residual-independence verdict for the pair `(x, y)`.
///
/// Both tests share one permutation seed, so swapping `x` and `y` swaps the
/// verdict exactly.
pub fn discriminate_pair(
    data: &SampleMatrix,
    x: usize,
    y: usize,
    config: &DiscriminationConfig,
) -> Result<CausalVerdict> {
    let fit_x = fit_ols(data, x, &[y])?;
    let fit_y = fit_ols(data, y, &[x])?;
    let (col_x, col_y) = (data.column(x), data.column(y));
    let x_residual_vs_y =
        independence_test(&fit_x.residuals, &col_y, &config.independence, config.seed)?;
    let y_residual_vs_x =
        independence_test(&fit_y.residuals, &col_x, &config.independence, config.seed)?;
    Ok(CausalVerdict {
        x,
        y,
        kind: VerdictKind::from_rejections(
            x_residual_vs_y.reject_independence,
            y_residual_vs_x.reject_independence,
        ),
        x_residual_vs_y,
        y_residual_vs_x,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeJudgment {
    pub regressor: usize,
    pub coefficient: f64,
    pub present: bool,
    /// Residual of the refit without this regressor, tested against it.
    /// Only run when the coefficient is below the zero threshold.
    pub refit_independence: Option<IndependenceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultivariateReport {
    pub fit: FitResult,
    pub edges: Vec<EdgeJudgment>,
}

impl MultivariateReport {
    pub fn is_present(&self, regressor: usize) -> Option<bool> {
        self.edges
            .iter()
            .find(|e| e.regressor == regressor)
            .map(|e| e.present)
    }
}

/// Multivariate screening: a regressor is absent when its coefficient is
/// near zero and the refit without it leaves a residual independent of it.
pub fn discriminate_multivariate(
    data: &SampleMatrix,
    target: usize,
    regressors: &[usize],
    config: &DiscriminationConfig,
) -> Result<MultivariateReport> {
    let fit = fit_ols(data, target, regressors)?;
    let mut edges = Vec::with_capacity(regressors.len());
    for (k, &r) in regressors.iter().enumerate() {
        let coefficient = fit.coefficients[k];
        if coefficient.abs() >= config.zero_threshold {
            edges.push(EdgeJudgment {
                regressor: r,
                coefficient,
                present: true,
                refit_independence: None,
            });
            continue;
        }
        let rest: Vec<usize> = regressors.iter().copied().filter(|&o| o != r).collect();
        let residual = if rest.is_empty() {
            data.column(target)
        } else {
            fit_ols(data, target, &rest)?.residuals
        };
        let report = independence_test(
            &residual,
            &data.column(r),
            &config.independence,
            config.seed,
        )?;
        edges.push(EdgeJudgment {
            regressor: r,
            coefficient,
            present: report.reject_independence,
            refit_independence: Some(report),
        });
    }
    Ok(MultivariateReport { fit, edges })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{simulate, LinearScm, NoiseSpec};

    fn uniform() -> NoiseSpec {
        NoiseSpec::uniform(-1.0, 1.0)
    }

    #[test]
    fn verdict_mapping_is_total_and_exclusive() {
        use std::collections::HashSet;
        let kinds: HashSet<_> = [(false, false), (false, true), (true, false), (true, true)]
            .into_iter()
            .map(|(a, b)| VerdictKind::from_rejections(a, b))
            .collect();
        assert_eq!(kinds.len(), 4);
        for (a, b) in [(false, false), (false, true), (true, false), (true, true)] {
            assert_eq!(
                VerdictKind::from_rejections(b, a),
                VerdictKind::from_rejections(a, b).swapped()
            );
        }
    }

    #[test]
    fn effect_of_y_is_detected() {
        // Node 0 is X = 0.9·Y + E_X, node 1 is Y = E_Y.
        let scm = LinearScm::from_edges(2, &[(1, 0, 0.9)], uniform()).unwrap();
        let data = simulate(&scm, 5000, 1).unwrap();
        let v = discriminate_pair(&data, 0, 1, &DiscriminationConfig::default()).unwrap();
        assert_eq!(v.kind, VerdictKind::YCausesX, "{v:?}");
        let swapped = discriminate_pair(&data, 1, 0, &DiscriminationConfig::default()).unwrap();
        assert_eq!(swapped.kind, VerdictKind::XCausesY);
    }

    #[test]
    fn latent_common_cause_is_detected() {
        let scm = LinearScm::from_edges(3, &[(2, 0, 0.8), (2, 1, 0.8)], uniform()).unwrap();
        let data = simulate(&scm, 5000, 2).unwrap().select(&[0, 1]).unwrap();
        let v = discriminate_pair(&data, 0, 1, &DiscriminationConfig::default()).unwrap();
        assert_eq!(v.kind, VerdictKind::LatentCommonCause, "{v:?}");
    }

    #[test]
    fn independent_roots() {
        let scm = LinearScm::from_edges(2, &[], uniform()).unwrap();
        let data = simulate(&scm, 2000, 3).unwrap();
        let v = discriminate_pair(&data, 0, 1, &DiscriminationConfig::default()).unwrap();
        assert_eq!(v.kind, VerdictKind::IndependentOrCommonEffect);
    }

    #[test]
    fn four_node_multivariate_screening() {
        let scm =
            LinearScm::from_edges(4, &[(0, 1, 0.8), (0, 2, 0.6), (2, 3, 0.5)], uniform()).unwrap();
        let data = simulate(&scm, 5000, 4).unwrap();
        let report =
            discriminate_multivariate(&data, 3, &[1, 2], &DiscriminationConfig::default()).unwrap();
        assert_eq!(report.is_present(1), Some(false));
        assert_eq!(report.is_present(2), Some(true));
    }

    #[test]
    fn chain_screens_off_indirect_link() {
        let scm = LinearScm::from_edges(3, &[(0, 1, 0.8), (1, 2, 0.8)], uniform()).unwrap();
        let data = simulate(&scm, 5000, 5).unwrap();
        let report =
            discriminate_multivariate(&data, 2, &[0, 1], &DiscriminationConfig::default()).unwrap();
        assert_eq!(report.is_present(0), Some(false));
        assert_eq!(report.is_present(1), Some(true));
    }

    #[test]
    fn copy_regressor_is_present() {
        let scm = LinearScm::from_edges(2, &[], uniform()).unwrap();
        let data = simulate(&scm, 500, 6).unwrap();
        let copy =
            SampleMatrix::from_columns(&[data.column(0), data.column(1), data.column(0)]).unwrap();
        let report =
            discriminate_multivariate(&copy, 0, &[2], &DiscriminationConfig::default()).unwrap();
        assert_eq!(report.is_present(2), Some(true));
        assert!((report.fit.coefficients[0] - 1.0).abs() < 1e-12);
        assert!(report.fit.residuals.iter().all(|r| r.abs() < 1e-12));
    }

    #[test]
    fn record_export_shape() {
        let scm = LinearScm::from_edges(2, &[(0, 1, 0.9)], uniform()).unwrap();
        let data = simulate(&scm, 500, 7).unwrap();
        let v = discriminate_pair(&data, 0, 1, &DiscriminationConfig::default()).unwrap();
        let json = serde_json::to_value(VerdictRecord::from(&v)).unwrap();
        for key in ["x", "y", "kind", "dcor_xy", "dcor_yx", "p_xy", "p_yx"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }
}
