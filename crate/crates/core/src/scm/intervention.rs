//! Interventions `do(X) := Pa(X) = ∅` and the two latent-confounder probes.

use serde::{Deserialize, Serialize};

use super::{fit_ols, simulate, LinearScm, SampleMatrix};
use crate::error::{Error, Result};
use crate::independence::{independence_test, IndependenceConfig};

/// Removes every incoming edge of the listed nodes.
pub fn intervene(scm: &LinearScm, nodes: &[usize]) -> Result<LinearScm> {
    let n = scm.n_nodes();
    if let Some(&bad) = nodes.iter().find(|&&v| v >= n) {
        return Err(Error::Validation(format!(
            "intervention node {bad} out of range"
        )));
    }
    let mut weights = scm.weights().to_vec();
    for &t in nodes {
        for i in 0..n {
            weights[i * n + t] = 0.0;
        }
    }
    LinearScm::new(n, weights, scm.noise().to_vec())
}

/// `do(X = x)` for constant values: removes every outgoing edge of the
/// listed nodes. Fixing a node at a constant only shifts its descendants'
/// means, so dependence structure matches this graph exactly.
pub fn fix_nodes(scm: &LinearScm, nodes: &[usize]) -> Result<LinearScm> {
    let n = scm.n_nodes();
    if let Some(&bad) = nodes.iter().find(|&&v| v >= n) {
        return Err(Error::Validation(format!(
            "intervention node {bad} out of range"
        )));
    }
    let mut weights = scm.weights().to_vec();
    for &s in nodes {
        weights[s * n..(s + 1) * n].fill(0.0);
    }
    LinearScm::new(n, weights, scm.noise().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfoundingConfig {
    pub independence: IndependenceConfig,
    pub min_samples: usize,
    /// Slopes differ when `|obs − int| > slope_tolerance_se · pooled SE`.
    pub slope_tolerance_se: f64,
    pub seed: u64,
}

impl Default for ConfoundingConfig {
    fn default() -> Self {
        ConfoundingConfig {
            independence: IndependenceConfig::default(),
            min_samples: 100,
            slope_tolerance_se: 5.0,
            seed: 0,
        }
    }
}

fn require_samples(got: usize, need: usize) -> Result<()> {
    if got < need {
        return Err(Error::SampleSize { got, need });
    }
    Ok(())
}

/// For data drawn after intervening on the parents of `i` and `j`: reports
/// whether `U_i` and `U_j` remain dependent, which witnesses a latent
/// confounder.
pub fn confounding_test_nonadjacent(
    data: &SampleMatrix,
    i: usize,
    j: usize,
    config: &ConfoundingConfig,
) -> Result<bool> {
    data.check_node(i)?;
    data.check_node(j)?;
    require_samples(data.n_samples() * data.dim(), config.min_samples)?;
    let report = independence_test(
        &data.column(i),
        &data.column(j),
        &config.independence,
        config.seed,
    )?;
    Ok(report.reject_independence)
}

/// Slope and standard error of the bivariate regression of `j` on `i`.
fn slope_with_se(data: &SampleMatrix, i: usize, j: usize) -> Result<(f64, f64)> {
    let fit = fit_ols(data, j, &[i])?;
    let x = data.column(i);
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mean) * (v - mean)).sum();
    let rss: f64 = fit.residuals.iter().map(|r| r * r).sum();
    let sigma2 = rss / (n - 2.0);
    Ok((fit.coefficients[0], (sigma2 / sxx).sqrt()))
}

/// Compares the observational slope of `j` on `i` with the slope under
/// `do(i)`, simulated from `scm` (which may contain nodes that are hidden
/// from the observational data's analyst). Returns true when they differ.
pub fn confounding_test_adjacent(
    scm: &LinearScm,
    data_obs: &SampleMatrix,
    i: usize,
    j: usize,
    n_samples: usize,
    config: &ConfoundingConfig,
) -> Result<bool> {
    data_obs.check_node(i)?;
    data_obs.check_node(j)?;
    if i >= scm.n_nodes() || j >= scm.n_nodes() {
        return Err(Error::Validation(format!(
            "pair ({i}, {j}) out of range for the SCM"
        )));
    }
    if scm.weight(i, j) == 0.0 && scm.weight(j, i) != 0.0 {
        return Err(Error::Validation(format!(
            "edge {i} -> {j} points the other way"
        )));
    }
    require_samples(data_obs.n_samples() * data_obs.dim(), config.min_samples)?;
    require_samples(n_samples, config.min_samples)?;
    let intervened = intervene(scm, &[i])?;
    let data_int = simulate(&intervened, n_samples, config.seed)?;
    let (obs, se_obs) = slope_with_se(data_obs, i, j)?;
    let (int, se_int) = slope_with_se(&data_int, i, j)?;
    let pooled = (se_obs * se_obs + se_int * se_int).sqrt();
    Ok((obs - int).abs() > config.slope_tolerance_se * pooled)
}
