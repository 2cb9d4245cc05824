//! Linear structural causal models of a dialogue.
//!
//! Every node `t` obeys `U_t = Σ_i weights[i][t] · U_i + E_t` where the
//! exogenous terms `E_t` are mutually independent. Stacking the nodes gives
//! `U = Aᵀ U + E`, hence `U = (I − Aᵀ)⁻¹ E`; since `A` is restricted to a DAG
//! the inverse is computed by forward substitution along `topo_order`.

mod fit;
mod intervention;

pub use fit::{fit_ols, pearson, population_fit, FitResult};
pub use intervention::{
    confounding_test_adjacent, confounding_test_nonadjacent, fix_nodes, intervene,
    ConfoundingConfig,
};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Distribution of one node's exogenous term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseFamily {
    Gaussian { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl NoiseFamily {
    pub fn variance(&self) -> f64 {
        match *self {
            NoiseFamily::Gaussian { std, .. } => std * std,
            NoiseFamily::Uniform { lo, hi } => (hi - lo) * (hi - lo) / 12.0,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            NoiseFamily::Gaussian { mean, .. } => mean,
            NoiseFamily::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            NoiseFamily::Gaussian { mean, std } => {
                if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
                    return Err(Error::Validation(format!(
                        "gaussian noise needs finite mean and std > 0, got ({mean}, {std})"
                    )));
                }
            }
            NoiseFamily::Uniform { lo, hi } => {
                if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                    return Err(Error::Validation(format!(
                        "uniform noise needs finite lo < hi, got ({lo}, {hi})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Draws one value. Parameters are validated at construction.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseFamily::Gaussian { mean, std } => Normal::new(mean, std)
                .expect("validated gaussian")
                .sample(rng),
            NoiseFamily::Uniform { lo, hi } => {
                Uniform::new(lo, hi).expect("validated uniform").sample(rng)
            }
        }
    }
}

/// Per-node noise specification: family plus vector dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawNoise", into = "RawNoise")]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub dim: usize,
}

impl NoiseSpec {
    pub fn gaussian(mean: f64, std: f64) -> Self {
        NoiseSpec {
            family: NoiseFamily::Gaussian { mean, std },
            dim: 1,
        }
    }

    pub fn uniform(lo: f64, hi: f64) -> Self {
        NoiseSpec {
            family: NoiseFamily::Uniform { lo, hi },
            dim: 1,
        }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Validation("noise dimension must be >= 1".into()));
        }
        self.family.validate()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNoise {
    family: String,
    params: [f64; 2],
    dim: usize,
}

impl TryFrom<RawNoise> for NoiseSpec {
    type Error = Error;

    fn try_from(raw: RawNoise) -> Result<Self> {
        let [p0, p1] = raw.params;
        let family = match raw.family.as_str() {
            "gaussian" => NoiseFamily::Gaussian { mean: p0, std: p1 },
            "uniform" => NoiseFamily::Uniform { lo: p0, hi: p1 },
            other => return Err(Error::Validation(format!("unknown noise family {other:?}"))),
        };
        let spec = NoiseSpec {
            family,
            dim: raw.dim,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<NoiseSpec> for RawNoise {
    fn from(spec: NoiseSpec) -> Self {
        let (family, params) = match spec.family {
            NoiseFamily::Gaussian { mean, std } => ("gaussian", [mean, std]),
            NoiseFamily::Uniform { lo, hi } => ("uniform", [lo, hi]),
        };
        RawNoise {
            family: family.into(),
            params,
            dim: spec.dim,
        }
    }
}

/// A linear SCM over `n_nodes` variables.
///
/// `weights` is dense row-major: `weights[i * n + t]` is the strength of the
/// edge `i → t`. `topo_order` lists node indices so that every edge points
/// forward in the list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScm", into = "RawScm")]
pub struct LinearScm {
    n_nodes: usize,
    weights: Vec<f64>,
    noise: Vec<NoiseSpec>,
    topo_order: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScm {
    n_nodes: usize,
    weights: Vec<f64>,
    noise: Vec<NoiseSpec>,
    #[serde(default)]
    topo_order: Option<Vec<usize>>,
}

impl TryFrom<RawScm> for LinearScm {
    type Error = Error;

    fn try_from(raw: RawScm) -> Result<Self> {
        let scm = LinearScm::new(raw.n_nodes, raw.weights, raw.noise)?;
        if let Some(order) = raw.topo_order {
            scm.check_order(&order)?;
            return Ok(LinearScm {
                topo_order: order,
                ..scm
            });
        }
        Ok(scm)
    }
}

impl From<LinearScm> for RawScm {
    fn from(scm: LinearScm) -> Self {
        RawScm {
            n_nodes: scm.n_nodes,
            weights: scm.weights,
            noise: scm.noise,
            topo_order: Some(scm.topo_order),
        }
    }
}

impl LinearScm {
    /// Builds an SCM from a dense row-major weight matrix, validating the DAG
    /// invariant and deriving a topological order.
    pub fn new(n_nodes: usize, weights: Vec<f64>, noise: Vec<NoiseSpec>) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::Validation("an SCM needs at least one node".into()));
        }
        if weights.len() != n_nodes * n_nodes {
            return Err(Error::Validation(format!(
                "weights has {} entries, expected {}",
                weights.len(),
                n_nodes * n_nodes
            )));
        }
        if noise.len() != n_nodes {
            return Err(Error::Validation(format!(
                "{} noise specs for {n_nodes} nodes",
                noise.len()
            )));
        }
        if let Some(pos) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite weight at ({}, {})",
                pos / n_nodes,
                pos % n_nodes
            )));
        }
        for spec in &noise {
            spec.validate()?;
        }
        for i in 0..n_nodes {
            if weights[i * n_nodes + i] != 0.0 {
                return Err(Error::Structural(format!("self-loop on node {i}")));
            }
        }
        let topo_order = topological_order(n_nodes, &weights)?;
        Ok(LinearScm {
            n_nodes,
            weights,
            noise,
            topo_order,
        })
    }

    /// Builds an SCM from an edge list `(source, target, weight)` with the
    /// same noise on every node.
    pub fn from_edges(
        n_nodes: usize,
        edges: &[(usize, usize, f64)],
        noise: NoiseSpec,
    ) -> Result<Self> {
        let mut weights = vec![0.0; n_nodes * n_nodes];
        for &(i, t, w) in edges {
            if i >= n_nodes || t >= n_nodes {
                return Err(Error::Validation(format!("edge ({i}, {t}) out of range")));
            }
            weights[i * n_nodes + t] = w;
        }
        LinearScm::new(n_nodes, weights, vec![noise; n_nodes])
    }

    fn check_order(&self, order: &[usize]) -> Result<()> {
        let n = self.n_nodes;
        let mut rank = vec![usize::MAX; n];
        for (pos, &node) in order.iter().enumerate() {
            if node >= n || rank[node] != usize::MAX {
                return Err(Error::Validation("topo_order is not a permutation".into()));
            }
            rank[node] = pos;
        }
        if order.len() != n {
            return Err(Error::Validation("topo_order is not a permutation".into()));
        }
        for i in 0..n {
            for t in 0..n {
                if self.weight(i, t) != 0.0 && rank[i] >= rank[t] {
                    return Err(Error::Structural(format!(
                        "edge {i} -> {t} points backwards in topo_order"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn weight(&self, source: usize, target: usize) -> f64 {
        self.weights[source * self.n_nodes + target]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn noise(&self) -> &[NoiseSpec] {
        &self.noise
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo_order
    }

    /// Nodes with a nonzero edge into `target` (the `rel_t` set).
    pub fn parents(&self, target: usize) -> Vec<usize> {
        (0..self.n_nodes)
            .filter(|&i| self.weight(i, target) != 0.0)
            .collect()
    }

    pub fn is_adjacent(&self, a: usize, b: usize) -> bool {
        self.weight(a, b) != 0.0 || self.weight(b, a) != 0.0
    }

    /// Common vector dimension of all nodes.
    pub fn dimension(&self) -> Result<usize> {
        let dim = self.noise[0].dim;
        if self.noise.iter().any(|s| s.dim != dim) {
            return Err(Error::Validation(
                "nodes have differing noise dimensions".into(),
            ));
        }
        Ok(dim)
    }

    /// Total-effect matrix `T = (I − Aᵀ)⁻¹` in row-major form: `U_t = Σ_k T[t][k] E_k`.
    pub fn total_effects(&self) -> Vec<f64> {
        let n = self.n_nodes;
        let mut total = vec![0.0; n * n];
        for &t in &self.topo_order {
            total[t * n + t] = 1.0;
            for i in 0..n {
                let w = self.weight(i, t);
                if w != 0.0 {
                    for k in 0..n {
                        total[t * n + k] += w * total[i * n + k];
                    }
                }
            }
        }
        total
    }

    /// `I − Aᵀ` with rows and columns permuted into topological order. For a
    /// valid SCM this is unit lower-triangular.
    pub fn permuted_structural_matrix(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n_nodes;
        nalgebra::DMatrix::from_fn(n, n, |r, c| {
            let (t, i) = (self.topo_order[r], self.topo_order[c]);
            let identity = if r == c { 1.0 } else { 0.0 };
            identity - self.weight(i, t)
        })
    }

    /// Solves `U = Aᵀ U + E` for one realization, `noise[node * dim + d]`.
    pub fn solve_structural(&self, noise: &[f64], dim: usize) -> Vec<f64> {
        let n = self.n_nodes;
        let mut values = noise.to_vec();
        for &t in &self.topo_order {
            for i in 0..n {
                let w = self.weight(i, t);
                if w != 0.0 {
                    for d in 0..dim {
                        values[t * dim + d] += w * values[i * dim + d];
                    }
                }
            }
        }
        values
    }

    /// Recovers `E = (I − Aᵀ) U` for one realization.
    pub fn implied_noise(&self, values: &[f64], dim: usize) -> Vec<f64> {
        let n = self.n_nodes;
        let mut noise = values.to_vec();
        for t in 0..n {
            for i in 0..n {
                let w = self.weight(i, t);
                if w != 0.0 {
                    for d in 0..dim {
                        noise[t * dim + d] -= w * values[i * dim + d];
                    }
                }
            }
        }
        noise
    }
}

fn topological_order(n: usize, weights: &[f64]) -> Result<Vec<usize>> {
    let mut indegree = vec![0usize; n];
    for i in 0..n {
        for t in 0..n {
            if weights[i * n + t] != 0.0 {
                indegree[t] += 1;
            }
        }
    }
    // Smallest ready index first keeps the order stable for already-sorted graphs.
    let mut ready: std::collections::BTreeSet<usize> =
        (0..n).filter(|&t| indegree[t] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for t in 0..n {
            if weights[i * n + t] != 0.0 {
                indegree[t] -= 1;
                if indegree[t] == 0 {
                    ready.insert(t);
                }
            }
        }
    }
    if order.len() != n {
        let stuck: Vec<usize> = (0..n).filter(|&t| indegree[t] > 0).collect();
        return Err(Error::Structural(format!("cycle among nodes {stuck:?}")));
    }
    Ok(order)
}

/// Realized node values: `n_samples × n_nodes × dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMatrix {
    n_samples: usize,
    n_nodes: usize,
    dim: usize,
    values: Vec<f64>,
    pub provenance: String,
}

impl SampleMatrix {
    pub fn new(n_samples: usize, n_nodes: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if n_samples == 0 || n_nodes == 0 || dim == 0 {
            return Err(Error::Validation(
                "sample matrix dimensions must be >= 1".into(),
            ));
        }
        if values.len() != n_samples * n_nodes * dim {
            return Err(Error::Validation(format!(
                "{} values for a {n_samples}x{n_nodes}x{dim} sample matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(
                "sample matrix has non-finite entries".into(),
            ));
        }
        Ok(SampleMatrix {
            n_samples,
            n_nodes,
            dim,
            values,
            provenance: String::new(),
        })
    }

    /// Builds a scalar (`dim = 1`) matrix from per-node columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let n_nodes = columns.len();
        let n_samples = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n_samples) {
            return Err(Error::Validation("columns have unequal lengths".into()));
        }
        let mut values = Vec::with_capacity(n_samples * n_nodes);
        for s in 0..n_samples {
            values.extend(columns.iter().map(|c| c[s]));
        }
        SampleMatrix::new(n_samples, n_nodes, 1, values)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, sample: usize, node: usize, d: usize) -> f64 {
        self.values[(sample * self.n_nodes + node) * self.dim + d]
    }

    /// Row-block of one sample: `n_nodes × dim`.
    pub fn sample(&self, sample: usize) -> &[f64] {
        let len = self.n_nodes * self.dim;
        &self.values[sample * len..(sample + 1) * len]
    }

    /// One node's values with vector dimensions stacked as extra samples.
    pub fn column(&self, node: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_samples * self.dim);
        for s in 0..self.n_samples {
            let base = (s * self.n_nodes + node) * self.dim;
            out.extend_from_slice(&self.values[base..base + self.dim]);
        }
        out
    }

    /// Keeps only the listed nodes, in the given order.
    pub fn select(&self, nodes: &[usize]) -> Result<SampleMatrix> {
        if let Some(&bad) = nodes.iter().find(|&&n| n >= self.n_nodes) {
            return Err(Error::Validation(format!("node {bad} out of range")));
        }
        let mut values = Vec::with_capacity(self.n_samples * nodes.len() * self.dim);
        for s in 0..self.n_samples {
            for &node in nodes {
                let base = (s * self.n_nodes + node) * self.dim;
                values.extend_from_slice(&self.values[base..base + self.dim]);
            }
        }
        let mut out = SampleMatrix::new(self.n_samples, nodes.len(), self.dim, values)?;
        out.provenance = format!("{} [nodes {:?}]", self.provenance, nodes);
        Ok(out)
    }

    pub(crate) fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.n_nodes {
            return Err(Error::Validation(format!(
                "node {node} out of range for {} nodes",
                self.n_nodes
            )));
        }
        Ok(())
    }
}

/// Draws `n_samples` independent realizations of `scm`.
pub fn simulate(scm: &LinearScm, n_samples: usize, seed: u64) -> Result<SampleMatrix> {
    simulate_with_noise(scm, n_samples, seed).map(|(data, _)| data)
}

/// Like [`simulate`], also returning the exogenous draws in the same layout.
pub fn simulate_with_noise(
    scm: &LinearScm,
    n_samples: usize,
    seed: u64,
) -> Result<(SampleMatrix, SampleMatrix)> {
    if n_samples == 0 {
        return Err(Error::Validation("n_samples must be >= 1".into()));
    }
    let dim = scm.dimension()?;
    let n = scm.n_nodes();
    let mut rng = rng_from(seed);
    let mut values = Vec::with_capacity(n_samples * n * dim);
    let mut noise_all = Vec::with_capacity(n_samples * n * dim);
    let mut noise = vec![0.0; n * dim];
    for _ in 0..n_samples {
        for (node, spec) in scm.noise().iter().enumerate() {
            for d in 0..dim {
                noise[node * dim + d] = spec.family.draw(&mut rng);
            }
        }
        values.extend(scm.solve_structural(&noise, dim));
        noise_all.extend_from_slice(&noise);
    }
    let provenance = format!("simulate(seed={seed}, n={n_samples})");
    let mut data = SampleMatrix::new(n_samples, n, dim, values)?;
    data.provenance = provenance.clone();
    let mut noise = SampleMatrix::new(n_samples, n, dim, noise_all)?;
    noise.provenance = provenance;
    Ok((data, noise))
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn structural_solve_inverts_noise_recovery(
            n in 1usize..6,
            weights in prop::collection::vec(-1.5f64..1.5, 36),
            keep in prop::collection::vec(any::<bool>(), 36),
            noise in prop::collection::vec(-1.0f64..1.0, 6),
        ) {
            // Strictly upper-triangular weights under a fixed node order.
            let w: Vec<f64> = (0..n * n)
                .map(|k| if k / n < k % n && keep[k] { weights[k] } else { 0.0 })
                .collect();
            let scm = LinearScm::new(n, w, vec![NoiseSpec::uniform(-1.0, 1.0); n]).unwrap();
            let values = scm.solve_structural(&noise[..n], 1);
            let back = scm.implied_noise(&values, 1);
            for (a, b) in back.iter().zip(&noise[..n]) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
