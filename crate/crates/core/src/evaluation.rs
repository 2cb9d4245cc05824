//! Measurement protocols: causal-discriminability challenge suites, recovery
//! of implicit causes by linear probes, and the E-versus-Ĥ emotion
//! consistency comparison.

use std::collections::HashMap;
use std::fmt;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::discrimination::{
    discriminate_multivariate, discriminate_pair, DiscriminationConfig, VerdictKind,
};
use crate::error::{Error, Result};
use crate::model::{skeleton_mask_for, ModelConfig, ModelState, PreparedSample};
use crate::probe::{pca_2d, LogisticProbe, DEFAULT_RIDGE};
use crate::scm::{simulate, LinearScm, NoiseSpec, SampleMatrix};
use crate::seed::{derive_seed, derived_rng};
use crate::skeleton::Conversation;
use crate::synth::{Corpus, SyntheticConfig, SyntheticSample};
use crate::tensor::Tensor;

const STREAM_CHALLENGE: u64 = 0x4348_414c;

/// `(cause, effect)` node indices.
type Pair = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChallengeType {
    /// `0 → 1`; positive `(0, 1)`, negative `(1, 0)`.
    Reversal,
    /// `0 → 1 → 2`; positives `(0, 1), (1, 2)`, negative `(0, 2)`.
    Chain,
    /// `2 → 0, 2 → 1`; positives `(2, 0), (2, 1)`, negative `(0, 1)`.
    CommonCause,
}

impl ChallengeType {
    pub const ALL: [ChallengeType; 3] = [
        ChallengeType::Reversal,
        ChallengeType::Chain,
        ChallengeType::CommonCause,
    ];

    pub fn n_nodes(self) -> usize {
        match self {
            ChallengeType::Reversal => 2,
            _ => 3,
        }
    }

    fn pairs(self) -> (Vec<Pair>, Vec<Pair>) {
        match self {
            ChallengeType::Reversal => (vec![(0, 1)], vec![(1, 0)]),
            ChallengeType::Chain => (vec![(0, 1), (1, 2)], vec![(0, 2)]),
            ChallengeType::CommonCause => (vec![(2, 0), (2, 1)], vec![(0, 1)]),
        }
    }
}

impl fmt::Display for ChallengeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl std::str::FromStr for ChallengeType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "reversal" => Ok(ChallengeType::Reversal),
            "chain" => Ok(ChallengeType::Chain),
            "commoncause" => Ok(ChallengeType::CommonCause),
            _ => Err(Error::Validation(format!(
                "unknown challenge type {s:?} (Reversal, Chain, CommonCause)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChallengeConfig {
    pub n_samples: usize,
    pub weight_range: [f64; 2],
    pub noise: NoiseSpec,
}

impl Default for ChallengeConfig {
    fn default() -> Self {
        ChallengeConfig {
            n_samples: 5000,
            weight_range: [0.7, 1.0],
            noise: NoiseSpec::uniform(-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengeInstance {
    pub id: String,
    pub model_type: ChallengeType,
    pub scm: LinearScm,
    pub data: SampleMatrix,
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengeSet {
    pub model_type: ChallengeType,
    pub instances: Vec<ChallengeInstance>,
}

/// Builds `n_instances` SCMs of the named shape with weights drawn from
/// `config.weight_range`, each simulated with its own derived seed.
pub fn generate_challenges(
    model_type: ChallengeType,
    n_instances: usize,
    config: &ChallengeConfig,
    seed: u64,
) -> Result<ChallengeSet> {
    if n_instances == 0 {
        return Err(Error::Validation("n_instances must be >= 1".into()));
    }
    let [lo, hi] = config.weight_range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::Validation(format!(
            "invalid weight range [{lo}, {hi}]"
        )));
    }
    config.noise.validate()?;
    let (positives, negatives) = model_type.pairs();
    let mut instances = Vec::with_capacity(n_instances);
    for idx in 0..n_instances {
        let mut rng = derived_rng(seed, STREAM_CHALLENGE, idx as u64);
        let mut w = || {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        };
        let edges: Vec<(usize, usize, f64)> = positives.iter().map(|&(s, t)| (s, t, w())).collect();
        let scm = LinearScm::from_edges(model_type.n_nodes(), &edges, config.noise)?;
        let data = simulate(
            &scm,
            config.n_samples,
            derive_seed(seed, STREAM_CHALLENGE ^ 1, idx as u64),
        )?;
        instances.push(ChallengeInstance {
            id: format!("{}-{idx:04}", model_type.to_string().to_lowercase()),
            model_type,
            scm,
            data,
            positives: positives.clone(),
            negatives: negatives.clone(),
        });
    }
    Ok(ChallengeSet {
        model_type,
        instances,
    })
}

/// Accepts or rejects the claim "`pair.0` causes `pair.1`" for one instance.
pub trait PairPredictor {
    fn name(&self) -> String;
    fn accepts(&self, instance: &ChallengeInstance, pair: (usize, usize)) -> Result<bool>;

    /// Decisions for several pairs of one instance.
    fn decide(&self, instance: &ChallengeInstance, pairs: &[(usize, usize)]) -> Result<Vec<bool>> {
        pairs.iter().map(|&p| self.accepts(instance, p)).collect()
    }
}

/// Reads the ground-truth edge from the instance's SCM.
pub struct OraclePredictor;

impl PairPredictor for OraclePredictor {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn accepts(&self, instance: &ChallengeInstance, (a, b): (usize, usize)) -> Result<bool> {
        Ok(instance.scm.weight(a, b) != 0.0)
    }
}

pub struct AlwaysAccept;

impl PairPredictor for AlwaysAccept {
    fn name(&self) -> String {
        "always-accept".into()
    }

    fn accepts(&self, _: &ChallengeInstance, _: (usize, usize)) -> Result<bool> {
        Ok(true)
    }
}

/// Residual-independence predictor. Chain instances use the multivariate
/// screen (target `b` regressed on every other node, `a` must survive);
/// the other shapes use the bivariate verdict, which must read `a → b`.
#[derive(Debug, Clone, Default)]
pub struct ReferencePredictor {
    pub config: DiscriminationConfig,
}

impl ReferencePredictor {
    fn decide_cached(
        &self,
        instance: &ChallengeInstance,
        (a, b): (usize, usize),
        cache: &mut HashMap<(usize, usize), VerdictKind>,
    ) -> Result<bool> {
        let n = instance.data.n_nodes();
        if a >= n || b >= n || a == b {
            return Err(Error::Validation(format!(
                "pair ({a}, {b}) invalid for {n} nodes"
            )));
        }
        if instance.model_type == ChallengeType::Chain {
            let others: Vec<usize> = (0..n).filter(|&v| v != b).collect();
            let report = discriminate_multivariate(&instance.data, b, &others, &self.config)?;
            return Ok(report.is_present(a).unwrap_or(false));
        }
        let (lo, hi) = (a.min(b), a.max(b));
        let kind = match cache.get(&(lo, hi)) {
            Some(&k) => k,
            None => {
                let k = discriminate_pair(&instance.data, lo, hi, &self.config)?.kind;
                cache.insert((lo, hi), k);
                k
            }
        };
        let kind = if a == lo { kind } else { kind.swapped() };
        Ok(kind == VerdictKind::XCausesY)
    }
}

impl PairPredictor for ReferencePredictor {
    fn name(&self) -> String {
        "reference".into()
    }

    fn accepts(&self, instance: &ChallengeInstance, pair: (usize, usize)) -> Result<bool> {
        self.decide_cached(instance, pair, &mut HashMap::new())
    }

    /// Shares one bivariate verdict between `(a, b)` and `(b, a)`.
    fn decide(&self, instance: &ChallengeInstance, pairs: &[(usize, usize)]) -> Result<Vec<bool>> {
        let mut cache = HashMap::new();
        pairs
            .iter()
            .map(|&p| self.decide_cached(instance, p, &mut cache))
            .collect()
    }
}

/// Calls an edge when the final-layer attention weight `A[a][b]` reaches
/// `0.5 / |rel_b|`, half the uniform attention mass. Each node's vector is
/// its first `input_dim` samples, laid out as an alternating conversation.
pub struct LearnedPredictor<'m> {
    pub model: &'m ModelState,
}

impl LearnedPredictor<'_> {
    pub fn adjacency(&self, instance: &ChallengeInstance) -> Result<(Tensor, Vec<bool>)> {
        let dim = self.model.input_dim;
        let data = &instance.data;
        let n = data.n_nodes();
        if data.n_samples() * data.dim() < dim {
            return Err(Error::Validation(format!(
                "instance has {} values per node, model needs {dim}",
                data.n_samples() * data.dim()
            )));
        }
        let rows: Vec<Vec<f64>> = (0..n).map(|v| data.column(v)[..dim].to_vec()).collect();
        let mask = skeleton_mask_for(&Conversation::alternating(n)?, &self.model.config)?;
        let (a, _) = self.model.encode(&Tensor::from_rows(&rows)?, &mask)?;
        Ok((a, mask))
    }
}

impl PairPredictor for LearnedPredictor<'_> {
    fn name(&self) -> String {
        "learned".into()
    }

    fn accepts(&self, instance: &ChallengeInstance, (a, b): (usize, usize)) -> Result<bool> {
        let (adj, mask) = self.adjacency(instance)?;
        let n = adj.rows();
        if a >= n || b >= n {
            return Err(Error::Validation(format!(
                "pair ({a}, {b}) invalid for {n} nodes"
            )));
        }
        let rel = (0..n).filter(|&i| mask[i * n + b]).count();
        Ok(mask[a * n + b] && adj.get(a, b) >= 0.5 / rel as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairDecision {
    pub pair: (usize, usize),
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceDecisions {
    pub id: String,
    pub positives: Vec<PairDecision>,
    pub negatives: Vec<PairDecision>,
}

/// Percentages of positive and negative pairs the predictor accepted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminabilityScore {
    pub pos_pct: f64,
    pub neg_pct: f64,
}

impl DiscriminabilityScore {
    pub fn from_decisions(decisions: &[InstanceDecisions]) -> Self {
        let pct = |pick: fn(&InstanceDecisions) -> &Vec<PairDecision>| {
            let all: Vec<&PairDecision> = decisions.iter().flat_map(pick).collect();
            if all.is_empty() {
                return f64::NAN;
            }
            all.iter().filter(|d| d.accepted).count() as f64 / all.len() as f64 * 100.0
        };
        DiscriminabilityScore {
            pos_pct: pct(|d| &d.positives),
            neg_pct: pct(|d| &d.negatives),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChallengeReport {
    pub model_type: ChallengeType,
    pub predictor: String,
    pub n_instances: usize,
    pub pos_pct: f64,
    pub neg_pct: f64,
    pub decisions: Vec<InstanceDecisions>,
}

impl ChallengeReport {
    pub fn score(&self) -> DiscriminabilityScore {
        DiscriminabilityScore {
            pos_pct: self.pos_pct,
            neg_pct: self.neg_pct,
        }
    }
}

pub fn score_challenges(
    set: &ChallengeSet,
    predictor: &dyn PairPredictor,
) -> Result<ChallengeReport> {
    let mut decisions = Vec::with_capacity(set.instances.len());
    for inst in &set.instances {
        let pairs: Vec<(usize, usize)> = inst
            .positives
            .iter()
            .chain(&inst.negatives)
            .copied()
            .collect();
        let accepted = predictor
            .decide(inst, &pairs)
            .map_err(|e| e.context(format!("instance {}", inst.id)))?;
        if accepted.len() != pairs.len() {
            return Err(Error::Validation(format!(
                "instance {}: predictor returned {} decisions for {} pairs",
                inst.id,
                accepted.len(),
                pairs.len()
            )));
        }
        let mut all = pairs
            .into_iter()
            .zip(accepted)
            .map(|(pair, accepted)| PairDecision { pair, accepted });
        decisions.push(InstanceDecisions {
            id: inst.id.clone(),
            positives: all.by_ref().take(inst.positives.len()).collect(),
            negatives: all.collect(),
        });
    }
    let score = DiscriminabilityScore::from_decisions(&decisions);
    Ok(ChallengeReport {
        model_type: set.model_type,
        predictor: predictor.name(),
        n_instances: set.instances.len(),
        pos_pct: score.pos_pct,
        neg_pct: score.neg_pct,
        decisions,
    })
}

/// Corpus and model settings of the implicit-cause recovery study.
pub fn recovery_study_configs() -> (SyntheticConfig, ModelConfig) {
    let model = ModelConfig {
        learning_rate: 3e-3,
        epochs: 20,
        ..ModelConfig::desk()
    };
    (SyntheticConfig::default(), model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub label: bool,
}

pub fn projection_csv(points: &[ProjectionPoint]) -> String {
    let mut out = String::from("id,x,y,label\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.id, p.x, p.y, u8::from(p.label));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// Held-out probe accuracy on the model's `E`.
    pub probe_acc_learned_e: f64,
    /// Held-out probe accuracy on the generator's implicit causes.
    pub probe_acc_true_e: f64,
    /// Held-out probe accuracy on the raw utterance vectors.
    pub probe_acc_input: f64,
    pub n_train_rows: usize,
    pub n_eval_rows: usize,
    pub eval_split: String,
    pub epochs_trained: usize,
    /// Set when the model has never been trained.
    pub flags: Vec<String>,
    #[serde(skip)]
    pub projection: Vec<ProjectionPoint>,
}

struct Rows {
    ids: Vec<String>,
    learned_e: Vec<Vec<f64>>,
    h_hat: Vec<Vec<f64>>,
    true_e: Vec<Vec<f64>>,
    input: Vec<Vec<f64>>,
    labels: Vec<bool>,
    /// Utterance has an ECP partner carrying the other label.
    restricted: Vec<bool>,
}

fn collect_rows(
    samples: &[SyntheticSample],
    encode: &dyn Fn(&SyntheticSample) -> Result<(Tensor, Tensor)>,
) -> Result<Rows> {
    let mut rows = Rows {
        ids: Vec::new(),
        learned_e: Vec::new(),
        h_hat: Vec::new(),
        true_e: Vec::new(),
        input: Vec::new(),
        labels: Vec::new(),
        restricted: Vec::new(),
    };
    for s in samples {
        let (e, h_hat) = encode(s).map_err(|err| err.context(format!("sample {}", s.id)))?;
        let labels = s.labels();
        let mut restricted = vec![false; s.len()];
        for &(t, i) in s.conversation.ecp() {
            let (t, i) = (t - 1, i - 1);
            if labels[t] != labels[i] {
                restricted[t] = true;
                restricted[i] = true;
            }
        }
        rows.ids
            .extend((0..s.len()).map(|t| format!("{}:{t}", s.id)));
        rows.learned_e.extend(e.to_rows());
        rows.h_hat.extend(h_hat.to_rows());
        rows.true_e.extend(s.implicit_causes.iter().cloned());
        rows.input.extend(s.vectors.iter().cloned());
        rows.labels.extend(labels);
        rows.restricted.extend(restricted);
    }
    Ok(rows)
}

fn model_encoder(model: &ModelState) -> impl Fn(&SyntheticSample) -> Result<(Tensor, Tensor)> + '_ {
    move |s| {
        let out = model.forward(&PreparedSample::new(s, &model.config)?)?;
        Ok((out.e, out.h_hat))
    }
}

/// Held-out split: test, falling back to validation.
fn held_out(corpus: &Corpus) -> Result<(&'static str, &[SyntheticSample])> {
    if corpus.train.is_empty() {
        return Err(Error::Validation("corpus has no training split".into()));
    }
    match (corpus.test.is_empty(), corpus.val.is_empty()) {
        (false, _) => Ok(("test", &corpus.test)),
        (true, false) => Ok(("val", &corpus.val)),
        (true, true) => Err(Error::Validation("corpus has no held-out split".into())),
    }
}

fn probe_acc(
    train: &[Vec<f64>],
    train_labels: &[bool],
    eval: &[Vec<f64>],
    eval_labels: &[bool],
) -> Result<f64> {
    Ok(LogisticProbe::fit(train, train_labels, DEFAULT_RIDGE)?.accuracy(eval, eval_labels))
}

/// Linear probes fit on the training split and scored on the held-out
/// split, plus a 2-D principal projection of the held-out learned `E`.
pub fn implicit_cause_recovery(model: &ModelState, corpus: &Corpus) -> Result<RecoveryReport> {
    let (split, eval_samples) = held_out(corpus)?;
    let encoder = model_encoder(model);
    let train = collect_rows(&corpus.train, &encoder)?;
    let eval = collect_rows(eval_samples, &encoder)?;
    let projection = pca_2d(&eval.learned_e)?
        .into_iter()
        .zip(eval.ids.iter().zip(&eval.labels))
        .map(|([x, y], (id, &label))| ProjectionPoint {
            id: id.clone(),
            x,
            y,
            label,
        })
        .collect();
    let mut flags = Vec::new();
    if model.epochs_trained == 0 {
        flags.push("untrained model: parameters are at initialization".to_string());
    }
    Ok(RecoveryReport {
        probe_acc_learned_e: probe_acc(
            &train.learned_e,
            &train.labels,
            &eval.learned_e,
            &eval.labels,
        )?,
        probe_acc_true_e: probe_acc(&train.true_e, &train.labels, &eval.true_e, &eval.labels)?,
        probe_acc_input: probe_acc(&train.input, &train.labels, &eval.input, &eval.labels)?,
        n_train_rows: train.labels.len(),
        n_eval_rows: eval.labels.len(),
        eval_split: split.into(),
        epochs_trained: model.epochs_trained,
        flags,
        projection,
    })
}

/// Probe accuracies on `E` and `Ĥ` over held-out utterances whose ECP
/// partner carries the other emotion label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub e_probe_acc: f64,
    pub h_hat_probe_acc: f64,
    /// `Ĥ`-probe minus `E`-probe accuracy, in percentage points.
    pub gap_points: f64,
    /// `E`-probe accuracy as a fraction of the `Ĥ`-probe accuracy.
    pub ratio: f64,
    pub n_restricted: usize,
    pub eval_split: String,
    /// True when one head, fit on `Ĥ`, scores both representations.
    pub shared_head: bool,
}

fn restricted(rows: &[Vec<f64>], r: &Rows) -> (Vec<Vec<f64>>, Vec<bool>) {
    let picked: Vec<usize> = (0..r.labels.len()).filter(|&i| r.restricted[i]).collect();
    (
        picked.iter().map(|&i| rows[i].clone()).collect(),
        picked.iter().map(|&i| r.labels[i]).collect(),
    )
}

fn consistency(
    train: &Rows,
    eval: &Rows,
    split: &str,
    shared_head: bool,
) -> Result<ConsistencyReport> {
    let (e_eval, labels) = restricted(&eval.learned_e, eval);
    let (h_eval, _) = restricted(&eval.h_hat, eval);
    if labels.is_empty() {
        return Err(Error::Validation(format!(
            "{split} split has no utterance with a differently labelled ECP partner"
        )));
    }
    let h_probe = LogisticProbe::fit(&train.h_hat, &train.labels, DEFAULT_RIDGE)?;
    let e_probe = if shared_head {
        h_probe.clone()
    } else {
        LogisticProbe::fit(&train.learned_e, &train.labels, DEFAULT_RIDGE)?
    };
    let e_acc = e_probe.accuracy(&e_eval, &labels);
    let h_acc = h_probe.accuracy(&h_eval, &labels);
    Ok(ConsistencyReport {
        e_probe_acc: e_acc,
        h_hat_probe_acc: h_acc,
        gap_points: (h_acc - e_acc) * 100.0,
        ratio: e_acc / h_acc,
        n_restricted: labels.len(),
        eval_split: split.into(),
        shared_head,
    })
}

/// Separate probes on the model's `E` and `Ĥ`, fit on all training
/// utterances and scored on the restricted held-out set.
pub fn emotion_consistency_eval(model: &ModelState, corpus: &Corpus) -> Result<ConsistencyReport> {
    let (split, eval_samples) = held_out(corpus)?;
    let encoder = model_encoder(model);
    consistency(
        &collect_rows(&corpus.train, &encoder)?,
        &collect_rows(eval_samples, &encoder)?,
        split,
        false,
    )
}

/// Linear-mode model whose adjacency is the generator's ground-truth `A`:
/// `E = (I − Aᵀ)H` and `Ĥ = H`. One head fit on `Ĥ` scores both.
pub fn emotion_consistency_ground_truth(corpus: &Corpus) -> Result<ConsistencyReport> {
    let (split, eval_samples) = held_out(corpus)?;
    let dim = corpus.train[0].dim();
    let config = ModelConfig {
        linear: true,
        use_gru: false,
        ..ModelConfig::desk()
    };
    let model = ModelState::init(&config, dim, 0)?;
    let encoder = |s: &SyntheticSample| -> Result<(Tensor, Tensor)> {
        let n = s.len();
        let h0 = Tensor::from_rows(&s.vectors)?;
        let a = Tensor::from_rows(&s.weights)?;
        let e = model.encode_with_adjacency(&h0, &a)?;
        let full: Vec<bool> = (0..n * n).map(|k| k / n < k % n).collect();
        let h_hat = model.decode(&a, &e, &full)?;
        Ok((e, h_hat))
    };
    consistency(
        &collect_rows(&corpus.train, &encoder)?,
        &collect_rows(eval_samples, &encoder)?,
        split,
        true,
    )
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn decisions(flags: &[bool]) -> Vec<PairDecision> {
        flags
            .iter()
            .map(|&accepted| PairDecision {
                pair: (0, 1),
                accepted,
            })
            .collect()
    }

    proptest! {
        #[test]
        fn score_is_the_accepted_fraction(
            instances in prop::collection::vec(
                (prop::collection::vec(any::<bool>(), 1..4), prop::collection::vec(any::<bool>(), 1..4)),
                1..20,
            )
        ) {
            let all: Vec<InstanceDecisions> = instances
                .iter()
                .enumerate()
                .map(|(k, (p, n))| InstanceDecisions { id: k.to_string(), positives: decisions(p), negatives: decisions(n) })
                .collect();
            let score = DiscriminabilityScore::from_decisions(&all);
            let frac = |positive: bool| {
                let flat: Vec<bool> = instances
                    .iter()
                    .flat_map(|(p, n)| if positive { p } else { n }.iter().copied())
                    .collect();
                100.0 * flat.iter().filter(|&&b| b).count() as f64 / flat.len() as f64
            };
            prop_assert!((score.pos_pct - frac(true)).abs() < 1e-9);
            prop_assert!((score.neg_pct - frac(false)).abs() < 1e-9);
            prop_assert!((0.0..=100.0).contains(&score.pos_pct));
        }
    }
}
