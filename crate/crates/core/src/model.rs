//! Graph-attention causal autoencoder.
//!
//! Encoder, per layer `ℓ`:
//!
//! ```text
//! e_{i,t} = h_i · w_row + h_t · w_col
//! A_{i,t} = LeakyReLU(e_{i,t}) / Σ_{j ∈ rel_t} LeakyReLU(e_{j,t})
//! H^{ℓ+1} = eLU((I − Aᵀ) H^ℓ W^ℓ)
//! ```
//!
//! then `E = MLP(H^L)`. Decoder: `Ê^{ℓ+1} = eLU((I − Aᵀ)⁻¹ Ê^ℓ M^ℓ)`,
//! optionally followed by a GRU step whose input is a self-attention
//! context over each utterance's skeleton predecessors, and `Ĥ = MLP(Ê^L)`.
//! A shared linear emotion head scores both `H` and `Ĥ`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::probe_accuracy;
use crate::seed::{derive_seed, derived_rng, rng_from};
use crate::skeleton::{build_skeleton, Conversation, SkeletonVariant};
use crate::synth::{Corpus, SyntheticSample};
use crate::tensor::{gru_cell, mlp_layer, Adam, GruParams, ParamStore, Tape, Tensor, Var};

/// Emotion vs non-emotion.
pub const N_CLASSES: usize = 2;

const STREAM_INIT: u64 = 0x494E_4954;
const STREAM_SHUFFLE: u64 = 0x5348_5546;
const STREAM_DROPOUT: u64 = 0x4452_4F50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// KL divergence of the `Ĥ` emotion distribution from the `H` one.
    Kl,
    /// Binary cross-entropy against the `H` distribution.
    Bce,
    /// No auxiliary term.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub implicit_cause_size: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub skeleton_variant: SkeletonVariant,
    pub k: usize,
    pub use_gru: bool,
    pub loss_mode: LossMode,
    pub use_decoder: bool,
    pub attention_epsilon: f64,
    pub stop_grad_decoder_adjacency: bool,
    pub leaky_slope: f64,
    /// Identity activations, no MLPs or GRU, `W = M = I`. Forces
    /// `hidden_size = implicit_cause_size = ` input dimension.
    pub linear: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 1,
            hidden_size: 300,
            implicit_cause_size: 192,
            dropout: 0.3,
            learning_rate: 3e-5,
            batch_size: 32,
            epochs: 60,
            skeleton_variant: SkeletonVariant::VI,
            k: 2,
            use_gru: true,
            loss_mode: LossMode::Kl,
            use_decoder: true,
            attention_epsilon: 1e-6,
            stop_grad_decoder_adjacency: false,
            leaky_slope: 0.01,
            linear: false,
        }
    }
}

impl ModelConfig {
    /// Small sizes for tests and CI.
    pub fn desk() -> Self {
        ModelConfig {
            hidden_size: 32,
            implicit_cause_size: 16,
            epochs: 10,
            batch_size: 8,
            learning_rate: 1e-2,
            dropout: 0.1,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.n_layers,
            self.hidden_size,
            self.implicit_cause_size,
            self.batch_size,
            self.epochs,
            self.k,
        ];
        if counts.contains(&0) {
            return Err(Error::Validation(
                "model counts (layers, sizes, batch, epochs, k) must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !(self.learning_rate > 0.0) || !(self.attention_epsilon > 0.0) {
            return Err(Error::Validation(
                "learning_rate and attention_epsilon must be > 0".into(),
            ));
        }
        if self.skeleton_variant == SkeletonVariant::I {
            return Err(Error::Validation(
                "the model uses skeleton variants II-VI".into(),
            ));
        }
        Ok(())
    }
}

/// Skeleton mask and tensors of one conversation.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub h0: Tensor,
    pub mask: Vec<bool>,
    pub labels: Vec<bool>,
}

impl PreparedSample {
    pub fn new(sample: &SyntheticSample, config: &ModelConfig) -> Result<Self> {
        Ok(PreparedSample {
            id: sample.id.clone(),
            h0: Tensor::from_rows(&sample.vectors)?,
            mask: skeleton_mask_for(&sample.conversation, config)?,
            labels: sample.labels(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn skeleton_mask_for(conversation: &Conversation, config: &ModelConfig) -> Result<Vec<bool>> {
    Ok(build_skeleton(config.skeleton_variant, conversation, Some(config.k))?.mask())
}

/// Evaluation-mode outputs of one conversation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Final-layer attention adjacency, `a[i][t]` weights `i → t`.
    pub a: Tensor,
    pub e: Tensor,
    pub h_hat: Tensor,
    pub emotion_logits_h: Tensor,
    pub emotion_logits_h_hat: Tensor,
}

struct TapeOutput<'t> {
    a: Var<'t>,
    e: Var<'t>,
    h_hat: Var<'t>,
    logits_h: Var<'t>,
    logits_h_hat: Var<'t>,
    /// Source of the fixed emotion target of the auxiliary loss.
    logits_target: Var<'t>,
}

/// Values that the loss treats as constants (stop-gradient targets), taken
/// at a fixed parameter point. Supplying them reproduces the loss surface
/// a finite-difference oracle must see.
#[derive(Debug, Clone)]
pub struct DetachedValues {
    pub logits_h: Tensor,
    pub decoder_adjacency: Tensor,
}

/// Loss terms of one conversation (utterance means).
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub auxiliary: Var<'t>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub params: ParamStore,
    /// Completed training epochs; zero for a freshly initialized model.
    pub epochs_trained: usize,
}

/// Named parameter variables on one tape.
struct Params<'t>(BTreeMap<String, Var<'t>>);

impl<'t> Params<'t> {
    fn get(&self, name: &str) -> Var<'t> {
        *self
            .0
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect(),
    )
    .expect("sized")
}

fn gru_names(layer: usize) -> [String; 12] {
    [
        "w_ir", "w_iz", "w_in", "w_hr", "w_hz", "w_hn", "b_ir", "b_iz", "b_in", "b_hr", "b_hz",
        "b_hn",
    ]
    .map(|n| format!("dec.{layer}.gru.{n}"))
}

/// Scores `e_{i,t} = h_i·w_row + h_t·w_col`, rectified and normalized over
/// each column's masked entries (`mask[i*n+t]` iff `i ∈ rel_t`).
pub fn attention_adjacency<'t>(
    h: Var<'t>,
    mask: &[bool],
    w_row: Var<'t>,
    w_col: Var<'t>,
    slope: f64,
    epsilon: f64,
) -> Result<Var<'t>> {
    let n = h.dims().0;
    if mask.len() != n * n || (0..n).any(|i| mask[i * n + i]) {
        return Err(Error::shape(
            "attention_adjacency",
            format!(
                "mask of {} entries (with no diagonal) for {n} rows",
                mask.len()
            ),
        ));
    }
    let tape = h.tape();
    let ones_row = tape.constant(Tensor::filled(1, n, 1.0));
    let ones_col = tape.constant(Tensor::filled(n, 1, 1.0));
    let rows = h.matmul(w_row)?.matmul(ones_row)?;
    let cols = ones_col.matmul(h.matmul(w_col)?.transpose())?;
    rows.add(cols)?
        .leaky_relu(slope)
        .masked_column_normalize(mask, epsilon)
}

fn dropout<'t>(x: Var<'t>, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var<'t>> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let (r, c) = x.dims();
            let keep = 1.0 / (1.0 - rate);
            let mask = (0..r * c)
                .map(|_| if rng.random_bool(rate) { 0.0 } else { keep })
                .collect();
            x.mul(x.tape().constant(Tensor::matrix(r, c, mask)?))
        }
        _ => Ok(x),
    }
}

/// Mean cross-entropy of row logits against binary labels.
fn cross_entropy<'t>(logits: Var<'t>, labels: &[bool]) -> Result<Var<'t>> {
    let n = labels.len();
    let onehot = labels
        .iter()
        .flat_map(|&l| if l { [0.0, 1.0] } else { [1.0, 0.0] })
        .collect();
    let target = logits
        .tape()
        .constant(Tensor::matrix(n, N_CLASSES, onehot)?);
    Ok(logits
        .log_softmax_rows()
        .mul(target)?
        .reduce_sum()
        .scalar_mul(-1.0 / n as f64))
}

/// `Σ_t Σ_e p̂_e log(p̂_e / p_e)` with `p` taken from `logits_h` as a fixed
/// target.
pub fn kl_auxiliary_loss<'t>(logits_h_hat: Var<'t>, logits_h: Var<'t>) -> Result<Var<'t>> {
    let log_p_hat = logits_h_hat.log_softmax_rows();
    let log_p = logits_h.log_softmax_rows().detach();
    Ok(logits_h_hat
        .softmax_rows()
        .mul(log_p_hat.sub(log_p)?)?
        .reduce_sum())
}

/// `−Σ_t Σ_e [p_e log p̂_e + (1 − p_e) log(1 − p̂_e)]` with `p` fixed.
pub fn bce_auxiliary_loss<'t>(logits_h_hat: Var<'t>, logits_h: Var<'t>) -> Result<Var<'t>> {
    if logits_h_hat.dims().1 != 2 {
        return Err(Error::shape(
            "bce_auxiliary_loss",
            "two emotion classes expected",
        ));
    }
    let tape = logits_h_hat.tape();
    let p = logits_h.softmax_rows().detach();
    let one_minus_p = p.scalar_mul(-1.0).add_scalar(1.0);
    let log_p_hat = logits_h_hat.log_softmax_rows();
    // With two classes, 1 − p̂_e is the other class's probability.
    let swap = tape.constant(Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0])?);
    let log_one_minus = log_p_hat.matmul(swap)?;
    Ok(p.mul(log_p_hat)?
        .add(one_minus_p.mul(log_one_minus)?)?
        .reduce_sum()
        .scalar_mul(-1.0))
}

impl ModelState {
    /// Random initialization (Xavier-uniform weights, zero biases).
    pub fn init(config: &ModelConfig, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Validation("input dimension must be >= 1".into()));
        }
        let mut config = config.clone();
        if config.linear {
            config.hidden_size = input_dim;
            config.implicit_cause_size = input_dim;
        }
        let (d, hid, imp) = (input_dim, config.hidden_size, config.implicit_cause_size);
        let mut rng = derived_rng(seed, STREAM_INIT, 0);
        let mut p = ParamStore::new();
        for l in 0..config.n_layers {
            let fan_in = if l == 0 { d } else { hid };
            p.insert(format!("enc.{l}.w_row"), xavier(&mut rng, fan_in, 1));
            p.insert(format!("enc.{l}.w_col"), xavier(&mut rng, fan_in, 1));
            p.insert(
                format!("dec.{l}.m"),
                if config.linear {
                    Tensor::eye(imp)
                } else {
                    xavier(&mut rng, imp, imp)
                },
            );
            p.insert(
                format!("enc.{l}.w"),
                if config.linear {
                    Tensor::eye(d)
                } else {
                    xavier(&mut rng, fan_in, hid)
                },
            );
            if config.use_gru && config.use_decoder && !config.linear {
                p.insert(format!("dec.{l}.w_p"), xavier(&mut rng, imp, hid));
                let names = gru_names(l);
                for (k, name) in names.iter().enumerate() {
                    let t = match k {
                        0..=2 => xavier(&mut rng, hid, imp),
                        3..=5 => xavier(&mut rng, imp, imp),
                        _ => Tensor::zeros(1, imp),
                    };
                    p.insert(name.clone(), t);
                }
            }
        }
        if !config.linear {
            p.insert("enc.mlp.w1", xavier(&mut rng, hid, hid));
            p.insert("enc.mlp.b1", Tensor::zeros(1, hid));
            p.insert("enc.mlp.w2", xavier(&mut rng, hid, imp));
            p.insert("enc.mlp.b2", Tensor::zeros(1, imp));
            p.insert("dec.mlp.w1", xavier(&mut rng, imp, hid));
            p.insert("dec.mlp.b1", Tensor::zeros(1, hid));
            p.insert("dec.mlp.w2", xavier(&mut rng, hid, d));
            p.insert("dec.mlp.b2", Tensor::zeros(1, d));
        }
        p.insert("head.w", xavier(&mut rng, d, N_CLASSES));
        p.insert("head.b", Tensor::zeros(1, N_CLASSES));
        Ok(ModelState {
            config,
            input_dim,
            params: p,
            epochs_trained: 0,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    fn bind<'t>(&self, tape: &'t Tape, vars: Option<&[Var<'t>]>) -> Params<'t> {
        Params(
            self.params
                .iter()
                .enumerate()
                .map(|(k, (name, t))| {
                    (
                        name.clone(),
                        vars.map_or_else(|| tape.var(t.clone()), |v| v[k]),
                    )
                })
                .collect(),
        )
    }

    fn mlp<'t>(
        &self,
        p: &Params<'t>,
        prefix: &str,
        x: Var<'t>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t>> {
        let hidden = mlp_layer(
            x,
            p.get(&format!("{prefix}.w1")),
            p.get(&format!("{prefix}.b1")),
        )?
        .elu(1.0);
        let hidden = dropout(hidden, self.config.dropout, rng)?;
        mlp_layer(
            hidden,
            p.get(&format!("{prefix}.w2")),
            p.get(&format!("{prefix}.b2")),
        )
    }

    fn act<'t>(&self, x: Var<'t>) -> Var<'t> {
        if self.config.linear {
            x
        } else {
            x.elu(1.0)
        }
    }

    fn check_input(&self, h0: &Tensor, mask: &[bool]) -> Result<()> {
        let (n, d) = h0.dims();
        if d != self.input_dim || mask.len() != n * n || n == 0 {
            return Err(Error::shape(
                "model input",
                format!(
                    "{n}x{d} input with mask of {} for a model of input size {}",
                    mask.len(),
                    self.input_dim
                ),
            ));
        }
        Ok(())
    }

    fn encode_tape<'t>(
        &self,
        p: &Params<'t>,
        h0: Var<'t>,
        mask: &[bool],
        a_fixed: Option<Var<'t>>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let tape = h0.tape();
        let n = h0.dims().0;
        let eye = tape.constant(Tensor::eye(n));
        let mut h = h0;
        let mut a = a_fixed;
        for l in 0..self.config.n_layers {
            let a_l = match a_fixed {
                Some(a) => a,
                None => attention_adjacency(
                    h,
                    mask,
                    p.get(&format!("enc.{l}.w_row")),
                    p.get(&format!("enc.{l}.w_col")),
                    self.config.leaky_slope,
                    self.config.attention_epsilon,
                )?,
            };
            let z = eye
                .sub(a_l.transpose())?
                .matmul(h)?
                .matmul(p.get(&format!("enc.{l}.w")))?;
            h = dropout(self.act(z), self.config.dropout, rng.as_deref_mut())?;
            a = Some(a_l);
        }
        let e = if self.config.linear {
            h
        } else {
            self.mlp(p, "enc.mlp", h, rng)?
        };
        Ok((a.expect("n_layers >= 1"), e))
    }

    fn decode_tape<'t>(
        &self,
        p: &Params<'t>,
        a: Var<'t>,
        e: Var<'t>,
        mask: &[bool],
        frozen_a: Option<&Tensor>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t>> {
        let tape = e.tape();
        let n = e.dims().0;
        let mut e_hat = e;
        if self.config.use_decoder {
            let a = match (self.config.stop_grad_decoder_adjacency, frozen_a) {
                (false, _) => a,
                (true, Some(fixed)) => tape.constant(fixed.clone()),
                (true, None) => a.detach(),
            };
            let inv = tape
                .constant(Tensor::eye(n))
                .sub(a.transpose())?
                .inverse()?;
            let gru = self.config.use_gru && !self.config.linear;
            // Row t of the GRU attention ranges over rel_t.
            let pred_mask: Vec<bool> = (0..n * n).map(|k| mask[(k % n) * n + k / n]).collect();
            let scale = 1.0 / (self.config.implicit_cause_size as f64).sqrt();
            for l in 0..self.config.n_layers {
                let z = self.act(inv.matmul(e_hat)?.matmul(p.get(&format!("dec.{l}.m")))?);
                e_hat = if gru {
                    let scores = e_hat.matmul(e_hat.transpose())?.scalar_mul(scale);
                    let context = scores.masked_softmax_rows(&pred_mask)?.matmul(e_hat)?;
                    let input = context.matmul(p.get(&format!("dec.{l}.w_p")))?;
                    let g = gru_names(l).map(|name| p.get(&name));
                    let params = GruParams {
                        w_ir: g[0],
                        w_iz: g[1],
                        w_in: g[2],
                        w_hr: g[3],
                        w_hz: g[4],
                        w_hn: g[5],
                        b_ir: g[6],
                        b_iz: g[7],
                        b_in: g[8],
                        b_hr: g[9],
                        b_hz: g[10],
                        b_hn: g[11],
                    };
                    gru_cell(input, z, &params)?
                } else {
                    z
                };
                e_hat = dropout(e_hat, self.config.dropout, rng.as_deref_mut())?;
            }
        }
        if self.config.linear {
            Ok(e_hat)
        } else {
            self.mlp(p, "dec.mlp", e_hat, rng)
        }
    }

    fn forward_tape<'t>(
        &self,
        p: &Params<'t>,
        sample: &PreparedSample,
        a_fixed: Option<Var<'t>>,
        frozen: Option<&DetachedValues>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TapeOutput<'t>> {
        self.check_input(&sample.h0, &sample.mask)?;
        let tape = p.get("head.w").tape();
        let h0 = tape.constant(sample.h0.clone());
        let (a, e) = self.encode_tape(p, h0, &sample.mask, a_fixed, rng.as_deref_mut())?;
        let h_hat = self
            .decode_tape(
                p,
                a,
                e,
                &sample.mask,
                frozen.map(|f| &f.decoder_adjacency),
                rng,
            )
            .map_err(|err| match err {
                Error::Singular(msg) => {
                    Error::Singular(format!("sample {}: I - A^T: {msg}", sample.id))
                }
                other => other,
            })?;
        let (hw, hb) = (p.get("head.w"), p.get("head.b"));
        let logits_h = mlp_layer(h0, hw, hb)?;
        let logits_target = frozen.map_or(logits_h, |f| tape.constant(f.logits_h.clone()));
        Ok(TapeOutput {
            a,
            e,
            h_hat,
            logits_h,
            logits_h_hat: mlp_layer(h_hat, hw, hb)?,
            logits_target,
        })
    }

    fn loss_terms<'t>(&self, out: &TapeOutput<'t>, labels: &[bool]) -> Result<LossTerms<'t>> {
        let n = labels.len() as f64;
        let tape = out.e.tape();
        let auxiliary = match self.config.loss_mode {
            LossMode::Kl => {
                kl_auxiliary_loss(out.logits_h_hat, out.logits_target)?.scalar_mul(1.0 / n)
            }
            LossMode::Bce => {
                bce_auxiliary_loss(out.logits_h_hat, out.logits_target)?.scalar_mul(1.0 / n)
            }
            LossMode::None => tape.constant(Tensor::scalar(0.0)),
        };
        let total = cross_entropy(out.logits_h_hat, labels)?
            .add(cross_entropy(out.logits_h, labels)?)?
            .add(auxiliary)?;
        Ok(LossTerms { total, auxiliary })
    }

    /// Total loss with parameters supplied as variables in
    /// [`param_names`](Self::param_names) order.
    pub fn loss_with<'t>(
        &self,
        tape: &'t Tape,
        params: &[Var<'t>],
        sample: &PreparedSample,
        frozen: Option<&DetachedValues>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossTerms<'t>> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "loss_with",
                format!(
                    "{} variables for {} parameters",
                    params.len(),
                    self.params.len()
                ),
            ));
        }
        let p = self.bind(tape, Some(params));
        let out = self.forward_tape(&p, sample, None, frozen, rng)?;
        self.loss_terms(&out, &sample.labels)
    }

    /// Evaluation-mode forward pass (no dropout).
    pub fn forward(&self, sample: &PreparedSample) -> Result<ForwardOutput> {
        let tape = Tape::new();
        let p = self.bind(&tape, None);
        let out = self.forward_tape(&p, sample, None, None, None)?;
        Ok(ForwardOutput {
            a: (*out.a.value()).clone(),
            e: (*out.e.value()).clone(),
            h_hat: (*out.h_hat.value()).clone(),
            emotion_logits_h: (*out.logits_h.value()).clone(),
            emotion_logits_h_hat: (*out.logits_h_hat.value()).clone(),
        })
    }

    /// Stop-gradient targets at the current parameters.
    pub fn detached_values(&self, sample: &PreparedSample) -> Result<DetachedValues> {
        let out = self.forward(sample)?;
        Ok(DetachedValues {
            logits_h: out.emotion_logits_h,
            decoder_adjacency: out.a,
        })
    }

    pub fn forward_sample(&self, sample: &SyntheticSample) -> Result<ForwardOutput> {
        self.forward(&PreparedSample::new(sample, &self.config)?)
    }

    /// `(A, E)` for an input matrix and skeleton mask.
    pub fn encode(&self, h0: &Tensor, mask: &[bool]) -> Result<(Tensor, Tensor)> {
        self.check_input(h0, mask)?;
        let tape = Tape::new();
        let p = self.bind(&tape, None);
        let (a, e) = self.encode_tape(&p, tape.constant(h0.clone()), mask, None, None)?;
        Ok(((*a.value()).clone(), (*e.value()).clone()))
    }

    /// Encoding with every layer's adjacency fixed to `a`.
    pub fn encode_with_adjacency(&self, h0: &Tensor, a: &Tensor) -> Result<Tensor> {
        let n = h0.rows();
        let mask: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
        self.check_input(h0, &mask)?;
        if a.dims() != (n, n) {
            return Err(Error::shape(
                "encode_with_adjacency",
                format!("adjacency {:?} for {n} rows", a.dims()),
            ));
        }
        let tape = Tape::new();
        let p = self.bind(&tape, None);
        let (_, e) = self.encode_tape(
            &p,
            tape.constant(h0.clone()),
            &mask,
            Some(tape.constant(a.clone())),
            None,
        )?;
        Ok((*e.value()).clone())
    }

    /// `Ĥ` from an adjacency and implicit causes; `mask` feeds the GRU
    /// attention.
    pub fn decode(&self, a: &Tensor, e: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let n = e.rows();
        if a.dims() != (n, n) || mask.len() != n * n || e.cols() != self.config.implicit_cause_size
        {
            return Err(Error::shape(
                "decode",
                format!("A {:?}, E {:?}, mask {}", a.dims(), e.dims(), mask.len()),
            ));
        }
        let tape = Tape::new();
        let p = self.bind(&tape, None);
        let h_hat = self.decode_tape(
            &p,
            tape.constant(a.clone()),
            tape.constant(e.clone()),
            mask,
            None,
            None,
        )?;
        Ok((*h_hat.value()).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "model_config": self.config,
            "input_dim": self.input_dim,
            "epochs_trained": self.epochs_trained,
        });
        self.params.save(path, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = ParamStore::load(path)?;
        let config: ModelConfig = serde_json::from_value(meta["model_config"].clone())?;
        let input_dim = meta["input_dim"]
            .as_u64()
            .ok_or_else(|| Error::Validation("checkpoint metadata lacks input_dim".into()))?
            as usize;
        let expected = ModelState::init(&config, input_dim, 0)?;
        for (name, t) in expected.params.iter() {
            match params.get(name) {
                Some(loaded) if loaded.shape() == t.shape() => {}
                _ => {
                    return Err(Error::Validation(format!(
                        "checkpoint parameter {name} is missing or misshapen"
                    )))
                }
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::Validation(
                "checkpoint has unexpected parameters".into(),
            ));
        }
        let epochs_trained = meta["epochs_trained"].as_u64().unwrap_or(0) as usize;
        Ok(ModelState {
            config,
            input_dim,
            params,
            epochs_trained,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_kl: f64,
    pub probe_acc_e: f64,
    pub probe_acc_h_hat: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: ModelState,
    /// Evaluation-mode training loss before the first update.
    pub initial_loss: f64,
    pub history: Vec<EpochMetrics>,
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss_total,loss_kl,probe_acc_E,probe_acc_Hhat\n");
    for m in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            m.epoch, m.loss_total, m.loss_kl, m.probe_acc_e, m.probe_acc_h_hat
        );
    }
    out
}

/// Per-utterance rows of `E` and `Ĥ` with emotion labels.
pub struct Representations {
    pub e: Vec<Vec<f64>>,
    pub h_hat: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
}

pub fn representations(state: &ModelState, samples: &[PreparedSample]) -> Result<Representations> {
    let mut reps = Representations {
        e: Vec::new(),
        h_hat: Vec::new(),
        labels: Vec::new(),
    };
    for s in samples {
        let out = state.forward(s)?;
        reps.e.extend(out.e.to_rows());
        reps.h_hat.extend(out.h_hat.to_rows());
        reps.labels.extend_from_slice(&s.labels);
    }
    Ok(reps)
}

/// Mean evaluation-mode `(total, auxiliary)` loss.
pub fn evaluate_loss(state: &ModelState, samples: &[PreparedSample]) -> Result<(f64, f64)> {
    let (mut total, mut aux) = (0.0, 0.0);
    for s in samples {
        let tape = Tape::new();
        let p = state.bind(&tape, None);
        let out = state.forward_tape(&p, s, None, None, None)?;
        let terms = state.loss_terms(&out, &s.labels)?;
        total += terms.total.item();
        aux += terms.auxiliary.item();
    }
    let m = samples.len().max(1) as f64;
    Ok((total / m, aux / m))
}

/// Trains on `corpus.train` with Adam, recording per-epoch metrics. Probe
/// accuracies fit on the training split and score the validation split
/// (the training split when validation is empty). When `out_dir` is given,
/// `metrics.csv` and the final checkpoint `model.json` are written there.
pub fn train(
    corpus: &Corpus,
    config: &ModelConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let input_dim = corpus
        .train
        .first()
        .map(SyntheticSample::dim)
        .ok_or_else(|| Error::Validation("training split is empty".into()))?;
    let prepare = |samples: &[SyntheticSample]| -> Result<Vec<PreparedSample>> {
        samples
            .iter()
            .map(|s| {
                if s.dim() != input_dim {
                    return Err(Error::Validation(format!(
                        "sample {} has dimension {}, expected {input_dim}",
                        s.id,
                        s.dim()
                    )));
                }
                PreparedSample::new(s, config)
            })
            .collect()
    };
    let train_set = prepare(&corpus.train)?;
    let val_set = prepare(&corpus.val)?;
    let eval_set = if val_set.is_empty() {
        &train_set
    } else {
        &val_set
    };

    let mut state = ModelState::init(config, input_dim, seed)?;
    let mut adam = Adam::new(config.learning_rate);
    let (initial_loss, _) = evaluate_loss(&state, &train_set)?;
    let names = state.param_names();
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut derived_rng(seed, STREAM_SHUFFLE, epoch as u64));
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            let mut rng = rng_from(derive_seed(
                seed,
                STREAM_DROPOUT,
                ((epoch as u64) << 32) | b as u64,
            ));
            for &idx in batch {
                let sample = &train_set[idx];
                let tape = Tape::new();
                let vars: Vec<Var> = state
                    .params
                    .iter()
                    .map(|(_, t)| tape.var(t.clone()))
                    .collect();
                let terms = state.loss_with(&tape, &vars, sample, None, Some(&mut rng))?;
                let loss = terms.total.item();
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at epoch {epoch}, batch {b} (sample {})",
                        sample.id
                    )));
                }
                let g = tape.backward(terms.total)?;
                for (name, var) in names.iter().zip(&vars) {
                    let gv = g.wrt(*var);
                    match grads.get_mut(name.as_str()) {
                        Some(acc) => acc.iter_mut().zip(gv.values()).for_each(|(a, b)| *a += b),
                        None => {
                            grads.insert(name.as_str(), gv.into_values());
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for (name, g) in grads {
                state.params.get_mut(name).expect("known parameter").grad =
                    Some(g.into_iter().map(|v| v * scale).collect());
            }
            adam.step(&mut state.params);
            state.params.zero_grad();
        }
        let (loss_total, loss_kl) = evaluate_loss(&state, &train_set)?;
        let train_reps = representations(&state, &train_set)?;
        let eval_reps = representations(&state, eval_set)?;
        history.push(EpochMetrics {
            epoch,
            loss_total,
            loss_kl,
            probe_acc_e: probe_accuracy(
                &train_reps.e,
                &train_reps.labels,
                &eval_reps.e,
                &eval_reps.labels,
            )?,
            probe_acc_h_hat: probe_accuracy(
                &train_reps.h_hat,
                &train_reps.labels,
                &eval_reps.h_hat,
                &eval_reps.labels,
            )?,
        });
        state.epochs_trained = epoch;
    }

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&history))?;
        state.save(&dir.join("model.json"))?;
    }
    Ok(TrainOutcome {
        state,
        initial_loss,
        history,
    })
}
