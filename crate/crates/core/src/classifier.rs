//! Binary and separable multiclass classifiers.
//!
//! Both architectures share one scalar scorer per slot,
//! `g(x, l) = MLP(x) + wᵀl`, where `x` is the standardized nonlinear input
//! `(θ', y)` and `l` the linear features. The binary form reads
//! `Pr(t=1) = sigmoid(g)`; the multiclass form is a softmax of `g` over the
//! `M+1` slots, so swapping two slots swaps their probabilities exactly.
//!
//! Training data is first compiled into [`PreparedBatch`]es: every distinct
//! slot content of a batch is stored once in a pool, and examples that share
//! a slot multiset and labelled slot are merged. Under the cyclic permutation
//! mapping a whole batch collapses to one unit evaluated on `M+1` pool rows.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::label_mapping::{Batch, Example, FeatureLayout, MappingKind};
use crate::rng::stream_rng;
use crate::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;
pub const MODEL_FORMAT_VERSION: u32 = 1;

fn log_lo() -> f64 {
    PROB_CLAMP.ln()
}

fn log_hi() -> f64 {
    (-PROB_CLAMP).ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Binary,
    SeparableMulticlass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => softplus(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Softplus => -(-a).exp_m1(),
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log sigmoid(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

fn clamp_log(lp: f64) -> f64 {
    lp.clamp(log_lo(), log_hi())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    /// Per-slot nonlinear input length, `θ'` and `y` together.
    pub input_dim: usize,
    /// Per-slot number of linear features.
    pub n_linear_features: usize,
    pub class_count: usize,
    /// Trailing part of `input_dim` shared by all slots (the `y` block).
    #[serde(default)]
    pub shared_dim: usize,
}

impl ModelConfig {
    pub fn from_layout(layout: &FeatureLayout, hidden_sizes: &[usize], activation: Activation) -> Result<Self> {
        let cfg = Self {
            architecture: if layout.kind == MappingKind::MulticlassPermutation {
                Architecture::SeparableMulticlass
            } else {
                Architecture::Binary
            },
            hidden_sizes: hidden_sizes.to_vec(),
            activation,
            input_dim: layout.slot_input_dim(),
            n_linear_features: layout.n_linear,
            class_count: layout.class_count,
            shared_dim: layout.y_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_sizes.contains(&0) {
            return Err(Error::Config("hidden layer widths must be at least 1".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        if self.architecture == Architecture::Binary && self.class_count != 2 {
            return Err(Error::Config("binary architecture needs class_count = 2".into()));
        }
        if self.shared_dim > self.input_dim {
            return Err(Error::Config("shared_dim exceeds input_dim".into()));
        }
        Ok(())
    }

    pub fn n_slots(&self) -> usize {
        match self.architecture {
            Architecture::Binary => 1,
            Architecture::SeparableMulticlass => self.class_count,
        }
    }

    /// Length of one slot's `[nonlinear, linear]` vector.
    pub fn slot_len(&self) -> usize {
        self.input_dim + self.n_linear_features
    }

    /// Length of a full feature vector as produced by the label mappings.
    pub fn feature_len(&self) -> usize {
        let slot_only = self.input_dim - self.shared_dim;
        self.n_slots() * (slot_only + self.n_linear_features) + self.shared_dim
    }

    fn dense_layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend_from_slice(&self.hidden_sizes);
        dims.push(1);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

/// Classifier parameters: dense layers then the linear-feature weights `w`,
/// stored in one flat row-major vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<f64>,
    layers: Vec<Dense>,
    linear_offset: usize,
}

fn plan(config: &ModelConfig) -> (Vec<Dense>, usize) {
    let mut off = 0;
    let layers = config
        .dense_layers()
        .into_iter()
        .map(|(n_in, n_out)| {
            let d = Dense {
                w: off,
                b: off + n_in * n_out,
                n_in,
                n_out,
            };
            off += n_in * n_out + n_out;
            d
        })
        .collect();
    (layers, off)
}

impl Model {
    /// All parameters zero: `MLP ≡ 0` and `w = 0`.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layers, linear_offset) = plan(&config);
        let params = vec![0.0; linear_offset + config.n_linear_features];
        Ok(Self {
            config,
            params,
            layers,
            linear_offset,
        })
    }

    /// Weights `U(±1/√fan_in)`, biases and linear weights zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut rng = stream_rng(seed, 0);
        for d in model.layers.clone() {
            let bound = 1.0 / (d.n_in.max(1) as f64).sqrt();
            for v in &mut model.params[d.w..d.w + d.n_in * d.n_out] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                found: params.len(),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite model parameter".into()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn linear_weights(&self) -> &[f64] {
        &self.params[self.linear_offset..]
    }

    pub fn set_linear_weights(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.config.n_linear_features {
            return Err(Error::DimensionMismatch {
                expected: self.config.n_linear_features,
                found: w.len(),
            });
        }
        self.params[self.linear_offset..].copy_from_slice(w);
        Ok(())
    }

    pub fn manifest(&self) -> Vec<ParamShape> {
        let n_hidden = self.layers.len() - 1;
        let mut out = Vec::new();
        for (i, d) in self.layers.iter().enumerate() {
            let name = if i == n_hidden { "output".to_string() } else { format!("hidden{i}") };
            out.push(ParamShape {
                name: format!("{name}.weight"),
                shape: vec![d.n_out, d.n_in],
            });
            out.push(ParamShape {
                name: format!("{name}.bias"),
                shape: vec![d.n_out],
            });
        }
        out.push(ParamShape {
            name: "linear.weight".into(),
            shape: vec![self.config.n_linear_features],
        });
        out
    }

    fn acts_len(&self) -> usize {
        self.config.hidden_sizes.iter().sum()
    }

    /// Scalar slot score `g(x, l)`; `acts` receives the hidden activations.
    fn score_with(&self, x: &[f64], lin: &[f64], acts: &mut [f64]) -> f64 {
        let p = &self.params;
        let n_hidden = self.layers.len() - 1;
        let mut a_off = 0;
        let mut prev_off = usize::MAX;
        for d in &self.layers[..n_hidden] {
            for o in 0..d.n_out {
                let row = &p[d.w + o * d.n_in..d.w + (o + 1) * d.n_in];
                let input: &[f64] = if prev_off == usize::MAX { x } else { &acts[prev_off..prev_off + d.n_in] };
                let z = p[d.b + o] + row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>();
                acts[a_off + o] = self.config.activation.apply(z);
            }
            prev_off = a_off;
            a_off += d.n_out;
        }
        let out = &self.layers[n_hidden];
        let input: &[f64] = if prev_off == usize::MAX { x } else { &acts[prev_off..prev_off + out.n_in] };
        let mlp = p[out.b] + p[out.w..out.w + out.n_in].iter().zip(input).map(|(w, v)| w * v).sum::<f64>();
        mlp + self.linear_weights().iter().zip(lin).map(|(w, v)| w * v).sum::<f64>()
    }

    /// Accumulate `dg · ∂g/∂params` into `grad`.
    fn backprop(&self, x: &[f64], lin: &[f64], acts: &[f64], dg: f64, grad: &mut [f64], delta: &mut Vec<f64>, next: &mut Vec<f64>) {
        let p = &self.params;
        for (g, v) in grad[self.linear_offset..].iter_mut().zip(lin) {
            *g += dg * v;
        }
        let n_hidden = self.layers.len() - 1;
        let offsets: Vec<usize> = self.config.hidden_sizes.iter().scan(0, |s, &h| {
            let o = *s;
            *s += h;
            Some(o)
        }).collect();
        let input_of = |i: usize| -> &[f64] {
            if i == 0 {
                x
            } else {
                &acts[offsets[i - 1]..offsets[i - 1] + self.config.hidden_sizes[i - 1]]
            }
        };
        delta.clear();
        delta.push(dg);
        for i in (0..=n_hidden).rev() {
            let d = self.layers[i];
            let input = input_of(i);
            for o in 0..d.n_out {
                let dz = delta[o];
                if dz == 0.0 {
                    continue;
                }
                grad[d.b + o] += dz;
                for (g, v) in grad[d.w + o * d.n_in..d.w + (o + 1) * d.n_in].iter_mut().zip(input) {
                    *g += dz * v;
                }
            }
            if i == 0 {
                break;
            }
            next.clear();
            next.resize(d.n_in, 0.0);
            for o in 0..d.n_out {
                let dz = delta[o];
                if dz == 0.0 {
                    continue;
                }
                for (nx, w) in next.iter_mut().zip(&p[d.w + o * d.n_in..d.w + (o + 1) * d.n_in]) {
                    *nx += dz * w;
                }
            }
            for (nx, a) in next.iter_mut().zip(input) {
                *nx *= self.config.activation.derivative_from_output(*a);
            }
            std::mem::swap(delta, next);
        }
    }

    /// Slot score for a `[nonlinear, linear]` slot vector.
    pub fn score(&self, slot: &[f64]) -> Result<f64> {
        if slot.len() != self.config.slot_len() {
            return Err(Error::DimensionMismatch {
                expected: self.config.slot_len(),
                found: slot.len(),
            });
        }
        let mut acts = vec![0.0; self.acts_len()];
        let (x, lin) = slot.split_at(self.config.input_dim);
        Ok(self.score_with(x, lin, &mut acts))
    }

    /// Split a full multiclass feature vector into per-slot `[nonlinear, linear]` vectors.
    pub fn slot_vectors(&self, phi: &[f64]) -> Result<Vec<Vec<f64>>> {
        let c = &self.config;
        if phi.len() != c.feature_len() {
            return Err(Error::DimensionMismatch {
                expected: c.feature_len(),
                found: phi.len(),
            });
        }
        let k = c.n_slots();
        let own = c.input_dim - c.shared_dim;
        let y = &phi[k * own..k * own + c.shared_dim];
        let lin0 = k * own + c.shared_dim;
        Ok((0..k)
            .map(|s| {
                let mut v = Vec::with_capacity(c.slot_len());
                v.extend_from_slice(&phi[s * own..(s + 1) * own]);
                v.extend_from_slice(y);
                v.extend_from_slice(&phi[lin0 + s * c.n_linear_features..lin0 + (s + 1) * c.n_linear_features]);
                v
            })
            .collect())
    }

    /// Log class probabilities of one raw feature vector, clamped.
    pub fn log_probs(&self, phi: &[f64]) -> Result<Vec<f64>> {
        match self.config.architecture {
            Architecture::Binary => {
                let z = self.score(phi)?;
                Ok(vec![clamp_log(log_sigmoid(-z)), clamp_log(log_sigmoid(z))])
            }
            Architecture::SeparableMulticlass => {
                let scores = self
                    .slot_vectors(phi)?
                    .iter()
                    .map(|s| self.score(s))
                    .collect::<Result<Vec<_>>>()?;
                Ok(log_softmax(&scores).into_iter().map(clamp_log).collect())
            }
        }
    }
}

fn log_softmax(scores: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(scores);
    scores.iter().map(|s| s - lse).collect()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `Pr(t = 1 | φ) = sigmoid(MLP(x) + wᵀl)` for a binary feature vector `φ = [x, l]`.
pub fn forward_binary(model: &Model, phi: &[f64]) -> Result<f64> {
    if model.config.architecture != Architecture::Binary {
        return Err(Error::Config("forward_binary needs a binary model".into()));
    }
    Ok(sigmoid(model.score(phi)?))
}

/// Softmax over the per-slot scores `g(θ_k, y)`.
pub fn forward_multiclass(model: &Model, slots: &[Vec<f64>]) -> Result<Vec<f64>> {
    if model.config.architecture != Architecture::SeparableMulticlass {
        return Err(Error::Config("forward_multiclass needs a multiclass model".into()));
    }
    if slots.len() != model.config.n_slots() {
        return Err(Error::DimensionMismatch {
            expected: model.config.n_slots(),
            found: slots.len(),
        });
    }
    let scores = slots.iter().map(|s| model.score(s)).collect::<Result<Vec<_>>>()?;
    Ok(log_softmax(&scores).into_iter().map(f64::exp).collect())
}

/// Clamped log predicted probability of the example's own label.
pub fn predict_log_prob(model: &Model, example: &Example) -> Result<f64> {
    let lp = model.log_probs(&example.feature)?;
    lp.get(example.label).copied().ok_or_else(|| Error::InvalidParameter(format!("label {} out of range", example.label)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", content = "m", rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    Unweighted,
    /// Per-example weights `(M+1)/2` for label 0 and `(M+1)/(2M)` for label 1.
    BalancedBinary(usize),
}

impl WeightScheme {
    pub fn example_weight(self, label: usize) -> f64 {
        match self {
            WeightScheme::Unweighted => 1.0,
            WeightScheme::BalancedBinary(m) => {
                let k = m as f64 + 1.0;
                if label == 0 {
                    k / 2.0
                } else {
                    k / (2.0 * m as f64)
                }
            }
        }
    }

    /// `C = (M+1)²/(2M)` of the balanced scheme.
    pub fn balance_constant(m: usize) -> f64 {
        (m as f64 + 1.0).powi(2) / (2.0 * m as f64)
    }

    pub fn validate(self, architecture: Architecture) -> Result<()> {
        match self {
            WeightScheme::BalancedBinary(0) => Err(Error::Config("balanced weighting needs M ≥ 1".into())),
            WeightScheme::BalancedBinary(_) if architecture != Architecture::Binary => {
                Err(Error::Config("balanced weighting applies to binary classifiers only".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Unit {
    /// Pool rows of the slots, in slot order.
    slots: Vec<u32>,
    label: usize,
    /// Summed example weights.
    weight: f64,
}

/// A batch compiled for fast scoring: distinct slot vectors plus merged units.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub batch_id: u64,
    slot_len: usize,
    pool: Vec<f64>,
    units: Vec<Unit>,
    /// Pool rows of every original example, for label-permuted scoring.
    example_slots: Vec<Vec<u32>>,
    labels: Vec<usize>,
}

impl PreparedBatch {
    pub fn new(model: &ModelConfig, batch: &Batch, scheme: WeightScheme) -> Result<Self> {
        let slot_len = model.slot_len();
        let mut pool = Vec::new();
        let mut index: HashMap<Vec<u64>, u32> = HashMap::new();
        let mut example_slots = Vec::with_capacity(batch.examples.len());
        let mut labels = Vec::with_capacity(batch.examples.len());
        let tmp = Model::zeros(model.clone())?;
        for e in &batch.examples {
            if e.label >= model.class_count {
                return Err(Error::InvalidParameter(format!("label {} out of range", e.label)));
            }
            let slots = match model.architecture {
                Architecture::Binary => {
                    if e.feature.len() != slot_len {
                        return Err(Error::DimensionMismatch {
                            expected: slot_len,
                            found: e.feature.len(),
                        });
                    }
                    vec![e.feature.clone()]
                }
                Architecture::SeparableMulticlass => tmp.slot_vectors(&e.feature)?,
            };
            let rows = slots
                .into_iter()
                .map(|s| {
                    let key: Vec<u64> = s.iter().map(|v| v.to_bits()).collect();
                    *index.entry(key).or_insert_with(|| {
                        pool.extend_from_slice(&s);
                        (pool.len() / slot_len - 1) as u32
                    })
                })
                .collect::<Vec<u32>>();
            example_slots.push(rows);
            labels.push(e.label);
        }
        let mut units: Vec<Unit> = Vec::new();
        let mut unit_index: HashMap<(Vec<u32>, u32, usize), usize> = HashMap::new();
        for (rows, &label) in example_slots.iter().zip(&labels) {
            let w = scheme.example_weight(label);
            let key = match model.architecture {
                Architecture::Binary => (rows.clone(), rows[0], label),
                Architecture::SeparableMulticlass => {
                    let mut sorted = rows.clone();
                    sorted.sort_unstable();
                    (sorted, rows[label], 0)
                }
            };
            match unit_index.get(&key) {
                Some(&u) => units[u].weight += w,
                None => {
                    unit_index.insert(key, units.len());
                    units.push(Unit {
                        slots: rows.clone(),
                        label,
                        weight: w,
                    });
                }
            }
        }
        Ok(Self {
            batch_id: batch.batch_id,
            slot_len,
            pool,
            units,
            example_slots,
            labels,
        })
    }

    pub fn n_examples(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn n_pool(&self) -> usize {
        self.pool.len() / self.slot_len
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.pool[i * self.slot_len..(i + 1) * self.slot_len]
    }

    fn scores(&self, model: &Model, acts: &mut Vec<f64>) -> Vec<f64> {
        let a = model.acts_len();
        acts.clear();
        acts.resize(self.n_pool() * a, 0.0);
        (0..self.n_pool())
            .map(|i| {
                let (x, lin) = self.row(i).split_at(model.config.input_dim);
                model.score_with(x, lin, &mut acts[i * a..(i + 1) * a])
            })
            .collect()
    }

    /// Clamped log probability of every class for every example, in example order.
    pub fn example_log_probs(&self, model: &Model) -> Vec<Vec<f64>> {
        let mut acts = Vec::new();
        let scores = self.scores(model, &mut acts);
        let mut cache: HashMap<Vec<u32>, Vec<f64>> = HashMap::new();
        self.example_slots
            .iter()
            .map(|rows| match model.config.architecture {
                Architecture::Binary => {
                    let z = scores[rows[0] as usize];
                    vec![clamp_log(log_sigmoid(-z)), clamp_log(log_sigmoid(z))]
                }
                Architecture::SeparableMulticlass => cache
                    .entry(rows.clone())
                    .or_insert_with(|| {
                        let s: Vec<f64> = rows.iter().map(|&r| scores[r as usize]).collect();
                        log_softmax(&s).into_iter().map(clamp_log).collect()
                    })
                    .clone(),
            })
            .collect()
    }
}

/// Compile batches for a model configuration.
pub fn prepare_batches(model: &ModelConfig, batches: &[Batch], scheme: WeightScheme) -> Result<Vec<PreparedBatch>> {
    batches.iter().map(|b| PreparedBatch::new(model, b, scheme)).collect()
}

struct Scratch {
    acts: Vec<f64>,
    delta: Vec<f64>,
    next: Vec<f64>,
    dscore: Vec<f64>,
}

impl Scratch {
    fn new() -> Self {
        Self {
            acts: Vec::new(),
            delta: Vec::new(),
            next: Vec::new(),
            dscore: Vec::new(),
        }
    }
}

/// Summed weighted negative log-likelihood of one batch, optionally with its gradient.
fn batch_loss(model: &Model, batch: &PreparedBatch, grad: Option<&mut [f64]>, s: &mut Scratch) -> f64 {
    let scores = batch.scores(model, &mut s.acts);
    let want_grad = grad.is_some();
    if want_grad {
        s.dscore.clear();
        s.dscore.resize(scores.len(), 0.0);
    }
    let (lo, hi) = (log_lo(), log_hi());
    let mut total = 0.0;
    let mut buf = Vec::new();
    for u in &batch.units {
        match model.config.architecture {
            Architecture::Binary => {
                let z = scores[u.slots[0] as usize];
                let signed = if u.label == 1 { z } else { -z };
                let lp = log_sigmoid(signed);
                total -= u.weight * lp.clamp(lo, hi);
                if want_grad && lp > lo && lp < hi {
                    // d(−log σ(±z))/dz = ∓(1 − σ(±z))
                    let d = -(1.0 - sigmoid(signed));
                    s.dscore[u.slots[0] as usize] += u.weight * if u.label == 1 { d } else { -d };
                }
            }
            Architecture::SeparableMulticlass => {
                buf.clear();
                buf.extend(u.slots.iter().map(|&r| scores[r as usize]));
                let lse = log_sum_exp(&buf);
                let lp = buf[u.label] - lse;
                total -= u.weight * lp.clamp(lo, hi);
                if want_grad && lp > lo && lp < hi {
                    for (pos, &r) in u.slots.iter().enumerate() {
                        let soft = (buf[pos] - lse).exp();
                        let ind = if pos == u.label { 1.0 } else { 0.0 };
                        s.dscore[r as usize] += u.weight * (soft - ind);
                    }
                }
            }
        }
    }
    if let Some(grad) = grad {
        let a = model.acts_len();
        for (i, &dg) in s.dscore.iter().enumerate() {
            if dg == 0.0 {
                continue;
            }
            let (x, lin) = batch.row(i).split_at(model.config.input_dim);
            model.backprop(x, lin, &s.acts[i * a..(i + 1) * a], dg, grad, &mut s.delta, &mut s.next);
        }
    }
    total
}

fn n_examples(batches: &[&PreparedBatch]) -> usize {
    batches.iter().map(|b| b.n_examples()).sum()
}

fn loss_refs(model: &Model, batches: &[&PreparedBatch], grad: Option<&mut [f64]>) -> f64 {
    let n = n_examples(batches).max(1) as f64;
    let mut s = Scratch::new();
    match grad {
        Some(g) => {
            g.iter_mut().for_each(|v| *v = 0.0);
            let total: f64 = batches.iter().map(|b| batch_loss(model, b, Some(g), &mut s)).sum();
            g.iter_mut().for_each(|v| *v /= n);
            total / n
        }
        None => batches.iter().map(|b| batch_loss(model, b, None, &mut s)).sum::<f64>() / n,
    }
}

/// Mean weighted negative log predicted probability of the true labels.
pub fn loss(model: &Model, batches: &[PreparedBatch]) -> f64 {
    loss_refs(model, &batches.iter().collect::<Vec<_>>(), None)
}

/// Exact gradient of [`loss`] with respect to the flat parameter vector.
pub fn gradient(model: &Model, batches: &[PreparedBatch]) -> Vec<f64> {
    let mut g = vec![0.0; model.n_params()];
    loss_refs(model, &batches.iter().collect::<Vec<_>>(), Some(&mut g));
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Minimum number of examples per gradient step; whole batches are kept together.
    pub minibatch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_scheme: WeightScheme,
    pub patience: usize,
    pub seed: u64,
    /// Fraction of training batches held out for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            minibatch_size: 256,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_scheme: WeightScheme::Unweighted,
            patience: 10,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.minibatch_size == 0 {
            return Err(Error::Config("minibatch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction must lie in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }
}

/// Record of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub holdout_loss: Vec<f64>,
    pub stopped_early: bool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64], s: &TrainSettings) {
        self.t += 1;
        let (b1, b2) = (s.beta1, s.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= s.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + s.eps);
        }
    }
}

/// Train a classifier on compiled batches with Adam.
pub fn train_prepared(batches: &[PreparedBatch], cfg: &ModelConfig, settings: &TrainSettings) -> Result<(Model, TrainLog)> {
    settings.validate()?;
    settings.weight_scheme.validate(cfg.architecture)?;
    if batches.is_empty() || batches.iter().all(|b| b.n_examples() == 0) {
        return Err(Error::Empty("training set is empty".into()));
    }
    let mut model = Model::new(cfg.clone(), crate::rng::derive_seed(settings.seed, "init"))?;
    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut rng = stream_rng(settings.seed, 1);
    order.shuffle(&mut rng);
    let n_hold = (settings.val_fraction * batches.len() as f64).floor() as usize;
    let (hold, fit): (Vec<&PreparedBatch>, Vec<&PreparedBatch>) = if n_hold >= 1 && n_hold < batches.len() {
        let mut hold_idx = order[..n_hold].to_vec();
        let mut fit_idx = order[n_hold..].to_vec();
        hold_idx.sort_unstable();
        fit_idx.sort_unstable();
        (hold_idx.iter().map(|&i| &batches[i]).collect(), fit_idx.iter().map(|&i| &batches[i]).collect())
    } else {
        (Vec::new(), batches.iter().collect())
    };

    let np = model.n_params();
    let mut adam = Adam {
        m: vec![0.0; np],
        v: vec![0.0; np],
        t: 0,
    };
    let mut grad = vec![0.0; np];
    let mut log = TrainLog {
        epochs_run: 0,
        best_epoch: 0,
        train_loss: Vec::new(),
        holdout_loss: Vec::new(),
        stopped_early: false,
    };
    let mut best = (f64::INFINITY, model.params.clone());
    let mut since_best = 0;
    let mut fit_order: Vec<usize> = (0..fit.len()).collect();
    for epoch in 1..=settings.epochs {
        fit_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_n = 0usize;
        let mut start = 0;
        while start < fit_order.len() {
            let mut end = start;
            let mut count = 0;
            while end < fit_order.len() && (count < settings.minibatch_size || end == start) {
                count += fit[fit_order[end]].n_examples();
                end += 1;
            }
            let mb: Vec<&PreparedBatch> = fit_order[start..end].iter().map(|&i| fit[i]).collect();
            let l = loss_refs(&model, &mb, Some(&mut grad));
            if !l.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += l * count as f64;
            epoch_n += count;
            adam.step(&mut model.params, &grad, settings);
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            start = end;
        }
        log.epochs_run = epoch;
        log.train_loss.push(epoch_loss / epoch_n.max(1) as f64);
        if !hold.is_empty() {
            let h = loss_refs(&model, &hold, None);
            if !h.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            log.holdout_loss.push(h);
            if h < best.0 {
                best = (h, model.params.clone());
                log.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= settings.patience {
                    log.stopped_early = true;
                    model.params = best.1;
                    return Ok((model, log));
                }
            }
        } else {
            log.best_epoch = epoch;
        }
    }
    Ok((model, log))
}

/// Train from raw (already standardized) batches.
pub fn train(train_batches: &[Batch], cfg: &ModelConfig, settings: &TrainSettings) -> Result<Model> {
    let prepared = prepare_batches(cfg, train_batches, settings.weight_scheme)?;
    train_prepared(&prepared, cfg, settings).map(|(m, _)| m)
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: ModelConfig,
    manifest: Vec<ParamShape>,
    params: Vec<f64>,
}

impl Model {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            manifest: self.manifest(),
            params: self.params.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!("unsupported model format version {}", file.format_version)));
        }
        let mut model = Self::zeros(file.config)?;
        if file.manifest != model.manifest() {
            return Err(Error::Config("parameter manifest does not match the configuration".into()));
        }
        model.set_params(&file.params)?;
        Ok(model)
    }
}
