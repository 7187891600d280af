//! Label mappings: one simulation run in, one batch of labelled examples out.
//!
//! Every mapping puts the prior draw `θ` under label 0. Feature vectors share a
//! fixed layout described by [`FeatureLayout`]:
//!
//! * binary kinds: `[θ' (or ranks), y, linear features]`
//! * multiclass: `[θ*₀, .., θ*_M, y, linear(θ*₀), .., linear(θ*_M)]`
//!
//! where `θ'` is the configured coordinate subset of `θ`. Linear features
//! (log densities and ranks) always come last so the classifier can route them
//! straight to its output layer.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::stream_rng;
use crate::sim_model::{SimulationRun, SimulationTable};
use crate::{Error, Result};

/// Upper end of the uniform jitter used to break rank ties.
pub const RANK_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingKind {
    BinaryFull,
    BinaryNoY,
    BinaryRank,
    MulticlassPermutation,
}

impl MappingKind {
    pub fn is_binary(self) -> bool {
        !matches!(self, MappingKind::MulticlassPermutation)
    }

    pub fn class_count(self, m: usize) -> usize {
        if self.is_binary() {
            2
        } else {
            m + 1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearFeature {
    LogP,
    LogQ,
    Rank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub include_y: bool,
    pub theta_subset: Option<Vec<usize>>,
    pub linear_features: Vec<LinearFeature>,
    pub standardize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            include_y: true,
            theta_subset: None,
            linear_features: Vec::new(),
            standardize: true,
        }
    }
}

impl FeatureConfig {
    pub fn with_linear(mut self, features: &[LinearFeature]) -> Self {
        self.linear_features = features.to_vec();
        self
    }

    pub fn with_subset(mut self, subset: &[usize]) -> Self {
        self.theta_subset = Some(subset.to_vec());
        self
    }

    fn subset(&self, d_theta: usize) -> Vec<usize> {
        self.theta_subset.clone().unwrap_or_else(|| (0..d_theta).collect())
    }

    /// Check the configuration against a table and resolve the feature layout.
    pub fn layout(&self, kind: MappingKind, table: &SimulationTable) -> Result<FeatureLayout> {
        self.layout_for(kind, table.d_theta, table.d_y, table.m, table.has_log_p(), table.has_log_q())
    }

    pub fn layout_for(
        &self,
        kind: MappingKind,
        d_theta: usize,
        d_y: usize,
        m: usize,
        has_log_p: bool,
        has_log_q: bool,
    ) -> Result<FeatureLayout> {
        if let Some(subset) = &self.theta_subset {
            if subset.is_empty() {
                return Err(Error::Config("theta_subset is empty".into()));
            }
            if let Some(bad) = subset.iter().find(|&&i| i >= d_theta) {
                return Err(Error::Config(format!("theta_subset index {bad} out of range for d_theta = {d_theta}")));
            }
        }
        if kind == MappingKind::BinaryRank && self.theta_subset.is_none() && d_theta > 1 {
            return Err(Error::Config(format!(
                "rank mapping needs an explicit theta subset when d_theta = {d_theta} > 1"
            )));
        }
        for f in &self.linear_features {
            let present = match f {
                LinearFeature::LogP => has_log_p,
                LinearFeature::LogQ => has_log_q,
                LinearFeature::Rank => true,
            };
            if !present {
                return Err(Error::Config(format!("linear feature {f:?} requested but missing from the table")));
            }
        }
        let subset = self.subset(d_theta);
        let n_rank = subset.len();
        let n_linear = self
            .linear_features
            .iter()
            .map(|f| if *f == LinearFeature::Rank { n_rank } else { 1 })
            .sum();
        let y_dim = match kind {
            MappingKind::BinaryFull | MappingKind::MulticlassPermutation if self.include_y => d_y,
            _ => 0,
        };
        Ok(FeatureLayout {
            kind,
            m,
            n_slots: if kind.is_binary() { 1 } else { m + 1 },
            theta_dim: subset.len(),
            y_dim,
            n_linear,
            class_count: kind.class_count(m),
            subset,
            linear_features: self.linear_features.clone(),
        })
    }
}

/// Resolved positions of every block inside a feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub kind: MappingKind,
    pub m: usize,
    /// 1 for binary mappings, `M + 1` for the multiclass permutation.
    pub n_slots: usize,
    /// Per-slot length of the θ block (ranks for the rank mapping).
    pub theta_dim: usize,
    pub y_dim: usize,
    /// Per-slot number of linear features.
    pub n_linear: usize,
    pub class_count: usize,
    pub subset: Vec<usize>,
    pub linear_features: Vec<LinearFeature>,
}

impl FeatureLayout {
    /// Nonlinear input length seen by the per-slot network: `θ' ++ y`.
    pub fn slot_input_dim(&self) -> usize {
        self.theta_dim + self.y_dim
    }

    pub fn feature_len(&self) -> usize {
        self.n_slots * (self.theta_dim + self.n_linear) + self.y_dim
    }

    fn y_offset(&self) -> usize {
        self.n_slots * self.theta_dim
    }

    fn linear_offset(&self) -> usize {
        self.y_offset() + self.y_dim
    }

    /// Fill `nonlinear` with `(θ*_k, y)` and `linear` with slot `k`'s linear features.
    pub fn split_slot(&self, feature: &[f64], k: usize, nonlinear: &mut Vec<f64>, linear: &mut Vec<f64>) {
        nonlinear.clear();
        linear.clear();
        nonlinear.extend_from_slice(&feature[k * self.theta_dim..(k + 1) * self.theta_dim]);
        nonlinear.extend_from_slice(&feature[self.y_offset()..self.y_offset() + self.y_dim]);
        let lo = self.linear_offset() + k * self.n_linear;
        linear.extend_from_slice(&feature[lo..lo + self.n_linear]);
    }

    /// Index of the first linear feature of kind `f` in slot 0.
    pub fn linear_index(&self, f: LinearFeature) -> Option<usize> {
        let mut idx = self.linear_offset();
        for g in &self.linear_features {
            if *g == f {
                return Some(idx);
            }
            idx += if *g == LinearFeature::Rank { self.theta_dim } else { 1 };
        }
        None
    }
}

/// A labelled example; `batch_id` is the originating run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub label: usize,
    pub feature: Vec<f64>,
    pub batch_id: u64,
}

/// All examples generated from one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_id: u64,
    pub examples: Vec<Example>,
    /// Count of each label in the batch.
    pub label_multiset: Vec<usize>,
}

impl Batch {
    fn new(batch_id: u64, examples: Vec<Example>, class_count: usize) -> Self {
        let mut label_multiset = vec![0; class_count];
        for e in &examples {
            label_multiset[e.label] += 1;
        }
        Self {
            batch_id,
            examples,
            label_multiset,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Count of `reference` entries strictly greater than `value`.
pub fn rank_statistic(value: f64, reference: &[f64]) -> usize {
    reference.iter().filter(|&&r| r > value).count()
}

/// Ranks of every value `[θ, θ̃₁..θ̃_M]` among the other `M`, per selected coordinate.
///
/// `ranks[k][j]` is the rank of value `k` on coordinate `subset[j]`. Ties are
/// broken by a uniform `(0, RANK_JITTER)` jitter drawn from substream `run_id`
/// of `seed`.
pub fn run_ranks(run: &SimulationRun, subset: &[usize], seed: u64) -> Vec<Vec<usize>> {
    let n = run.m() + 1;
    let mut rng = stream_rng(seed, run.run_id);
    let mut ranks = vec![vec![0usize; subset.len()]; n];
    let mut column = vec![0.0; n];
    for (j, &c) in subset.iter().enumerate() {
        for (k, v) in column.iter_mut().enumerate() {
            *v = run.value(k)[c] + rng.random::<f64>() * RANK_JITTER;
        }
        for k in 0..n {
            ranks[k][j] = column.iter().enumerate().filter(|&(i, &v)| i != k && v > column[k]).count();
        }
    }
    ranks
}

fn push_linear(out: &mut Vec<f64>, run: &SimulationRun, k: usize, features: &[LinearFeature], ranks: Option<&[Vec<usize>]>) {
    for f in features {
        match f {
            LinearFeature::LogP => out.push(run.log_p.as_ref().expect("validated by layout")[k]),
            LinearFeature::LogQ => out.push(run.log_q.as_ref().expect("validated by layout")[k]),
            LinearFeature::Rank => out.extend(ranks.expect("ranks computed")[k].iter().map(|&r| r as f64)),
        }
    }
}

fn check_run(run: &SimulationRun, layout: &FeatureLayout) -> Result<()> {
    if run.m() != layout.m {
        return Err(Error::DimensionMismatch {
            expected: layout.m,
            found: run.m(),
        });
    }
    let needs = |f: LinearFeature| layout.linear_features.contains(&f);
    if needs(LinearFeature::LogP) && run.log_p.is_none() || needs(LinearFeature::LogQ) && run.log_q.is_none() {
        return Err(Error::Config(format!("run {} lacks a requested log density", run.run_id)));
    }
    Ok(())
}

fn map_binary(run: &SimulationRun, layout: &FeatureLayout, seed: u64) -> Result<Batch> {
    check_run(run, layout)?;
    let want_ranks = layout.kind == MappingKind::BinaryRank || layout.linear_features.contains(&LinearFeature::Rank);
    let ranks = want_ranks.then(|| run_ranks(run, &layout.subset, seed));
    let examples = (0..=run.m())
        .map(|k| {
            let mut feature = Vec::with_capacity(layout.feature_len());
            if layout.kind == MappingKind::BinaryRank {
                feature.extend(ranks.as_ref().expect("rank mapping")[k].iter().map(|&r| r as f64));
            } else {
                feature.extend(layout.subset.iter().map(|&c| run.value(k)[c]));
            }
            if layout.y_dim > 0 {
                feature.extend_from_slice(&run.y);
            }
            push_linear(&mut feature, run, k, &layout.linear_features, ranks.as_deref());
            Example {
                label: usize::from(k != 0),
                feature,
                batch_id: run.run_id,
            }
        })
        .collect();
    Ok(Batch::new(run.run_id, examples, 2))
}

/// Example 1 mapping: `(0, (θ, y))` and `(1, (θ̃_m, y))`.
pub fn map_binary_full(run: &SimulationRun, cfg: &FeatureConfig, seed: u64) -> Result<Batch> {
    let layout = cfg.layout_for(
        MappingKind::BinaryFull,
        run.theta.len(),
        run.y.len(),
        run.m(),
        run.log_p.is_some(),
        run.log_q.is_some(),
    )?;
    map_binary(run, &layout, seed)
}

/// As [`map_binary_full`] with `y` left out of the features.
pub fn map_binary_no_y(run: &SimulationRun, cfg: &FeatureConfig, seed: u64) -> Result<Batch> {
    let layout = cfg.layout_for(
        MappingKind::BinaryNoY,
        run.theta.len(),
        run.y.len(),
        run.m(),
        run.log_p.is_some(),
        run.log_q.is_some(),
    )?;
    map_binary(run, &layout, seed)
}

/// Rank mapping: label 0 gets the rank of `θ` among the draws, label 1 the rank
/// of each draw among the other draws and `θ`.
pub fn map_binary_rank(run: &SimulationRun, cfg: &FeatureConfig, seed: u64) -> Result<Batch> {
    let layout = cfg.layout_for(
        MappingKind::BinaryRank,
        run.theta.len(),
        run.y.len(),
        run.m(),
        run.log_p.is_some(),
        run.log_q.is_some(),
    )?;
    map_binary(run, &layout, seed)
}

/// Slot order of example `k`: the draws keep their order and `θ` is inserted at slot `k`.
pub fn permutation_slots(m: usize, k: usize) -> Vec<usize> {
    (0..=m)
        .map(|slot| match slot.cmp(&k) {
            std::cmp::Ordering::Less => slot + 1,
            std::cmp::Ordering::Equal => 0,
            std::cmp::Ordering::Greater => slot,
        })
        .collect()
}

fn map_multiclass_with(run: &SimulationRun, layout: &FeatureLayout, seed: u64) -> Result<Batch> {
    check_run(run, layout)?;
    let ranks = layout
        .linear_features
        .contains(&LinearFeature::Rank)
        .then(|| run_ranks(run, &layout.subset, seed));
    let m = run.m();
    let examples = (0..=m)
        .map(|k| {
            let order = permutation_slots(m, k);
            let mut feature = Vec::with_capacity(layout.feature_len());
            for &src in &order {
                feature.extend(layout.subset.iter().map(|&c| run.value(src)[c]));
            }
            if layout.y_dim > 0 {
                feature.extend_from_slice(&run.y);
            }
            for &src in &order {
                push_linear(&mut feature, run, src, &layout.linear_features, ranks.as_deref());
            }
            Example {
                label: k,
                feature,
                batch_id: run.run_id,
            }
        })
        .collect();
    Ok(Batch::new(run.run_id, examples, m + 1))
}

/// Example 4 mapping: example `k` has label `k` and `θ` in slot `k`.
pub fn map_multiclass(run: &SimulationRun, cfg: &FeatureConfig, seed: u64) -> Result<Batch> {
    let layout = cfg.layout_for(
        MappingKind::MulticlassPermutation,
        run.theta.len(),
        run.y.len(),
        run.m(),
        run.log_p.is_some(),
        run.log_q.is_some(),
    )?;
    map_multiclass_with(run, &layout, seed)
}

/// Batches for a whole table together with their layout.
#[derive(Debug, Clone)]
pub struct MappedTable {
    pub batches: Vec<Batch>,
    pub layout: FeatureLayout,
}

/// Map every run of `table`; batches come out in run-id order.
pub fn map_table(table: &SimulationTable, kind: MappingKind, cfg: &FeatureConfig, seed: u64) -> Result<MappedTable> {
    if table.runs.is_empty() {
        return Err(Error::Empty("simulation table has no runs".into()));
    }
    let layout = cfg.layout(kind, table)?;
    let mut batches = table
        .runs
        .par_iter()
        .map(|run| {
            if kind.is_binary() {
                map_binary(run, &layout, seed)
            } else {
                map_multiclass_with(run, &layout, seed)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    batches.sort_by_key(|b| b.batch_id);
    Ok(MappedTable { batches, layout })
}

/// Assign whole batches to training or validation.
///
/// `floor(val_fraction · n)` batches go to validation. Both sides are returned
/// in batch-id order.
pub fn split_batches(batches: Vec<Batch>, val_fraction: f64, seed: u64) -> Result<(Vec<Batch>, Vec<Batch>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let n = batches.len();
    let n_val = (val_fraction * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, 0);
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut val, mut train): (Vec<_>, Vec<_>) = batches.into_iter().zip(is_val).partition(|(_, v)| *v);
    let strip = |v: &mut Vec<(Batch, bool)>| {
        v.sort_by_key(|(b, _)| b.batch_id);
        v.drain(..).map(|(b, _)| b).collect::<Vec<_>>()
    };
    let val_out = strip(&mut val);
    let train_out = strip(&mut train);
    Ok((train_out, val_out))
}

/// Per-coordinate affine standardization of the nonlinear inputs.
///
/// θ coordinates are pooled over slots so every slot sees the same transform,
/// which keeps a shared per-slot scorer permutation-equivariant. Linear
/// features are left on their own scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub theta_mean: Vec<f64>,
    pub theta_scale: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_scale: Vec<f64>,
}

fn mean_scale(sum: &[f64], sum_sq: &[f64], n: f64) -> (Vec<f64>, Vec<f64>) {
    sum.iter()
        .zip(sum_sq)
        .map(|(s, s2)| {
            let mean = s / n;
            let var = (s2 / n - mean * mean).max(0.0);
            let sd = var.sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        })
        .unzip()
}

impl Standardizer {
    /// Fit on training batches only.
    pub fn fit(batches: &[Batch], layout: &FeatureLayout) -> Result<Self> {
        let (td, yd) = (layout.theta_dim, layout.y_dim);
        // Two passes: means first, then centred second moments, for accuracy.
        let mut t_sum = vec![0.0; td];
        let mut y_sum = vec![0.0; yd];
        let (mut nt, mut ny) = (0.0, 0.0);
        for e in batches.iter().flat_map(|b| &b.examples) {
            for k in 0..layout.n_slots {
                for j in 0..td {
                    t_sum[j] += e.feature[k * td + j];
                }
                nt += 1.0;
            }
            for j in 0..yd {
                y_sum[j] += e.feature[layout.y_offset() + j];
            }
            ny += 1.0;
        }
        if nt == 0.0 {
            return Err(Error::Empty("no training examples to standardize on".into()));
        }
        let t_mean: Vec<f64> = t_sum.iter().map(|s| s / nt).collect();
        let y_mean: Vec<f64> = y_sum.iter().map(|s| s / ny).collect();
        let mut t_sq = vec![0.0; td];
        let mut y_sq = vec![0.0; yd];
        for e in batches.iter().flat_map(|b| &b.examples) {
            for k in 0..layout.n_slots {
                for j in 0..td {
                    t_sq[j] += (e.feature[k * td + j] - t_mean[j]).powi(2);
                }
            }
            for j in 0..yd {
                y_sq[j] += (e.feature[layout.y_offset() + j] - y_mean[j]).powi(2);
            }
        }
        let (_, theta_scale) = mean_scale(&vec![0.0; td], &t_sq, nt);
        let (_, y_scale) = mean_scale(&vec![0.0; yd], &y_sq, ny);
        Ok(Self {
            theta_mean: t_mean,
            theta_scale,
            y_mean,
            y_scale,
        })
    }

    pub fn apply_feature(&self, feature: &mut [f64], layout: &FeatureLayout) {
        let td = layout.theta_dim;
        for k in 0..layout.n_slots {
            for j in 0..td {
                let v = &mut feature[k * td + j];
                *v = (*v - self.theta_mean[j]) / self.theta_scale[j];
            }
        }
        let off = layout.y_offset();
        for j in 0..layout.y_dim {
            let v = &mut feature[off + j];
            *v = (*v - self.y_mean[j]) / self.y_scale[j];
        }
    }

    pub fn apply(&self, batches: &mut [Batch], layout: &FeatureLayout) {
        for e in batches.iter_mut().flat_map(|b| b.examples.iter_mut()) {
            self.apply_feature(&mut e.feature, layout);
        }
    }
}

/// Empirical label frequencies `w_k` over a set of batches.
pub fn class_weights(batches: &[Batch], class_count: usize) -> Vec<f64> {
    let mut counts = vec![0usize; class_count];
    for b in batches {
        for (c, n) in counts.iter_mut().zip(&b.label_multiset) {
            *c += n;
        }
    }
    let total: usize = counts.iter().sum();
    counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
}

#[derive(Serialize)]
struct ExampleRecord<'a> {
    batch_id: u64,
    t: usize,
    phi: &'a [f64],
}

/// Export examples as JSON lines `{"batch_id":..,"t":..,"phi":[..]}`.
pub fn write_examples<W: Write>(batches: &[Batch], mut w: W) -> Result<()> {
    for e in batches.iter().flat_map(|b| &b.examples) {
        serde_json::to_writer(
            &mut w,
            &ExampleRecord {
                batch_id: e.batch_id,
                t: e.label,
                phi: &e.feature,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim_model::{generate_gaussian_table, GaussianTableConfig};

    fn run_1d(theta: f64, draws: &[f64]) -> SimulationRun {
        SimulationRun {
            run_id: 0,
            theta: vec![theta],
            y: vec![0.3],
            draws: draws.iter().map(|&d| vec![d]).collect(),
            log_p: None,
            log_q: None,
        }
    }

    #[test]
    fn rank_statistic_examples() {
        assert_eq!(rank_statistic(1.5, &[1.0, 2.0, 3.0]), 2);
        assert_eq!(rank_statistic(-5.0, &[1.0, 2.0, 3.0]), 3);
        assert_eq!(rank_statistic(5.0, &[1.0, 2.0, 3.0]), 0);
    }

    #[test]
    fn binary_full_labels_and_features() {
        let b = map_binary_full(&run_1d(0.5, &[1.0]), &FeatureConfig::default(), 0).unwrap();
        assert_eq!(b.examples.iter().map(|e| e.label).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(b.examples[0].feature, vec![0.5, 0.3]);
        assert_eq!(b.examples[1].feature, vec![1.0, 0.3]);
        let b = map_binary_full(&run_1d(0.5, &[1.0, 2.0, 3.0]), &FeatureConfig::default(), 0).unwrap();
        assert_eq!(b.label_multiset, vec![1, 3]);
    }

    #[test]
    fn theta_subset_keeps_selected_coordinate_and_y() {
        let t = generate_gaussian_table(&GaussianTableConfig::new(4, 1, 2, 0)).unwrap();
        let run = &t.runs[0];
        let b = map_binary_full(run, &FeatureConfig::default().with_subset(&[0]), 0).unwrap();
        let mut expected = vec![run.theta[0]];
        expected.extend_from_slice(&run.y);
        assert_eq!(b.examples[0].feature, expected);
    }

    #[test]
    fn no_y_mapping_drops_y() {
        let run = run_1d(0.5, &[1.0]);
        let b = map_binary_no_y(&run, &FeatureConfig::default(), 0).unwrap();
        assert_eq!(b.examples[0].feature, vec![0.5]);
        assert_eq!(b.examples[1].feature, vec![1.0]);
        let explicit = map_binary_full(
            &run,
            &FeatureConfig {
                include_y: false,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(b, explicit);
        let t = generate_gaussian_table(&GaussianTableConfig::new(2, 1, 3, 0)).unwrap();
        let mut wide = t.runs[0].clone();
        wide.y = vec![0.0; 9];
        let b = map_binary_no_y(&wide, &FeatureConfig::default(), 0).unwrap();
        assert_eq!(b.examples[0].feature.len(), 2);
    }

    #[test]
    fn rank_mapping_example() {
        let b = map_binary_rank(&run_1d(0.5, &[1.0, 0.2]), &FeatureConfig::default(), 4).unwrap();
        let feats: Vec<f64> = b.examples.iter().map(|e| e.feature[0]).collect();
        assert_eq!(feats, vec![1.0, 0.0, 2.0]);
        assert_eq!(b.label_multiset, vec![1, 2]);
    }

    #[test]
    fn rank_ties_are_broken_deterministically() {
        let run = run_1d(1.0, &[1.0, 1.0, 1.0]);
        let a = map_binary_rank(&run, &FeatureConfig::default(), 9).unwrap();
        let b = map_binary_rank(&run, &FeatureConfig::default(), 9).unwrap();
        assert_eq!(a, b);
        let mut ranks: Vec<usize> = a.examples.iter().map(|e| e.feature[0] as usize).collect();
        ranks.sort();
        assert_eq!(ranks, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rank_mapping_requires_subset_in_higher_dimensions() {
        let t = generate_gaussian_table(&GaussianTableConfig::new(3, 2, 2, 0)).unwrap();
        assert!(matches!(
            map_table(&t, MappingKind::BinaryRank, &FeatureConfig::default(), 0),
            Err(Error::Config(_))
        ));
        let ok = map_table(&t, MappingKind::BinaryRank, &FeatureConfig::default().with_subset(&[0, 2]), 0).unwrap();
        assert_eq!(ok.batches[0].examples[0].feature.len(), 2);
    }

    #[test]
    fn multiclass_slots() {
        let run = run_1d(0.5, &[1.0, 2.0]);
        let b = map_multiclass(&run, &FeatureConfig::default(), 0).unwrap();
        assert_eq!(b.examples.len(), 3);
        assert_eq!(b.examples.iter().map(|e| e.label).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(b.examples[0].feature, vec![0.5, 1.0, 2.0, 0.3]);
        assert_eq!(b.examples[1].feature, vec![1.0, 0.5, 2.0, 0.3]);
        assert_eq!(b.examples[2].feature, vec![1.0, 2.0, 0.5, 0.3]);
        for e in &b.examples {
            assert_eq!(e.feature[e.label], 0.5);
        }
    }

    #[test]
    fn multiclass_feature_length_and_linear_slots() {
        let t = generate_gaussian_table(&GaussianTableConfig::new(2, 1, 3, 0)).unwrap();
        let cfg = FeatureConfig::default().with_linear(&[LinearFeature::LogP, LinearFeature::LogQ]);
        let mapped = map_table(&t, MappingKind::MulticlassPermutation, &cfg, 0).unwrap();
        let layout = &mapped.layout;
        assert_eq!(layout.feature_len(), 4 * 2 + 2 + 4 * 2);
        let run = &t.runs[0];
        let e = &mapped.batches[0].examples[2];
        let (mut nl, mut lin) = (Vec::new(), Vec::new());
        layout.split_slot(&e.feature, 2, &mut nl, &mut lin);
        assert_eq!(&nl[..2], &run.theta[..]);
        assert_eq!(&nl[2..], &run.y[..]);
        assert_eq!(lin, vec![run.log_p.as_ref().unwrap()[0], run.log_q.as_ref().unwrap()[0]]);
    }

    #[test]
    fn missing_linear_feature_is_a_config_error() {
        let t = generate_gaussian_table(&GaussianTableConfig::new(1, 2, 2, 0).with_densities(false)).unwrap();
        let cfg = FeatureConfig::default().with_linear(&[LinearFeature::LogQ]);
        assert!(matches!(map_table(&t, MappingKind::BinaryFull, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn map_table_counts_and_multisets() {
        let t = generate_gaussian_table(&GaussianTableConfig::new(2, 7, 4, 0)).unwrap();
        let mapped = map_table(&t, MappingKind::MulticlassPermutation, &FeatureConfig::default(), 0).unwrap();
        assert_eq!(mapped.batches.len(), 7);
        assert_eq!(mapped.batches.iter().map(Batch::len).sum::<usize>(), 7 * 5);
        assert!(mapped.batches.iter().all(|b| b.label_multiset == vec![1; 5]));
        assert_eq!(class_weights(&mapped.batches, 5), vec![0.2; 5]);

        let mapped = map_table(&t, MappingKind::BinaryFull, &FeatureConfig::default(), 0).unwrap();
        assert_eq!(class_weights(&mapped.batches, 2), vec![0.2, 0.8]);
    }

    #[test]
    fn standardization_uses_training_statistics() {
        let t = generate_gaussian_table(&GaussianTableConfig::new(3, 40, 5, 2)).unwrap();
        let cfg = FeatureConfig::default().with_linear(&[LinearFeature::LogP]);
        let mapped = map_table(&t, MappingKind::BinaryFull, &cfg, 0).unwrap();
        let (mut train, _val) = split_batches(mapped.batches, 0.5, 1).unwrap();
        let st = Standardizer::fit(&train, &mapped.layout).unwrap();
        let raw_linear: Vec<f64> = train.iter().flat_map(|b| &b.examples).map(|e| e.feature[6]).collect();
        st.apply(&mut train, &mapped.layout);
        let examples: Vec<&Example> = train.iter().flat_map(|b| &b.examples).collect();
        let n = examples.len() as f64;
        for j in 0..6 {
            let mean = examples.iter().map(|e| e.feature[j]).sum::<f64>() / n;
            let var = examples.iter().map(|e| (e.feature[j] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9, "coord {j}: {mean} {var}");
        }
        let after: Vec<f64> = examples.iter().map(|e| e.feature[6]).collect();
        assert_eq!(raw_linear, after);
    }

    #[test]
    fn split_is_by_batch_and_deterministic() {
        let t = generate_gaussian_table(&GaussianTableConfig::new(1, 10, 2, 0)).unwrap();
        let b = map_table(&t, MappingKind::BinaryFull, &FeatureConfig::default(), 0).unwrap().batches;
        let (tr, va) = split_batches(b.clone(), 0.5, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (5, 5));
        let (tr2, va2) = split_batches(b.clone(), 0.5, 3).unwrap();
        assert_eq!((tr.clone(), va.clone()), (tr2, va2));
        let ids: std::collections::HashSet<u64> = tr.iter().map(|b| b.batch_id).collect();
        assert!(va.iter().all(|b| !ids.contains(&b.batch_id)));
        let (_, va3) = split_batches(b.clone(), 0.3, 3).unwrap();
        assert_eq!(va3.len(), 3);
        assert!(split_batches(b.clone(), 0.0, 3).is_err());
        assert!(split_batches(b, 1.0, 3).is_err());
    }

    #[test]
    fn example_export_is_jsonl() {
        let b = map_binary_full(&run_1d(0.5, &[1.0]), &FeatureConfig::default(), 0).unwrap();
        let mut buf = Vec::new();
        write_examples(&[b], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"batch_id":0,"t":0,"phi":[0.5,0.3]}"#);
    }
}
