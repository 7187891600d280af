//! From a trained classifier to calibration outputs: validation LPD, the
//! divergence estimate with a Bayesian-bootstrap interval, the within-batch
//! permutation p-value, and the visual-check export.

use std::io::Write;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    prepare_batches, train_prepared, Activation, Architecture, Model, ModelConfig, PreparedBatch, TrainLog, TrainSettings,
    WeightScheme,
};
use crate::label_mapping::{class_weights, map_table, split_batches, Batch, FeatureConfig, FeatureLayout, MappingKind, Standardizer};
use crate::rng::{derive_seed, stream_rng};
use crate::sim_model::SimulationTable;
use crate::{Error, Result};

/// Relative slack when comparing permuted and observed LPDs, so that
/// summation-order noise cannot split exact ties.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub lpd_val: f64,
    /// Effective class weights `w_k`; `(1/2, 1/2)` under balanced weighting.
    pub class_weights: Vec<f64>,
    /// `−Σ w_k log w_k`.
    pub entropy_offset: f64,
    pub divergence: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub upper_bound: f64,
    pub n_val_examples: usize,
    pub n_val_batches: usize,
    /// Standard error of `divergence` from the spread of batch means.
    pub standard_error: f64,
    pub weighted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub lpd_observed: f64,
    pub lpd_permuted: Vec<f64>,
    pub p_value: f64,
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
}

/// Cached log probabilities for validation examples.
///
/// Every example stores its clamped log probability for each class, so
/// relabelled LPDs cost one lookup per example.
#[derive(Debug, Clone)]
pub struct ScoredBatches {
    pub batch_ids: Vec<u64>,
    /// `log_probs[b][i][k]`: example `i` of batch `b`, class `k`.
    pub log_probs: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<Vec<usize>>,
    pub scheme: WeightScheme,
}

impl ScoredBatches {
    pub fn new(model: &Model, prepared: &[PreparedBatch], scheme: WeightScheme) -> Result<Self> {
        if prepared.iter().all(|b| b.n_examples() == 0) {
            return Err(Error::Empty("validation set is empty".into()));
        }
        let log_probs: Vec<_> = prepared.par_iter().map(|b| b.example_log_probs(model)).collect();
        Ok(Self {
            batch_ids: prepared.iter().map(|b| b.batch_id).collect(),
            log_probs,
            labels: prepared.iter().map(|b| b.labels().to_vec()).collect(),
            scheme,
        })
    }

    pub fn n_examples(&self) -> usize {
        self.labels.iter().map(Vec::len).sum()
    }

    /// Per-example (weighted) log probabilities of the given labels.
    fn scores_for(&self, labels: &[Vec<usize>]) -> Vec<f64> {
        self.log_probs
            .iter()
            .zip(labels)
            .flat_map(|(lp, ls)| lp.iter().zip(ls).map(|(row, &t)| self.scheme.example_weight(t) * row[t]))
            .collect()
    }

    /// Per-example scores of the true labels, flattened in batch order.
    pub fn scores(&self) -> Vec<f64> {
        self.scores_for(&self.labels)
    }

    /// Batch id of every flattened example.
    pub fn example_batch_ids(&self) -> Vec<u64> {
        self.batch_ids
            .iter()
            .zip(&self.labels)
            .flat_map(|(&id, ls)| std::iter::repeat_n(id, ls.len()))
            .collect()
    }

    fn lpd_for(&self, labels: &[Vec<usize>]) -> f64 {
        let mut total = 0.0;
        for (lp, ls) in self.log_probs.iter().zip(labels) {
            for (row, &t) in lp.iter().zip(ls) {
                total += self.scheme.example_weight(t) * row[t];
            }
        }
        total / self.n_examples() as f64
    }

    pub fn lpd(&self) -> f64 {
        self.lpd_for(&self.labels)
    }
}

/// Mean (weighted) log predicted probability of the true labels, with per-example scores.
pub fn lpd_val(model: &Model, val_batches: &[Batch], scheme: WeightScheme) -> Result<(f64, Vec<f64>)> {
    if val_batches.iter().all(Batch::is_empty) {
        return Err(Error::Empty("validation set is empty".into()));
    }
    let prepared = prepare_batches(model.config(), val_batches, scheme)?;
    let scored = ScoredBatches::new(model, &prepared, scheme)?;
    Ok((scored.lpd(), scored.scores()))
}

fn entropy(w: &[f64]) -> f64 {
    -w.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Point estimate of the divergence from an LPD.
///
/// Unweighted: `lpd − Σ w_k log w_k`. Balanced binary weighting: `lpd + log 2`.
/// The interval fields are set to the point estimate.
pub fn divergence_estimate(lpd: f64, scheme: WeightScheme, w: &[f64]) -> DivergenceReport {
    let (weights, weighted) = match scheme {
        WeightScheme::Unweighted => (w.to_vec(), false),
        WeightScheme::BalancedBinary(_) => (vec![0.5, 0.5], true),
    };
    let offset = entropy(&weights);
    let d = lpd + offset;
    DivergenceReport {
        lpd_val: lpd,
        class_weights: weights,
        entropy_offset: offset,
        divergence: d,
        ci_low: d,
        ci_high: d,
        upper_bound: offset,
        n_val_examples: 0,
        n_val_batches: 0,
        standard_error: 0.0,
        weighted,
    }
}

/// Group per-example scores by consecutive batch id into (sum, count) pairs.
fn batch_sums(scores: &[f64], batch_ids: &[u64]) -> Result<Vec<(f64, f64)>> {
    if scores.len() != batch_ids.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            found: batch_ids.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by_key(|&i| batch_ids[i]);
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut last = None;
    for i in order {
        if last != Some(batch_ids[i]) {
            out.push((0.0, 0.0));
            last = Some(batch_ids[i]);
        }
        let e = out.last_mut().expect("pushed above");
        e.0 += scores[i];
        e.1 += 1.0;
    }
    Ok(out)
}

/// Standard error of the mean score, treating batches as the independent units.
pub fn batch_standard_error(scores: &[f64], batch_ids: &[u64]) -> Result<f64> {
    let sums = batch_sums(scores, batch_ids)?;
    let n = sums.len() as f64;
    if n < 2.0 {
        return Ok(f64::NAN);
    }
    let total_n: f64 = sums.iter().map(|s| s.1).sum();
    let mean = sums.iter().map(|s| s.0).sum::<f64>() / total_n;
    let avg_size = total_n / n;
    // Ratio-estimator linearization: residual sums per batch.
    let resid: Vec<f64> = sums.iter().map(|(s, c)| (s - mean * c) / avg_size).collect();
    let var = resid.iter().map(|r| r * r).sum::<f64>() / (n - 1.0);
    Ok((var / n).sqrt())
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bayesian-bootstrap interval for the mean score.
///
/// Each replicate draws one Dirichlet(1,…,1) weight per batch and forms the
/// weighted mean of batch totals over batch sizes. The interval is the pair
/// of empirical `α/2` and `1 − α/2` quantiles, on the scale of the scores.
pub fn bootstrap_ci(scores: &[f64], batch_ids: &[u64], r: usize, alpha: f64, seed: u64) -> Result<(f64, f64)> {
    if r < 100 {
        return Err(Error::InvalidParameter(format!("bootstrap needs R ≥ 100, got {r}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let sums = batch_sums(scores, batch_ids)?;
    if sums.len() < 2 {
        return Err(Error::InvalidParameter("bootstrap needs at least 2 batches".into()));
    }
    let mut reps: Vec<f64> = (0..r)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let (mut num, mut den) = (0.0, 0.0);
            for (s, c) in &sums {
                let g: f64 = Exp1.sample(&mut rng);
                num += g * s;
                den += g * c;
            }
            num / den
        })
        .collect();
    reps.sort_by(f64::total_cmp);
    Ok((quantile(&reps, alpha / 2.0), quantile(&reps, 1.0 - alpha / 2.0)))
}

fn p_value(observed: f64, permuted: &[f64]) -> f64 {
    let tol = TIE_TOLERANCE * observed.abs().max(1.0);
    permuted.iter().filter(|&&v| v >= observed - tol).count() as f64 / permuted.len() as f64
}

/// Within-batch permutation test on cached predictions.
pub fn permutation_test_scored(scored: &ScoredBatches, b: usize, seed: u64) -> Result<TestResult> {
    if b == 0 {
        return Err(Error::InvalidParameter("B must be at least 1".into()));
    }
    let observed = scored.lpd();
    let permuted: Vec<f64> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let labels: Vec<Vec<usize>> = scored
                .labels
                .iter()
                .map(|ls| {
                    let mut l = ls.clone();
                    l.shuffle(&mut rng);
                    l
                })
                .collect();
            scored.lpd_for(&labels)
        })
        .collect();
    Ok(TestResult {
        lpd_observed: observed,
        p_value: p_value(observed, &permuted),
        lpd_permuted: permuted,
        b,
        seed,
    })
}

/// Permute labels within every validation batch `B` times and compare LPDs.
///
/// The model is fixed throughout; `p = #{LPD_b ≥ LPD_obs} / B`.
pub fn permutation_test(model: &Model, val_batches: &[Batch], scheme: WeightScheme, b: usize, seed: u64) -> Result<TestResult> {
    let prepared = prepare_batches(model.config(), val_batches, scheme)?;
    let scored = ScoredBatches::new(model, &prepared, scheme)?;
    permutation_test_scored(&scored, b, seed)
}

/// Naive variant that shuffles labels across the whole validation set.
///
/// It ignores the dependence between examples of one batch and is kept only
/// for comparison; [`run_pipeline`] never uses it.
pub fn global_permutation_test(scored: &ScoredBatches, b: usize, seed: u64) -> Result<TestResult> {
    if b == 0 {
        return Err(Error::InvalidParameter("B must be at least 1".into()));
    }
    let observed = scored.lpd();
    let flat: Vec<usize> = scored.labels.iter().flatten().copied().collect();
    let permuted: Vec<f64> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut all = flat.clone();
            all.shuffle(&mut rng);
            let mut it = all.into_iter();
            let labels: Vec<Vec<usize>> = scored.labels.iter().map(|ls| it.by_ref().take(ls.len()).collect()).collect();
            scored.lpd_for(&labels)
        })
        .collect();
    Ok(TestResult {
        lpd_observed: observed,
        p_value: p_value(observed, &permuted),
        lpd_permuted: permuted,
        b,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisualRow {
    pub coordinate: f64,
    /// `Pr(t=1)` for binary models, class-0 probability for multiclass ones.
    pub prediction: f64,
    pub label: usize,
}

/// One row per example: a raw feature coordinate against the model prediction.
///
/// `standardizer` maps raw features to the scale the model was trained on.
pub fn visual_export(
    model: &Model,
    batches: &[Batch],
    coordinate: usize,
    standardizer: Option<(&Standardizer, &FeatureLayout)>,
) -> Result<Vec<VisualRow>> {
    let len = model.config().feature_len();
    if coordinate >= len {
        return Err(Error::InvalidParameter(format!("coordinate {coordinate} out of range for features of length {len}")));
    }
    let class = match model.config().architecture {
        Architecture::Binary => 1,
        Architecture::SeparableMulticlass => 0,
    };
    batches
        .iter()
        .flat_map(|b| &b.examples)
        .map(|e| {
            let mut phi = e.feature.clone();
            if let Some((st, layout)) = standardizer {
                st.apply_feature(&mut phi, layout);
            }
            let lp = model.log_probs(&phi)?;
            Ok(VisualRow {
                coordinate: e.feature[coordinate],
                prediction: lp[class].exp(),
                label: e.label,
            })
        })
        .collect()
}

pub fn write_visual_csv<W: Write>(rows: &[VisualRow], mut w: W) -> Result<()> {
    writeln!(w, "coordinate,prediction,label")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.coordinate, r.prediction, r.label)?;
    }
    w.flush()?;
    Ok(())
}

/// Least-squares fit `a + b·x + c·x²`; returns `(a, b, c)`.
pub fn quadratic_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    use nalgebra::{Matrix3, Vector3};
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::InvalidParameter("quadratic fit needs at least 3 paired points".into()));
    }
    let mut ata = Matrix3::zeros();
    let mut aty = Vector3::zeros();
    for (&xi, &yi) in x.iter().zip(y) {
        let row = Vector3::new(1.0, xi, xi * xi);
        ata += row * row.transpose();
        aty += row * yi;
    }
    let sol = ata
        .lu()
        .solve(&aty)
        .ok_or_else(|| Error::Linalg("singular normal equations in quadratic fit".into()))?;
    Ok((sol[0], sol[1], sol[2]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub hidden_sizes: Vec<usize>,
    pub activation: Activation,
    pub train: TrainSettings,
    /// Balanced binary weighting (binary mappings only).
    pub weighted: bool,
    /// Fraction of runs held out for validation.
    pub split_fraction: f64,
    #[serde(rename = "B")]
    pub b: usize,
    #[serde(rename = "R")]
    pub r: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Raw feature index exported for the visual check, if any.
    pub visual_coordinate: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![64, 64],
            activation: Activation::Tanh,
            train: TrainSettings::default(),
            weighted: false,
            split_fraction: 0.5,
            b: 1000,
            r: 1000,
            alpha: 0.05,
            seed: 0,
            visual_coordinate: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: DivergenceReport,
    pub test: TestResult,
    pub train_log: TrainLog,
    pub layout: FeatureLayout,
    pub model: Model,
    pub visual: Option<Vec<VisualRow>>,
}

/// Map, split, standardize, train, score, bootstrap and permute.
///
/// Every stage seed is derived from `cfg.seed`; errors name their stage.
pub fn run_pipeline(table: &SimulationTable, kind: MappingKind, features: &FeatureConfig, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let seed = cfg.seed;
    let mapped = map_table(table, kind, features, derive_seed(seed, "map")).map_err(Error::at_stage("map"))?;
    let layout = mapped.layout;
    let (raw_train, raw_val) = split_batches(mapped.batches, cfg.split_fraction, derive_seed(seed, "split")).map_err(Error::at_stage("split"))?;
    if raw_train.is_empty() {
        return Err(Error::at_stage("split")(Error::Empty("no training batches".into())));
    }
    if raw_val.is_empty() {
        return Err(Error::at_stage("split")(Error::Empty("no validation batches".into())));
    }

    let (train_b, val_b, standardizer) = if features.standardize {
        let st = Standardizer::fit(&raw_train, &layout).map_err(Error::at_stage("standardize"))?;
        let mut t = raw_train.clone();
        let mut v = raw_val.clone();
        st.apply(&mut t, &layout);
        st.apply(&mut v, &layout);
        (t, v, Some(st))
    } else {
        (raw_train.clone(), raw_val.clone(), None)
    };

    let scheme = if cfg.weighted {
        if !kind.is_binary() {
            return Err(Error::at_stage("train")(Error::Config("balanced weighting needs a binary mapping".into())));
        }
        WeightScheme::BalancedBinary(layout.m)
    } else {
        WeightScheme::Unweighted
    };
    let model_cfg = ModelConfig::from_layout(&layout, &cfg.hidden_sizes, cfg.activation).map_err(Error::at_stage("train"))?;
    let settings = TrainSettings {
        weight_scheme: scheme,
        seed: derive_seed(seed, "train"),
        ..cfg.train.clone()
    };
    let prepared_train = prepare_batches(&model_cfg, &train_b, scheme).map_err(Error::at_stage("train"))?;
    let (model, train_log) = train_prepared(&prepared_train, &model_cfg, &settings).map_err(Error::at_stage("train"))?;

    let prepared_val = prepare_batches(&model_cfg, &val_b, scheme).map_err(Error::at_stage("lpd"))?;
    let scored = ScoredBatches::new(&model, &prepared_val, scheme).map_err(Error::at_stage("lpd"))?;
    let lpd = scored.lpd();
    let scores = scored.scores();
    let ids = scored.example_batch_ids();

    let w = class_weights(&val_b, layout.class_count);
    let mut report = divergence_estimate(lpd, scheme, &w);
    report.n_val_examples = scored.n_examples();
    report.n_val_batches = val_b.len();
    report.standard_error = batch_standard_error(&scores, &ids).map_err(Error::at_stage("bootstrap"))?;
    let (lo, hi) = bootstrap_ci(&scores, &ids, cfg.r, cfg.alpha, derive_seed(seed, "bootstrap")).map_err(Error::at_stage("bootstrap"))?;
    report.ci_low = (lo + report.entropy_offset).min(report.divergence);
    report.ci_high = (hi + report.entropy_offset).max(report.divergence);

    let test = permutation_test_scored(&scored, cfg.b, derive_seed(seed, "permutation")).map_err(Error::at_stage("permutation"))?;

    let visual = match cfg.visual_coordinate {
        Some(c) => Some(
            visual_export(&model, &raw_val, c, standardizer.as_ref().map(|s| (s, &layout))).map_err(Error::at_stage("visual"))?,
        ),
        None => None,
    };
    Ok(PipelineOutput {
        report,
        test,
        train_log,
        layout,
        model,
        visual,
    })
}

/// Report file contents: estimates, test result and the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub report: DivergenceReport,
    pub test: TestResult,
    pub mapping: MappingKind,
    pub features: FeatureConfig,
    pub pipeline: PipelineConfig,
    pub table_provenance: String,
}

impl ReportFile {
    pub fn validate(&self) -> Result<()> {
        let r = &self.report;
        let finite = [r.lpd_val, r.divergence, r.ci_low, r.ci_high, r.entropy_offset, r.upper_bound];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("report contains non-finite estimates".into()));
        }
        if !(r.ci_low <= r.divergence && r.divergence <= r.ci_high) {
            return Err(Error::Config("report interval does not contain its estimate".into()));
        }
        if !(0.0..=1.0).contains(&self.test.p_value) || self.test.lpd_permuted.len() != self.test.b {
            return Err(Error::Config("report test result is inconsistent".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Architecture;
    use crate::label_mapping::{Example, LinearFeature};
    use crate::sim_model::{generate_gaussian_table, Corruption, GaussianTableConfig};

    fn zero_binary() -> Model {
        Model::zeros(ModelConfig {
            architecture: Architecture::Binary,
            hidden_sizes: vec![3],
            activation: Activation::Tanh,
            input_dim: 1,
            n_linear_features: 0,
            class_count: 2,
            shared_dim: 0,
        })
        .unwrap()
    }

    fn batches(n: usize, m: usize) -> Vec<Batch> {
        (0..n as u64)
            .map(|id| {
                let examples: Vec<Example> = (0..=m)
                    .map(|k| Example {
                        label: usize::from(k > 0),
                        feature: vec![id as f64 + k as f64 * 0.1],
                        batch_id: id,
                    })
                    .collect();
                Batch {
                    batch_id: id,
                    examples,
                    label_multiset: vec![1, m],
                }
            })
            .collect()
    }

    #[test]
    fn uniform_classifier_lpd_and_divergence() {
        let m = zero_binary();
        let (lpd, scores) = lpd_val(&m, &batches(4, 1), WeightScheme::Unweighted).unwrap();
        assert!((lpd + 2f64.ln()).abs() < 1e-15);
        assert_eq!(scores.len(), 8);
        let d = divergence_estimate(lpd, WeightScheme::Unweighted, &[0.5, 0.5]);
        assert!(d.divergence.abs() < 1e-15);
        let (w, _) = lpd_val(&m, &batches(4, 1), WeightScheme::BalancedBinary(1)).unwrap();
        assert_eq!(w, lpd);
        let k = 6.0f64;
        let d = divergence_estimate(-k.ln(), WeightScheme::Unweighted, &[1.0 / k; 6]);
        assert!(d.divergence.abs() < 1e-14);
        assert!(lpd_val(&m, &[], WeightScheme::Unweighted).is_err());
    }

    #[test]
    fn bootstrap_constant_scores_and_centre() {
        let ids: Vec<u64> = (0..50).flat_map(|b| [b, b]).collect();
        let (lo, hi) = bootstrap_ci(&vec![-0.3; 100], &ids, 200, 0.05, 1).unwrap();
        assert!((lo + 0.3).abs() < 1e-15 && (hi + 0.3).abs() < 1e-15);
        let scores: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).sin()).collect();
        let mean = scores.iter().sum::<f64>() / 100.0;
        let (lo, hi) = bootstrap_ci(&scores, &ids, 4000, 0.05, 1).unwrap();
        assert!(lo < mean && mean < hi);
        assert!(((lo + hi) / 2.0 - mean).abs() < 0.05);
        assert!(bootstrap_ci(&scores, &ids, 50, 0.05, 1).is_err());
        assert!(bootstrap_ci(&[1.0, 2.0], &[0, 0], 200, 0.05, 1).is_err());
    }

    #[test]
    fn constant_classifier_gives_p_one() {
        let m = zero_binary();
        let t = permutation_test(&m, &batches(10, 3), WeightScheme::BalancedBinary(3), 50, 2).unwrap();
        assert_eq!(t.p_value, 1.0);
        assert!(permutation_test(&m, &batches(10, 3), WeightScheme::Unweighted, 0, 2).is_err());
    }

    #[test]
    fn permutation_preserves_multisets_and_grid() {
        let mut model = Model::zeros(zero_binary().config().clone()).unwrap();
        let mut p = model.params().to_vec();
        let n = p.len();
        p[n - 2] = 1.0; // output weight on the hidden unit
        p[0] = 0.7;
        model.set_params(&p).unwrap();
        let data = batches(12, 4);
        let prepared = prepare_batches(model.config(), &data, WeightScheme::Unweighted).unwrap();
        let scored = ScoredBatches::new(&model, &prepared, WeightScheme::Unweighted).unwrap();
        let t = permutation_test_scored(&scored, 40, 3).unwrap();
        let atoms = t.p_value * 40.0;
        assert!((atoms - atoms.round()).abs() < 1e-12);
        let mut rng = stream_rng(3, 0);
        for ls in &scored.labels {
            let mut l = ls.clone();
            l.shuffle(&mut rng);
            let count = |v: &[usize]| v.iter().filter(|&&x| x == 1).count();
            assert_eq!(count(&l), count(ls));
        }
        let again = permutation_test_scored(&scored, 40, 3).unwrap();
        assert_eq!(t, again);
        let global = global_permutation_test(&scored, 40, 3).unwrap();
        assert_eq!(global.lpd_permuted.len(), 40);
    }

    #[test]
    fn quadratic_fit_recovers_coefficients() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 / 4.0 - 2.0).collect();
        let y: Vec<f64> = x.iter().map(|x| 1.0 - 0.5 * x + 2.0 * x * x).collect();
        let (a, b, c) = quadratic_fit(&x, &y).unwrap();
        assert!((a - 1.0).abs() < 1e-10 && (b + 0.5).abs() < 1e-10 && (c - 2.0).abs() < 1e-10);
    }

    fn quick_cfg(seed: u64) -> PipelineConfig {
        PipelineConfig {
            hidden_sizes: vec![8],
            train: TrainSettings {
                learning_rate: 1e-2,
                epochs: 40,
                ..Default::default()
            },
            b: 100,
            r: 200,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn pipeline_detects_bias_and_reports_consistently() {
        let table = generate_gaussian_table(
            &GaussianTableConfig::new(1, 400, 5, 3).with_corruption(Corruption::new(1.0, 1.0).unwrap()),
        )
        .unwrap();
        let feats = FeatureConfig::default().with_linear(&[LinearFeature::LogP, LinearFeature::LogQ]);
        let cfg = PipelineConfig {
            weighted: true,
            visual_coordinate: Some(0),
            ..quick_cfg(1)
        };
        let out = run_pipeline(&table, MappingKind::BinaryFull, &feats, &cfg).unwrap();
        let r = &out.report;
        assert!(r.ci_low <= r.divergence && r.divergence <= r.ci_high);
        assert!(r.divergence <= r.upper_bound + 1e-9);
        assert!(r.divergence > 3.0 * r.standard_error, "{r:?}");
        assert!(out.test.p_value < 0.05);
        assert_eq!(out.visual.as_ref().unwrap().len(), r.n_val_examples);
        let again = run_pipeline(&table, MappingKind::BinaryFull, &feats, &cfg).unwrap();
        assert_eq!(again.report, out.report);
        assert_eq!(again.test, out.test);
    }

    #[test]
    fn pipeline_errors_name_their_stage() {
        let mut table = generate_gaussian_table(&GaussianTableConfig::new(1, 4, 2, 0)).unwrap();
        table.runs.clear();
        let err = run_pipeline(&table, MappingKind::BinaryFull, &FeatureConfig::default(), &quick_cfg(0)).unwrap_err();
        assert!(err.to_string().contains("map"), "{err}");
        let t3 = generate_gaussian_table(&GaussianTableConfig::new(3, 10, 2, 0)).unwrap();
        let err = run_pipeline(&t3, MappingKind::BinaryRank, &FeatureConfig::default(), &quick_cfg(0)).unwrap_err();
        assert!(err.to_string().contains("map"), "{err}");
        let cfg = PipelineConfig {
            weighted: true,
            ..quick_cfg(0)
        };
        let err = run_pipeline(&t3, MappingKind::MulticlassPermutation, &FeatureConfig::default(), &cfg).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
    }

    #[test]
    fn overconfident_q_gives_inverted_u() {
        // Too-narrow q puts its draws near the centre, so Pr(t=1) peaks there.
        let table = generate_gaussian_table(
            &GaussianTableConfig::new(1, 1500, 20, 8).with_corruption(Corruption::new(0.0, 0.8).unwrap()),
        )
        .unwrap();
        let feats = FeatureConfig {
            include_y: false,
            ..Default::default()
        };
        let cfg = PipelineConfig {
            visual_coordinate: Some(0),
            ..quick_cfg(2)
        };
        let out = run_pipeline(&table, MappingKind::BinaryNoY, &feats, &cfg).unwrap();
        let rows = out.visual.unwrap();
        let x: Vec<f64> = rows.iter().map(|r| r.coordinate).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.prediction).collect();
        let (_, _, c) = quadratic_fit(&x, &y).unwrap();
        assert!(c < 0.0, "curvature {c}");
    }
}
