//! Ground-truth divergences used to check the classifier-based estimates.
//!
//! Discrete instances are enumerated exactly. Gaussian quantities use closed
//! forms where they exist and seeded Monte Carlo with standard errors
//! otherwise.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::label_mapping::{rank_statistic, run_ranks};
use crate::rng::stream_rng;
use crate::sim_model::{GaussianPosterior, SimulationTable};
use crate::{Error, Result};

/// Largest number of `(M+1)`-tuples [`brute_force_divergences`] will enumerate.
pub const ENUMERATION_BUDGET: f64 = 1e7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDist {
    probs: Vec<f64>,
}

impl DiscreteDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidParameter("empty distribution".into()));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidParameter(format!("negative or non-finite probability in {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    /// Normalize arbitrary nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidParameter("weights must have a positive finite sum".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleDivergences {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
}

/// `w₀ KL(a‖r) + w₁ KL(b‖r)` with `r = w₀a + w₁b`, for aligned histograms.
///
/// This is the optimal prediction ability of a binary classifier whose class
/// conditionals are `a` (label 0) and `b` (label 1) with class weights `w₀, w₁`.
pub fn binary_divergence(a: &[f64], b: &[f64], w0: f64) -> f64 {
    let w1 = 1.0 - w0;
    a.iter()
        .zip(b)
        .map(|(&pa, &pb)| {
            let r = w0 * pa + w1 * pb;
            let mut s = 0.0;
            if pa > 0.0 {
                s += w0 * pa * (pa / r).ln();
            }
            if pb > 0.0 {
                s += w1 * pb * (pb / r).ln();
            }
            s
        })
        .sum()
}

pub fn kl_discrete(p: &DiscreteDist, q: &DiscreteDist) -> f64 {
    p.probs
        .iter()
        .zip(&q.probs)
        .map(|(&a, &b)| match (a > 0.0, b > 0.0) {
            (false, _) => 0.0,
            (true, true) => a * (a / b).ln(),
            (true, false) => f64::INFINITY,
        })
        .sum()
}

/// `E_q[(p/q − 1)²] = Σ p²/q − 1`; infinite if `p` charges a `q`-null outcome.
pub fn chi2_discrete(p: &DiscreteDist, q: &DiscreteDist) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        if a > 0.0 {
            if b == 0.0 {
                return f64::INFINITY;
            }
            s += a * a / b;
        }
    }
    (s - 1.0).max(0.0)
}

fn check_pair(p: &DiscreteDist, q: &DiscreteDist, m: usize) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: q.len(),
        });
    }
    if m == 0 {
        return Err(Error::InvalidParameter("M must be at least 1".into()));
    }
    Ok(())
}

/// Binary full-feature divergence: labels 0 and 1 weighted `1/(M+1)` and `M/(M+1)`.
pub fn d1_discrete(p: &DiscreteDist, q: &DiscreteDist, m: usize) -> f64 {
    binary_divergence(&p.probs, &q.probs, 1.0 / (m as f64 + 1.0))
}

/// Rank-feature divergence in the population limit.
///
/// Outcomes sit on the integer line. `Z = Q(θ)` is the dequantized CDF of `θ`
/// under `q`: uniform on `[0, 1]` when `θ ~ q`, and with density `p_k/q_k` on
/// cell `k` when `θ ~ p`. Outcomes with `q_k = 0` become atoms. The binary
/// divergence is then integrated on the `Z` scale.
pub fn d3_discrete(p: &DiscreteDist, q: &DiscreteDist, m: usize) -> f64 {
    let w0 = 1.0 / (m as f64 + 1.0);
    let w1 = 1.0 - w0;
    let mut total = 0.0;
    let mut atom = 0.0;
    for (&pk, &qk) in p.probs.iter().zip(&q.probs) {
        if qk > 0.0 {
            if atom > 0.0 {
                total += w0 * atom * (1.0 / w0).ln();
                atom = 0.0;
            }
            let f = pk / qk;
            let r = w0 * f + w1;
            let cell = if f > 0.0 { w0 * f * (f / r).ln() } else { 0.0 } - w1 * r.ln();
            total += qk * cell;
        } else {
            atom += pk;
        }
    }
    if atom > 0.0 {
        total += w0 * atom * (1.0 / w0).ln();
    }
    total
}

/// Full multiclass divergence by enumerating every `(M+1)`-tuple of outcomes.
///
/// Equals `KL(π₀ ‖ π̄)` with `π_k(x₀..x_M) = p(x_k) Π_{m≠k} q(x_m)` and `π̄`
/// their uniform mixture.
pub fn d4_brute_force(p: &DiscreteDist, q: &DiscreteDist, m: usize) -> Result<f64> {
    check_pair(p, q, m)?;
    let n = p.len();
    let k = m + 1;
    let tuples = (n as f64).powi(k as i32);
    if tuples > ENUMERATION_BUDGET {
        return Err(Error::EnumerationBudget {
            tuples,
            budget: ENUMERATION_BUDGET,
        });
    }
    let (pp, qq) = (&p.probs, &q.probs);
    let mut idx = vec![0usize; k];
    let mut prefix = vec![1.0; k + 1];
    let mut suffix = vec![1.0; k + 1];
    let mut total = 0.0;
    loop {
        for j in 0..k {
            prefix[j + 1] = prefix[j] * qq[idx[j]];
        }
        for j in (0..k).rev() {
            suffix[j] = suffix[j + 1] * qq[idx[j]];
        }
        let num = pp[idx[0]] * suffix[1];
        if num > 0.0 {
            let mix: f64 = (0..k).map(|j| pp[idx[j]] * prefix[j] * suffix[j + 1]).sum::<f64>() / k as f64;
            total += num * (num / mix).ln();
        }
        // Odometer increment.
        let mut pos = 0;
        loop {
            if pos == k {
                return Ok(total);
            }
            idx[pos] += 1;
            if idx[pos] < n {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

fn for_each_composition(n: usize, total: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(c: &mut Vec<usize>, i: usize, left: usize, f: &mut impl FnMut(&[usize])) {
        if i + 1 == c.len() {
            c[i] = left;
            f(c);
            return;
        }
        for v in 0..=left {
            c[i] = v;
            rec(c, i + 1, left - v, f);
        }
    }
    let mut c = vec![0; n];
    rec(&mut c, 0, total, f);
}

/// Full multiclass divergence by summing over multinomial counts of the draws.
///
/// Conditioning on `x₀ = a` and the draw counts `c`, the log ratio `π₀/π̄`
/// is `log ρ_a − log((ρ_a + Σ_b c_b ρ_b)/K)` with `ρ = p/q`. Cost grows
/// polynomially in `M`, so this route reaches much larger `M` than enumeration.
pub fn d4_exact_counts(p: &DiscreteDist, q: &DiscreteDist, m: usize) -> Result<f64> {
    check_pair(p, q, m)?;
    let k = (m + 1) as f64;
    let support: Vec<usize> = (0..q.len()).filter(|&i| q.probs[i] > 0.0).collect();
    let rho: Vec<f64> = support.iter().map(|&i| p.probs[i] / q.probs[i]).collect();
    let log_q: Vec<f64> = support.iter().map(|&i| q.probs[i].ln()).collect();
    let ln_m_fact = ln_gamma(m as f64 + 1.0);
    let mut inf_mass = 0.0;
    let mut total = 0.0;
    for_each_composition(support.len(), m, &mut |c| {
        let log_mult = ln_m_fact
            + c.iter()
                .zip(&log_q)
                .map(|(&ci, lq)| ci as f64 * lq - ln_gamma(ci as f64 + 1.0))
                .sum::<f64>();
        let prob = log_mult.exp();
        let s: f64 = c.iter().zip(&rho).map(|(&ci, r)| ci as f64 * r).sum();
        for (a, &pa) in p.probs.iter().enumerate() {
            if pa == 0.0 {
                continue;
            }
            let qa = q.probs[a];
            if qa == 0.0 {
                inf_mass += pa * prob;
                continue;
            }
            let ra = pa / qa;
            total += pa * prob * (ra.ln() - ((ra + s) / k).ln());
        }
    });
    // Outcomes with q = 0 can only come from label 0, so the classifier is certain.
    total += inf_mass * k.ln();
    Ok(total)
}

/// Exact rank-feature divergence at finite `M` with uniformly broken ties.
///
/// Under label 0 the rank of `θ = k` is `Bin(M, Q⁺_k + q_k(1−u))` with `u` the
/// tie-breaking position; under label 1 a draw's rank adds `M−1` such draws
/// and one Bernoulli from `p`. The `u` integral is polynomial and evaluated
/// exactly by Gauss–Legendre quadrature.
pub fn d3_finite_rank(p: &DiscreteDist, q: &DiscreteDist, m: usize) -> Result<f64> {
    check_pair(p, q, m)?;
    let n = p.len();
    let tail = |d: &[f64]| -> Vec<f64> {
        let mut t = vec![0.0; n];
        for k in (0..n.saturating_sub(1)).rev() {
            t[k] = t[k + 1] + d[k + 1];
        }
        t
    };
    let (qt, pt) = (tail(&q.probs), tail(&p.probs));
    let (nodes, weights) = gauss_legendre_unit(m / 2 + 2);
    let mut h0 = vec![0.0; m + 1];
    let mut h1 = vec![0.0; m + 1];
    for k in 0..n {
        for (&u, &wu) in nodes.iter().zip(&weights) {
            let a = qt[k] + q.probs[k] * (1.0 - u);
            let b = pt[k] + p.probs[k] * (1.0 - u);
            if p.probs[k] > 0.0 {
                let pmf = poisson_binomial(&vec![a; m]);
                for (h, v) in h0.iter_mut().zip(pmf) {
                    *h += p.probs[k] * wu * v;
                }
            }
            if q.probs[k] > 0.0 {
                let mut probs = vec![a; m - 1];
                probs.push(b);
                let pmf = poisson_binomial(&probs);
                for (h, v) in h1.iter_mut().zip(pmf) {
                    *h += q.probs[k] * wu * v;
                }
            }
        }
    }
    Ok(binary_divergence(&h0, &h1, 1.0 / (m as f64 + 1.0)))
}

/// Distribution of a sum of independent Bernoulli variables.
fn poisson_binomial(probs: &[f64]) -> Vec<f64> {
    let mut pmf = vec![0.0; probs.len() + 1];
    pmf[0] = 1.0;
    for (i, &a) in probs.iter().enumerate() {
        for j in (0..=i + 1).rev() {
            let stay = pmf[j] * (1.0 - a);
            let up = if j > 0 { pmf[j - 1] * a } else { 0.0 };
            pmf[j] = stay + up;
        }
    }
    pmf
}

/// Gauss–Legendre nodes and weights on `[0, 1]`, exact for polynomials of degree `2n − 1`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes.push(0.5 * (1.0 - x));
        weights.push(1.0 / ((1.0 - x * x) * dp * dp));
    }
    (nodes, weights)
}

/// All four divergences of a discrete instance.
///
/// Without a `y` variable the no-`y` mapping coincides with the full binary
/// one, so `d2 = d1`.
pub fn brute_force_divergences(p: &DiscreteDist, q: &DiscreteDist, m: usize) -> Result<OracleDivergences> {
    check_pair(p, q, m)?;
    let d4 = d4_brute_force(p, q, m)?;
    let d1 = d1_discrete(p, q, m);
    Ok(OracleDivergences {
        d1,
        d2: d1,
        d3: d3_discrete(p, q, m),
        d4,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub m: usize,
    pub d4: f64,
    /// Standard error of `d4`; zero for exact rows.
    pub d4_se: f64,
    /// `KL − χ²/(2M)`.
    pub expansion: f64,
}

impl RateRow {
    pub fn residual(&self) -> f64 {
        (self.d4 - self.expansion).abs()
    }
}

/// Exact `D₄` next to its large-`M` expansion on a discrete instance.
pub fn d4_rate_check(p: &DiscreteDist, q: &DiscreteDist, m_list: &[usize]) -> Result<Vec<RateRow>> {
    let kl = kl_discrete(p, q);
    let chi2 = chi2_discrete(p, q);
    if !kl.is_finite() || !chi2.is_finite() {
        return Err(Error::InvalidParameter("p must be absolutely continuous with respect to q".into()));
    }
    m_list
        .iter()
        .map(|&m| {
            Ok(RateRow {
                m,
                d4: d4_exact_counts(p, q, m)?,
                d4_se: 0.0,
                expansion: kl - chi2 / (2.0 * m as f64),
            })
        })
        .collect()
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub se: f64,
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

const MC_CHUNK: usize = 4096;

/// Evaluate `f` on `n` seeded draws, in parallel chunks with fixed streams.
fn mc_samples(n: usize, seed: u64, f: impl Fn(&mut rand_chacha::ChaCha8Rng) -> f64 + Sync) -> Vec<f64> {
    let chunks = n.div_ceil(MC_CHUNK);
    (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let len = MC_CHUNK.min(n - c * MC_CHUNK);
            (0..len).map(|_| f(&mut rng)).collect::<Vec<_>>()
        })
        .collect()
}

fn check_dims(p: &GaussianPosterior, q: &GaussianPosterior) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            found: q.dim(),
        });
    }
    Ok(())
}

/// `KL(p ‖ q)` between multivariate normals.
pub fn kl_mvn(p: &GaussianPosterior, q: &GaussianPosterior) -> Result<f64> {
    check_dims(p, q)?;
    let q_inv = q.inverse_covariance();
    let diff: DVector<f64> = q.mean() - p.mean();
    let trace = (&q_inv * p.covariance()).trace();
    let quad = diff.dot(&(&q_inv * &diff));
    let d = p.dim() as f64;
    Ok((0.5 * (trace + quad - d + q.log_det() - p.log_det())).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Chi2Value {
    Exact { value: f64 },
    MonteCarlo { estimate: f64, se: f64 },
    Divergent { reason: String },
}

impl Chi2Value {
    /// Point value; `+∞` when the integral diverges.
    pub fn value(&self) -> f64 {
        match self {
            Chi2Value::Exact { value } => *value,
            Chi2Value::MonteCarlo { estimate, .. } => *estimate,
            Chi2Value::Divergent { .. } => f64::INFINITY,
        }
    }
}

/// `χ²(p ‖ q) = E_q[(p/q − 1)²]` between multivariate normals.
///
/// Equal covariances give `exp(Δμᵀ Σ⁻¹ Δμ) − 1`. Otherwise the integral is
/// finite iff `2Σ_p⁻¹ − Σ_q⁻¹` is positive definite, and is then estimated by
/// Monte Carlo over `q`.
pub fn chi2_gaussian(p: &GaussianPosterior, q: &GaussianPosterior, n_mc: usize, seed: u64) -> Result<Chi2Value> {
    check_dims(p, q)?;
    let diff: DVector<f64> = q.mean() - p.mean();
    let scale = p.covariance().abs().max().max(1.0);
    if (p.covariance() - q.covariance()).abs().max() <= 1e-12 * scale {
        let quad = diff.dot(&(p.inverse_covariance() * &diff));
        return Ok(Chi2Value::Exact { value: quad.exp_m1() });
    }
    let a = p.inverse_covariance() * 2.0 - q.inverse_covariance();
    let a = (&a + a.transpose()) * 0.5;
    let min_eig = a.symmetric_eigenvalues().min();
    if min_eig <= 1e-12 {
        return Ok(Chi2Value::Divergent {
            reason: format!("2Σp⁻¹ − Σq⁻¹ is not positive definite (smallest eigenvalue {min_eig:.3e}); q has lighter tails than p"),
        });
    }
    if n_mc < 2 {
        return Err(Error::InvalidParameter("n_mc must be at least 2".into()));
    }
    let xs = mc_samples(n_mc, seed, |rng| {
        let x = q.sample(rng);
        let r = (p.log_density(&x) - q.log_density(&x)).exp();
        (r - 1.0).powi(2)
    });
    let (estimate, se) = mean_se(&xs);
    Ok(Chi2Value::MonteCarlo { estimate, se })
}

/// `w KL(p‖r) + (1−w) KL(q‖r)` with `r = wp + (1−w)q`, by Monte Carlo.
///
/// For the Gaussian suite the conditional value does not depend on `y`, so
/// one pair of posteriors suffices.
pub fn jsd_conditional_mc(p: &GaussianPosterior, q: &GaussianPosterior, w: f64, n_mc: usize, seed: u64) -> Result<McEstimate> {
    check_dims(p, q)?;
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidParameter(format!("weight {w} outside [0, 1]")));
    }
    if n_mc < 2 {
        return Err(Error::InvalidParameter("n_mc must be at least 2".into()));
    }
    if w == 0.0 || w == 1.0 {
        return Ok(McEstimate { estimate: 0.0, se: 0.0 });
    }
    let (lw, l1w) = (w.ln(), (1.0 - w).ln());
    let log_r = |x: &[f64]| log_add(lw + p.log_density(x), l1w + q.log_density(x));
    let from_p = mc_samples(n_mc, seed, |rng| {
        let x = p.sample(rng);
        p.log_density(&x) - log_r(&x)
    });
    let from_q = mc_samples(n_mc, seed ^ 0x9e37_79b9_7f4a_7c15, |rng| {
        let x = q.sample(rng);
        q.log_density(&x) - log_r(&x)
    });
    let (mp, sp) = mean_se(&from_p);
    let (mq, sq) = mean_se(&from_q);
    Ok(McEstimate {
        estimate: w * mp + (1.0 - w) * mq,
        se: ((w * sp).powi(2) + ((1.0 - w) * sq).powi(2)).sqrt(),
    })
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Monte-Carlo `D₄` between Gaussians: `E[log ρ(θ₀) − log mean_k ρ(θ_k)]`
/// with `θ₀ ~ p`, `θ₁..θ_M ~ q` and `ρ = p/q`.
pub fn d4_gaussian_mc(p: &GaussianPosterior, q: &GaussianPosterior, m: usize, n_mc: usize, seed: u64) -> Result<McEstimate> {
    check_dims(p, q)?;
    if m == 0 || n_mc < 2 {
        return Err(Error::InvalidParameter("need M ≥ 1 and n_mc ≥ 2".into()));
    }
    let log_rho = |x: &[f64]| p.log_density(x) - q.log_density(x);
    let ln_k = ((m + 1) as f64).ln();
    let xs = mc_samples(n_mc, seed, |rng| {
        let l0 = log_rho(&p.sample(rng));
        let ls: Vec<f64> = (0..m).map(|_| log_rho(&q.sample(rng))).collect();
        let mx = ls.iter().copied().fold(l0, f64::max);
        let sum = (l0 - mx).exp() + ls.iter().map(|l| (l - mx).exp()).sum::<f64>();
        l0 - (mx + sum.ln() - ln_k)
    });
    let (estimate, se) = mean_se(&xs);
    Ok(McEstimate { estimate, se })
}

/// Monte-Carlo `D₄` next to `KL − χ²/(2M)` for a Gaussian pair.
pub fn d4_rate_check_gaussian(
    p: &GaussianPosterior,
    q: &GaussianPosterior,
    m_list: &[usize],
    n_mc: usize,
    seed: u64,
) -> Result<Vec<RateRow>> {
    let kl = kl_mvn(p, q)?;
    let chi2 = chi2_gaussian(p, q, n_mc, seed)?.value();
    if !chi2.is_finite() {
        return Err(Error::InvalidParameter("χ² divergence is infinite for this pair".into()));
    }
    m_list
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let est = d4_gaussian_mc(p, q, m, n_mc, crate::rng::derive_indexed(seed, "d4-rate", i as u64))?;
            Ok(RateRow {
                m,
                d4: est.estimate,
                d4_se: est.se,
                expansion: kl - chi2 / (2.0 * m as f64),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SbcResult {
    pub p_values: Vec<f64>,
    pub min_p: f64,
    /// Bonferroni decision: `min p < α / d`.
    pub reject: bool,
}

/// Per-coordinate chi-squared uniformity test of SBC ranks, Bonferroni-combined.
///
/// Ranks `r = #{draws > θ}` take values `0..=M`; rank `r` falls in bin
/// `⌊r·n_bins/(M+1)⌋` and expected counts follow the exact number of ranks per
/// bin.
pub fn sbc_rank_test(table: &SimulationTable, n_bins: usize, alpha: f64) -> Result<SbcResult> {
    let k = table.m + 1;
    if n_bins < 2 || n_bins > k {
        return Err(Error::InvalidParameter(format!("n_bins must lie in [2, M+1 = {k}], got {n_bins}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if table.runs.is_empty() {
        return Err(Error::Empty("simulation table has no runs".into()));
    }
    let bin_of = |r: usize| r * n_bins / k;
    let mut width = vec![0usize; n_bins];
    for r in 0..k {
        width[bin_of(r)] += 1;
    }
    let s = table.runs.len() as f64;
    let chi = ChiSquared::new((n_bins - 1) as f64).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let p_values: Vec<f64> = (0..table.d_theta)
        .map(|c| {
            let mut counts = vec![0usize; n_bins];
            for run in &table.runs {
                let reference: Vec<f64> = run.draws.iter().map(|d| d[c]).collect();
                counts[bin_of(rank_statistic(run.theta[c], &reference))] += 1;
            }
            let stat: f64 = counts
                .iter()
                .zip(&width)
                .map(|(&o, &w)| {
                    let e = s * w as f64 / k as f64;
                    (o as f64 - e).powi(2) / e
                })
                .sum();
            chi.sf(stat)
        })
        .collect();
    let min_p = p_values.iter().copied().fold(1.0, f64::min);
    Ok(SbcResult {
        reject: min_p < alpha / table.d_theta as f64,
        p_values,
        min_p,
    })
}

/// Class-conditional rank histograms over `0..=M` for one coordinate.
pub fn rank_histograms(table: &SimulationTable, coordinate: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if coordinate >= table.d_theta {
        return Err(Error::InvalidParameter(format!("coordinate {coordinate} out of range")));
    }
    let m = table.m;
    let mut h0 = vec![0.0; m + 1];
    let mut h1 = vec![0.0; m + 1];
    for run in &table.runs {
        let ranks = run_ranks(run, &[coordinate], seed);
        h0[ranks[0][0]] += 1.0;
        for r in &ranks[1..] {
            h1[r[0]] += 1.0;
        }
    }
    let (n0, n1): (f64, f64) = (h0.iter().sum(), h1.iter().sum());
    if n0 == 0.0 || n1 == 0.0 {
        return Err(Error::Empty("a label class has no rank observations".into()));
    }
    h0.iter_mut().for_each(|v| *v /= n0);
    h1.iter_mut().for_each(|v| *v /= n1);
    Ok((h0, h1))
}

/// Plug-in rank divergence of a naive-Bayes classifier built on rank histograms.
pub fn naive_bayes_rank_divergence(table: &SimulationTable, coordinate: usize, seed: u64) -> Result<f64> {
    let (h0, h1) = rank_histograms(table, coordinate, seed)?;
    Ok(binary_divergence(&h0, &h1, 1.0 / (table.m as f64 + 1.0)))
}

/// Draw a random distribution over `n` outcomes with every mass at least `floor`.
pub fn random_discrete<R: Rng + ?Sized>(rng: &mut R, n: usize, floor: f64) -> DiscreteDist {
    let w: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-300).ln() + floor).collect();
    DiscreteDist::from_weights(&w).expect("positive weights")
}

/// Standard-normal vector helper for tests and benchmarks.
pub fn std_normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}
