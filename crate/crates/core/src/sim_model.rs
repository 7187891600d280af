//! Simulation tables and the synthetic Gaussian calibration scenarios.
//!
//! The generative model is `θ ~ N(0, I_d)`, `y | θ ~ N(θ, σ² I_d)`, whose exact
//! posterior is `N(y / (1 + σ²), σ²/(1 + σ²) I_d)`. An approximate inference
//! routine is emulated by perturbing that posterior ([`Corruption`]) or by
//! replacing it with the prior ([`Inference::Prior`]), and its draws can be
//! made autocorrelated with a Gaussian AR(1) chain whose stationary law is
//! exactly the approximate posterior.
//!
//! Tables are stored as JSON lines: a header
//! `{"d_theta":..,"d_y":..,"M":..,"S":..}` followed by one run per line,
//! `{"run_id":..,"theta":[..],"y":[..],"draws":[[..],..],"log_p":[..],"log_q":[..]}`.
//! `log_p` and `log_q` are optional and, when present, have `M + 1` entries
//! ordered `[θ, θ̃₁, .., θ̃_M]`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::stream_rng;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One simulation run: a prior draw, its data and `M` approximate posterior draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationRun {
    pub run_id: u64,
    pub theta: Vec<f64>,
    pub y: Vec<f64>,
    pub draws: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_p: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_q: Option<Vec<f64>>,
}

impl SimulationRun {
    pub fn m(&self) -> usize {
        self.draws.len()
    }

    /// Value in position `k` of `[θ, θ̃₁, .., θ̃_M]`.
    pub fn value(&self, k: usize) -> &[f64] {
        if k == 0 {
            &self.theta
        } else {
            &self.draws[k - 1]
        }
    }

    fn validate(&self, d_theta: usize, d_y: usize, m: usize) -> std::result::Result<(), String> {
        let id = self.run_id;
        if self.theta.len() != d_theta {
            return Err(format!("run {id}: theta has length {}, expected {d_theta}", self.theta.len()));
        }
        if self.y.len() != d_y {
            return Err(format!("run {id}: y has length {}, expected {d_y}", self.y.len()));
        }
        if self.draws.len() != m {
            return Err(format!("run {id}: {} draws, expected M = {m}", self.draws.len()));
        }
        for (i, d) in self.draws.iter().enumerate() {
            if d.len() != d_theta {
                return Err(format!(
                    "run {id}: draw {} has dimension {}, expected {d_theta}",
                    i + 1,
                    d.len()
                ));
            }
        }
        for (name, v) in [("log_p", &self.log_p), ("log_q", &self.log_q)] {
            if let Some(v) = v {
                if v.len() != m + 1 {
                    return Err(format!("run {id}: {name} has length {}, expected M + 1 = {}", v.len(), m + 1));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(format!("run {id}: {name} contains a non-finite entry"));
                }
            }
        }
        let finite = self.theta.iter().chain(&self.y).chain(self.draws.iter().flatten()).all(|x| x.is_finite());
        if !finite {
            return Err(format!("run {id}: non-finite value"));
        }
        Ok(())
    }
}

/// `S` runs sharing `d_theta`, `d_y` and `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTable {
    pub runs: Vec<SimulationRun>,
    pub d_theta: usize,
    pub d_y: usize,
    pub m: usize,
    pub provenance: String,
}

impl SimulationTable {
    pub fn new(runs: Vec<SimulationRun>, d_theta: usize, d_y: usize, m: usize, provenance: impl Into<String>) -> Result<Self> {
        let table = Self {
            runs,
            d_theta,
            d_y,
            m,
            provenance: provenance.into(),
        };
        table.validate()?;
        Ok(table)
    }

    pub fn s(&self) -> usize {
        self.runs.len()
    }

    pub fn has_log_p(&self) -> bool {
        !self.runs.is_empty() && self.runs.iter().all(|r| r.log_p.is_some())
    }

    pub fn has_log_q(&self) -> bool {
        !self.runs.is_empty() && self.runs.iter().all(|r| r.log_q.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_theta == 0 {
            return Err(Error::InvalidParameter("d_theta must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(Error::InvalidParameter("M must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for run in &self.runs {
            run.validate(self.d_theta, self.d_y, self.m).map_err(Error::InvalidParameter)?;
            if !seen.insert(run.run_id) {
                return Err(Error::InvalidParameter(format!("duplicate run_id {}", run.run_id)));
            }
        }
        Ok(())
    }
}

/// A multivariate normal with a verified Cholesky factor.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    l: DMatrix<f64>,
    log_det: f64,
}

impl GaussianPosterior {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: covariance.nrows(),
            });
        }
        if mean.iter().chain(covariance.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("non-finite mean or covariance".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-10 {
                    return Err(Error::Linalg(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        let chol = Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::Linalg("covariance is not positive definite".into()))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let l = chol.l();
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance,
            chol,
            l,
            log_det,
        })
    }

    /// `N(mean, scale · I)`.
    pub fn isotropic(mean: Vec<f64>, scale: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * scale)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Lower Cholesky factor `L` with `L Lᵀ = Σ`.
    pub fn cholesky_l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn inverse_covariance(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let diff = DVector::from_iterator(self.dim(), x.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        let z = self
            .l
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has a positive diagonal");
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + z.norm_squared())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&self.mean + &self.l * z).iter().copied().collect()
    }
}

/// Shift of the posterior mean and inflation of its covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub bias: f64,
    pub variance_scale: f64,
}

impl Corruption {
    pub const IDENTITY: Corruption = Corruption {
        bias: 0.0,
        variance_scale: 1.0,
    };

    pub fn new(bias: f64, variance_scale: f64) -> Result<Self> {
        let c = Self { bias, variance_scale };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance_scale > 0.0 && self.variance_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "variance_scale must be positive and finite, got {}",
                self.variance_scale
            )));
        }
        if !self.bias.is_finite() {
            return Err(Error::InvalidParameter("bias must be finite".into()));
        }
        Ok(())
    }
}

/// Conjugate posterior of `θ ~ N(0, I)`, `y | θ ~ N(θ, σ² I)`.
pub fn exact_gaussian_posterior(y: &[f64], sigma2: f64) -> Result<GaussianPosterior> {
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma2 must be positive and finite, got {sigma2}")));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("y must be finite".into()));
    }
    let shrink = 1.0 / (1.0 + sigma2);
    GaussianPosterior::isotropic(y.iter().map(|v| v * shrink).collect(), sigma2 * shrink)
}

/// `mean + b·1`, `s·covariance`.
pub fn corrupt(p: &GaussianPosterior, c: &Corruption) -> Result<GaussianPosterior> {
    c.validate()?;
    let mean = p.mean().iter().map(|m| m + c.bias).collect();
    GaussianPosterior::new(mean, p.covariance() * c.variance_scale)
}

/// The approximate inference routine being diagnosed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Inference {
    /// The exact posterior with a [`Corruption`] applied.
    Corrupted(Corruption),
    /// Ignore the data and return the prior `N(0, I)`.
    Prior,
}

impl Default for Inference {
    fn default() -> Self {
        Inference::Corrupted(Corruption::IDENTITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTableConfig {
    pub d: usize,
    pub s: usize,
    pub m: usize,
    pub sigma2: f64,
    pub inference: Inference,
    /// AR(1) coefficient of the approximate draws; 0 gives IID draws.
    pub chain_rho: f64,
    pub seed: u64,
    pub attach_densities: bool,
}

impl GaussianTableConfig {
    pub fn new(d: usize, s: usize, m: usize, seed: u64) -> Self {
        Self {
            d,
            s,
            m,
            sigma2: 1.0,
            inference: Inference::default(),
            chain_rho: 0.0,
            seed,
            attach_densities: true,
        }
    }

    pub fn with_inference(mut self, inference: Inference) -> Self {
        self.inference = inference;
        self
    }

    pub fn with_corruption(self, c: Corruption) -> Self {
        self.with_inference(Inference::Corrupted(c))
    }

    pub fn with_sigma2(mut self, sigma2: f64) -> Self {
        self.sigma2 = sigma2;
        self
    }

    pub fn with_chain_rho(mut self, rho: f64) -> Self {
        self.chain_rho = rho;
        self
    }

    pub fn with_densities(mut self, attach: bool) -> Self {
        self.attach_densities = attach;
        self
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if (0.0..1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("rho must lie in [0, 1), got {rho}")))
    }
}

/// Approximate posterior used for the run with data `y`.
pub fn approximate_posterior(y: &[f64], sigma2: f64, inference: &Inference) -> Result<GaussianPosterior> {
    match inference {
        Inference::Corrupted(c) => corrupt(&exact_gaussian_posterior(y, sigma2)?, c),
        Inference::Prior => GaussianPosterior::isotropic(vec![0.0; y.len()], 1.0),
    }
}

/// Generate one Gaussian simulation table.
///
/// Run `i` uses substream `i` of `cfg.seed`, so the table does not depend on
/// how runs are scheduled.
pub fn generate_gaussian_table(cfg: &GaussianTableConfig) -> Result<SimulationTable> {
    if cfg.d == 0 || cfg.s == 0 || cfg.m == 0 {
        return Err(Error::InvalidParameter("d, S and M must all be at least 1".into()));
    }
    if !(cfg.sigma2 > 0.0 && cfg.sigma2.is_finite()) {
        return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {}", cfg.sigma2)));
    }
    if let Inference::Corrupted(c) = &cfg.inference {
        c.validate()?;
    }
    check_rho(cfg.chain_rho)?;

    let runs = (0..cfg.s as u64)
        .into_par_iter()
        .map(|run_id| generate_run(cfg, run_id))
        .collect::<Result<Vec<_>>>()?;

    let provenance = format!(
        "gaussian d={} sigma2={} inference={} rho={} seed={}",
        cfg.d,
        cfg.sigma2,
        match cfg.inference {
            Inference::Corrupted(c) => format!("bias={},var_scale={}", c.bias, c.variance_scale),
            Inference::Prior => "prior".to_string(),
        },
        cfg.chain_rho,
        cfg.seed
    );
    SimulationTable::new(runs, cfg.d, cfg.d, cfg.m, provenance)
}

fn generate_run(cfg: &GaussianTableConfig, run_id: u64) -> Result<SimulationRun> {
    let mut rng = stream_rng(cfg.seed, run_id);
    let sd = cfg.sigma2.sqrt();
    let theta: Vec<f64> = (0..cfg.d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let y: Vec<f64> = theta.iter().map(|t| t + sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let approx = approximate_posterior(&y, cfg.sigma2, &cfg.inference)?;
    let draws = ar1_draws_with(&approx, cfg.m, cfg.chain_rho, &mut rng);

    let (log_p, log_q) = if cfg.attach_densities {
        let exact = exact_gaussian_posterior(&y, cfg.sigma2)?;
        let values = std::iter::once(&theta).chain(draws.iter());
        let (lp, lq): (Vec<f64>, Vec<f64>) = values.map(|v| (exact.log_density(v), approx.log_density(v))).unzip();
        (Some(lp), Some(lq))
    } else {
        (None, None)
    };
    Ok(SimulationRun {
        run_id,
        theta,
        y,
        draws,
        log_p,
        log_q,
    })
}

/// `M` draws of a Gaussian AR(1) chain whose every marginal is exactly `p`.
pub fn generate_ar1_draws(p: &GaussianPosterior, m: usize, rho: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    check_rho(rho)?;
    let mut rng = stream_rng(seed, 0);
    Ok(ar1_draws_with(p, m, rho, &mut rng))
}

fn ar1_draws_with<R: Rng + ?Sized>(p: &GaussianPosterior, m: usize, rho: f64, rng: &mut R) -> Vec<Vec<f64>> {
    let mut draws = Vec::with_capacity(m);
    if m == 0 {
        return draws;
    }
    draws.push(p.sample(rng));
    let innovation = (1.0 - rho * rho).sqrt();
    let mean = p.mean();
    for _ in 1..m {
        let prev = draws.last().expect("chain is non-empty");
        let fresh = p.sample(rng);
        // fresh - μ ~ N(0, Σ); scale it to the innovation variance (1 - ρ²)Σ.
        let next = (0..p.dim())
            .map(|j| mean[j] + rho * (prev[j] - mean[j]) + innovation * (fresh[j] - mean[j]))
            .collect();
        draws.push(next);
    }
    draws
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    d_theta: usize,
    d_y: usize,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "S")]
    s: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
}

pub fn write_table_to<W: Write>(table: &SimulationTable, mut w: W) -> Result<()> {
    let header = Header {
        d_theta: table.d_theta,
        d_y: table.d_y,
        m: table.m,
        s: table.s(),
        provenance: (!table.provenance.is_empty()).then(|| table.provenance.clone()),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for run in &table.runs {
        serde_json::to_writer(&mut w, run)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_table(table: &SimulationTable, path: impl AsRef<Path>) -> Result<()> {
    write_table_to(table, BufWriter::new(File::create(path)?))
}

pub fn read_table_from<R: Read>(r: R) -> Result<SimulationTable> {
    let mut lines = BufReader::new(r).lines().enumerate().filter_map(|(i, l)| match l {
        Ok(l) if l.trim().is_empty() => None,
        other => Some((i + 1, other)),
    });
    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header line".into(),
    })?;
    let header: Header = serde_json::from_str(&header?).map_err(|e| Error::Parse {
        line: hline,
        message: format!("header: {e}"),
    })?;
    if header.d_theta == 0 || header.m == 0 {
        return Err(Error::Parse {
            line: hline,
            message: "header requires d_theta >= 1 and M >= 1".into(),
        });
    }
    let mut runs = Vec::with_capacity(header.s);
    let mut seen = HashSet::new();
    for (line, text) in lines {
        let run: SimulationRun = serde_json::from_str(&text?).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        run.validate(header.d_theta, header.d_y, header.m)
            .map_err(|message| Error::Parse { line, message })?;
        if !seen.insert(run.run_id) {
            return Err(Error::Parse {
                line,
                message: format!("duplicate run_id {}", run.run_id),
            });
        }
        runs.push(run);
    }
    if runs.len() != header.s {
        return Err(Error::Parse {
            line: hline,
            message: format!("header declares S = {} but {} runs follow", header.s, runs.len()),
        });
    }
    Ok(SimulationTable {
        runs,
        d_theta: header.d_theta,
        d_y: header.d_y,
        m: header.m,
        provenance: header.provenance.unwrap_or_default(),
    })
}

pub fn read_table(path: impl AsRef<Path>) -> Result<SimulationTable> {
    read_table_from(File::open(path)?)
}
