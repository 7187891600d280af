use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use discal::classifier::{Activation, TrainSettings};
use discal::diagnostics::{run_pipeline, write_visual_csv, PipelineConfig, ReportFile};
use discal::label_mapping::{FeatureConfig, LinearFeature, MappingKind};
use discal::oracle::sbc_rank_test;
use discal::rng::derive_indexed;
use discal::sim_model::{generate_gaussian_table, read_table, write_table, Corruption, GaussianTableConfig, Inference};

/// Classifier-based calibration diagnostics for Bayesian computation.
#[derive(Parser, Debug)]
#[command(name = "discal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a Gaussian calibration table (JSON Lines).
    Simulate(SimulateArgs),
    /// Train a classifier on a table and write a divergence and test report.
    Diagnose(DiagnoseArgs),
    /// Compare classifier and SBC rejection rates over a corruption grid.
    Benchmark(BenchmarkArgs),
    /// Render a report file as text.
    Report(ReportArgs),
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("must be positive and finite, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn unit_rho(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..1.0).contains(&v) => Ok(v),
        Ok(v) => Err(format!("must lie in [0, 1), got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

fn open_unit(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        Ok(v) => Err(format!("must lie in (0, 1), got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Parameter dimension (data has the same dimension).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    d: u64,
    /// Number of simulation runs.
    #[arg(long = "S", default_value_t = 500, value_parser = clap::value_parser!(u64).range(1..))]
    s: u64,
    /// Approximate posterior draws per run.
    #[arg(long = "M", default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    m: u64,
    /// Observation noise variance.
    #[arg(long, default_value_t = 1.0, value_parser = positive)]
    sigma2: f64,
    /// Shift added to every coordinate of the approximate posterior mean.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    bias: f64,
    /// Multiplier on the approximate posterior covariance.
    #[arg(long = "var-scale", default_value_t = 1.0, value_parser = positive)]
    var_scale: f64,
    /// AR(1) autocorrelation of the draws.
    #[arg(long, default_value_t = 0.0, value_parser = unit_rho)]
    rho: f64,
    /// Use the prior as the approximate posterior.
    #[arg(long, conflicts_with_all = ["bias", "var_scale"])]
    prior: bool,
    /// Omit log p and log q columns.
    #[arg(long)]
    no_densities: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MappingArg {
    Binary,
    BinaryNoy,
    Rank,
    Multiclass,
}

impl From<MappingArg> for MappingKind {
    fn from(m: MappingArg) -> Self {
        match m {
            MappingArg::Binary => MappingKind::BinaryFull,
            MappingArg::BinaryNoy => MappingKind::BinaryNoY,
            MappingArg::Rank => MappingKind::BinaryRank,
            MappingArg::Multiclass => MappingKind::MulticlassPermutation,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FeatureArg {
    Logp,
    Logq,
    Rank,
}

impl From<FeatureArg> for LinearFeature {
    fn from(f: FeatureArg) -> Self {
        match f {
            FeatureArg::Logp => LinearFeature::LogP,
            FeatureArg::Logq => LinearFeature::LogQ,
            FeatureArg::Rank => LinearFeature::Rank,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ActivationArg {
    Tanh,
    Softplus,
    Relu,
}

impl From<ActivationArg> for Activation {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Tanh => Activation::Tanh,
            ActivationArg::Softplus => Activation::Softplus,
            ActivationArg::Relu => Activation::Relu,
        }
    }
}

/// Classifier and training options shared by `diagnose` and `benchmark`.
#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Hidden layer widths, comma separated (empty for an affine scorer).
    #[arg(long, value_delimiter = ',', default_values_t = PipelineConfig::default().hidden_sizes)]
    hidden: Vec<usize>,
    #[arg(long, value_enum, default_value = "tanh")]
    activation: ActivationArg,
    #[arg(long, default_value_t = TrainSettings::default().epochs)]
    epochs: usize,
    #[arg(long = "lr", default_value_t = TrainSettings::default().learning_rate, value_parser = positive)]
    learning_rate: f64,
    /// Epochs without holdout improvement before stopping.
    #[arg(long, default_value_t = TrainSettings::default().patience)]
    patience: usize,
    /// Fraction of runs held out for validation.
    #[arg(long, default_value_t = PipelineConfig::default().split_fraction, value_parser = open_unit)]
    split: f64,
}

impl ModelArgs {
    fn pipeline(&self, weighted: bool, b: usize, r: usize, alpha: f64, seed: u64) -> PipelineConfig {
        PipelineConfig {
            hidden_sizes: self.hidden.clone(),
            activation: self.activation.into(),
            train: TrainSettings {
                epochs: self.epochs,
                learning_rate: self.learning_rate,
                patience: self.patience,
                ..TrainSettings::default()
            },
            weighted,
            split_fraction: self.split,
            b,
            r,
            alpha,
            seed,
            visual_coordinate: None,
        }
    }
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    /// Input table (JSON Lines).
    #[arg(long = "table")]
    table: PathBuf,
    #[arg(long, value_enum, default_value = "binary")]
    mapping: MappingArg,
    /// Balanced binary weighting.
    #[arg(long)]
    weighted: bool,
    /// Linear features, comma separated.
    #[arg(long, value_enum, value_delimiter = ',')]
    features: Vec<FeatureArg>,
    /// θ coordinates used by the mapping, comma separated.
    #[arg(long = "theta-subset", value_delimiter = ',')]
    theta_subset: Option<Vec<usize>>,
    /// Leave features unstandardized.
    #[arg(long)]
    no_standardize: bool,
    #[arg(long = "B", default_value_t = PipelineConfig::default().b as u64, value_parser = clap::value_parser!(u64).range(1..))]
    b: u64,
    #[arg(long = "R", default_value_t = PipelineConfig::default().r as u64, value_parser = clap::value_parser!(u64).range(100..))]
    r: u64,
    #[arg(long, default_value_t = PipelineConfig::default().alpha, value_parser = open_unit)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    /// Report output (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV of classifier predictions against one raw feature.
    #[arg(long)]
    visual: Option<PathBuf>,
    /// Raw feature index plotted in the visual CSV.
    #[arg(long = "visual-coordinate", default_value_t = 0)]
    visual_coordinate: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum CorruptionKind {
    /// Multiplier on the approximate posterior covariance.
    Variance,
    /// Shift of the approximate posterior mean.
    Bias,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    #[arg(long, value_enum, default_value = "variance")]
    corruption: CorruptionKind,
    /// Corruption levels, comma separated.
    #[arg(long, value_delimiter = ',', required = true, allow_hyphen_values = true)]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    d: u64,
    #[arg(long = "S", default_value_t = 1000, value_parser = clap::value_parser!(u64).range(2..))]
    s: u64,
    #[arg(long = "M", default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    m: u64,
    #[arg(long = "B", default_value_t = 199, value_parser = clap::value_parser!(u64).range(1..))]
    b: u64,
    /// Histogram bins of the SBC rank test.
    #[arg(long = "bins", default_value_t = 20)]
    bins: usize,
    #[arg(long, default_value_t = 0.05, value_parser = open_unit)]
    alpha: f64,
    /// Balanced binary weighting for the classifier.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    weighted: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report file written by `diagnose`.
    report: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Diagnose(a) => diagnose(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// Joins the error chain, skipping causes already spelled out by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

/// Sizes the global rayon pool from `DISCAL_THREADS` when set.
fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DISCAL_THREADS") {
        let n: usize = v.parse().with_context(|| format!("DISCAL_THREADS must be a positive integer, got {v:?}"))?;
        ensure!(n > 0, "DISCAL_THREADS must be a positive integer, got 0");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let inference = if a.prior {
        Inference::Prior
    } else {
        Inference::Corrupted(Corruption::new(a.bias, a.var_scale)?)
    };
    let cfg = GaussianTableConfig::new(a.d as usize, a.s as usize, a.m as usize, a.seed)
        .with_sigma2(a.sigma2)
        .with_inference(inference)
        .with_chain_rho(a.rho)
        .with_densities(!a.no_densities);
    let table = generate_gaussian_table(&cfg)?;
    write_table(&table, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let back = read_table(&a.out).with_context(|| format!("re-reading {}", a.out.display()))?;
    ensure!(back == table, "table written to {} does not read back identically", a.out.display());
    let corruption = if a.prior {
        "prior".to_string()
    } else {
        format!("bias={} var_scale={}", a.bias, a.var_scale)
    };
    println!("S={} M={} d={} sigma2={} corruption: {} rho={} seed={}", a.s, a.m, a.d, a.sigma2, corruption, a.rho, a.seed);
    println!("wrote {}", a.out.display());
    Ok(())
}

fn feature_config(features: &[FeatureArg], subset: Option<Vec<usize>>, mapping: MappingKind, standardize: bool) -> FeatureConfig {
    let linear: Vec<LinearFeature> = features.iter().map(|&f| f.into()).collect();
    FeatureConfig {
        include_y: !matches!(mapping, MappingKind::BinaryNoY | MappingKind::BinaryRank),
        theta_subset: subset,
        linear_features: Vec::new(),
        standardize,
    }
    .with_linear(&linear)
}

fn diagnose(a: DiagnoseArgs) -> Result<()> {
    let table = read_table(&a.table).with_context(|| format!("reading table {}", a.table.display()))?;
    let kind: MappingKind = a.mapping.into();
    let features = feature_config(&a.features, a.theta_subset.clone(), kind, !a.no_standardize);
    let mut cfg = a.model.pipeline(a.weighted, a.b as usize, a.r as usize, a.alpha, a.seed);
    if a.visual.is_some() {
        cfg.visual_coordinate = Some(a.visual_coordinate);
    }
    let out = run_pipeline(&table, kind, &features, &cfg)?;
    let file = ReportFile {
        report: out.report,
        test: out.test,
        mapping: kind,
        features,
        pipeline: cfg,
        table_provenance: table.provenance.clone(),
    };
    file.validate()?;
    write_json(&a.out, &file)?;
    let back: ReportFile = read_report(&a.out)?;
    ensure!(back == file, "report written to {} does not read back identically", a.out.display());

    if let (Some(path), Some(rows)) = (&a.visual, &out.visual) {
        let f = File::create(path).with_context(|| format!("writing {}", path.display()))?;
        let mut w = BufWriter::new(f);
        write_visual_csv(rows, &mut w)?;
        w.flush()?;
        let n = count_csv_rows(path, &["coordinate", "prediction", "label"])?;
        ensure!(n == rows.len(), "visual CSV {} has {n} rows, expected {}", path.display(), rows.len());
    }
    println!("{}", render(&file));
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_report(path: &Path) -> Result<ReportFile> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading report {}", path.display()))?;
    let file: ReportFile = serde_json::from_str(&text).with_context(|| format!("parsing report {}", path.display()))?;
    file.validate().with_context(|| format!("validating report {}", path.display()))?;
    Ok(file)
}

fn count_csv_rows(path: &Path, header: &[&str]) -> Result<usize> {
    let mut rdr = csv::Reader::from_path(path)?;
    let found: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    ensure!(found == header, "{} has columns {found:?}, expected {header:?}", path.display());
    let mut n = 0;
    for rec in rdr.records() {
        rec?;
        n += 1;
    }
    Ok(n)
}

#[derive(Debug, Serialize, Deserialize)]
struct BenchmarkRow {
    corruption: f64,
    method: String,
    rejection_rate: f64,
    repetitions: u64,
}

fn benchmark(a: BenchmarkArgs) -> Result<()> {
    if a.grid.is_empty() {
        bail!("corruption grid is empty");
    }
    let (d, s, m) = (a.d as usize, a.s as usize, a.m as usize);
    ensure!(a.bins >= 2 && a.bins <= m + 1, "--bins must lie in [2, M+1 = {}], got {}", m + 1, a.bins);
    let corruptions = a
        .grid
        .iter()
        .map(|&level| match a.corruption {
            CorruptionKind::Variance => Corruption::new(0.0, level),
            CorruptionKind::Bias => Corruption::new(level, 1.0),
        })
        .collect::<discal::Result<Vec<_>>>()?;
    let features = FeatureConfig::default().with_linear(&[LinearFeature::LogP, LinearFeature::LogQ]);

    let cells: Vec<(usize, u64)> = (0..a.grid.len()).flat_map(|g| (0..a.reps).map(move |r| (g, r))).collect();
    let outcomes = cells
        .par_iter()
        .map(|&(g, r)| -> Result<(bool, bool)> {
            let seed = derive_indexed(derive_indexed(a.seed, "cell", g as u64), "rep", r);
            let table = generate_gaussian_table(&GaussianTableConfig::new(d, s, m, seed).with_corruption(corruptions[g]))?;
            let cfg = a.model.pipeline(a.weighted, a.b as usize, 100, a.alpha, seed);
            let out = run_pipeline(&table, MappingKind::BinaryFull, &features, &cfg)?;
            let sbc = sbc_rank_test(&table, a.bins, a.alpha)?;
            Ok((out.test.p_value < a.alpha, sbc.reject))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(2 * a.grid.len());
    for (g, &level) in a.grid.iter().enumerate() {
        let cell = &outcomes[g * a.reps as usize..(g + 1) * a.reps as usize];
        let rate = |f: fn(&(bool, bool)) -> bool| cell.iter().filter(|c| f(c)).count() as f64 / a.reps as f64;
        rows.push(BenchmarkRow {
            corruption: level,
            method: "classifier".into(),
            rejection_rate: rate(|c| c.0),
            repetitions: a.reps,
        });
        rows.push(BenchmarkRow {
            corruption: level,
            method: "sbc".into(),
            rejection_rate: rate(|c| c.1),
            repetitions: a.reps,
        });
    }

    let mut w = csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    let back: Vec<BenchmarkRow> = csv::Reader::from_path(&a.out)?.deserialize().collect::<std::result::Result<_, _>>()?;
    ensure!(back.len() == rows.len(), "benchmark CSV has {} rows, expected {}", back.len(), rows.len());

    println!(
        "{:?} corruption, d={d} S={s} M={m} B={} reps={} alpha={} seed={}",
        a.corruption, a.b, a.reps, a.alpha, a.seed
    );
    for row in &rows {
        println!("{:>8} {:<10} {:.3}", row.corruption, row.method, row.rejection_rate);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let file = read_report(&a.report)?;
    println!("{}", render(&file));
    Ok(())
}

fn render(f: &ReportFile) -> String {
    let r = &f.report;
    let t = &f.test;
    let p = &f.pipeline;
    let level = 100.0 * (1.0 - p.alpha);
    let mut lines = vec![
        format!("divergence  {:.4}  ({level:.0}% CI {:.4} to {:.4}, SE {:.4})", r.divergence, r.ci_low, r.ci_high, r.standard_error),
        format!(
            "bound       {:.4}  (-sum w_k log w_k, w = [{}])",
            r.upper_bound,
            r.class_weights.iter().map(|w| format!("{w:.4}")).collect::<Vec<_>>().join(", ")
        ),
        format!("lpd_val     {:.4}  ({} examples in {} batches)", r.lpd_val, r.n_val_examples, r.n_val_batches),
        format!("p-value     {:.4}  (B = {}, observed LPD {:.4})", t.p_value, t.b, t.lpd_observed),
        format!(
            "mapping     {}{}",
            serde_json::to_value(f.mapping).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
            if r.weighted { ", balanced weighting" } else { "" }
        ),
    ];
    let feats = &f.features;
    lines.push(format!(
        "features    y={} subset={:?} linear={:?} standardize={}",
        feats.include_y, feats.theta_subset, feats.linear_features, feats.standardize
    ));
    lines.push(format!(
        "model       hidden={:?} activation={:?} epochs={} lr={} split={} R={} seed={}",
        p.hidden_sizes, p.activation, p.train.epochs, p.train.learning_rate, p.split_fraction, p.r, p.seed
    ));
    lines.push(format!("table       {}", f.table_provenance));
    lines.join("\n")
}
