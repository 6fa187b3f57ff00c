use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::DMatrix;
use tcorr::estimators::{asymptotic_mss_prediction, tc_minibatch, LatentBatch, Method};
use tcorr::gaussian::{
    empirical_covariance, equicorrelation, equicorrelation_for_det, gaussian_tc,
};
use tcorr::metrics::{
    mi_matrix, mig_score, pairplot_data, r2_matrix, sap_score, tc_mean_and_sample, LatentDump, Use,
};
use tcorr::theory::{disparity_construct, gaussian_tc_cap_diag};
use tcorr::vae::{make_synthetic_dataset, train, ObjectiveConfig, ObjectiveKind};

use crate::{CliError, Result};

/// A CSV-serializable row with a fixed header.
pub trait CsvRow {
    const HEADER: &'static [&'static str];
    fn record(&self) -> Vec<String>;
}

pub fn write_csv<W: Write, R: CsvRow>(out: W, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(R::HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_file<R: CsvRow>(path: &Path, rows: &[R]) -> Result<()> {
    write_csv(
        fs::File::create(path).map_err(|e| CliError::io(path, e))?,
        rows,
    )
}

/// Median and interquartile range with linear interpolation between order statistics.
pub fn median_iqr(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        if v.is_empty() {
            return f64::NAN;
        }
        let h = p * (v.len() - 1) as f64;
        let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    (q(0.5), q(0.75) - q(0.25))
}

fn num(v: f64) -> String {
    v.to_string()
}

#[derive(Debug, Clone)]
pub struct BenchParams {
    pub dims: Vec<usize>,
    pub dets: Vec<f64>,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub sigma_prime: f64,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub dim: usize,
    pub det: f64,
    pub truth: f64,
    pub method: Method,
    pub median_estimate: f64,
    pub iqr: f64,
}

impl CsvRow for BenchRow {
    const HEADER: &'static [&'static str] =
        &["D", "det", "truth", "method", "median_estimate", "iqr"];
    fn record(&self) -> Vec<String> {
        vec![
            self.dim.to_string(),
            num(self.det),
            num(self.truth),
            self.method.to_string(),
            num(self.median_estimate),
            num(self.iqr),
        ]
    }
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    Ok(())
}

fn check_minibatch(methods: &[Method]) -> Result<()> {
    if let Some(m) = methods.iter().find(|m| !Method::MINIBATCH.contains(m)) {
        return Err(CliError::Usage(format!(
            "{m} is not a minibatch estimator; choose from naive-mc, mws, mss0, mss1"
        )));
    }
    Ok(())
}

/// Median-of-seeds minibatch estimates against the closed form on an
/// equicorrelated mean covariance with the requested determinant.
pub fn estimator_bench(p: &BenchParams) -> Result<Vec<BenchRow>> {
    check_seeds(&p.seeds)?;
    check_minibatch(&p.methods)?;
    if let Some(&d) = p.dims.iter().find(|&&d| d < 2) {
        return Err(CliError::Usage(format!(
            "dimensions must be at least 2, got {d}"
        )));
    }
    let mut rows = Vec::new();
    for &dim in &p.dims {
        for &det in &p.dets {
            let rho = equicorrelation_for_det(dim, det).map_err(|e| {
                CliError::Usage(format!("infeasible grid point D={dim}, det={det}: {e}"))
            })?;
            let cov = equicorrelation(dim, rho);
            let inflated = &cov + DMatrix::identity(dim, dim) * p.sigma_prime.powi(2);
            let truth = gaussian_tc(&inflated)?;
            let estimates = seeded_estimates(
                &cov,
                p.sigma_prime,
                p.batch_size,
                p.dataset_size,
                &p.seeds,
                &p.methods,
            )?;
            for (method, vals) in p.methods.iter().zip(estimates) {
                let (median_estimate, iqr) = median_iqr(&vals);
                rows.push(BenchRow {
                    dim,
                    det,
                    truth,
                    method: *method,
                    median_estimate,
                    iqr,
                });
            }
            info!("D={dim} det={det}: truth {truth:.4}");
        }
    }
    Ok(rows)
}

/// One batch per seed, shared by every method; returns values per method.
fn seeded_estimates(
    cov: &DMatrix<f64>,
    sigma_prime: f64,
    batch_size: usize,
    dataset_size: usize,
    seeds: &[u64],
    methods: &[Method],
) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::with_capacity(seeds.len()); methods.len()];
    for &seed in seeds {
        let batch = LatentBatch::gaussian(
            cov,
            sigma_prime,
            batch_size,
            dataset_size,
            &mut tcorr::rng_from_seed(seed),
        )?;
        for (vals, &m) in out.iter_mut().zip(methods) {
            vals.push(tc_minibatch(&batch, m)?.value);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DisparityParams {
    pub targets: Vec<f64>,
    pub sigma_prime: [f64; 2],
    pub samples: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisparityRow {
    pub target: f64,
    pub seed: u64,
    pub tc_mean: f64,
    pub tc_sample: f64,
    pub empirical_tc_mean: f64,
    pub empirical_tc_sample: f64,
    pub cap: f64,
}

impl CsvRow for DisparityRow {
    const HEADER: &'static [&'static str] = &[
        "target",
        "seed",
        "tc_mean",
        "tc_sample",
        "empirical_tc_mean",
        "empirical_tc_sample",
        "cap",
    ];
    fn record(&self) -> Vec<String> {
        vec![
            num(self.target),
            self.seed.to_string(),
            num(self.tc_mean),
            num(self.tc_sample),
            num(self.empirical_tc_mean),
            num(self.empirical_tc_sample),
            num(self.cap),
        ]
    }
}

/// Analytic and sampled (TC_mean, TC_sample) for each target, with the cap.
pub fn disparity_demo(p: &DisparityParams) -> Result<Vec<DisparityRow>> {
    check_seeds(&p.seeds)?;
    if p.samples < 2 {
        return Err(CliError::Usage("need at least 2 samples".into()));
    }
    let cap = gaussian_tc_cap_diag(&p.sigma_prime, &[1.0, 1.0])?;
    let mut rows = Vec::new();
    for &target in &p.targets {
        let inst = disparity_construct(target, p.sigma_prime)?;
        for &seed in &p.seeds {
            let (means, samples) = inst.sample(p.samples, &mut tcorr::rng_from_seed(seed))?;
            rows.push(DisparityRow {
                target,
                seed,
                tc_mean: inst.tc_mean,
                tc_sample: inst.tc_sample_gaussian,
                empirical_tc_mean: gaussian_tc(&empirical_covariance(means.matrix())?)?,
                empirical_tc_sample: gaussian_tc(&empirical_covariance(samples.matrix())?)?,
                cap,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct ShutdownParams {
    pub dim: usize,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub sigma_prime: f64,
    /// Standard deviations of the shut-down mean dimensions.
    pub sigma0: Vec<f64>,
    pub max_shutdown: usize,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShutdownRow {
    pub dim: usize,
    pub batch_size: usize,
    pub sigma0: f64,
    pub shutdown_dims: usize,
    pub method: Method,
    pub median_estimate: f64,
    pub iqr: f64,
    pub prediction: f64,
}

impl CsvRow for ShutdownRow {
    const HEADER: &'static [&'static str] = &[
        "D",
        "M",
        "sigma0",
        "shutdown_dims",
        "method",
        "median_estimate",
        "iqr",
        "prediction",
    ];
    fn record(&self) -> Vec<String> {
        vec![
            self.dim.to_string(),
            self.batch_size.to_string(),
            num(self.sigma0),
            self.shutdown_dims.to_string(),
            self.method.to_string(),
            num(self.median_estimate),
            num(self.iqr),
            num(self.prediction),
        ]
    }
}

/// Estimates at zero TC as trailing mean dimensions collapse to variance σ₀².
pub fn shutdown_demo(p: &ShutdownParams) -> Result<Vec<ShutdownRow>> {
    check_seeds(&p.seeds)?;
    check_minibatch(&p.methods)?;
    if p.dim < 2 || p.max_shutdown >= p.dim {
        return Err(CliError::Usage(format!(
            "need D ≥ 2 and fewer than D shut-down dimensions (D={}, max={})",
            p.dim, p.max_shutdown
        )));
    }
    if p.sigma0.iter().any(|s| !(*s > 0.0)) {
        return Err(CliError::Usage("sigma0 values must be positive".into()));
    }
    let mut rows = Vec::new();
    for &sigma0 in &p.sigma0 {
        for k in 0..=p.max_shutdown {
            let mut cov = DMatrix::identity(p.dim, p.dim);
            for j in p.dim - k..p.dim {
                cov[(j, j)] = sigma0 * sigma0;
            }
            let estimates = seeded_estimates(
                &cov,
                p.sigma_prime,
                p.batch_size,
                p.dataset_size,
                &p.seeds,
                &p.methods,
            )?;
            for (method, vals) in p.methods.iter().zip(estimates) {
                let (median_estimate, iqr) = median_iqr(&vals);
                rows.push(ShutdownRow {
                    dim: p.dim,
                    batch_size: p.batch_size,
                    sigma0,
                    shutdown_dims: k,
                    method: *method,
                    median_estimate,
                    iqr,
                    prediction: asymptotic_mss_prediction(p.dim, p.batch_size, k),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct TrainParams {
    pub config: ObjectiveConfig,
    pub factors: usize,
    pub levels: usize,
    pub obs_dim: usize,
    pub dataset_seed: u64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub objective: ObjectiveKind,
    pub beta: f64,
    pub seed: u64,
    pub epochs: usize,
    pub tc_mean: f64,
    pub tc_sample: f64,
}

impl TrainSummary {
    pub fn gap(&self) -> f64 {
        (self.tc_mean - self.tc_sample).abs()
    }
}

impl CsvRow for TrainSummary {
    const HEADER: &'static [&'static str] = &[
        "objective",
        "beta",
        "seed",
        "epochs",
        "tc_mean",
        "tc_sample",
        "gap",
    ];
    fn record(&self) -> Vec<String> {
        vec![
            self.objective.to_string(),
            num(self.beta),
            self.seed.to_string(),
            self.epochs.to_string(),
            num(self.tc_mean),
            num(self.tc_sample),
            num(self.gap()),
        ]
    }
}

pub fn run_stem(config: &ObjectiveConfig, seed: u64) -> String {
    format!("{}-beta{}-seed{seed}", config.kind, config.beta)
}

/// Train one model per seed; write `<stem>-log.csv`, `<stem>-dump.csv` and
/// `summary.csv` under `out`.
pub fn train_runs(p: &TrainParams) -> Result<Vec<TrainSummary>> {
    check_seeds(&p.seeds)?;
    let data = make_synthetic_dataset(p.factors, p.levels, p.obs_dim, p.dataset_seed)?;
    fs::create_dir_all(&p.out).map_err(|e| CliError::io(&p.out, e))?;
    let mut summaries = Vec::new();
    for &seed in &p.seeds {
        let config = ObjectiveConfig {
            seed,
            ..p.config.clone()
        };
        let stem = run_stem(&config, seed);
        info!("training {stem}");
        let (model, log) = train(&data, &config)?;
        let log_path = p.out.join(format!("{stem}-log.csv"));
        log.write_csv(fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?)?;
        // Offset keeps dump noise independent of the training stream.
        let dump =
            model.latent_dump(&data, &mut tcorr::rng_from_seed(seed.wrapping_add(1 << 32)))?;
        dump.save(&p.out.join(format!("{stem}-dump.csv")))?;
        let (tc_mean, tc_sample) = tc_mean_and_sample(&dump)?;
        summaries.push(TrainSummary {
            objective: config.kind,
            beta: config.beta,
            seed,
            epochs: log.len(),
            tc_mean,
            tc_sample,
        });
    }
    write_csv_file(&p.out.join("summary.csv"), &summaries)?;
    Ok(summaries)
}

#[derive(Debug, Clone)]
pub struct MetricsParams {
    pub dump: PathBuf,
    pub bins: usize,
    pub which: Use,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub quantity: &'static str,
    pub value: f64,
}

impl CsvRow for SummaryRow {
    const HEADER: &'static [&'static str] = &["quantity", "value"];
    fn record(&self) -> Vec<String> {
        vec![self.quantity.into(), num(self.value)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    pub metric: &'static str,
    pub factor: usize,
    pub top1_latent: usize,
    pub top1: f64,
    pub top2_latent: usize,
    pub top2: f64,
    pub gap: f64,
}

impl CsvRow for GapRow {
    const HEADER: &'static [&'static str] = &[
        "metric",
        "factor",
        "top1_latent",
        "top1",
        "top2_latent",
        "top2",
        "gap",
    ];
    fn record(&self) -> Vec<String> {
        vec![
            self.metric.into(),
            self.factor.to_string(),
            self.top1_latent.to_string(),
            num(self.top1),
            self.top2_latent.to_string(),
            num(self.top2),
            num(self.gap),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRow {
    pub i: usize,
    pub j: usize,
    pub correlation: f64,
    pub distance_correlation: f64,
}

impl CsvRow for PairRow {
    const HEADER: &'static [&'static str] = &["i", "j", "correlation", "distance_correlation"];
    fn record(&self) -> Vec<String> {
        vec![
            self.i.to_string(),
            self.j.to_string(),
            num(self.correlation),
            num(self.distance_correlation),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointRow {
    pub i: usize,
    pub j: usize,
    pub x: f64,
    pub y: f64,
}

impl CsvRow for PointRow {
    const HEADER: &'static [&'static str] = &["i", "j", "x", "y"];
    fn record(&self) -> Vec<String> {
        vec![
            self.i.to_string(),
            self.j.to_string(),
            num(self.x),
            num(self.y),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsOutput {
    pub summary: Vec<SummaryRow>,
    pub gaps: Vec<GapRow>,
    pub pairs: Vec<PairRow>,
}

/// TC of means and samples, SAP, MIG and pairwise dependence for a dump.
/// Writes `summary.csv`, `gaps.csv`, `pairs.csv` and `pairplot.csv`.
pub fn metrics_report(p: &MetricsParams) -> Result<MetricsOutput> {
    let dump = LatentDump::load(&p.dump)?;
    let (tc_mean, tc_sample) = tc_mean_and_sample(&dump)?;
    let sap = sap_score(&r2_matrix(&dump, p.which)?)?;
    let mig = mig_score(&mi_matrix(&dump, p.which, p.bins)?)?;
    let d = dump.latent_dim();
    let pair_idx: Vec<(usize, usize)> = (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .collect();
    let plots = pairplot_data(&dump, p.which, &pair_idx)?;

    let summary = vec![
        SummaryRow {
            quantity: "tc_mean",
            value: tc_mean,
        },
        SummaryRow {
            quantity: "tc_sample",
            value: tc_sample,
        },
        SummaryRow {
            quantity: "sap",
            value: sap.aggregate,
        },
        SummaryRow {
            quantity: "mig",
            value: mig.aggregate,
        },
    ];
    let gaps = [&sap, &mig]
        .iter()
        .flat_map(|r| {
            r.factors.iter().enumerate().map(|(k, f)| GapRow {
                metric: r.kind.as_str(),
                factor: k,
                top1_latent: f.top1_latent,
                top1: f.top1,
                top2_latent: f.top2_latent,
                top2: f.top2,
                gap: f.gap,
            })
        })
        .collect();
    let pairs: Vec<PairRow> = plots
        .iter()
        .map(|pp| PairRow {
            i: pp.i,
            j: pp.j,
            correlation: pp.correlation,
            distance_correlation: pp.distance_correlation,
        })
        .collect();
    let points: Vec<PointRow> = plots
        .iter()
        .flat_map(|pp| {
            pp.points.iter().map(|&(x, y)| PointRow {
                i: pp.i,
                j: pp.j,
                x,
                y,
            })
        })
        .collect();
    if points.is_empty() {
        warn!("fewer than two latents; no pair plots written");
    }

    fs::create_dir_all(&p.out).map_err(|e| CliError::io(&p.out, e))?;
    let out = MetricsOutput {
        summary,
        gaps,
        pairs,
    };
    write_csv_file(&p.out.join("summary.csv"), &out.summary)?;
    write_csv_file(&p.out.join("gaps.csv"), &out.gaps)?;
    write_csv_file(&p.out.join("pairs.csv"), &out.pairs)?;
    write_csv_file(&p.out.join("pairplot.csv"), &points)?;
    Ok(out)
}

pub fn objective_config(kind: ObjectiveKind, beta: f64, lambda_od: f64) -> ObjectiveConfig {
    match kind {
        ObjectiveKind::DipI => ObjectiveConfig::dip_i(lambda_od),
        ObjectiveKind::DipII => ObjectiveConfig::dip_ii(lambda_od),
        kind => ObjectiveConfig::new(kind, beta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_iqr_interpolates() {
        assert_eq!(median_iqr(&[4.0, 1.0, 3.0, 2.0, 5.0]), (3.0, 2.0));
        let (m, iqr) = median_iqr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((iqr - 1.5).abs() < 1e-12);
        assert_eq!(median_iqr(&[7.0]), (7.0, 0.0));
        assert!(median_iqr(&[]).0.is_nan());
    }
}
