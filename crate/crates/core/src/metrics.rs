//! Disentanglement diagnostics on latent dumps.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::gaussian::{correlation_from_covariance, empirical_covariance, gaussian_tc};
use crate::{Error, Result};

/// Default number of equal-width bins for mutual information.
pub const DEFAULT_BINS: usize = 20;

/// Which latent representation to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Use {
    Means,
    Samples,
}

impl std::str::FromStr for Use {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "means" => Ok(Use::Means),
            "samples" => Ok(Use::Samples),
            other => Err(Error::Parse(format!(
                "expected `means` or `samples`, got `{other}`"
            ))),
        }
    }
}

/// Encoded dataset: factors, encoder means/stddevs and one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDump {
    factors: DMatrix<f64>,
    means: DMatrix<f64>,
    stddevs: DMatrix<f64>,
    samples: DMatrix<f64>,
}

impl LatentDump {
    pub fn new(
        factors: DMatrix<f64>,
        means: DMatrix<f64>,
        stddevs: DMatrix<f64>,
        samples: DMatrix<f64>,
    ) -> Result<Self> {
        let n = means.nrows();
        if factors.nrows() != n
            || stddevs.shape() != means.shape()
            || samples.shape() != means.shape()
        {
            return Err(Error::Shape(format!(
                "factors {:?}, means {:?}, stddevs {:?}, samples {:?}",
                factors.shape(),
                means.shape(),
                stddevs.shape(),
                samples.shape()
            )));
        }
        if stddevs.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidConfig("dump stddevs must be positive".into()));
        }
        if factors
            .iter()
            .chain(means.iter())
            .chain(stddevs.iter())
            .chain(samples.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("latent dump".into()));
        }
        Ok(Self {
            factors,
            means,
            stddevs,
            samples,
        })
    }

    /// Dump whose samples are the means (unit stddevs recorded).
    pub fn from_latents(factors: DMatrix<f64>, latents: DMatrix<f64>) -> Result<Self> {
        let sd = DMatrix::from_element(latents.nrows(), latents.ncols(), 1.0);
        Self::new(factors, latents.clone(), sd, latents)
    }

    pub fn factors(&self) -> &DMatrix<f64> {
        &self.factors
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn stddevs(&self) -> &DMatrix<f64> {
        &self.stddevs
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn latents(&self, which: Use) -> &DMatrix<f64> {
        match which {
            Use::Means => &self.means,
            Use::Samples => &self.samples,
        }
    }

    pub fn len(&self) -> usize {
        self.means.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_factors(&self) -> usize {
        self.factors.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn header(num_factors: usize, latent_dim: usize) -> Vec<String> {
        let mut h: Vec<String> = (0..num_factors).map(|k| format!("factor_{k}")).collect();
        for prefix in ["mu", "sigma", "z"] {
            h.extend((0..latent_dim).map(|j| format!("{prefix}_{j}")));
        }
        h
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let (k, d) = (self.num_factors(), self.latent_dim());
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Parse(e.to_string());
        w.write_record(Self::header(k, d)).map_err(io)?;
        for r in 0..self.len() {
            let row = self
                .factors
                .row(r)
                .iter()
                .chain(self.means.row(r).iter())
                .chain(self.stddevs.row(r).iter())
                .chain(self.samples.row(r).iter())
                .map(|v| v.to_string())
                .collect::<Vec<_>>();
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse(e.to_string()))?
            .clone();
        let count = |prefix: &str| headers.iter().filter(|h| h.starts_with(prefix)).count();
        let (k, d) = (count("factor_"), count("mu_"));
        if headers.len() != k + 3 * d
            || headers
                .iter()
                .ne(Self::header(k, d).iter().map(String::as_str))
        {
            return Err(Error::Parse(format!(
                "unexpected latent dump header: {headers:?}"
            )));
        }
        let mut values = Vec::new();
        let mut rows = 0;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            for field in rec.iter() {
                values.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("row {}: `{field}`: {e}", rows + 1)))?,
                );
            }
            rows += 1;
        }
        let all = DMatrix::from_row_slice(rows, k + 3 * d, &values);
        Self::new(
            all.columns(0, k).into_owned(),
            all.columns(k, d).into_owned(),
            all.columns(k + d, d).into_owned(),
            all.columns(k + 2 * d, d).into_owned(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        self.write_csv(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::read_csv(f)
    }
}

fn column_variance(m: &DMatrix<f64>, c: usize) -> f64 {
    let col = m.column(c);
    let mean = col.mean();
    col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m.nrows() as f64
}

/// Gaussian TC of the correlation matrices of the means and of the samples.
///
/// Columns with zero variance in either representation are dropped from both
/// (correlation is undefined there) with a warning.
pub fn tc_mean_and_sample(dump: &LatentDump) -> Result<(f64, f64)> {
    let n = dump.len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let keep: Vec<usize> = (0..dump.latent_dim())
        .filter(|&c| {
            let ok =
                column_variance(&dump.means, c) > 0.0 && column_variance(&dump.samples, c) > 0.0;
            if !ok {
                log::warn!("dropping zero-variance latent column {c} from TC");
            }
            ok
        })
        .collect();
    if keep.len() < 2 {
        return Err(Error::DegenerateDump(format!(
            "{} usable latent columns, need at least 2",
            keep.len()
        )));
    }
    let tc = |m: &DMatrix<f64>| -> Result<f64> {
        let sub = m.select_columns(keep.iter());
        gaussian_tc(&correlation_from_covariance(&empirical_covariance(&sub)?)?)
    };
    Ok((tc(&dump.means)?, tc(&dump.samples)?))
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn column(m: &DMatrix<f64>, c: usize) -> Vec<f64> {
    m.column(c).iter().copied().collect()
}

/// Coefficient of determination of a simple linear fit, factor × latent.
pub fn r2_matrix(dump: &LatentDump, which: Use) -> Result<DMatrix<f64>> {
    let n = dump.len();
    if n < 3 {
        return Err(Error::InsufficientData { needed: 3, got: n });
    }
    let lat = dump.latents(which);
    let mut out = DMatrix::zeros(dump.num_factors(), dump.latent_dim());
    for k in 0..dump.num_factors() {
        let f = column(&dump.factors, k);
        if column_variance(&dump.factors, k) == 0.0 {
            return Err(Error::InvalidFactor(k));
        }
        for j in 0..dump.latent_dim() {
            out[(k, j)] = pearson(&f, &column(lat, j)).map_or(0.0, |r| (r * r).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Sap,
    Mig,
}

impl ScoreKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Sap => "sap",
            ScoreKind::Mig => "mig",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGap {
    pub top1: f64,
    pub top1_latent: usize,
    pub top2: f64,
    pub top2_latent: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub kind: ScoreKind,
    pub scores: DMatrix<f64>,
    pub factors: Vec<FactorGap>,
    pub aggregate: f64,
}

fn top2_report(kind: ScoreKind, scores: &DMatrix<f64>) -> Result<MetricReport> {
    if scores.ncols() < 2 {
        return Err(Error::InvalidConfig(format!(
            "{} needs at least 2 latents, got {}",
            kind.as_str(),
            scores.ncols()
        )));
    }
    let factors: Vec<FactorGap> = (0..scores.nrows())
        .map(|k| {
            let mut idx: Vec<usize> = (0..scores.ncols()).collect();
            // Stable sort keeps the lower latent index first on ties.
            idx.sort_by(|&a, &b| scores[(k, b)].total_cmp(&scores[(k, a)]));
            let (a, b) = (idx[0], idx[1]);
            FactorGap {
                top1: scores[(k, a)],
                top1_latent: a,
                top2: scores[(k, b)],
                top2_latent: b,
                gap: scores[(k, a)] - scores[(k, b)],
            }
        })
        .collect();
    let aggregate = if factors.is_empty() {
        0.0
    } else {
        factors.iter().map(|f| f.gap).sum::<f64>() / factors.len() as f64
    };
    Ok(MetricReport {
        kind,
        scores: scores.clone(),
        factors,
        aggregate,
    })
}

/// Per-factor gap between the two best R² scores, averaged over factors.
pub fn sap_score(r2: &DMatrix<f64>) -> Result<MetricReport> {
    top2_report(ScoreKind::Sap, r2)
}

/// Per-factor gap between the two best normalised MI scores.
pub fn mig_score(mi: &DMatrix<f64>) -> Result<MetricReport> {
    top2_report(ScoreKind::Mig, mi)
}

/// Codes for the distinct values of a discrete column.
fn discrete_codes(x: &[f64]) -> (Vec<usize>, usize) {
    let mut levels: Vec<f64> = x.to_vec();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let codes = x
        .iter()
        .map(|v| {
            levels
                .binary_search_by(|p| p.total_cmp(v))
                .expect("value is a level")
        })
        .collect();
    (codes, levels.len())
}

fn equal_width_bins(x: &[f64], bins: usize) -> Option<Vec<usize>> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    let scale = bins as f64 / (hi - lo);
    Some(
        x.iter()
            .map(|v| (((v - lo) * scale) as usize).min(bins - 1))
            .collect(),
    )
}

fn entropy(counts: &[usize], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Plug-in mutual information between each factor and each binned latent,
/// normalised by the factor's entropy.
pub fn mi_matrix(dump: &LatentDump, which: Use, bins: usize) -> Result<DMatrix<f64>> {
    if bins < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 bins, got {bins}"
        )));
    }
    let n = dump.len();
    if n == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let nf = n as f64;
    let lat = dump.latents(which);
    let binned: Vec<Option<Vec<usize>>> = (0..dump.latent_dim())
        .map(|j| equal_width_bins(&column(lat, j), bins))
        .collect();
    let mut out = DMatrix::zeros(dump.num_factors(), dump.latent_dim());
    for k in 0..dump.num_factors() {
        let (codes, levels) = discrete_codes(&column(&dump.factors, k));
        let mut fcount = vec![0usize; levels];
        for &c in &codes {
            fcount[c] += 1;
        }
        let h = entropy(&fcount, nf);
        if h == 0.0 {
            return Err(Error::InvalidFactor(k));
        }
        for (j, b) in binned.iter().enumerate() {
            let Some(b) = b else { continue };
            let mut joint = vec![0usize; levels * bins];
            let mut lcount = vec![0usize; bins];
            for (c, &l) in codes.iter().zip(b) {
                joint[c * bins + l] += 1;
                lcount[l] += 1;
            }
            let mi = entropy(&fcount, nf) + entropy(&lcount, nf) - entropy(&joint, nf);
            out[(k, j)] = (mi / h).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Scatter points for one latent pair with dependence statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPlot {
    pub i: usize,
    pub j: usize,
    pub points: Vec<(f64, f64)>,
    /// Pearson correlation; 0 when either column is constant.
    pub correlation: f64,
    pub distance_correlation: f64,
}

/// Distance correlation (V-statistic), O(n) memory.
pub fn distance_correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n == 0 || n != y.len() {
        return 0.0;
    }
    let row_sums = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|a| v.iter().map(|b| (a - b).abs()).sum())
            .collect()
    };
    let (ra, rb) = (row_sums(x), row_sums(y));
    let nf = n as f64;
    let (ta, tb): (f64, f64) = (ra.iter().sum(), rb.iter().sum());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let a = (x[i] - x[j]).abs();
            let b = (y[i] - y[j]).abs();
            sab += a * b;
            saa += a * a;
            sbb += b * b;
        }
    }
    let centered = |s: f64, r1: &[f64], r2: &[f64], t1: f64, t2: f64| {
        let cross: f64 = r1.iter().zip(r2).map(|(p, q)| p * q).sum();
        s / (nf * nf) - 2.0 * cross / nf.powi(3) + t1 * t2 / nf.powi(4)
    };
    let dcov = centered(sab, &ra, &rb, ta, tb);
    let dvx = centered(saa, &ra, &ra, ta, ta);
    let dvy = centered(sbb, &rb, &rb, tb, tb);
    if dvx <= 0.0 || dvy <= 0.0 {
        return 0.0;
    }
    (dcov.max(0.0) / (dvx * dvy).sqrt()).sqrt()
}

pub fn pairplot_data(
    dump: &LatentDump,
    which: Use,
    pairs: &[(usize, usize)],
) -> Result<Vec<PairPlot>> {
    let lat = dump.latents(which);
    let d = dump.latent_dim();
    pairs
        .iter()
        .map(|&(i, j)| {
            if i >= d || j >= d {
                return Err(Error::InvalidConfig(format!(
                    "pair ({i}, {j}) out of range for {d} latents"
                )));
            }
            let (x, y) = (column(lat, i), column(lat, j));
            Ok(PairPlot {
                i,
                j,
                correlation: pearson(&x, &y).unwrap_or(0.0),
                distance_correlation: distance_correlation(&x, &y),
                points: x.into_iter().zip(y).collect(),
            })
        })
        .collect()
}
