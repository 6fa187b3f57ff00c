//! Toy Gaussian-encoder VAE with TC, variance and covariance penalties.
//!
//! Loss (minimised) is `recon + kl + β·tc + η·trace + dip`, with each of the
//! last three active only for the matching [`ObjectiveKind`]. Reconstruction
//! uses a unit-variance Gaussian likelihood without its additive constant:
//! `½ Σ (x − x̂)²` averaged over rows.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::estimators::{
    permute_dims, tc_minibatch_with_gradient, Discriminator, DiscriminatorConfig, LatentBatch,
    Method,
};
use crate::gaussian::SampleMatrix;
use crate::metrics::{tc_mean_and_sample, LatentDump};
use crate::nn::{Gradients, Mlp, Optimizer, DEFAULT_LEAKY_SLOPE};
use crate::{Error, Result};

/// Rows used to evaluate TC_mean / TC_sample after each epoch.
pub const EVAL_SAMPLES: usize = 5000;

/// Full factor grid pushed through a fixed random two-layer map.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorDataset {
    pub factor_values: DMatrix<f64>,
    pub observations: DMatrix<f64>,
    pub generator_seed: u64,
}

impl FactorDataset {
    pub fn len(&self) -> usize {
        self.observations.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_factors(&self) -> usize {
        self.factor_values.ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.ncols()
    }
}

const GENERATOR_HIDDEN: usize = 32;

/// Default grid: two factors at 16 levels observed in 16 dimensions.
pub const DEFAULT_FACTORS: usize = 2;
pub const DEFAULT_LEVELS: usize = 16;
pub const DEFAULT_OBS_DIM: usize = 16;
pub const DEFAULT_DATASET_SEED: u64 = 0;

pub fn default_synthetic_dataset() -> Result<FactorDataset> {
    make_synthetic_dataset(
        DEFAULT_FACTORS,
        DEFAULT_LEVELS,
        DEFAULT_OBS_DIM,
        DEFAULT_DATASET_SEED,
    )
}

pub fn make_synthetic_dataset(
    k: usize,
    levels: usize,
    p: usize,
    seed: u64,
) -> Result<FactorDataset> {
    if k == 0 || levels < 2 || p < k {
        return Err(Error::InvalidConfig(format!(
            "need K ≥ 1, levels ≥ 2, P ≥ K (got K={k}, levels={levels}, P={p})"
        )));
    }
    let n = levels
        .checked_pow(k as u32)
        .ok_or_else(|| Error::InvalidConfig("factor grid too large".into()))?;
    let factors = DMatrix::from_fn(n, k, |r, c| {
        let digit = (r / levels.pow((k - 1 - c) as u32)) % levels;
        digit as f64 / (levels - 1) as f64
    });

    let mut rng = crate::rng_from_seed(seed);
    let mut normal = |rows, cols, scale: f64| {
        DMatrix::from_fn(rows, cols, |_, _| {
            scale * rng.sample::<f64, _>(StandardNormal)
        })
    };
    let w1 = normal(k, GENERATOR_HIDDEN, 3.0);
    let b1 = normal(1, GENERATOR_HIDDEN, 1.0);
    let w2 = normal(GENERATOR_HIDDEN, p, 1.0 / (GENERATOR_HIDDEN as f64).sqrt());
    let mut h = &factors * w1;
    for mut row in h.row_iter_mut() {
        row += &b1;
    }
    let mut obs = h.map(f64::tanh) * w2;
    for mut col in obs.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / n as f64).sqrt();
        if sd > 0.0 {
            col /= sd;
        }
    }
    Ok(FactorDataset {
        factor_values: factors,
        observations: obs,
        generator_seed: seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    PlainElbo,
    BetaTc,
    Rtc,
    DipI,
    DipII,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::PlainElbo => "plain-elbo",
            ObjectiveKind::BetaTc => "beta-tc",
            ObjectiveKind::Rtc => "rtc",
            ObjectiveKind::DipI => "dip-i",
            ObjectiveKind::DipII => "dip-ii",
        }
    }

    fn uses_tc(self) -> bool {
        matches!(self, ObjectiveKind::BetaTc | ObjectiveKind::Rtc)
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "plain-elbo" | "elbo" => ObjectiveKind::PlainElbo,
            "beta-tc" => ObjectiveKind::BetaTc,
            "rtc" => ObjectiveKind::Rtc,
            "dip-i" => ObjectiveKind::DipI,
            "dip-ii" => ObjectiveKind::DipII,
            other => return Err(Error::Parse(format!("unknown objective `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    pub beta: f64,
    pub eta_init: f64,
    pub eta_window: (f64, f64),
    pub eta_factor: f64,
    pub tc_estimator: Method,
    pub lambda_od: f64,
    pub lambda_d: f64,
    pub latent_dim: usize,
    pub hidden_width: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub epochs: usize,
    pub seed: u64,
    pub discriminator: DiscriminatorConfig,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::PlainElbo,
            beta: 0.0,
            eta_init: 10.0,
            eta_window: (0.01, 0.04),
            eta_factor: 1.2,
            tc_estimator: Method::DensityRatio,
            lambda_od: 0.0,
            lambda_d: 0.0,
            latent_dim: 4,
            hidden_width: 64,
            batch_size: 32,
            step_size: 2e-4,
            epochs: 300,
            seed: 0,
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl ObjectiveConfig {
    /// Objective with `η = max(10, β)`.
    pub fn new(kind: ObjectiveKind, beta: f64) -> Self {
        Self {
            kind,
            beta,
            eta_init: beta.max(10.0),
            ..Self::default()
        }
    }

    /// DIP-VAE-I: `λ_d = 10 λ_od`.
    pub fn dip_i(lambda_od: f64) -> Self {
        Self {
            kind: ObjectiveKind::DipI,
            lambda_od,
            lambda_d: 10.0 * lambda_od,
            ..Self::default()
        }
    }

    /// DIP-VAE-II: `λ_d = λ_od`.
    pub fn dip_ii(lambda_od: f64) -> Self {
        Self {
            kind: ObjectiveKind::DipII,
            lambda_od,
            lambda_d: lambda_od,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.eta_window.0 < self.eta_window.1) {
            return bad("eta window must satisfy low < high");
        }
        if !(self.eta_factor > 1.0) {
            return bad("eta factor must exceed 1");
        }
        if [self.beta, self.eta_init, self.lambda_od, self.lambda_d]
            .iter()
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return bad("beta, eta and lambdas must be finite and nonnegative");
        }
        if self.latent_dim == 0 || self.hidden_width == 0 {
            return bad("latent dimension and hidden width must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2");
        }
        if !(self.step_size > 0.0) {
            return bad("step size must be positive");
        }
        if self.kind.uses_tc() && self.tc_estimator == Method::ClosedForm {
            return bad("closed-form TC is not a training estimator");
        }
        self.discriminator.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub encoder: Mlp,
    pub decoder: Mlp,
    latent_dim: usize,
}

/// Encoder outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub means: DMatrix<f64>,
    pub log_vars: DMatrix<f64>,
}

impl Encoding {
    pub fn stddevs(&self) -> DMatrix<f64> {
        self.log_vars.map(|lv| (0.5 * lv).exp())
    }

    /// `z = μ + σ ⊙ ε`.
    pub fn reparameterize(&self, eps: &DMatrix<f64>) -> DMatrix<f64> {
        &self.means + self.stddevs().component_mul(eps)
    }
}

impl VaeModel {
    pub fn new(
        obs_dim: usize,
        latent_dim: usize,
        hidden: usize,
        rng: &mut crate::Rng,
    ) -> Result<Self> {
        Ok(Self {
            encoder: Mlp::new(
                &[obs_dim, hidden, hidden, 2 * latent_dim],
                DEFAULT_LEAKY_SLOPE,
                rng,
            )?,
            decoder: Mlp::new(
                &[latent_dim, hidden, hidden, obs_dim],
                DEFAULT_LEAKY_SLOPE,
                rng,
            )?,
            latent_dim,
        })
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        let d = decoder.input_dim();
        if encoder.output_dim() != 2 * d || encoder.input_dim() != decoder.output_dim() {
            return Err(Error::Shape(format!(
                "encoder {:?} and decoder {:?} do not pair",
                encoder.widths(),
                decoder.widths()
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            latent_dim: d,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn encode(&self, x: &DMatrix<f64>) -> Result<Encoding> {
        let out = self.encoder.forward(x)?;
        Ok(split_encoding(&out, self.latent_dim))
    }

    pub fn decode(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.decoder.forward(z)
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params()
    }

    /// Encoder parameters followed by decoder parameters.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = self.encoder.params_flat();
        p.extend(self.decoder.params_flat());
        p
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        let ne = self.encoder.num_params();
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        self.encoder.set_params_flat(&flat[..ne])?;
        self.decoder.set_params_flat(&flat[ne..])
    }

    /// Encode every row and draw one reparameterised sample per row.
    pub fn latent_dump(&self, data: &FactorDataset, rng: &mut crate::Rng) -> Result<LatentDump> {
        let enc = self.encode(&data.observations)?;
        let eps = standard_normal(data.len(), self.latent_dim, rng);
        let z = enc.reparameterize(&eps);
        LatentDump::new(
            data.factor_values.clone(),
            enc.means.clone(),
            enc.stddevs(),
            z,
        )
    }
}

fn split_encoding(out: &DMatrix<f64>, d: usize) -> Encoding {
    Encoding {
        means: out.columns(0, d).into_owned(),
        log_vars: out.columns(d, d).into_owned(),
    }
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut crate::Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub recon: f64,
    pub kl: f64,
}

/// Mean over rows of `½ Σₖ (μₖ² + σₖ² − 1 − ln σₖ²)`.
pub fn kl_to_standard_normal(means: &DMatrix<f64>, log_vars: &DMatrix<f64>) -> f64 {
    let total: f64 = means
        .iter()
        .zip(log_vars.iter())
        .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum();
    total / means.nrows() as f64
}

pub fn elbo_terms(model: &VaeModel, x: &DMatrix<f64>, rng: &mut crate::Rng) -> Result<ElboTerms> {
    let enc = model.encode(x)?;
    let eps = standard_normal(x.nrows(), model.latent_dim(), rng);
    let xhat = model.decode(&enc.reparameterize(&eps))?;
    Ok(ElboTerms {
        recon: 0.5 * (xhat - x).norm_squared() / x.nrows() as f64,
        kl: kl_to_standard_normal(&enc.means, &enc.log_vars),
    })
}

/// Batch mean of `Σₖ σₖ²`.
pub fn variance_trace(stddevs: &DMatrix<f64>) -> f64 {
    let t = stddevs.iter().map(|s| s * s).sum::<f64>() / stddevs.nrows() as f64;
    if t == 0.0 {
        log::warn!("variance trace is zero: encoder is deterministic");
    }
    t
}

/// Multiply η by `factor` above the window, zero it below, keep it inside.
pub fn eta_schedule(current_trace: f64, eta: f64, window: (f64, f64), factor: f64) -> f64 {
    if current_trace > window.1 {
        eta * factor
    } else if current_trace < window.0 {
        0.0
    } else {
        eta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DipVariant {
    /// Covariance of the means.
    I,
    /// Covariance of the samples.
    II,
}

fn batch_covariance(x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut xc = x.clone();
    for mut col in xc.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let cov = xc.tr_mul(&xc) / (x.nrows() as f64 - 1.0);
    (xc, cov)
}

/// `λ_od Σ_{i≠j} Cᵢⱼ² + λ_d Σᵢ (Cᵢᵢ − 1)²` for a covariance `C`.
pub fn dip_penalty_from_cov(cov: &DMatrix<f64>, lambda_od: f64, lambda_d: f64) -> f64 {
    let mut off = 0.0;
    let mut diag = 0.0;
    for i in 0..cov.nrows() {
        for j in 0..cov.ncols() {
            if i == j {
                diag += (cov[(i, i)] - 1.0).powi(2);
            } else {
                off += cov[(i, j)].powi(2);
            }
        }
    }
    lambda_od * off + lambda_d * diag
}

/// DIP penalty on the batch covariance of the means (I) or samples (II).
pub fn dip_penalty(
    means: &DMatrix<f64>,
    samples: &DMatrix<f64>,
    variant: DipVariant,
    lambda_od: f64,
    lambda_d: f64,
) -> f64 {
    let x = match variant {
        DipVariant::I => means,
        DipVariant::II => samples,
    };
    dip_penalty_from_cov(&batch_covariance(x).1, lambda_od, lambda_d)
}

fn dip_penalty_with_gradient(
    x: &DMatrix<f64>,
    lambda_od: f64,
    lambda_d: f64,
) -> (f64, DMatrix<f64>) {
    let (xc, cov) = batch_covariance(x);
    let value = dip_penalty_from_cov(&cov, lambda_od, lambda_d);
    let g = DMatrix::from_fn(cov.nrows(), cov.ncols(), |i, j| {
        if i == j {
            2.0 * lambda_d * (cov[(i, i)] - 1.0)
        } else {
            2.0 * lambda_od * cov[(i, j)]
        }
    });
    // G is symmetric and the columns of xc sum to zero, so the centring drops out.
    (value, xc * g * (2.0 / (x.nrows() as f64 - 1.0)))
}

/// Minimisation-form objective: `recon + kl + β·tc + η·trace + dip`, with
/// terms switched on by the objective kind.
pub fn assemble_objective(
    terms: &ElboTerms,
    config: &ObjectiveConfig,
    eta: f64,
    tc_estimate: f64,
    variance_trace_value: f64,
    dip_value: f64,
) -> f64 {
    let mut loss = terms.recon + terms.kl;
    match config.kind {
        ObjectiveKind::PlainElbo => {}
        ObjectiveKind::BetaTc => loss += config.beta * tc_estimate,
        ObjectiveKind::Rtc => loss += config.beta * tc_estimate + eta * variance_trace_value,
        ObjectiveKind::DipI | ObjectiveKind::DipII => loss += dip_value,
    }
    loss
}

/// Source of the TC term and its gradient inside the composite loss.
#[derive(Debug, Clone, Copy)]
pub enum TcTerm<'a> {
    Minibatch { method: Method, dataset_size: usize },
    DensityRatio(&'a Discriminator),
}

/// Every term of one minibatch objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTerms {
    pub recon: f64,
    pub kl: f64,
    pub tc: f64,
    pub variance_trace: f64,
    pub dip: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct CompositeGradient {
    pub terms: StepTerms,
    pub encoder: Gradients,
    pub decoder: Gradients,
    pub samples: DMatrix<f64>,
}

impl CompositeGradient {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut g = self.encoder.to_flat();
        g.extend(self.decoder.to_flat());
        g
    }
}

/// Composite VAE loss and exact parameter gradients for fixed noise `eps`.
///
/// `tc` may be `None` only for kinds that do not use a TC term.
pub fn composite_loss_and_gradient(
    model: &VaeModel,
    x: &DMatrix<f64>,
    eps: &DMatrix<f64>,
    config: &ObjectiveConfig,
    eta: f64,
    tc: Option<TcTerm<'_>>,
) -> Result<CompositeGradient> {
    let (m, d) = (x.nrows(), model.latent_dim());
    if eps.shape() != (m, d) {
        return Err(Error::Shape(format!(
            "noise {:?}, expected {:?}",
            eps.shape(),
            (m, d)
        )));
    }
    let inv_m = 1.0 / m as f64;
    let enc_tape = model.encoder.forward_tape(x)?;
    let enc = split_encoding(enc_tape.output(), d);
    let sd = enc.stddevs();
    let z = &enc.means + sd.component_mul(eps);

    let dec_tape = model.decoder.forward_tape(&z)?;
    let diff = dec_tape.output() - x;
    let recon = 0.5 * diff.norm_squared() * inv_m;
    let (dec_grads, mut dz) = model.decoder.backward(&dec_tape, &(diff * inv_m))?;

    let kl = kl_to_standard_normal(&enc.means, &enc.log_vars);
    let mut dmu = &enc.means * inv_m;
    let mut dlv = enc.log_vars.map(|lv| 0.5 * (lv.exp() - 1.0) * inv_m);
    // Gradient w.r.t. σ, converted to log-variance below.
    let mut dsd = DMatrix::zeros(m, d);

    let mut tc_value = 0.0;
    if config.kind.uses_tc() {
        let term =
            tc.ok_or_else(|| Error::InvalidConfig(format!("{} needs a TC term", config.kind)))?;
        match term {
            TcTerm::Minibatch {
                method,
                dataset_size,
            } => {
                let batch =
                    LatentBatch::new(enc.means.clone(), sd.clone(), z.clone(), dataset_size)?;
                let (est, g) = tc_minibatch_with_gradient(&batch, method)?;
                tc_value = est.value;
                dmu += &g.means * config.beta;
                dsd += &g.stddevs * config.beta;
                dz += &g.samples * config.beta;
            }
            TcTerm::DensityRatio(disc) => {
                let (v, g) = disc.mean_logit_with_input_gradient(&z)?;
                tc_value = v;
                dz += g * config.beta;
            }
        }
    }

    let trace = variance_trace(&sd);
    if config.kind == ObjectiveKind::Rtc {
        dlv += enc.log_vars.map(|lv| eta * lv.exp() * inv_m);
    }

    let mut dip = 0.0;
    match config.kind {
        ObjectiveKind::DipI => {
            let (v, g) = dip_penalty_with_gradient(&enc.means, config.lambda_od, config.lambda_d);
            dip = v;
            dmu += g;
        }
        ObjectiveKind::DipII => {
            let (v, g) = dip_penalty_with_gradient(&z, config.lambda_od, config.lambda_d);
            dip = v;
            dz += g;
        }
        _ => {}
    }

    // z = μ + σε, σ = exp(½ lv).
    dmu += &dz;
    dsd += dz.component_mul(eps);
    dlv += dsd.component_mul(&sd) * 0.5;

    let mut d_enc = DMatrix::zeros(m, 2 * d);
    d_enc.columns_mut(0, d).copy_from(&dmu);
    d_enc.columns_mut(d, d).copy_from(&dlv);
    let (enc_grads, _) = model.encoder.backward(&enc_tape, &d_enc)?;

    let terms = ElboTerms { recon, kl };
    let loss = assemble_objective(&terms, config, eta, tc_value, trace, dip);
    Ok(CompositeGradient {
        terms: StepTerms {
            recon,
            kl,
            tc: tc_value,
            variance_trace: trace,
            dip,
            loss,
        },
        encoder: enc_grads,
        decoder: dec_grads,
        samples: z,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub tc_sample: f64,
    pub tc_mean: f64,
    pub var_trace: f64,
    pub eta: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: [&'static str; 8] = [
        "epoch",
        "recon",
        "kl",
        "tc_sample",
        "tc_mean",
        "var_trace",
        "eta",
        "loss",
    ];

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| Error::Parse(e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::HEADER).map_err(io)?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.recon.to_string(),
                r.kl.to_string(),
                r.tc_sample.to_string(),
                r.tc_mean.to_string(),
                r.var_trace.to_string(),
                r.eta.to_string(),
                r.loss.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Parse(e.to_string()))
    }
}

/// TC_mean and TC_sample (Gaussian TC of correlation matrices) over at most
/// [`EVAL_SAMPLES`] rows.
pub fn evaluate_tc(
    model: &VaeModel,
    data: &FactorDataset,
    rng: &mut crate::Rng,
) -> Result<(f64, f64)> {
    let n = data.len();
    let x = if n > EVAL_SAMPLES {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        data.observations.select_rows(idx[..EVAL_SAMPLES].iter())
    } else {
        data.observations.clone()
    };
    let enc = model.encode(&x)?;
    let z = enc.reparameterize(&standard_normal(x.nrows(), model.latent_dim(), rng));
    let dump = LatentDump::new(
        DMatrix::zeros(x.nrows(), 0),
        enc.means.clone(),
        enc.stddevs(),
        z,
    )?;
    tc_mean_and_sample(&dump)
}

/// Train a VAE; η follows [`eta_schedule`] once per epoch on the epoch-mean
/// trace (rtc only). A zeroed η is re-armed to `eta_init` if the trace later
/// exceeds the window again.
pub fn train(data: &FactorDataset, config: &ObjectiveConfig) -> Result<(VaeModel, TrainLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let n = data.len();
    let mut rng = crate::rng_from_seed(config.seed);
    let mut model = VaeModel::new(
        data.obs_dim(),
        config.latent_dim,
        config.hidden_width,
        &mut rng,
    )?;
    let mut log = TrainLog::default();
    if config.epochs == 0 {
        return Ok((model, log));
    }
    let batch_size = config.batch_size.min(n);
    if batch_size < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }
    let mut enc_opt = Optimizer::adam(config.step_size)?;
    let mut dec_opt = Optimizer::adam(config.step_size)?;
    let use_disc = config.kind.uses_tc() && config.tc_estimator == Method::DensityRatio;
    let mut disc = if use_disc {
        Some(Discriminator::new(
            config.latent_dim,
            &config.discriminator,
            &mut rng,
        )?)
    } else {
        None
    };

    let mut eta = if config.kind == ObjectiveKind::Rtc {
        config.eta_init
    } else {
        0.0
    };
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        let diverged = || Error::TrainingDiverged { epoch: Some(epoch) };
        order.shuffle(&mut rng);
        let (mut sums, mut steps) = ([0.0f64; 4], 0usize);
        for chunk in order.chunks(batch_size).filter(|c| c.len() >= 2) {
            let x = data.observations.select_rows(chunk.iter());
            let eps = standard_normal(chunk.len(), config.latent_dim, &mut rng);
            let tc = if !config.kind.uses_tc() {
                None
            } else if let Some(d) = disc.as_ref() {
                Some(TcTerm::DensityRatio(d))
            } else {
                Some(TcTerm::Minibatch {
                    method: config.tc_estimator,
                    dataset_size: n,
                })
            };
            let step = composite_loss_and_gradient(&model, &x, &eps, config, eta, tc).map_err(
                |e| match e {
                    Error::NonFinite(_) | Error::InvalidConfig(_) => diverged(),
                    other => other,
                },
            )?;
            if !step.terms.loss.is_finite() {
                return Err(diverged());
            }
            model.encoder.apply_gradients(&mut enc_opt, &step.encoder)?;
            model.decoder.apply_gradients(&mut dec_opt, &step.decoder)?;
            if !model.encoder.is_finite() || !model.decoder.is_finite() {
                return Err(diverged());
            }
            if let Some(d) = disc.as_mut() {
                let z = SampleMatrix::new(step.samples.clone()).map_err(|_| diverged())?;
                let shuffled = permute_dims(&z, &mut rng);
                d.train_step(z.matrix(), shuffled.matrix())
                    .map_err(|_| diverged())?;
            }
            for (s, v) in sums.iter_mut().zip([
                step.terms.recon,
                step.terms.kl,
                step.terms.variance_trace,
                step.terms.loss,
            ]) {
                *s += v;
            }
            steps += 1;
        }
        let mean = |i: usize| sums[i] / steps as f64;
        let (tc_mean, tc_sample) = evaluate_tc(&model, data, &mut rng).unwrap_or_else(|e| {
            log::warn!("epoch {epoch}: TC evaluation failed: {e}");
            (f64::NAN, f64::NAN)
        });
        log.records.push(EpochRecord {
            epoch,
            recon: mean(0),
            kl: mean(1),
            tc_sample,
            tc_mean,
            var_trace: mean(2),
            eta,
            loss: mean(3),
        });
        if config.kind == ObjectiveKind::Rtc {
            let trace = mean(2);
            eta = if eta == 0.0 && trace > config.eta_window.1 {
                config.eta_init
            } else {
                eta_schedule(trace, eta, config.eta_window, config.eta_factor)
            };
        }
        log::debug!(
            "epoch {epoch}: loss {:.4} trace {:.4} eta {eta:.3}",
            mean(3),
            mean(2)
        );
    }
    Ok((model, log))
}
