//! Total-correlation estimators.
//!
//! The minibatch family (naive, MWS, MSS₀, MSS₁) evaluates the
//! `M × M × D` box of conditional log densities `ln q(zₖ⁽ⁱ⁾ | n⁽ʲ⁾)` with
//! `q(z|n) = N(μ(n), diag σ²(n))`, mixes over `j` with per-method log
//! weights and returns `E[ln q(z)] − Σₖ E[ln q(zₖ)]`. The density-ratio
//! estimator averages a classifier's logit over joint samples.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::gaussian::{MultivariateNormal, SampleMatrix};
use crate::nn::{self, Loss, Mlp, Optimizer};
use crate::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// Clamp applied to classifier probabilities before taking the log-odds.
pub const DENSITY_RATIO_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    NaiveMc,
    Mws,
    Mss0,
    Mss1,
    DensityRatio,
    ClosedForm,
}

impl Method {
    pub const MINIBATCH: [Method; 4] = [Method::NaiveMc, Method::Mws, Method::Mss0, Method::Mss1];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::NaiveMc => "naive-mc",
            Method::Mws => "mws",
            Method::Mss0 => "mss0",
            Method::Mss1 => "mss1",
            Method::DensityRatio => "density-ratio",
            Method::ClosedForm => "closed-form",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "naive-mc" | "naive" => Method::NaiveMc,
            "mws" => Method::Mws,
            "mss0" => Method::Mss0,
            "mss1" | "mss" => Method::Mss1,
            "density-ratio" => Method::DensityRatio,
            "closed-form" => Method::ClosedForm,
            other => return Err(Error::Parse(format!("unknown estimator `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MssVariant {
    /// Placement used by the original β-TCVAE reference code.
    Mss0,
    /// Diagonal `1/N`, stratum weight at column `(i + 1) mod M`.
    Mss1,
}

/// Encoder statistics and reparameterised samples for one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    means: DMatrix<f64>,
    stddevs: DMatrix<f64>,
    samples: DMatrix<f64>,
    dataset_size: usize,
}

impl LatentBatch {
    pub fn new(
        means: DMatrix<f64>,
        stddevs: DMatrix<f64>,
        samples: DMatrix<f64>,
        dataset_size: usize,
    ) -> Result<Self> {
        if means.shape() != stddevs.shape() || means.shape() != samples.shape() {
            return Err(Error::Shape(format!(
                "means {:?}, stddevs {:?}, samples {:?} must share a shape",
                means.shape(),
                stddevs.shape(),
                samples.shape()
            )));
        }
        let m = means.nrows();
        if m < 2 {
            return Err(Error::InsufficientData { needed: 2, got: m });
        }
        if dataset_size < m {
            return Err(Error::InvalidConfig(format!(
                "dataset size {dataset_size} is smaller than the batch ({m})"
            )));
        }
        if stddevs.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidConfig(
                "standard deviations must be positive".into(),
            ));
        }
        if means.iter().chain(samples.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent batch".into()));
        }
        Ok(Self {
            means,
            stddevs,
            samples,
            dataset_size,
        })
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

    pub fn batch_size(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn dataset_size(&self) -> usize {
        self.dataset_size
    }

    /// Means `μ ~ N(0, Σ)`, constant stddev `σ′`, samples `z = μ + σ′ε`.
    pub fn gaussian(
        mean_cov: &DMatrix<f64>,
        sigma_prime: f64,
        batch_size: usize,
        dataset_size: usize,
        rng: &mut crate::Rng,
    ) -> Result<Self> {
        let d = mean_cov.nrows();
        let means = MultivariateNormal::centered(mean_cov.clone())?
            .sample(batch_size, rng)
            .into_matrix();
        let eps = MultivariateNormal::centered(DMatrix::identity(d, d))?
            .sample(batch_size, rng)
            .into_matrix();
        let samples = &means + eps * sigma_prime;
        Self::new(
            means,
            DMatrix::from_element(batch_size, d, sigma_prime),
            samples,
            dataset_size,
        )
    }

    /// Same batch with rows reordered by `perm` (`new[r] = old[perm[r]]`).
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let pick =
            |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(perm[r], c)]);
        Self {
            means: pick(&self.means),
            stddevs: pick(&self.stddevs),
            samples: pick(&self.samples),
            dataset_size: self.dataset_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TcEstimate {
    pub method: Method,
    pub value: f64,
    pub batch_size: usize,
    pub dimension: usize,
    pub seed: Option<u64>,
}

impl TcEstimate {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// Gradients of a minibatch estimate w.r.t. the batch contents.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradients {
    pub means: DMatrix<f64>,
    pub stddevs: DMatrix<f64>,
    pub samples: DMatrix<f64>,
}

/// Log mixture weights over the minibatch for sample `i`.
#[derive(Debug, Clone)]
enum LogWeights {
    Uniform(f64),
    Matrix(DMatrix<f64>),
}

impl LogWeights {
    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            LogWeights::Uniform(w) => *w,
            LogWeights::Matrix(m) => m[(i, j)],
        }
    }
}

/// Log importance weights for minibatch stratified sampling.
///
/// Follows the reference convention `M' = batch_size − 1`,
/// stratum weight `(N − M') / (N M')`, and `1/M'` elsewhere.
///
/// * `Mss1`: `W[i,i] = 1/N`, `W[i,(i+1) mod M] = (N − M')/(N M')`; every row
///   sums to one.
/// * `Mss0`: the reference code writes `1/N` into every `batch_size`-th entry
///   of the flattened matrix starting at 0 (column 0), the stratum weight into
///   every `batch_size`-th entry starting at 1 (column 1), then
///   `W[M' − 1, 0] = stratum`. Row `batch_size − 2` therefore sums to
///   `1 + 1/M' − 2/N` instead of one.
pub fn log_importance_weight_matrix(
    batch_size: usize,
    dataset_size: usize,
    variant: MssVariant,
) -> Result<DMatrix<f64>> {
    if batch_size < 2 {
        return Err(Error::InvalidConfig(format!(
            "importance weights need a batch of at least 2, got {batch_size}"
        )));
    }
    if batch_size > dataset_size {
        return Err(Error::InvalidConfig(format!(
            "batch size {batch_size} exceeds dataset size {dataset_size}"
        )));
    }
    let n = dataset_size as f64;
    let m = (batch_size - 1) as f64;
    let strat = (n - m) / (n * m);
    let mut w = DMatrix::from_element(batch_size, batch_size, 1.0 / m);
    match variant {
        MssVariant::Mss1 => {
            for i in 0..batch_size {
                w[(i, i)] = 1.0 / n;
                w[(i, (i + 1) % batch_size)] = strat;
            }
        }
        MssVariant::Mss0 => {
            for i in 0..batch_size {
                w[(i, 0)] = 1.0 / n;
                w[(i, 1)] = strat;
            }
            w[(batch_size - 2, 0)] = strat;
        }
    }
    Ok(w.map(f64::ln))
}

fn weights_for(method: Method, batch: &LatentBatch) -> Result<(LogWeights, LogWeights)> {
    let m = batch.batch_size() as f64;
    let n = batch.dataset_size() as f64;
    Ok(match method {
        Method::NaiveMc => (LogWeights::Uniform(-m.ln()), LogWeights::Uniform(-m.ln())),
        // Joint term uses the MWS normaliser 1/(NM); marginals use the plain
        // minibatch mixture.
        Method::Mws => (
            LogWeights::Uniform(-(n * m).ln()),
            LogWeights::Uniform(-m.ln()),
        ),
        Method::Mss0 | Method::Mss1 => {
            let variant = if method == Method::Mss0 {
                MssVariant::Mss0
            } else {
                MssVariant::Mss1
            };
            let w =
                log_importance_weight_matrix(batch.batch_size(), batch.dataset_size(), variant)?;
            (LogWeights::Matrix(w.clone()), LogWeights::Matrix(w))
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "{other} is not a minibatch estimator"
            )))
        }
    })
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn minibatch_tc(
    batch: &LatentBatch,
    joint_w: &LogWeights,
    marg_w: &LogWeights,
    with_grad: bool,
) -> (f64, Option<BatchGradients>) {
    let (m, d) = (batch.batch_size(), batch.dim());
    let mu = &batch.means;
    let z = &batch.samples;
    let ln_sd = batch.stddevs.map(f64::ln);
    let inv_sd = batch.stddevs.map(|s| 1.0 / s);

    let mut grads = with_grad.then(|| BatchGradients {
        means: DMatrix::zeros(m, d),
        stddevs: DMatrix::zeros(m, d),
        samples: DMatrix::zeros(m, d),
    });
    let inv_m = 1.0 / m as f64;

    // Per-sample scratch: standardized residuals u[j,k], log densities l[j,k].
    let mut u = DMatrix::zeros(m, d);
    let mut l = DMatrix::zeros(m, d);
    let mut joint = vec![0.0; m];
    let mut col = vec![0.0; m];
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            let mut s = joint_w.get(i, j);
            for k in 0..d {
                let uk = (z[(i, k)] - mu[(j, k)]) * inv_sd[(j, k)];
                let lk = -HALF_LN_2PI - ln_sd[(j, k)] - 0.5 * uk * uk;
                u[(j, k)] = uk;
                l[(j, k)] = lk;
                s += lk;
            }
            joint[j] = s;
        }
        let joint_lse = log_sum_exp(&joint);
        total += joint_lse;

        // dvalue/dl[j,k] accumulates pJ[j] − pM[j,k], scaled by 1/M.
        let mut coef = with_grad.then(|| {
            let p: Vec<f64> = joint.iter().map(|v| (v - joint_lse).exp()).collect();
            DMatrix::from_fn(m, d, |j, _| p[j])
        });
        for k in 0..d {
            for j in 0..m {
                col[j] = marg_w.get(i, j) + l[(j, k)];
            }
            let lse = log_sum_exp(&col);
            total -= lse;
            if let Some(c) = coef.as_mut() {
                for j in 0..m {
                    c[(j, k)] -= (col[j] - lse).exp();
                }
            }
        }
        if let (Some(c), Some(g)) = (coef, grads.as_mut()) {
            for j in 0..m {
                for k in 0..d {
                    let a = c[(j, k)] * inv_m;
                    if a == 0.0 {
                        continue;
                    }
                    let uk = u[(j, k)];
                    let is = inv_sd[(j, k)];
                    g.samples[(i, k)] -= a * uk * is;
                    g.means[(j, k)] += a * uk * is;
                    g.stddevs[(j, k)] += a * (uk * uk - 1.0) * is;
                }
            }
        }
    }
    (total * inv_m, grads)
}

fn estimate(method: Method, batch: &LatentBatch, value: f64) -> TcEstimate {
    TcEstimate {
        method,
        value,
        batch_size: batch.batch_size(),
        dimension: batch.dim(),
        seed: None,
    }
}

/// Any minibatch estimator by tag.
pub fn tc_minibatch(batch: &LatentBatch, method: Method) -> Result<TcEstimate> {
    let (jw, mw) = weights_for(method, batch)?;
    let (value, _) = minibatch_tc(batch, &jw, &mw, false);
    Ok(estimate(method, batch, value))
}

/// Minibatch estimate plus its gradient w.r.t. means, stddevs and samples.
pub fn tc_minibatch_with_gradient(
    batch: &LatentBatch,
    method: Method,
) -> Result<(TcEstimate, BatchGradients)> {
    let (jw, mw) = weights_for(method, batch)?;
    let (value, grads) = minibatch_tc(batch, &jw, &mw, true);
    Ok((
        estimate(method, batch, value),
        grads.expect("gradients requested"),
    ))
}

/// Uniform `1/M` mixture for both the joint and the marginals.
pub fn tc_naive_mc(batch: &LatentBatch) -> TcEstimate {
    tc_minibatch(batch, Method::NaiveMc).expect("naive weights are always valid")
}

/// Minibatch weighted sampling.
pub fn tc_mws(batch: &LatentBatch) -> TcEstimate {
    tc_minibatch(batch, Method::Mws).expect("mws weights are always valid")
}

/// Minibatch stratified sampling.
pub fn tc_mss(batch: &LatentBatch, variant: MssVariant) -> TcEstimate {
    let method = match variant {
        MssVariant::Mss0 => Method::Mss0,
        MssVariant::Mss1 => Method::Mss1,
    };
    // LatentBatch guarantees 2 ≤ M ≤ N.
    tc_minibatch(batch, method).expect("valid batch yields valid weights")
}

/// Order-of-magnitude prediction `(D − 1 − s) ln M` of the minibatch
/// estimate when the true TC is near zero, floored at zero.
pub fn asymptotic_mss_prediction(dim: usize, batch_size: usize, shutdown_dims: usize) -> f64 {
    let active = dim as f64 - 1.0 - shutdown_dims as f64;
    (active * (batch_size as f64).ln()).max(0.0)
}

/// Independently shuffle each column: a sample from the product of marginals.
pub fn permute_dims(samples: &SampleMatrix, rng: &mut crate::Rng) -> SampleMatrix {
    let mut out = samples.matrix().clone();
    let n = out.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    for c in 0..out.ncols() {
        idx.shuffle(rng);
        let col: Vec<f64> = idx.iter().map(|&r| samples[(r, c)]).collect();
        out.column_mut(c).copy_from_slice(&col);
    }
    SampleMatrix::new(out).expect("permutation preserves finiteness")
}

/// Anything that outputs `P(joint | z)` per row.
pub trait ProbabilisticClassifier {
    fn prob_joint(&self, z: &DMatrix<f64>) -> Result<DVector<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    /// Number of hidden layers.
    pub layers: usize,
    pub hidden_width: usize,
    pub leaky_slope: f64,
    pub steps: usize,
    pub step_size: f64,
    pub batch_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden_width: 128,
            leaky_slope: nn::DEFAULT_LEAKY_SLOPE,
            steps: 2000,
            step_size: 1e-3,
            batch_size: 256,
        }
    }
}

impl DiscriminatorConfig {
    /// The full-size FactorVAE discriminator: six hidden layers of 1000 units.
    pub fn factor_vae() -> Self {
        Self {
            layers: 6,
            hidden_width: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_width == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "discriminator needs positive layers, width and batch size".into(),
            ));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig(
                "discriminator step size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn widths(&self, input: usize) -> Vec<usize> {
        let mut w = vec![input];
        w.extend(std::iter::repeat_n(self.hidden_width, self.layers));
        w.push(1);
        w
    }
}

/// Binary classifier: joint rows (label 1) vs dimension-shuffled rows (label 0).
#[derive(Debug, Clone)]
pub struct Discriminator {
    net: Mlp,
    optimizer: Optimizer,
}

impl Discriminator {
    pub fn new(
        input_dim: usize,
        config: &DiscriminatorConfig,
        rng: &mut crate::Rng,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            net: Mlp::new(&config.widths(input_dim), config.leaky_slope, rng)?,
            optimizer: Optimizer::adam(config.step_size)?,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn logits(&self, z: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.net.forward(z)?.column(0).into_owned())
    }

    /// One logistic-loss step on a joint batch and a shuffled batch.
    pub fn train_step(&mut self, joint: &DMatrix<f64>, shuffled: &DMatrix<f64>) -> Result<f64> {
        let (x, t) = stack_labelled(joint, shuffled)?;
        let (loss, grads) = nn::loss_and_gradient(&self.net, &x, &t, Loss::Logistic)
            .map_err(|_| Error::TrainingDiverged { epoch: None })?;
        self.net.apply_gradients(&mut self.optimizer, &grads)?;
        if !self.net.is_finite() {
            return Err(Error::TrainingDiverged { epoch: None });
        }
        Ok(loss)
    }

    /// Mean logit over the rows of `z` and its gradient w.r.t. `z`.
    pub fn mean_logit_with_input_gradient(&self, z: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)> {
        let tape = self.net.forward_tape(z)?;
        let n = z.nrows() as f64;
        let mean = tape.output().sum() / n;
        let d_out = DMatrix::from_element(z.nrows(), 1, 1.0 / n);
        let (_, dz) = self.net.backward(&tape, &d_out)?;
        Ok((mean, dz))
    }

    /// Fraction of rows classified correctly at threshold ½.
    pub fn accuracy(&self, joint: &DMatrix<f64>, shuffled: &DMatrix<f64>) -> Result<f64> {
        classifier_accuracy(self, joint, shuffled)
    }
}

impl ProbabilisticClassifier for Discriminator {
    fn prob_joint(&self, z: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.logits(z)?.map(nn::sigmoid))
    }
}

/// Accuracy of any classifier on labelled joint (1) and shuffled (0) rows.
pub fn classifier_accuracy<C: ProbabilisticClassifier + ?Sized>(
    clf: &C,
    joint: &DMatrix<f64>,
    shuffled: &DMatrix<f64>,
) -> Result<f64> {
    let pj = clf.prob_joint(joint)?;
    let ps = clf.prob_joint(shuffled)?;
    let correct = pj.iter().filter(|p| **p > 0.5).count() + ps.iter().filter(|p| **p < 0.5).count();
    Ok(correct as f64 / (pj.len() + ps.len()) as f64)
}

fn stack_labelled(
    joint: &DMatrix<f64>,
    shuffled: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if joint.ncols() != shuffled.ncols() {
        return Err(Error::Shape("joint and shuffled widths differ".into()));
    }
    let (a, b) = (joint.nrows(), shuffled.nrows());
    let mut x = DMatrix::zeros(a + b, joint.ncols());
    x.rows_mut(0, a).copy_from(joint);
    x.rows_mut(a, b).copy_from(shuffled);
    let t = DMatrix::from_fn(a + b, 1, |r, _| if r < a { 1.0 } else { 0.0 });
    Ok((x, t))
}

fn sample_rows(m: &DMatrix<f64>, count: usize, rng: &mut crate::Rng) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(count, m.ncols());
    for r in 0..count {
        out.row_mut(r).copy_from(&m.row(rng.random_range(0..n)));
    }
    out
}

/// Fit a fresh discriminator with Adam on minibatches drawn with replacement.
pub fn train_discriminator(
    joint: &SampleMatrix,
    shuffled: &SampleMatrix,
    config: &DiscriminatorConfig,
    rng: &mut crate::Rng,
) -> Result<Discriminator> {
    if joint.shape() != shuffled.shape() {
        return Err(Error::Shape(format!(
            "joint {:?} and shuffled {:?} differ",
            joint.shape(),
            shuffled.shape()
        )));
    }
    if joint.nrows() == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut disc = Discriminator::new(joint.ncols(), config, rng)?;
    for _ in 0..config.steps {
        let a = sample_rows(joint, config.batch_size, rng);
        let b = sample_rows(shuffled, config.batch_size, rng);
        disc.train_step(&a, &b)?;
    }
    Ok(disc)
}

/// Mean of `ln(D(z) / (1 − D(z)))` over joint samples, with `D` clamped to
/// `[ε, 1 − ε]`.
pub fn tc_density_ratio<C: ProbabilisticClassifier + ?Sized>(
    samples: &SampleMatrix,
    disc: &C,
) -> Result<TcEstimate> {
    if samples.nrows() == 0 {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let p = disc.prob_joint(samples.matrix())?;
    let value = p
        .iter()
        .map(|&d| {
            let d = d.clamp(DENSITY_RATIO_EPS, 1.0 - DENSITY_RATIO_EPS);
            (d / (1.0 - d)).ln()
        })
        .sum::<f64>()
        / p.len() as f64;
    Ok(TcEstimate {
        method: Method::DensityRatio,
        value,
        batch_size: samples.nrows(),
        dimension: samples.ncols(),
        seed: None,
    })
}
