//! Feed-forward networks with manual backpropagation.
//!
//! Batches are row-per-example matrices. Hidden layers use a leaky rectifier,
//! the final layer is linear. Shape mismatches surface as [`Error::Shape`].

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

const CHECKPOINT_MAGIC: &str = "tcorr-mlp v1";

/// Dense layer; `weights` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weights: DMatrix::zeros(input, output),
            bias: DVector::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x * &self.weights;
        for mut row in h.row_iter_mut() {
            row += self.bias.transpose();
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    slope: f64,
}

/// Intermediate values recorded by [`Mlp::forward_tape`].
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer (the first is the network input).
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<DMatrix<f64>>,
    output: DMatrix<f64>,
}

impl Tape {
    pub fn output(&self) -> &DMatrix<f64> {
        &self.output
    }
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(Dense::num_params).sum());
    for l in layers {
        out.extend_from_slice(l.weights.as_slice());
        out.extend_from_slice(l.bias.as_slice());
    }
    out
}

impl Mlp {
    /// Random network with fan-in scaled uniform initialisation.
    pub fn new(widths: &[usize], slope: f64, rng: &mut crate::Rng) -> Result<Self> {
        let mut net = Self::zeros(widths, slope)?;
        for l in &mut net.layers {
            let bound = 1.0 / (l.input_dim() as f64).sqrt();
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize], slope: f64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer widths {widths:?} need at least two positive entries"
            )));
        }
        let layers = widths
            .windows(2)
            .map(|w| Dense::zeros(w[0], w[1]))
            .collect();
        Ok(Self { layers, slope })
    }

    pub fn from_layers(layers: Vec<Dense>, slope: f64) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig(
                "network needs at least one layer".into(),
            ));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Shape("bias length differs from layer width".into()));
            }
        }
        Ok(Self { layers, slope })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Dense::output_dim));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Dense::output_dim).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::num_params).sum()
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn activate(&self, mut h: DMatrix<f64>) -> DMatrix<f64> {
        let s = self.slope;
        h.apply(|v| {
            if *v < 0.0 {
                *v *= s
            }
        });
        h
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = self.layers[0].apply(x);
        if last > 0 {
            h = self.activate(h);
        }
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            h = layer.apply(&h);
            if i < last {
                h = self.activate(h);
            }
        }
        Ok(h)
    }

    pub fn forward_tape(&self, x: &DMatrix<f64>) -> Result<Tape> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            inputs.push(h);
            if i < last {
                h = self.activate(z.clone());
                pre.push(z);
            } else {
                h = z;
            }
        }
        Ok(Tape {
            inputs,
            pre,
            output: h,
        })
    }

    /// Backpropagate `d_output` (gradient of a scalar w.r.t. the output).
    /// Returns parameter gradients and the gradient w.r.t. the input.
    pub fn backward(
        &self,
        tape: &Tape,
        d_output: &DMatrix<f64>,
    ) -> Result<(Gradients, DMatrix<f64>)> {
        if d_output.shape() != tape.output.shape() {
            return Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                d_output.shape(),
                tape.output.shape()
            )));
        }
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = d_output.clone();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                let s = self.slope;
                delta.zip_apply(&tape.pre[i], |d, z| {
                    if z < 0.0 {
                        *d *= s
                    }
                });
            }
            let input = &tape.inputs[i];
            let dw = input.tr_mul(&delta);
            let db = delta.row_sum().transpose();
            let next = &delta * self.layers[i].weights.transpose();
            grads.push(Dense {
                weights: dw,
                bias: db,
            });
            delta = next;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, network has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights
                .as_mut_slice()
                .copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// One optimizer step with the given gradients.
    pub fn apply_gradients(&mut self, opt: &mut Optimizer, grads: &Gradients) -> Result<()> {
        let mut p = self.params_flat();
        opt.step(&mut p, &grads.to_flat())?;
        self.set_params_flat(&p)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// Text checkpoint: a magic line, the slope, then per layer its shape,
    /// weights (row-major over `in × out`) and bias.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(s, "slope {}", self.slope).unwrap();
        writeln!(s, "layers {}", self.layers.len()).unwrap();
        for l in &self.layers {
            writeln!(s, "dense {} {}", l.input_dim(), l.output_dim()).unwrap();
            let w: Vec<String> = (0..l.input_dim())
                .flat_map(|r| (0..l.output_dim()).map(move |c| (r, c)))
                .map(|(r, c)| l.weights[(r, c)].to_string())
                .collect();
            writeln!(s, "w {}", w.join(" ")).unwrap();
            let b: Vec<String> = l.bias.iter().map(f64::to_string).collect();
            writeln!(s, "b {}", b.join(" ")).unwrap();
        }
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("checkpoint truncated before {what}")))
        };
        if next("header")?.trim() != CHECKPOINT_MAGIC {
            return Err(Error::Parse("unrecognised checkpoint header".into()));
        }
        let slope = parse_tagged(next("slope")?, "slope")?;
        let n_layers = parse_tagged(next("layers")?, "layers")? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let shape = values_after(next("dense")?, "dense")?;
            if shape.len() != 2 {
                return Err(Error::Parse("dense line needs two sizes".into()));
            }
            let (input, output) = (shape[0] as usize, shape[1] as usize);
            let w = values_after(next("weights")?, "w")?;
            let b = values_after(next("bias")?, "b")?;
            if w.len() != input * output || b.len() != output {
                return Err(Error::Parse(
                    "layer value count does not match shape".into(),
                ));
            }
            layers.push(Dense {
                weights: DMatrix::from_row_slice(input, output, &w),
                bias: DVector::from_vec(b),
            });
        }
        Self::from_layers(layers, slope)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse(e.to_string()))?;
        Self::from_checkpoint(&text)
    }
}

fn values_after(line: &str, tag: &str) -> Result<Vec<f64>> {
    let mut it = line.split_whitespace();
    if it.next() != Some(tag) {
        return Err(Error::Parse(format!("expected `{tag}` line, got `{line}`")));
    }
    it.map(|t| {
        t.parse::<f64>()
            .map_err(|e| Error::Parse(format!("{t}: {e}")))
    })
    .collect()
}

fn parse_tagged(line: &str, tag: &str) -> Result<f64> {
    match values_after(line, tag)?.as_slice() {
        [v] => Ok(*v),
        _ => Err(Error::Parse(format!("`{tag}` line needs one value"))),
    }
}

/// Supervised losses, averaged over the batch rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Binary cross-entropy on a single logit output; targets in {0, 1}.
    Logistic,
    /// `½ Σₖ (yₖ − tₖ)²` per row.
    Squared,
}

impl Loss {
    /// Loss value and its gradient w.r.t. the network output.
    pub fn evaluate(
        self,
        output: &DMatrix<f64>,
        targets: &DMatrix<f64>,
    ) -> Result<(f64, DMatrix<f64>)> {
        if output.shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "targets {:?} do not match output {:?}",
                targets.shape(),
                output.shape()
            )));
        }
        let n = output.nrows() as f64;
        match self {
            Loss::Logistic => {
                if output.ncols() != 1 {
                    return Err(Error::Shape("logistic loss needs a single output".into()));
                }
                let mut total = 0.0;
                let grad = output.zip_map(targets, |a, t| {
                    total += softplus(a) - t * a;
                    (sigmoid(a) - t) / n
                });
                Ok((total / n, grad))
            }
            Loss::Squared => {
                let diff = output - targets;
                Ok((0.5 * diff.norm_squared() / n, diff / n))
            }
        }
    }
}

/// Mean loss and exact parameter gradients for a supervised batch.
pub fn loss_and_gradient(
    net: &Mlp,
    input: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    loss: Loss,
) -> Result<(f64, Gradients)> {
    let tape = net.forward_tape(input)?;
    let (value, d_out) = loss.evaluate(tape.output(), targets)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let (grads, _) = net.backward(&tape, &d_out)?;
    if grads.layers.iter().any(|l| {
        l.weights
            .iter()
            .chain(l.bias.iter())
            .any(|v| !v.is_finite())
    }) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok((value, grads))
}

pub fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eᵃ)` without overflow.
pub fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    step_size: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, step_size: f64) -> Result<Self> {
        if !(step_size > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "step size {step_size} must be positive"
            )));
        }
        Ok(Self {
            kind,
            step_size,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        })
    }

    pub fn sgd(step_size: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, step_size)
    }

    pub fn adam(step_size: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam(), step_size)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.step_size * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    self.first = vec![0.0; params.len()];
                    self.second = vec![0.0; params.len()];
                } else if self.first.len() != params.len() {
                    return Err(Error::Shape(
                        "moment buffers do not match parameters".into(),
                    ));
                }
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.first[i] = beta1 * self.first[i] + (1.0 - beta1) * g;
                    self.second[i] = beta2 * self.second[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.first[i] / c1;
                    let v_hat = self.second[i] / c2;
                    params[i] -= self.step_size * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn random_input(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = crate::rng_from_seed(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2], 0.2).unwrap();
        let out = net.forward(&random_input(4, 3, 0)).unwrap();
        assert_eq!(out, DMatrix::zeros(4, 2));
    }

    #[test]
    fn identity_linear_layer() {
        let layer = Dense {
            weights: DMatrix::identity(3, 3),
            bias: DVector::zeros(3),
        };
        let net = Mlp::from_layers(vec![layer], 0.2).unwrap();
        let x = random_input(5, 3, 1);
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let mut rng = crate::rng_from_seed(42);
        let net = Mlp::new(&[2, 16, 1], 0.2, &mut rng).unwrap();
        let x = random_input(7, 2, 2);
        let out = net.forward(&x).unwrap();
        let (l0, l1) = (&net.layers()[0], &net.layers()[1]);
        for r in 0..x.nrows() {
            let mut y = l1.bias[0];
            for h in 0..16 {
                let mut a = l0.bias[h];
                for i in 0..2 {
                    a += x[(r, i)] * l0.weights[(i, h)];
                }
                if a < 0.0 {
                    a *= 0.2;
                }
                y += a * l1.weights[(h, 0)];
            }
            assert!((out[(r, 0)] - y).abs() < 1e-12);
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let net = Mlp::zeros(&[3, 2], 0.2).unwrap();
        assert!(matches!(
            net.forward(&DMatrix::zeros(2, 4)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn stationary_point_has_zero_gradient() {
        // Zero network, symmetric logistic targets: σ(0) = ½ balances labels 0 and 1.
        let net = Mlp::zeros(&[2, 4, 1], 0.2).unwrap();
        let x = dmatrix![1.0, -1.0; 1.0, -1.0];
        let t = dmatrix![1.0; 0.0];
        let (_, g) = loss_and_gradient(&net, &x, &t, Loss::Logistic).unwrap();
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn leaky_kink_uses_slope_on_negative_side() {
        // One hidden unit with pre-activation −0.01 at the probe input.
        let l0 = Dense {
            weights: dmatrix![1.0],
            bias: DVector::from_element(1, 0.0),
        };
        let l1 = Dense {
            weights: dmatrix![1.0],
            bias: DVector::from_element(1, 0.0),
        };
        let net = Mlp::from_layers(vec![l0, l1], 0.2).unwrap();
        let x = dmatrix![-0.01];
        let tape = net.forward_tape(&x).unwrap();
        let (_, dx) = net.backward(&tape, &dmatrix![1.0]).unwrap();
        assert_eq!(dx[(0, 0)], 0.2);
        let h = 1e-4;
        let f = |v: f64| net.forward(&dmatrix![v]).unwrap()[(0, 0)];
        let left = (f(-0.01) - f(-0.01 - h)) / h;
        let right = (f(-0.01 + h) - f(-0.01)) / h;
        assert!((left - 0.2).abs() < 1e-9);
        assert!((right - 0.2).abs() < 1e-9);
    }

    #[test]
    fn sgd_definition() {
        let mut opt = Optimizer::sgd(0.1).unwrap();
        let mut p = [1.0];
        opt.step(&mut p, &[2.0]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for mut opt in [Optimizer::sgd(0.1).unwrap(), Optimizer::adam(0.1).unwrap()] {
            let mut p = [1.0, -2.0, 3.5];
            opt.step(&mut p, &[0.0; 3]).unwrap();
            assert_eq!(p, [1.0, -2.0, 3.5]);
        }
    }

    #[test]
    fn adam_minimises_quadratic_bowl() {
        let target = [3.0, -1.5, 0.25];
        let mut p = [0.0; 3];
        let mut opt = Optimizer::adam(0.05).unwrap();
        let mut steps = 0;
        while steps < 1000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            opt.step(&mut p, &g).unwrap();
            steps += 1;
            if p.iter().zip(&target).all(|(a, b)| (a - b).abs() < 1e-3) {
                break;
            }
        }
        assert!(steps < 1000, "did not converge: {p:?}");
    }

    #[test]
    fn optimizer_rejects_mismatched_lengths() {
        let mut opt = Optimizer::sgd(0.1).unwrap();
        assert!(opt.step(&mut [0.0; 2], &[0.0; 3]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = crate::rng_from_seed(9);
        let net = Mlp::new(&[3, 7, 4, 2], 0.1, &mut rng).unwrap();
        let back = Mlp::from_checkpoint(&net.to_checkpoint()).unwrap();
        assert_eq!(back, net);
        assert!(Mlp::from_checkpoint("garbage").is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut rng = crate::rng_from_seed(5);
            let mut net = Mlp::new(&[2, 8, 1], 0.2, &mut rng).unwrap();
            let mut opt = Optimizer::adam(1e-2).unwrap();
            let x = random_input(32, 2, 6);
            let t = DMatrix::from_fn(32, 1, |r, _| if x[(r, 0)] > 0.0 { 1.0 } else { 0.0 });
            for _ in 0..25 {
                let (_, g) = loss_and_gradient(&net, &x, &t, Loss::Logistic).unwrap();
                net.apply_gradients(&mut opt, &g).unwrap();
            }
            net.params_flat()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
