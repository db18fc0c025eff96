//! Dense feed-forward networks with exact reverse-mode gradients and Adam.
//!
//! Everything here works on row-major batches: a batch of `B` inputs is a
//! `B × input_width` matrix and each layer computes `tanh(X Wᵀ + b)` or the
//! identity variant. Single-example entry points wrap the batched ones.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed in terms of the activation's output.
    #[inline]
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_width: usize,
    pub output_width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_width: usize, output_width: usize, activation: Activation) -> Self {
        Self {
            input_width,
            output_width,
            activation,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.output_width * self.input_width + self.output_width
    }
}

/// Layer specs for an MLP: `tanh` on every hidden layer, `output_activation` on the last.
pub fn mlp_layers(
    input_width: usize,
    hidden: &[usize],
    output_width: usize,
    output_activation: Activation,
) -> Vec<LayerSpec> {
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(input_width);
    widths.extend_from_slice(hidden);
    widths.push(output_width);
    let last = widths.len() - 2;
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i == last {
                output_activation
            } else {
                Activation::Tanh
            };
            LayerSpec::new(w[0], w[1], act)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    spec: LayerSpec,
    /// `output_width × input_width`
    weights: Array2<f64>,
    biases: Array1<f64>,
}

impl Dense {
    pub fn spec(&self) -> LayerSpec {
        self.spec
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn biases(&self) -> &Array1<f64> {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut Array1<f64> {
        &mut self.biases
    }
}

/// Record of a forward pass: the input batch followed by every layer's
/// post-activation output. `tanh'` is recovered from the outputs, so
/// pre-activations are not kept.
#[derive(Clone, Debug)]
pub struct Tape {
    activations: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.activations[0].nrows()
    }

    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("tape always holds the input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
}

/// Partial derivatives of a scalar loss, shaped like a [`DenseNet`]'s parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    biases: Array1::zeros(l.biases.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<(), NnError> {
        self.check_congruent(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.biases += &b.biases;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.biases *= factor;
        }
    }

    /// Index of the first layer holding a NaN or infinity.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        self.layers.iter().position(|l| {
            l.weights.iter().any(|v| !v.is_finite()) || l.biases.iter().any(|v| !v.is_finite())
        })
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|&v| v == 0.0) && l.biases.iter().all(|&v| v == 0.0))
    }

    /// Flattened in declared order: per layer, weights row-major then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.biases.iter().copied());
        }
        out
    }

    fn check_congruent(&self, other: &Gradients) -> Result<(), NnError> {
        let same = self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.dim() == b.weights.dim() && a.biases.len() == b.biases.len()
            });
        if same {
            Ok(())
        } else {
            Err(NnError::Shape("gradient buffers are not congruent".into()))
        }
    }

    fn congruent_with(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.weights.dim() == l.weights.dim() && g.biases.len() == l.biases.len()
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    layers: Vec<Dense>,
}

impl DenseNet {
    /// All-zero parameters.
    pub fn zeros(specs: &[LayerSpec]) -> Result<Self, NnError> {
        validate_specs(specs)?;
        Ok(Self {
            layers: specs
                .iter()
                .map(|&spec| Dense {
                    spec,
                    weights: Array2::zeros((spec.output_width, spec.input_width)),
                    biases: Array1::zeros(spec.output_width),
                })
                .collect(),
        })
    }

    /// Glorot-uniform weights `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn xavier<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self, NnError> {
        let mut net = Self::zeros(specs)?;
        for layer in &mut net.layers {
            let bound =
                (6.0 / (layer.spec.input_width + layer.spec.output_width) as f64).sqrt();
            for w in layer.weights.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn from_layers(
        specs: &[LayerSpec],
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self, NnError> {
        validate_specs(specs)?;
        if weights.len() != specs.len() || biases.len() != specs.len() {
            return Err(NnError::Shape(format!(
                "{} layer specs but {} weight and {} bias arrays",
                specs.len(),
                weights.len(),
                biases.len()
            )));
        }
        let layers = specs
            .iter()
            .zip(weights.into_iter().zip(biases))
            .enumerate()
            .map(|(i, (&spec, (w, b)))| {
                if w.dim() != (spec.output_width, spec.input_width) || b.len() != spec.output_width
                {
                    return Err(NnError::Shape(format!(
                        "layer {i}: expected {}x{} weights, got {:?}",
                        spec.output_width,
                        spec.input_width,
                        w.dim()
                    )));
                }
                Ok(Dense {
                    spec,
                    weights: w.as_standard_layout().to_owned(),
                    biases: b,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].spec.input_width
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output_width
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.parameter_count()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().all(|v| v.is_finite()) && l.biases.iter().all(|v| v.is_finite()))
    }

    /// Parameters in declared order: per layer, weights row-major then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.biases.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.parameter_count() {
            return Err(NnError::Shape(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                params.len()
            )));
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            let (b, tail) = tail.split_at(l.biases.len());
            l.weights.iter_mut().zip(w).for_each(|(d, s)| *d = *s);
            l.biases.iter_mut().zip(b).for_each(|(d, s)| *d = *s);
            rest = tail;
        }
        Ok(())
    }

    /// Forward pass for one example.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape), NnError> {
        let batch = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| NnError::Shape(e.to_string()))?;
        let tape = self.forward_batch(batch)?;
        Ok((tape.output().row(0).to_vec(), tape))
    }

    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Tape, NnError> {
        self.check_input(inputs)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.to_owned());
        for layer in &self.layers {
            let prev = activations.last().expect("non-empty");
            activations.push(apply_layer(layer, prev.view()));
        }
        Ok(Tape { activations })
    }

    /// Forward pass that keeps only the final output.
    pub fn predict_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(inputs)?;
        let mut current = apply_layer(&self.layers[0], inputs);
        for layer in &self.layers[1..] {
            current = apply_layer(layer, current.view());
        }
        Ok(current)
    }

    /// Gradient of `Σ_b output_gradient[b] · output[b]` with respect to every
    /// parameter, summed over the batch.
    pub fn backward(&self, tape: &Tape, output_gradient: ArrayView2<f64>) -> Result<Gradients, NnError> {
        self.backward_impl(tape, output_gradient, false).map(|(g, _)| g)
    }

    /// As [`DenseNet::backward`], also returning the gradient with respect to the input batch.
    pub fn backward_with_input(
        &self,
        tape: &Tape,
        output_gradient: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>), NnError> {
        self.backward_impl(tape, output_gradient, true)
            .map(|(g, d)| (g, d.expect("input gradient requested")))
    }

    fn backward_impl(
        &self,
        tape: &Tape,
        output_gradient: ArrayView2<f64>,
        want_input: bool,
    ) -> Result<(Gradients, Option<Array2<f64>>), NnError> {
        self.check_tape(tape)?;
        let batch = tape.batch_size();
        if output_gradient.dim() != (batch, self.output_width()) {
            return Err(NnError::Shape(format!(
                "output gradient is {:?}, expected ({batch}, {})",
                output_gradient.dim(),
                self.output_width()
            )));
        }
        let mut grads: Vec<LayerGradient> = Vec::with_capacity(self.layers.len());
        let mut upstream = output_gradient.to_owned();
        let mut input_grad = None;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = &tape.activations[i + 1];
            let inp = &tape.activations[i];
            // dL/d(pre-activation)
            let mut delta = upstream;
            if layer.spec.activation != Activation::Identity {
                delta.zip_mut_with(out, |d, &y| *d *= layer.spec.activation.derivative_at_output(y));
            }
            let weights = delta.t().dot(inp);
            let biases = delta.sum_axis(Axis(0));
            grads.push(LayerGradient { weights, biases });
            if i > 0 || want_input {
                let next = delta.dot(&layer.weights);
                if i == 0 {
                    input_grad = Some(next);
                    upstream = Array2::zeros((0, 0));
                } else {
                    upstream = next;
                }
            } else {
                upstream = Array2::zeros((0, 0));
            }
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, input_grad))
    }

    fn check_input(&self, inputs: ArrayView2<f64>) -> Result<(), NnError> {
        if inputs.ncols() != self.input_width() {
            return Err(NnError::Shape(format!(
                "input width {} does not match network input width {}",
                inputs.ncols(),
                self.input_width()
            )));
        }
        Ok(())
    }

    fn check_tape(&self, tape: &Tape) -> Result<(), NnError> {
        let consistent = tape.activations.len() == self.layers.len() + 1
            && tape.activations[0].ncols() == self.input_width()
            && self
                .layers
                .iter()
                .zip(&tape.activations[1..])
                .all(|(l, a)| a.ncols() == l.spec.output_width && a.nrows() == tape.batch_size());
        if consistent {
            Ok(())
        } else {
            Err(NnError::Shape("tape does not belong to this network".into()))
        }
    }
}

fn validate_specs(specs: &[LayerSpec]) -> Result<(), NnError> {
    if specs.is_empty() {
        return Err(NnError::Shape("a network needs at least one layer".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.input_width == 0 || s.output_width == 0 {
            return Err(NnError::Shape(format!("layer {i} has a zero width")));
        }
    }
    for (i, pair) in specs.windows(2).enumerate() {
        if pair[0].output_width != pair[1].input_width {
            return Err(NnError::Shape(format!(
                "layer {i} outputs {} values but layer {} expects {}",
                pair[0].output_width,
                i + 1,
                pair[1].input_width
            )));
        }
    }
    Ok(())
}

fn apply_layer(layer: &Dense, input: ArrayView2<f64>) -> Array2<f64> {
    let mut out = input.dot(&layer.weights.t());
    out += &layer.biases;
    if layer.spec.activation != Activation::Identity {
        out.mapv_inplace(|v| layer.spec.activation.apply(v));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.epsilon.is_finite();
        if ok {
            Ok(())
        } else {
            Err(NnError::InvalidConfig(format!("{self:?}")))
        }
    }
}

/// Adam moments and step counter for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    pub first_moment: Gradients,
    pub second_moment: Gradients,
}

impl AdamState {
    pub fn new(config: AdamConfig, net: &DenseNet) -> Result<Self, NnError> {
        config.validate()?;
        Ok(Self {
            config,
            step_count: 0,
            first_moment: Gradients::zeros_like(net),
            second_moment: Gradients::zeros_like(net),
        })
    }

    /// One bias-corrected Adam update.
    ///
    /// An all-zero gradient buffer advances the moments and the step count
    /// but leaves the parameters untouched.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<(), NnError> {
        if !grads.congruent_with(net) || !self.first_moment.congruent_with(net) {
            return Err(NnError::Shape(
                "network, gradients and optimizer state are not congruent".into(),
            ));
        }
        if let Some(layer) = grads.first_non_finite_layer() {
            return Err(NnError::NonFiniteGradient { layer });
        }
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);
        let update_params = !grads.is_zero();

        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first_moment.layers)
            .zip(&mut self.second_moment.layers)
        {
            let pairs = [
                (
                    layer.weights.as_slice_mut().expect("standard layout"),
                    g.weights.as_slice().expect("standard layout"),
                    m.weights.as_slice_mut().expect("standard layout"),
                    v.weights.as_slice_mut().expect("standard layout"),
                ),
                (
                    layer.biases.as_slice_mut().expect("contiguous"),
                    g.biases.as_slice().expect("contiguous"),
                    m.biases.as_slice_mut().expect("contiguous"),
                    v.biases.as_slice_mut().expect("contiguous"),
                ),
            ];
            for (p, g, m, v) in pairs {
                for i in 0..p.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    if update_params {
                        let m_hat = m[i] / correct1;
                        let v_hat = v[i] / correct2;
                        p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

/// A scalar loss on a network's output vector together with its gradient.
pub trait OutputLoss {
    fn loss(&self, output: &[f64]) -> f64;
    fn gradient(&self, output: &[f64]) -> Vec<f64>;
}

/// `|a - n| / max(1, |a|, |n|)`: relative above unit magnitude, absolute below it.
pub fn relative_discrepancy(analytic: f64, numeric: f64) -> f64 {
    let scale = 1.0_f64.max(analytic.abs()).max(numeric.abs());
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_discrepancy: f64,
    /// Flat parameter index of the worst entry.
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic against numeric gradients entry by entry.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient vectors differ in length");
    let mut max = 0.0_f64;
    let mut worst = None;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let d = relative_discrepancy(a, n);
        // NaN must fail the check, so compare with a negated `<=`.
        if !(d <= max) {
            max = d;
            worst = Some(i);
        }
    }
    GradCheckReport {
        max_discrepancy: max,
        worst_index: worst,
        checked: analytic.len(),
        tolerance,
        passed: max <= tolerance,
    }
}

/// Central differences of `f` at `params`, perturbing one entry at a time.
pub fn central_differences<F>(params: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub const FINITE_DIFF_STEP: f64 = 1e-6;

/// Checks `backward` against central differences of `loss(forward(input))`.
pub fn finite_diff_check(
    net: &DenseNet,
    loss: &dyn OutputLoss,
    input: &[f64],
    tolerance: f64,
) -> Result<GradCheckReport, NnError> {
    let (output, tape) = net.forward(input)?;
    let grad_out = loss.gradient(&output);
    let grad_view = ArrayView2::from_shape((1, grad_out.len()), &grad_out)
        .map_err(|e| NnError::Shape(e.to_string()))?;
    let analytic = net.backward(&tape, grad_view)?.to_flat();

    let mut scratch = net.clone();
    let numeric = central_differences(&net.to_flat(), FINITE_DIFF_STEP, |p| {
        scratch.set_flat(p).expect("same parameter count");
        let (out, _) = scratch.forward(input).expect("shape checked above");
        loss.loss(&out)
    });
    Ok(compare_gradients(&analytic, &numeric, tolerance))
}
