//! Dense feed-forward network with reverse-mode gradients.
//!
//! Layers compute `z = x · W + b` with `W` stored as `(inputs, outputs)`.
//! Hidden layers apply leaky-ReLU and, in training mode, inverted dropout.
//! The last layer is linear and always 4 wide: the raw evidential head.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Width of the raw head: one output per Normal-Inverse-Gamma parameter.
pub const HEAD_WIDTH: usize = 4;

/// Negative-side slope of the hidden activation.
pub const LEAKY_SLOPE: f64 = 0.1;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[inline]
fn leaky_relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

#[inline]
fn leaky_relu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

/// L1 subgradient, zero at exactly zero.
#[inline]
fn sign0(w: f64) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Shape `(inputs, outputs)`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(Error::Dimension {
                context: "layer bias",
                expected: weights.ncols(),
                found: bias.len(),
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }
}

/// Multilayer perceptron ending in the 4-wide evidential head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    dropout: f64,
    l1: f64,
    l2: f64,
    generation: u64,
}

/// Activations recorded by [`Mlp::forward`] for a later [`Mlp::backward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// Input to each layer (post-dropout activations for layers > 0).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
    /// Scaled dropout masks of hidden layers (train mode only).
    masks: Vec<Option<Array2<f64>>>,
    generation: u64,
}

impl ForwardCache {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |x| x.nrows())
    }
}

/// Gradients mirroring the layer list.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(model: &Mlp) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite())
        })
    }
}

impl Mlp {
    /// Random initialization: hidden layers use He-uniform bounds
    /// `sqrt(6 / fan_in)`, the head `sqrt(1 / fan_in)`; biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        hidden: &[usize],
        dropout: f64,
        l1: f64,
        l2: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if inputs == 0 || hidden.contains(&0) {
            return Err(Error::usage("layer widths must be positive"));
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(inputs);
        widths.extend_from_slice(hidden);
        widths.push(HEAD_WIDTH);

        let n_layers = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = if i + 1 < n_layers {
                    (6.0 / fan_in as f64).sqrt()
                } else {
                    (1.0 / fan_in as f64).sqrt()
                };
                let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    rng.random_range(-limit..limit)
                });
                Layer::new(weights, Array1::zeros(fan_out)).expect("shapes chain")
            })
            .collect();
        Self::from_layers(layers, dropout, l1, l2)
    }

    pub fn from_layers(layers: Vec<Layer>, dropout: f64, l1: f64, l2: f64) -> Result<Self> {
        let last = layers
            .last()
            .ok_or_else(|| Error::usage("network needs at least one layer"))?;
        if last.outputs() != HEAD_WIDTH {
            return Err(Error::Dimension {
                context: "head width",
                expected: HEAD_WIDTH,
                found: last.outputs(),
            });
        }
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Dimension {
                    context: "layer chaining",
                    expected: pair[0].outputs(),
                    found: pair[1].inputs(),
                });
            }
        }
        for l in &layers {
            if l.weights.len() != l.inputs() * l.outputs() || l.bias.len() != l.outputs() {
                return Err(Error::usage("inconsistent layer buffers"));
            }
        }
        if !(0.0..=0.5).contains(&dropout) {
            return Err(Error::usage(format!("dropout {dropout} outside [0, 0.5]")));
        }
        if !(l1 >= 0.0 && l2 >= 0.0) {
            return Err(Error::usage("l1 and l2 weights must be non-negative"));
        }
        Ok(Self {
            layers,
            dropout,
            l1,
            l2,
            generation: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Layer::outputs)
            .collect()
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn l1(&self) -> f64 {
        self.l1
    }

    pub fn l2(&self) -> f64 {
        self.l2
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// `l1 · Σ|W| + l2 · ΣW²` over all weight matrices (biases excluded).
    pub fn penalty(&self) -> f64 {
        if self.l1 == 0.0 && self.l2 == 0.0 {
            return 0.0;
        }
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter())
            .map(|&w| self.l1 * w.abs() + self.l2 * w * w)
            .sum()
    }

    fn check_width(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_width() {
            return Err(Error::Dimension {
                context: "forward input",
                expected: self.input_width(),
                found: batch.ncols(),
            });
        }
        Ok(())
    }

    /// Inference pass without dropout. Safe to call concurrently.
    pub fn predict(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_width(&batch)?;
        let last = self.layers.len() - 1;
        let mut act = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = act.dot(&layer.weights) + &layer.bias;
            if i < last {
                z.mapv_inplace(leaky_relu);
            }
            act = z;
        }
        finite_or_err(&act)?;
        Ok(act)
    }

    /// Training-capable pass; dropout is drawn from `rng` only when `train` is set.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: ArrayView2<f64>,
        train: bool,
        rng: &mut R,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_width(&batch)?;
        let last = self.layers.len() - 1;
        let keep = 1.0 - self.dropout;
        let use_dropout = train && self.dropout > 0.0;

        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
            masks: Vec::with_capacity(last),
            generation: self.generation,
        };
        let mut act = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = act.dot(&layer.weights) + &layer.bias;
            cache.inputs.push(act);
            if i == last {
                act = z;
                break;
            }
            let mut h = z.mapv(leaky_relu);
            let mask = if use_dropout {
                let m = Array2::from_shape_simple_fn(h.raw_dim(), || {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                h *= &m;
                Some(m)
            } else {
                None
            };
            cache.pre.push(z);
            cache.masks.push(mask);
            act = h;
        }
        finite_or_err(&act)?;
        Ok((act, cache))
    }

    /// Backpropagates `upstream` (dLoss/dOutput, already scaled for the batch
    /// reduction) and adds the L1/L2 penalty gradients on the weights.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<Gradients> {
        if cache.is_empty() {
            return Err(Error::usage("backward called without a forward cache"));
        }
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(Error::usage(
                "stale forward cache: parameters changed since the forward pass",
            ));
        }
        if upstream.nrows() != cache.batch_size() {
            return Err(Error::Dimension {
                context: "upstream batch",
                expected: cache.batch_size(),
                found: upstream.nrows(),
            });
        }
        if upstream.ncols() != HEAD_WIDTH {
            return Err(Error::Dimension {
                context: "upstream width",
                expected: HEAD_WIDTH,
                found: upstream.ncols(),
            });
        }

        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let mut gw = cache.inputs[i].t().dot(&delta);
            if self.l1 != 0.0 || self.l2 != 0.0 {
                ndarray::Zip::from(&mut gw)
                    .and(&layer.weights)
                    .for_each(|g, &w| *g += self.l1 * sign0(w) + 2.0 * self.l2 * w);
            }
            let gb = delta.sum_axis(Axis(0));
            if i > 0 {
                let mut d = delta.dot(&layer.weights.t());
                if let Some(mask) = &cache.masks[i - 1] {
                    d *= mask;
                }
                ndarray::Zip::from(&mut d)
                    .and(&cache.pre[i - 1])
                    .for_each(|g, &z| *g *= leaky_relu_grad(z));
                delta = d;
            }
            grads.push(Layer {
                weights: gw,
                bias: gb,
            });
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }
}

fn finite_or_err(a: &Array2<f64>) -> Result<()> {
    if let Some(pos) = a.iter().position(|v| !v.is_finite()) {
        let row = pos / a.ncols().max(1);
        return Err(Error::NonFinite(format!("network output at row {row}")));
    }
    Ok(())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Layer>,
    second: Vec<Layer>,
}

impl Adam {
    pub fn new(model: &Mlp, learning_rate: f64) -> Self {
        let zeros = Gradients::zeros_like(model).layers;
        Self {
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update; `step` is the 1-based step count used for bias
    /// correction.
    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients, step: u64) -> Result<()> {
        if step == 0 {
            return Err(Error::usage("Adam step count is 1-based"));
        }
        if grads.layers.len() != model.layers.len() {
            return Err(Error::Dimension {
                context: "gradient layers",
                expected: model.layers.len(),
                found: grads.layers.len(),
            });
        }
        for (i, g) in grads.layers.iter().enumerate() {
            if g.weights.raw_dim() != model.layers[i].weights.raw_dim()
                || g.bias.len() != model.layers[i].bias.len()
            {
                return Err(Error::usage(format!("gradient shape mismatch at layer {i}")));
            }
            if g.weights.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of layer {i} weights")));
            }
            if g.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of layer {i} biases")));
            }
        }

        let t = step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.learning_rate);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };

        for (i, layer) in model.layers.iter_mut().enumerate() {
            let g = &grads.layers[i];
            ndarray::Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut self.first[i].weights)
                .and(&mut self.second[i].weights)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut self.first[i].bias)
                .and(&mut self.second[i].bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            if layer.weights.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameters of layer {i} after update")));
            }
        }
        model.generation += 1;
        Ok(())
    }
}
