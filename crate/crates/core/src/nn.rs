//! Minimal dense networks with hand-written backpropagation.
//!
//! Every parameter is stored as a 2-D array (biases are `1 × n`) so a single
//! optimiser can walk them uniformly.

use ndarray::{Array2, Axis, Zip};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => z.clone(),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Tanh => z.mapv(f64::tanh),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => Array2::ones(z.raw_dim()),
            Activation::Relu => z.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Tanh => a.mapv(|v| 1.0 - v * v),
        }
    }
}

/// Fully connected layer computing `x Wᵀ + b` on row batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Dense {
    /// He/Glorot-style scaled normal initialisation.
    pub fn new(input: usize, output: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain / (input as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            weight: Array2::from_shape_fn((output, input), |_| normal.sample(rng)),
            bias: Array2::zeros((1, output)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// A stack of dense layers with a shared hidden activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
    /// Dropout rate applied after every hidden activation during training.
    pub dropout: f64,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

impl Mlp {
    /// `sizes` lists every width from input to output.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, dropout: f64, rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let n = sizes.len() - 1;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let gain = if i + 1 < n && hidden == Activation::Relu {
                    2f64.sqrt()
                } else {
                    1.0
                };
                Dense::new(w[0], w[1], gain, rng)
            })
            .collect();
        Self {
            layers,
            hidden,
            output,
            dropout,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Dense::output_dim).unwrap_or(0)
    }

    /// Inference pass, dropout off.
    pub fn predict(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward(x, None).0
    }

    /// Forward pass; passing an RNG enables dropout.
    pub fn forward(&self, x: &Array2<f64>, mut rng: Option<&mut Rng>) -> (Array2<f64>, MlpTrace) {
        let n = self.layers.len();
        let mut trace = MlpTrace {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            post: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            let act = if i + 1 == n { self.output } else { self.hidden };
            let a = act.apply(&z);
            let mask = match rng.as_deref_mut() {
                Some(r) if i + 1 < n && self.dropout > 0.0 => {
                    let keep = 1.0 - self.dropout;
                    Some(a.mapv(|_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 }))
                }
                _ => None,
            };
            trace.inputs.push(h);
            trace.pre.push(z);
            h = match &mask {
                Some(m) => &a * m,
                None => a.clone(),
            };
            trace.post.push(a);
            trace.masks.push(mask);
        }
        (h, trace)
    }

    /// Gradients of the parameters and of the input, given `d loss / d output`.
    pub fn backward(&self, trace: &MlpTrace, grad_out: &Array2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let n = self.layers.len();
        let mut grads = vec![Array2::zeros((0, 0)); 2 * n];
        let mut g = grad_out.clone();
        for i in (0..n).rev() {
            if let Some(m) = &trace.masks[i] {
                g = &g * m;
            }
            let act = if i + 1 == n { self.output } else { self.hidden };
            let dz = &g * &act.derivative(&trace.pre[i], &trace.post[i]);
            grads[2 * i] = dz.t().dot(&trace.inputs[i]);
            grads[2 * i + 1] = dz.sum_axis(Axis(0)).insert_axis(Axis(0));
            g = dz.dot(&self.layers[i].weight);
        }
        (grads, g)
    }

    pub fn params(&self) -> Vec<&Array2<f64>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Array2<f64>>, grads: &[Array2<f64>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Array2::zeros(g.raw_dim())).collect();
            self.v = grads.iter().map(|g| Array2::zeros(g.raw_dim())).collect();
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.eps);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Numerically stable `log(1 + exp(z))`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
