//! Dense ReLU networks: inference, reverse-mode gradients, JSON weights and a
//! plain gradient-descent trainer.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "id")]
    Identity,
}

/// `y = W x + b` followed by the activation. `w` is row-major `rows x cols`,
/// so `cols` is the input width and `rows` the output width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub act: Activation,
}

impl Layer {
    pub fn weight(&self, r: usize, c: usize) -> f64 {
        self.w[r * self.cols + c]
    }

    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let row = &self.w[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b[r]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpNetwork {
    pub layers: Vec<Layer>,
}

/// Pre-activation bounds per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBounds {
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

impl LayerBounds {
    /// True if `self` lies inside `other` (up to `tol`) on every neuron.
    pub fn within(&self, other: &LayerBounds, tol: f64) -> bool {
        self.lower
            .iter()
            .zip(&other.lower)
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| *x >= y - tol))
            && self
                .upper
                .iter()
                .zip(&other.upper)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| *x <= y + tol))
    }
}

/// Values recorded by a forward pass; `pre[i]` and `post[i]` belong to layer i.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().map_or(&self.input, |v| v)
    }
}

/// Per-layer parameter gradients, laid out like the layers themselves.
#[derive(Clone, Debug)]
pub struct ParamGrad {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

impl MlpNetwork {
    /// Seeded network with uniform(±1/sqrt(fan_in)) weights and biases, ReLU
    /// hidden layers and an identity output layer.
    pub fn random(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidModel("need at least input and output widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (cols, rows) = (pair[0], pair[1]);
                let r = 1.0 / (cols.max(1) as f64).sqrt();
                Layer {
                    rows,
                    cols,
                    w: (0..rows * cols).map(|_| rng.gen_range(-r..=r)).collect(),
                    b: (0..rows).map(|_| rng.gen_range(-r..=r)).collect(),
                    act: if i == last {
                        Activation::Identity
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Ok(MlpNetwork { layers })
    }

    pub fn identity(n: usize) -> Self {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        MlpNetwork {
            layers: vec![Layer {
                rows: n,
                cols: n,
                w,
                b: vec![0.0; n],
                act: Activation::Identity,
            }],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Schema("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.w.len() != l.rows * l.cols || l.b.len() != l.rows {
                return Err(Error::Schema(format!(
                    "layer {i}: expected {}x{} weights and {} biases, got {} and {}",
                    l.rows,
                    l.cols,
                    l.rows,
                    l.w.len(),
                    l.b.len()
                )));
            }
            if i > 0 && self.layers[i - 1].rows != l.cols {
                return Err(Error::Schema(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.cols,
                    i - 1,
                    self.layers[i - 1].rows
                )));
            }
            if l.w.iter().chain(&l.b).any(|v| !v.is_finite()) {
                return Err(Error::Schema(format!("layer {i} has non-finite parameters")));
            }
        }
        if self.layers.last().unwrap().act != Activation::Identity {
            return Err(Error::Schema("output layer must use the identity activation".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "network takes {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.post.pop().unwrap_or_default())
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let y = l.affine(post.last().map_or(x, |v| v));
            let z = match l.act {
                Activation::Relu => y.iter().map(|v| v.max(0.0)).collect(),
                Activation::Identity => y.clone(),
            };
            pre.push(y);
            post.push(z);
        }
        Ok(ForwardTrace {
            input: x.to_vec(),
            pre,
            post,
        })
    }

    /// `J(x)^T cotangent`. The ReLU derivative at exactly zero is taken as 0.
    pub fn input_gradient(&self, x: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let trace = self.forward_trace(x)?;
        self.backward(&trace, cotangent, None)
    }

    /// Gradients of `cotangent . f(x)` with respect to all weights and biases.
    pub fn param_gradient(&self, x: &[f64], cotangent: &[f64]) -> Result<ParamGrad> {
        let trace = self.forward_trace(x)?;
        let mut g = ParamGrad {
            w: self.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: self.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        };
        self.backward(&trace, cotangent, Some(&mut g))?;
        Ok(g)
    }

    fn backward(
        &self,
        trace: &ForwardTrace,
        cotangent: &[f64],
        mut params: Option<&mut ParamGrad>,
    ) -> Result<Vec<f64>> {
        if cotangent.len() != self.output_dim() {
            return Err(Error::DimensionMismatch(format!(
                "cotangent has {} entries, network has {} outputs",
                cotangent.len(),
                self.output_dim()
            )));
        }
        let mut g = cotangent.to_vec();
        for (i, l) in self.layers.iter().enumerate().rev() {
            if l.act == Activation::Relu {
                for (gk, &y) in g.iter_mut().zip(&trace.pre[i]) {
                    if y <= 0.0 {
                        *gk = 0.0;
                    }
                }
            }
            let input = if i == 0 { &trace.input } else { &trace.post[i - 1] };
            if let Some(p) = params.as_deref_mut() {
                for r in 0..l.rows {
                    p.b[i][r] += g[r];
                    for c in 0..l.cols {
                        p.w[i][r * l.cols + c] += g[r] * input[c];
                    }
                }
            }
            let mut next = vec![0.0; l.cols];
            for r in 0..l.rows {
                if g[r] != 0.0 {
                    for (c, nc) in next.iter_mut().enumerate() {
                        *nc += l.weight(r, c) * g[r];
                    }
                }
            }
            g = next;
        }
        Ok(g)
    }

    pub fn apply_gradient(&mut self, grad: &ParamGrad, step: f64) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (w, d) in l.w.iter_mut().zip(&grad.w[i]) {
                *w -= step * d;
            }
            for (b, d) in l.b.iter_mut().zip(&grad.b[i]) {
                *b -= step * d;
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: MlpNetwork = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        net.validate()?;
        Ok(net)
    }

    pub fn save_weights(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load_weights(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Full-batch gradient descent. `loss` maps (input, output) to the sample
/// loss and its gradient with respect to the output. Returns the mean loss
/// before each epoch and once more after the last one.
pub fn toy_train<F>(net: &mut MlpNetwork, inputs: &[Vec<f64>], epochs: usize, lr: f64, loss: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &[f64]) -> Result<(f64, Vec<f64>)>,
{
    if inputs.is_empty() {
        return Err(Error::Precondition("training needs at least one sample".into()));
    }
    let n = inputs.len() as f64;
    let mut history = Vec::with_capacity(epochs + 1);
    for epoch in 0..=epochs {
        let mut total = 0.0;
        let mut grad = ParamGrad {
            w: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            b: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        };
        for x in inputs {
            let trace = net.forward_trace(x)?;
            let (value, cot) = loss(x, trace.output())?;
            total += value;
            if epoch < epochs {
                net.backward(&trace, &cot, Some(&mut grad))?;
            }
        }
        history.push(total / n);
        if epoch < epochs {
            net.apply_gradient(&grad, lr / n);
        }
    }
    Ok(history)
}
