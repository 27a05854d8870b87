//! Toy networks with named, prunable weights.
//!
//! Weight layout is `[out × in]`, so a linear layer computes `x·Wᵀ` and an
//! `R×1` block spans `R` consecutive output units of one input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("model expects {expected} input columns, got {got}")]
    InputWidth { expected: usize, got: usize },
    #[error("token {token} out of range for vocabulary {vocab}")]
    Token { token: f64, vocab: usize },
    #[error("model has {expected} parameters, {got} weights were bound")]
    Binding { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// A named trainable tensor with its gradient accumulator and EMA shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub ema: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        let ema = value.clone();
        Self {
            name: name.into(),
            value,
            grad,
            ema,
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.value.shape().len() == 2
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// `dims = [input, hidden…, classes]`, ReLU between layers.
    Mlp { dims: Vec<usize> },
    /// Stacked LSTM cells over one-hot tokens, a linear projection of the
    /// last hidden state, and an output layer.
    Lstm {
        vocab: usize,
        hidden: usize,
        projection: usize,
        layers: usize,
        classes: usize,
    },
}

impl Architecture {
    pub fn classes(&self) -> usize {
        match self {
            Self::Mlp { dims } => *dims.last().unwrap_or(&0),
            Self::Lstm { classes, .. } => *classes,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Mlp { .. } => "mlp",
            Self::Lstm { .. } => "lstm",
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        match self {
            Self::Mlp { dims } => {
                if dims.len() < 2 || dims.contains(&0) {
                    return Err(ModelError::Architecture(format!("mlp dims {dims:?}")));
                }
            }
            Self::Lstm {
                vocab,
                hidden,
                projection,
                layers,
                classes,
            } => {
                if [*vocab, *hidden, *projection, *layers, *classes].contains(&0) {
                    return Err(ModelError::Architecture(format!("{self:?}")));
                }
            }
        }
        if self.classes() < 2 {
            return Err(ModelError::Architecture("need at least 2 classes".into()));
        }
        Ok(())
    }
}

/// A toy network: architecture plus its parameters in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub params: Vec<Parameter>,
    /// 2-D weights with fewer elements than this are never pruned.
    pub min_prunable_elements: usize,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

impl Network {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        match &arch {
            Architecture::Mlp { dims } => {
                for (i, pair) in dims.windows(2).enumerate() {
                    params.push(Parameter::new(format!("fc{i}.w"), glorot(&mut rng, pair[1], pair[0])));
                    params.push(Parameter::new(format!("fc{i}.b"), Tensor::zeros(&[pair[1]])));
                }
            }
            &Architecture::Lstm {
                vocab,
                hidden,
                projection,
                layers,
                classes,
            } => {
                for l in 0..layers {
                    let input = if l == 0 { vocab } else { hidden };
                    let w = glorot(&mut rng, 4 * hidden, input + hidden);
                    let mut b = Tensor::zeros(&[4 * hidden]);
                    // forget gate starts open
                    b.data_mut()[hidden..2 * hidden].fill(1.0);
                    params.push(Parameter::new(format!("lstm{l}.w"), w));
                    params.push(Parameter::new(format!("lstm{l}.b"), b));
                }
                params.push(Parameter::new("proj.w", glorot(&mut rng, projection, hidden)));
                params.push(Parameter::new("out.w", glorot(&mut rng, classes, projection)));
                params.push(Parameter::new("out.b", Tensor::zeros(&[classes])));
            }
        }
        Ok(Self {
            arch,
            params,
            min_prunable_elements: 0,
        })
    }

    pub fn mlp(dims: &[usize], seed: u64) -> Result<Self, ModelError> {
        Self::new(Architecture::Mlp { dims: dims.to_vec() }, seed)
    }

    pub fn lstm(vocab: usize, hidden: usize, projection: usize, classes: usize, seed: u64) -> Result<Self, ModelError> {
        Self::new(
            Architecture::Lstm {
                vocab,
                hidden,
                projection,
                layers: 1,
                classes,
            },
            seed,
        )
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn is_prunable(&self, index: usize) -> bool {
        let p = &self.params[index];
        p.is_matrix() && p.len() >= self.min_prunable_elements
    }

    pub fn prunable_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.is_prunable(i)).collect()
    }

    pub fn prunable_names(&self) -> Vec<&str> {
        self.prunable_indices()
            .into_iter()
            .map(|i| self.params[i].name.as_str())
            .collect()
    }

    /// `(name, element count)` of every prunable weight.
    pub fn prunable_sizes(&self) -> Vec<(&str, usize)> {
        self.prunable_indices()
            .into_iter()
            .map(|i| (self.params[i].name.as_str(), self.params[i].len()))
            .collect()
    }

    pub fn input_width(&self) -> Option<usize> {
        match &self.arch {
            Architecture::Mlp { dims } => Some(dims[0]),
            Architecture::Lstm { .. } => None,
        }
    }

    /// Logits `[batch × classes]`. `weights[i]` is the graph node standing
    /// in for `params[i]`.
    pub fn forward(&self, g: &mut Graph, weights: &[NodeId], inputs: &Tensor) -> Result<NodeId, ModelError> {
        if weights.len() != self.params.len() {
            return Err(ModelError::Binding {
                expected: self.params.len(),
                got: weights.len(),
            });
        }
        let (batch, width) = inputs
            .dims2("forward")
            .map_err(AutodiffError::from)?;
        match &self.arch {
            Architecture::Mlp { dims } => {
                if width != dims[0] {
                    return Err(ModelError::InputWidth {
                        expected: dims[0],
                        got: width,
                    });
                }
                let mut x = g.constant(inputs.clone());
                let layers = dims.len() - 1;
                for l in 0..layers {
                    let z = g.matmul_nt(x, weights[2 * l])?;
                    let z = g.add_bias(z, weights[2 * l + 1])?;
                    x = if l + 1 < layers { g.relu(z)? } else { z };
                }
                Ok(x)
            }
            &Architecture::Lstm {
                vocab,
                hidden,
                layers,
                ..
            } => {
                let mut steps = Vec::with_capacity(width);
                for t in 0..width {
                    let mut onehot = Tensor::zeros(&[batch, vocab]);
                    for b in 0..batch {
                        let token = inputs.data()[b * width + t];
                        if !(token >= 0.0 && (token as usize) < vocab && token.fract() == 0.0) {
                            return Err(ModelError::Token { token, vocab });
                        }
                        onehot.data_mut()[b * vocab + token as usize] = 1.0;
                    }
                    steps.push(g.constant(onehot));
                }
                for l in 0..layers {
                    let (w, b) = (weights[2 * l], weights[2 * l + 1]);
                    let mut h = g.constant(Tensor::zeros(&[batch, hidden]));
                    let mut c = g.constant(Tensor::zeros(&[batch, hidden]));
                    for x in steps.iter_mut() {
                        (h, c) = lstm_cell(g, *x, h, c, w, b, hidden)?;
                        *x = h;
                    }
                }
                let last = *steps.last().expect("width checked by dims2");
                let base = 2 * layers;
                let p = g.matmul_nt(last, weights[base])?;
                let z = g.matmul_nt(p, weights[base + 1])?;
                Ok(g.add_bias(z, weights[base + 2])?)
            }
        }
    }
}

/// One LSTM step with the packed gate matrix `w: [4H × (in + H)]`, gate
/// order input, forget, cell, output.
pub fn lstm_cell(
    g: &mut Graph,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    w: NodeId,
    b: NodeId,
    hidden: usize,
) -> Result<(NodeId, NodeId), AutodiffError> {
    let xh = g.concat_cols(x, h)?;
    let gates = g.matmul_nt(xh, w)?;
    let gates = g.add_bias(gates, b)?;
    let i = g.slice_cols(gates, 0, hidden)?;
    let f = g.slice_cols(gates, hidden, hidden)?;
    let u = g.slice_cols(gates, 2 * hidden, hidden)?;
    let o = g.slice_cols(gates, 3 * hidden, hidden)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let u = g.tanh(u)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, c)?;
    let write = g.mul(i, u)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next)?;
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}
