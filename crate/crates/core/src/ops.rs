//! Eager entry points for the core kernels.
//!
//! Each function evaluates a single tape op on a scratch graph, so the eager
//! and differentiable paths share one implementation.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Pointwise};
use crate::rng::SeededRng;
use crate::tensor::{FeatureMap, Tensor, TokenMatrix};

/// Convolution kernel `(out_c, in_c, kh, kw)` with optional per-output bias.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelWeights {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl KernelWeights {
    pub fn new(weight: Tensor) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::contract("kernel_weights", "expected rank-4 weight"));
        }
        Ok(KernelWeights { weight, bias: None })
    }

    pub fn with_bias(mut self, bias: Tensor) -> Self {
        self.bias = Some(bias);
        self
    }

    /// `(out_c, in_c, kh, kw)`
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let d = self.weight.dims();
        (d[0], d[1], d[2], d[3])
    }

    /// Span covered by the kernel at `dilation`, per axis.
    pub fn receptive_extent(&self, dilation: (usize, usize)) -> (usize, usize) {
        let (_, _, kh, kw) = self.shape();
        ((kh - 1) * dilation.0 + 1, (kw - 1) * dilation.1 + 1)
    }
}

pub fn conv2d(
    input: &FeatureMap,
    weights: &KernelWeights,
    dilation: (usize, usize),
) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let x = g.leaf(input.tensor().clone());
    let w = g.leaf(weights.weight.clone());
    let b = weights.bias.as_ref().map(|b| g.leaf(b.clone()));
    let y = g.conv2d(x, w, b, dilation)?;
    FeatureMap::from_tensor(g.value(y).clone())
}

/// Per-token normalization (variance epsilon `1e-5`) then affine.
pub fn layer_norm(input: &TokenMatrix, gain: &[f64], bias: &[f64]) -> Result<TokenMatrix> {
    let (_, d) = input.shape();
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape(
            "layer_norm",
            &[d, d],
            &[gain.len(), bias.len()],
        ));
    }
    let mut g = Graph::new();
    let x = g.leaf(input.tensor().clone());
    let gv = g.leaf(Tensor::from_vec(&[d], gain.to_vec())?);
    let bv = g.leaf(Tensor::from_vec(&[d], bias.to_vec())?);
    let y = g.layer_norm(x, gv, bv)?;
    TokenMatrix::from_tensor(g.value(y).clone())
}

pub fn softmax_rows(scores: &TokenMatrix) -> TokenMatrix {
    let mut g = Graph::new();
    let x = g.leaf(scores.tensor().clone());
    let y = g.softmax(x);
    TokenMatrix::from_tensor(g.value(y).clone()).expect("rank preserved")
}

/// Weights of a two-layer perceptron: `GELU(x·W1 + b1)·W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpWeights {
    /// Fan-in uniform init for embedding width `d`.
    pub fn init(d: usize, hidden_ratio: f64, rng: &mut SeededRng) -> Result<Self> {
        let hidden = crate::nn::Mlp::hidden_width(d, hidden_ratio)?;
        Ok(MlpWeights {
            w1: rng.fan_in_uniform(&[d, hidden], d),
            b1: rng.fan_in_uniform(&[hidden], d),
            w2: rng.fan_in_uniform(&[hidden, d], hidden),
            b2: rng.fan_in_uniform(&[d], hidden),
        })
    }

    pub fn zeros(d: usize, hidden: usize) -> Self {
        MlpWeights {
            w1: Tensor::zeros(&[d, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w1.dims()[1]
    }
}

pub fn mlp(input: &TokenMatrix, weights: &MlpWeights) -> Result<TokenMatrix> {
    let mut g = Graph::new();
    let x = g.leaf(input.tensor().clone());
    let [w1, b1, w2, b2] =
        [&weights.w1, &weights.b1, &weights.w2, &weights.b2].map(|t| g.leaf(t.clone()));
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.activate(h, Pointwise::Gelu);
    let y = g.matmul(h, w2)?;
    let y = g.add_bias(y, b2)?;
    TokenMatrix::from_tensor(g.value(y).clone())
}

/// Identity `(c, c, kh, kw)` kernel (unit centre tap per channel).
pub fn identity_kernel(c: usize, kh: usize, kw: usize) -> KernelWeights {
    let mut data = alloc::vec![0.0; c * c * kh * kw];
    for ch in 0..c {
        data[((ch * c + ch) * kh + kh / 2) * kw + kw / 2] = 1.0;
    }
    KernelWeights {
        weight: Tensor::from_vec(&[c, c, kh, kw], data).expect("valid dims"),
        bias: None,
    }
}

pub(crate) fn identity_matrix(n: usize) -> Tensor {
    let mut data: Vec<f64> = alloc::vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
    }
    Tensor::from_vec(&[n, n], data).expect("valid dims")
}
