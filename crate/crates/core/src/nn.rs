//! Parameterised layers assembled from tape ops.

use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};
use crate::graph::{Graph, Pointwise, Var};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// `c × h × w` map to `(h·w) × c` tokens; token `y·w + x` holds the channel
/// vector at `(y, x)`.
pub fn to_tokens(g: &mut Graph, map: Var) -> Result<Var> {
    let [c, h, w] = *g.dims(map) else {
        return Err(Error::contract("to_tokens", "expected a rank-3 map"));
    };
    let flat = g.reshape(map, &[c, h * w])?;
    g.transpose(flat)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(g: &mut Graph, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let [n, c] = *g.dims(tokens) else {
        return Err(Error::contract("from_tokens", "expected a rank-2 matrix"));
    };
    if n != h * w {
        return Err(Error::shape("from_tokens", &[h * w, c], &[n, c]));
    }
    let t = g.transpose(tokens)?;
    g.reshape(t, &[c, h, w])
}

/// `x · W (+ b)` with `W: in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            rng.fan_in_uniform(&[d_in, d_out], d_in),
        );
        let bias = with_bias
            .then(|| store.add(format!("{name}.bias"), rng.fan_in_uniform(&[d_out], d_in)));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.get(self.weight))?;
        match self.bias {
            Some(b) => g.add_bias(y, p.get(b)),
            None => Ok(y),
        }
    }
}

/// Same-padded convolution layer.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub dilation: (usize, usize),
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        dilation: (usize, usize),
        with_bias: bool,
    ) -> Self {
        let fan_in = c_in * kernel.0 * kernel.1;
        let weight = store.add(
            format!("{name}.weight"),
            rng.fan_in_uniform(&[c_out, c_in, kernel.0, kernel.1], fan_in),
        );
        let bias = with_bias
            .then(|| store.add(format!("{name}.bias"), rng.fan_in_uniform(&[c_out], fan_in)));
        Conv {
            weight,
            bias,
            dilation,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        g.conv2d(
            x,
            p.get(self.weight),
            self.bias.map(|b| p.get(b)),
            self.dilation,
        )
    }

    /// Overwrites the kernel with an identity map on the centre tap and
    /// clears the bias. Requires `c_in == c_out`.
    pub fn set_identity(&self, store: &mut ParamStore) {
        let w = store.get_mut(self.weight);
        let [o, i, kh, kw] = *w.dims() else {
            unreachable!()
        };
        let data = w.data_mut();
        data.fill(0.0);
        for c in 0..o.min(i) {
            data[((c * i + c) * kh + kh / 2) * kw + kw / 2] = 1.0;
        }
        if let Some(b) = self.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        g.layer_norm(x, p.get(self.gain), p.get(self.bias))
    }
}

/// Two affine layers with GELU between; hidden width `round(ratio · d)`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn hidden_width(d: usize, ratio: f64) -> Result<usize> {
        if ratio.is_nan() || ratio <= 0.0 {
            return Err(Error::config("mlp_ratio", "must be positive"));
        }
        Ok((libm::round(ratio * d as f64) as usize).max(1))
    }

    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        d: usize,
        ratio: f64,
    ) -> Result<Self> {
        let hidden = Self::hidden_width(d, ratio)?;
        Ok(Mlp {
            fc1: Linear::new(store, rng, &prefixed(name, "fc1"), d, hidden, true),
            fc2: Linear::new(store, rng, &prefixed(name, "fc2"), hidden, d, true),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.activate(h, Pointwise::Gelu);
        self.fc2.forward(g, p, h)
    }

    /// Zeroes the output layer so the block contributes nothing.
    pub fn zero_output(&self, store: &mut ParamStore) {
        store.get_mut(self.fc2.weight).data_mut().fill(0.0);
        if let Some(b) = self.fc2.bias {
            store.get_mut(b).data_mut().fill(0.0);
        }
    }
}

pub(crate) fn prefixed(name: &str, part: &str) -> String {
    format!("{name}.{part}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_round_trip() {
        let mut g = Graph::new();
        let data: alloc::vec::Vec<f64> = (0..24).map(|v| v as f64).collect();
        let m = g.leaf(Tensor::from_vec(&[2, 3, 4], data.clone()).unwrap());
        let t = to_tokens(&mut g, m).unwrap();
        assert_eq!(g.dims(t), &[12, 2]);
        // token (y=1, x=2) = index 6, channel 1 = 12 + 6
        assert_eq!(g.value(t).data()[6 * 2 + 1], 18.0);
        let back = from_tokens(&mut g, t, 3, 4).unwrap();
        assert_eq!(g.value(back).data(), &data[..]);
    }

    #[test]
    fn hidden_width_rounds() {
        assert_eq!(Mlp::hidden_width(4, 1.0).unwrap(), 4);
        assert_eq!(Mlp::hidden_width(3, 1.5).unwrap(), 5);
        assert!(Mlp::hidden_width(3, 0.0).is_err());
    }
}
