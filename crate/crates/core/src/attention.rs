//! Multi-head attention over token matrices with a pluggable score
//! activation.
//!
//! Queries and key/value sources are separate so the same layer serves plain
//! self-attention, the multi-receptive variant (one query state against
//! several key/value states) and cross-level attention (each level's queries
//! against the tokens of every level). Projections are bias-free.

use alloc::vec::Vec;

use crate::arf::AttentionActivation;
use crate::error::{Error, Result};
use crate::graph::{Graph, Pointwise, Var};
use crate::nn::prefixed;
use crate::params::{Bindings, ParamId, ParamStore};
use crate::rng::SeededRng;

/// Per-head projections `w_q, w_k, w_v` (stored side by side as `dim × dim`
/// matrices, head `d` owning columns `d·dim/heads ..`) and the output
/// projection `w_o`.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub dim: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionWeights {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        let mut mat =
            |part: &str| store.add(prefixed(name, part), rng.fan_in_uniform(&[dim, dim], dim));
        let (wq, wk, wv, wo) = (mat("wq"), mat("wk"), mat("wv"), mat("wo"));
        Ok(AttentionWeights {
            dim,
            heads,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Zeroes the output projection so the layer outputs zeros.
    pub fn zero_output(&self, store: &mut ParamStore) {
        store.get_mut(self.wo).data_mut().fill(0.0);
    }

    /// Sets all four projections to the identity.
    pub fn set_identity(&self, store: &mut ParamStore) {
        for id in [self.wq, self.wk, self.wv, self.wo] {
            *store.get_mut(id) = crate::ops::identity_matrix(self.dim);
        }
    }

    /// Attends every query matrix in `queries` over the row-concatenation of
    /// `sources`. Keys and values are projected once and shared. Returns one
    /// output per query matrix, shaped like that query.
    pub fn attend(
        &self,
        g: &mut Graph,
        p: &Bindings,
        queries: &[Var],
        sources: &[Var],
        activation: AttentionActivation,
    ) -> Result<Vec<Var>> {
        for &v in queries.iter().chain(sources) {
            match g.dims(v) {
                [_, d] if *d == self.dim => {}
                d => {
                    let got = d.to_vec();
                    return Err(Error::shape("attention", &[0, self.dim], &got));
                }
            }
        }
        if sources.is_empty() || queries.is_empty() {
            return Err(Error::contract("attention", "no query or key/value tokens"));
        }
        let kv = if sources.len() == 1 {
            sources[0]
        } else {
            g.concat_rows(sources)?
        };
        let k = g.matmul(kv, p.get(self.wk))?;
        let v = g.matmul(kv, p.get(self.wv))?;
        let dh = self.head_dim();
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut k_heads = Vec::with_capacity(self.heads);
        let mut v_heads = Vec::with_capacity(self.heads);
        for d in 0..self.heads {
            let kd = if self.heads == 1 {
                k
            } else {
                g.slice_cols(k, d * dh, dh)?
            };
            k_heads.push(g.transpose(kd)?);
            v_heads.push(if self.heads == 1 {
                v
            } else {
                g.slice_cols(v, d * dh, dh)?
            });
        }
        let mut outputs = Vec::with_capacity(queries.len());
        for &qs in queries {
            let q = g.matmul(qs, p.get(self.wq))?;
            let mut heads = Vec::with_capacity(self.heads);
            for d in 0..self.heads {
                let qd = if self.heads == 1 {
                    q
                } else {
                    g.slice_cols(q, d * dh, dh)?
                };
                let scores = g.matmul(qd, k_heads[d])?;
                let scores = g.scale(scores, scale);
                let weights = match activation {
                    AttentionActivation::Softmax => g.softmax(scores),
                    AttentionActivation::Tanh => g.activate(scores, Pointwise::Tanh),
                    AttentionActivation::Arf(a) => g.activate(scores, Pointwise::Arf(a.tau())),
                };
                heads.push(g.matmul(weights, v_heads[d])?);
            }
            let merged = if self.heads == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            };
            outputs.push(g.matmul(merged, p.get(self.wo))?);
        }
        Ok(outputs)
    }
}

pub(crate) fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::config(
            "heads",
            alloc::format!("{heads} heads do not divide embedding width {dim}"),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(0);
        assert!(AttentionWeights::new(&mut store, &mut rng, "a", 6, 4)
            .unwrap_err()
            .is_config());
        assert!(AttentionWeights::new(&mut store, &mut rng, "a", 6, 0).is_err());
        assert_eq!(
            AttentionWeights::new(&mut store, &mut rng, "a", 8, 4)
                .unwrap()
                .head_dim(),
            2
        );
    }

    #[test]
    fn single_token_identity_softmax_returns_value() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(1);
        let attn = AttentionWeights::new(&mut store, &mut rng, "a", 4, 2).unwrap();
        attn.set_identity(&mut store);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let tok = g.leaf(Tensor::from_vec(&[1, 4], alloc::vec![0.5, -2.0, 3.0, 1.0]).unwrap());
        let out = attn
            .attend(&mut g, &p, &[tok], &[tok], AttentionActivation::Softmax)
            .unwrap();
        assert_eq!(g.value(out[0]).data(), g.value(tok).data());
    }

    #[test]
    fn rejects_width_mismatch() {
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(1);
        let attn = AttentionWeights::new(&mut store, &mut rng, "a", 4, 1).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let a = g.leaf(Tensor::zeros(&[2, 4]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let err = attn
            .attend(&mut g, &p, &[a], &[a, b], AttentionActivation::Softmax)
            .unwrap_err();
        assert!(matches!(
            err,
            Error::ShapeMismatch {
                op: "attention",
                ..
            }
        ));
    }
}
