#![allow(dead_code)]

use sdtp_core::attention::AttentionWeights;
use sdtp_core::{AttentionActivation, ParamStore, Tensor, TokenMatrix};

/// Brute-force multi-head attention of `queries` over `sources`.
pub fn attention_oracle(
    queries: &[Vec<f64>],
    sources: &[Vec<f64>],
    w: &AttentionWeights,
    store: &ParamStore,
    act: AttentionActivation,
) -> Vec<Vec<f64>> {
    let c = w.dim;
    let dh = c / w.heads;
    let proj = |t: &[f64], m: &Tensor| -> Vec<f64> {
        (0..c)
            .map(|j| (0..c).map(|i| t[i] * m.data()[i * c + j]).sum())
            .collect()
    };
    let keys: Vec<Vec<f64>> = sources.iter().map(|s| proj(s, store.get(w.wk))).collect();
    let vals: Vec<Vec<f64>> = sources.iter().map(|s| proj(s, store.get(w.wv))).collect();
    queries
        .iter()
        .map(|q| {
            let q = proj(q, store.get(w.wq));
            let mut merged = vec![0.0; c];
            for d in 0..w.heads {
                let r = d * dh..(d + 1) * dh;
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|k| r.clone().map(|i| q[i] * k[i]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let weights: Vec<f64> = match act {
                    AttentionActivation::Softmax => {
                        let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        e.iter().map(|v| v / z).collect()
                    }
                    AttentionActivation::Tanh => scores.iter().map(|s| s.tanh()).collect(),
                    AttentionActivation::Arf(p) => scores
                        .iter()
                        .map(|&s| sdtp_core::arf::refine(s, p.tau()))
                        .collect(),
                };
                for i in r {
                    merged[i] = weights.iter().zip(&vals).map(|(a, v)| a * v[i]).sum();
                }
            }
            proj(&merged, store.get(w.wo))
        })
        .collect()
}

pub fn rows(t: &TokenMatrix) -> Vec<Vec<f64>> {
    (0..t.shape().0).map(|r| t.row(r).to_vec()).collect()
}

pub fn close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) -> bool {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .all(|(x, y)| (x - y).abs() < tol)
}
