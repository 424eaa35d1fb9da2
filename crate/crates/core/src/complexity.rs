//! Attention cost model for applying self-attention across a pyramid, in
//! multiply-accumulates (one formula unit = one MAC).
//!
//! Per level with `n` tokens of width `c`, one attention layer costs
//! `4·n·c²` for the query/key/value/output projections plus `2·n²·c` for the
//! score and weighted-value products:
//!
//! * primitive (`p`): `n = h·w`
//! * strided (`s`):   `n = ⌊h·w / s²⌋` after subsampling by stride `s`
//! * decoupled (`d`): one attention over the `h` row tokens and one over the
//!   `w` column tokens, `4(h + w)c² + 2(h² + w²)c`
//!
//! Head count does not enter: splitting `c` across heads leaves both terms
//! unchanged. [`measured_macs`] runs the same sections through the real
//! attention layer with MAC counting enabled.

use alloc::vec::Vec;

use crate::arf::AttentionActivation;
use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::rng::SeededRng;

/// Default strides bringing levels 2..5 down to the size of level 5.
pub const DEFAULT_STRIDES: [usize; 4] = [8, 4, 2, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelDims {
    pub h: u64,
    pub w: u64,
    pub c: u64,
    /// Subsampling stride used by the strided variant.
    pub s: u64,
}

impl LevelDims {
    pub fn new(h: u64, w: u64, c: u64, s: u64) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 || s == 0 {
            return Err(Error::config(
                "flops.levels",
                "h, w, c and s must be positive",
            ));
        }
        Ok(LevelDims { h, w, c, s })
    }

    /// Levels 2..5 of an `input_h × input_w` image: `h_i = ⌈H / 2^i⌉`.
    pub fn pyramid(input_h: u64, input_w: u64, c: u64, strides: &[usize; 4]) -> Vec<LevelDims> {
        (2..=5)
            .zip(strides)
            .map(|(i, &s)| LevelDims {
                h: input_h.div_ceil(1 << i),
                w: input_w.div_ceil(1 << i),
                c,
                s: s as u64,
            })
            .collect()
    }

    fn strided_tokens(&self) -> u64 {
        self.h * self.w / (self.s * self.s)
    }
}

fn attention_cost(tokens: u64, c: u64) -> u64 {
    4 * tokens * c * c + 2 * tokens * tokens * c
}

pub fn level_p_msa(d: &LevelDims) -> u64 {
    attention_cost(d.h * d.w, d.c)
}

/// `h·w` not divisible by `s²` is rounded down.
pub fn level_s_msa(d: &LevelDims) -> u64 {
    attention_cost(d.strided_tokens(), d.c)
}

pub fn level_d_msa(d: &LevelDims) -> u64 {
    4 * (d.h + d.w) * d.c * d.c + 2 * (d.h * d.h + d.w * d.w) * d.c
}

pub fn flops_p_msa(dims: &[LevelDims]) -> u64 {
    dims.iter().map(level_p_msa).sum()
}

pub fn flops_s_msa(dims: &[LevelDims]) -> u64 {
    dims.iter().map(level_s_msa).sum()
}

pub fn flops_d_msa(dims: &[LevelDims]) -> u64 {
    dims.iter().map(level_d_msa).sum()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelFlops {
    pub level: usize,
    pub dims: LevelDims,
    pub p_msa: u64,
    pub s_msa: u64,
    pub d_msa: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopsTable {
    pub levels: Vec<LevelFlops>,
    pub total_p_msa: u64,
    pub total_s_msa: u64,
    pub total_d_msa: u64,
}

impl FlopsTable {
    /// Levels are numbered from `first_level` upwards.
    pub fn new(first_level: usize, dims: &[LevelDims]) -> Self {
        let levels = dims
            .iter()
            .enumerate()
            .map(|(k, d)| LevelFlops {
                level: first_level + k,
                dims: *d,
                p_msa: level_p_msa(d),
                s_msa: level_s_msa(d),
                d_msa: level_d_msa(d),
            })
            .collect();
        FlopsTable {
            levels,
            total_p_msa: flops_p_msa(dims),
            total_s_msa: flops_s_msa(dims),
            total_d_msa: flops_d_msa(dims),
        }
    }

    /// `d < s < p` on the totals.
    pub fn ordering_holds(&self) -> bool {
        self.total_d_msa < self.total_s_msa && self.total_s_msa < self.total_p_msa
    }
}

/// Attention-core section to instrument.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    /// Self-attention over all `h·w` tokens of each level.
    PrimitiveMsa,
    /// Self-attention after nearest subsampling by the level stride.
    StridedMsa,
    /// Separate self-attention over row tokens and over column tokens.
    DecoupledMsa,
}

/// Runs `section` for every level of `dims` on `graph` and returns the
/// number of multiply-accumulates spent in projections and attention
/// products. `graph` must have been created with
/// [`Graph::with_mac_counter`]. An empty `dims` costs nothing.
pub fn measured_macs(
    graph: &mut Graph,
    section: Section,
    dims: &[LevelDims],
    heads: usize,
) -> Result<u64> {
    let before = graph.macs()?;
    let mut rng = SeededRng::new(0x5eed);
    for (k, d) in dims.iter().enumerate() {
        let (h, w, c) = (d.h as usize, d.w as usize, d.c as usize);
        let mut store = ParamStore::new();
        let attn = AttentionWeights::new(&mut store, &mut rng, "attn", c, heads)?;
        let p = store.bind(graph);
        let map = graph.leaf(rng.normal_tensor(&[c, h, w]));
        let self_attend = |g: &mut Graph, tokens: Var| {
            attn.attend(g, &p, &[tokens], &[tokens], AttentionActivation::Softmax)
        };
        match section {
            Section::PrimitiveMsa => {
                let t = crate::nn::to_tokens(graph, map)?;
                self_attend(graph, t)?;
            }
            Section::StridedMsa => {
                if d.h % d.s != 0 || d.w % d.s != 0 {
                    return Err(Error::contract(
                        "measured_macs",
                        alloc::format!("level {k}: stride {} must divide {}x{}", d.s, d.h, d.w),
                    ));
                }
                let sub = graph.downsample(map, d.s as usize)?;
                let t = crate::nn::to_tokens(graph, sub)?;
                self_attend(graph, t)?;
            }
            Section::DecoupledMsa => {
                // mean pooling stands in for the learned decoupler; it has no
                // matrix products and does not touch the count
                let rows = graph.sum_last(map);
                let rows = graph.reshape(rows, &[c, h])?;
                let rows = graph.transpose(rows)?;
                self_attend(graph, rows)?;
                let t = graph.transpose(map)?;
                let cols = graph.sum_last(t);
                let cols = graph.reshape(cols, &[c, w])?;
                let cols = graph.transpose(cols)?;
                self_attend(graph, cols)?;
            }
        }
    }
    Ok(graph.macs()? - before)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(h: u64, w: u64, c: u64, s: u64) -> LevelDims {
        LevelDims::new(h, w, c, s).unwrap()
    }

    #[test]
    fn hand_evaluated_cases() {
        assert_eq!(flops_p_msa(&[dims(2, 2, 4, 1)]), 384);
        assert_eq!(flops_p_msa(&[dims(1, 1, 1, 1)]), 6);
        assert_eq!(flops_s_msa(&[dims(4, 4, 2, 2)]), 128);
        assert_eq!(flops_d_msa(&[dims(2, 2, 4, 1)]), 320);
        assert_eq!(flops_d_msa(&[dims(1, 1, 1, 1)]), 12);
    }

    #[test]
    fn additivity_and_symmetry() {
        let a = dims(3, 5, 7, 1);
        assert_eq!(flops_p_msa(&[a, a]), 2 * flops_p_msa(&[a]));
        assert_eq!(
            flops_d_msa(&[dims(3, 9, 4, 1)]),
            flops_d_msa(&[dims(9, 3, 4, 1)])
        );
        // doubling c quadruples the projection term
        let one = dims(4, 4, 2, 2);
        let two = dims(4, 4, 4, 2);
        let tokens = 4;
        assert_eq!(
            level_s_msa(&two) - 2 * tokens * tokens * 4,
            4 * (level_s_msa(&one) - 2 * tokens * tokens * 2)
        );
    }

    #[test]
    fn strided_rounds_down() {
        assert_eq!(dims(5, 5, 1, 2).strided_tokens(), 6);
    }

    #[test]
    fn coco_scale_dims() {
        let d = LevelDims::pyramid(800, 1344, 256, &DEFAULT_STRIDES);
        let hw: Vec<(u64, u64)> = d.iter().map(|l| (l.h, l.w)).collect();
        assert_eq!(hw, [(200, 336), (100, 168), (50, 84), (25, 42)]);
        assert!(FlopsTable::new(2, &d).ordering_holds());
    }

    #[test]
    fn counter_required() {
        let mut g = Graph::new();
        let err = measured_macs(&mut g, Section::PrimitiveMsa, &[dims(2, 2, 4, 1)], 1);
        assert!(matches!(err, Err(Error::Unsupported(_))));
        let mut g = Graph::with_mac_counter();
        assert_eq!(
            measured_macs(&mut g, Section::DecoupledMsa, &[], 1).unwrap(),
            0
        );
    }
}
