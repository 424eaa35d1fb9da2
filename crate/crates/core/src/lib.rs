//! Scale-decoupled transformer pyramid: feature-pyramid neck with intra-level
//! promotion (ISP) on the top level and cross-level decoupled interaction
//! (CDI) across all levels, built on a small reverse-mode autodiff tape.
//!
//! The crate is `no_std` (it needs `alloc`). Everything runs in `f64`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod arf;
pub mod attention;
pub mod cdi;
pub mod complexity;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod isp;
mod kernels;
pub mod nn;
pub mod ops;
pub mod params;
pub mod pyramid;
pub mod rng;
pub mod tensor;
pub mod train;

pub use arf::{ArfParams, AttentionActivation};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Pointwise, Var};
pub use params::{Bindings, ParamId, ParamStore};
pub use pyramid::{
    build_variant, cross_level_sensitivity, sdtp_forward, sensitivity_from, FeaturePyramid,
    Pipeline, PipelineConfig, PyramidShape, Variant,
};
pub use rng::SeededRng;
pub use tensor::{FeatureMap, Tensor, TokenMatrix};

pub use kernels::LAYER_NORM_EPS;
