//! Attention Refinement Function.
//!
//! `U(x) = max[(e^x - e^-x) / (e^x + e^-(x + 2τ)), 0]`
//!
//! For `x > 0` both numerator and denominator are divided by `e^x`, giving
//! `(1 - e^-2x) / (1 + e^-(2x + 2τ))`, which never overflows. For `x <= 0`
//! the numerator is non-positive and the function is clipped to zero.
//! `τ = 0` reduces to `max(tanh x, 0)`; `τ > 0` lifts small positive
//! activations above `tanh`.
//!
//! Used as a drop-in replacement for softmax on scaled attention scores.
//! Rows are not renormalized afterwards, so ARF attention rows do not sum
//! to one.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::TokenMatrix;

pub const DEFAULT_TAU: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArfParams {
    tau: f64,
}

impl ArfParams {
    pub fn new(tau: f64) -> Result<Self> {
        if !tau.is_finite() || tau < 0.0 {
            return Err(Error::config("arf.tau", "must be a finite value >= 0"));
        }
        Ok(ArfParams { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl Default for ArfParams {
    fn default() -> Self {
        ArfParams { tau: DEFAULT_TAU }
    }
}

/// Scalar ARF.
pub fn refine(x: f64, tau: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let num = -libm::expm1(-2.0 * x);
    let den = 1.0 + libm::exp(-2.0 * x - 2.0 * tau);
    num / den
}

/// Scalar derivative; zero on the clipped region including `x = 0`.
///
/// `U'(x) = 2e^-2x (1 + e^-2τ) / (1 + e^-(2x + 2τ))²` for `x > 0`.
pub fn refine_grad(x: f64, tau: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let e2x = libm::exp(-2.0 * x);
    let den = 1.0 + e2x * libm::exp(-2.0 * tau);
    2.0 * e2x * (1.0 + libm::exp(-2.0 * tau)) / (den * den)
}

/// Elementwise ARF over a score matrix.
pub fn arf(scores: &TokenMatrix, params: ArfParams) -> TokenMatrix {
    let (r, c) = scores.shape();
    let data = scores
        .data()
        .iter()
        .map(|&x| refine(x, params.tau))
        .collect();
    TokenMatrix::new(r, c, data).expect("shape preserved")
}

/// Vector-Jacobian product of [`arf`] with respect to the scores.
pub fn arf_vjp(
    scores: &TokenMatrix,
    params: ArfParams,
    upstream: &TokenMatrix,
) -> Result<TokenMatrix> {
    if scores.shape() != upstream.shape() {
        let (a, b) = scores.shape();
        let (c, d) = upstream.shape();
        return Err(Error::shape("arf_vjp", &[a, b], &[c, d]));
    }
    let (r, c) = scores.shape();
    let data: Vec<f64> = scores
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| g * refine_grad(x, params.tau))
        .collect();
    TokenMatrix::new(r, c, data)
}

/// Activation applied to scaled attention scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionActivation {
    Softmax,
    Tanh,
    Arf(ArfParams),
}

impl AttentionActivation {
    /// Parses an `arf.mode` value (`softmax`, `tanh`, `arf`).
    pub fn from_mode(mode: &str, params: ArfParams) -> Result<Self> {
        match mode {
            "softmax" => Ok(AttentionActivation::Softmax),
            "tanh" => Ok(AttentionActivation::Tanh),
            "arf" => Ok(AttentionActivation::Arf(params)),
            _ => Err(Error::config(
                "arf.mode",
                "expected one of softmax, tanh, arf",
            )),
        }
    }

    pub fn mode(&self) -> &'static str {
        match self {
            AttentionActivation::Softmax => "softmax",
            AttentionActivation::Tanh => "tanh",
            AttentionActivation::Arf(_) => "arf",
        }
    }
}

impl Default for AttentionActivation {
    fn default() -> Self {
        AttentionActivation::Arf(ArfParams::default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_negative_inputs_clip() {
        for tau in [0.0, 1.0, 2.0, 4.0] {
            assert_eq!(refine(0.0, tau), 0.0);
        }
        assert_eq!(refine(-3.0, 2.0), 0.0);
        assert_eq!(refine_grad(-1.0, 2.0), 0.0);
        assert_eq!(refine_grad(0.0, 2.0), 0.0);
    }

    #[test]
    fn tau_zero_is_tanh() {
        assert!((refine(1.0, 0.0) - 0.761_594_155_955_764_9).abs() < 1e-15);
        let t = libm::tanh(0.5);
        assert!((refine_grad(0.5, 0.0) - (1.0 - t * t)).abs() < 1e-15);
    }

    #[test]
    fn golden_tau_two() {
        // 50-digit evaluation of the unstabilized closed form at x = 0.5, τ = 2.
        let value = 0.627_889_870_162_142_5;
        let slope = 0.739_239_304_422_872_9;
        assert!((refine(0.5, 2.0) - value).abs() < 1e-15);
        assert!((refine_grad(0.5, 2.0) - slope).abs() < 1e-15);
    }

    #[test]
    fn extreme_inputs_stay_bounded() {
        for x in [-700.0, -1e300, 700.0, 1e300] {
            let u = refine(x, 2.0);
            assert!(u.is_finite() && (0.0..=1.0).contains(&u));
            assert!(refine_grad(x, 2.0).is_finite());
        }
    }

    #[test]
    fn negative_tau_rejected() {
        assert!(ArfParams::new(-0.1).is_err());
        assert!(ArfParams::new(f64::NAN).is_err());
        assert_eq!(ArfParams::default().tau(), 2.0);
    }
}
