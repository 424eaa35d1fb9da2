//! Cross-level decoupled interaction.
//!
//! Each level `C_i` (`c × h × w`) is pooled into a vertical factor
//! `Y_i` (`c × h × 1`) and a horizontal factor `X_i` (`c × 1 × w`):
//!
//! ```text
//! A   = softmax_w(Conv1x1_a(C))        Y = Conv3x1(Σ_w A ⊙ C)
//! A'  = softmax_h(Conv1x1_b(C))        X = Conv1x3(Σ_h A' ⊙ C)
//! ```
//!
//! The vertical tokens of all levels (`h_i` tokens each) go through one
//! global attention, the horizontal tokens (`w_i` each) through another;
//! every level's queries see the keys/values of every level. The refined
//! factors are recoupled with the broadcast outer sum
//! `(Y ⊛ X)[c, i, j] = Y[c, i] + X[c, j]` and added back onto the level,
//! followed by a token MLP. The decoupling loss
//! `Σ_i ‖C_i − Y_i ⊛ X_i‖_F` is taken on the factors before attention.

use alloc::format;
use alloc::vec::Vec;

use crate::arf::AttentionActivation;
use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{from_tokens, prefixed, to_tokens, Conv, LayerNorm, Mlp};
use crate::params::{Bindings, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{FeatureMap, TokenMatrix};

pub const DEFAULT_LAMBDA: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct CdiConfig {
    pub heads: usize,
    pub lambda: f64,
    pub levels: Vec<usize>,
    pub mlp_ratio: f64,
}

impl Default for CdiConfig {
    fn default() -> Self {
        CdiConfig {
            heads: 8,
            lambda: DEFAULT_LAMBDA,
            levels: alloc::vec![2, 3, 4, 5],
            mlp_ratio: 4.0,
        }
    }
}

impl CdiConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "cdi.heads",
                format!("{} heads do not divide {dim} channels", self.heads),
            ));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config("cdi.lambda", "must be a finite value >= 0"));
        }
        if self.levels.is_empty() || self.levels.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::config(
                "cdi.levels",
                "must be a non-empty run of consecutive level indices",
            ));
        }
        Ok(())
    }
}

/// Vertical (`c × h × 1`) and horizontal (`c × 1 × w`) factors of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoupledPair {
    pub y: FeatureMap,
    pub x: FeatureMap,
    pub level: usize,
}

impl DecoupledPair {
    pub fn new(y: FeatureMap, x: FeatureMap, level: usize) -> Result<Self> {
        let (cy, _, wy) = y.shape();
        let (cx, hx, _) = x.shape();
        if wy != 1 || hx != 1 || cy != cx {
            let (a, b, c) = y.shape();
            let (d, e, f) = x.shape();
            return Err(Error::shape(
                "decoupled_pair",
                &[cy, b, 1, cy, 1, f],
                &[a, b, c, d, e, f],
            ));
        }
        Ok(DecoupledPair { y, x, level })
    }
}

/// Per-level vertical (`h_i × c`) and horizontal (`w_i × c`) tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidTokens {
    pub vertical: Vec<TokenMatrix>,
    pub horizontal: Vec<TokenMatrix>,
}

/// The two weighted-pooling branches that split a level into factors.
#[derive(Clone, Debug)]
pub struct Decoupler {
    pub weight_v: Conv,
    pub weight_h: Conv,
    pub conv_v: Conv,
    pub conv_h: Conv,
}

impl Decoupler {
    pub fn new(store: &mut ParamStore, rng: &mut SeededRng, name: &str, c: usize) -> Self {
        // a per-channel bias before a spatial softmax cancels out, so the
        // weight convs carry none
        let mut conv = |part: &str, k, bias| {
            Conv::new(store, rng, &prefixed(name, part), c, c, k, (1, 1), bias)
        };
        Decoupler {
            weight_v: conv("weight_v", (1, 1), false),
            weight_h: conv("weight_h", (1, 1), false),
            conv_v: conv("conv_v", (3, 1), true),
            conv_h: conv("conv_h", (1, 3), true),
        }
    }

    /// Identity 1×1/3×1/1×3 kernels with zero bias.
    pub fn set_identity(&self, store: &mut ParamStore) {
        for conv in [&self.weight_v, &self.weight_h, &self.conv_v, &self.conv_h] {
            conv.set_identity(store);
        }
    }

    /// Returns `(Y, X)` for a `c × h × w` map.
    pub fn forward(&self, g: &mut Graph, p: &Bindings, c_i: Var) -> Result<(Var, Var)> {
        let [c, h, w] = *g.dims(c_i) else {
            return Err(Error::contract("decouple", "expected a rank-3 map"));
        };
        let c_w = self.weight_v.weight;
        if g.dims(p.get(c_w))[1] != c {
            return Err(Error::shape("decouple", &[g.dims(p.get(c_w))[1]], &[c]));
        }
        // vertical: softmax along width, pool over width
        let logits = self.weight_v.forward(g, p, c_i)?;
        let a = g.softmax(logits);
        let weighted = g.mul(a, c_i)?;
        let pooled = g.sum_last(weighted);
        let y = self.conv_v.forward(g, p, pooled)?;

        // horizontal: the same along height, via the (c, w, h) transpose
        let logits = self.weight_h.forward(g, p, c_i)?;
        let logits_t = g.transpose(logits)?;
        let a = g.softmax(logits_t);
        let c_t = g.transpose(c_i)?;
        let weighted = g.mul(a, c_t)?;
        let pooled = g.sum_last(weighted);
        let pooled = g.reshape(pooled, &[c, 1, w])?;
        let x = self.conv_h.forward(g, p, pooled)?;
        debug_assert_eq!(g.dims(y), &[c, h, 1]);
        Ok((y, x))
    }

    /// Zeroes the 3×1 / 1×3 output convolutions.
    pub fn zero_output(&self, store: &mut ParamStore) {
        for conv in [&self.conv_v, &self.conv_h] {
            store.get_mut(conv.weight).data_mut().fill(0.0);
            if let Some(b) = conv.bias {
                store.get_mut(b).data_mut().fill(0.0);
            }
        }
    }
}

/// Cross-level attention for one token family. Each entry of `tokens` is a
/// `n_i × c` matrix; all must share `c`.
pub fn mga_on(
    g: &mut Graph,
    p: &Bindings,
    attn: &AttentionWeights,
    tokens: &[Var],
    activation: AttentionActivation,
) -> Result<Vec<Var>> {
    let Some(&first) = tokens.first() else {
        return Err(Error::contract("mga", "no levels"));
    };
    let c = g.dims(first)[1];
    for &t in tokens {
        if g.dims(t).len() != 2 || g.dims(t)[1] != c {
            return Err(Error::shape("mga", &[0, c], g.dims(t)));
        }
    }
    attn.attend(g, p, tokens, tokens, activation)
}

/// Broadcast outer sum on the tape.
pub fn recouple_on(g: &mut Graph, y: Var, x: Var) -> Result<Var> {
    g.kron_sum(y, x)
}

/// `Σ_i ‖C_i − Y_i ⊛ X_i‖_F` on the tape.
pub fn decouple_loss_on(g: &mut Graph, levels: &[Var], factors: &[(Var, Var)]) -> Result<Var> {
    if levels.len() != factors.len() || levels.is_empty() {
        return Err(Error::contract(
            "decouple_loss",
            format!("{} levels but {} factor pairs", levels.len(), factors.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (&c_i, &(y, x)) in levels.iter().zip(factors) {
        let rec = g.kron_sum(y, x)?;
        let residual = g.sub(c_i, rec)?;
        let n = g.norm(residual);
        total = Some(match total {
            Some(t) => g.add(t, n)?,
            None => n,
        });
    }
    Ok(total.expect("non-empty"))
}

/// One cross-level encoder over a list of equal-width levels.
#[derive(Clone, Debug)]
pub struct CdiBlock {
    pub decoupler: Decoupler,
    pub ln_v: LayerNorm,
    pub ln_h: LayerNorm,
    pub mga_v: AttentionWeights,
    pub mga_h: AttentionWeights,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
    dim: usize,
}

/// Tape outputs of [`CdiBlock::forward`].
#[derive(Clone, Debug)]
pub struct CdiOutput {
    pub levels: Vec<Var>,
    pub factors: Vec<(Var, Var)>,
    pub dep_loss: Var,
}

impl CdiBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        dim: usize,
        config: &CdiConfig,
    ) -> Result<Self> {
        config.validate(dim)?;
        Ok(CdiBlock {
            decoupler: Decoupler::new(store, rng, &prefixed(name, "decouple"), dim),
            ln_v: LayerNorm::new(store, &prefixed(name, "ln_v"), dim),
            ln_h: LayerNorm::new(store, &prefixed(name, "ln_h"), dim),
            mga_v: AttentionWeights::new(store, rng, &prefixed(name, "mga_v"), dim, config.heads)?,
            mga_h: AttentionWeights::new(store, rng, &prefixed(name, "mga_h"), dim, config.heads)?,
            ln_mlp: LayerNorm::new(store, &prefixed(name, "ln_mlp"), dim),
            mlp: Mlp::new(store, rng, &prefixed(name, "mlp"), dim, config.mlp_ratio)?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bindings,
        levels: &[Var],
        activation: AttentionActivation,
    ) -> Result<CdiOutput> {
        let mut shapes = Vec::with_capacity(levels.len());
        for &l in levels {
            match *g.dims(l) {
                [c, h, w] if c == self.dim => shapes.push((h, w)),
                _ => {
                    let got = g.dims(l).to_vec();
                    return Err(Error::shape("cdi", &[self.dim, 0, 0], &got));
                }
            }
        }
        let factors = levels
            .iter()
            .map(|&l| self.decoupler.forward(g, p, l))
            .collect::<Result<Vec<_>>>()?;
        let dep_loss = decouple_loss_on(g, levels, &factors)?;

        let mut v_tokens = Vec::with_capacity(levels.len());
        let mut h_tokens = Vec::with_capacity(levels.len());
        for (&(y, x), &(h, w)) in factors.iter().zip(&shapes) {
            let yt = g.reshape(y, &[self.dim, h])?;
            v_tokens.push(g.transpose(yt)?);
            let xt = g.reshape(x, &[self.dim, w])?;
            h_tokens.push(g.transpose(xt)?);
        }
        let v_refined = self.refine(g, p, &self.ln_v, &self.mga_v, &v_tokens, activation)?;
        let h_refined = self.refine(g, p, &self.ln_h, &self.mga_h, &h_tokens, activation)?;

        let mut outputs = Vec::with_capacity(levels.len());
        for (k, &(h, w)) in shapes.iter().enumerate() {
            let y = g.transpose(v_refined[k])?;
            let y = g.reshape(y, &[self.dim, h, 1])?;
            let x = g.transpose(h_refined[k])?;
            let x = g.reshape(x, &[self.dim, 1, w])?;
            let rec = recouple_on(g, y, x)?;
            let hat = g.add(levels[k], rec)?;
            let tokens = to_tokens(g, hat)?;
            let normed = self.ln_mlp.forward(g, p, tokens)?;
            let mlp = self.mlp.forward(g, p, normed)?;
            let out = g.add(mlp, tokens)?;
            outputs.push(from_tokens(g, out, h, w)?);
        }
        Ok(CdiOutput {
            levels: outputs,
            factors,
            dep_loss,
        })
    }

    /// Pre-norm attention with a token residual.
    fn refine(
        &self,
        g: &mut Graph,
        p: &Bindings,
        ln: &LayerNorm,
        attn: &AttentionWeights,
        tokens: &[Var],
        activation: AttentionActivation,
    ) -> Result<Vec<Var>> {
        let normed = tokens
            .iter()
            .map(|&t| ln.forward(g, p, t))
            .collect::<Result<Vec<_>>>()?;
        let attended = mga_on(g, p, attn, &normed, activation)?;
        tokens
            .iter()
            .zip(attended)
            .map(|(&t, a)| g.add(a, t))
            .collect()
    }

    /// Zeroes attention output projections, the MLP output layer and the
    /// factor output convolutions; the block then returns its input levels.
    pub fn zero_branches(&self, store: &mut ParamStore) {
        self.mga_v.zero_output(store);
        self.mga_h.zero_output(store);
        self.mlp.zero_output(store);
        self.decoupler.zero_output(store);
    }
}

/// Eager decoupling of one level.
pub fn decouple(
    c_i: &FeatureMap,
    decoupler: &Decoupler,
    store: &ParamStore,
    level: usize,
) -> Result<DecoupledPair> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.leaf(c_i.tensor().clone());
    let (yv, xv) = decoupler.forward(&mut g, &p, x)?;
    DecoupledPair::new(
        FeatureMap::from_tensor(g.value(yv).clone())?,
        FeatureMap::from_tensor(g.value(xv).clone())?,
        level,
    )
}

/// Eager cross-level attention over one token family.
pub fn mga(
    tokens: &[TokenMatrix],
    weights: &AttentionWeights,
    store: &ParamStore,
    activation: AttentionActivation,
) -> Result<Vec<TokenMatrix>> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let vars: Vec<Var> = tokens.iter().map(|t| g.leaf(t.tensor().clone())).collect();
    let out = mga_on(&mut g, &p, weights, &vars, activation)?;
    out.into_iter()
        .map(|v| TokenMatrix::from_tensor(g.value(v).clone()))
        .collect()
}

/// Vertical and horizontal families through their own attention weights.
pub fn mga_pyramid(
    tokens: &PyramidTokens,
    vertical: &AttentionWeights,
    horizontal: &AttentionWeights,
    store: &ParamStore,
    activation: AttentionActivation,
) -> Result<PyramidTokens> {
    Ok(PyramidTokens {
        vertical: mga(&tokens.vertical, vertical, store, activation)?,
        horizontal: mga(&tokens.horizontal, horizontal, store, activation)?,
    })
}

/// `(Y ⊛ X)[c, i, j] = Y[c, i, 0] + X[c, 0, j]`.
pub fn recouple(pair: &DecoupledPair) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let y = g.leaf(pair.y.tensor().clone());
    let x = g.leaf(pair.x.tensor().clone());
    let out = g.kron_sum(y, x)?;
    FeatureMap::from_tensor(g.value(out).clone())
}

/// `Σ_i ‖C_i − Y_i ⊛ X_i‖_F` over matching levels and pairs.
pub fn decouple_loss(levels: &[FeatureMap], pairs: &[DecoupledPair]) -> Result<f64> {
    let mut g = Graph::new();
    let lv: Vec<Var> = levels.iter().map(|l| g.leaf(l.tensor().clone())).collect();
    let fv: Vec<(Var, Var)> = pairs
        .iter()
        .map(|p| (g.leaf(p.y.tensor().clone()), g.leaf(p.x.tensor().clone())))
        .collect();
    let loss = decouple_loss_on(&mut g, &lv, &fv)?;
    Ok(g.value(loss).data()[0])
}

/// `L = L_task + λ · L_dep`.
pub fn total_loss(task_loss: f64, dep_loss: f64, lambda: f64) -> f64 {
    task_loss + lambda * dep_loss
}

/// Eager CDI block: refined levels and the decoupling loss.
pub fn cdi_block(
    levels: &[FeatureMap],
    block: &CdiBlock,
    store: &ParamStore,
    activation: AttentionActivation,
) -> Result<(Vec<FeatureMap>, f64)> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let vars: Vec<Var> = levels.iter().map(|l| g.leaf(l.tensor().clone())).collect();
    let out = block.forward(&mut g, &p, &vars, activation)?;
    let maps = out
        .levels
        .iter()
        .map(|&v| FeatureMap::from_tensor(g.value(v).clone()))
        .collect::<Result<_>>()?;
    Ok((maps, g.value(out.dep_loss).data()[0]))
}
