//! Intra-level semantic promotion: a transformer encoder on the top pyramid
//! level whose queries come from the rate-1 receptive state while keys and
//! values come from every dilated state.
//!
//! ```text
//! M_s  = Conv3x3_{rate s}(x) + PE            s = 1..S, rates[0] = 1
//! Ĉ    = MMA(M_1 .. M_S) + x                 (MMA input is LN(x))
//! out  = MLP(LN(Ĉ)) + Ĉ
//! ```
//!
//! MMA concatenates the projected keys/values of all `S` states along the
//! token axis, so each of the `h·w` rate-1 queries attends over `S·h·w`
//! tokens.

use alloc::format;
use alloc::vec::Vec;

use crate::arf::AttentionActivation;
use crate::attention::AttentionWeights;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{from_tokens, prefixed, to_tokens, Conv, LayerNorm, Mlp};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{FeatureMap, Tensor, TokenMatrix};

pub const DEFAULT_RATES: [usize; 3] = [1, 3, 6];
pub const DEFAULT_HEADS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PosEmbed {
    Sinusoidal,
    Learned,
    None,
}

impl PosEmbed {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sinusoidal" => Ok(PosEmbed::Sinusoidal),
            "learned" => Ok(PosEmbed::Learned),
            "none" => Ok(PosEmbed::None),
            _ => Err(Error::config(
                "isp.pos_embed",
                "expected one of sinusoidal, learned, none",
            )),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PosEmbed::Sinusoidal => "sinusoidal",
            PosEmbed::Learned => "learned",
            PosEmbed::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IspConfig {
    pub rates: Vec<usize>,
    pub heads: usize,
    pub pos_embed: PosEmbed,
    pub blocks: usize,
    pub mlp_ratio: f64,
}

impl Default for IspConfig {
    fn default() -> Self {
        IspConfig {
            rates: DEFAULT_RATES.to_vec(),
            heads: DEFAULT_HEADS,
            pos_embed: PosEmbed::Sinusoidal,
            blocks: 1,
            mlp_ratio: 4.0,
        }
    }
}

impl IspConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self.rates.first() {
            Some(1) => {}
            _ => return Err(Error::config("isp.rates", "the first rate must be 1")),
        }
        if self.rates.contains(&0) {
            return Err(Error::config("isp.rates", "rates must be >= 1"));
        }
        if self.blocks == 0 {
            return Err(Error::config(
                "isp.blocks",
                "at least one block is required",
            ));
        }
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "isp.heads",
                format!("{} heads do not divide {dim} channels", self.heads),
            ));
        }
        Ok(())
    }
}

/// The `S` receptive states of one map, in rate order.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceptiveStates {
    pub states: Vec<FeatureMap>,
    pub rates: Vec<usize>,
}

impl ReceptiveStates {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Each state as `(h·w) × c` tokens.
    pub fn tokens(&self) -> Vec<TokenMatrix> {
        self.states
            .iter()
            .map(|m| {
                let mut g = Graph::new();
                let v = g.leaf(m.tensor().clone());
                let t = to_tokens(&mut g, v).expect("rank-3 map");
                TokenMatrix::from_tensor(g.value(t).clone()).expect("rank-2")
            })
            .collect()
    }
}

/// Fixed 2-D sinusoidal embedding: the first `⌊c/2⌋` channels encode the
/// row, the rest the column, as interleaved sin/cos pairs with wavelengths
/// `10000^(2j/n)`.
pub fn sinusoidal_embedding(c: usize, h: usize, w: usize) -> FeatureMap {
    let half = c / 2;
    FeatureMap::from_fn(c, h, w, |ch, y, x| {
        let (pos, k, n) = if ch < half {
            (y, ch, half)
        } else {
            (x, ch - half, c - half)
        };
        let j = (k / 2) as f64;
        let freq = 1.0 / libm::pow(10000.0, 2.0 * j / n as f64);
        let angle = pos as f64 * freq;
        if k % 2 == 0 {
            libm::sin(angle)
        } else {
            libm::cos(angle)
        }
    })
}

#[derive(Clone, Debug)]
enum Position {
    Fixed(Tensor),
    Learned(ParamId),
    None,
}

/// One ISP encoder block for a map of fixed shape `c × h × w`.
#[derive(Clone, Debug)]
pub struct IspBlock {
    pub ln_attn: LayerNorm,
    pub state_convs: Vec<Conv>,
    pub attn: AttentionWeights,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
    rates: Vec<usize>,
    position: Position,
    shape: (usize, usize, usize),
}

impl IspBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        shape: (usize, usize, usize),
        config: &IspConfig,
    ) -> Result<Self> {
        let (c, h, w) = shape;
        config.validate(c)?;
        let ln_attn = LayerNorm::new(store, &prefixed(name, "ln_attn"), c);
        let state_convs = config
            .rates
            .iter()
            .map(|&r| {
                Conv::new(
                    store,
                    rng,
                    &format!("{name}.state_r{r}"),
                    c,
                    c,
                    (3, 3),
                    (r, r),
                    true,
                )
            })
            .collect();
        let position = match config.pos_embed {
            PosEmbed::Sinusoidal => Position::Fixed(sinusoidal_embedding(c, h, w).into_tensor()),
            PosEmbed::Learned => Position::Learned(store.add(
                prefixed(name, "pos_embed"),
                rng.fan_in_uniform(&[c, h, w], c),
            )),
            PosEmbed::None => Position::None,
        };
        let attn = AttentionWeights::new(store, rng, &prefixed(name, "attn"), c, config.heads)?;
        let ln_mlp = LayerNorm::new(store, &prefixed(name, "ln_mlp"), c);
        let mlp = Mlp::new(store, rng, &prefixed(name, "mlp"), c, config.mlp_ratio)?;
        Ok(IspBlock {
            ln_attn,
            state_convs,
            attn,
            ln_mlp,
            mlp,
            rates: config.rates.clone(),
            position,
            shape,
        })
    }

    pub fn rates(&self) -> &[usize] {
        &self.rates
    }

    fn check_shape(&self, g: &Graph, x: Var) -> Result<()> {
        let (c, h, w) = self.shape;
        if g.dims(x) != [c, h, w] {
            return Err(Error::shape("isp", &[c, h, w], g.dims(x)));
        }
        Ok(())
    }

    /// Receptive states `M_s` of a `c × h × w` map, as feature maps.
    pub fn states_on(&self, g: &mut Graph, p: &Bindings, x: Var) -> Result<Vec<Var>> {
        self.check_shape(g, x)?;
        let pos = match &self.position {
            Position::Fixed(t) => Some(g.leaf(t.clone())),
            Position::Learned(id) => Some(p.get(*id)),
            Position::None => None,
        };
        let mut states = Vec::with_capacity(self.state_convs.len());
        for conv in &self.state_convs {
            let m = conv.forward(g, p, x)?;
            states.push(match pos {
                Some(pe) => g.add(m, pe)?,
                None => m,
            });
        }
        Ok(states)
    }

    /// Multi-receptive attention: rate-1 queries against all states.
    /// Returns `(h·w) × c` tokens.
    pub fn mma_on(
        &self,
        g: &mut Graph,
        p: &Bindings,
        states: &[Var],
        activation: AttentionActivation,
    ) -> Result<Var> {
        mma_on(g, p, &self.attn, states, activation)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bindings,
        x: Var,
        activation: AttentionActivation,
    ) -> Result<Var> {
        self.check_shape(g, x)?;
        let (_, h, w) = self.shape;
        let tokens = to_tokens(g, x)?;
        let normed = self.ln_attn.forward(g, p, tokens)?;
        let normed = from_tokens(g, normed, h, w)?;
        let states = self.states_on(g, p, normed)?;
        let attended = self.mma_on(g, p, &states, activation)?;
        let hat = g.add(attended, tokens)?;
        let normed = self.ln_mlp.forward(g, p, hat)?;
        let mlp = self.mlp.forward(g, p, normed)?;
        let out = g.add(mlp, hat)?;
        from_tokens(g, out, h, w)
    }

    /// Zeroes the attention output projection and the MLP output layer so the
    /// block reduces to its residual path.
    pub fn zero_branches(&self, store: &mut ParamStore) {
        self.attn.zero_output(store);
        self.mlp.zero_output(store);
    }
}

/// Queries from `states[0]`, keys/values from every state. States are
/// `c × h × w` maps.
pub fn mma_on(
    g: &mut Graph,
    p: &Bindings,
    attn: &AttentionWeights,
    states: &[Var],
    activation: AttentionActivation,
) -> Result<Var> {
    let first = *states
        .first()
        .ok_or_else(|| Error::contract("mma", "at least one state is required"))?;
    let shape = g.dims(first).to_vec();
    let mut tokens = Vec::with_capacity(states.len());
    for &s in states {
        if g.dims(s) != shape.as_slice() {
            return Err(Error::shape("mma", &shape, g.dims(s)));
        }
        tokens.push(to_tokens(g, s)?);
    }
    let out = attn.attend(g, p, &tokens[..1], &tokens, activation)?;
    Ok(out[0])
}

/// The ISP stage: `blocks` encoder blocks applied in sequence.
#[derive(Clone, Debug)]
pub struct Isp {
    pub blocks: Vec<IspBlock>,
}

impl Isp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        shape: (usize, usize, usize),
        config: &IspConfig,
    ) -> Result<Self> {
        config.validate(shape.0)?;
        let blocks = (0..config.blocks)
            .map(|b| IspBlock::new(store, rng, &format!("{name}.block{b}"), shape, config))
            .collect::<Result<_>>()?;
        Ok(Isp { blocks })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bindings,
        x: Var,
        activation: AttentionActivation,
    ) -> Result<Var> {
        self.blocks
            .iter()
            .try_fold(x, |x, b| b.forward(g, p, x, activation))
    }

    pub fn zero_branches(&self, store: &mut ParamStore) {
        for b in &self.blocks {
            b.zero_branches(store);
        }
    }
}

/// Eager receptive-state generation for `c5`.
pub fn generate_states(
    c5: &FeatureMap,
    block: &IspBlock,
    store: &ParamStore,
) -> Result<ReceptiveStates> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.leaf(c5.tensor().clone());
    let vars = block.states_on(&mut g, &p, x)?;
    let states = vars
        .into_iter()
        .map(|v| FeatureMap::from_tensor(g.value(v).clone()))
        .collect::<Result<_>>()?;
    Ok(ReceptiveStates {
        states,
        rates: block.rates.clone(),
    })
}

/// Eager multi-receptive attention over precomputed states.
pub fn mma(
    states: &ReceptiveStates,
    weights: &AttentionWeights,
    store: &ParamStore,
    activation: AttentionActivation,
) -> Result<TokenMatrix> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let vars: Vec<Var> = states
        .states
        .iter()
        .map(|s| g.leaf(s.tensor().clone()))
        .collect();
    let out = mma_on(&mut g, &p, weights, &vars, activation)?;
    TokenMatrix::from_tensor(g.value(out).clone())
}

/// Eager ISP encoder block, `c5 → c5*`.
pub fn isp_block(
    c5: &FeatureMap,
    block: &IspBlock,
    store: &ParamStore,
    activation: AttentionActivation,
) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let x = g.leaf(c5.tensor().clone());
    let y = block.forward(&mut g, &p, x, activation)?;
    FeatureMap::from_tensor(g.value(y).clone())
}
