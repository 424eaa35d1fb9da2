//! Pyramid containers, the full decoupled-transformer pipeline and the
//! structural ablation variants.
//!
//! Every variant starts from per-level 1×1 lateral projections to a common
//! width `c` and ends with per-level 3×3 smoothing. The top-down decoder is
//!
//! ```text
//! P_top = Smooth(L_top)
//! P_i   = Smooth(L_i + Up(P_{i+1}))
//! ```
//!
//! where `Up` is nearest-neighbour 2× upsampling cropped to level `i`.
//! The variants differ in how the `L_i` are produced:
//!
//! | variant          | `L_i`                                               |
//! |------------------|-----------------------------------------------------|
//! | `fpn_baseline`   | `Lateral_i(C_i)`                                    |
//! | `dilated_c5`     | baseline, top level `+ DilatedConv_3(L_top)`        |
//! | `single_input(k)`| `Lateral_k(C_k)` resampled to every level           |
//! | `no_interaction` | baseline laterals, no `Up` term in the decoder      |
//! | `sdtp`           | ISP on the top level, then CDI across all levels    |

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::arf::AttentionActivation;
use crate::cdi::{CdiBlock, CdiConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::isp::{Isp, IspConfig};
use crate::nn::Conv;
use crate::params::{Bindings, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::FeatureMap;

/// Levels `first..first+n` of a feature pyramid; level `i` has stride `2^i`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    first_level: usize,
    maps: Vec<FeatureMap>,
}

impl FeaturePyramid {
    /// Checks that spatial dims halve (rounding up) from level to level.
    pub fn new(first_level: usize, maps: Vec<FeatureMap>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::contract("feature_pyramid", "no levels"));
        }
        if first_level < 1 {
            return Err(Error::contract(
                "feature_pyramid",
                "level indices start at 1",
            ));
        }
        for pair in maps.windows(2) {
            let (_, h, w) = pair[0].shape();
            let (_, h2, w2) = pair[1].shape();
            if h2 != h.div_ceil(2) || w2 != w.div_ceil(2) {
                return Err(Error::shape(
                    "feature_pyramid",
                    &[h.div_ceil(2), w.div_ceil(2)],
                    &[h2, w2],
                ));
            }
        }
        Ok(FeaturePyramid { first_level, maps })
    }

    pub fn first_level(&self) -> usize {
        self.first_level
    }

    pub fn top_level(&self) -> usize {
        self.first_level + self.maps.len() - 1
    }

    pub fn levels(&self) -> impl Iterator<Item = usize> {
        self.first_level..=self.top_level()
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn level(&self, i: usize) -> Option<&FeatureMap> {
        i.checked_sub(self.first_level)
            .and_then(|k| self.maps.get(k))
    }

    pub fn level_mut(&mut self, i: usize) -> Option<&mut FeatureMap> {
        i.checked_sub(self.first_level)
            .and_then(move |k| self.maps.get_mut(k))
    }

    pub fn maps(&self) -> &[FeatureMap] {
        &self.maps
    }

    pub fn stride(level: usize) -> usize {
        1 << level
    }

    pub fn shape(&self) -> PyramidShape {
        PyramidShape {
            first_level: self.first_level,
            dims: self.maps.iter().map(FeatureMap::shape).collect(),
        }
    }
}

/// Per-level `(c, h, w)` of a pyramid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PyramidShape {
    pub first_level: usize,
    pub dims: Vec<(usize, usize, usize)>,
}

impl PyramidShape {
    /// Levels `first..first+channels.len()`, with `base_h × base_w` at the
    /// first level and dims halving (rounding up) per level.
    pub fn halving(first_level: usize, base_h: usize, base_w: usize, channels: &[usize]) -> Self {
        let mut dims = Vec::with_capacity(channels.len());
        let (mut h, mut w) = (base_h, base_w);
        for &c in channels {
            dims.push((c, h, w));
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        PyramidShape { first_level, dims }
    }

    pub fn top_level(&self) -> usize {
        self.first_level + self.dims.len() - 1
    }

    /// Seeded standard-normal pyramid of this shape.
    pub fn synthesize(&self, rng: &mut SeededRng) -> FeaturePyramid {
        let maps = self
            .dims
            .iter()
            .map(|&(c, h, w)| {
                FeatureMap::from_tensor(rng.normal_tensor(&[c, h, w])).expect("rank 3")
            })
            .collect();
        FeaturePyramid::new(self.first_level, maps).expect("halving dims")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Sdtp,
    FpnBaseline,
    SingleInput(usize),
    DilatedC5,
    NoInteraction,
}

impl Variant {
    /// Parses `sdtp`, `fpn_baseline`, `single_input(k)` / `single_input_k`,
    /// `dilated_c5`, `no_interaction`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let single = s
            .strip_prefix("single_input(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("single_input_"));
        if let Some(level) = single {
            return level
                .parse()
                .map(Variant::SingleInput)
                .map_err(|_| Error::config("variant", "single_input needs a level index"));
        }
        match s {
            "sdtp" => Ok(Variant::Sdtp),
            "fpn_baseline" => Ok(Variant::FpnBaseline),
            "dilated_c5" => Ok(Variant::DilatedC5),
            "no_interaction" => Ok(Variant::NoInteraction),
            other => Err(Error::config(
                "variant",
                format!("unknown variant `{other}`"),
            )),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Variant::Sdtp => "sdtp".into(),
            Variant::FpnBaseline => "fpn_baseline".into(),
            Variant::SingleInput(k) => format!("single_input({k})"),
            Variant::DilatedC5 => "dilated_c5".into(),
            Variant::NoInteraction => "no_interaction".into(),
        }
    }

    /// All variants for a pyramid spanning `levels`.
    pub fn all(levels: core::ops::RangeInclusive<usize>) -> Vec<Variant> {
        let mut v = alloc::vec![Variant::Sdtp, Variant::FpnBaseline];
        v.extend(levels.map(Variant::SingleInput));
        v.push(Variant::DilatedC5);
        v.push(Variant::NoInteraction);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub variant: Variant,
    /// Common channel width after the lateral projections.
    pub channels: usize,
    pub isp: IspConfig,
    pub cdi: CdiConfig,
    pub activation: AttentionActivation,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            variant: Variant::Sdtp,
            channels: 256,
            isp: IspConfig::default(),
            cdi: CdiConfig::default(),
            activation: AttentionActivation::default(),
            seed: 0,
        }
    }
}

/// A built pipeline: structure plus parameters.
#[derive(Clone, Debug)]
pub struct Pipeline {
    config: PipelineConfig,
    shape: PyramidShape,
    pub store: ParamStore,
    laterals: Vec<Conv>,
    smooth: Vec<Conv>,
    dilated: Option<Conv>,
    isp: Option<Isp>,
    cdi: Option<CdiBlock>,
}

/// Tape outputs of [`Pipeline::forward_on`].
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub levels: Vec<Var>,
    pub dep_loss: Option<Var>,
}

/// Build a pipeline for inputs of `shape`.
///
/// Parameters are created laterals first, smoothing second, variant-specific
/// modules last, so two variants built from the same seed share identical
/// lateral and smoothing weights.
pub fn build_variant(config: &PipelineConfig, shape: &PyramidShape) -> Result<Pipeline> {
    let c = config.channels;
    if c == 0 {
        return Err(Error::config("channels", "must be >= 1"));
    }
    if shape.dims.is_empty() {
        return Err(Error::config("cdi.levels", "pyramid has no levels"));
    }
    let top = shape.top_level();
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(config.seed);
    let lateral = |store: &mut ParamStore, rng: &mut SeededRng, level: usize, c_in: usize| {
        Conv::new(
            store,
            rng,
            &format!("lateral.{level}"),
            c_in,
            c,
            (1, 1),
            (1, 1),
            true,
        )
    };
    let laterals = match config.variant {
        Variant::SingleInput(k) => {
            if k < shape.first_level || k > top {
                return Err(Error::config(
                    "variant",
                    format!(
                        "single_input level {k} outside {}..={top}",
                        shape.first_level
                    ),
                ));
            }
            let c_in = shape.dims[k - shape.first_level].0;
            alloc::vec![lateral(&mut store, &mut rng, k, c_in)]
        }
        _ => shape
            .dims
            .iter()
            .enumerate()
            .map(|(k, d)| lateral(&mut store, &mut rng, shape.first_level + k, d.0))
            .collect(),
    };
    let smooth = (0..shape.dims.len())
        .map(|k| {
            let name = format!("smooth.{}", shape.first_level + k);
            Conv::new(&mut store, &mut rng, &name, c, c, (3, 3), (1, 1), true)
        })
        .collect();
    let mut dilated = None;
    let mut isp = None;
    let mut cdi = None;
    match config.variant {
        Variant::DilatedC5 => {
            dilated = Some(Conv::new(
                &mut store,
                &mut rng,
                "dilated",
                c,
                c,
                (3, 3),
                (3, 3),
                true,
            ));
        }
        Variant::Sdtp => {
            let (_, h, w) = *shape.dims.last().unwrap();
            isp = Some(Isp::new(
                &mut store,
                &mut rng,
                "isp",
                (c, h, w),
                &config.isp,
            )?);
            let expected: Vec<usize> = (shape.first_level..=top).collect();
            if config.cdi.levels != expected {
                return Err(Error::config(
                    "cdi.levels",
                    format!(
                        "pyramid levels are {expected:?}, config lists {:?}",
                        config.cdi.levels
                    ),
                ));
            }
            cdi = Some(CdiBlock::new(&mut store, &mut rng, "cdi", c, &config.cdi)?);
        }
        _ => {}
    }
    Ok(Pipeline {
        config: config.clone(),
        shape: shape.clone(),
        store,
        laterals,
        smooth,
        dilated,
        isp,
        cdi,
    })
}

impl Pipeline {
    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn shape(&self) -> &PyramidShape {
        &self.shape
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Zeroes every transformer residual branch (ISP and CDI attention
    /// outputs, MLP outputs, CDI factor convolutions). For `sdtp` the
    /// pipeline then computes exactly the `fpn_baseline` function.
    pub fn zero_transformer_branches(&mut self) {
        if let Some(isp) = &self.isp {
            isp.zero_branches(&mut self.store);
        }
        if let Some(cdi) = &self.cdi {
            cdi.zero_branches(&mut self.store);
        }
    }

    /// Builds the forward pass on `g` for input levels `inputs`.
    pub fn forward_on(
        &self,
        g: &mut Graph,
        p: &Bindings,
        inputs: &[Var],
    ) -> Result<PipelineOutput> {
        if inputs.len() != self.shape.dims.len() {
            return Err(Error::contract(
                "sdtp_forward",
                format!(
                    "expected {} levels, got {}",
                    self.shape.dims.len(),
                    inputs.len()
                ),
            ));
        }
        for (&v, d) in inputs.iter().zip(&self.shape.dims) {
            if g.dims(v) != [d.0, d.1, d.2] {
                return Err(Error::shape("sdtp_forward", &[d.0, d.1, d.2], g.dims(v)));
            }
        }
        let n = inputs.len();
        let mut lat: Vec<Var> = match self.config.variant {
            Variant::SingleInput(k) => {
                let src = k - self.shape.first_level;
                let base = self.laterals[0].forward(g, p, inputs[src])?;
                let mut out = alloc::vec![base; n];
                for j in (src + 1)..n {
                    out[j] = g.downsample(out[j - 1], 2)?;
                }
                for j in (0..src).rev() {
                    let (_, h, w) = self.shape.dims[j];
                    out[j] = g.upsample(out[j + 1], h, w)?;
                }
                out
            }
            _ => inputs
                .iter()
                .zip(&self.laterals)
                .map(|(&x, conv)| conv.forward(g, p, x))
                .collect::<Result<_>>()?,
        };
        let mut dep_loss = None;
        if let Some(conv) = &self.dilated {
            let d = conv.forward(g, p, lat[n - 1])?;
            lat[n - 1] = g.add(lat[n - 1], d)?;
        }
        if let (Some(isp), Some(cdi)) = (&self.isp, &self.cdi) {
            lat[n - 1] = isp.forward(g, p, lat[n - 1], self.config.activation)?;
            let out = cdi.forward(g, p, &lat, self.config.activation)?;
            lat = out.levels;
            dep_loss = Some(out.dep_loss);
        }
        let top_down = self.config.variant != Variant::NoInteraction;
        let mut levels = alloc::vec![lat[n - 1]; n];
        levels[n - 1] = self.smooth[n - 1].forward(g, p, lat[n - 1])?;
        for j in (0..n - 1).rev() {
            let merged = if top_down {
                let (_, h, w) = self.shape.dims[j];
                let up = g.upsample(levels[j + 1], h, w)?;
                g.add(lat[j], up)?
            } else {
                lat[j]
            };
            levels[j] = self.smooth[j].forward(g, p, merged)?;
        }
        Ok(PipelineOutput { levels, dep_loss })
    }

    /// Output pyramid and decoupling loss (zero for variants without CDI).
    pub fn forward(&self, pyramid: &FeaturePyramid) -> Result<(FeaturePyramid, f64)> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let inputs: Vec<Var> = pyramid
            .maps()
            .iter()
            .map(|m| g.leaf(m.tensor().clone()))
            .collect();
        let out = self.forward_on(&mut g, &p, &inputs)?;
        let maps = out
            .levels
            .iter()
            .map(|&v| FeatureMap::from_tensor(g.value(v).clone()))
            .collect::<Result<_>>()?;
        let dep = out.dep_loss.map_or(0.0, |v| g.value(v).data()[0]);
        Ok((FeaturePyramid::new(pyramid.first_level(), maps)?, dep))
    }
}

/// Runs the full pipeline: ISP on the top level, CDI across levels, top-down
/// decoder. Returns `P_i` and the decoupling loss.
pub fn sdtp_forward(
    pyramid: &FeaturePyramid,
    pipeline: &Pipeline,
) -> Result<(FeaturePyramid, f64)> {
    if pipeline.variant() != Variant::Sdtp {
        return Err(Error::config(
            "variant",
            "sdtp_forward needs an sdtp pipeline",
        ));
    }
    pipeline.forward(pyramid)
}

/// Largest absolute change in output level `to` when input level `from` is
/// perturbed by `delta` at one cell. Exactly zero when no path connects them.
pub fn cross_level_sensitivity(
    pipeline: &Pipeline,
    pyramid: &FeaturePyramid,
    from: usize,
    to: usize,
    delta: f64,
) -> Result<f64> {
    let all = sensitivity_from(pipeline, pyramid, from, delta)?;
    let first = pyramid.first_level();
    all.get(to.wrapping_sub(first))
        .copied()
        .ok_or_else(|| Error::contract("sensitivity", format!("no level {to}")))
}

/// [`cross_level_sensitivity`] from `from` to every output level, lowest
/// level first, with one perturbed forward pass.
pub fn sensitivity_from(
    pipeline: &Pipeline,
    pyramid: &FeaturePyramid,
    from: usize,
    delta: f64,
) -> Result<Vec<f64>> {
    let (base, _) = pipeline.forward(pyramid)?;
    let mut probe = pyramid.clone();
    let map = probe
        .level_mut(from)
        .ok_or_else(|| Error::contract("sensitivity", format!("no level {from}")))?;
    let (c, h, w) = map.shape();
    let (ch, y, x) = (c / 2, h / 2, w / 2);
    map.set(ch, y, x, map.at(ch, y, x) + delta);
    let (moved, _) = pipeline.forward(&probe)?;
    Ok(base
        .maps()
        .iter()
        .zip(moved.maps())
        .map(|(a, b)| {
            a.data()
                .iter()
                .zip(b.data())
                .fold(0.0_f64, |m, (p, q)| m.max((p - q).abs()))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn small_config(variant: Variant) -> PipelineConfig {
        PipelineConfig {
            variant,
            channels: 4,
            isp: IspConfig {
                heads: 2,
                mlp_ratio: 2.0,
                ..IspConfig::default()
            },
            cdi: CdiConfig {
                heads: 2,
                levels: vec![2, 3],
                mlp_ratio: 2.0,
                ..CdiConfig::default()
            },
            activation: AttentionActivation::default(),
            seed: 9,
        }
    }

    #[test]
    fn pyramid_checks_halving() {
        let ok = FeaturePyramid::new(
            2,
            vec![FeatureMap::zeros(1, 7, 5), FeatureMap::zeros(1, 4, 3)],
        );
        assert!(ok.is_ok());
        let bad = FeaturePyramid::new(
            2,
            vec![FeatureMap::zeros(1, 8, 8), FeatureMap::zeros(1, 3, 4)],
        );
        assert!(bad.is_err());
        assert_eq!(FeaturePyramid::stride(5), 32);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::all(2..=5) {
            assert_eq!(Variant::parse(&v.name()).unwrap(), v);
        }
        assert_eq!(
            Variant::parse("single_input_3").unwrap(),
            Variant::SingleInput(3)
        );
        assert!(Variant::parse("pafpn").unwrap_err().is_config());
    }

    #[test]
    fn every_variant_preserves_shapes() {
        let shape = PyramidShape::halving(2, 6, 5, &[3, 5]);
        let pyr = shape.synthesize(&mut SeededRng::new(1));
        for v in Variant::all(2..=3) {
            let pipe = build_variant(&small_config(v), &shape).unwrap();
            let (out, dep) = pipe.forward(&pyr).unwrap();
            assert_eq!(out.len(), 2);
            assert_eq!(out.level(2).unwrap().shape(), (4, 6, 5));
            assert_eq!(out.level(3).unwrap().shape(), (4, 3, 3));
            assert!(dep >= 0.0);
        }
    }

    #[test]
    fn single_input_level_must_exist() {
        let shape = PyramidShape::halving(2, 4, 4, &[2, 2]);
        let err = build_variant(&small_config(Variant::SingleInput(5)), &shape).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn cdi_levels_must_match_pyramid() {
        let shape = PyramidShape::halving(2, 4, 4, &[2, 2, 2]);
        let err = build_variant(&small_config(Variant::Sdtp), &shape).unwrap_err();
        assert_eq!(err.origin(), "cdi.levels");
    }
}
