//! Run configuration, read from TOML. Every key is optional; missing keys
//! take the defaults below. Unknown keys are rejected.

use std::path::Path;

use sdtp_core::cdi::CdiConfig;
use sdtp_core::complexity::LevelDims;
use sdtp_core::gradcheck::GradCheckOptions;
use sdtp_core::isp::{IspConfig, PosEmbed};
use sdtp_core::train::ToyTask;
use sdtp_core::{ArfParams, AttentionActivation, PipelineConfig, PyramidShape, Variant};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Lowest pyramid level; inputs are numbered upwards from here.
pub const FIRST_LEVEL: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// `sdtp`, `fpn_baseline`, `single_input(N)`, `dilated_c5` or `no_interaction`.
    pub variant: String,
    pub seed: u64,
    pub pyramid: PyramidSection,
    pub arf: ArfSection,
    pub isp: IspSection,
    pub cdi: CdiSection,
    pub flops: FlopsSection,
    pub train: TrainSection,
    pub gradcheck: GradcheckSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            variant: "sdtp".into(),
            seed: 0,
            pyramid: PyramidSection::default(),
            arf: ArfSection::default(),
            isp: IspSection::default(),
            cdi: CdiSection::default(),
            flops: FlopsSection::default(),
            train: TrainSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidSection {
    /// Spatial size of the lowest level; each level above halves it.
    pub base_h: usize,
    pub base_w: usize,
    /// Common width after the lateral projections.
    pub channels: usize,
    /// Backbone channels per input level, lowest level first.
    pub in_channels: Vec<usize>,
}

impl Default for PyramidSection {
    fn default() -> Self {
        PyramidSection {
            base_h: 64,
            base_w: 64,
            channels: 256,
            in_channels: vec![256; 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArfSection {
    /// `softmax`, `tanh` or `arf`.
    pub mode: String,
    pub tau: f64,
}

impl Default for ArfSection {
    fn default() -> Self {
        ArfSection {
            mode: "arf".into(),
            tau: ArfParams::default().tau(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IspSection {
    pub rates: Vec<usize>,
    pub heads: usize,
    /// `sinusoidal`, `learned` or `none`.
    pub pos_embed: String,
    pub blocks: usize,
    pub mlp_ratio: f64,
}

impl Default for IspSection {
    fn default() -> Self {
        let d = IspConfig::default();
        IspSection {
            rates: d.rates,
            heads: d.heads,
            pos_embed: d.pos_embed.name().into(),
            blocks: d.blocks,
            mlp_ratio: d.mlp_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CdiSection {
    pub heads: usize,
    pub lambda: f64,
    pub levels: Vec<usize>,
    pub mlp_ratio: f64,
}

impl Default for CdiSection {
    fn default() -> Self {
        let d = CdiConfig::default();
        CdiSection {
            heads: d.heads,
            lambda: d.lambda,
            levels: d.levels,
            mlp_ratio: d.mlp_ratio,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlopsSection {
    /// Image size; levels 2..5 are `⌈size / 2^i⌉`. Ignored when `levels` is set.
    pub input_h: u64,
    pub input_w: u64,
    pub channels: u64,
    /// Strided-attention stride per level, lowest level first.
    pub strides: [usize; 4],
    /// Explicit `[h, w, c, s]` rows, lowest level first.
    pub levels: Vec<[u64; 4]>,
}

impl Default for FlopsSection {
    fn default() -> Self {
        FlopsSection {
            input_h: 800,
            input_w: 1344,
            channels: 256,
            strides: sdtp_core::complexity::DEFAULT_STRIDES,
            levels: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub lr: f64,
    pub channels: usize,
    pub base: usize,
    pub heads: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = ToyTask::default();
        TrainSection {
            steps: d.steps,
            lr: d.lr,
            channels: d.channels,
            base: d.base,
            heads: d.heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub tolerance: f64,
    pub step: f64,
    pub points: usize,
    /// Subset of registered ops; empty means all.
    pub ops: Vec<String>,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        let d = GradCheckOptions::default();
        GradcheckSection {
            tolerance: d.tolerance,
            step: d.step,
            points: sdtp_core::gradcheck::DEFAULT_POINTS,
            ops: Vec::new(),
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("<file>")
                .to_string();
            CliError::Config {
                field,
                reason: e.to_string().trim_end().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("--config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn variant(&self) -> Result<Variant, CliError> {
        Ok(Variant::parse(&self.variant)?)
    }

    pub fn activation(&self) -> Result<AttentionActivation, CliError> {
        let params = ArfParams::new(self.arf.tau)?;
        Ok(AttentionActivation::from_mode(&self.arf.mode, params)?)
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, CliError> {
        let cfg = PipelineConfig {
            variant: self.variant()?,
            channels: self.pyramid.channels,
            isp: IspConfig {
                rates: self.isp.rates.clone(),
                heads: self.isp.heads,
                pos_embed: PosEmbed::parse(&self.isp.pos_embed)?,
                blocks: self.isp.blocks,
                mlp_ratio: self.isp.mlp_ratio,
            },
            cdi: CdiConfig {
                heads: self.cdi.heads,
                lambda: self.cdi.lambda,
                levels: self.cdi.levels.clone(),
                mlp_ratio: self.cdi.mlp_ratio,
            },
            activation: self.activation()?,
            seed: self.seed,
        };
        cfg.isp.validate(cfg.channels)?;
        cfg.cdi.validate(cfg.channels)?;
        Ok(cfg)
    }

    pub fn pyramid_shape(&self) -> Result<PyramidShape, CliError> {
        let p = &self.pyramid;
        if p.base_h == 0 || p.base_w == 0 {
            return Err(invalid("pyramid.base_h", "base size must be positive"));
        }
        if p.in_channels.is_empty() || p.in_channels.contains(&0) {
            return Err(invalid(
                "pyramid.in_channels",
                "need at least one positive entry",
            ));
        }
        Ok(PyramidShape::halving(
            FIRST_LEVEL,
            p.base_h,
            p.base_w,
            &p.in_channels,
        ))
    }

    pub fn flops_dims(&self) -> Result<Vec<LevelDims>, CliError> {
        let f = &self.flops;
        if !f.levels.is_empty() {
            return f
                .levels
                .iter()
                .map(|&[h, w, c, s]| Ok(LevelDims::new(h, w, c, s)?))
                .collect();
        }
        if f.input_h == 0 || f.input_w == 0 || f.channels == 0 || f.strides.contains(&0) {
            return Err(invalid(
                "flops",
                "sizes, channels and strides must be positive",
            ));
        }
        Ok(LevelDims::pyramid(
            f.input_h, f.input_w, f.channels, &f.strides,
        ))
    }

    pub fn toy_task(&self) -> Result<ToyTask, CliError> {
        let t = &self.train;
        if t.steps == 0 {
            return Err(invalid("train.steps", "must be >= 1"));
        }
        if !t.lr.is_finite() || t.lr < 0.0 {
            return Err(invalid("train.lr", "must be a finite value >= 0"));
        }
        if t.channels == 0 || t.base < 2 {
            return Err(invalid("train.base", "need channels >= 1 and base >= 2"));
        }
        Ok(ToyTask {
            variant: self.variant()?,
            channels: t.channels,
            base: t.base,
            heads: t.heads,
            activation: self.activation()?,
            steps: t.steps,
            lr: t.lr,
            lambda: self.cdi.lambda,
            seed: self.seed,
        })
    }

    pub fn gradcheck_options(&self) -> Result<GradCheckOptions, CliError> {
        let g = &self.gradcheck;
        if g.tolerance.is_nan() || g.tolerance <= 0.0 || g.step.is_nan() || g.step <= 0.0 {
            return Err(invalid(
                "gradcheck.tolerance",
                "tolerance and step must be > 0",
            ));
        }
        if g.points == 0 {
            return Err(invalid("gradcheck.points", "must be >= 1"));
        }
        Ok(GradCheckOptions {
            tolerance: g.tolerance,
            step: g.step,
            corrupt_analytic: false,
        })
    }

    /// Checks every section that does not need a built pipeline.
    pub fn validate(&self) -> Result<(), CliError> {
        self.pipeline()?;
        self.pyramid_shape()?;
        self.flops_dims()?;
        self.toy_task()?;
        self.gradcheck_options()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
        Config::default().validate().unwrap();
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = Config::default();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let err = Config::from_toml("[arf]\ntua = 1.0\n").unwrap_err();
        assert!(
            matches!(err, CliError::Config { ref field, .. } if field == "tua"),
            "{err}"
        );
    }

    #[test]
    fn values_are_checked_by_field() {
        let cases = [
            ("[arf]\ntau = -1.0", "arf.tau"),
            ("[arf]\nmode = \"relu\"", "arf.mode"),
            ("[isp]\nrates = [3, 6]", "isp.rates"),
            ("[isp]\npos_embed = \"rope\"", "isp.pos_embed"),
            ("[cdi]\nlambda = -0.5", "cdi.lambda"),
            ("[isp]\nheads = 7", "isp.heads"),
            ("variant = \"unet\"", "variant"),
            ("[train]\nlr = -1.0", "train.lr"),
            ("[flops]\nlevels = [[0, 1, 1, 1]]", "flops.levels"),
        ];
        for (text, field) in cases {
            let err = Config::from_toml(text)
                .and_then(|c| c.validate())
                .unwrap_err();
            match err {
                CliError::Config { field: f, .. } => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other}"),
            }
        }
    }

    #[test]
    fn toy_task_defaults_match_the_core() {
        assert_eq!(Config::default().toy_task().unwrap(), ToyTask::default());
    }
}
