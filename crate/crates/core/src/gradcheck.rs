//! Central-difference verification of the tape's vector-Jacobian products.
//!
//! For an op `y = f(x_1, .., x_k)` and random directions `u` (output) and
//! `v_i` (inputs), the analytic value `<∇_{x_i} <u, y>, v_i>` is compared with
//!
//! ```text
//! (<u, f(.., x_i + h v_i, ..)> − <u, f(.., x_i − h v_i, ..)>) / 2h
//! ```
//!
//! where `h = step · max(1, max |x_i|)`. Every input and parameter tensor is
//! checked separately.
//!
//! The difference quotient is meaningless when `x ± h v` falls on different
//! sides of the ARF clip at 0. Such points are detected from the sign
//! pattern of every ARF input and [`check_op`] replaces them with fresh
//! points, counting the replacements in the report.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::arf::{ArfParams, AttentionActivation};
use crate::attention::AttentionWeights;
use crate::cdi::{decouple_loss_on, mga_on, CdiBlock, CdiConfig, Decoupler};
use crate::error::Result;
use crate::graph::{Graph, Pointwise, Var};
use crate::isp::{mma_on, IspBlock, IspConfig};
use crate::nn::Mlp;
use crate::params::{Bindings, ParamStore};
use crate::pyramid::{build_variant, PipelineConfig, PyramidShape, Variant};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_POINTS: usize = 10;
const REL_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Test hook: perturbs every analytic derivative before comparison.
    pub corrupt_analytic: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: DEFAULT_TOLERANCE,
            step: DEFAULT_STEP,
            corrupt_analytic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub step: f64,
    pub tolerance: f64,
    pub points: usize,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
    pub diagnostic: Option<String>,
    /// Points dropped because the difference straddled the ARF kink.
    pub nonsmooth: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    fn failed(op: &str, opts: &GradCheckOptions, diagnostic: String) -> Self {
        GradCheckReport {
            op: op.to_string(),
            step: opts.step,
            tolerance: opts.tolerance,
            points: 0,
            tensors: Vec::new(),
            passed: false,
            diagnostic: Some(diagnostic),
            nonsmooth: 0,
        }
    }
}

pub type BuildFn = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// A differentiable computation at a concrete point. `build` receives one
/// leaf per entry of `point`, in order.
pub struct OpInstance {
    pub names: Vec<String>,
    pub point: Vec<Tensor>,
    pub build: BuildFn,
}

impl OpInstance {
    fn eval(&self, point: &[Tensor]) -> Result<(Tensor, Vec<bool>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
        let out = (self.build)(&mut g, &vars)?;
        Ok((g.value(out).clone(), g.kink_pattern()))
    }
}

#[derive(Clone, Copy)]
pub struct RegisteredOp {
    pub name: &'static str,
    pub instantiate: fn(&mut SeededRng) -> Result<OpInstance>,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_EPS)
}

/// Checks one instance along one random set of directions drawn from `seed`.
pub fn vjp_check(
    op: &str,
    instance: &OpInstance,
    opts: &GradCheckOptions,
    seed: u64,
) -> GradCheckReport {
    match check_point(instance, opts, seed) {
        Ok(tensors) => {
            let passed = tensors.iter().all(|t| t.max_rel_error < opts.tolerance);
            GradCheckReport {
                op: op.to_string(),
                step: opts.step,
                tolerance: opts.tolerance,
                points: 1,
                tensors,
                passed,
                diagnostic: None,
                nonsmooth: 0,
            }
        }
        Err(PointError::NonSmooth(name)) => GradCheckReport {
            nonsmooth: 1,
            ..GradCheckReport::failed(
                op,
                opts,
                format!("difference along {name} crosses the ARF kink"),
            )
        },
        Err(PointError::Invalid(msg)) => GradCheckReport::failed(op, opts, msg),
    }
}

enum PointError {
    /// The probe straddles a kink; the named tensor was being perturbed.
    NonSmooth(String),
    Invalid(String),
}

impl From<String> for PointError {
    fn from(msg: String) -> Self {
        PointError::Invalid(msg)
    }
}

fn check_point(
    instance: &OpInstance,
    opts: &GradCheckOptions,
    seed: u64,
) -> core::result::Result<Vec<TensorCheck>, PointError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = instance.point.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (instance.build)(&mut g, &vars).map_err(|e| e.to_string())?;
    if !g.value(out).is_finite() {
        return Err("non-finite output at the check point".to_string().into());
    }
    let pattern = g.kink_pattern();
    let mut rng = SeededRng::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    let u = rng.normal_tensor(g.dims(out));
    let grads = g.backward(out, u.clone()).map_err(|e| e.to_string())?;

    let mut checks = Vec::with_capacity(vars.len());
    for (i, (&var, x)) in vars.iter().zip(&instance.point).enumerate() {
        let v = rng.normal_tensor(x.dims());
        let mut analytic = grads.get_or_zeros(var, x.dims()).dot(&v);
        if opts.corrupt_analytic {
            analytic = analytic * 1.01 + 1e-3;
        }
        let h = opts.step * x.max_abs().max(1.0);
        let side = |sign: f64| -> core::result::Result<f64, PointError> {
            let mut point = instance.point.clone();
            point[i] = x.axpy(sign * h, &v);
            let (y, kinks) = instance.eval(&point).map_err(|e| e.to_string())?;
            if !y.is_finite() {
                return Err(format!("non-finite output perturbing {}", instance.names[i]).into());
            }
            if kinks != pattern {
                return Err(PointError::NonSmooth(instance.names[i].clone()));
            }
            Ok(y.dot(&u))
        };
        let numeric = (side(1.0)? - side(-1.0)?) / (2.0 * h);
        if !analytic.is_finite() {
            return Err(format!("non-finite gradient for {}", instance.names[i]).into());
        }
        checks.push(TensorCheck {
            name: instance.names[i].clone(),
            max_rel_error: rel_error(analytic, numeric),
        });
    }
    Ok(checks)
}

/// Gives up after this many replacements per requested point.
const MAX_NONSMOOTH_PER_POINT: usize = 10;

/// Runs `op` at `points` seeded random points and keeps, per tensor, the
/// largest relative error seen. Points whose difference straddles the ARF
/// kink are replaced by the next point of the seed sequence.
pub fn check_op(
    op: &RegisteredOp,
    opts: &GradCheckOptions,
    points: usize,
    seed: u64,
) -> GradCheckReport {
    let mut merged: Option<GradCheckReport> = None;
    let mut nonsmooth = 0;
    let mut k = 0u64;
    while merged.as_ref().map_or(0, |m| m.points) < points {
        if nonsmooth > points * MAX_NONSMOOTH_PER_POINT {
            return GradCheckReport {
                nonsmooth,
                ..GradCheckReport::failed(op.name, opts, format!("{nonsmooth} non-smooth points"))
            };
        }
        let point_seed = seed.wrapping_mul(1_000_003).wrapping_add(k);
        k += 1;
        let mut rng = SeededRng::new(point_seed);
        let instance = match (op.instantiate)(&mut rng) {
            Ok(i) => i,
            Err(e) => return GradCheckReport::failed(op.name, opts, e.to_string()),
        };
        let report = vjp_check(op.name, &instance, opts, point_seed);
        if report.nonsmooth > 0 {
            nonsmooth += 1;
            continue;
        }
        if report.diagnostic.is_some() {
            return report;
        }
        merged = Some(match merged {
            None => report,
            Some(mut m) => {
                for (acc, t) in m.tensors.iter_mut().zip(report.tensors) {
                    acc.max_rel_error = acc.max_rel_error.max(t.max_rel_error);
                }
                m.points += 1;
                m.passed &= report.passed;
                m
            }
        });
    }
    match merged {
        Some(m) => GradCheckReport { nonsmooth, ..m },
        None => GradCheckReport::failed(op.name, opts, "no points requested".to_string()),
    }
}

/// Every differentiable op, block and the end-to-end pipeline.
pub fn registered_ops() -> Vec<RegisteredOp> {
    macro_rules! op {
        ($name:literal, $f:expr) => {
            RegisteredOp {
                name: $name,
                instantiate: $f,
            }
        };
    }
    vec![
        op!("matmul", matmul),
        op!("linear", linear),
        op!("conv2d_1x1", |r| conv(r, (1, 1), (1, 1))),
        op!("conv2d_3x3", |r| conv(r, (3, 3), (1, 1))),
        op!("conv2d_3x3_dilated", |r| conv(r, (3, 3), (2, 2))),
        op!("conv2d_3x1", |r| conv(r, (3, 1), (1, 1))),
        op!("conv2d_1x3", |r| conv(r, (1, 3), (1, 1))),
        op!("layer_norm", layer_norm),
        op!("conv2d_layer_norm", conv_layer_norm),
        op!("softmax_rows", |r| unary(r, &[2, 3], |g, x| Ok(
            g.softmax(x)
        ))),
        op!("gelu", |r| unary(r, &[3, 4], |g, x| Ok(
            g.activate(x, Pointwise::Gelu)
        ))),
        op!("tanh", |r| unary(r, &[3, 4], |g, x| Ok(
            g.activate(x, Pointwise::Tanh)
        ))),
        op!("arf", arf),
        op!("mlp", mlp),
        op!("transpose", |r| unary(r, &[2, 3, 4], |g, x| g.transpose(x))),
        op!("sum_last", |r| unary(r, &[2, 3, 4], |g, x| Ok(
            g.sum_last(x)
        ))),
        op!("norm", |r| unary(r, &[2, 3, 3], |g, x| Ok(g.norm(x)))),
        op!("upsample", |r| unary(r, &[2, 2, 3], |g, x| g
            .upsample(x, 4, 5))),
        op!("downsample", |r| unary(r, &[2, 5, 4], |g, x| g
            .downsample(x, 2))),
        op!("concat_slice", concat_slice),
        op!("recouple", recouple),
        op!("attention", attention),
        op!("decouple", decouple),
        op!("decouple_loss", decouple_loss),
        op!("mma", mma),
        op!("mga", mga),
        op!("isp_block", isp_block),
        op!("cdi_block", cdi_block),
        op!("sdtp", sdtp),
    ]
}

/// Looks up registered ops by name; unknown names are returned as errors.
pub fn select_ops(names: &[String]) -> core::result::Result<Vec<RegisteredOp>, String> {
    let all = registered_ops();
    names
        .iter()
        .map(|n| {
            all.iter()
                .find(|op| op.name == n)
                .copied()
                .ok_or_else(|| n.clone())
        })
        .collect()
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn unary(
    rng: &mut SeededRng,
    dims: &[usize],
    f: fn(&mut Graph, Var) -> Result<Var>,
) -> Result<OpInstance> {
    Ok(OpInstance {
        names: names(&["x"]),
        point: vec![rng.normal_tensor(dims)],
        build: Box::new(move |g, v| f(g, v[0])),
    })
}

fn matmul(rng: &mut SeededRng) -> Result<OpInstance> {
    Ok(OpInstance {
        names: names(&["a", "b"]),
        point: vec![rng.normal_tensor(&[3, 4]), rng.normal_tensor(&[4, 2])],
        build: Box::new(|g, v| g.matmul(v[0], v[1])),
    })
}

fn linear(rng: &mut SeededRng) -> Result<OpInstance> {
    Ok(OpInstance {
        names: names(&["x", "weight", "bias"]),
        point: vec![
            rng.normal_tensor(&[3, 4]),
            rng.normal_tensor(&[4, 5]),
            rng.normal_tensor(&[5]),
        ],
        build: Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            g.add_bias(y, v[2])
        }),
    })
}

fn conv(
    rng: &mut SeededRng,
    kernel: (usize, usize),
    dilation: (usize, usize),
) -> Result<OpInstance> {
    Ok(OpInstance {
        names: names(&["input", "weight", "bias"]),
        point: vec![
            rng.normal_tensor(&[2, 5, 5]),
            rng.normal_tensor(&[3, 2, kernel.0, kernel.1]),
            rng.normal_tensor(&[3]),
        ],
        build: Box::new(move |g, v| g.conv2d(v[0], v[1], Some(v[2]), dilation)),
    })
}

fn layer_norm(rng: &mut SeededRng) -> Result<OpInstance> {
    Ok(OpInstance {
        names: names(&["x", "gain", "bias"]),
        point: vec![
            rng.normal_tensor(&[4, 6]),
            rng.normal_tensor(&[6]),
            rng.normal_tensor(&[6]),
        ],
        build: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
    })
}

fn conv_layer_norm(rng: &mut SeededRng) -> Result<OpInstance> {
    Ok(OpInstance {
        names: names(&["input", "weight", "gain", "bias"]),
        point: vec![
            rng.normal_tensor(&[3, 4, 4]),
            rng.normal_tensor(&[3, 3, 3, 3]),
            rng.normal_tensor(&[16]),
            rng.normal_tensor(&[16]),
        ],
        build: Box::new(|g, v| {
            let y = g.conv2d(v[0], v[1], None, (1, 1))?;
            // normalize each channel's 16 spatial entries
            let y = g.reshape(y, &[3, 16])?;
            g.layer_norm(y, v[2], v[3])
        }),
    })
}

fn arf(rng: &mut SeededRng) -> Result<OpInstance> {
    // entries are kept at least 0.05 away from the kink at 0
    let x = rng
        .normal_tensor(&[3, 4])
        .map(|v| if v < 0.0 { v - 0.05 } else { v + 0.05 });
    let tau = rng.uniform(0.0, 3.0);
    Ok(OpInstance {
        names: names(&["x"]),
        point: vec![x],
        build: Box::new(move |g, v| Ok(g.activate(v[0], Pointwise::Arf(tau)))),
    })
}

fn concat_slice(rng: &mut SeededRng) -> Result<OpInstance> {
    Ok(OpInstance {
        names: names(&["a", "b"]),
        point: vec![rng.normal_tensor(&[2, 3]), rng.normal_tensor(&[3, 3])],
        build: Box::new(|g, v| {
            let rows = g.concat_rows(&[v[0], v[1]])?;
            let cols = g.concat_cols(&[rows, rows])?;
            let s = g.slice_rows(cols, 1, 3)?;
            g.slice_cols(s, 2, 3)
        }),
    })
}

fn recouple(rng: &mut SeededRng) -> Result<OpInstance> {
    Ok(OpInstance {
        names: names(&["y", "x"]),
        point: vec![rng.normal_tensor(&[2, 3, 1]), rng.normal_tensor(&[2, 1, 4])],
        build: Box::new(|g, v| g.kron_sum(v[0], v[1])),
    })
}

fn decouple_loss(rng: &mut SeededRng) -> Result<OpInstance> {
    Ok(OpInstance {
        names: names(&["c_a", "y_a", "x_a", "c_b", "y_b", "x_b"]),
        point: vec![
            rng.normal_tensor(&[2, 3, 4]),
            rng.normal_tensor(&[2, 3, 1]),
            rng.normal_tensor(&[2, 1, 4]),
            rng.normal_tensor(&[2, 2, 2]),
            rng.normal_tensor(&[2, 2, 1]),
            rng.normal_tensor(&[2, 1, 2]),
        ],
        build: Box::new(|g, v| decouple_loss_on(g, &[v[0], v[3]], &[(v[1], v[2]), (v[4], v[5])])),
    })
}

/// Inputs followed by every parameter of `store`; `build` gets the inputs
/// and the parameter bindings.
fn with_params(
    input_names: &[&str],
    inputs: Vec<Tensor>,
    store: &ParamStore,
    build: impl Fn(&mut Graph, &[Var], &Bindings) -> Result<Var> + 'static,
) -> OpInstance {
    let n = inputs.len();
    let mut names = names(input_names);
    let mut point = inputs;
    for id in store.ids() {
        names.push(store.name(id).to_string());
        point.push(store.get(id).clone());
    }
    OpInstance {
        names,
        point,
        build: Box::new(move |g, v| {
            let p = Bindings::from_vars(v[n..].to_vec());
            build(g, &v[..n], &p)
        }),
    }
}

fn default_activation() -> AttentionActivation {
    AttentionActivation::Arf(ArfParams::default())
}

fn mlp(rng: &mut SeededRng) -> Result<OpInstance> {
    let mut store = ParamStore::new();
    let m = Mlp::new(&mut store, rng, "mlp", 4, 2.0)?;
    let x = rng.normal_tensor(&[3, 4]);
    Ok(with_params(&["x"], vec![x], &store, move |g, v, p| {
        m.forward(g, p, v[0])
    }))
}

fn attention(rng: &mut SeededRng) -> Result<OpInstance> {
    let mut store = ParamStore::new();
    let a = AttentionWeights::new(&mut store, rng, "attn", 4, 2)?;
    let q = rng.normal_tensor(&[3, 4]);
    let kv = rng.normal_tensor(&[5, 4]);
    Ok(with_params(
        &["queries", "sources"],
        vec![q, kv],
        &store,
        move |g, v, p| Ok(a.attend(g, p, &[v[0]], &[v[1]], default_activation())?[0]),
    ))
}

fn decouple(rng: &mut SeededRng) -> Result<OpInstance> {
    let mut store = ParamStore::new();
    let d = Decoupler::new(&mut store, rng, "decouple", 3);
    let c = rng.normal_tensor(&[3, 4, 5]);
    Ok(with_params(&["level"], vec![c], &store, move |g, v, p| {
        let (y, x) = d.forward(g, p, v[0])?;
        g.kron_sum(y, x)
    }))
}

fn mma(rng: &mut SeededRng) -> Result<OpInstance> {
    let mut store = ParamStore::new();
    let a = AttentionWeights::new(&mut store, rng, "attn", 4, 2)?;
    let states = vec![
        rng.normal_tensor(&[4, 3, 3]),
        rng.normal_tensor(&[4, 3, 3]),
        rng.normal_tensor(&[4, 3, 3]),
    ];
    Ok(with_params(
        &["m1", "m3", "m6"],
        states,
        &store,
        move |g, v, p| mma_on(g, p, &a, v, default_activation()),
    ))
}

fn mga(rng: &mut SeededRng) -> Result<OpInstance> {
    let mut store = ParamStore::new();
    let a = AttentionWeights::new(&mut store, rng, "attn", 4, 2)?;
    let tokens = vec![
        rng.normal_tensor(&[4, 4]),
        rng.normal_tensor(&[2, 4]),
        rng.normal_tensor(&[1, 4]),
    ];
    Ok(with_params(
        &["t2", "t3", "t4"],
        tokens,
        &store,
        move |g, v, p| {
            let out = mga_on(g, p, &a, v, default_activation())?;
            g.concat_rows(&out)
        },
    ))
}

fn isp_block(rng: &mut SeededRng) -> Result<OpInstance> {
    let mut store = ParamStore::new();
    let config = IspConfig {
        heads: 2,
        ..IspConfig::default()
    };
    let block = IspBlock::new(&mut store, rng, "isp", (4, 3, 3), &config)?;
    let x = rng.normal_tensor(&[4, 3, 3]);
    Ok(with_params(&["c5"], vec![x], &store, move |g, v, p| {
        block.forward(g, p, v[0], default_activation())
    }))
}

fn cdi_block(rng: &mut SeededRng) -> Result<OpInstance> {
    let mut store = ParamStore::new();
    let config = CdiConfig {
        heads: 2,
        levels: vec![2, 3],
        ..CdiConfig::default()
    };
    let block = CdiBlock::new(&mut store, rng, "cdi", 4, &config)?;
    let levels = vec![rng.normal_tensor(&[4, 4, 4]), rng.normal_tensor(&[4, 2, 2])];
    Ok(with_params(
        &["c2", "c3"],
        levels,
        &store,
        move |g, v, p| {
            let out = block.forward(g, p, v, default_activation())?;
            flatten_concat(g, &out.levels, Some(out.dep_loss))
        },
    ))
}

fn sdtp(rng: &mut SeededRng) -> Result<OpInstance> {
    let channels = 4;
    let config = PipelineConfig {
        variant: Variant::Sdtp,
        channels,
        isp: IspConfig {
            heads: 2,
            ..IspConfig::default()
        },
        cdi: CdiConfig {
            heads: 2,
            ..CdiConfig::default()
        },
        activation: default_activation(),
        seed: rng.uniform(0.0, 1e9) as u64,
    };
    let shape = PyramidShape::halving(2, 4, 4, &[3, 4, 5, 6]);
    let pipeline = build_variant(&config, &shape)?;
    let inputs = shape
        .synthesize(rng)
        .maps()
        .iter()
        .map(|m| m.tensor().clone())
        .collect();
    Ok(with_params(
        &["c2", "c3", "c4", "c5"],
        inputs,
        &pipeline.store.clone(),
        move |g, v, p| {
            let out = pipeline.forward_on(g, p, v)?;
            flatten_concat(g, &out.levels, out.dep_loss)
        },
    ))
}

/// All maps flattened to one row, followed by the optional scalar.
fn flatten_concat(g: &mut Graph, maps: &[Var], extra: Option<Var>) -> Result<Var> {
    let mut rows = Vec::with_capacity(maps.len() + 1);
    for &m in maps.iter().chain(extra.as_ref()) {
        let n = g.value(m).len();
        rows.push(g.reshape(m, &[1, n])?);
    }
    g.concat_cols(&rows)
}
