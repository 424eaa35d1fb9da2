//! Plain gradient descent on a synthetic regression task, used to check that
//! every gradient path of a pipeline is usable for optimization.
//!
//! The task loss is the mean squared error between the output pyramid and a
//! target pyramid; the optimized objective adds `λ ·` the decoupling loss.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::Bindings;
use crate::pyramid::{FeaturePyramid, Pipeline};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStep {
    pub task_loss: f64,
    pub dep_loss: f64,
    pub total_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainTrace {
    pub steps: Vec<TrainStep>,
    /// Step at which the loss stopped being finite, if it did.
    pub diverged_at: Option<usize>,
}

impl TrainTrace {
    pub fn totals(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.total_loss).collect()
    }

    pub fn initial(&self) -> Option<f64> {
        self.steps.first().map(|s| s.total_loss)
    }

    pub fn last(&self) -> Option<f64> {
        self.steps.last().map(|s| s.total_loss)
    }
}

/// Builds the objective for one step. Returns `(total, task, dep)` vars.
fn objective(
    g: &mut Graph,
    pipeline: &Pipeline,
    inputs: &FeaturePyramid,
    targets: &FeaturePyramid,
    lambda: f64,
) -> Result<(Var, Var, Option<Var>, Bindings)> {
    let p = pipeline.store.bind(g);
    let xs: Vec<Var> = inputs
        .maps()
        .iter()
        .map(|m| g.leaf(m.tensor().clone()))
        .collect();
    let out = pipeline.forward_on(g, &p, &xs)?;
    let count: usize = targets.maps().iter().map(|m| m.data().len()).sum();
    let mut sq: Option<Var> = None;
    for (&y, t) in out.levels.iter().zip(targets.maps()) {
        if g.dims(y) != t.tensor().dims() {
            return Err(Error::shape("toy_train", t.tensor().dims(), g.dims(y)));
        }
        let tv = g.leaf(t.tensor().clone());
        let diff = g.sub(y, tv)?;
        let d2 = g.mul(diff, diff)?;
        let s = g.sum_all(d2);
        sq = Some(match sq {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let sq = sq.ok_or_else(|| Error::contract("toy_train", "no output levels"))?;
    let task = g.scale(sq, 1.0 / count as f64);
    let total = match out.dep_loss {
        Some(dep) => {
            let weighted = g.scale(dep, lambda);
            g.add(task, weighted)?
        }
        None => task,
    };
    Ok((total, task, out.dep_loss, p))
}

/// Runs `steps` gradient-descent updates of the pipeline parameters and
/// records the loss before each update. Stops at the first non-finite loss.
pub fn toy_train(
    pipeline: &mut Pipeline,
    inputs: &FeaturePyramid,
    targets: &FeaturePyramid,
    steps: usize,
    lr: f64,
    lambda: f64,
) -> Result<TrainTrace> {
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::config("train.lr", "must be >= 0"));
    }
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::config("cdi.lambda", "must be >= 0"));
    }
    let mut trace = TrainTrace {
        steps: Vec::with_capacity(steps),
        diverged_at: None,
    };
    for step in 0..steps {
        let mut g = Graph::new();
        let (total, task, dep, p) = objective(&mut g, pipeline, inputs, targets, lambda)?;
        let record = TrainStep {
            task_loss: g.value(task).data()[0],
            dep_loss: dep.map_or(0.0, |d| g.value(d).data()[0]),
            total_loss: g.value(total).data()[0],
        };
        if !record.total_loss.is_finite() {
            trace.diverged_at = Some(step);
            break;
        }
        trace.steps.push(record);
        if lr == 0.0 {
            continue;
        }
        let grads = g.backward(total, Tensor::scalar(1.0))?;
        pipeline.store.descend(&p, &grads, lr);
    }
    Ok(trace)
}

/// Two-level regression toy: a `channels × base × base` level and a half-size
/// level above it, regressing each input map onto itself.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub variant: crate::pyramid::Variant,
    pub channels: usize,
    pub base: usize,
    pub heads: usize,
    pub activation: crate::arf::AttentionActivation,
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for ToyTask {
    fn default() -> Self {
        ToyTask {
            variant: crate::pyramid::Variant::Sdtp,
            channels: 8,
            base: 8,
            heads: 2,
            activation: crate::arf::AttentionActivation::default(),
            steps: 200,
            lr: 0.16,
            lambda: 0.01,
            seed: 0,
        }
    }
}

impl ToyTask {
    pub fn shape(&self) -> crate::pyramid::PyramidShape {
        crate::pyramid::PyramidShape::halving(2, self.base, self.base, &[self.channels; 2])
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        let mut cfg = crate::pyramid::PipelineConfig {
            variant: self.variant,
            channels: self.channels,
            activation: self.activation,
            seed: self.seed,
            ..Default::default()
        };
        cfg.isp.heads = self.heads;
        cfg.cdi.heads = self.heads;
        cfg.cdi.lambda = self.lambda;
        cfg.cdi.levels = alloc::vec![2, 3];
        crate::pyramid::build_variant(&cfg, &self.shape())
    }

    pub fn run(&self) -> Result<TrainTrace> {
        let mut pipeline = self.pipeline()?;
        let data = self
            .shape()
            .synthesize(&mut crate::rng::SeededRng::new(self.seed));
        toy_train(
            &mut pipeline,
            &data,
            &data,
            self.steps,
            self.lr,
            self.lambda,
        )
    }
}
