//! Subcommand bodies. Each returns a report and whether its checks passed.

use sdtp_core::complexity::FlopsTable;
use sdtp_core::gradcheck::{check_op, registered_ops, select_ops};
use sdtp_core::{build_variant, sensitivity_from, SeededRng, Variant};

use crate::config::{Config, FIRST_LEVEL};
use crate::report::*;
use crate::CliError;

pub struct Outcome {
    pub report: RunReport,
    pub passed: bool,
    /// Failure summary for stderr.
    pub message: Option<String>,
}

impl Outcome {
    fn ok(report: RunReport) -> Self {
        Outcome {
            report,
            passed: true,
            message: None,
        }
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn forward(cfg: &Config) -> Result<Outcome, CliError> {
    let shape = cfg.pyramid_shape()?;
    let pipeline = build_variant(&cfg.pipeline()?, &shape)?;
    let inputs = shape.synthesize(&mut SeededRng::new(cfg.seed));
    let (outputs, dep_loss) = pipeline.forward(&inputs)?;

    let levels = inputs
        .maps()
        .iter()
        .zip(outputs.maps())
        .enumerate()
        .map(|(k, (x, y))| {
            let d = y.data();
            let n = d.len() as f64;
            let (xc, xh, xw) = x.shape();
            let (yc, yh, yw) = y.shape();
            LevelReport {
                level: FIRST_LEVEL + k,
                input: [xc, xh, xw],
                output: [yc, yh, yw],
                output_mean: d.iter().sum::<f64>() / n,
                output_rms: (d.iter().map(|v| v * v).sum::<f64>() / n).sqrt(),
            }
        })
        .collect();

    // probe from the input the variant is known to read
    let from = match pipeline.variant() {
        Variant::SingleInput(l) => l,
        _ => inputs.top_level(),
    };
    let sens: Vec<Sensitivity> = sensitivity_from(&pipeline, &inputs, from, 1.0)?
        .into_iter()
        .enumerate()
        .map(|(k, value)| Sensitivity {
            from,
            to: FIRST_LEVEL + k,
            value,
        })
        .filter(|s| s.to != from)
        .collect();
    let isolated = sens.iter().all(|s| s.value == 0.0);

    let mut report = RunReport::new("forward", cfg);
    report.forward = Some(ForwardReport {
        variant: pipeline.variant().name(),
        levels,
        dep_loss,
        cross_level_sensitivity: sens,
        cross_level_isolated: isolated,
    });
    Ok(Outcome::ok(report))
}

pub fn flops(cfg: &Config) -> Result<Outcome, CliError> {
    let table = FlopsTable::new(FIRST_LEVEL, &cfg.flops_dims()?);
    let mut report = RunReport::new("flops", cfg);
    report.flops = Some(FlopsReport {
        unit: "multiply-accumulates, attention core only".into(),
        levels: table
            .levels
            .iter()
            .map(|l| FlopsRow {
                level: l.level,
                h: l.dims.h,
                w: l.dims.w,
                c: l.dims.c,
                s: l.dims.s,
                p_msa: l.p_msa,
                s_msa: l.s_msa,
                d_msa: l.d_msa,
            })
            .collect(),
        total_p_msa: table.total_p_msa,
        total_s_msa: table.total_s_msa,
        total_d_msa: table.total_d_msa,
        ordering_holds: table.ordering_holds(),
    });
    Ok(Outcome::ok(report))
}

pub fn gradcheck(cfg: &Config, corrupt: bool) -> Result<Outcome, CliError> {
    let mut opts = cfg.gradcheck_options()?;
    opts.corrupt_analytic = corrupt;
    let ops = if cfg.gradcheck.ops.is_empty() {
        registered_ops()
    } else {
        select_ops(&cfg.gradcheck.ops).map_err(|name| CliError::Config {
            field: "gradcheck.ops".into(),
            reason: format!("no registered op named `{name}`"),
        })?
    };
    let checks: Vec<OpCheck> = ops
        .iter()
        .map(|op| {
            let r = check_op(op, &opts, cfg.gradcheck.points, cfg.seed);
            OpCheck {
                op: r.op.clone(),
                points: r.points,
                max_rel_error: finite(r.max_rel_error()),
                worst_tensor: r.worst().map(|t| t.name.clone()),
                passed: r.passed,
                diagnostic: r.diagnostic.clone(),
                nonsmooth_replaced: r.nonsmooth,
                tensors: r
                    .tensors
                    .iter()
                    .map(|t| TensorError {
                        name: t.name.clone(),
                        max_rel_error: finite(t.max_rel_error),
                    })
                    .collect(),
            }
        })
        .collect();
    let passed = checks.iter().all(|c| c.passed);
    let worst = checks
        .iter()
        .find(|c| !c.passed && c.max_rel_error.is_none())
        .or_else(|| {
            checks.iter().max_by(|a, b| {
                let key = |c: &OpCheck| c.max_rel_error.unwrap_or(f64::INFINITY);
                key(a).total_cmp(&key(b))
            })
        })
        .map(|c| match &c.worst_tensor {
            Some(t) => format!("{} ({t})", c.op),
            None => c.op.clone(),
        });
    let message = (!passed).then(|| {
        let failed = checks.iter().filter(|c| !c.passed).count();
        format!(
            "gradient check failed for {failed} of {} ops; worst offender {}",
            checks.len(),
            worst.as_deref().unwrap_or("unknown")
        )
    });
    let mut report = RunReport::new("gradcheck", cfg);
    report.gradcheck = Some(GradcheckReport {
        tolerance: opts.tolerance,
        step: opts.step,
        points: cfg.gradcheck.points,
        corrupted: corrupt,
        ops: checks,
        passed,
        worst,
    });
    Ok(Outcome {
        report,
        passed,
        message,
    })
}

pub fn train(cfg: &Config) -> Result<Outcome, CliError> {
    let task = cfg.toy_task()?;
    let trace = task.run()?;
    let ratio = match (trace.initial(), trace.last()) {
        (Some(a), Some(b)) if a != 0.0 => Some(b / a),
        _ => None,
    };
    let message = trace
        .diverged_at
        .map(|s| format!("loss became non-finite at step {s}"));
    let mut report = RunReport::new("train", cfg);
    report.train = Some(TrainReport {
        variant: task.variant.name(),
        steps: task.steps,
        lr: task.lr,
        lambda: task.lambda,
        initial_loss: trace.initial(),
        final_loss: trace.last(),
        ratio,
        diverged_at: trace.diverged_at,
        trace: trace
            .steps
            .iter()
            .map(|s| TraceStep {
                task_loss: s.task_loss,
                dep_loss: s.dep_loss,
                total_loss: s.total_loss,
            })
            .collect(),
    });
    Ok(Outcome {
        report,
        passed: message.is_none(),
        message,
    })
}

pub fn variants(cfg: &Config) -> Outcome {
    let described = [
        ("sdtp", "intra-level promotion on the top level, cross-level decoupled interaction, top-down decoder"),
        ("fpn_baseline", "lateral 1x1, top-down nearest upsampling and sum, 3x3 smoothing"),
        ("single_input(N)", "only level N is read; other levels are resampled from it"),
        ("dilated_c5", "baseline with a residual rate-3 dilated conv on the top level"),
        ("no_interaction", "per-level 1x1 and 3x3 only, no top-down path"),
    ];
    let mut report = RunReport::new("variants", cfg);
    report.variants = Some(
        described
            .iter()
            .map(|(n, d)| VariantInfo {
                name: (*n).into(),
                description: (*d).into(),
            })
            .collect(),
    );
    Outcome::ok(report)
}
