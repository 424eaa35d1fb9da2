//! Machine-readable run reports and their text renderings.
//!
//! Reports hold no timestamps or timings unless `wall_time_s` is filled in
//! explicitly, so the same config and seed give byte-identical JSON.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::Config;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub seed: u64,
    pub config: Config,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forward: Option<ForwardReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops: Option<FlopsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gradcheck: Option<GradcheckReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<VariantInfo>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl RunReport {
    pub fn new(command: &str, config: &Config) -> Self {
        RunReport {
            command: command.into(),
            seed: config.seed,
            config: config.clone(),
            forward: None,
            flops: None,
            gradcheck: None,
            train: None,
            variants: None,
            wall_time_s: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    /// `[c, h, w]`
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub output_mean: f64,
    pub output_rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub from: usize,
    pub to: usize,
    /// Largest absolute output change for a unit perturbation of one cell.
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardReport {
    pub variant: String,
    pub levels: Vec<LevelReport>,
    pub dep_loss: f64,
    pub cross_level_sensitivity: Vec<Sensitivity>,
    /// True when no other output level reacts to the probed input level.
    pub cross_level_isolated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub level: usize,
    pub h: u64,
    pub w: u64,
    pub c: u64,
    pub s: u64,
    pub p_msa: u64,
    pub s_msa: u64,
    pub d_msa: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub unit: String,
    pub levels: Vec<FlopsRow>,
    pub total_p_msa: u64,
    pub total_s_msa: u64,
    pub total_d_msa: u64,
    /// `d_msa < s_msa < p_msa` on the totals.
    pub ordering_holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorError {
    pub name: String,
    /// `None` when the error was not finite.
    pub max_rel_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub points: usize,
    pub max_rel_error: Option<f64>,
    pub worst_tensor: Option<String>,
    pub passed: bool,
    pub diagnostic: Option<String>,
    /// Points replaced because the difference straddled the ARF kink.
    pub nonsmooth_replaced: usize,
    pub tensors: Vec<TensorError>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub points: usize,
    pub corrupted: bool,
    pub ops: Vec<OpCheck>,
    pub passed: bool,
    /// Op with the largest error (or the first failure without one).
    pub worst: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub task_loss: f64,
    pub dep_loss: f64,
    pub total_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: String,
    pub steps: usize,
    pub lr: f64,
    pub lambda: f64,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub ratio: Option<f64>,
    pub diverged_at: Option<usize>,
    pub trace: Vec<TraceStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantInfo {
    pub name: String,
    pub description: String,
}

pub fn flops_csv(f: &FlopsReport) -> String {
    let mut s = String::from("level,h,w,c,s,p_msa,s_msa,d_msa\n");
    for r in &f.levels {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.level, r.h, r.w, r.c, r.s, r.p_msa, r.s_msa, r.d_msa
        );
    }
    let _ = writeln!(
        s,
        "total,,,,,{},{},{}",
        f.total_p_msa, f.total_s_msa, f.total_d_msa
    );
    s
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.3e}"))
}

/// Human-readable summary for the terminal.
pub fn render_table(r: &RunReport) -> String {
    let mut s = String::new();
    if let Some(f) = &r.forward {
        let _ = writeln!(s, "variant {}  seed {}", f.variant, r.seed);
        let _ = writeln!(
            s,
            "{:>5}  {:>15}  {:>15}  {:>12}  {:>12}",
            "level", "input c×h×w", "output c×h×w", "mean", "rms"
        );
        for l in &f.levels {
            let dims = |d: [usize; 3]| format!("{}×{}×{}", d[0], d[1], d[2]);
            let _ = writeln!(
                s,
                "{:>5}  {:>15}  {:>15}  {:>12.5e}  {:>12.5e}",
                l.level,
                dims(l.input),
                dims(l.output),
                l.output_mean,
                l.output_rms
            );
        }
        let _ = writeln!(s, "dep_loss {:.6e}", f.dep_loss);
        for c in &f.cross_level_sensitivity {
            let _ = writeln!(s, "sensitivity {} -> {}: {:.3e}", c.from, c.to, c.value);
        }
        let _ = writeln!(s, "cross-level isolated: {}", f.cross_level_isolated);
    }
    if let Some(f) = &r.flops {
        let _ = writeln!(s, "attention cost in {}", f.unit);
        let _ = writeln!(
            s,
            "{:>5}  {:>5}  {:>5}  {:>5}  {:>3}  {:>18}  {:>18}  {:>18}",
            "level", "h", "w", "c", "s", "p-MSA", "s-MSA", "d-MSA"
        );
        for l in &f.levels {
            let _ = writeln!(
                s,
                "{:>5}  {:>5}  {:>5}  {:>5}  {:>3}  {:>18}  {:>18}  {:>18}",
                l.level, l.h, l.w, l.c, l.s, l.p_msa, l.s_msa, l.d_msa
            );
        }
        let _ = writeln!(
            s,
            "{:>5}  {:>24}  {:>18}  {:>18}  {:>18}",
            "total", "", f.total_p_msa, f.total_s_msa, f.total_d_msa
        );
        let _ = writeln!(s, "d-MSA < s-MSA < p-MSA: {}", f.ordering_holds);
    }
    if let Some(g) = &r.gradcheck {
        let _ = writeln!(
            s,
            "{:<22}  {:>6}  {:>8}  {:>10}  {:<24}  result",
            "op", "points", "replaced", "max rel", "worst tensor"
        );
        for o in &g.ops {
            let _ = writeln!(
                s,
                "{:<22}  {:>6}  {:>8}  {:>10}  {:<24}  {}",
                o.op,
                o.points,
                o.nonsmooth_replaced,
                fmt_opt(o.max_rel_error),
                o.worst_tensor.as_deref().unwrap_or("-"),
                if o.passed { "pass" } else { "FAIL" }
            );
            if let Some(d) = &o.diagnostic {
                let _ = writeln!(s, "  {d}");
            }
        }
        let _ = writeln!(
            s,
            "tolerance {:e}: {}{}",
            g.tolerance,
            if g.passed { "all passed" } else { "FAILED" },
            g.worst
                .as_ref()
                .map_or_else(String::new, |w| format!(" (worst: {w})"))
        );
    }
    if let Some(t) = &r.train {
        let _ = writeln!(
            s,
            "variant {}  steps {}  lr {}  lambda {}",
            t.variant, t.steps, t.lr, t.lambda
        );
        let _ = writeln!(
            s,
            "{:>5}  {:>12}  {:>12}  {:>12}",
            "step", "task", "dep", "total"
        );
        let stride = (t.trace.len() / 10).max(1);
        for (k, st) in t.trace.iter().enumerate() {
            if k % stride == 0 || k + 1 == t.trace.len() {
                let _ = writeln!(
                    s,
                    "{:>5}  {:>12.6e}  {:>12.6e}  {:>12.6e}",
                    k, st.task_loss, st.dep_loss, st.total_loss
                );
            }
        }
        let _ = writeln!(s, "final / initial: {}", fmt_opt(t.ratio));
        if let Some(d) = t.diverged_at {
            let _ = writeln!(s, "diverged at step {d}");
        }
    }
    if let Some(vs) = &r.variants {
        for v in vs {
            let _ = writeln!(s, "{:<16}  {}", v.name, v.description);
        }
    }
    if let Some(t) = r.wall_time_s {
        let _ = writeln!(s, "wall time {t:.3} s");
    }
    s
}
