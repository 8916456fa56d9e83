use std::fmt::Write as _;

use crate::train::eval::HeadAccuracy;

/// One logged training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    pub step: u64,
    /// Unit-cost makespan of the pipeline up to and including this step.
    pub time_logical: u64,
    /// Seconds since the run started, when wall-time logging is on.
    pub time_wall: Option<f64>,
    pub lr: f64,
    /// `losses[k - 1]`: this batch's loss at head `k`.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    pub train: HeadAccuracy,
    pub test: Option<HeadAccuracy>,
}

/// Per-component staleness actually observed during a run.
#[derive(Clone, Debug, PartialEq)]
pub struct StalenessStat {
    pub mean: f64,
    pub max: usize,
}

impl StalenessStat {
    pub fn from_values(values: &[usize]) -> Self {
        let max = values.iter().copied().max().unwrap_or(0);
        let mean = if values.is_empty() { 0.0 } else { values.iter().sum::<usize>() as f64 / values.len() as f64 };
        StalenessStat { mean, max }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub components: usize,
    /// Strictly increasing in `step`.
    pub steps: Vec<StepRow>,
    pub evals: Vec<EvalRow>,
    /// Filled for hogwild runs.
    pub staleness: Option<Vec<StalenessStat>>,
    /// Evaluation of the model returned by the run.
    pub final_eval: Option<EvalRow>,
    pub elapsed_secs: f64,
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunMetrics {
    pub fn new(components: usize) -> Self {
        RunMetrics { components, ..Default::default() }
    }

    pub fn last_losses(&self) -> Option<&[f64]> {
        self.steps.last().map(|r| r.losses.as_slice())
    }

    /// Mean of head `k`'s loss over the last `window` logged steps.
    pub fn tail_loss(&self, k: usize, window: usize) -> f64 {
        let tail = &self.steps[self.steps.len().saturating_sub(window)..];
        tail.iter().map(|r| r.losses[k - 1]).sum::<f64>() / tail.len().max(1) as f64
    }

    pub fn metrics_header(n: usize) -> String {
        let mut h = String::from("step,time_logical,time_wall,lr");
        for k in 1..=n {
            write!(h, ",loss_c{k}").unwrap();
        }
        h
    }

    /// `step,time_logical,time_wall,lr,loss_c1..loss_cn`. Floats use the
    /// shortest exact decimal form, so equal runs give equal bytes.
    pub fn metrics_csv(&self) -> String {
        let mut s = Self::metrics_header(self.components);
        s.push('\n');
        for r in &self.steps {
            let wall = r.time_wall.map(|t| format!("{t:.6}")).unwrap_or_default();
            writeln!(s, "{},{},{},{},{}", r.step, r.time_logical, wall, r.lr, join_floats(&r.losses)).unwrap();
        }
        s
    }

    pub fn eval_header(n: usize) -> String {
        let mut h = String::from("step,split");
        for k in 1..=n {
            write!(h, ",acc_c{k}").unwrap();
        }
        for m in 1..=n {
            write!(h, ",ensemble_top{m}").unwrap();
        }
        h
    }

    /// `step,split,acc_c1..acc_cn,ensemble_top1..ensemble_topn`, one row per split.
    pub fn eval_csv(&self) -> String {
        let mut s = Self::eval_header(self.components);
        s.push('\n');
        for e in &self.evals {
            let mut row = |split: &str, acc: &HeadAccuracy| {
                writeln!(s, "{},{split},{},{}", e.step, join_floats(&acc.per_head), join_floats(&acc.ensemble)).unwrap();
            };
            row("train", &e.train);
            if let Some(t) = &e.test {
                row("test", t);
            }
        }
        s
    }
}
