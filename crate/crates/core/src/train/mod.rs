//! Optimization: optimizers, learning-rate schedules, the training loop in
//! reference and pipelined form, and head-ensembled evaluation.

mod eval;
mod lr;
mod metrics;
mod optim;
mod pipeline;
mod reference;

use std::time::Duration;

pub use eval::{ensemble_predictions, evaluate, evaluate_tensors, head_logits, HeadAccuracy, EVAL_CHUNK};
pub use lr::LrSchedule;
pub use metrics::{EvalRow, RunMetrics, StalenessStat, StepRow};
pub use optim::{OptimizerKind, OptimizerState};
pub use reference::StaleSnapshotQueue;

use crate::data::{AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::net::PartitionedModel;
use crate::routing::{assignment, ComponentPlan, RoutingPolicy, Strategy};
use crate::schedule::closed_form_timesteps;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    /// Single-threaded, one batch at a time.
    Reference,
    /// One worker thread per component, exchanging activations and gradients.
    Pipelined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    Steps(u64),
    Epochs(u64),
    /// Largest step count whose unit-cost makespan fits in this many slots.
    LogicalTime(u64),
}

impl Budget {
    pub fn resolve(&self, strategy: Strategy, n: usize, steps_per_epoch: usize) -> Result<u64> {
        let steps = match *self {
            Budget::Steps(s) => s,
            Budget::Epochs(e) => e * steps_per_epoch as u64,
            Budget::LogicalTime(t) => {
                let cost = |b: u64| closed_form_timesteps(strategy, n, b as usize);
                if cost(1)? > t {
                    return Err(Error::Config(format!("logical time budget {t} is below one step ({})", cost(1)?)));
                }
                // Makespans grow linearly in b, so double then bisect.
                let mut hi = 1;
                while cost(hi * 2)? <= t {
                    hi *= 2;
                }
                let (mut lo, mut hi) = (hi, hi * 2);
                while hi - lo > 1 {
                    let mid = (lo + hi) / 2;
                    if cost(mid)? <= t {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                lo
            }
        };
        if steps == 0 {
            return Err(Error::Config("training budget resolves to zero steps".into()));
        }
        Ok(steps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub policy: RoutingPolicy,
    /// Per-loss weights; `None` means 1 for every head.
    pub loss_weights: Option<Vec<f64>>,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub budget: Budget,
    pub seed: u64,
    pub mode: ExecMode,
    pub augment: AugmentPolicy,
    /// Evaluate every this many steps; 0 disables periodic evaluation.
    pub eval_every: u64,
    /// Include the test split in periodic evaluations.
    pub eval_test: bool,
    /// Train auxiliary heads under hogwild. Bodies follow the final loss either way.
    pub hogwild_aux_heads: bool,
    /// Pipelined mode sleeps this long per forward or backward box.
    pub phase_delay: Option<Duration>,
    pub log_wall_time: bool,
}

impl TrainConfig {
    pub fn new(policy: RoutingPolicy, optimizer: OptimizerKind, schedule: LrSchedule, batch_size: usize, steps: u64) -> Self {
        TrainConfig {
            policy,
            loss_weights: None,
            optimizer,
            schedule,
            batch_size,
            budget: Budget::Steps(steps),
            seed: 0,
            mode: ExecMode::Reference,
            augment: AugmentPolicy::identity(),
            eval_every: 0,
            eval_test: true,
            hogwild_aux_heads: false,
            phase_delay: None,
            log_wall_time: false,
        }
    }

    fn weights(&self, n: usize) -> Result<Vec<f64>> {
        match &self.loss_weights {
            None => Ok(vec![1.0; n]),
            Some(w) if w.len() == n && w.iter().all(|x| x.is_finite() && *x >= 0.0) => Ok(w.clone()),
            Some(w) => Err(Error::Config(format!("need {n} non-negative loss weights, got {w:?}"))),
        }
    }
}

/// Model, metrics, and the error that stopped the run early, if any. Metrics
/// cover every step completed before the failure.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: PartitionedModel,
    pub metrics: RunMetrics,
    pub steps: u64,
    pub failure: Option<Error>,
}

/// Wall clock for logging. Browsers give wasm no monotonic clock, so there
/// it always reads zero.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stopwatch(#[cfg(not(target_arch = "wasm32"))] std::time::Instant);

impl Stopwatch {
    pub fn start() -> Self {
        Stopwatch(
            #[cfg(not(target_arch = "wasm32"))]
            std::time::Instant::now(),
        )
    }

    pub fn secs(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.0.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        0.0
    }
}

/// Everything both execution modes derive from the config.
pub(crate) struct Setup {
    pub n: usize,
    pub steps: u64,
    pub steps_per_epoch: usize,
    pub plans: Vec<ComponentPlan>,
    /// `frozen[k - 1][p]`: parameter `p` of component `k` is never updated.
    pub frozen: Vec<Vec<bool>>,
    pub start: Stopwatch,
}

impl Setup {
    fn new(model: &PartitionedModel, data: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let n = model.len();
        let strategy = cfg.policy.strategy;
        strategy.validate()?;
        match strategy {
            Strategy::NWise(big_n) if big_n > n => {
                return Err(Error::Config(format!("n_wise({big_n}) needs at most {n} components")));
            }
            Strategy::GroupedLocal(g) if g > n => {
                return Err(Error::Config(format!("grouped_local({g}) needs at most {n} components")));
            }
            _ => {}
        }
        cfg.schedule.validate()?;
        let first = &model.components[0];
        if data.sample_shape() != first.input_shape.as_slice() {
            return Err(Error::Config(format!(
                "dataset samples are {:?} but the model expects {:?}",
                data.sample_shape(),
                first.input_shape
            )));
        }
        if data.num_classes != model.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes but the model predicts {}",
                data.num_classes, model.num_classes
            )));
        }
        if cfg.batch_size == 0 || cfg.batch_size > data.train_len {
            return Err(Error::Config(format!("batch size {} must be in 1..={}", cfg.batch_size, data.train_len)));
        }
        let steps_per_epoch = data.train_len / cfg.batch_size;
        let steps = cfg.budget.resolve(strategy, n, steps_per_epoch)?;
        let weights = cfg.weights(n)?;
        let a = assignment(&cfg.policy, n);
        let mut plans = ComponentPlan::for_model(&a, &weights);
        let skip_heads = strategy == Strategy::Hogwild && !cfg.hogwild_aux_heads;
        let frozen = model
            .components
            .iter()
            .map(|c| (0..c.params.len()).map(|p| skip_heads && p >= c.body_params).collect())
            .collect();
        if skip_heads {
            for p in &mut plans {
                if !a.traverse(p.k).contains(&p.k) {
                    p.boxes.retain(|&j| j != p.k);
                }
            }
        }
        Ok(Setup { n, steps, steps_per_epoch, plans, frozen, start: Stopwatch::start() })
    }

    pub fn lr(&self, cfg: &TrainConfig, step: u64) -> f64 {
        cfg.schedule.at(step, self.steps_per_epoch)
    }

    pub fn time_logical(&self, cfg: &TrainConfig, step: u64) -> u64 {
        closed_form_timesteps(cfg.policy.strategy, self.n, step as usize).expect("validated strategy")
    }

    pub fn wall(&self, cfg: &TrainConfig) -> Option<f64> {
        cfg.log_wall_time.then(|| self.start.secs())
    }

    pub fn evaluates_at(&self, cfg: &TrainConfig, step: u64) -> bool {
        cfg.eval_every > 0 && step % cfg.eval_every == 0
    }
}

pub(crate) fn eval_row(model: &PartitionedModel, data: &Dataset, step: u64, with_test: bool) -> Result<EvalRow> {
    let train = evaluate(model, &data.train())?;
    let test = if with_test && !data.test().is_empty() { Some(evaluate(model, &data.test())?) } else { None };
    Ok(EvalRow { step, train, test })
}

/// Trains `model` on the train split of `data`.
///
/// Configuration problems are returned as `Err` before any work starts. Once
/// training begins, a failure stops the run and is reported in
/// [`TrainOutcome::failure`] alongside the metrics gathered so far.
pub fn train(model: PartitionedModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let setup = Setup::new(&model, data, cfg)?;
    let mut metrics = RunMetrics::new(setup.n);
    let (model, failure) = match cfg.mode {
        ExecMode::Reference => reference::run(model, data, cfg, &setup, &mut metrics),
        ExecMode::Pipelined => pipeline::run(model, data, cfg, &setup, &mut metrics),
    };
    let steps = metrics.steps.last().map_or(0, |r| r.step);
    let failure = match failure {
        Some(e) => Some(e),
        None => match eval_row(&model, data, steps, true) {
            Ok(row) => {
                metrics.final_eval = Some(row);
                None
            }
            Err(e) => Some(e),
        },
    };
    metrics.elapsed_secs = setup.start.secs();
    Ok(TrainOutcome { model, metrics, steps, failure })
}

#[cfg(test)]
mod tests;
