//! Single-threaded training: the ground truth the pipelined engine must match.

use std::collections::VecDeque;

use crate::data::{BatchIter, Dataset};
use crate::error::{Error, Result};
use crate::net::{Component, Mode, PartitionedModel, StatsLog};
use crate::routing::{message_pass_planned, Strategy};
use crate::schedule::{simulate, staleness, PipelineConfig};
use crate::tensor::Tensor;
use crate::train::metrics::{RunMetrics, StalenessStat, StepRow};
use crate::train::optim::OptimizerState;
use crate::train::{eval_row, Setup, TrainConfig};

/// Loads `grads` into `c`, steps the optimizer and folds in batch statistics.
pub(crate) fn update_component(
    c: &mut Component,
    opt: &mut OptimizerState,
    grads: &[Tensor],
    stats: &StatsLog,
    lr: f64,
    frozen: &[bool],
    step: u64,
) -> Result<()> {
    for (p, g) in c.params.iter_mut().zip(grads) {
        p.grad = g.clone();
    }
    opt.apply(&mut c.params, lr, frozen, step)?;
    c.apply_stats(stats);
    Ok(())
}

/// Past parameter values per component, so a forward pass can read the
/// version a pipelined worker would have held at that moment.
#[derive(Clone, Debug, Default)]
pub struct StaleSnapshotQueue {
    /// Per component, `(version, values)` with ascending versions. Version `v`
    /// is the state after `v` updates.
    queues: Vec<VecDeque<(u64, Vec<Tensor>)>>,
}

impl StaleSnapshotQueue {
    pub fn new(model: &PartitionedModel) -> Self {
        let mut q = StaleSnapshotQueue { queues: vec![VecDeque::new(); model.len()] };
        for c in &model.components {
            q.push(c, 0);
        }
        q
    }

    pub fn push(&mut self, c: &Component, version: u64) {
        self.queues[c.index - 1].push_back((version, c.params.iter().map(|p| p.value.clone()).collect()));
    }

    /// Values of component `k` after `version` updates.
    pub fn get(&self, k: usize, version: u64) -> Option<&[Tensor]> {
        self.queues[k - 1].iter().find(|(v, _)| *v == version).map(|(_, p)| p.as_slice())
    }

    /// Drops versions of component `k` older than `version`.
    pub fn prune(&mut self, k: usize, version: u64) {
        let q = &mut self.queues[k - 1];
        while q.front().is_some_and(|(v, _)| *v < version) {
            q.pop_front();
        }
    }

    pub fn len(&self, k: usize) -> usize {
        self.queues[k - 1].len()
    }

    pub fn clear(&mut self) {
        self.queues.iter_mut().for_each(VecDeque::clear);
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }
}

pub(crate) fn run(
    mut model: PartitionedModel,
    data: &Dataset,
    cfg: &TrainConfig,
    setup: &Setup,
    metrics: &mut RunMetrics,
) -> (PartitionedModel, Option<Error>) {
    let failure = steps(&mut model, data, cfg, setup, metrics).err();
    (model, failure)
}

fn steps(
    model: &mut PartitionedModel,
    data: &Dataset,
    cfg: &TrainConfig,
    setup: &Setup,
    metrics: &mut RunMetrics,
) -> Result<()> {
    let n = setup.n;
    let mut opts: Vec<OptimizerState> =
        model.components.iter().map(|c| OptimizerState::new(cfg.optimizer, &c.params)).collect();
    let mut batches = BatchIter::new(data, cfg.batch_size, cfg.seed, cfg.augment)?;
    // Hogwild reads each component at the version the pipeline would have
    // seen, taken from the unit-cost schedule.
    let hogwild = cfg.policy.strategy == Strategy::Hogwild;
    let stale = if hogwild {
        let trace = simulate(&PipelineConfig::new(n, setup.steps as usize, Strategy::Hogwild))?;
        Some(staleness(&trace))
    } else {
        None
    };
    let mut snapshots = StaleSnapshotQueue::new(model);
    let mut observed = vec![Vec::new(); n];
    for step in 1..=setup.steps {
        let (x, y) = batches.next().expect("batch iterator never ends");
        let lr = setup.lr(cfg, step);
        let routed = match &stale {
            None => message_pass_planned(model, &setup.plans, &x, &y, Mode::Train)?,
            Some(record) => {
                let mut view = model.clone();
                for (k, c) in view.components.iter_mut().enumerate().map(|(i, c)| (i + 1, c)) {
                    let lag = record.get(k, step as usize) as u64;
                    let version = step - 1 - lag;
                    let values = snapshots.get(k, version).ok_or_else(|| {
                        Error::Worker { component: k, message: format!("no snapshot for version {version}") }
                    })?;
                    for (p, v) in c.params.iter_mut().zip(values) {
                        p.value = v.clone();
                    }
                    snapshots.prune(k, version);
                    observed[k - 1].push(lag as usize);
                }
                message_pass_planned(&view, &setup.plans, &x, &y, Mode::Train)?
            }
        };
        for (k, c) in model.components.iter_mut().enumerate() {
            update_component(c, &mut opts[k], &routed.grads[k], &routed.stats[k], lr, &setup.frozen[k], step)?;
        }
        if hogwild {
            for c in &model.components {
                snapshots.push(c, step);
            }
        }
        metrics.steps.push(StepRow {
            step,
            time_logical: setup.time_logical(cfg, step),
            time_wall: setup.wall(cfg),
            lr,
            losses: routed.losses,
        });
        if setup.evaluates_at(cfg, step) {
            metrics.evals.push(eval_row(model, data, step, cfg.eval_test)?);
        }
    }
    snapshots.clear();
    if hogwild {
        metrics.staleness = Some(observed.iter().map(|v| StalenessStat::from_values(v)).collect());
    }
    Ok(())
}
