//! Pipelined training: one thread per component.
//!
//! Each worker owns its component and optimizer and talks to its neighbours
//! only through channels: activations (with targets) travel up, gradient
//! messages for a given loss travel down. A worker executes its forward passes
//! and backward boxes in the order the unit-cost schedule assigns them to its
//! accelerator, and applies a batch's update right after the last box that
//! feeds its body. The order of work on every worker is therefore fixed by the
//! schedule, whatever the thread timing, which makes runs repeatable and, for
//! blocking strategies, identical to reference mode.

use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread;

use crate::data::{BatchIter, Dataset};
use crate::error::{Error, Result};
use crate::net::{Component, Mode, PartitionedModel};
use crate::routing::{combine, BoxGrads, ComponentPlan, LocalPass, Strategy};
use crate::schedule::{simulate, Phase, PipelineConfig, ScheduleTrace};
use crate::tensor::Tensor;
use crate::train::metrics::{RunMetrics, StalenessStat, StepRow};
use crate::train::optim::OptimizerState;
use crate::train::reference::update_component;
use crate::train::{eval_row, Setup, TrainConfig};

const CLOSED: &str = "neighbour channel closed";

struct Activation {
    batch: u64,
    value: Tensor,
    targets: Arc<Vec<usize>>,
}

struct Gradient {
    batch: u64,
    loss: usize,
    value: Tensor,
}

enum Report {
    Loss { k: usize, step: u64, loss: f64 },
    Snapshot { k: usize, step: u64, component: Box<Component> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Item {
    Forward(u64),
    Box { loss: usize, batch: u64 },
    Update(u64),
}

/// Worker `k`'s program: its schedule events, with each update placed right
/// after the last box of a loss in its source set.
fn program(trace: &ScheduleTrace, plan: &ComponentPlan, steps: u64) -> Vec<Item> {
    let mut left = vec![plan.sources.len(); steps as usize];
    let mut items = Vec::new();
    for e in trace.events_for(plan.k) {
        let batch = e.batch as u64;
        match e.phase {
            Phase::Forward => items.push(Item::Forward(batch)),
            Phase::Backward => {
                let loss = e.loss.expect("backward events carry a loss");
                items.push(Item::Box { loss, batch });
                if plan.sources.contains(&loss) {
                    let l = &mut left[e.batch - 1];
                    *l -= 1;
                    if *l == 0 {
                        items.push(Item::Update(batch));
                    }
                }
            }
        }
    }
    items
}

struct Inflight {
    pass: LocalPass,
    boxes: BTreeMap<usize, BoxGrads>,
    /// Updates this worker had applied when the forward pass read its parameters.
    read_version: u64,
    boxes_left: usize,
    updated: bool,
}

struct Worker<'a> {
    k: usize,
    comp: Component,
    plan: ComponentPlan,
    frozen: Vec<bool>,
    opt: OptimizerState,
    cfg: &'a TrainConfig,
    setup: &'a Setup,
    batches: Option<BatchIter<'a>>,
    act_rx: Option<Receiver<Activation>>,
    act_tx: Option<Sender<Activation>>,
    grad_rx: Option<Receiver<Gradient>>,
    grad_tx: Option<Sender<Gradient>>,
    reports: Sender<Report>,
    inflight: HashMap<u64, Inflight>,
    waiting: HashMap<(u64, usize), Tensor>,
    applied: u64,
    staleness: Vec<usize>,
}

struct WorkerResult {
    comp: Component,
    staleness: Vec<usize>,
    error: Option<Error>,
}

impl Worker<'_> {
    fn closed(&self) -> Error {
        Error::Worker { component: self.k, message: CLOSED.into() }
    }

    fn run(mut self, items: Vec<Item>) -> WorkerResult {
        let error = items.into_iter().try_for_each(|item| self.exec(item)).err();
        WorkerResult { comp: self.comp, staleness: self.staleness, error }
    }

    fn exec(&mut self, item: Item) -> Result<()> {
        match item {
            Item::Forward(i) => self.forward(i),
            Item::Box { loss, batch } => self.backward(loss, batch),
            Item::Update(i) => self.update(i),
        }
    }

    /// Emulated compute time, spent after a phase has its inputs and before
    /// its outputs leave.
    fn pause(&self) {
        if let Some(d) = self.cfg.phase_delay {
            thread::sleep(d);
        }
    }

    fn forward(&mut self, i: u64) -> Result<()> {
        let (x, targets) = match &mut self.batches {
            Some(it) => {
                let (x, y) = it.next().expect("batch iterator never ends");
                (x, Arc::new(y))
            }
            None => {
                let rx = self.act_rx.as_ref().expect("upper workers receive activations");
                let a = rx.recv().map_err(|_| self.closed())?;
                if a.batch != i {
                    return Err(Error::Worker {
                        component: self.k,
                        message: format!("expected activation for batch {i}, got {}", a.batch),
                    });
                }
                (a.value, a.targets)
            }
        };
        self.pause();
        let pass = LocalPass::forward(&self.comp, &x, &targets, Mode::Train)?;
        if let Some(tx) = &self.act_tx {
            tx.send(Activation { batch: i, value: pass.output().clone(), targets }).map_err(|_| self.closed())?;
        }
        self.reports.send(Report::Loss { k: self.k, step: i, loss: pass.loss() }).map_err(|_| self.closed())?;
        let boxes_left = self.plan.boxes.len();
        self.inflight
            .insert(i, Inflight { pass, boxes: BTreeMap::new(), read_version: self.applied, boxes_left, updated: false });
        Ok(())
    }

    fn await_gradient(&mut self, i: u64, j: usize) -> Result<Tensor> {
        loop {
            if let Some(g) = self.waiting.remove(&(i, j)) {
                return Ok(g);
            }
            let rx = self.grad_rx.as_ref().expect("only lower workers wait for gradients");
            let g = rx.recv().map_err(|_| self.closed())?;
            self.waiting.insert((g.batch, g.loss), g.value);
        }
    }

    fn backward(&mut self, j: usize, i: u64) -> Result<()> {
        let already = self.inflight.get(&i).is_some_and(|f| f.boxes.contains_key(&j));
        if !already {
            let upstream = if j > self.k { Some(self.await_gradient(i, j)?) } else { None };
            self.pause();
            self.run_box(j, i, upstream.as_ref())?;
        }
        Ok(())
    }

    fn run_box(&mut self, j: usize, i: u64, upstream: Option<&Tensor>) -> Result<()> {
        let f = self.inflight.get_mut(&i).ok_or_else(|| Error::Worker {
            component: self.k,
            message: format!("backward box for batch {i} before its forward pass"),
        })?;
        let mut g = f.pass.backward(&self.comp, &self.plan, j, upstream)?;
        if let Some(d) = g.input.take() {
            let tx = self.grad_tx.as_ref().expect("only upper workers send gradients down");
            tx.send(Gradient { batch: i, loss: j, value: d })
                .map_err(|_| Error::Worker { component: self.k, message: CLOSED.into() })?;
        }
        f.boxes.insert(j, g);
        f.boxes_left -= 1;
        self.retire(i);
        Ok(())
    }

    fn retire(&mut self, i: u64) {
        if self.inflight.get(&i).is_some_and(|f| f.updated && f.boxes_left == 0) {
            self.inflight.remove(&i);
        }
    }

    fn update(&mut self, i: u64) -> Result<()> {
        // The own-head box only seeds the local loss, so it can run here if
        // the schedule has not placed it yet.
        let head_pending =
            self.plan.boxes.contains(&self.k) && self.inflight.get(&i).is_some_and(|f| !f.boxes.contains_key(&self.k));
        if head_pending {
            self.run_box(self.k, i, None)?;
        }
        let f = self.inflight.get_mut(&i).expect("forward precedes update");
        let grads = combine(&self.comp, &f.boxes);
        let lr = self.setup.lr(self.cfg, i);
        update_component(&mut self.comp, &mut self.opt, &grads, &f.pass.stats, lr, &self.frozen, i)?;
        self.staleness.push((self.applied - f.read_version) as usize);
        self.applied += 1;
        f.updated = true;
        self.retire(i);
        if self.setup.evaluates_at(self.cfg, i) {
            self.reports
                .send(Report::Snapshot { k: self.k, step: i, component: Box::new(self.comp.clone()) })
                .map_err(|_| self.closed())?;
        }
        Ok(())
    }
}

/// Collects per-component reports into ordered metric rows and evaluations.
struct Collector<'a> {
    n: usize,
    cfg: &'a TrainConfig,
    setup: &'a Setup,
    template: &'a PartitionedModel,
    data: &'a Dataset,
    losses: BTreeMap<u64, Vec<Option<f64>>>,
    snapshots: BTreeMap<u64, Vec<Option<Component>>>,
    error: Option<Error>,
}

impl Collector<'_> {
    fn take(&mut self, r: Report, metrics: &mut RunMetrics) {
        match r {
            Report::Loss { k, step, loss } => {
                let row = self.losses.entry(step).or_insert_with(|| vec![None; self.n]);
                row[k - 1] = Some(loss);
                while let Some(entry) = self.losses.first_entry() {
                    let expected = metrics.steps.last().map_or(1, |r| r.step + 1);
                    if *entry.key() != expected || entry.get().iter().any(Option::is_none) {
                        break;
                    }
                    let losses = entry.remove().into_iter().map(Option::unwrap).collect();
                    metrics.steps.push(StepRow {
                        step: expected,
                        time_logical: self.setup.time_logical(self.cfg, expected),
                        time_wall: self.setup.wall(self.cfg),
                        lr: self.setup.lr(self.cfg, expected),
                        losses,
                    });
                }
            }
            Report::Snapshot { k, step, component } => {
                let row = self.snapshots.entry(step).or_insert_with(|| vec![None; self.n]);
                row[k - 1] = Some(*component);
                if row.iter().all(Option::is_some) {
                    let comps = self.snapshots.remove(&step).unwrap().into_iter().map(Option::unwrap).collect();
                    let model = PartitionedModel { components: comps, ..self.template.clone() };
                    match eval_row(&model, self.data, step, self.cfg.eval_test) {
                        Ok(row) => metrics.evals.push(row),
                        Err(e) => {
                            self.error.get_or_insert(e);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn run(
    model: PartitionedModel,
    data: &Dataset,
    cfg: &TrainConfig,
    setup: &Setup,
    metrics: &mut RunMetrics,
) -> (PartitionedModel, Option<Error>) {
    let n = setup.n;
    let mut sched = PipelineConfig::new(n, setup.steps as usize, cfg.policy.strategy);
    sched.mix_local = cfg.policy.mix_local;
    let trace = match simulate(&sched) {
        Ok(t) => t,
        Err(e) => return (model, Some(e)),
    };
    let batches = match BatchIter::new(data, cfg.batch_size, cfg.seed, cfg.augment) {
        Ok(b) => b,
        Err(e) => return (model, Some(e)),
    };
    let template = PartitionedModel { components: Vec::new(), ..model.clone() };

    let (report_tx, report_rx) = channel();
    let mut act: Vec<(Option<Sender<Activation>>, Option<Receiver<Activation>>)> = (0..n).map(|_| (None, None)).collect();
    let mut grad: Vec<(Option<Sender<Gradient>>, Option<Receiver<Gradient>>)> = (0..n).map(|_| (None, None)).collect();
    for k in 1..n {
        let (tx, rx) = channel();
        act[k - 1].0 = Some(tx);
        act[k].1 = Some(rx);
        let (tx, rx) = channel();
        grad[k].0 = Some(tx);
        grad[k - 1].1 = Some(rx);
    }
    let mut batches = Some(batches);
    let workers: Vec<(Worker, Vec<Item>)> = model
        .components
        .iter()
        .cloned()
        .zip(act)
        .zip(grad)
        .enumerate()
        .map(|(idx, ((comp, (act_tx, act_rx)), (grad_tx, grad_rx)))| {
            let plan = setup.plans[idx].clone();
            let items = program(&trace, &plan, setup.steps);
            let opt = OptimizerState::new(cfg.optimizer, &comp.params);
            let w = Worker {
                k: idx + 1,
                comp,
                plan,
                frozen: setup.frozen[idx].clone(),
                opt,
                cfg,
                setup,
                batches: if idx == 0 { batches.take() } else { None },
                act_rx,
                act_tx,
                grad_rx,
                grad_tx,
                reports: report_tx.clone(),
                inflight: HashMap::new(),
                waiting: HashMap::new(),
                applied: 0,
                staleness: Vec::new(),
            };
            (w, items)
        })
        .collect();
    drop(report_tx);
    drop(trace);

    let mut collector = Collector {
        n,
        cfg,
        setup,
        template: &template,
        data,
        losses: BTreeMap::new(),
        snapshots: BTreeMap::new(),
        error: None,
    };
    let results: Vec<thread::Result<WorkerResult>> = thread::scope(|s| {
        let handles: Vec<_> = workers.into_iter().map(|(w, items)| s.spawn(move || w.run(items))).collect();
        for r in report_rx.iter() {
            collector.take(r, metrics);
        }
        handles.into_iter().map(|h| h.join()).collect()
    });

    let mut components = Vec::with_capacity(n);
    let mut errors = Vec::new();
    let mut staleness = Vec::with_capacity(n);
    for (idx, r) in results.into_iter().enumerate() {
        match r {
            Ok(w) => {
                debug_assert_eq!(w.comp.index, idx + 1);
                if let Some(e) = w.error {
                    errors.push(e);
                }
                staleness.push(StalenessStat::from_values(&w.staleness));
                components.push(w.comp);
            }
            Err(_) => {
                errors.push(Error::Worker { component: idx + 1, message: "worker panicked".into() });
                components.push(model.components[idx].clone());
            }
        }
    }
    errors.extend(collector.error.take());
    if cfg.policy.strategy == Strategy::Hogwild && errors.is_empty() {
        metrics.staleness = Some(staleness);
    }
    // Report the root cause, not the neighbours that saw a closed channel.
    let is_echo = |e: &Error| matches!(e, Error::Worker { message, .. } if message == CLOSED);
    let failure = match errors.iter().position(|e| !is_echo(e)) {
        Some(p) => Some(errors.swap_remove(p)),
        None => errors.into_iter().next(),
    };
    (PartitionedModel { components, ..template }, failure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::routing::{assignment, RoutingPolicy};

    fn items_for(strategy: Strategy, n: usize, b: usize, k: usize) -> Vec<Item> {
        let a = assignment(&RoutingPolicy::new(strategy), n);
        let plan = ComponentPlan::new(&a, k, &vec![1.0; n]);
        let trace = simulate(&PipelineConfig::new(n, b, strategy)).unwrap();
        program(&trace, &plan, b as u64)
    }

    #[test]
    fn every_batch_gets_one_update_after_its_forward() {
        for strategy in [Strategy::EndToEnd, Strategy::NWise(1), Strategy::NWise(2), Strategy::GroupedLocal(2), Strategy::Hogwild] {
            for k in 1..=4 {
                let items = items_for(strategy, 4, 6, k);
                for i in 1..=6u64 {
                    let f = items.iter().position(|&x| x == Item::Forward(i)).unwrap();
                    let u: Vec<_> = items.iter().enumerate().filter(|(_, &x)| x == Item::Update(i)).collect();
                    assert_eq!(u.len(), 1, "{strategy} k={k} i={i}");
                    assert!(u[0].0 > f);
                }
            }
        }
    }

    #[test]
    fn blocking_strategies_update_before_next_forward() {
        for strategy in [Strategy::EndToEnd, Strategy::NWise(2), Strategy::GroupedLocal(3)] {
            for k in 1..=3 {
                let items = items_for(strategy, 3, 5, k);
                for i in 1..5u64 {
                    let u = items.iter().position(|&x| x == Item::Update(i)).unwrap();
                    let f = items.iter().position(|&x| x == Item::Forward(i + 1)).unwrap();
                    assert!(u < f, "{strategy} k={k} i={i}");
                }
            }
        }
    }
}
