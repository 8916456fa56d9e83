//! Discrete-event simulation of a pipeline of accelerators, one per component.
//!
//! Each accelerator runs one forward per batch and one backward box per loss
//! whose gradient passes through its component (see
//! [`GradientAssignment::traverse`]). A component's update for a batch is
//! applied the moment the last box for a loss in its source set finishes;
//! backward work for its own auxiliary head is folded into that moment. Under
//! every strategy except hogwild, a component waits for its update before
//! starting the next forward.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use crate::error::{Error, Result};
use crate::routing::{assignment, GradientAssignment, RoutingPolicy, Strategy};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Accelerators, one component each.
    pub a: usize,
    /// Training steps (batches).
    pub b: usize,
    pub strategy: Strategy,
    pub mix_local: bool,
    pub forward_cost: u64,
    pub backward_cost: u64,
    /// Extra slots before a message from a neighbour can be used.
    pub comm_latency: u64,
}

impl PipelineConfig {
    pub fn new(a: usize, b: usize, strategy: Strategy) -> Self {
        PipelineConfig { a, b, strategy, mix_local: false, forward_cost: 1, backward_cost: 1, comm_latency: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.a == 0 || self.b == 0 {
            return fail(format!("need a >= 1 and b >= 1, got a={} b={}", self.a, self.b));
        }
        if self.forward_cost == 0 || self.backward_cost == 0 {
            return fail("phase costs must be >= 1".into());
        }
        self.strategy.validate()?;
        match self.strategy {
            Strategy::NWise(n) if n > self.a => fail(format!("n_wise needs N <= a, got N={n} a={}", self.a)),
            Strategy::GroupedLocal(g) if g > self.a => {
                fail(format!("grouped_local needs g <= a, got g={g} a={}", self.a))
            }
            _ => Ok(()),
        }
    }

    fn policy(&self) -> RoutingPolicy {
        RoutingPolicy { strategy: self.strategy, mix_local: self.mix_local }
    }

    fn blocking(&self) -> bool {
        self.strategy != Strategy::Hogwild
    }
}

/// Makespan of a unit-cost schedule.
pub fn closed_form_timesteps(strategy: Strategy, a: usize, b: usize) -> Result<u64> {
    PipelineConfig::new(a, b, strategy).validate()?;
    let (a, b) = (a as u64, b as u64);
    Ok(match strategy {
        Strategy::EndToEnd => 2 * b * a,
        Strategy::Hogwild => 2 * (b + a - 1),
        Strategy::NWise(n) => {
            let n = n as u64;
            2 * b * n + a - n
        }
        // Every block of g runs with period 2g; the top block finishes last.
        Strategy::GroupedLocal(g) => {
            let g = g as u64;
            2 * g * (b - 1) + a + g
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Forward,
    Backward,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
        })
    }
}

/// One occupied stretch of an accelerator. Accelerators, batches and losses are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub accelerator: usize,
    pub slot: u64,
    pub duration: u64,
    pub batch: usize,
    pub phase: Phase,
    /// Loss whose gradient a backward box carries.
    pub loss: Option<usize>,
}

impl Event {
    pub fn end(&self) -> u64 {
        self.slot + self.duration
    }
}

#[derive(Clone, Debug)]
pub struct ScheduleTrace {
    pub config: PipelineConfig,
    /// Sorted by slot, then accelerator.
    pub events: Vec<Event>,
    pub makespan: u64,
    pub utilization: Vec<f64>,
    /// `updates[k - 1][i - 1]`: time at which batch `i`'s gradient lands in component `k`.
    pub updates: Vec<Vec<u64>>,
}

impl ScheduleTrace {
    /// Events of one accelerator in execution order.
    pub fn events_for(&self, k: usize) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.accelerator == k)
    }

    pub fn forward(&self, k: usize, i: usize) -> &Event {
        self.events.iter().find(|e| e.accelerator == k && e.batch == i && e.phase == Phase::Forward).unwrap()
    }

    /// Write the trace as `accelerator,slot,batch,phase,loss` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("accelerator,slot,batch,phase,loss\n");
        for e in &self.events {
            let loss = e.loss.map(|l| l.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{},{},{}\n", e.accelerator, e.slot, e.batch, e.phase, loss));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Task {
    Forward { k: usize, i: usize },
    Box { k: usize, j: usize, i: usize },
}

impl Task {
    fn k(&self) -> usize {
        match *self {
            Task::Forward { k, .. } | Task::Box { k, .. } => k,
        }
    }

    /// Lower sorts first: oldest batch, backward before forward, lowest loss.
    fn priority(&self) -> (usize, u8, usize) {
        match *self {
            Task::Forward { i, .. } => (i, 1, 0),
            Task::Box { i, j, .. } => (i, 0, j),
        }
    }
}

struct Sim<'a> {
    cfg: &'a PipelineConfig,
    plan: GradientAssignment,
    /// `(start, end)` per task, indexed by [`Sim::slot_of`].
    done: Vec<Option<(u64, u64)>>,
}

impl Sim<'_> {
    fn slot_of(&self, t: Task) -> usize {
        let (a, b) = (self.cfg.a, self.cfg.b);
        match t {
            Task::Forward { k, i } => (k - 1) * b + (i - 1),
            Task::Box { k, j, i } => a * b + ((k - 1) * a + (j - 1)) * b + (i - 1),
        }
    }

    fn get(&self, t: Task) -> Option<(u64, u64)> {
        self.done[self.slot_of(t)]
    }

    fn mark(&mut self, t: Task, start: u64, end: u64) {
        let idx = self.slot_of(t);
        self.done[idx] = Some((start, end));
    }

    fn finished(&self, t: Task, now: u64, latency: u64) -> bool {
        self.get(t).is_some_and(|(_, end)| end + latency <= now)
    }

    /// Time batch `i`'s update lands in component `k`, if all its boxes are done.
    fn update_time(&self, k: usize, i: usize) -> Option<u64> {
        self.plan
            .sources(k)
            .iter()
            .map(|&j| self.get(Task::Box { k, j, i }).map(|(_, end)| end))
            .try_fold(0, |acc, e| e.map(|e| acc.max(e)))
    }

    fn ready(&self, t: Task, now: u64) -> bool {
        let lat = self.cfg.comm_latency;
        match t {
            Task::Forward { k, i } => {
                if k > 1 && !self.finished(Task::Forward { k: k - 1, i }, now, lat) {
                    return false;
                }
                if i == 1 {
                    return true;
                }
                if self.cfg.blocking() {
                    self.update_time(k, i - 1).is_some_and(|u| u <= now)
                } else {
                    // Leave room for one backward between consecutive forwards.
                    self.get(Task::Forward { k, i: i - 1 })
                        .is_some_and(|(s, _)| s + self.cfg.forward_cost + self.cfg.backward_cost <= now)
                }
            }
            Task::Box { k, j, i } => {
                self.finished(Task::Forward { k, i }, now, 0)
                    && (j == k || self.finished(Task::Box { k: k + 1, j, i }, now, lat))
            }
        }
    }
}

/// Greedy earliest-start simulation under the configured costs.
pub fn simulate(cfg: &PipelineConfig) -> Result<ScheduleTrace> {
    cfg.validate()?;
    let (a, b) = (cfg.a, cfg.b);
    let plan = assignment(&cfg.policy(), a);
    // Kept in batch order; only the first few in-flight batches can be ready.
    let mut pending: Vec<VecDeque<Task>> = (1..=a)
        .map(|k| {
            let boxes = plan.traverse(k);
            let mut v = VecDeque::new();
            for i in 1..=b {
                v.push_back(Task::Forward { k, i });
                v.extend(boxes.iter().map(|&j| Task::Box { k, j, i }));
            }
            v
        })
        .collect();
    let mut sim = Sim { cfg, plan, done: vec![None; a * b * (a + 1)] };
    let slack = cfg.comm_latency + cfg.forward_cost + cfg.backward_cost;
    let mut last_end = 0u64;
    let mut busy_until = vec![0u64; a];
    let mut events = Vec::new();
    let mut now = 0u64;
    let mut remaining: usize = pending.iter().map(VecDeque::len).sum();
    let window = a + 2;
    while remaining > 0 {
        let mut started = Vec::new();
        for k in 1..=a {
            if busy_until[k - 1] > now {
                continue;
            }
            let Some(first) = pending[k - 1].front().map(|t| t.priority().0) else { continue };
            let best = pending[k - 1]
                .iter()
                .take_while(|t| t.priority().0 <= first + window)
                .enumerate()
                .filter(|(_, t)| sim.ready(**t, now))
                .min_by_key(|(_, t)| t.priority())
                .map(|(idx, t)| (idx, *t));
            if let Some((idx, t)) = best {
                pending[k - 1].remove(idx);
                started.push(t);
            }
        }
        for t in started {
            let k = t.k();
            let (phase, batch, loss, cost) = match t {
                Task::Forward { i, .. } => (Phase::Forward, i, None, cfg.forward_cost),
                Task::Box { j, i, .. } => (Phase::Backward, i, Some(j), cfg.backward_cost),
            };
            sim.mark(t, now, now + cost);
            busy_until[k - 1] = now + cost;
            events.push(Event { accelerator: k, slot: now, duration: cost, batch, phase, loss });
            last_end = last_end.max(now + cost);
            remaining -= 1;
        }
        if remaining == 0 {
            break;
        }
        // Once every dependency window has closed, an idle pipeline stays idle.
        if last_end + slack < now {
            return Err(Error::Deadlock { slot: now, pending: remaining });
        }
        now += 1;
    }
    events.sort_by_key(|e| (e.slot, e.accelerator));
    let makespan = events.iter().map(Event::end).max().unwrap_or(0);
    let mut utilization = vec![0.0; a];
    for e in &events {
        utilization[e.accelerator - 1] += e.duration as f64;
    }
    for u in &mut utilization {
        *u /= makespan as f64;
    }
    let updates = (1..=a)
        .map(|k| (1..=b).map(|i| sim.update_time(k, i).expect("all boxes finished")).collect())
        .collect();
    Ok(ScheduleTrace { config: cfg.clone(), events, makespan, utilization, updates })
}

/// Per-(component, batch) count of other batches' updates that land after the
/// forward pass read the parameters and no later than this batch's own update.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StalenessRecord {
    /// `values[k - 1][i - 1]`.
    pub values: Vec<Vec<usize>>,
}

impl StalenessRecord {
    pub fn get(&self, k: usize, i: usize) -> usize {
        self.values[k - 1][i - 1]
    }

    pub fn max(&self) -> usize {
        self.values.iter().flatten().copied().max().unwrap_or(0)
    }

    /// Value at the middle batch, once the pipeline is full.
    pub fn steady_state(&self, k: usize) -> usize {
        let row = &self.values[k - 1];
        row[row.len() / 2]
    }
}

pub fn staleness(trace: &ScheduleTrace) -> StalenessRecord {
    let (a, b) = (trace.config.a, trace.config.b);
    let mut reads = vec![vec![0u64; b]; a];
    for e in trace.events.iter().filter(|e| e.phase == Phase::Forward) {
        reads[e.accelerator - 1][e.batch - 1] = e.slot;
    }
    let values = (1..=a)
        .map(|k| {
            let ups = &trace.updates[k - 1];
            let mut sorted = ups.clone();
            sorted.sort_unstable();
            (1..=b)
                .map(|i| {
                    let read = reads[k - 1][i - 1];
                    let own = ups[i - 1];
                    // Updates landing in (read, own], minus this batch's own.
                    let upto = sorted.partition_point(|&u| u <= own);
                    let before = sorted.partition_point(|&u| u <= read);
                    upto - before - usize::from(own > read)
                })
                .collect()
        })
        .collect();
    StalenessRecord { values }
}

/// Checks occupancy and causality of a trace against its config.
pub fn validate_trace(trace: &ScheduleTrace) -> Result<()> {
    let cfg = &trace.config;
    let plan = assignment(&cfg.policy(), cfg.a);
    let bad = |m: String| Err(Error::Config(format!("invalid trace: {m}")));
    let mut by_acc: Vec<Vec<&Event>> = vec![Vec::new(); cfg.a];
    for e in &trace.events {
        by_acc[e.accelerator - 1].push(e);
    }
    for evs in &mut by_acc {
        evs.sort_by_key(|e| e.slot);
        for w in evs.windows(2) {
            if w[1].slot < w[0].end() {
                return bad(format!("accelerator {} double-booked at slot {}", w[0].accelerator, w[1].slot));
            }
        }
    }
    let index: HashMap<(usize, usize, Phase, Option<usize>), &Event> =
        trace.events.iter().map(|e| ((e.accelerator, e.batch, e.phase, e.loss), e)).collect();
    let find = |k: usize, i: usize, phase: Phase, loss: Option<usize>| index.get(&(k, i, phase, loss)).copied();
    let lat = cfg.comm_latency;
    for k in 1..=cfg.a {
        for i in 1..=cfg.b {
            let Some(f) = find(k, i, Phase::Forward, None) else {
                return bad(format!("missing forward({k}, {i})"));
            };
            if k > 1 {
                let below = find(k - 1, i, Phase::Forward, None).unwrap();
                if below.end() + lat > f.slot {
                    return bad(format!("forward({k}, {i}) starts before forward({}, {i}) ends", k - 1));
                }
            }
            for j in plan.traverse(k) {
                let Some(bx) = find(k, i, Phase::Backward, Some(j)) else {
                    return bad(format!("missing backward({k}, {i}) for loss {j}"));
                };
                if bx.slot < f.end() {
                    return bad(format!("backward({k}, {i}) for loss {j} precedes its forward"));
                }
                if j > k {
                    let above = find(k + 1, i, Phase::Backward, Some(j)).unwrap();
                    if above.end() + lat > bx.slot {
                        return bad(format!("backward({k}, {i}) for loss {j} precedes backward({}, {i})", k + 1));
                    }
                }
            }
            if cfg.blocking() && i < cfg.b {
                let next = find(k, i + 1, Phase::Forward, None).unwrap();
                if trace.updates[k - 1][i - 1] > next.slot {
                    return bad(format!("forward({k}, {}) starts before batch {i} is applied", i + 1));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
