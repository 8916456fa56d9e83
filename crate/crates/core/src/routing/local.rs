//! Component-wise execution of a routing policy.
//!
//! Each component records its own tape for a batch. Backward work is split
//! into one box per loss passing through the component: the box for loss `j`
//! takes the gradient of `L_j` with respect to this component's output (or
//! seeds `L_k` itself when `j == k`), and yields body gradients if `j` updates
//! this body, head gradients for the component's own loss, and the gradient
//! with respect to the input if `j` must travel further down.

use std::collections::BTreeMap;

use rand::seq::index::sample;

use crate::autodiff::{GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::net::{Component, Mode, PartitionedModel, StatsLog};
use crate::routing::graph::check_weights;
use crate::routing::policy::{assignment, GradientAssignment, RoutingPolicy};
use crate::seed;
use crate::tensor::Tensor;

/// What component `k` has to do in the backward direction.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentPlan {
    pub k: usize,
    pub n: usize,
    /// Losses updating this body, ascending.
    pub sources: Vec<usize>,
    /// Losses whose backward box runs on this component, ascending.
    pub boxes: Vec<usize>,
    /// Losses whose input gradient is forwarded to component `k - 1`.
    pub sends_down: Vec<usize>,
    /// Weight of this component's own loss.
    pub weight: f64,
}

impl ComponentPlan {
    pub fn new(a: &GradientAssignment, k: usize, weights: &[f64]) -> Self {
        let n = a.n();
        let mut boxes = a.traverse(k);
        if !boxes.contains(&k) {
            boxes.insert(0, k);
        }
        let sends_down = if k > 1 { a.traverse(k - 1).into_iter().filter(|&j| j >= k).collect() } else { Vec::new() };
        ComponentPlan { k, n, sources: a.sources(k).to_vec(), boxes, sends_down, weight: weights[k - 1] }
    }

    pub fn for_model(a: &GradientAssignment, weights: &[f64]) -> Vec<ComponentPlan> {
        (1..=a.n()).map(|k| ComponentPlan::new(a, k, weights)).collect()
    }

    pub fn updates_body(&self, j: usize) -> bool {
        self.sources.contains(&j)
    }

    pub fn sends_down(&self, j: usize) -> bool {
        self.sends_down.contains(&j)
    }

    /// Boxes for losses above `k` need a message from component `k + 1`.
    pub fn needs_upstream(&self, j: usize) -> bool {
        j > self.k
    }
}

/// Output of one backward box.
#[derive(Clone, Debug, Default)]
pub struct BoxGrads {
    pub body: Option<Vec<Tensor>>,
    pub head: Option<Vec<Tensor>>,
    pub input: Option<Tensor>,
}

/// A component's recorded forward pass for one batch.
#[derive(Debug)]
pub struct LocalPass {
    tape: Tape,
    input: Var,
    params: Vec<Var>,
    output: Var,
    loss: Var,
    pub stats: StatsLog,
}

impl LocalPass {
    pub fn forward(c: &Component, x: &Tensor, targets: &[usize], mode: Mode) -> Result<Self> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let params = c.bind(&mut tape);
        let mut stats = StatsLog::new();
        let output = c.forward_body(&mut tape, input, &params, mode, &mut stats)?;
        let logits = c.forward_head(&mut tape, output, &params, mode, &mut stats)?.unwrap_or(output);
        let loss = tape.softmax_cross_entropy(logits, targets)?;
        Ok(LocalPass { tape, input, params, output, loss, stats })
    }

    pub fn output(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    pub fn loss(&self) -> f64 {
        self.tape.value(self.loss).item()
    }

    pub fn backward(&self, c: &Component, plan: &ComponentPlan, j: usize, upstream: Option<&Tensor>) -> Result<BoxGrads> {
        let seed = if j == plan.k {
            (self.loss, Tensor::scalar(plan.weight))
        } else {
            let g = upstream.ok_or_else(|| Error::Worker {
                component: plan.k,
                message: format!("backward box for loss {j} ran without its upstream gradient"),
            })?;
            (self.output, g.clone())
        };
        let body = plan.updates_body(j);
        let head = j == plan.k && !c.is_final();
        let down = plan.sends_down(j);
        let mut wrt: Vec<Var> = Vec::new();
        if body {
            wrt.extend(&self.params[c.body_range()]);
        }
        if head {
            wrt.extend(&self.params[c.head_range()]);
        }
        if down {
            wrt.push(self.input);
        }
        let mut grads = self.tape.backward(&[seed], &wrt)?.into_iter().zip(&wrt).map(|(g, v)| {
            g.unwrap_or_else(|| Tensor::zeros(self.tape.shape(*v)))
        });
        let mut out = BoxGrads::default();
        if body {
            out.body = Some(grads.by_ref().take(c.body_params).collect());
        }
        if head {
            out.head = Some(grads.by_ref().take(c.params.len() - c.body_params).collect());
        }
        if down {
            out.input = grads.next();
        }
        Ok(out)
    }
}

/// Sums box outputs into one gradient per parameter: body contributions in
/// ascending loss order, then the head gradient.
pub fn combine(c: &Component, boxes: &BTreeMap<usize, BoxGrads>) -> Vec<Tensor> {
    let mut total: Vec<Tensor> = c.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for g in boxes.values() {
        if let Some(body) = &g.body {
            for (t, b) in total.iter_mut().zip(body) {
                t.add_assign(b);
            }
        }
    }
    for g in boxes.values() {
        if let Some(head) = &g.head {
            for (t, h) in total[c.body_params..].iter_mut().zip(head) {
                t.add_assign(h);
            }
        }
    }
    total
}

/// Routed losses, gradients and batch statistics for one batch.
#[derive(Debug)]
pub struct StepGrads {
    pub losses: Vec<f64>,
    pub grads: Vec<Vec<Tensor>>,
    pub stats: Vec<StatsLog>,
}

/// Runs every component's forward, then every backward box top-down, passing
/// gradient messages between neighbours.
pub fn message_pass(
    model: &PartitionedModel,
    policy: &RoutingPolicy,
    x: &Tensor,
    targets: &[usize],
    weights: &[f64],
    mode: Mode,
) -> Result<StepGrads> {
    let n = model.len();
    check_weights(weights, n)?;
    let plans = ComponentPlan::for_model(&assignment(policy, n), weights);
    message_pass_planned(model, &plans, x, targets, mode)
}

/// [`message_pass`] with explicit per-component plans.
pub fn message_pass_planned(
    model: &PartitionedModel,
    plans: &[ComponentPlan],
    x: &Tensor,
    targets: &[usize],
    mode: Mode,
) -> Result<StepGrads> {
    let n = model.len();
    if plans.len() != n {
        return Err(Error::Config(format!("{} plans for {n} components", plans.len())));
    }
    let mut passes = Vec::with_capacity(n);
    let mut h = x.clone();
    for c in &model.components {
        let p = LocalPass::forward(c, &h, targets, mode)?;
        h = p.output().clone();
        passes.push(p);
    }
    let mut messages: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut grads = vec![Vec::new(); n];
    for k in (1..=n).rev() {
        let (c, plan, pass) = (&model.components[k - 1], &plans[k - 1], &passes[k - 1]);
        let mut boxes = BTreeMap::new();
        let mut down = BTreeMap::new();
        for &j in &plan.boxes {
            let mut g = pass.backward(c, plan, j, messages.get(&j))?;
            if let Some(d) = g.input.take() {
                down.insert(j, d);
            }
            boxes.insert(j, g);
        }
        grads[k - 1] = combine(c, &boxes);
        messages = down;
    }
    Ok(StepGrads {
        losses: passes.iter().map(LocalPass::loss).collect(),
        grads,
        stats: passes.into_iter().map(|p| p.stats).collect(),
    })
}

/// Compares routed gradients with central differences. A body parameter of
/// component `k` is checked against `sum_{j in sources(k)} w_j L_j`, a head
/// parameter against `w_k L_k`. With `max_coords`, each parameter tensor is
/// checked on a random subset of that many coordinates.
#[allow(clippy::too_many_arguments)]
pub fn routed_grad_check(
    model: &PartitionedModel,
    policy: &RoutingPolicy,
    x: &Tensor,
    targets: &[usize],
    weights: &[f64],
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let routed = message_pass(model, policy, x, targets, weights, Mode::Train)?;
    let a = assignment(policy, model.len());
    let mut rng = seed::rng(seed, "gradcheck");
    let mut probe = model.clone();
    let mut report = GradCheckReport::default();
    let mut flat = 0;
    for (ki, c) in model.components.iter().enumerate() {
        for (pi, p) in c.params.iter().enumerate() {
            let objective: Vec<(usize, f64)> = if pi < c.body_params {
                a.sources(ki + 1).iter().map(|&j| (j - 1, weights[j - 1])).collect()
            } else {
                vec![(ki, weights[ki])]
            };
            let coords: Vec<usize> = match max_coords {
                Some(m) if m < p.numel() => {
                    let mut s = sample(&mut rng, p.numel(), m).into_vec();
                    s.sort_unstable();
                    s
                }
                _ => (0..p.numel()).collect(),
            };
            for coord in coords {
                let mut eval = |delta: f64| -> Result<f64> {
                    let orig = p.value.data()[coord];
                    probe.components[ki].params[pi].value.data_mut()[coord] = orig + delta;
                    let mut tape = Tape::new();
                    let pass = probe.forward(&mut tape, x, Mode::Train);
                    probe.components[ki].params[pi].value.data_mut()[coord] = orig;
                    let pass = pass?;
                    let mut f = 0.0;
                    for &(j, w) in &objective {
                        let l = tape.softmax_cross_entropy(pass.logits[j], targets)?;
                        f += w * tape.value(l).item();
                    }
                    Ok(f)
                };
                let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
                report.record(flat + pi, coord, routed.grads[ki][pi].data()[coord], numeric);
            }
        }
        flat += c.params.len();
    }
    Ok(report)
}
