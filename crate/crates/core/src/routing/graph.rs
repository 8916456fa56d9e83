//! Single-tape realizations of a routing policy. These are the semantic
//! reference for the component-wise engine in `local`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::net::{component_losses, Mode, PartitionedModel, StatsLog};
use crate::routing::policy::{assignment, GradientAssignment, RoutingPolicy};
use crate::tensor::Tensor;

/// A tape whose backward from `total` yields routed gradients.
#[derive(Debug)]
pub struct TrainingGraph {
    pub tape: Tape,
    /// Leaves for every component's parameters, shared by all branches.
    pub params: Vec<Vec<Var>>,
    /// Canonical activations, fully detached.
    pub activations: Vec<Var>,
    /// `L_1..L_n`, each computed on its own branch.
    pub losses: Vec<Var>,
    /// `sum_j weight_j * L_j`.
    pub total: Var,
    pub stats: Vec<StatsLog>,
}

impl TrainingGraph {
    pub fn loss_values(&self) -> Vec<f64> {
        self.losses.iter().map(|&l| self.tape.value(l).item()).collect()
    }

    /// Gradient of `total` for every parameter, grouped by component.
    pub fn gradients(&self) -> Result<Vec<Vec<Tensor>>> {
        self.params.iter().map(|vars| self.tape.grad(self.total, vars)).collect()
    }
}

pub(crate) fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::Config(format!("expected {n} loss weights, got {}", weights.len())));
    }
    Ok(())
}

fn weighted_total(tape: &mut Tape, losses: &[Var], weights: &[f64]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&l, &w) in losses.iter().zip(weights) {
        let term = tape.scale(l, w);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.expect("at least one component"))
}

/// Records one branch per loss `j`. A branch starts from the detached
/// canonical activation below the lowest body that `L_j` updates and re-runs
/// the bodies up to `j`; bodies outside `reach(j)` see their parameters through
/// a stop-gradient, so `L_j` only reaches the bodies assigned to it. Head
/// parameters are live only in their own branch.
pub fn build_training_graph(
    model: &PartitionedModel,
    policy: &RoutingPolicy,
    x: &Tensor,
    targets: &[usize],
    weights: &[f64],
    mode: Mode,
) -> Result<TrainingGraph> {
    let n = model.len();
    check_weights(weights, n)?;
    let plan: GradientAssignment = assignment(policy, n);
    let mut tape = Tape::new();
    let params: Vec<Vec<Var>> = model.components.iter().map(|c| c.bind(&mut tape)).collect();
    let frozen: Vec<Vec<Var>> = params.iter().map(|vs| vs.iter().map(|&v| tape.stop_gradient(v)).collect()).collect();

    let input = tape.leaf(x.clone());
    let mut detached = vec![input];
    let mut stats = Vec::with_capacity(n);
    for (k, c) in model.components.iter().enumerate() {
        let mut log = StatsLog::new();
        let h = c.forward_body(&mut tape, detached[k], &frozen[k], mode, &mut log)?;
        detached.push(tape.stop_gradient(h));
        stats.push(log);
    }

    let mut logits = Vec::with_capacity(n);
    for j in 1..=n {
        let reach = plan.reach(j);
        let start = plan.branch_start(j);
        let mut h = detached[start - 1];
        let mut scratch = StatsLog::new();
        for k in start..=j {
            let c = &model.components[k - 1];
            let vars = if reach.contains(&k) { &params[k - 1] } else { &frozen[k - 1] };
            h = c.forward_body(&mut tape, h, vars, mode, &mut scratch)?;
        }
        let top = &model.components[j - 1];
        // Head layers index past the body; give them the live leaves.
        let mut head_vars = frozen[j - 1].clone();
        head_vars[top.head_range()].copy_from_slice(&params[j - 1][top.head_range()]);
        let out = top.forward_head(&mut tape, h, &head_vars, mode, &mut scratch)?.unwrap_or(h);
        logits.push(out);
    }
    let losses = component_losses(&mut tape, &logits, targets)?;
    let total = weighted_total(&mut tape, &losses, weights)?;
    Ok(TrainingGraph { tape, params, activations: detached[1..].to_vec(), losses, total, stats })
}

/// Plain backprop of `sum_j weight_j * L_j` through the unbroken network.
/// Returns the losses and per-component parameter gradients.
pub fn end_to_end_with_aux(
    model: &PartitionedModel,
    x: &Tensor,
    targets: &[usize],
    weights: &[f64],
    mode: Mode,
) -> Result<(Vec<f64>, Vec<Vec<Tensor>>)> {
    check_weights(weights, model.len())?;
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, x, mode)?;
    let losses = component_losses(&mut tape, &pass.logits, targets)?;
    let total = weighted_total(&mut tape, &losses, weights)?;
    let grads = pass.params.iter().map(|vars| tape.grad(total, vars)).collect::<Result<Vec<_>>>()?;
    Ok((losses.iter().map(|&l| tape.value(l).item()).collect(), grads))
}
