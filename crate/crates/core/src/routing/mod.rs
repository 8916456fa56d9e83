//! Gradient routing: which loss updates which component body.

mod graph;
mod local;
mod policy;

pub use graph::{build_training_graph, end_to_end_with_aux, TrainingGraph};
pub use local::{combine, message_pass, message_pass_planned, routed_grad_check, BoxGrads, ComponentPlan, LocalPass, StepGrads};
pub use policy::{assignment, GradientAssignment, RoutingPolicy, Strategy};

/// Weight 1 on every loss.
pub fn unit_weights(n: usize) -> Vec<f64> {
    vec![1.0; n]
}

#[cfg(test)]
mod tests;
