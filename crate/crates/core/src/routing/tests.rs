use proptest::prelude::*;

use super::*;
use super::Strategy;
use crate::autodiff::Tape;
use crate::net::{build, ArchitectureSpec, AuxHead, Mode, PartitionedModel, Preset};
use crate::seed;
use crate::tensor::Tensor;

fn mlp(n: usize, seed: u64) -> PartitionedModel {
    let widths = (0..n).map(|k| 3 + k % 3).collect();
    build(&ArchitectureSpec::mlp(widths, 4, 3), seed).unwrap()
}

fn small_conv(n: usize, seed: u64) -> PartitionedModel {
    let mut s = ArchitectureSpec::toy_conv(n, vec![2, 4, 4], 3);
    s.preset = Preset::ToyConv { depth: n, narrow: 3, wide: 4 };
    build(&s, seed).unwrap()
}

fn small_resnet(seed: u64) -> PartitionedModel {
    let mut s = ArchitectureSpec::resnet_lite(vec![2, 4, 4], 3);
    s.preset = Preset::ResnetLite { blocks: 3, width: 3 };
    s.aux_head = AuxHead::ConvHead { first: 3, second: 2 };
    build(&s, seed).unwrap()
}

fn batch(model: &PartitionedModel, size: usize, role: &str) -> (Tensor, Vec<usize>) {
    let mut dims = vec![size];
    dims.extend_from_slice(&model.spec.input_shape);
    let x = Tensor::randn(&dims, &mut seed::rng(17, role));
    let y = (0..size).map(|i| (i * 7 + role.len()) % model.num_classes).collect();
    (x, y)
}

fn max_diff(a: &[Vec<Tensor>], b: &[Vec<Tensor>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

fn bodies(model: &PartitionedModel, g: &[Vec<Tensor>]) -> Vec<Vec<Tensor>> {
    model.components.iter().zip(g).map(|(c, g)| g[c.body_range()].to_vec()).collect()
}

fn all_policies(n: usize) -> Vec<RoutingPolicy> {
    let mut out = vec![RoutingPolicy::new(Strategy::EndToEnd), RoutingPolicy::new(Strategy::Hogwild)];
    for m in 1..=n + 1 {
        out.push(RoutingPolicy::new(Strategy::NWise(m)));
        out.push(RoutingPolicy::mixed(Strategy::NWise(m)));
        out.push(RoutingPolicy::new(Strategy::GroupedLocal(m)));
    }
    out
}

#[test]
fn source_losses_follow_window() {
    let nw = |big_n, n| assignment(&RoutingPolicy::new(Strategy::NWise(big_n)), n).source_losses();
    assert_eq!(nw(2, 4), vec![2, 3, 4, 4]);
    assert_eq!(nw(1, 4), vec![1, 2, 3, 4]);
    assert_eq!(nw(3, 3), vec![3, 3, 3]);
    assert_eq!(assignment(&RoutingPolicy::new(Strategy::EndToEnd), 3).source_losses(), vec![3, 3, 3]);
    assert_eq!(assignment(&RoutingPolicy::new(Strategy::Hogwild), 4).source_losses(), vec![4; 4]);
    let gl = |g, n| assignment(&RoutingPolicy::new(Strategy::GroupedLocal(g)), n).source_losses();
    assert_eq!(gl(2, 4), vec![2, 2, 4, 4]);
    assert_eq!(gl(2, 5), vec![1, 3, 3, 5, 5]);
    assert_eq!(gl(4, 4), vec![4; 4]);
    let mixed = assignment(&RoutingPolicy::mixed(Strategy::NWise(2)), 4);
    assert_eq!(mixed.sources(1), &[1, 2]);
    assert_eq!(mixed.sources(4), &[4]);
    assert_eq!(mixed.reach(3), vec![2, 3]);
    assert_eq!(mixed.traverse(2), vec![2, 3]);
}

#[test]
fn strategy_text_round_trips() {
    for s in [Strategy::EndToEnd, Strategy::NWise(3), Strategy::GroupedLocal(2), Strategy::Hogwild] {
        assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        assert_eq!(s.label().parse::<Strategy>().unwrap(), s);
    }
    assert!("n_wise(0)".parse::<Strategy>().is_err());
    assert!("sideways".parse::<Strategy>().is_err());
}

#[test]
fn message_engine_matches_training_graph() {
    let models = [mlp(4, 1), small_conv(4, 2), small_resnet(3)];
    for model in &models {
        let (x, y) = batch(model, 4, "m");
        let n = model.len();
        let weights: Vec<f64> = (0..n).map(|k| 1.0 - 0.2 * k as f64).collect();
        for policy in all_policies(n) {
            let g = build_training_graph(model, &policy, &x, &y, &weights, Mode::Train).unwrap();
            let m = message_pass(model, &policy, &x, &y, &weights, Mode::Train).unwrap();
            let d = max_diff(&g.gradients().unwrap(), &m.grads);
            assert!(d < 1e-12, "{policy:?}: {d}");
            assert_eq!(g.loss_values(), m.losses);
        }
    }
}

#[test]
fn one_wise_equals_isolated_components() {
    let model = small_conv(4, 5);
    let (x, y) = batch(&model, 5, "iso");
    let routed = message_pass(&model, &RoutingPolicy::new(Strategy::NWise(1)), &x, &y, &[1.0; 4], Mode::Train).unwrap();
    // Each component trained on its own, fed a constant copy of the activation below.
    let mut input = x.clone();
    for (k, c) in model.components.iter().enumerate() {
        let mut tape = Tape::new();
        let xi = tape.leaf(input.clone());
        let vars = c.bind(&mut tape);
        let mut log = Vec::new();
        let a = c.forward_body(&mut tape, xi, &vars, Mode::Train, &mut log).unwrap();
        let logits = c.forward_head(&mut tape, a, &vars, Mode::Train, &mut log).unwrap().unwrap_or(a);
        let loss = tape.softmax_cross_entropy(logits, &y).unwrap();
        let want = tape.grad(loss, &vars).unwrap();
        assert!(max_diff(&[want], &[routed.grads[k].clone()]) < 1e-12, "component {}", k + 1);
        input = tape.value(a).clone();
    }
}

#[test]
fn full_window_mixed_equals_end_to_end_with_aux() {
    for model in [mlp(3, 4), small_conv(4, 6)] {
        let n = model.len();
        let (x, y) = batch(&model, 4, "e2e");
        let (_, reference) = end_to_end_with_aux(&model, &x, &y, &vec![1.0; n], Mode::Train).unwrap();
        let routed = message_pass(&model, &RoutingPolicy::mixed(Strategy::NWise(n)), &x, &y, &vec![1.0; n], Mode::Train).unwrap();
        assert!(max_diff(&reference, &routed.grads) < 1e-12);
    }
}

#[test]
fn full_window_single_source_equals_end_to_end_on_bodies() {
    for model in [mlp(3, 7), small_resnet(8)] {
        let n = model.len();
        let (x, y) = batch(&model, 4, "src");
        let mut task_only = vec![0.0; n];
        task_only[n - 1] = 1.0;
        let (_, reference) = end_to_end_with_aux(&model, &x, &y, &task_only, Mode::Train).unwrap();
        for policy in [RoutingPolicy::new(Strategy::NWise(n)), RoutingPolicy::new(Strategy::EndToEnd)] {
            let routed = message_pass(&model, &policy, &x, &y, &vec![1.0; n], Mode::Train).unwrap();
            let d = max_diff(&bodies(&model, &reference), &bodies(&model, &routed.grads));
            assert!(d < 1e-12, "{policy:?}: {d}");
        }
    }
}

#[test]
fn single_component_end_to_end_is_plain_backprop() {
    let model = mlp(1, 2);
    let (x, y) = batch(&model, 6, "one");
    let (losses, grads) = end_to_end_with_aux(&model, &x, &y, &[1.0], Mode::Train).unwrap();
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &x, Mode::Train).unwrap();
    let loss = tape.softmax_cross_entropy(pass.logits[0], &y).unwrap();
    assert_eq!(losses[0], tape.value(loss).item());
    assert!(max_diff(&grads, &[tape.grad(loss, &pass.params[0]).unwrap()]) == 0.0);
}

/// Gradient of one loss with respect to one body, from the single-tape graph.
fn per_loss_body_grad(g: &TrainingGraph, model: &PartitionedModel, j: usize, k: usize) -> f64 {
    let c = &model.components[k - 1];
    let vars = &g.params[k - 1][c.body_range()];
    g.tape.grad(g.losses[j - 1], vars).unwrap().iter().map(Tensor::max_abs).fold(0.0, f64::max)
}

#[test]
fn two_wise_probe_on_three_components() {
    let model = mlp(3, 9);
    let (x, y) = batch(&model, 8, "probe");
    let g = build_training_graph(&model, &RoutingPolicy::new(Strategy::NWise(2)), &x, &y, &[1.0; 3], Mode::Train).unwrap();
    assert_eq!(per_loss_body_grad(&g, &model, 3, 1), 0.0);
    assert!(per_loss_body_grad(&g, &model, 2, 1) > 0.0);
    assert_eq!(per_loss_body_grad(&g, &model, 1, 1), 0.0);
}

#[test]
fn one_wise_isolates_every_body() {
    let model = mlp(4, 3);
    let (x, y) = batch(&model, 8, "iso");
    let g = build_training_graph(&model, &RoutingPolicy::new(Strategy::NWise(1)), &x, &y, &[1.0; 4], Mode::Train).unwrap();
    for j in 1..=4 {
        for k in 1..=4 {
            let v = per_loss_body_grad(&g, &model, j, k);
            assert_eq!(v == 0.0, j != k, "L{j} on body {k}");
        }
    }
}

#[test]
fn grouped_pairs_equal_one_wise_on_merged_model() {
    let model = small_conv(6, 12);
    let merged = model.merged(2).unwrap();
    let (x, y) = batch(&model, 4, "grp");
    let grouped = message_pass(&model, &RoutingPolicy::new(Strategy::GroupedLocal(2)), &x, &y, &[1.0; 6], Mode::Train).unwrap();
    let local = message_pass(&merged, &RoutingPolicy::new(Strategy::NWise(1)), &x, &y, &[1.0; 3], Mode::Train).unwrap();
    for (b, mc) in merged.components.iter().enumerate() {
        let (lo, hi) = (2 * b, 2 * b + 1);
        let mut want: Vec<Tensor> = Vec::new();
        for k in [lo, hi] {
            let c = &model.components[k];
            want.extend(grouped.grads[k][c.body_range()].iter().cloned());
        }
        let top = &model.components[hi];
        want.extend(grouped.grads[hi][top.head_range()].iter().cloned());
        assert_eq!(want.len(), mc.params.len());
        for (w, g) in want.iter().zip(&local.grads[b]) {
            assert_eq!(w, g, "block {}", b + 1);
        }
    }
}

#[test]
fn routing_never_changes_forward_values() {
    let model = small_conv(4, 4);
    let (x, y) = batch(&model, 3, "fwd");
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, &x, Mode::Train).unwrap();
    let plain: Vec<f64> = crate::net::component_losses(&mut tape, &pass.logits, &y)
        .unwrap()
        .into_iter()
        .map(|l| tape.value(l).item())
        .collect();
    for policy in all_policies(4) {
        let m = message_pass(&model, &policy, &x, &y, &[1.0; 4], Mode::Train).unwrap();
        assert_eq!(m.losses, plain);
    }
}

#[test]
fn routed_gradients_pass_finite_differences() {
    let model = small_conv(4, 31);
    let (x, y) = batch(&model, 4, "fd");
    let policy = RoutingPolicy::new(Strategy::NWise(2));
    let report = routed_grad_check(&model, &policy, &x, &y, &[1.0; 4], 1e-5, Some(6), 0).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
    assert!(report.coordinates > 50);
}

#[test]
fn plans_list_boxes_and_messages() {
    let a = assignment(&RoutingPolicy::new(Strategy::NWise(2)), 4);
    let plans = ComponentPlan::for_model(&a, &[1.0; 4]);
    assert_eq!(plans[0].boxes, vec![1, 2]);
    assert_eq!(plans[0].sends_down, Vec::<usize>::new());
    assert_eq!(plans[1].boxes, vec![2, 3]);
    assert_eq!(plans[1].sends_down, vec![2]);
    assert_eq!(plans[3].boxes, vec![4]);
    assert_eq!(plans[3].sends_down, vec![4]);
    let e2e = ComponentPlan::for_model(&assignment(&RoutingPolicy::new(Strategy::EndToEnd), 3), &[1.0; 3]);
    assert_eq!(e2e[0].boxes, vec![1, 3]);
    assert_eq!(e2e[1].sends_down, vec![3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// A loss reaches a body on the tape exactly when the assignment says so,
    /// and the probed gradient is nonzero in that case.
    #[test]
    fn symbolic_reach_matches_assignment(n in 1usize..5, big_n in 1usize..6, mix in any::<bool>(), s in 0u64..1000) {
        let model = mlp(n, s);
        // Large enough that no narrow layer goes fully dead on the batch.
        let (x, y) = batch(&model, 32, "reach");
        let policy = RoutingPolicy { strategy: Strategy::NWise(big_n), mix_local: mix };
        let a = assignment(&policy, n);
        let g = build_training_graph(&model, &policy, &x, &y, &vec![1.0; n], Mode::Train).unwrap();
        for j in 1..=n {
            for k in 1..=n {
                let c = &model.components[k - 1];
                let leaf = g.params[k - 1][c.body_range()][0];
                let expected = a.reach(j).contains(&k);
                let window = k <= j && j <= (k + big_n - 1).min(n) && (mix || j == a.source_loss(k));
                prop_assert_eq!(expected, window);
                prop_assert_eq!(g.tape.reaches(g.losses[j - 1], leaf), expected);
                prop_assert_eq!(per_loss_body_grad(&g, &model, j, k) > 0.0, expected);
            }
        }
    }

    #[test]
    fn source_is_clamped_window(n in 1usize..12, big_n in 1usize..14) {
        let a = assignment(&RoutingPolicy::new(Strategy::NWise(big_n)), n);
        for k in 1..=n {
            prop_assert_eq!(a.source_loss(k), (k + big_n - 1).min(n));
            prop_assert!(a.traverse(k).iter().all(|&j| j >= k));
        }
    }

    #[test]
    fn grouped_sources_are_block_tops(n in 1usize..12, g in 1usize..6) {
        let a = assignment(&RoutingPolicy::new(Strategy::GroupedLocal(g)), n);
        let tops: std::collections::BTreeSet<usize> = (1..=n).map(|k| a.source_loss(k)).collect();
        prop_assert_eq!(tops.len(), n.div_ceil(g));
        prop_assert_eq!(a.source_loss(n), n);
    }
}

