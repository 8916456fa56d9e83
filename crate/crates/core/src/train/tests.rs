use std::time::Duration;

use super::*;
use crate::data::{synth_blobs, synth_images, synth_spirals};
use crate::net::{build, ArchitectureSpec, Preset};
use crate::routing::RoutingPolicy;
use crate::tensor::Tensor;

fn tiny_conv(depth: usize) -> (PartitionedModel, Dataset) {
    let mut spec = ArchitectureSpec::toy_conv(depth, vec![3, 6, 6], 4);
    spec.preset = Preset::ToyConv { depth, narrow: 3, wide: 4 };
    let data = synth_images(4, 3, 6, 6, 64, 16, 11).unwrap();
    (build(&spec, 5).unwrap(), data)
}

fn sgd_cfg(strategy: Strategy, steps: u64) -> TrainConfig {
    let mut cfg =
        TrainConfig::new(RoutingPolicy::new(strategy), OptimizerKind::sgd(0.9, 1e-4), LrSchedule::Constant(0.05), 8, steps);
    cfg.seed = 3;
    cfg
}

fn run(model: &PartitionedModel, data: &Dataset, cfg: &TrainConfig) -> TrainOutcome {
    let out = train(model.clone(), data, cfg).unwrap();
    assert!(out.failure.is_none(), "{:?}", out.failure);
    out
}

fn max_param_diff(a: &PartitionedModel, b: &PartitionedModel) -> f64 {
    a.params().zip(b.params()).map(|(p, q)| p.value.max_abs_diff(&q.value)).fold(0.0, f64::max)
}

#[test]
fn mlp_on_blobs_end_to_end() {
    let data = synth_blobs(4, 8, 6.0, 800, 200, 1).unwrap();
    let model = build(&ArchitectureSpec::mlp(vec![16, 16, 16], 8, 4), 2).unwrap();
    let cfg = TrainConfig::new(
        RoutingPolicy::new(Strategy::EndToEnd),
        OptimizerKind::sgd(0.9, 0.0),
        LrSchedule::Constant(0.05),
        32,
        200,
    );
    let out = run(&model, &data, &cfg);
    let acc = out.metrics.final_eval.unwrap().train.final_head();
    assert!(acc > 0.95, "train accuracy {acc}");
}

#[test]
fn mlp_fits_noise_free_spirals() {
    let data = synth_spirals(3, 0.0, 600, 0, 4).unwrap();
    let model = build(&ArchitectureSpec::mlp(vec![64, 64, 64], 2, 3), 6).unwrap();
    let cfg = TrainConfig::new(
        RoutingPolicy::new(Strategy::EndToEnd),
        OptimizerKind::adam(),
        LrSchedule::Constant(0.01),
        50,
        3000,
    );
    let out = run(&model, &data, &cfg);
    let acc = out.metrics.final_eval.unwrap().train.final_head();
    assert!(acc > 0.95, "train accuracy {acc}");
}

#[test]
fn reference_runs_are_bitwise_repeatable() {
    let (model, data) = tiny_conv(3);
    let mut cfg = sgd_cfg(Strategy::NWise(2), 12);
    cfg.eval_every = 4;
    let a = run(&model, &data, &cfg);
    let b = run(&model, &data, &cfg);
    assert_eq!(a.metrics.metrics_csv(), b.metrics.metrics_csv());
    assert_eq!(a.metrics.eval_csv(), b.metrics.eval_csv());
    assert_eq!(a.model, b.model);
    assert_eq!(a.metrics.evals.len(), 3);
}

#[test]
fn pipelined_matches_reference_for_blocking_strategies() {
    let (model, data) = tiny_conv(4);
    let strategies = [
        Strategy::EndToEnd,
        Strategy::NWise(1),
        Strategy::NWise(2),
        Strategy::NWise(3),
        Strategy::GroupedLocal(2),
        Strategy::GroupedLocal(3),
    ];
    for strategy in strategies {
        for mix_local in [false, true] {
            let mut cfg = sgd_cfg(strategy, 10);
            cfg.policy.mix_local = mix_local;
            cfg.eval_every = 5;
            let reference = run(&model, &data, &cfg);
            cfg.mode = ExecMode::Pipelined;
            let piped = run(&model, &data, &cfg);
            assert_eq!(reference.metrics.steps.len(), piped.metrics.steps.len());
            for (r, p) in reference.metrics.steps.iter().zip(&piped.metrics.steps) {
                assert_eq!(r.step, p.step);
                for (a, b) in r.losses.iter().zip(&p.losses) {
                    assert!((a - b).abs() < 1e-6, "{strategy} step {}: {a} vs {b}", r.step);
                }
            }
            assert!(max_param_diff(&reference.model, &piped.model) < 1e-6, "{strategy}");
            assert_eq!(reference.metrics.evals, piped.metrics.evals, "{strategy}");
        }
    }
}

#[test]
fn pipelined_hogwild_matches_snapshot_emulation() {
    let (model, data) = tiny_conv(4);
    for aux in [false, true] {
        let mut cfg = sgd_cfg(Strategy::Hogwild, 12);
        cfg.hogwild_aux_heads = aux;
        let emulated = run(&model, &data, &cfg);
        cfg.mode = ExecMode::Pipelined;
        let piped = run(&model, &data, &cfg);
        for (r, p) in emulated.metrics.steps.iter().zip(&piped.metrics.steps) {
            for (a, b) in r.losses.iter().zip(&p.losses) {
                assert!((a - b).abs() < 1e-6, "step {}: {a} vs {b}", r.step);
            }
        }
        assert!(max_param_diff(&emulated.model, &piped.model) < 1e-6);
        assert_eq!(emulated.metrics.staleness, piped.metrics.staleness);
        let stale = piped.metrics.staleness.unwrap();
        let maxes: Vec<usize> = stale.iter().map(|s| s.max).collect();
        assert_eq!(maxes, vec![3, 2, 1, 0]);
    }
}

#[test]
fn hogwild_differs_from_end_to_end() {
    // Same routing, but stale reads change the trajectory.
    let (model, data) = tiny_conv(3);
    let hog = run(&model, &data, &sgd_cfg(Strategy::Hogwild, 6));
    let e2e = run(&model, &data, &sgd_cfg(Strategy::EndToEnd, 6));
    assert_eq!(hog.metrics.steps[0].losses, e2e.metrics.steps[0].losses);
    assert!(max_param_diff(&hog.model, &e2e.model) > 1e-9);
}

#[test]
fn hogwild_leaves_aux_heads_alone_by_default() {
    let (model, data) = tiny_conv(3);
    let out = run(&model, &data, &sgd_cfg(Strategy::Hogwild, 4));
    for (before, after) in model.components.iter().zip(&out.model.components).take(2) {
        assert_eq!(before.params[before.head_range()], after.params[after.head_range()]);
        assert_ne!(before.params[before.body_range()], after.params[after.body_range()]);
    }
}

#[test]
fn one_wise_never_moves_other_bodies_through_a_frozen_loss() {
    // Under 1-wise, changing head 2's weight leaves component 1 untouched.
    let (model, data) = tiny_conv(3);
    let mut cfg = sgd_cfg(Strategy::NWise(1), 5);
    let a = run(&model, &data, &cfg);
    cfg.loss_weights = Some(vec![1.0, 0.0, 1.0]);
    let b = run(&model, &data, &cfg);
    assert_eq!(a.model.components[0], b.model.components[0]);
    assert_ne!(a.model.components[1], b.model.components[1]);
}

#[test]
fn wall_clock_ratio_tracks_schedule() {
    let data = synth_blobs(3, 4, 4.0, 64, 0, 2).unwrap();
    let model = build(&ArchitectureSpec::mlp(vec![4, 4, 4, 4], 4, 3), 1).unwrap();
    let (a, b) = (4.0, 12.0);
    let time = |strategy| {
        let mut cfg = sgd_cfg(strategy, b as u64);
        cfg.mode = ExecMode::Pipelined;
        cfg.phase_delay = Some(Duration::from_millis(4));
        run(&model, &data, &cfg).metrics.elapsed_secs
    };
    let ratio = time(Strategy::EndToEnd) / time(Strategy::NWise(1));
    let expected = a * 2.0 * b / (2.0 * b + a - 1.0);
    assert!((ratio / expected - 1.0).abs() < 0.2, "ratio {ratio}, expected {expected}");
}

#[test]
fn divergence_keeps_partial_metrics() {
    let (model, data) = tiny_conv(3);
    for mode in [ExecMode::Reference, ExecMode::Pipelined] {
        let mut cfg = sgd_cfg(Strategy::NWise(1), 50);
        cfg.schedule = LrSchedule::Constant(1e200);
        cfg.mode = mode;
        let out = train(model.clone(), &data, &cfg).unwrap();
        match out.failure {
            Some(Error::NonFinite { step, .. }) => {
                assert!(step >= 1 && step < 50);
                assert!(out.metrics.steps.len() < 50);
                assert!(out.metrics.steps.iter().zip(1..).all(|(r, s)| r.step == s));
            }
            other => panic!("{mode:?}: expected a non-finite failure, got {other:?}"),
        }
    }
}

#[test]
fn bad_configs_fail_before_training() {
    let (model, data) = tiny_conv(3);
    assert!(train(model.clone(), &data, &sgd_cfg(Strategy::NWise(4), 5)).unwrap_err().is_config());
    let mut cfg = sgd_cfg(Strategy::NWise(1), 5);
    cfg.batch_size = 1000;
    assert!(train(model.clone(), &data, &cfg).unwrap_err().is_config());
    let other = synth_images(4, 3, 8, 8, 64, 0, 1).unwrap();
    assert!(train(model, &other, &sgd_cfg(Strategy::NWise(1), 5)).unwrap_err().is_config());
}

#[test]
fn budgets_resolve_to_steps() {
    assert_eq!(Budget::Steps(7).resolve(Strategy::EndToEnd, 4, 10).unwrap(), 7);
    assert_eq!(Budget::Epochs(3).resolve(Strategy::EndToEnd, 4, 10).unwrap(), 30);
    // 1-wise on 4: 2b + 3 <= 100 gives b = 48; end-to-end: 8b <= 100 gives 12.
    assert_eq!(Budget::LogicalTime(100).resolve(Strategy::NWise(1), 4, 1).unwrap(), 48);
    assert_eq!(Budget::LogicalTime(100).resolve(Strategy::EndToEnd, 4, 1).unwrap(), 12);
    assert_eq!(Budget::LogicalTime(8).resolve(Strategy::EndToEnd, 4, 1).unwrap(), 1);
    assert!(Budget::LogicalTime(7).resolve(Strategy::EndToEnd, 4, 1).is_err());
}

#[test]
fn logical_time_follows_makespan() {
    let (model, data) = tiny_conv(3);
    let out = run(&model, &data, &sgd_cfg(Strategy::NWise(1), 4));
    let times: Vec<u64> = out.metrics.steps.iter().map(|r| r.time_logical).collect();
    assert_eq!(times, vec![4, 6, 8, 10]);
    assert!(out.metrics.metrics_csv().starts_with("step,time_logical,time_wall,lr,loss_c1,loss_c2,loss_c3\n1,4,,0.05,"));
}

#[test]
fn ensemble_with_identical_heads_equals_single_head() {
    let model = build(&ArchitectureSpec::mlp(vec![5, 5], 4, 3), 1).unwrap();
    let x = Tensor::randn(&[40, 4], &mut crate::seed::rng(0, "x"));
    let y: Vec<usize> = (0..40).map(|i| i % 3).collect();
    let acc = evaluate_tensors(&model, &x, &y).unwrap();
    assert_eq!(acc.ensemble[0], acc.final_head());
    assert_eq!(acc.top(1).unwrap(), acc.final_head());
    assert!(acc.top(3).is_err());
    let logits = head_logits(&model, &x).unwrap();
    let same = vec![logits[1].clone(), logits[1].clone(), logits[1].clone()];
    assert_eq!(ensemble_predictions(&same, 3).unwrap(), logits[1].argmax_rows());
}

#[test]
fn ensemble_of_random_and_perfect_head_by_brute_force() {
    let mut rng = crate::seed::rng(9, "ensemble");
    let (n, c) = (100, 4);
    let y: Vec<usize> = (0..n).map(|i| (i * 7) % c).collect();
    let random = Tensor::randn(&[n, c], &mut rng);
    let mut perfect = Tensor::zeros(&[n, c]);
    for (i, &t) in y.iter().enumerate() {
        perfect.data_mut()[i * c + t] = 1.0;
    }
    let acc = |pred: &[usize]| pred.iter().zip(&y).filter(|(p, t)| p == t).count() as f64 / n as f64;
    let logits = [random.clone(), perfect.clone()];
    let got = acc(&ensemble_predictions(&logits, 2).unwrap());
    let mut brute = Vec::new();
    for i in 0..n {
        let row = |t: &Tensor| {
            let r = &t.data()[i * c..(i + 1) * c];
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let (p, q) = (row(&random), row(&perfect));
        let mut best = 0;
        for k in 1..c {
            if (p[k] + q[k]) / 2.0 > (p[best] + q[best]) / 2.0 {
                best = k;
            }
        }
        brute.push(best);
    }
    assert_eq!(got, acc(&brute));
    let (lo, hi) = (acc(&random.argmax_rows()), acc(&perfect.argmax_rows()));
    assert!(lo <= got && got <= hi, "{lo} <= {got} <= {hi}");
}

#[test]
fn snapshot_queue_prunes_old_versions() {
    let (model, _) = tiny_conv(3);
    let mut q = StaleSnapshotQueue::new(&model);
    for v in 1..=5 {
        q.push(&model.components[0], v);
    }
    assert_eq!(q.len(1), 6);
    q.prune(1, 3);
    assert_eq!(q.len(1), 3);
    assert!(q.get(1, 2).is_none() && q.get(1, 3).is_some());
    q.clear();
    assert!(q.is_empty());
}
