use super::*;

fn strategies(a: usize) -> Vec<(Strategy, bool)> {
    let mut v = vec![(Strategy::EndToEnd, false), (Strategy::Hogwild, false)];
    for n in 1..=a {
        v.push((Strategy::NWise(n), false));
        v.push((Strategy::NWise(n), true));
        v.push((Strategy::GroupedLocal(n), false));
    }
    v
}

fn run(a: usize, b: usize, s: Strategy) -> ScheduleTrace {
    simulate(&PipelineConfig::new(a, b, s)).unwrap()
}

#[test]
fn closed_form_examples() {
    let cf = |s, a, b| closed_form_timesteps(s, a, b).unwrap();
    assert_eq!(cf(Strategy::EndToEnd, 4, 10), 80);
    assert_eq!(cf(Strategy::NWise(1), 4, 10), 23);
    assert_eq!(cf(Strategy::NWise(2), 4, 10), 42);
    assert_eq!(cf(Strategy::NWise(3), 4, 10), 61);
    assert_eq!(cf(Strategy::Hogwild, 4, 10), 26);
    for s in [Strategy::EndToEnd, Strategy::Hogwild, Strategy::NWise(1), Strategy::GroupedLocal(1)] {
        assert_eq!(cf(s, 1, 1), 2);
    }
    assert_eq!(cf(Strategy::GroupedLocal(4), 4, 10), cf(Strategy::EndToEnd, 4, 10));
    assert_eq!(cf(Strategy::GroupedLocal(1), 4, 10), cf(Strategy::NWise(1), 4, 10));
}

#[test]
fn window_wider_than_pipeline_is_rejected() {
    let err = closed_form_timesteps(Strategy::NWise(5), 4, 10).unwrap_err();
    assert!(err.is_config());
    assert!(simulate(&PipelineConfig::new(4, 10, Strategy::NWise(5))).is_err());
    assert!(simulate(&PipelineConfig::new(0, 10, Strategy::EndToEnd)).is_err());
}

#[test]
fn two_wise_four_accelerators_ten_steps() {
    let t = run(4, 10, Strategy::NWise(2));
    assert_eq!(t.makespan, 42);
}

#[test]
fn simulation_matches_closed_form_everywhere() {
    for a in 1..=8 {
        for b in 1..=32 {
            for (s, mix) in strategies(a) {
                let mut cfg = PipelineConfig::new(a, b, s);
                cfg.mix_local = mix;
                let t = simulate(&cfg).unwrap();
                assert_eq!(t.makespan, closed_form_timesteps(s, a, b).unwrap(), "{s} mix={mix} a={a} b={b}");
                validate_trace(&t).unwrap();
            }
        }
    }
}

#[test]
fn makespan_is_monotone_in_window() {
    for a in 1..=8 {
        for b in 1..=32 {
            let e2e = run(a, b, Strategy::EndToEnd).makespan;
            let mut prev = 0;
            for n in 1..=a {
                let m = run(a, b, Strategy::NWise(n)).makespan;
                assert!(m >= prev && m <= e2e, "a={a} b={b} n={n}");
                prev = m;
            }
        }
    }
}

#[test]
fn single_accelerator_takes_two_slots_per_step() {
    for b in 1..=12 {
        for s in [Strategy::EndToEnd, Strategy::Hogwild, Strategy::NWise(1), Strategy::GroupedLocal(1)] {
            assert_eq!(run(1, b, s).makespan, 2 * b as u64);
        }
    }
}

#[test]
fn utilization_limits() {
    let h = run(4, 400, Strategy::Hogwild);
    assert!(h.utilization.iter().all(|&u| u > 0.99), "{:?}", h.utilization);
    let e = run(4, 400, Strategy::EndToEnd);
    assert!(e.utilization.iter().all(|&u| (u - 0.25).abs() < 1e-12), "{:?}", e.utilization);
}

#[test]
fn hogwild_staleness_is_distance_to_top() {
    let rec = staleness(&run(4, 20, Strategy::Hogwild));
    let steady: Vec<usize> = (1..=4).map(|k| rec.steady_state(k)).collect();
    assert_eq!(steady, vec![3, 2, 1, 0]);
    for a in 1..=8 {
        let rec = staleness(&run(a, 3 * a + 2, Strategy::Hogwild));
        for k in 1..=a {
            assert_eq!(rec.steady_state(k), a - k);
            // The pipeline fills gradually: batch i can only lag behind i - 1 updates.
            for i in 1..=3 * a + 2 {
                assert_eq!(rec.get(k, i), (a - k).min(i - 1));
            }
        }
    }
}

#[test]
fn blocking_strategies_are_never_stale() {
    for a in 1..=6 {
        for (s, mix) in strategies(a).into_iter().filter(|(s, _)| *s != Strategy::Hogwild) {
            let mut cfg = PipelineConfig::new(a, 9, s);
            cfg.mix_local = mix;
            assert_eq!(staleness(&simulate(&cfg).unwrap()).max(), 0, "{s}");
        }
    }
}

#[test]
fn costs_and_latency_keep_traces_valid() {
    for a in 1..=5 {
        for (s, mix) in strategies(a) {
            let mut cfg = PipelineConfig::new(a, 7, s);
            cfg.mix_local = mix;
            cfg.forward_cost = 2;
            cfg.backward_cost = 3;
            cfg.comm_latency = 1;
            let t = simulate(&cfg).unwrap();
            validate_trace(&t).unwrap();
            let unit = simulate(&PipelineConfig { mix_local: mix, ..PipelineConfig::new(a, 7, s) }).unwrap();
            assert!(t.makespan >= unit.makespan);
        }
    }
}

#[test]
fn validation_catches_double_booking() {
    let mut t = run(3, 4, Strategy::NWise(1));
    let idx = t.events.iter().position(|e| e.accelerator == 2 && e.phase == Phase::Backward).unwrap();
    t.events[idx].slot -= 1;
    assert!(validate_trace(&t).is_err());
}

#[test]
fn validation_catches_causality_break() {
    let mut t = run(3, 2, Strategy::EndToEnd);
    // Move the top backward of batch 1 after the middle one.
    for e in &mut t.events {
        if e.accelerator == 3 && e.batch == 1 && e.phase == Phase::Backward {
            e.slot += 10;
        }
    }
    assert!(validate_trace(&t).is_err());
}

#[test]
fn trace_csv_layout() {
    let csv = run(2, 1, Strategy::EndToEnd).to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "accelerator,slot,batch,phase,loss");
    assert_eq!(lines[1], "1,0,1,forward,");
    assert_eq!(lines[2], "2,1,1,forward,");
    assert_eq!(lines[3], "2,2,1,backward,2");
    assert_eq!(lines[4], "1,3,1,backward,2");
}
