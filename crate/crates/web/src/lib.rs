//! Browser bindings for the demo page in `www/`.
//!
//! Every export returns a JSON string; the page parses it and draws on a canvas.

use std::fmt::Write as _;

use interlock::data::synth_spirals;
use interlock::net::{build, ArchitectureSpec};
use interlock::routing::{assignment, RoutingPolicy, Strategy};
use interlock::schedule::{closed_form_timesteps, simulate, staleness, Phase, PipelineConfig};
use interlock::train::{train, LrSchedule, OptimizerKind, TrainConfig};
use wasm_bindgen::prelude::*;

fn fail(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Unit-cost schedule of `b` steps on `a` accelerators.
///
/// `{"makespan", "closed_form", "a", "events": [[accelerator, slot, duration, batch, is_backward, loss]],
/// "staleness": [...]}`; `loss` is 0 for forward boxes and `staleness` is empty unless hogwild.
pub fn schedule_json(a: usize, b: usize, strategy: &str) -> Result<String, String> {
    let strategy: Strategy = strategy.parse().map_err(|e: interlock::Error| e.to_string())?;
    let cfg = PipelineConfig::new(a, b, strategy);
    let trace = simulate(&cfg).map_err(|e| e.to_string())?;
    let closed = closed_form_timesteps(strategy, a, b).map_err(|e| e.to_string())?;
    let events = join(trace.events.iter().map(|e| {
        let back = u8::from(e.phase == Phase::Backward);
        format!("[{},{},{},{},{back},{}]", e.accelerator, e.slot, e.duration, e.batch, e.loss.unwrap_or(0))
    }));
    let stale = if strategy == Strategy::Hogwild {
        let r = staleness(&trace);
        join((1..=a).map(|k| r.steady_state(k)))
    } else {
        String::new()
    };
    Ok(format!(
        r#"{{"makespan":{},"closed_form":{closed},"a":{a},"b":{b},"events":[{events}],"staleness":[{stale}]}}"#,
        trace.makespan
    ))
}

/// Which losses reach which component bodies.
///
/// `{"n", "source": [source loss per component], "updates": [[k, j]]}` where each
/// pair says the body of component `k` is updated by loss `j`.
pub fn routing_json(n: usize, strategy: &str, mix_local: bool) -> Result<String, String> {
    let strategy: Strategy = strategy.parse().map_err(|e: interlock::Error| e.to_string())?;
    PipelineConfig::new(n, 1, strategy).validate().map_err(|e| e.to_string())?;
    let a = assignment(&RoutingPolicy { strategy, mix_local }, n);
    let mut pairs = Vec::new();
    for k in 1..=n {
        for &j in a.sources(k) {
            pairs.push(format!("[{k},{j}]"));
        }
    }
    Ok(format!(r#"{{"n":{n},"source":[{}],"updates":[{}]}}"#, join(a.source_losses()), pairs.join(",")))
}

/// Trains a three-component MLP on 2-D spirals and reports per-step losses
/// and per-head accuracies.
///
/// `{"losses": [[loss per component] per step], "train": [...], "test": [...]}`
pub fn spirals_json(strategy: &str, steps: u64, seed: u64) -> Result<String, String> {
    let strategy: Strategy = strategy.parse().map_err(|e: interlock::Error| e.to_string())?;
    let mut data = synth_spirals(3, 0.05, 600, 300, 0).map_err(|e| e.to_string())?;
    data.normalize();
    let spec = ArchitectureSpec::mlp(vec![32, 32, 32], 2, 3);
    let model = build(&spec, seed).map_err(|e| e.to_string())?;
    let cfg = TrainConfig::new(RoutingPolicy::new(strategy), OptimizerKind::adam(), LrSchedule::Constant(0.01), 32, steps);
    let cfg = TrainConfig { seed, ..cfg };
    let out = train(model, &data, &cfg).map_err(|e| e.to_string())?;
    if let Some(e) = out.failure {
        return Err(e.to_string());
    }
    let mut losses = String::new();
    for (i, r) in out.metrics.steps.iter().enumerate() {
        if i > 0 {
            losses.push(',');
        }
        write!(losses, "[{}]", join(r.losses.iter().map(|l| format!("{l:.5}")))).unwrap();
    }
    let fin = out.metrics.final_eval.as_ref().ok_or("no final evaluation")?;
    let acc = |v: &[f64]| join(v.iter().map(|a| format!("{a:.4}")));
    let test = fin.test.as_ref().map(|t| acc(&t.per_head)).unwrap_or_default();
    Ok(format!(r#"{{"losses":[{losses}],"train":[{}],"test":[{test}]}}"#, acc(&fin.train.per_head)))
}

#[wasm_bindgen(js_name = scheduleJson)]
pub fn schedule_js(a: usize, b: usize, strategy: &str) -> Result<String, JsError> {
    schedule_json(a, b, strategy).map_err(fail)
}

#[wasm_bindgen(js_name = routingJson)]
pub fn routing_js(n: usize, strategy: &str, mix_local: bool) -> Result<String, JsError> {
    routing_json(n, strategy, mix_local).map_err(fail)
}

#[wasm_bindgen(js_name = spiralsJson)]
pub fn spirals_js(strategy: &str, steps: u32, seed: u32) -> Result<String, JsError> {
    spirals_json(strategy, u64::from(steps), u64::from(seed)).map_err(fail)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_matches_closed_form() {
        let s = schedule_json(4, 10, "2-wise").unwrap();
        assert!(s.starts_with(r#"{"makespan":42,"closed_form":42,"#), "{s}");
        let h = schedule_json(4, 12, "hogwild").unwrap();
        assert!(h.ends_with(r#""staleness":[3,2,1,0]}"#), "{h}");
        assert!(schedule_json(0, 3, "e2e").is_err());
    }

    #[test]
    fn routing_lists_sources() {
        let s = routing_json(3, "2-wise", false).unwrap();
        assert_eq!(s, r#"{"n":3,"source":[2,3,3],"updates":[[1,2],[2,3],[3,3]]}"#);
        assert!(routing_json(2, "3-wise", false).is_err());
    }

    #[test]
    fn spirals_train_and_report_every_step() {
        let s = spirals_json("e2e", 40, 1).unwrap();
        // 40 steps give 39 separators between per-step loss lists.
        assert_eq!(s.matches("],[").count(), 39);
        assert!(s.contains(r#""train":["#) && s.contains(r#""test":["#));
    }
}
