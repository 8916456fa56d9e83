use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use interlock::config::RunConfig;
use interlock::data::Dataset;
use interlock::net::{build, parse_shape, ArchitectureSpec, AuxHead, Preset};
use interlock::report::{
    append_results, load_checkpoint, parse_metrics_csv, parse_results_csv, write_run, ResultRow, RESULTS_FILE,
    RESULTS_HEADER,
};
use interlock::routing::{routed_grad_check, unit_weights, RoutingPolicy, Strategy};
use interlock::schedule::{closed_form_timesteps, simulate as run_schedule, staleness, PipelineConfig};
use interlock::train::{evaluate, train as run_training, HeadAccuracy, RunMetrics};
use interlock::{seed, Tensor};

use crate::failure::{CmdResult, Failure};
use crate::{ConfigArgs, EvalArgs, GradcheckArgs, SimulateArgs, SummarizeArgs, SweepArgs, TrainArgs, OUTPUT_ROOT_ENV};

pub const SWEEP_FILE: &str = "sweep.csv";

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn run_dir(cfg: &RunConfig) -> PathBuf {
    output_root().join(&cfg.output_dir)
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::runtime(format!("{}: {e}", path.display()))
}

/// Config file, then `--set` pairs, then the shorthand flags.
pub fn resolve_config(args: &ConfigArgs) -> CmdResult<RunConfig> {
    let base = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    let mut overrides = Vec::new();
    for s in &args.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Failure::config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let short = [
        ("model.arch", &args.arch),
        ("routing.strategy", &args.strategy),
        ("train.steps", &args.steps),
        ("train.epochs", &args.epochs),
        ("train.seeds", &args.seeds),
        ("train.mode", &args.mode),
        ("train.batch_size", &args.batch_size),
        ("lr.value", &args.lr),
        ("output.dir", &args.out),
    ];
    for (key, value) in short {
        if let Some(v) = value {
            overrides.push((key.to_string(), v.clone()));
        }
    }
    if overrides.is_empty() {
        return Ok(base);
    }
    Ok(base.with_overrides(&overrides)?)
}

fn describe(acc: Option<f64>) -> String {
    acc.map_or("-".into(), |a| format!("{a:.4}"))
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let cfg = resolve_config(&args.config)?;
    let data = cfg.load_data()?;
    let spec = cfg.architecture(&data)?;
    let warm = match &args.resume {
        None => None,
        Some(path) => {
            let (model, header) =
                load_checkpoint(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
            if header.spec != spec {
                return Err(Failure::config(format!(
                    "checkpoint architecture {} / {} / {:?} does not match the configured {} / {} / {:?}",
                    header.spec.preset,
                    header.spec.aux_head,
                    header.spec.input_shape,
                    spec.preset,
                    spec.aux_head,
                    spec.input_shape
                )));
            }
            Some(model)
        }
    };
    let dir = run_dir(&cfg);
    let results = dir.join(RESULTS_FILE);
    for &seed in &cfg.seeds {
        let model = match &warm {
            Some(m) => m.clone(),
            None => build(&spec, seed)?,
        };
        let out = run_training(model, &data, &cfg.train_config(seed))?;
        let run = dir.join(format!("seed-{seed}"));
        write_run(&run, &out, seed).map_err(Failure::runtime)?;
        let row = ResultRow::from_outcome(&out, cfg.policy.strategy.label(), cfg.policy.mix_local, seed, cfg.mode.name());
        append_results(&results, std::slice::from_ref(&row)).map_err(Failure::runtime)?;
        println!(
            "seed {seed}: {} steps in {:.1}s, final loss {:.4}, train acc {}, test acc {} -> {}",
            out.steps,
            out.metrics.elapsed_secs,
            row.final_loss,
            describe(row.train_acc),
            describe(row.test_acc),
            run.display()
        );
        if let Some(e) = out.failure {
            return Err(Failure::runtime(format!("seed {seed} stopped after {} steps: {e}", out.steps)));
        }
    }
    println!("results: {}", results.display());
    Ok(())
}

/// Parses `s`, letting `n` replace the N of `n-wise` or the g of `grouped`.
fn strategy_with(s: &str, n: Option<usize>) -> CmdResult<Strategy> {
    let parsed = match (s, n) {
        ("n-wise" | "n_wise", Some(n)) => Strategy::NWise(n),
        ("grouped" | "grouped_local", Some(g)) => Strategy::GroupedLocal(g),
        _ => s.parse().map_err(|e| Failure::config(format!("--strategy: {e}")))?,
    };
    Ok(match (parsed, n) {
        (Strategy::NWise(_), Some(n)) => Strategy::NWise(n),
        (Strategy::GroupedLocal(_), Some(g)) => Strategy::GroupedLocal(g),
        (other, Some(_)) => return Err(Failure::config(format!("--n does not apply to {other}"))),
        (other, None) => other,
    })
}

pub fn simulate(args: &SimulateArgs) -> CmdResult {
    let strategy = strategy_with(&args.strategy, args.n)?;
    let cfg = PipelineConfig {
        forward_cost: args.forward_cost,
        backward_cost: args.backward_cost,
        comm_latency: args.comm_latency,
        ..PipelineConfig::new(args.a, args.b, strategy)
    };
    cfg.validate()?;
    let trace = run_schedule(&cfg)?;
    let unit = cfg.forward_cost == 1 && cfg.backward_cost == 1 && cfg.comm_latency == 0;
    let closed = if unit { Some(closed_form_timesteps(strategy, args.a, args.b)?) } else { None };
    println!("{} {}", trace.makespan, closed.map_or("n/a".into(), |c| c.to_string()));
    println!("strategy {strategy}");
    println!("accelerators {}", args.a);
    println!("steps {}", args.b);
    let busy: Vec<String> = trace.utilization.iter().map(|u| format!("{u:.4}")).collect();
    println!("utilization {}", busy.join(","));
    if strategy == Strategy::Hogwild {
        let record = staleness(&trace);
        let steady: Vec<String> = (1..=args.a).map(|k| record.steady_state(k).to_string()).collect();
        println!("staleness {}", steady.join(","));
    }
    if let Some(path) = &args.trace {
        if path.as_os_str() == "-" {
            print!("{}", trace.to_csv());
        } else {
            fs::write(path, trace.to_csv()).map_err(io(path))?;
        }
    }
    match closed {
        Some(c) if c != trace.makespan => {
            Err(Failure::runtime(format!("simulated makespan {} differs from the closed form {c}", trace.makespan)))
        }
        _ => Ok(()),
    }
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> CmdResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|x| x.trim().parse::<T>().map_err(|e| Failure::config(format!("{flag}: `{x}`: {e}"))))
        .collect()
}

/// The preset with `depth` components.
fn with_depth(preset: &Preset, depth: usize) -> Preset {
    match preset {
        Preset::ToyConv { narrow, wide, .. } => Preset::ToyConv { depth, narrow: *narrow, wide: *wide },
        Preset::Mlp { widths } => {
            let last = *widths.last().unwrap_or(&16);
            Preset::Mlp { widths: (0..depth).map(|i| widths.get(i).copied().unwrap_or(last)).collect() }
        }
        Preset::ResnetLite { width, .. } => Preset::ResnetLite { blocks: depth, width: *width },
    }
}

pub fn sweep(args: &SweepArgs) -> CmdResult {
    let base = resolve_config(&args.config)?;
    let strategies: Vec<Strategy> = parse_list("--strategies", &args.strategies)?;
    let data = base.load_data()?;
    let depths: Vec<usize> = match &args.depths {
        Some(d) => parse_list("--depths", d)?,
        None => vec![base.architecture(&data)?.num_components()],
    };
    // Reject every bad combination before training anything.
    let mut plan = Vec::new();
    for &strategy in &strategies {
        for &depth in &depths {
            let mut cfg = base.clone();
            cfg.policy.strategy = strategy;
            cfg.preset = with_depth(&base.preset, depth);
            let spec = cfg.architecture(&data)?;
            PipelineConfig::new(spec.num_components(), 1, strategy).validate()?;
            for &seed in &base.seeds {
                plan.push((cfg.clone(), spec.clone(), seed));
            }
        }
    }
    let dir = run_dir(&base);
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let table = dir.join(SWEEP_FILE);
    fs::write(&table, format!("{RESULTS_HEADER}\n")).map_err(io(&table))?;
    let mut failed = 0;
    for (i, (cfg, spec, seed)) in plan.iter().enumerate() {
        let out = run_training(build(spec, *seed)?, &data, &cfg.train_config(*seed))?;
        let row = ResultRow::from_outcome(&out, cfg.policy.strategy.label(), cfg.policy.mix_local, *seed, cfg.mode.name());
        append_results(&table, std::slice::from_ref(&row)).map_err(Failure::runtime)?;
        eprintln!(
            "[{}/{}] {} {} seed {seed}: final loss {:.4}, test acc {}",
            i + 1,
            plan.len(),
            spec.preset,
            cfg.policy.strategy.label(),
            row.final_loss,
            describe(row.test_acc)
        );
        failed += usize::from(out.failure.is_some());
    }
    println!("{}", table.display());
    if failed > 0 {
        return Err(Failure::runtime(format!("{failed} of {} runs stopped early; see the status column", plan.len())));
    }
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> CmdResult {
    let field = |flag: &str, e: interlock::Error| Failure::config(format!("{flag}: {e}"));
    let spec = ArchitectureSpec {
        preset: args.arch.parse::<Preset>().map_err(|e| field("--arch", e))?,
        aux_head: args.aux_head.parse::<AuxHead>().map_err(|e| field("--aux-head", e))?,
        input_shape: parse_shape(&args.input).map_err(|e| field("--input", e))?,
        num_classes: args.classes,
    };
    let strategy: Strategy = args.strategy.parse().map_err(|e| field("--strategy", e))?;
    if args.batch < 2 {
        return Err(Failure::config("--batch must be >= 2 for train-mode batch norm"));
    }
    let model = build(&spec, args.seed)?;
    PipelineConfig::new(model.len(), 1, strategy).validate()?;
    let mut shape = vec![args.batch];
    shape.extend_from_slice(&spec.input_shape);
    let x = Tensor::randn(&shape, &mut seed::rng(args.seed, "gradcheck/input"));
    let targets: Vec<usize> = (0..args.batch).map(|i| i % args.classes).collect();
    let policy = RoutingPolicy { strategy, mix_local: args.mix_local };
    let max_coords = (args.max_coords > 0).then_some(args.max_coords);
    let report =
        routed_grad_check(&model, &policy, &x, &targets, &unit_weights(model.len()), args.eps, max_coords, args.seed)?;
    let ids: Vec<&str> = model.params().map(|p| p.id.as_str()).collect();
    println!("model {} / {} on {}", spec.preset, spec.aux_head, args.input);
    println!("strategy {strategy}");
    println!("coordinates {}", report.coordinates);
    println!("max_rel_error {:.3e}", report.max_rel_error);
    if let Some((p, c)) = report.worst {
        println!("worst {}[{c}]", ids.get(p).copied().unwrap_or("?"));
    }
    if report.max_rel_error >= args.tolerance {
        return Err(Failure::runtime(format!(
            "relative error {:.3e} is not below {:.1e}",
            report.max_rel_error, args.tolerance
        )));
    }
    println!("ok");
    Ok(())
}

/// `head,train_acc,test_acc` rows: one per head, then ensembles of the top m.
pub fn accuracy_table(train: &HeadAccuracy, test: Option<&HeadAccuracy>) -> String {
    let mut s = String::from("head,train_acc,test_acc\n");
    let cell = |a: Option<f64>| a.map(|v| format!("{v:.6}")).unwrap_or_default();
    for (k, a) in train.per_head.iter().enumerate() {
        s += &format!("c{},{},{}\n", k + 1, cell(Some(*a)), cell(test.map(|t| t.per_head[k])));
    }
    for (m, a) in train.ensemble.iter().enumerate() {
        s += &format!("top{},{},{}\n", m + 1, cell(Some(*a)), cell(test.map(|t| t.ensemble[m])));
    }
    s
}

fn check_fits(data: &Dataset, spec: &ArchitectureSpec) -> CmdResult {
    if data.sample_shape() != spec.input_shape.as_slice() || data.num_classes != spec.num_classes {
        return Err(Failure::config(format!(
            "dataset has samples {:?} and {} classes, the checkpoint expects {:?} and {}",
            data.sample_shape(),
            data.num_classes,
            spec.input_shape,
            spec.num_classes
        )));
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let cfg = resolve_config(&args.config)?;
    let (model, header) = load_checkpoint(&args.checkpoint)
        .map_err(|e| Failure::config(format!("{}: {e}", args.checkpoint.display())))?;
    let data = cfg.load_data()?;
    check_fits(&data, &header.spec)?;
    let train = evaluate(&model, &data.train())?;
    let test = if data.test().is_empty() { None } else { Some(evaluate(&model, &data.test())?) };
    print!("{}", accuracy_table(&train, test.as_ref()));
    Ok(())
}

fn metrics_summary(m: &RunMetrics) -> String {
    let mut s = String::from("component,steps,first_loss,tail_loss\n");
    let window = (m.steps.len() / 10).max(1);
    for k in 1..=m.components {
        let first = m.steps.first().map_or(f64::NAN, |r| r.losses[k - 1]);
        s += &format!("c{k},{},{first:.6},{:.6}\n", m.steps.len(), m.tail_loss(k, window));
    }
    s
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn results_summary(rows: &[ResultRow]) -> String {
    let mut groups: BTreeMap<(String, usize, String), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.arch.clone(), r.components, r.strategy.clone())).or_default().push(r);
    }
    let mut s = String::from("arch,components,strategy,runs,failed,mean_final_loss,mean_test_acc\n");
    for ((arch, n, strategy), rs) in groups {
        let losses: Vec<f64> = rs.iter().map(|r| r.final_loss).collect();
        let accs: Vec<f64> = rs.iter().filter_map(|r| r.test_acc).collect();
        let failed = rs.iter().filter(|r| r.status != "ok").count();
        let acc = if accs.is_empty() { String::new() } else { format!("{:.6}", mean(&accs)) };
        s += &format!("{arch},{n},{strategy},{},{failed},{:.6},{acc}\n", rs.len(), mean(&losses));
    }
    s
}

pub fn summarize(args: &SummarizeArgs) -> CmdResult {
    let path = &args.file;
    let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let first = text.lines().next().unwrap_or_default();
    let out = if first.starts_with("step,") {
        metrics_summary(&parse_metrics_csv(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?)
    } else if first == RESULTS_HEADER {
        results_summary(&parse_results_csv(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?)
    } else {
        return Err(Failure::config(format!("{}: not a metrics or results table", path.display())));
    };
    std::io::stdout().write_all(out.as_bytes()).map_err(Failure::runtime)
}
