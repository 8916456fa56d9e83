//! Run configuration: a flat `key = value` text format with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional
//! and falls back to the value in [`RunConfig::default`], but keys that do not
//! apply to the chosen variant (say `optim.beta1` with `optim.kind = sgd`) are
//! rejected, as are duplicates. [`RunConfig::to_text`] writes every applicable
//! key in a fixed order, and parsing that text gives back an equal config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use crate::data::{load_idx_dataset, read_csv, synth_blobs, synth_images, synth_spirals, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::net::{ArchitectureSpec, AuxHead, Preset};
use crate::routing::{RoutingPolicy, Strategy};
use crate::train::{Budget, ExecMode, LrSchedule, OptimizerKind, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Blobs { classes: usize, dims: usize, separation: f64, train: usize, test: usize, seed: u64 },
    Spirals { classes: usize, noise: f64, train: usize, test: usize, seed: u64 },
    Images { classes: usize, channels: usize, height: usize, width: usize, train: usize, test: usize, seed: u64 },
    /// The first `train` examples form the train split.
    Idx { images: PathBuf, labels: PathBuf, classes: usize, train: usize },
    Csv { path: PathBuf, classes: usize, train: usize },
}

impl DataSpec {
    /// The default desk image task.
    pub fn desk_images() -> Self {
        DataSpec::Images { classes: 10, channels: 3, height: 16, width: 16, train: 10_000, test: 2_000, seed: 0 }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DataSpec::Blobs { .. } => "blobs",
            DataSpec::Spirals { .. } => "spirals",
            DataSpec::Images { .. } => "images",
            DataSpec::Idx { .. } => "idx",
            DataSpec::Csv { .. } => "csv",
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSpec::Blobs { classes, dims, separation, train, test, seed } => {
                synth_blobs(*classes, *dims, *separation, *train, *test, *seed)
            }
            DataSpec::Spirals { classes, noise, train, test, seed } => {
                synth_spirals(*classes, *noise, *train, *test, *seed)
            }
            DataSpec::Images { classes, channels, height, width, train, test, seed } => {
                synth_images(*classes, *channels, *height, *width, *train, *test, *seed)
            }
            DataSpec::Idx { images, labels, classes, train } => load_idx_dataset(images, labels, *classes, *train, None),
            DataSpec::Csv { path, classes, train } => read_csv(path, *classes, *train),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub aux_head: AuxHead,
    pub policy: RoutingPolicy,
    pub loss_weights: Option<Vec<f64>>,
    pub hogwild_aux_heads: bool,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub data: DataSpec,
    pub normalize: bool,
    pub augment: AugmentPolicy,
    pub batch_size: usize,
    pub budget: Budget,
    pub seeds: Vec<u64>,
    pub mode: ExecMode,
    pub eval_every: u64,
    pub phase_delay_ms: u64,
    pub wall_time: bool,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::ToyConv { depth: 6, narrow: 8, wide: 16 },
            aux_head: AuxHead::Linear,
            policy: RoutingPolicy::new(Strategy::EndToEnd),
            loss_weights: None,
            hogwild_aux_heads: false,
            optimizer: OptimizerKind::adam(),
            schedule: LrSchedule::StepDecay { init: 1e-3, milestones: vec![2], factor: 10.0 },
            data: DataSpec::desk_images(),
            normalize: true,
            augment: AugmentPolicy::identity(),
            batch_size: 64,
            budget: Budget::Steps(450),
            seeds: vec![0],
            mode: ExecMode::Reference,
            eval_every: 0,
            phase_delay_ms: 0,
            wall_time: false,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn list<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExecMode {
    pub fn name(&self) -> &'static str {
        match self {
            ExecMode::Reference => "reference",
            ExecMode::Pipelined => "pipelined",
        }
    }
}

impl FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(ExecMode::Reference),
            "pipelined" => Ok(ExecMode::Pipelined),
            _ => Err(Error::Config(format!("unknown mode `{s}`, expected reference or pipelined"))),
        }
    }
}

/// Remaining `key -> (value, line)` pairs of a parsed file.
struct Fields(BTreeMap<String, (String, usize)>);

impl Fields {
    fn take_raw(&mut self, key: &str) -> Option<String> {
        self.0.remove(key).map(|(v, _)| v)
    }

    fn take<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.take_raw(key) {
            None => Ok(default),
            Some(v) => parse_value(key, &v),
        }
    }

    fn take_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        self.take_raw(key).map(|v| parse_value(key, &v)).transpose()
    }

    fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        self.take_raw(key)
            .map(|v| v.split(',').map(|x| parse_value(key, x.trim())).collect::<Result<Vec<T>>>())
            .transpose()
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::field(key, format!("cannot parse `{v}`")))
}

/// Re-labels a parse error from a nested type with the key it came from.
fn in_field<T>(key: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::field(key, m),
        other => other,
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::field(format!("line {}", no + 1), "expected `key = value`"))?;
            let k = k.trim().to_string();
            if let Some((_, first)) = map.insert(k.clone(), (v.trim().to_string(), no + 1)) {
                return Err(Error::field(k, format!("set twice (lines {first} and {})", no + 1)));
            }
        }
        Self::from_fields(Fields(map))
    }

    /// Applies `key=value` overrides on top of this config.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut map: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for line in self.to_text().lines() {
            if let Some((k, v)) = line.split_once('=') {
                map.insert(k.trim().to_string(), (v.trim().to_string(), 0));
            }
        }
        const BUDGETS: [&str; 3] = ["train.steps", "train.epochs", "train.logical_time"];
        if overrides.iter().any(|(k, _)| BUDGETS.contains(&k.as_str())) {
            map.retain(|k, _| !BUDGETS.contains(&k.as_str()));
        }
        let has = |key: &str| overrides.iter().any(|(k, _)| k == key);
        if has("lr.value") && !has("lr.schedule") {
            map.insert("lr.schedule".into(), ("constant".into(), 0));
        }
        for (k, v) in overrides {
            map.insert(k.clone(), (v.clone(), 0));
        }
        // Keys tied to an old variant would block switching variants.
        let mut fields = Fields(map);
        let cfg = Self::from_fields_lenient(&mut fields)?;
        for (k, _) in overrides {
            if !cfg.to_text().lines().any(|l| l.split_once('=').is_some_and(|(kk, _)| kk.trim() == k)) {
                return Err(Error::field(k.clone(), "unknown key or not used by the selected variant"));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_fields(mut f: Fields) -> Result<Self> {
        let cfg = Self::from_fields_lenient(&mut f)?;
        if let Some((k, (_, line))) = f.0.into_iter().next() {
            return Err(Error::field(k, format!("unknown key or not used by the selected variant (line {line})")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_fields_lenient(f: &mut Fields) -> Result<Self> {
        let d = RunConfig::default();
        let preset = match f.take_raw("model.arch") {
            Some(v) => in_field("model.arch", v.parse())?,
            None => d.preset,
        };
        let aux_head = match f.take_raw("model.aux_head") {
            Some(v) => in_field("model.aux_head", v.parse())?,
            None => d.aux_head,
        };
        let strategy = match f.take_raw("routing.strategy") {
            Some(v) => in_field("routing.strategy", v.parse())?,
            None => d.policy.strategy,
        };
        let mix_local = f.take("routing.mix_local", false)?;
        let loss_weights = f.take_list("routing.loss_weights")?;
        let hogwild_aux_heads = f.take("routing.hogwild_aux_heads", false)?;

        let optimizer = match f.take_raw("optim.kind").as_deref() {
            Some("sgd") => OptimizerKind::sgd(f.take("optim.momentum", 0.9)?, f.take("optim.weight_decay", 2e-4)?),
            None | Some("adam") => OptimizerKind::Adam {
                beta1: f.take("optim.beta1", 0.9)?,
                beta2: f.take("optim.beta2", 0.999)?,
                eps: f.take("optim.eps", 1e-8)?,
            },
            Some(o) => return Err(Error::field("optim.kind", format!("unknown optimizer `{o}`, expected sgd or adam"))),
        };
        // A bare `lr.value` selects a constant rate.
        let kind = f.take_raw("lr.schedule").or_else(|| f.0.contains_key("lr.value").then(|| "constant".into()));
        let schedule = match kind.as_deref() {
            Some("constant") => LrSchedule::Constant(f.take("lr.value", 1e-3)?),
            None | Some("step_decay") => LrSchedule::StepDecay {
                init: f.take("lr.init", 1e-3)?,
                milestones: f.take_list("lr.milestones")?.unwrap_or_else(|| vec![2]),
                factor: f.take("lr.factor", 10.0)?,
            },
            Some("inv_sqrt_warmup") => {
                LrSchedule::InvSqrtWarmup { dim: f.take("lr.dim", 1024)?, warmup: f.take("lr.warmup", 4000)? }
            }
            Some(o) => {
                return Err(Error::field(
                    "lr.schedule",
                    format!("unknown schedule `{o}`, expected constant, step_decay or inv_sqrt_warmup"),
                ))
            }
        };

        let data = match f.take_raw("data.kind").as_deref() {
            None | Some("images") => DataSpec::Images {
                classes: f.take("data.classes", 10)?,
                channels: f.take("data.channels", 3)?,
                height: f.take("data.height", 16)?,
                width: f.take("data.width", 16)?,
                train: f.take("data.train", 10_000)?,
                test: f.take("data.test", 2_000)?,
                seed: f.take("data.seed", 0)?,
            },
            Some("blobs") => DataSpec::Blobs {
                classes: f.take("data.classes", 4)?,
                dims: f.take("data.dims", 8)?,
                separation: f.take("data.separation", 6.0)?,
                train: f.take("data.train", 1000)?,
                test: f.take("data.test", 200)?,
                seed: f.take("data.seed", 0)?,
            },
            Some("spirals") => DataSpec::Spirals {
                classes: f.take("data.classes", 3)?,
                noise: f.take("data.noise", 0.05)?,
                train: f.take("data.train", 1000)?,
                test: f.take("data.test", 200)?,
                seed: f.take("data.seed", 0)?,
            },
            Some("idx") => DataSpec::Idx {
                images: f.take_opt("data.images")?.ok_or_else(|| Error::field("data.images", "required for idx data"))?,
                labels: f.take_opt("data.labels")?.ok_or_else(|| Error::field("data.labels", "required for idx data"))?,
                classes: f.take("data.classes", 10)?,
                train: f.take_opt("data.train")?.ok_or_else(|| Error::field("data.train", "required for idx data"))?,
            },
            Some("csv") => DataSpec::Csv {
                path: f.take_opt("data.path")?.ok_or_else(|| Error::field("data.path", "required for csv data"))?,
                classes: f.take_opt("data.classes")?.ok_or_else(|| Error::field("data.classes", "required for csv data"))?,
                train: f.take_opt("data.train")?.ok_or_else(|| Error::field("data.train", "required for csv data"))?,
            },
            Some(o) => {
                return Err(Error::field("data.kind", format!("unknown data kind `{o}`, expected images, blobs, spirals, idx or csv")))
            }
        };
        let normalize = f.take("data.normalize", d.normalize)?;
        let augment = AugmentPolicy { flip: f.take("data.augment.flip", false)?, crop_padding: f.take("data.augment.crop_padding", 0)? };

        let budgets: Vec<Budget> = [
            f.take_opt("train.steps")?.map(Budget::Steps),
            f.take_opt("train.epochs")?.map(Budget::Epochs),
            f.take_opt("train.logical_time")?.map(Budget::LogicalTime),
        ]
        .into_iter()
        .flatten()
        .collect();
        let budget = match budgets.as_slice() {
            [] => d.budget,
            [b] => *b,
            _ => {
                return Err(Error::field("train.steps", "set exactly one of train.steps, train.epochs, train.logical_time"))
            }
        };
        let mode = match f.take_raw("train.mode") {
            Some(v) => in_field("train.mode", v.parse())?,
            None => d.mode,
        };
        Ok(RunConfig {
            preset,
            aux_head,
            policy: RoutingPolicy { strategy, mix_local },
            loss_weights,
            hogwild_aux_heads,
            optimizer,
            schedule,
            data,
            normalize,
            augment,
            batch_size: f.take("train.batch_size", d.batch_size)?,
            budget,
            seeds: f.take_list("train.seeds")?.unwrap_or(d.seeds),
            mode,
            eval_every: f.take("train.eval_every", 0)?,
            phase_delay_ms: f.take("train.phase_delay_ms", 0)?,
            wall_time: f.take("log.wall_time", false)?,
            output_dir: f.take("output.dir", d.output_dir)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::field("train.seeds", "need at least one seed"));
        }
        if self.batch_size == 0 {
            return Err(Error::field("train.batch_size", "must be >= 1"));
        }
        in_field("routing.strategy", self.policy.strategy.validate())?;
        in_field("lr.schedule", self.schedule.validate())?;
        if let Some(w) = &self.loss_weights {
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Error::field("routing.loss_weights", "weights must be finite and >= 0"));
            }
        }
        if self.budget == Budget::Steps(0) || self.budget == Budget::Epochs(0) {
            return Err(Error::field("train.steps", "budget must be positive"));
        }
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("model.arch", self.preset.to_string());
        kv("model.aux_head", self.aux_head.to_string());
        kv("routing.strategy", self.policy.strategy.to_string());
        kv("routing.mix_local", self.policy.mix_local.to_string());
        if let Some(w) = &self.loss_weights {
            kv("routing.loss_weights", list(w));
        }
        kv("routing.hogwild_aux_heads", self.hogwild_aux_heads.to_string());
        match self.optimizer {
            OptimizerKind::Sgd { momentum, weight_decay } => {
                kv("optim.kind", "sgd".into());
                kv("optim.momentum", momentum.to_string());
                kv("optim.weight_decay", weight_decay.to_string());
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                kv("optim.kind", "adam".into());
                kv("optim.beta1", beta1.to_string());
                kv("optim.beta2", beta2.to_string());
                kv("optim.eps", eps.to_string());
            }
        }
        match &self.schedule {
            LrSchedule::Constant(lr) => {
                kv("lr.schedule", "constant".into());
                kv("lr.value", lr.to_string());
            }
            LrSchedule::StepDecay { init, milestones, factor } => {
                kv("lr.schedule", "step_decay".into());
                kv("lr.init", init.to_string());
                kv("lr.milestones", list(milestones));
                kv("lr.factor", factor.to_string());
            }
            LrSchedule::InvSqrtWarmup { dim, warmup } => {
                kv("lr.schedule", "inv_sqrt_warmup".into());
                kv("lr.dim", dim.to_string());
                kv("lr.warmup", warmup.to_string());
            }
        }
        kv("data.kind", self.data.kind().into());
        match &self.data {
            DataSpec::Blobs { classes, dims, separation, train, test, seed } => {
                kv("data.classes", classes.to_string());
                kv("data.dims", dims.to_string());
                kv("data.separation", separation.to_string());
                kv("data.train", train.to_string());
                kv("data.test", test.to_string());
                kv("data.seed", seed.to_string());
            }
            DataSpec::Spirals { classes, noise, train, test, seed } => {
                kv("data.classes", classes.to_string());
                kv("data.noise", noise.to_string());
                kv("data.train", train.to_string());
                kv("data.test", test.to_string());
                kv("data.seed", seed.to_string());
            }
            DataSpec::Images { classes, channels, height, width, train, test, seed } => {
                kv("data.classes", classes.to_string());
                kv("data.channels", channels.to_string());
                kv("data.height", height.to_string());
                kv("data.width", width.to_string());
                kv("data.train", train.to_string());
                kv("data.test", test.to_string());
                kv("data.seed", seed.to_string());
            }
            DataSpec::Idx { images, labels, classes, train } => {
                kv("data.images", images.display().to_string());
                kv("data.labels", labels.display().to_string());
                kv("data.classes", classes.to_string());
                kv("data.train", train.to_string());
            }
            DataSpec::Csv { path, classes, train } => {
                kv("data.path", path.display().to_string());
                kv("data.classes", classes.to_string());
                kv("data.train", train.to_string());
            }
        }
        kv("data.normalize", self.normalize.to_string());
        kv("data.augment.flip", self.augment.flip.to_string());
        kv("data.augment.crop_padding", self.augment.crop_padding.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        match self.budget {
            Budget::Steps(v) => kv("train.steps", v.to_string()),
            Budget::Epochs(v) => kv("train.epochs", v.to_string()),
            Budget::LogicalTime(v) => kv("train.logical_time", v.to_string()),
        }
        kv("train.seeds", list(&self.seeds));
        kv("train.mode", self.mode.name().into());
        kv("train.eval_every", self.eval_every.to_string());
        kv("train.phase_delay_ms", self.phase_delay_ms.to_string());
        kv("log.wall_time", self.wall_time.to_string());
        kv("output.dir", self.output_dir.display().to_string());
        s
    }

    /// Loads the dataset, normalized with train-split statistics if configured.
    pub fn load_data(&self) -> Result<Dataset> {
        let mut ds = self.data.load()?;
        if self.normalize {
            ds.normalize();
        }
        Ok(ds)
    }

    /// Architecture for a dataset with this sample shape and class count.
    pub fn architecture(&self, data: &Dataset) -> Result<ArchitectureSpec> {
        let spec = ArchitectureSpec {
            preset: self.preset.clone(),
            aux_head: self.aux_head.clone(),
            input_shape: data.sample_shape().to_vec(),
            num_classes: data.num_classes,
        };
        in_field("model.arch", spec.validate())?;
        Ok(spec)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            policy: self.policy,
            loss_weights: self.loss_weights.clone(),
            optimizer: self.optimizer,
            schedule: self.schedule.clone(),
            batch_size: self.batch_size,
            budget: self.budget,
            seed,
            mode: self.mode,
            augment: self.augment,
            eval_every: self.eval_every,
            eval_test: true,
            hogwild_aux_heads: self.hogwild_aux_heads,
            phase_delay: (self.phase_delay_ms > 0).then(|| Duration::from_millis(self.phase_delay_ms)),
            log_wall_time: self.wall_time,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = c.to_text();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse("").unwrap(), c);
    }

    #[test]
    fn every_variant_round_trips() {
        let mut configs = Vec::new();
        let mut c = RunConfig::default();
        c.preset = Preset::Mlp { widths: vec![16, 16, 16] };
        c.policy = RoutingPolicy::mixed(Strategy::NWise(2));
        c.loss_weights = Some(vec![0.5, 1.0, 2.25]);
        c.optimizer = OptimizerKind::Adam { beta1: 0.9, beta2: 0.98, eps: 1e-9 };
        c.schedule = LrSchedule::InvSqrtWarmup { dim: 1024, warmup: 4000 };
        c.data = DataSpec::Blobs { classes: 4, dims: 8, separation: 10.0, train: 100, test: 20, seed: 3 };
        c.budget = Budget::LogicalTime(500);
        c.seeds = vec![1, 2, 3, 4];
        c.mode = ExecMode::Pipelined;
        configs.push(c.clone());
        c.schedule = LrSchedule::StepDecay { init: 0.1, milestones: vec![91, 136, 182], factor: 10.0 };
        c.data = DataSpec::Spirals { classes: 3, noise: 0.1, train: 50, test: 0, seed: 0 };
        c.budget = Budget::Epochs(3);
        c.policy = RoutingPolicy::new(Strategy::GroupedLocal(2));
        c.augment = AugmentPolicy { flip: true, crop_padding: 4 };
        configs.push(c.clone());
        c.data = DataSpec::Idx { images: "a/img.idx".into(), labels: "a/lab.idx".into(), classes: 10, train: 50 };
        c.policy = RoutingPolicy::new(Strategy::Hogwild);
        c.hogwild_aux_heads = true;
        configs.push(c.clone());
        c.data = DataSpec::Csv { path: "t.csv".into(), classes: 2, train: 5 };
        c.wall_time = true;
        c.eval_every = 10;
        configs.push(c);
        for c in configs {
            let text = c.to_text();
            let back = RunConfig::parse(&text).unwrap();
            assert_eq!(back, c, "{text}");
            assert_eq!(back.to_text(), text);
        }
    }

    fn field_of(text: &str) -> String {
        match RunConfig::parse(text).unwrap_err() {
            Error::Field { field, .. } => field,
            other => panic!("expected a field error, got {other}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of("routing.strategy = sideways"), "routing.strategy");
        assert_eq!(field_of("train.steps = many"), "train.steps");
        assert_eq!(field_of("optim.kind = sgd\noptim.beta1 = 0.9"), "optim.beta1");
        assert_eq!(field_of("train.steps = 5\ntrain.epochs = 2"), "train.steps");
        assert_eq!(field_of("train.seeds = 1\ntrain.seeds = 2"), "train.seeds");
        assert_eq!(field_of("no equals sign"), "line 1");
        assert_eq!(field_of("data.kind = csv"), "data.path");
        assert_eq!(field_of("model.arch = toy-conv(x)"), "model.arch");
        assert_eq!(field_of("routing.strategy = n_wise(0)"), "routing.strategy");
        assert!(RunConfig::parse("bogus.key = 1").unwrap_err().is_config());
    }

    #[test]
    fn comments_and_spacing_are_ignored() {
        let c = RunConfig::parse("# a comment\n\n  routing.strategy=2-wise  \ntrain.steps= 10\n").unwrap();
        assert_eq!(c.policy.strategy, Strategy::NWise(2));
        assert_eq!(c.budget, Budget::Steps(10));
    }

    #[test]
    fn overrides_can_switch_variants() {
        let c = RunConfig::default();
        let o = |k: &str, v: &str| (k.to_string(), v.to_string());
        let c2 = c.with_overrides(&[o("optim.kind", "sgd"), o("train.seeds", "5,6")]).unwrap();
        assert!(matches!(c2.optimizer, OptimizerKind::Sgd { .. }));
        assert_eq!(c2.seeds, vec![5, 6]);
        let err = c2.with_overrides(&[o("optim.beta1", "0.5")]).unwrap_err();
        assert!(matches!(err, Error::Field { ref field, .. } if field == "optim.beta1"), "{err}");
        let c4 = c.with_overrides(&[o("lr.value", "0.01")]).unwrap();
        assert_eq!(c4.schedule, LrSchedule::Constant(0.01));
        let c3 = c.with_overrides(&[o("train.epochs", "2")]).unwrap();
        assert_eq!(c3.budget, Budget::Epochs(2));
    }
}
