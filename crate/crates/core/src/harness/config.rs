//! Flat `key = value` experiment configs and the built-in presets.
//!
//! ```text
//! # permuted stream, two methods
//! preset = table1          # optional; expanded first, later keys override
//! dataset = permuted
//! tasks = 5
//! seeds = 0,1,2
//! methods = sgd, sgd_dropout
//! sgd_dropout.keep_prob = 0.6
//! ```
//!
//! Keys of the form `<run name>.<field>` adjust one method entry. A run
//! name that is not a method name needs `<name>.method = <method>`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::methods::{Method, MethodConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Table1,
    Table2,
    Fig1,
    Fig2,
    Fig3,
    Fig45,
    Fig6,
    SweepDropout,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::Table1,
        Preset::Table2,
        Preset::Fig1,
        Preset::Fig2,
        Preset::Fig3,
        Preset::Fig45,
        Preset::Fig6,
        Preset::SweepDropout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Table1 => "table1",
            Preset::Table2 => "table2",
            Preset::Fig1 => "fig1",
            Preset::Fig2 => "fig2",
            Preset::Fig3 => "fig3",
            Preset::Fig45 => "fig45",
            Preset::Fig6 => "fig6",
            Preset::SweepDropout => "sweep-dropout",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(vec![format!("unknown preset `{s}`")]))
    }
}

/// Which activation profiles a run records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileMode {
    /// Every seen task after every task.
    All,
    /// Every task after the last task only.
    Final,
    None,
}

impl ProfileMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProfileMode::All => "all",
            ProfileMode::Final => "final",
            ProfileMode::None => "none",
        }
    }
}

impl FromStr for ProfileMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(ProfileMode::All),
            "final" => Ok(ProfileMode::Final),
            "none" => Ok(ProfileMode::None),
            _ => Err(format!("profiles must be all, final or none, got `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Directory name under `out_dir`.
    pub experiment: String,
    pub preset: Option<Preset>,
    pub dataset: TaskKind,
    pub tasks: usize,
    pub methods: Vec<MethodConfig>,
    pub seeds: Vec<u64>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub hidden_width: usize,
    pub profiles: ProfileMode,
}

const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn named(name: &str, method: Method) -> MethodConfig {
    let mut c = MethodConfig::defaults(method);
    c.name = name.to_string();
    c
}

impl ExperimentConfig {
    /// Permuted stream, 5 tasks, 2×100, seeds 0..5, no methods.
    pub fn base(experiment: &str) -> Self {
        ExperimentConfig {
            experiment: experiment.to_string(),
            preset: None,
            dataset: TaskKind::Permuted,
            tasks: 5,
            methods: Vec::new(),
            seeds: DEFAULT_SEEDS.to_vec(),
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs"),
            hidden_width: 100,
            profiles: ProfileMode::All,
        }
    }

    pub fn preset(preset: Preset) -> Self {
        let mut c = ExperimentConfig::base(preset.as_str());
        c.preset = Some(preset);
        // The three-point stability ladder of the forgetting-curve figures:
        // no dropout and no decay, dropout 0.25 with decay, dropout 0.5 with
        // decay.
        let ladder = || {
            let plastic = named("plastic", Method::Sgd);
            let mut moderate = named("moderate", Method::SgdDropout);
            moderate.keep_prob = 0.75;
            let stable = named("stable", Method::SgdDropout);
            vec![plastic, moderate, stable]
        };
        match preset {
            Preset::Table1 | Preset::Table2 => {
                c.methods = Method::ALL.iter().map(|&m| MethodConfig::defaults(m)).collect();
                if preset == Preset::Table2 {
                    c.dataset = TaskKind::Rotated;
                }
            }
            Preset::Fig1 => {
                c.dataset = TaskKind::Rotated;
                c.methods = vec![MethodConfig::defaults(Method::Sgd), MethodConfig::defaults(Method::SgdDropout)];
            }
            Preset::Fig2 => c.methods = ladder(),
            Preset::Fig3 => {
                c.dataset = TaskKind::Rotated;
                c.methods = ladder();
            }
            Preset::Fig45 => {
                c.methods = vec![MethodConfig::defaults(Method::Sgd), MethodConfig::defaults(Method::SgdDropout)];
            }
            Preset::Fig6 => {
                c.tasks = 20;
                c.hidden_width = 256;
                c.profiles = ProfileMode::Final;
                let mut stable = named("stable", Method::SgdDropout);
                let mut plastic = named("plastic", Method::Sgd);
                stable.eval_every_epoch = false;
                plastic.eval_every_epoch = false;
                c.methods = vec![stable, plastic];
            }
            Preset::SweepDropout => {
                c.methods = [20u32, 30, 40, 50, 60]
                    .iter()
                    .map(|&pct| {
                        let mut m = named(&format!("dropout_{pct}"), Method::SgdDropout);
                        m.keep_prob = f64::from(100 - pct) / 100.0;
                        m
                    })
                    .collect();
            }
        }
        c.apply_hidden_width();
        c
    }

    fn apply_hidden_width(&mut self) {
        for m in &mut self.methods {
            m.hidden_layers = vec![self.hidden_width, self.hidden_width];
        }
    }

    /// Every violated constraint.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.seeds.is_empty() {
            v.push("seeds must not be empty".to_string());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            v.push("seeds must be distinct".to_string());
        }
        if self.tasks == 0 {
            v.push("tasks must be >= 1".to_string());
        }
        if self.hidden_width == 0 {
            v.push("hidden_width must be >= 1".to_string());
        }
        if self.methods.is_empty() {
            v.push("methods must not be empty".to_string());
        }
        if self.experiment.is_empty()
            || !self.experiment.chars().all(|c| c.is_ascii_alphanumeric() || "_-.".contains(c))
        {
            v.push(format!("experiment `{}` must use only [A-Za-z0-9_.-]", self.experiment));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].iter().any(|o| o.name == m.name) {
                v.push(format!("method name `{}` appears twice", m.name));
            }
            v.extend(m.violations());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Parse the flat format. Relative paths stay relative to the working
    /// directory.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut errors = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => entries.push((n + 1, k.trim().to_string(), v.trim().to_string())),
                None => errors.push(format!("line {}: expected `key = value`, got `{line}`", n + 1)),
            }
        }

        // Pass 1: the preset, then experiment-level keys, so method keys see
        // the final method list and width.
        let mut config = ExperimentConfig::base("custom");
        if let Some((n, _, v)) = entries.iter().find(|(_, k, _)| k == "preset") {
            match v.parse::<Preset>() {
                Ok(p) => config = ExperimentConfig::preset(p),
                Err(_) => errors.push(format!("line {n}: unknown preset `{v}`")),
            }
        }
        let mut width_set = false;
        for (n, key, value) in &entries {
            let bad = |what: &str| format!("line {n}: {key}: {what}");
            match key.as_str() {
                "preset" => {}
                "experiment" => config.experiment = value.clone(),
                "dataset" => match value.parse() {
                    Ok(k) => config.dataset = k,
                    Err(_) => errors.push(bad("expected permuted or rotated")),
                },
                "tasks" => match value.parse() {
                    Ok(t) => config.tasks = t,
                    Err(_) => errors.push(bad("expected a nonnegative integer")),
                },
                "seeds" => match parse_list::<u64>(value) {
                    Ok(s) => config.seeds = s,
                    Err(_) => errors.push(bad("expected a comma-separated list of integers")),
                },
                "data_dir" => config.data_dir = PathBuf::from(value),
                "out_dir" => config.out_dir = PathBuf::from(value),
                "hidden_width" => match value.parse() {
                    Ok(w) => {
                        config.hidden_width = w;
                        width_set = true;
                    }
                    Err(_) => errors.push(bad("expected a positive integer")),
                },
                "profiles" => match value.parse() {
                    Ok(p) => config.profiles = p,
                    Err(e) => errors.push(bad(&e)),
                },
                "methods" => {
                    let names: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                    config.methods = names
                        .iter()
                        .map(|name| {
                            config
                                .methods
                                .iter()
                                .find(|m| m.name == *name)
                                .cloned()
                                .unwrap_or_else(|| {
                                    let method = name.parse().unwrap_or(Method::Sgd);
                                    named(name, method)
                                })
                        })
                        .collect();
                }
                _ if key.contains('.') => {}
                _ => errors.push(format!("line {n}: unknown key `{key}`")),
            }
        }
        if width_set || config.preset.is_none() {
            config.apply_hidden_width();
        }

        // Pass 2: method-scoped keys.
        let mut explicit_method = Vec::new();
        for (n, key, value) in &entries {
            let Some((name, field)) = key.split_once('.') else {
                continue;
            };
            let Some(m) = config.methods.iter_mut().find(|m| m.name == name) else {
                errors.push(format!("line {n}: `{name}` is not listed in methods"));
                continue;
            };
            if field == "method" {
                explicit_method.push(name.to_string());
            }
            if let Err(e) = set_method_field(m, field, value) {
                errors.push(format!("line {n}: {key}: {e}"));
            }
        }
        for m in &config.methods {
            if m.name.parse::<Method>().is_err() && !explicit_method.contains(&m.name) && config.preset.is_none() {
                errors.push(format!("`{}` is not a method name; set `{}.method`", m.name, m.name));
            }
        }

        errors.extend(config.violations());
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text)?;
        if !text.lines().any(|l| l.split('#').next().unwrap_or("").trim_start().starts_with("experiment"))
            && config.preset.is_none()
        {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                config.experiment = stem.to_string();
                config.validate()?;
            }
        }
        Ok(config)
    }

    /// Fully resolved config in the same flat format; [`ExperimentConfig::parse`]
    /// reads it back to an equal value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("experiment = {}\n", self.experiment));
        out.push_str(&format!("dataset = {}\n", self.dataset.as_str()));
        out.push_str(&format!("tasks = {}\n", self.tasks));
        out.push_str(&format!("seeds = {}\n", join(&self.seeds)));
        out.push_str(&format!("data_dir = {}\n", self.data_dir.display()));
        out.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        out.push_str(&format!("hidden_width = {}\n", self.hidden_width));
        out.push_str(&format!("profiles = {}\n", self.profiles.as_str()));
        out.push_str(&format!(
            "methods = {}\n",
            self.methods.iter().map(|m| m.name.as_str()).collect::<Vec<_>>().join(",")
        ));
        for m in &self.methods {
            out.push_str(&method_text(m));
        }
        out
    }
}

/// One method's fields as `<name>.<field> = value` lines.
pub fn method_text(m: &MethodConfig) -> String {
    let n = &m.name;
    format!(
        "{n}.method = {}\n{n}.keep_prob = {}\n{n}.lr = {}\n{n}.momentum = {}\n{n}.lr_decay = {}\n\
         {n}.epochs_per_task = {}\n{n}.batch_size = {}\n{n}.memory_per_task = {}\n{n}.ewc_lambda = {}\n\
         {n}.ewc_fisher_samples = {}\n{n}.hidden_layers = {}\n{n}.eval_every_epoch = {}\n",
        m.method,
        m.keep_prob,
        m.lr,
        m.momentum,
        m.lr_decay,
        m.epochs_per_task,
        m.batch_size,
        m.memory_per_task,
        m.ewc_lambda,
        m.ewc_fisher_samples,
        join(&m.hidden_layers),
        m.eval_every_epoch
    )
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list<T: FromStr>(s: &str) -> std::result::Result<Vec<T>, ()> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse().map_err(|_| ()))
        .collect()
}

fn set_method_field(m: &mut MethodConfig, field: &str, value: &str) -> std::result::Result<(), String> {
    fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
        v.parse().map_err(|_| format!("cannot parse `{v}`"))
    }
    match field {
        "method" => m.method = value.parse().map_err(|_| format!("unknown method `{value}`"))?,
        "keep_prob" => m.keep_prob = num(value)?,
        "lr" => m.lr = num(value)?,
        "momentum" => m.momentum = num(value)?,
        "lr_decay" => m.lr_decay = num(value)?,
        "epochs_per_task" => m.epochs_per_task = num(value)?,
        "batch_size" => m.batch_size = num(value)?,
        "memory_per_task" => m.memory_per_task = num(value)?,
        "ewc_lambda" => m.ewc_lambda = num(value)?,
        "ewc_fisher_samples" => m.ewc_fisher_samples = num(value)?,
        "hidden_layers" => {
            m.hidden_layers = parse_list(value).map_err(|_| format!("cannot parse `{value}` as widths"))?
        }
        "eval_every_epoch" => m.eval_every_epoch = num(value)?,
        _ => return Err(format!("unknown field `{field}`")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_expands_to_the_protocol() {
        let c = ExperimentConfig::preset(Preset::Table1);
        assert_eq!((c.tasks, c.hidden_width, c.seeds.len()), (5, 100, 5));
        assert_eq!(c.dataset, TaskKind::Permuted);
        let names: Vec<_> = c.methods.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, ["sgd", "sgd_dropout", "ewc", "agem", "ogd", "mtl"]);
        for m in &c.methods {
            assert_eq!(m.hidden_layers, vec![100, 100]);
            assert_eq!((m.epochs_per_task, m.batch_size, m.lr, m.momentum), (5, 64, 0.01, 0.8));
        }
        assert!(c.validate().is_ok());
    }

    #[test]
    fn fig6_is_the_scaled_run() {
        let c = ExperimentConfig::preset(Preset::Fig6);
        assert_eq!((c.tasks, c.hidden_width), (20, 256));
        let stable = &c.methods[0];
        assert_eq!((stable.name.as_str(), stable.keep_prob, stable.lr_decay), ("stable", 0.5, 0.8));
        let plastic = &c.methods[1];
        assert_eq!((plastic.name.as_str(), plastic.keep_prob, plastic.lr_decay), ("plastic", 1.0, 1.0));
        assert!(c.methods.iter().all(|m| m.hidden_layers == vec![256, 256]));
    }

    #[test]
    fn every_preset_validates_and_round_trips() {
        for p in Preset::ALL {
            let c = ExperimentConfig::preset(p);
            assert!(c.validate().is_ok(), "{p}");
            assert_eq!(p.as_str().parse::<Preset>().unwrap(), p);
            let mut back = ExperimentConfig::parse(&c.to_text()).unwrap();
            back.preset = c.preset;
            assert_eq!(back, c, "{p}");
        }
    }

    #[test]
    fn preset_with_overrides() {
        let c = ExperimentConfig::parse(
            "preset = table1\nseeds = 7, 8\nmethods = sgd, sgd_dropout\nsgd_dropout.keep_prob = 0.6 # tweak\n",
        )
        .unwrap();
        assert_eq!(c.seeds, vec![7, 8]);
        assert_eq!(c.methods.len(), 2);
        assert_eq!(c.methods[1].keep_prob, 0.6);
        assert_eq!(c.experiment, "table1");
    }

    #[test]
    fn custom_names_need_a_method() {
        let err = ExperimentConfig::parse("methods = fast\n").unwrap_err();
        assert!(err.to_string().contains("fast.method"), "{err}");
        let c = ExperimentConfig::parse("methods = fast\nfast.method = sgd_dropout\nfast.epochs_per_task = 1\n").unwrap();
        assert_eq!(c.methods[0].method, Method::SgdDropout);
        assert_eq!(c.methods[0].epochs_per_task, 1);
    }

    #[test]
    fn all_errors_are_reported_together() {
        let text = "seeds =\nbogus = 1\nmethods = sgd\nsgd.lr = -1\nsgd.colour = red\ntasks = x\nnonsense line\n";
        match ExperimentConfig::parse(text) {
            Err(Error::Config(v)) => {
                let all = v.join("\n");
                for needle in ["seeds must not be empty", "unknown key `bogus`", "lr must be positive", "unknown field `colour`", "tasks", "nonsense line"] {
                    assert!(all.contains(needle), "missing `{needle}` in\n{all}");
                }
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let mut c = ExperimentConfig::preset(Preset::Table1);
        c.seeds.clear();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
