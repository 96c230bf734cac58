//! Line-oriented experiment configuration.
//!
//! One `key = value` pair per line, `#` starts a comment, lists are
//! comma-separated. Absent keys take their defaults; unknown keys are
//! rejected with the offending line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::datagen::IncrementMode;
use crate::error::{Error, Result};
use crate::orchestrator::{BenchmarkSpec, GeneratorKind, MethodId, RunConfig};
use crate::ssr::{ScoreKind, ScoringPoint};

/// Environment variable holding a comma-separated seed list that replaces
/// the configured seeds.
pub const SEED_OVERRIDE_ENV: &str = "OSIFL_SEED_OVERRIDE";

pub const DEFAULT_SEEDS: [u64; 3] = [42, 18, 50];

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "dim_x",
    "num_classes",
    "num_domains",
    "within_std",
    "dim_e",
    "mode",
    "tasks",
    "classes_per_task",
    "class_sizes",
    "clients_per_task",
    "n_per_class",
    "test_per_class",
    "z_per_class",
    "methods",
    "seeds",
    "p",
    "scoring_point",
    "score_kind",
    "learning_rate",
    "batch_size",
    "epochs",
    "weight_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "lambda_ewc",
    "mu_prox",
    "reset_moments",
    "rounds",
    "local_epochs",
    "reported_param_count",
    "generator",
    "diffusion_steps",
    "beta_min",
    "beta_max",
    "guidance",
    "p_drop",
    "denoiser_hidden",
    "time_dim",
    "diffusion_train_steps",
    "diffusion_batch_size",
    "diffusion_learning_rate",
    "pool_per_pair",
    "out_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub bench: BenchmarkSpec,
    pub run: RunConfig,
    pub methods: Vec<MethodId>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            bench: BenchmarkSpec::default(),
            run: RunConfig::default(),
            methods: MethodId::ALL.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            out_dir: PathBuf::from("out"),
        }
    }
}

fn scalar<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("cannot parse `{v}`"))
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| scalar(s.trim())).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn positive(v: usize) -> std::result::Result<usize, String> {
    if v == 0 {
        Err("must be positive".into())
    } else {
        Ok(v)
    }
}

fn positive_f(v: f64) -> std::result::Result<f64, String> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn non_negative_f(v: f64) -> std::result::Result<f64, String> {
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be non-negative, got {v}"))
    }
}

fn unit_open(v: f64) -> std::result::Result<f64, String> {
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must lie in [0, 1), got {v}"))
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn parse_enum<T: FromStr<Err = Error>>(v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|e| match e {
        Error::Config(m) => m,
        other => other.to_string(),
    })
}

impl ExperimentConfig {
    /// Assigns one key; the error message is attached to a line by the caller.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let b = &mut self.bench;
        let r = &mut self.run;
        let g = &mut b.generator;
        match key {
            "dim_x" => b.dim_x = positive(scalar(value)?)?,
            "num_classes" => b.num_classes = positive(scalar(value)?)?,
            "num_domains" => b.num_domains = positive(scalar(value)?)?,
            "within_std" => b.within_std = positive_f(scalar(value)?)?,
            "dim_e" => b.dim_e = positive(scalar(value)?)?,
            "mode" => b.mode = parse_enum::<IncrementMode>(value)?,
            "tasks" => b.tasks = positive(scalar(value)?)?,
            "classes_per_task" => b.classes_per_task = positive(scalar(value)?)?,
            "class_sizes" => {
                let sizes: Vec<usize> = list(value)?;
                if sizes.contains(&0) {
                    return Err("task sizes must be positive".into());
                }
                b.class_sizes = (!sizes.is_empty()).then_some(sizes);
            }
            "clients_per_task" => b.clients_per_task = positive(scalar(value)?)?,
            "n_per_class" => b.n_per_class = positive(scalar(value)?)?,
            "test_per_class" => b.test_per_class = positive(scalar(value)?)?,
            "z_per_class" => r.z_per_class = positive(scalar(value)?)?,
            "methods" => {
                let methods: Vec<MethodId> = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|s| parse_enum(s.trim()))
                        .collect::<std::result::Result<_, _>>()?
                };
                let mut seen = methods.clone();
                seen.sort();
                seen.dedup();
                if seen.len() != methods.len() {
                    return Err("duplicate method".into());
                }
                self.methods = methods;
            }
            "seeds" => {
                let seeds: Vec<u64> = list(value)?;
                if seeds.is_empty() {
                    return Err("at least one seed is required".into());
                }
                self.seeds = seeds;
            }
            "p" => r.p = scalar(value)?,
            "scoring_point" => r.scoring_point = parse_enum::<ScoringPoint>(value)?,
            "score_kind" => r.score_kind = parse_enum::<ScoreKind>(value)?,
            "learning_rate" => r.train.learning_rate = positive_f(scalar(value)?)?,
            "batch_size" => r.train.batch_size = positive(scalar(value)?)?,
            "epochs" => r.train.epochs_per_task = positive(scalar(value)?)?,
            "weight_decay" => r.train.weight_decay = non_negative_f(scalar(value)?)?,
            "adam_beta1" => r.train.beta1 = unit_open(scalar(value)?)?,
            "adam_beta2" => r.train.beta2 = unit_open(scalar(value)?)?,
            "adam_eps" => r.train.eps = positive_f(scalar(value)?)?,
            "lambda_ewc" => r.train.lambda_ewc = non_negative_f(scalar(value)?)?,
            "mu_prox" => r.train.mu_prox = non_negative_f(scalar(value)?)?,
            "reset_moments" => r.train.reset_moments = parse_bool(value)?,
            "rounds" => r.rounds = positive(scalar(value)?)?,
            "local_epochs" => r.local_epochs = positive(scalar(value)?)?,
            "reported_param_count" => {
                r.reported_param_count = match value {
                    "" | "none" => None,
                    v => match scalar::<u64>(v)? {
                        0 => return Err("must be positive".into()),
                        n => Some(n),
                    },
                }
            }
            "generator" => g.kind = parse_enum::<GeneratorKind>(value)?,
            "diffusion_steps" => g.steps = positive(scalar(value)?)?,
            "beta_min" => g.beta_min = positive_f(scalar(value)?)?,
            "beta_max" => g.beta_max = positive_f(scalar(value)?)?,
            "guidance" => {
                let w: f64 = scalar(value)?;
                if !(w >= 1.0 && w.is_finite()) {
                    return Err(format!("must be >= 1, got {w}"));
                }
                g.guidance = w;
            }
            "p_drop" => {
                let v: f64 = scalar(value)?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("must lie in [0, 1], got {v}"));
                }
                g.hp.p_drop = v;
            }
            "denoiser_hidden" => g.hp.hidden = positive(scalar(value)?)?,
            "time_dim" => g.hp.time_dim = scalar(value)?,
            "diffusion_train_steps" => g.hp.train_steps = positive(scalar(value)?)?,
            "diffusion_batch_size" => g.hp.batch_size = positive(scalar(value)?)?,
            "diffusion_learning_rate" => g.hp.learning_rate = positive_f(scalar(value)?)?,
            "pool_per_pair" => g.pool_per_pair = positive(scalar(value)?)?,
            "out_dir" => {
                if value.is_empty() {
                    return Err("must not be empty".into());
                }
                self.out_dir = PathBuf::from(value);
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Current value of `key` in the syntax accepted by [`set`](Self::set).
    pub fn get(&self, key: &str) -> Option<String> {
        let b = &self.bench;
        let r = &self.run;
        let g = &b.generator;
        Some(match key {
            "dim_x" => b.dim_x.to_string(),
            "num_classes" => b.num_classes.to_string(),
            "num_domains" => b.num_domains.to_string(),
            "within_std" => b.within_std.to_string(),
            "dim_e" => b.dim_e.to_string(),
            "mode" => b.mode.as_str().to_string(),
            "tasks" => b.tasks.to_string(),
            "classes_per_task" => b.classes_per_task.to_string(),
            "class_sizes" => b.class_sizes.as_deref().map(join).unwrap_or_default(),
            "clients_per_task" => b.clients_per_task.to_string(),
            "n_per_class" => b.n_per_class.to_string(),
            "test_per_class" => b.test_per_class.to_string(),
            "z_per_class" => r.z_per_class.to_string(),
            "methods" => self.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","),
            "seeds" => join(&self.seeds),
            "p" => r.p.to_string(),
            "scoring_point" => r.scoring_point.as_str().to_string(),
            "score_kind" => r.score_kind.as_str().to_string(),
            "learning_rate" => r.train.learning_rate.to_string(),
            "batch_size" => r.train.batch_size.to_string(),
            "epochs" => r.train.epochs_per_task.to_string(),
            "weight_decay" => r.train.weight_decay.to_string(),
            "adam_beta1" => r.train.beta1.to_string(),
            "adam_beta2" => r.train.beta2.to_string(),
            "adam_eps" => r.train.eps.to_string(),
            "lambda_ewc" => r.train.lambda_ewc.to_string(),
            "mu_prox" => r.train.mu_prox.to_string(),
            "reset_moments" => r.train.reset_moments.to_string(),
            "rounds" => r.rounds.to_string(),
            "local_epochs" => r.local_epochs.to_string(),
            "reported_param_count" => r
                .reported_param_count
                .map_or_else(|| "none".to_string(), |n| n.to_string()),
            "generator" => g.kind.as_str().to_string(),
            "diffusion_steps" => g.steps.to_string(),
            "beta_min" => g.beta_min.to_string(),
            "beta_max" => g.beta_max.to_string(),
            "guidance" => g.guidance.to_string(),
            "p_drop" => g.hp.p_drop.to_string(),
            "denoiser_hidden" => g.hp.hidden.to_string(),
            "time_dim" => g.hp.time_dim.to_string(),
            "diffusion_train_steps" => g.hp.train_steps.to_string(),
            "diffusion_batch_size" => g.hp.batch_size.to_string(),
            "diffusion_learning_rate" => g.hp.learning_rate.to_string(),
            "pool_per_pair" => g.pool_per_pair.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Cross-key constraints, reported as `(key, message)`.
    fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        let b = &self.bench;
        let g = &b.generator;
        if g.beta_min > g.beta_max || g.beta_max >= 1.0 {
            return Err(("beta_max", "need beta_min <= beta_max < 1".into()));
        }
        match (&b.class_sizes, b.mode) {
            (Some(_), IncrementMode::DomainIncremental) => {
                return Err(("class_sizes", "only valid for class_incremental".into()))
            }
            (Some(sizes), _) if sizes.iter().sum::<usize>() > b.num_classes => {
                return Err(("class_sizes", format!("needs more than {} classes", b.num_classes)))
            }
            (None, IncrementMode::ClassIncremental) if b.tasks * b.classes_per_task > b.num_classes => {
                return Err((
                    "tasks",
                    format!(
                        "{} tasks of {} classes exceed {} classes",
                        b.tasks, b.classes_per_task, b.num_classes
                    ),
                ))
            }
            (None, IncrementMode::DomainIncremental) if b.tasks > b.num_domains => {
                return Err(("tasks", format!("{} tasks exceed {} domains", b.tasks, b.num_domains)))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(k, m)| Error::Config(format!("{k}: {m}")))?;
        self.run.train.validate()
    }

    /// Replaces the seed list with the value of [`SEED_OVERRIDE_ENV`] when
    /// it is set.
    pub fn apply_seed_override(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            let seeds: Vec<u64> = list(v.trim()).map_err(|m| {
                Error::Config(format!("{SEED_OVERRIDE_ENV}: {m}"))
            })?;
            if seeds.is_empty() {
                return Err(Error::Config(format!("{SEED_OVERRIDE_ENV} is empty")));
            }
            self.seeds = seeds;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("every listed key has a value"));
        }
        out
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut lines: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            key: None,
            message: "expected `key = value`".into(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let known = KEYS.iter().find(|k| **k == key).ok_or_else(|| Error::Parse {
            line,
            key: Some(key.to_string()),
            message: "unknown key".into(),
        })?;
        if let Some(prev) = lines.insert(known, line) {
            return Err(Error::Parse {
                line,
                key: Some(key.to_string()),
                message: format!("already set on line {prev}"),
            });
        }
        cfg.set(key, value).map_err(|message| Error::Parse {
            line,
            key: Some(key.to_string()),
            message,
        })?;
    }
    cfg.check().map_err(|(key, message)| Error::Parse {
        line: lines.get(key).copied().unwrap_or(0),
        key: Some(key.to_string()),
        message,
    })?;
    cfg.run.train.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.run.p, 5);
        assert_eq!(cfg.run.train.learning_rate, 0.001);
        assert_eq!(cfg.run.train.epochs_per_task, 20);
        assert_eq!(cfg.seeds, vec![42, 18, 50]);
        assert_eq!(cfg.methods.len(), 7);
        assert_eq!(cfg.bench.num_classes, 30);
        assert_eq!(cfg.bench.num_domains, 6);
        assert_eq!(cfg.bench.tasks, 6);
        assert_eq!(cfg.run.train.batch_size, 32);
        assert_eq!(cfg.run.train.lambda_ewc, 0.1);
        assert_eq!(cfg.run.rounds, 20);
        assert_eq!(cfg.run.local_epochs, 1);
    }

    #[test]
    fn negative_p_names_the_line() {
        let err = parse_config("# header\n\np = -1\n").unwrap_err();
        match err {
            Error::Parse { line, key, .. } => {
                assert_eq!(line, 3);
                assert_eq!(key.as_deref(), Some("p"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn typos_and_malformed_lines_are_rejected() {
        assert!(matches!(
            parse_config("seeds = 1\nlearnig_rate = 0.1"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(parse_config("p 5"), Err(Error::Parse { line: 1, key: None, .. })));
        assert!(matches!(parse_config("p = 2\np = 3"), Err(Error::Parse { line: 2, .. })));
        assert!(parse_config("methods = OSIFL,FEDDYN").is_err());
        assert!(parse_config("guidance = 0.5").is_err());
        assert!(parse_config("seeds =").is_err());
        assert!(parse_config("reset_moments = yes").is_err());
    }

    #[test]
    fn cross_key_constraint_points_at_key() {
        let err = parse_config("num_classes = 10\ntasks = 6\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn comments_lists_and_empty_methods() {
        let cfg = parse_config(
            "methods = osifl, oscar-il   # two\nseeds = 1,2\nclass_sizes = 4,6,5\nmethods_unused_check = 1",
        );
        assert!(cfg.is_err());
        let cfg = parse_config("methods = osifl, oscar-il # two\nseeds = 1,2\nclass_sizes = 4,6,5").unwrap();
        assert_eq!(cfg.methods, vec![MethodId::Osifl, MethodId::OscarIl]);
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.bench.class_sizes, Some(vec![4, 6, 5]));
        assert!(parse_config("methods =").unwrap().methods.is_empty());
    }

    #[test]
    fn seed_override() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_seed_override(None).unwrap();
        assert_eq!(cfg.seeds, vec![42, 18, 50]);
        cfg.apply_seed_override(Some("7, 8")).unwrap();
        assert_eq!(cfg.seeds, vec![7, 8]);
        assert!(cfg.apply_seed_override(Some("x")).is_err());
    }

    #[test]
    fn defaults_serialize_and_reparse() {
        let cfg = ExperimentConfig::default();
        assert_eq!(parse_config(&cfg.to_text()).unwrap(), cfg);
        for key in KEYS {
            assert!(cfg.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #[test]
        fn round_trip(
            lr in 1e-6f64..1.0,
            wd in 0.0f64..0.1,
            p in 0usize..50,
            clients in 1usize..8,
            w in 1.0f64..8.0,
            seeds in prop::collection::vec(any::<u64>(), 1..5),
            mask in prop::collection::vec(any::<bool>(), 7),
            post in any::<bool>(),
            surrogate in any::<bool>(),
            reported in prop::option::of(1u64..1u64 << 40),
        ) {
            let methods: Vec<&str> = MethodId::ALL
                .iter()
                .zip(&mask)
                .filter(|(_, &keep)| keep)
                .map(|(m, _)| m.as_str())
                .collect();
            let text = format!(
                "learning_rate = {lr}\nweight_decay = {wd}\np = {p}\nclients_per_task = {clients}\n\
                 guidance = {w}\nseeds = {}\nmethods = {}\nscoring_point = {}\ngenerator = {}\n\
                 reported_param_count = {}\n",
                join(&seeds),
                methods.join(","),
                if post { "post_update" } else { "pre_update" },
                if surrogate { "surrogate" } else { "ddpm" },
                reported.map_or("none".to_string(), |n| n.to_string()),
            );
            let cfg = parse_config(&text).unwrap();
            prop_assert_eq!(cfg.run.train.learning_rate, lr);
            prop_assert_eq!(cfg.run.reported_param_count, reported);
            let again = parse_config(&cfg.to_text()).unwrap();
            prop_assert_eq!(again, cfg);
        }
    }
}
