//! Experiment configuration: a sectioned TOML file parsed into a fully
//! validated [`ExperimentConfig`]. Validation collects every problem with
//! its dotted location instead of stopping at the first, and unknown keys
//! come back with a spelling suggestion when one is close enough.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::value::Table;
use toml::Value;

use crate::attack::{AttackConfig, AttackMethod, ClampMode};
use crate::data::DatasetSpec;
use crate::hashing::fnv1a64;
use crate::model::{ModelConfig, SgdConfig};
use crate::train::robust::{AttackTarget, PseudoLabelPolicy, Step2Config};
use crate::train::uda::{Step1Config, TeacherVariant};

/// One validation problem, locatable by its dotted key path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub location: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config {path} is not valid TOML: {message}")]
    Syntax { path: String, message: String },
    #[error("config {path} is invalid:\n{}", issues.iter().map(|i| format!("  - {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid {
        path: String,
        issues: Vec<ConfigIssue>,
    },
}

pub type ConfigResult<T> = Result<T, ConfigError>;

/// Which robustification recipe the pipeline runs after pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustMethod {
    Dart,
    At,
    Trades,
}

impl RobustMethod {
    pub fn name(&self) -> &'static str {
        match self {
            RobustMethod::Dart => "dart",
            RobustMethod::At => "at",
            RobustMethod::Trades => "trades",
        }
    }
}

/// Where the data comes from: a synthetic recipe or a pair of CSV files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Spec(DatasetSpec),
    Csv {
        source: PathBuf,
        target: PathBuf,
        class_count: Option<usize>,
    },
}

/// A fully validated experiment: dataset, model shape, both training steps,
/// the evaluation attack list, and run bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetSource,
    pub hidden: Vec<usize>,
    pub disc_hidden: usize,
    pub method: RobustMethod,
    pub step1: Step1Config,
    pub step2: Step2Config,
    pub eval_attacks: Vec<AttackConfig>,
}

impl ExperimentConfig {
    /// Stable hash of the whole resolved config, recorded in manifests and
    /// checkpoints so a report can be traced back to its exact settings.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("plain data serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }

    /// Materializes the model architecture once the data dimensions are
    /// known. The discriminator input mode follows the teacher variant.
    pub fn model_config(&self, input_dim: usize, class_count: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            class_count,
            hidden: self.hidden.clone(),
            disc_hidden: self.disc_hidden,
            conditional: self.step1.variant == TeacherVariant::Cdan,
            seed: 0,
        }
    }
}

/// Parses and validates a config file, reporting all problems at once.
pub fn parse_config(path: &Path) -> ConfigResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_config_str(&text, &path.display().to_string())
}

/// [`parse_config`] over in-memory text; `origin` names the source in
/// errors. The default experiment name is the file stem of `origin`.
pub fn parse_config_str(text: &str, origin: &str) -> ConfigResult<ExperimentConfig> {
    let root: Value = toml::from_str(text).map_err(|e| ConfigError::Syntax {
        path: origin.to_string(),
        message: e.message().to_string(),
    })?;
    let Value::Table(root) = root else {
        return Err(ConfigError::Syntax {
            path: origin.to_string(),
            message: "top level must be a table".into(),
        });
    };

    let mut issues = Vec::new();
    let cfg = build_config(&root, origin, &mut issues);
    match cfg {
        Some(cfg) if issues.is_empty() => Ok(cfg),
        _ => Err(ConfigError::Invalid {
            path: origin.to_string(),
            issues,
        }),
    }
}

fn build_config(
    root: &Table,
    origin: &str,
    issues: &mut Vec<ConfigIssue>,
) -> Option<ExperimentConfig> {
    reject_unknown(root, "", &["run", "dataset", "model", "step1", "step2", "eval"], issues);

    let default_name = Path::new(origin)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into());

    // [run]
    let mut name = default_name;
    let mut seeds = vec![0u64];
    let mut out_dir = None;
    if let Some(run) = section(root, "run", issues) {
        reject_unknown(run, "run", &["name", "seeds", "out_dir"], issues);
        if let Some(v) = get_str(run, "run", "name", issues) {
            if v.is_empty() {
                push(issues, "run.name", "must not be empty");
            } else {
                name = v;
            }
        }
        if let Some(v) = get_u64_array(run, "run", "seeds", issues) {
            if v.is_empty() {
                push(issues, "run.seeds", "must list at least one seed");
            } else if v.iter().collect::<BTreeSet<_>>().len() != v.len() {
                push(issues, "run.seeds", "seeds must be distinct");
            } else {
                seeds = v;
            }
        }
        if let Some(v) = get_str(run, "run", "out_dir", issues) {
            out_dir = Some(PathBuf::from(v));
        }
    }

    // [dataset] (required)
    let dataset = match root.get("dataset") {
        Some(Value::Table(t)) => parse_dataset(t, issues),
        Some(_) => {
            push(issues, "dataset", "must be a table");
            None
        }
        None => {
            push(issues, "dataset", "section is required");
            None
        }
    };

    // [model]
    let mut hidden = vec![64, 32];
    let mut disc_hidden = 32;
    if let Some(model) = section(root, "model", issues) {
        reject_unknown(model, "model", &["hidden", "disc_hidden"], issues);
        if let Some(v) = get_usize_array(model, "model", "hidden", issues) {
            if v.is_empty() || v.contains(&0) {
                push(issues, "model.hidden", "layer widths must all be at least 1");
            } else {
                hidden = v;
            }
        }
        if let Some(v) = get_usize(model, "model", "disc_hidden", issues) {
            if v == 0 {
                push(issues, "model.disc_hidden", "must be at least 1");
            } else {
                disc_hidden = v;
            }
        }
    }

    // [step1]
    let mut step1 = Step1Config::default();
    if let Some(s1) = section(root, "step1", issues) {
        reject_unknown(
            s1,
            "step1",
            &["epochs", "batch_size", "grl_lambda", "variant", "optimizer"],
            issues,
        );
        if let Some(v) = get_usize(s1, "step1", "epochs", issues) {
            if v == 0 {
                push(issues, "step1.epochs", "must be at least 1");
            } else {
                step1.epochs = v;
            }
        }
        if let Some(v) = get_usize(s1, "step1", "batch_size", issues) {
            if v == 0 {
                push(issues, "step1.batch_size", "must be at least 1");
            } else {
                step1.batch_size = v;
            }
        }
        if let Some(v) = get_f64(s1, "step1", "grl_lambda", issues) {
            if !v.is_finite() || v < 0.0 {
                push(issues, "step1.grl_lambda", &format!("must be finite and nonnegative, got {v}"));
            } else {
                step1.grl_lambda = v;
            }
        }
        if let Some(v) = get_str(s1, "step1", "variant", issues) {
            match v.as_str() {
                "dann" => step1.variant = TeacherVariant::Dann,
                "cdan" => step1.variant = TeacherVariant::Cdan,
                other => push(
                    issues,
                    "step1.variant",
                    &format!("expected one of `dann`, `cdan`, got `{other}`"),
                ),
            }
        }
        if let Some(opt) = subsection(s1, "step1", "optimizer", issues) {
            step1.optimizer = parse_optimizer(opt, "step1.optimizer", issues);
        }
    }

    // [step2]
    let mut method = RobustMethod::Dart;
    let mut step2 = Step2Config::default();
    if let Some(s2) = section(root, "step2", issues) {
        reject_unknown(
            s2,
            "step2",
            &[
                "method",
                "epochs",
                "batch_size",
                "temperature",
                "mse_weight",
                "grl_lambda",
                "attack_target",
                "pseudo_labels",
                "attack",
                "optimizer",
            ],
            issues,
        );
        if let Some(v) = get_str(s2, "step2", "method", issues) {
            match v.as_str() {
                "dart" => method = RobustMethod::Dart,
                "at" => method = RobustMethod::At,
                "trades" => method = RobustMethod::Trades,
                other => push(
                    issues,
                    "step2.method",
                    &format!("expected one of `dart`, `at`, `trades`, got `{other}`"),
                ),
            }
        }
        if let Some(v) = get_usize(s2, "step2", "epochs", issues) {
            if v == 0 {
                push(issues, "step2.epochs", "must be at least 1");
            } else {
                step2.epochs = v;
            }
        }
        if let Some(v) = get_usize(s2, "step2", "batch_size", issues) {
            if v == 0 {
                push(issues, "step2.batch_size", "must be at least 1");
            } else {
                step2.batch_size = v;
            }
        }
        if let Some(v) = get_f64(s2, "step2", "temperature", issues) {
            if !(v > 0.0) {
                push(issues, "step2.temperature", &format!("must be positive, got {v}"));
            } else {
                step2.temperature = v;
            }
        }
        if let Some(v) = get_f64(s2, "step2", "mse_weight", issues) {
            if !v.is_finite() || v < 0.0 {
                push(issues, "step2.mse_weight", &format!("must be finite and nonnegative, got {v}"));
            } else {
                step2.mse_weight = v;
            }
        }
        if let Some(v) = get_f64(s2, "step2", "grl_lambda", issues) {
            if !v.is_finite() || v < 0.0 {
                push(issues, "step2.grl_lambda", &format!("must be finite and nonnegative, got {v}"));
            } else {
                step2.grl_lambda = v;
            }
        }
        if let Some(v) = get_str(s2, "step2", "attack_target", issues) {
            match v.as_str() {
                "student" => step2.attack_target = AttackTarget::Student,
                "teacher" => step2.attack_target = AttackTarget::Teacher,
                other => push(
                    issues,
                    "step2.attack_target",
                    &format!("expected one of `student`, `teacher`, got `{other}`"),
                ),
            }
        }
        if let Some(v) = get_str(s2, "step2", "pseudo_labels", issues) {
            match v.as_str() {
                "once" => step2.pseudo_labels = PseudoLabelPolicy::Once,
                "per_epoch" => step2.pseudo_labels = PseudoLabelPolicy::PerEpoch,
                other => push(
                    issues,
                    "step2.pseudo_labels",
                    &format!("expected one of `once`, `per_epoch`, got `{other}`"),
                ),
            }
        }
        if let Some(atk) = subsection(s2, "step2", "attack", issues) {
            step2.attack = parse_attack(atk, "step2.attack", 10, issues);
        }
        if let Some(opt) = subsection(s2, "step2", "optimizer", issues) {
            step2.optimizer = parse_optimizer(opt, "step2.optimizer", issues);
        }
    }

    // [eval] with [[eval.attack]]
    let mut eval_attacks = vec![AttackConfig::ifgsm(0.1, 0.05, 40)];
    if let Some(eval) = section(root, "eval", issues) {
        reject_unknown(eval, "eval", &["attack"], issues);
        match eval.get("attack") {
            None => {}
            Some(Value::Array(list)) => {
                let mut parsed = Vec::new();
                for (i, entry) in list.iter().enumerate() {
                    let path = format!("eval.attack[{i}]");
                    match entry {
                        Value::Table(t) => parsed.push(parse_attack(t, &path, 40, issues)),
                        _ => push(issues, &path, "must be a table"),
                    }
                }
                if parsed.is_empty() {
                    push(issues, "eval.attack", "must list at least one attack");
                } else {
                    eval_attacks = parsed;
                }
            }
            Some(_) => push(issues, "eval.attack", "must be an array of tables"),
        }
    }

    let dataset = dataset?;
    Some(ExperimentConfig {
        name,
        seeds,
        out_dir,
        dataset,
        hidden,
        disc_hidden,
        method,
        step1,
        step2,
        eval_attacks,
    })
}

fn parse_dataset(t: &Table, issues: &mut Vec<ConfigIssue>) -> Option<DatasetSource> {
    let kind = match get_str(t, "dataset", "kind", issues) {
        Some(k) => k,
        None => {
            if !t.contains_key("kind") {
                push(issues, "dataset.kind", "key is required");
            }
            return None;
        }
    };
    match kind.as_str() {
        "two_moons_rotate" => {
            reject_unknown(
                t,
                "dataset",
                &["kind", "n_source", "n_target", "noise", "angle_degrees"],
                issues,
            );
            let n_source = require_count(t, "dataset", "n_source", issues);
            let n_target = require_count(t, "dataset", "n_target", issues);
            let noise = require_nonneg(t, "dataset", "noise", issues);
            let angle_degrees = require_finite(t, "dataset", "angle_degrees", issues);
            Some(DatasetSource::Spec(DatasetSpec::TwoMoonsRotate {
                n_source: n_source?,
                n_target: n_target?,
                noise: noise?,
                angle_degrees: angle_degrees?,
            }))
        }
        "gaussian_mixture_shift" => {
            reject_unknown(
                t,
                "dataset",
                &[
                    "kind",
                    "n_source",
                    "n_target",
                    "class_count",
                    "radius",
                    "noise",
                    "shift",
                    "cov_scale",
                ],
                issues,
            );
            let n_source = require_count(t, "dataset", "n_source", issues);
            let n_target = require_count(t, "dataset", "n_target", issues);
            let class_count = match require_count(t, "dataset", "class_count", issues) {
                Some(c) if c < 2 => {
                    push(issues, "dataset.class_count", "must be at least 2");
                    None
                }
                v => v,
            };
            let radius = match require_finite(t, "dataset", "radius", issues) {
                Some(r) if !(r > 0.0) => {
                    push(issues, "dataset.radius", &format!("must be positive, got {r}"));
                    None
                }
                v => v,
            };
            let noise = require_nonneg(t, "dataset", "noise", issues);
            let shift = match t.get("shift") {
                Some(v) => match as_f64_pair(v) {
                    Some(p) => Some(p),
                    None => {
                        push(issues, "dataset.shift", "must be an array of two numbers");
                        None
                    }
                },
                None => {
                    push(issues, "dataset.shift", "key is required");
                    None
                }
            };
            let cov_scale = match require_finite(t, "dataset", "cov_scale", issues) {
                Some(c) if !(c > 0.0) => {
                    push(issues, "dataset.cov_scale", &format!("must be positive, got {c}"));
                    None
                }
                v => v,
            };
            Some(DatasetSource::Spec(DatasetSpec::GaussianMixtureShift {
                n_source: n_source?,
                n_target: n_target?,
                class_count: class_count?,
                radius: radius?,
                noise: noise?,
                shift: shift?,
                cov_scale: cov_scale?,
            }))
        }
        "csv" => {
            reject_unknown(t, "dataset", &["kind", "source", "target", "class_count"], issues);
            let source = get_str(t, "dataset", "source", issues);
            if source.is_none() && !t.contains_key("source") {
                push(issues, "dataset.source", "key is required");
            }
            let target = get_str(t, "dataset", "target", issues);
            if target.is_none() && !t.contains_key("target") {
                push(issues, "dataset.target", "key is required");
            }
            let class_count = match t.get("class_count") {
                None => Some(None),
                Some(_) => match get_usize(t, "dataset", "class_count", issues) {
                    Some(c) if c < 2 => {
                        push(issues, "dataset.class_count", "must be at least 2");
                        None
                    }
                    Some(c) => Some(Some(c)),
                    None => None,
                },
            };
            Some(DatasetSource::Csv {
                source: PathBuf::from(source?),
                target: PathBuf::from(target?),
                class_count: class_count?,
            })
        }
        other => {
            push(
                issues,
                "dataset.kind",
                &format!(
                    "expected one of `two_moons_rotate`, `gaussian_mixture_shift`, `csv`, got `{other}`"
                ),
            );
            None
        }
    }
}

fn parse_optimizer(t: &Table, path: &str, issues: &mut Vec<ConfigIssue>) -> SgdConfig {
    reject_unknown(t, path, &["learning_rate", "momentum", "weight_decay"], issues);
    let mut cfg = SgdConfig::default();
    if let Some(v) = get_f64(t, path, "learning_rate", issues) {
        if !(v > 0.0) || !v.is_finite() {
            push(issues, &format!("{path}.learning_rate"), &format!("must be positive, got {v}"));
        } else {
            cfg.learning_rate = v;
        }
    }
    if let Some(v) = get_f64(t, path, "momentum", issues) {
        if !v.is_finite() || !(0.0..1.0).contains(&v) {
            push(issues, &format!("{path}.momentum"), &format!("must lie in [0, 1), got {v}"));
        } else {
            cfg.momentum = v;
        }
    }
    if let Some(v) = get_f64(t, path, "weight_decay", issues) {
        if !v.is_finite() || v < 0.0 {
            push(issues, &format!("{path}.weight_decay"), &format!("must be finite and nonnegative, got {v}"));
        } else {
            cfg.weight_decay = v;
        }
    }
    cfg
}

fn parse_attack(
    t: &Table,
    path: &str,
    default_steps: usize,
    issues: &mut Vec<ConfigIssue>,
) -> AttackConfig {
    reject_unknown(
        t,
        path,
        &["method", "epsilon", "step_size", "steps", "random_start", "clamp"],
        issues,
    );
    let mut cfg = AttackConfig::ifgsm(0.1, 0.05, default_steps);
    let mut method_set = false;
    if let Some(v) = get_str(t, path, "method", issues) {
        match v.as_str() {
            "fgsm" => {
                cfg.method = AttackMethod::Fgsm;
                cfg.random_start = false;
                method_set = true;
            }
            "ifgsm" => {
                cfg.method = AttackMethod::Ifgsm;
                cfg.random_start = false;
                method_set = true;
            }
            "pgd" => {
                cfg.method = AttackMethod::Pgd;
                cfg.random_start = true;
                method_set = true;
            }
            other => push(
                issues,
                &format!("{path}.method"),
                &format!("expected one of `fgsm`, `ifgsm`, `pgd`, got `{other}`"),
            ),
        }
    }
    if let Some(v) = get_f64(t, path, "epsilon", issues) {
        if !v.is_finite() || v < 0.0 {
            push(issues, &format!("{path}.epsilon"), &format!("must be finite and nonnegative, got {v}"));
        } else {
            cfg.epsilon = v;
        }
    }
    if let Some(v) = get_f64(t, path, "step_size", issues) {
        if !(v > 0.0) || !v.is_finite() {
            push(issues, &format!("{path}.step_size"), &format!("must be positive, got {v}"));
        } else {
            cfg.step_size = v;
        }
    }
    if let Some(v) = get_usize(t, path, "steps", issues) {
        if v == 0 {
            push(issues, &format!("{path}.steps"), "must be at least 1");
        } else {
            cfg.steps = v;
        }
    }
    if cfg.method == AttackMethod::Fgsm && method_set {
        cfg.steps = 1;
        cfg.step_size = cfg.epsilon;
    }
    if let Some(v) = get_bool(t, path, "random_start", issues) {
        cfg.random_start = v;
    }
    if let Some(v) = get_str(t, path, "clamp", issues) {
        match v.as_str() {
            "feature_bounds" => cfg.clamp = ClampMode::FeatureBounds,
            "none" => cfg.clamp = ClampMode::None,
            other => push(
                issues,
                &format!("{path}.clamp"),
                &format!("expected one of `feature_bounds`, `none`, got `{other}`"),
            ),
        }
    }
    cfg
}

fn push(issues: &mut Vec<ConfigIssue>, location: &str, message: &str) {
    issues.push(ConfigIssue {
        location: location.to_string(),
        message: message.to_string(),
    });
}

fn dotted(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn section<'a>(root: &'a Table, key: &str, issues: &mut Vec<ConfigIssue>) -> Option<&'a Table> {
    match root.get(key) {
        None => None,
        Some(Value::Table(t)) => Some(t),
        Some(_) => {
            push(issues, key, "must be a table");
            None
        }
    }
}

fn subsection<'a>(
    t: &'a Table,
    path: &str,
    key: &str,
    issues: &mut Vec<ConfigIssue>,
) -> Option<&'a Table> {
    match t.get(key) {
        None => None,
        Some(Value::Table(sub)) => Some(sub),
        Some(_) => {
            push(issues, &dotted(path, key), "must be a table");
            None
        }
    }
}

fn get_f64(t: &Table, path: &str, key: &str, issues: &mut Vec<ConfigIssue>) -> Option<f64> {
    match t.get(key) {
        None => None,
        Some(Value::Float(v)) => Some(*v),
        Some(Value::Integer(v)) => Some(*v as f64),
        Some(other) => {
            push(issues, &dotted(path, key), &format!("expected a number, got {}", type_name(other)));
            None
        }
    }
}

fn get_usize(t: &Table, path: &str, key: &str, issues: &mut Vec<ConfigIssue>) -> Option<usize> {
    match t.get(key) {
        None => None,
        Some(Value::Integer(v)) if *v >= 0 => Some(*v as usize),
        Some(Value::Integer(v)) => {
            push(issues, &dotted(path, key), &format!("must be nonnegative, got {v}"));
            None
        }
        Some(other) => {
            push(issues, &dotted(path, key), &format!("expected an integer, got {}", type_name(other)));
            None
        }
    }
}

fn get_bool(t: &Table, path: &str, key: &str, issues: &mut Vec<ConfigIssue>) -> Option<bool> {
    match t.get(key) {
        None => None,
        Some(Value::Boolean(v)) => Some(*v),
        Some(other) => {
            push(issues, &dotted(path, key), &format!("expected a boolean, got {}", type_name(other)));
            None
        }
    }
}

fn get_str(t: &Table, path: &str, key: &str, issues: &mut Vec<ConfigIssue>) -> Option<String> {
    match t.get(key) {
        None => None,
        Some(Value::String(v)) => Some(v.clone()),
        Some(other) => {
            push(issues, &dotted(path, key), &format!("expected a string, got {}", type_name(other)));
            None
        }
    }
}

fn get_u64_array(t: &Table, path: &str, key: &str, issues: &mut Vec<ConfigIssue>) -> Option<Vec<u64>> {
    match t.get(key) {
        None => None,
        Some(Value::Array(list)) => {
            let mut out = Vec::with_capacity(list.len());
            for (i, v) in list.iter().enumerate() {
                match v {
                    Value::Integer(x) if *x >= 0 => out.push(*x as u64),
                    _ => {
                        push(
                            issues,
                            &format!("{}[{i}]", dotted(path, key)),
                            "expected a nonnegative integer",
                        );
                        return None;
                    }
                }
            }
            Some(out)
        }
        Some(other) => {
            push(issues, &dotted(path, key), &format!("expected an array, got {}", type_name(other)));
            None
        }
    }
}

fn get_usize_array(t: &Table, path: &str, key: &str, issues: &mut Vec<ConfigIssue>) -> Option<Vec<usize>> {
    get_u64_array(t, path, key, issues).map(|v| v.into_iter().map(|x| x as usize).collect())
}

fn as_f64_pair(v: &Value) -> Option<(f64, f64)> {
    let Value::Array(list) = v else { return None };
    if list.len() != 2 {
        return None;
    }
    let num = |v: &Value| match v {
        Value::Float(x) => Some(*x),
        Value::Integer(x) => Some(*x as f64),
        _ => None,
    };
    Some((num(&list[0])?, num(&list[1])?))
}

fn require_count(t: &Table, path: &str, key: &str, issues: &mut Vec<ConfigIssue>) -> Option<usize> {
    match get_usize(t, path, key, issues) {
        Some(0) => {
            push(issues, &dotted(path, key), "must be at least 1");
            None
        }
        Some(v) => Some(v),
        None => {
            if !t.contains_key(key) {
                push(issues, &dotted(path, key), "key is required");
            }
            None
        }
    }
}

fn require_finite(t: &Table, path: &str, key: &str, issues: &mut Vec<ConfigIssue>) -> Option<f64> {
    match get_f64(t, path, key, issues) {
        Some(v) if v.is_finite() => Some(v),
        Some(v) => {
            push(issues, &dotted(path, key), &format!("must be finite, got {v}"));
            None
        }
        None => {
            if !t.contains_key(key) {
                push(issues, &dotted(path, key), "key is required");
            }
            None
        }
    }
}

fn require_nonneg(t: &Table, path: &str, key: &str, issues: &mut Vec<ConfigIssue>) -> Option<f64> {
    match require_finite(t, path, key, issues) {
        Some(v) if v < 0.0 => {
            push(issues, &dotted(path, key), &format!("must be nonnegative, got {v}"));
            None
        }
        v => v,
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a float",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

fn reject_unknown(t: &Table, path: &str, allowed: &[&str], issues: &mut Vec<ConfigIssue>) {
    for key in t.keys() {
        if !allowed.contains(&key.as_str()) {
            let message = match closest(key, allowed) {
                Some(hint) => format!("unknown key `{key}`; did you mean `{hint}`?"),
                None => format!("unknown key `{key}`"),
            };
            push(issues, &dotted(path, key), &message);
        }
    }
}

/// Closest allowed key within edit distance 2, for typo hints.
fn closest<'a>(key: &str, allowed: &[&'a str]) -> Option<&'a str> {
    allowed
        .iter()
        .map(|a| (levenshtein(key, a), *a))
        .filter(|(d, _)| *d <= 2)
        .min_by_key(|(d, _)| *d)
        .map(|(_, a)| a)
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[dataset]
kind = "two_moons_rotate"
n_source = 64
n_target = 64
noise = 0.1
angle_degrees = 30.0
"#;

    #[test]
    fn minimal_config_fills_pinned_defaults() {
        let cfg = parse_config_str(MINIMAL, "demo.toml").unwrap();
        assert_eq!(cfg.name, "demo");
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.method, RobustMethod::Dart);
        assert_eq!(cfg.step2.temperature, 2.0);
        assert_eq!(cfg.eval_attacks.len(), 1);
        let atk = &cfg.eval_attacks[0];
        assert_eq!(atk.method, AttackMethod::Ifgsm);
        assert_eq!(atk.epsilon, 0.1);
        assert_eq!(atk.step_size, 0.05);
        assert_eq!(atk.steps, 40);
    }

    #[test]
    fn zero_temperature_is_a_range_error_naming_the_field() {
        let text = format!("{MINIMAL}\n[step2]\ntemperature = 0.0\n");
        let err = parse_config_str(&text, "t.toml").unwrap_err();
        let ConfigError::Invalid { issues, .. } = err else {
            panic!("expected Invalid, got {err}");
        };
        assert!(issues
            .iter()
            .any(|i| i.location == "step2.temperature" && i.message.contains("positive")));
    }

    #[test]
    fn misspelled_key_suggests_the_real_one() {
        let text = format!("{MINIMAL}\n[step2.attack]\nepslion = 0.1\n");
        let err = parse_config_str(&text, "t.toml").unwrap_err();
        let ConfigError::Invalid { issues, .. } = err else {
            panic!("expected Invalid, got {err}");
        };
        assert!(issues
            .iter()
            .any(|i| i.location == "step2.attack.epslion" && i.message.contains("did you mean `epsilon`")));
    }

    #[test]
    fn all_errors_come_back_at_once() {
        let text = r#"
[run]
seeds = []
[dataset]
kind = "two_moons_rotate"
n_source = 0
noise = -1.0
angle_degrees = 30.0
[step1]
epochs = 0
[step2]
mse_weight = -2.0
"#;
        let err = parse_config_str(text, "t.toml").unwrap_err();
        let ConfigError::Invalid { issues, .. } = err else {
            panic!("expected Invalid, got {err}");
        };
        let locations: Vec<&str> = issues.iter().map(|i| i.location.as_str()).collect();
        for expected in [
            "run.seeds",
            "dataset.n_source",
            "dataset.n_target",
            "dataset.noise",
            "step1.epochs",
            "step2.mse_weight",
        ] {
            assert!(locations.contains(&expected), "missing issue at {expected}: {locations:?}");
        }
    }

    #[test]
    fn unknown_enum_values_are_rejected() {
        let text = format!("{MINIMAL}\n[step2]\nmethod = \"dard\"\n");
        let err = parse_config_str(&text, "t.toml").unwrap_err();
        let ConfigError::Invalid { issues, .. } = err else {
            panic!("expected Invalid, got {err}");
        };
        assert!(issues
            .iter()
            .any(|i| i.location == "step2.method" && i.message.contains("`dard`")));
    }

    #[test]
    fn mixture_and_csv_sources_parse() {
        let text = r#"
[dataset]
kind = "gaussian_mixture_shift"
n_source = 90
n_target = 90
class_count = 3
radius = 0.6
noise = 0.25
shift = [0.3, 0.2]
cov_scale = 1.1
"#;
        let cfg = parse_config_str(text, "m.toml").unwrap();
        assert!(matches!(
            cfg.dataset,
            DatasetSource::Spec(DatasetSpec::GaussianMixtureShift { class_count: 3, .. })
        ));

        let text = r#"
[dataset]
kind = "csv"
source = "src.csv"
target = "tgt.csv"
"#;
        let cfg = parse_config_str(text, "c.toml").unwrap();
        assert!(matches!(cfg.dataset, DatasetSource::Csv { .. }));
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = parse_config_str(MINIMAL, "a.toml").unwrap();
        let b = parse_config_str(MINIMAL, "a.toml").unwrap();
        assert_eq!(a.config_hash(), b.config_hash());
        let text = format!("{MINIMAL}\n[step2]\nepochs = 31\n");
        let c = parse_config_str(&text, "a.toml").unwrap();
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn pgd_attack_entry_defaults_random_start() {
        let text = format!(
            "{MINIMAL}\n[[eval.attack]]\nmethod = \"pgd\"\nepsilon = 0.05\nstep_size = 0.01\nsteps = 20\n"
        );
        let cfg = parse_config_str(&text, "t.toml").unwrap();
        assert_eq!(cfg.eval_attacks.len(), 1);
        assert_eq!(cfg.eval_attacks[0].method, AttackMethod::Pgd);
        assert!(cfg.eval_attacks[0].random_start);
    }
}
