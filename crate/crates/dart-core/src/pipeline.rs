//! End-to-end experiment pipeline: pretrain, freeze, robustify, evaluate,
//! report. Every run writes a manifest with enough metadata to re-run it
//! bit-identically, and completed stages are resumed from their checkpoints
//! instead of retrained.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{DatasetSource, ExperimentConfig, RobustMethod};
use crate::data::{load_csv, load_domain_csv, DataError, DomainDataset};
use crate::eval::{
    accuracy, adversarial_predictions, audit_prop1_labels, audit_thm1_labels, clean_predictions,
    EvalError, Prop1Audit, Thm1Audit,
};
use crate::hashing::derive_seed;
use crate::model::{Model, ModelError, Provenance};
use crate::train::robust::{run_at, run_dart, run_trades, Step2Config};
use crate::train::uda::train_step1;
use crate::train::TrainError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.csv";
const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest: {reason}")]
    Manifest { reason: String },
    #[error("{reason}")]
    Invalid { reason: String },
    #[error("stage {stage} (seed {seed}): {source}")]
    Stage {
        stage: &'static str,
        seed: u64,
        source: Box<PipelineError>,
    },
}

pub type PipelineResult<T> = Result<T, PipelineError>;

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn with_stage<T>(stage: &'static str, seed: u64, r: PipelineResult<T>) -> PipelineResult<T> {
    r.map_err(|e| PipelineError::Stage {
        stage,
        seed,
        source: Box::new(e),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Incomplete,
    Complete,
}

/// One stage of one seeded run: what it was, whether it finished, which
/// checkpoint it produced, and the RNG seeds it actually consumed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub seed: u64,
    pub stage: String,
    pub status: StageStatus,
    pub rng_seeds: Vec<u64>,
    pub checkpoint: Option<PathBuf>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
}

/// Reproducibility record for a whole run: config hash and the resolved
/// config itself, toolkit version, timestamps, and per-stage progress.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub name: String,
    pub config_hash: String,
    pub toolkit_version: String,
    pub created_unix_ms: u64,
    pub updated_unix_ms: u64,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
    /// Relative path of the final report, set once evaluation finished.
    pub report: Option<PathBuf>,
}

impl RunManifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let now = now_ms();
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            name: cfg.name.clone(),
            config_hash: cfg.config_hash(),
            toolkit_version: crate::TOOLKIT_VERSION.to_string(),
            created_unix_ms: now,
            updated_unix_ms: now,
            seeds: cfg.seeds.clone(),
            config: cfg.clone(),
            stages: Vec::new(),
            report: None,
        }
    }

    pub fn load(path: &Path) -> PipelineResult<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let manifest: RunManifest =
            serde_json::from_str(&json).map_err(|e| PipelineError::Manifest {
                reason: format!("{} is not a valid manifest: {e}", path.display()),
            })?;
        if manifest.format_version != MANIFEST_FORMAT_VERSION {
            return Err(PipelineError::Manifest {
                reason: format!(
                    "format_version {} is not supported (expected {})",
                    manifest.format_version, MANIFEST_FORMAT_VERSION
                ),
            });
        }
        Ok(manifest)
    }

    /// Writes the manifest atomically (write-then-rename) so an interrupt
    /// never leaves a half-written file behind.
    pub fn save(&mut self, path: &Path) -> PipelineResult<()> {
        self.updated_unix_ms = now_ms();
        let json = serde_json::to_string_pretty(self).expect("plain data serializes");
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, json).map_err(|e| io_err(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
        Ok(())
    }

    pub fn stage(&self, seed: u64, stage: &str) -> Option<&StageRecord> {
        self.stages
            .iter()
            .find(|s| s.seed == seed && s.stage == stage)
    }

    /// Registers the stage as started but unfinished, replacing any earlier
    /// record for the same (seed, stage).
    pub fn begin_stage(&mut self, seed: u64, stage: &str, rng_seeds: Vec<u64>) {
        self.stages.retain(|s| !(s.seed == seed && s.stage == stage));
        self.stages.push(StageRecord {
            seed,
            stage: stage.to_string(),
            status: StageStatus::Incomplete,
            rng_seeds,
            checkpoint: None,
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
        });
    }

    pub fn finish_stage(&mut self, seed: u64, stage: &str, checkpoint: Option<PathBuf>) {
        if let Some(s) = self
            .stages
            .iter_mut()
            .find(|s| s.seed == seed && s.stage == stage)
        {
            s.status = StageStatus::Complete;
            s.checkpoint = checkpoint;
            s.finished_unix_ms = Some(now_ms());
        }
    }

    pub fn is_complete(&self) -> bool {
        self.report.is_some()
            && self.seeds.iter().all(|&seed| {
                ["pretrain", "robustify", "evaluate"].iter().all(|stage| {
                    self.stage(seed, stage)
                        .is_some_and(|s| s.status == StageStatus::Complete)
                })
            })
    }

    pub fn incomplete_stages(&self) -> Vec<(u64, String)> {
        self.stages
            .iter()
            .filter(|s| s.status == StageStatus::Incomplete)
            .map(|s| (s.seed, s.stage.clone()))
            .collect()
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default()
        .as_millis() as u64
}

/// One evaluated (model, attack) cell of the final report, with both bound
/// audits attached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub model: String,
    pub seed: u64,
    pub attack: String,
    pub eps: f64,
    pub clean_acc: f64,
    pub adv_acc: f64,
    pub prop1: Prop1Audit,
    pub thm1: Thm1Audit,
}

/// Renders report rows as CSV with fixed six-decimal floats, so identical
/// runs produce byte-identical files.
pub fn report_csv(rows: &[ReportRow]) -> PipelineResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "name",
        "model",
        "seed",
        "attack",
        "eps",
        "clean_acc",
        "adv_acc",
        "robust_disagreement",
        "prop1_lhs",
        "prop1_rhs",
        "prop1_gap",
        "prop1_holds",
        "attack_defense",
        "benign_maintenance",
        "ideal_error",
        "thm1_lhs",
        "thm1_rhs",
        "thm1_gap",
        "ineq6_gap",
        "ineq7_gap",
        "thm1_holds",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.model.clone(),
            r.seed.to_string(),
            r.attack.clone(),
            f6(r.eps),
            f6(r.clean_acc),
            f6(r.adv_acc),
            f6(r.prop1.robust_disagreement),
            f6(r.prop1.lhs),
            f6(r.prop1.rhs),
            f6(r.prop1.gap),
            r.prop1.holds.to_string(),
            f6(r.thm1.attack_defense),
            f6(r.thm1.benign_maintenance),
            f6(r.thm1.ideal_error),
            f6(r.thm1.lhs),
            f6(r.thm1.rhs),
            f6(r.thm1.gap),
            f6(r.thm1.ineq6_gap),
            f6(r.thm1.ineq7_gap),
            r.thm1.holds.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| PipelineError::Invalid {
        reason: format!("csv buffer: {e}"),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> PipelineError {
    PipelineError::Invalid {
        reason: format!("csv: {e}"),
    }
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

/// Materializes a data source: synthetic recipes are generated from the
/// seed, CSV pairs are loaded from disk (the seed is ignored).
pub fn load_dataset(source: &DatasetSource, seed: u64) -> PipelineResult<DomainDataset> {
    match source {
        DatasetSource::Spec(spec) => Ok(spec.generate(seed)?),
        DatasetSource::Csv {
            source,
            target,
            class_count,
        } => Ok(load_domain_csv(source, target, *class_count)?),
    }
}

/// Materializes only the target side of a data source. Robustification via
/// distillation calls this, so runs against CSV data never need the source
/// file to exist.
pub fn load_target_dataset(source: &DatasetSource, seed: u64) -> PipelineResult<DomainDataset> {
    match source {
        DatasetSource::Spec(spec) => Ok(spec.generate(seed)?),
        DatasetSource::Csv {
            target,
            class_count,
            ..
        } => {
            let (features, labels) = load_csv(target)?;
            let class_count = match (class_count, &labels) {
                (Some(c), _) => *c,
                (None, Some(l)) => l.iter().map(|&x| x + 1).max().unwrap_or(2).max(2),
                (None, None) => {
                    return Err(PipelineError::Invalid {
                        reason: format!(
                            "{}: class_count is required when the target CSV has no labels",
                            target.display()
                        ),
                    })
                }
            };
            Ok(DomainDataset::target_only(features, labels, class_count)?)
        }
    }
}

fn seed_label(cfg: &ExperimentConfig, part: &str) -> String {
    format!("{}:{part}", cfg.name)
}

/// The RNG seed the pipeline feeds the data generator for this run seed.
pub fn derived_data_seed(cfg: &ExperimentConfig, seed: u64) -> u64 {
    derive_seed(seed, &seed_label(cfg, "data"), 0)
}

/// The RNG seed for model initialization under this run seed.
pub fn derived_model_seed(cfg: &ExperimentConfig, seed: u64) -> u64 {
    derive_seed(seed, &seed_label(cfg, "model"), 0)
}

/// Step-1 settings with the per-run seed resolved; the checkpoint path is
/// left unset for the caller to fill in.
pub fn derived_step1(cfg: &ExperimentConfig, seed: u64) -> crate::train::uda::Step1Config {
    let mut s1 = cfg.step1.clone();
    s1.seed = derive_seed(seed, &seed_label(cfg, "step1"), 0);
    s1.checkpoint = None;
    s1
}

/// Step-2 settings with the per-run seed resolved.
pub fn derived_step2(cfg: &ExperimentConfig, seed: u64) -> Step2Config {
    let mut s2 = cfg.step2.clone();
    s2.seed = derive_seed(seed, &seed_label(cfg, "step2"), 0);
    s2
}

/// Where the pipeline keeps the frozen teacher for one seed.
pub fn teacher_checkpoint_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed-{seed}")).join("teacher.json")
}

/// Where the pipeline keeps the robustified student for one seed.
pub fn student_checkpoint_path(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed-{seed}")).join("student.json")
}

/// Evaluation attacks with their per-run seeds resolved.
pub fn resolved_eval_attacks(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Vec<crate::attack::AttackConfig> {
    cfg.eval_attacks
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let mut a = *a;
            a.seed = derive_seed(seed, &seed_label(cfg, "eval-attack"), i as u64);
            a
        })
        .collect()
}

/// Trains the configured robust model. Distillation needs the frozen
/// teacher and touches only the dataset's target view; the single-model
/// baselines retrain from a fresh initialization on the full training view.
pub fn train_student(
    cfg: &ExperimentConfig,
    teacher: Option<&Model>,
    dataset: &DomainDataset,
    s2: &Step2Config,
    model_seed: u64,
) -> PipelineResult<Model> {
    match cfg.method {
        RobustMethod::Dart => {
            let teacher = teacher.ok_or_else(|| PipelineError::Invalid {
                reason: "the dart method needs a pretrained teacher".into(),
            })?;
            let (student, _) = run_dart(teacher, dataset.target_view(), s2, None)?;
            Ok(student)
        }
        RobustMethod::At | RobustMethod::Trades => {
            let mut mc = cfg.model_config(dataset.feature_dim(), dataset.class_count());
            mc.seed = model_seed;
            let init = Model::new(&mc)?;
            let (model, _) = match cfg.method {
                RobustMethod::At => run_at(&init, dataset.train_view(), s2, None)?,
                _ => run_trades(&init, dataset.train_view(), s2, None)?,
            };
            Ok(model)
        }
    }
}

/// Robustifies from an existing teacher checkpoint, standalone. For the
/// dart method this loads target data only; the baselines need the full
/// dataset and ignore the teacher. Writes the student checkpoint to `out`.
pub fn robustify_from_checkpoint(
    cfg: &ExperimentConfig,
    teacher_path: Option<&Path>,
    seed: u64,
    out: &Path,
) -> PipelineResult<Model> {
    let s2 = derived_step2(cfg, seed);
    let data_seed = derived_data_seed(cfg, seed);
    let model_seed = derived_model_seed(cfg, seed);

    let teacher = match (cfg.method, teacher_path) {
        (RobustMethod::Dart, Some(path)) => Some(Model::load_checkpoint(path)?.0),
        (RobustMethod::Dart, None) => {
            return Err(PipelineError::Invalid {
                reason: "the dart method needs a teacher checkpoint".into(),
            })
        }
        _ => None,
    };
    let dataset = match cfg.method {
        RobustMethod::Dart => load_target_dataset(&cfg.dataset, data_seed)?,
        _ => load_dataset(&cfg.dataset, data_seed)?,
    };
    let student = train_student(cfg, teacher.as_ref(), &dataset, &s2, model_seed)?;
    let provenance = Provenance {
        config_hash: s2.fingerprint(),
        seed: s2.seed,
        step: cfg.method.name().to_string(),
        toolkit_version: crate::TOOLKIT_VERSION.to_string(),
    };
    student.save_checkpoint(out, &provenance)?;
    Ok(student)
}

/// Picks up the run's existing manifest, or starts a fresh one. A manifest
/// recorded for a different config is refused rather than overwritten.
fn load_or_new_manifest(cfg: &ExperimentConfig, path: &Path) -> PipelineResult<RunManifest> {
    if !path.exists() {
        return Ok(RunManifest::new(cfg));
    }
    let existing = RunManifest::load(path)?;
    if existing.config_hash != cfg.config_hash() {
        return Err(PipelineError::Manifest {
            reason: format!(
                "{} belongs to a different config (hash {}, this config {}); use a fresh output directory",
                path.display(),
                existing.config_hash,
                cfg.config_hash()
            ),
        });
    }
    Ok(existing)
}

/// A resumable checkpoint is one whose provenance matches the exact stage
/// settings this run would use; anything else is retrained.
fn try_resume(path: &Path, fingerprint: &str, seed: u64) -> Option<Model> {
    let (model, prov) = Model::load_checkpoint(path).ok()?;
    (prov.config_hash == fingerprint && prov.seed == seed).then_some(model)
}

struct SeedOutcome {
    rows: Vec<ReportRow>,
}

/// Pretrain for one seed: the frozen teacher, resumed from its checkpoint
/// when the recorded settings match exactly, retrained otherwise.
fn pretrain_stage(
    cfg: &ExperimentConfig,
    seed: u64,
    dataset: &DomainDataset,
    teacher_path: &Path,
    manifest: &mut RunManifest,
    manifest_path: &Path,
) -> PipelineResult<Model> {
    let mut s1 = derived_step1(cfg, seed);
    s1.checkpoint = Some(teacher_path.to_path_buf());
    let model_seed = derived_model_seed(cfg, seed);
    let resumed = manifest
        .stage(seed, "pretrain")
        .is_some_and(|s| s.status == StageStatus::Complete)
        .then(|| try_resume(teacher_path, &s1.fingerprint(), s1.seed))
        .flatten();
    if let Some(model) = resumed {
        return Ok(model);
    }
    manifest.begin_stage(seed, "pretrain", vec![s1.seed, model_seed]);
    manifest.save(manifest_path)?;
    let mut mc = cfg.model_config(dataset.feature_dim(), dataset.class_count());
    mc.seed = model_seed;
    let init = with_stage("pretrain", seed, Model::new(&mc).map_err(Into::into))?;
    let (teacher, _) = with_stage(
        "pretrain",
        seed,
        train_step1(dataset.train_view(), init, &s1, None).map_err(Into::into),
    )?;
    manifest.finish_stage(seed, "pretrain", Some(teacher_path.to_path_buf()));
    manifest.save(manifest_path)?;
    Ok(teacher)
}

/// Runs just the pretrain stage of the pipeline for one seed, with the same
/// checkpoints and manifest bookkeeping as a full run, so a later full run
/// resumes from the result instead of retraining.
pub fn pretrain_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
) -> PipelineResult<(Model, PathBuf)> {
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut manifest = load_or_new_manifest(cfg, &manifest_path)?;
    let dataset = with_stage(
        "load-data",
        seed,
        load_dataset(&cfg.dataset, derived_data_seed(cfg, seed)),
    )?;
    let teacher_path = teacher_checkpoint_path(out_dir, seed);
    let teacher = pretrain_stage(cfg, seed, &dataset, &teacher_path, &mut manifest, &manifest_path)?;
    Ok((teacher, teacher_path))
}

fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
    manifest: &mut RunManifest,
    manifest_path: &Path,
) -> PipelineResult<SeedOutcome> {
    let data_seed = derived_data_seed(cfg, seed);
    let model_seed = derived_model_seed(cfg, seed);
    let dataset = with_stage("load-data", seed, load_dataset(&cfg.dataset, data_seed))?;

    let teacher_path = teacher_checkpoint_path(out_dir, seed);
    let student_path = student_checkpoint_path(out_dir, seed);

    let teacher = pretrain_stage(cfg, seed, &dataset, &teacher_path, manifest, manifest_path)?;

    // Robustify: the configured method, resumed the same way.
    let s2 = derived_step2(cfg, seed);
    let resumed = manifest
        .stage(seed, "robustify")
        .is_some_and(|s| s.status == StageStatus::Complete)
        .then(|| try_resume(&student_path, &s2.fingerprint(), s2.seed))
        .flatten();
    let student = match resumed {
        Some(model) => model,
        None => {
            manifest.begin_stage(seed, "robustify", vec![s2.seed]);
            manifest.save(manifest_path)?;
            let student = with_stage(
                "robustify",
                seed,
                train_student(cfg, Some(&teacher), &dataset, &s2, model_seed),
            )?;
            let provenance = Provenance {
                config_hash: s2.fingerprint(),
                seed: s2.seed,
                step: cfg.method.name().to_string(),
                toolkit_version: crate::TOOLKIT_VERSION.to_string(),
            };
            with_stage(
                "robustify",
                seed,
                student
                    .save_checkpoint(&student_path, &provenance)
                    .map_err(Into::into),
            )?;
            manifest.finish_stage(seed, "robustify", Some(student_path.clone()));
            manifest.save(manifest_path)?;
            student
        }
    };

    // Evaluate: cheap and deterministic, so always recomputed.
    let attacks = resolved_eval_attacks(cfg, seed);
    manifest.begin_stage(seed, "evaluate", attacks.iter().map(|a| a.seed).collect());
    manifest.save(manifest_path)?;
    let rows = with_stage(
        "evaluate",
        seed,
        evaluate_pair(cfg, seed, &teacher, &student, &dataset, &attacks),
    )?;
    manifest.finish_stage(seed, "evaluate", None);
    manifest.save(manifest_path)?;
    Ok(SeedOutcome { rows })
}

fn evaluate_pair(
    cfg: &ExperimentConfig,
    seed: u64,
    teacher: &Model,
    student: &Model,
    dataset: &DomainDataset,
    attacks: &[crate::attack::AttackConfig],
) -> PipelineResult<Vec<ReportRow>> {
    let truth = dataset.eval_labels()?;
    // The frozen teacher doubles as the reference classifier in the
    // theorem-level audit.
    let reference_clean = clean_predictions(teacher, dataset)?;
    let mut rows = Vec::new();
    for (model_name, model) in [("teacher", teacher), (cfg.method.name(), student)] {
        let clean = clean_predictions(model, dataset)?;
        let clean_acc = accuracy(&clean, truth)?;
        for attack in attacks {
            let adv = adversarial_predictions(model, dataset, attack)?;
            rows.push(ReportRow {
                name: cfg.name.clone(),
                model: model_name.to_string(),
                seed,
                attack: attack.method.name().to_string(),
                eps: attack.epsilon,
                clean_acc,
                adv_acc: accuracy(&adv, truth)?,
                prop1: audit_prop1_labels(&adv, &clean, truth)?,
                thm1: audit_thm1_labels(&adv, &clean, &reference_clean, truth)?,
            });
        }
    }
    Ok(rows)
}

/// Runs the whole experiment: for every seed, pretrain then robustify then
/// evaluate, writing checkpoints and the manifest as stages finish, and
/// finally the report CSV. Re-running over an existing output directory
/// resumes completed stages and redoes incomplete ones.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: &Path) -> PipelineResult<RunManifest> {
    if cfg.seeds.is_empty() {
        return Err(PipelineError::Invalid {
            reason: "need at least one seed".into(),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut manifest = load_or_new_manifest(cfg, &manifest_path)?;
    manifest.seeds = cfg.seeds.clone();

    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let outcome = run_seed(cfg, seed, out_dir, &mut manifest, &manifest_path)?;
        rows.extend(outcome.rows);
    }

    let report_path = out_dir.join(REPORT_FILE);
    std::fs::write(&report_path, report_csv(&rows)?).map_err(|e| io_err(&report_path, e))?;
    manifest.report = Some(PathBuf::from(REPORT_FILE));
    manifest.save(&manifest_path)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn tiny_config() -> ExperimentConfig {
        let text = r#"
[run]
name = "tiny"
seeds = [7]

[dataset]
kind = "two_moons_rotate"
n_source = 48
n_target = 48
noise = 0.1
angle_degrees = 30.0

[model]
hidden = [8]
disc_hidden = 8

[step1]
epochs = 3
batch_size = 16

[step2]
epochs = 2
batch_size = 16

[step2.attack]
method = "ifgsm"
epsilon = 0.1
step_size = 0.05
steps = 3

[[eval.attack]]
method = "ifgsm"
epsilon = 0.1
step_size = 0.05
steps = 5
"#;
        parse_config_str(text, "tiny.toml").unwrap()
    }

    #[test]
    fn manifest_roundtrips_and_tracks_stages() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut m = RunManifest::new(&cfg);
        m.begin_stage(7, "pretrain", vec![42]);
        m.save(&path).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded.config_hash, cfg.config_hash());
        assert_eq!(loaded.incomplete_stages(), vec![(7, "pretrain".to_string())]);
        assert!(!loaded.is_complete());

        m.finish_stage(7, "pretrain", Some(PathBuf::from("t.json")));
        m.save(&path).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        let s = loaded.stage(7, "pretrain").unwrap();
        assert_eq!(s.status, StageStatus::Complete);
        assert!(s.finished_unix_ms.is_some());
    }

    #[test]
    fn pipeline_runs_and_resumes_identically() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let manifest = run_pipeline(&cfg, dir.path()).unwrap();
        assert!(manifest.is_complete());
        let report1 = std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        assert!(report1.contains("teacher") && report1.contains("dart"));

        // Second run over the same directory resumes from checkpoints and
        // must reproduce the report byte for byte.
        let manifest = run_pipeline(&cfg, dir.path()).unwrap();
        assert!(manifest.is_complete());
        let report2 = std::fs::read_to_string(dir.path().join(REPORT_FILE)).unwrap();
        assert_eq!(report1, report2);

        // A fresh directory also reproduces it.
        let dir2 = tempfile::tempdir().unwrap();
        run_pipeline(&cfg, dir2.path()).unwrap();
        let report3 = std::fs::read_to_string(dir2.path().join(REPORT_FILE)).unwrap();
        assert_eq!(report1, report3);
    }

    #[test]
    fn pipeline_rejects_foreign_manifest() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        run_pipeline(&cfg, dir.path()).unwrap();
        let mut other = cfg.clone();
        other.step2.epochs += 1;
        let err = run_pipeline(&other, dir.path()).unwrap_err();
        assert!(matches!(err, PipelineError::Manifest { .. }), "{err}");
    }

    #[test]
    fn target_only_load_skips_source_file() {
        let dir = tempfile::tempdir().unwrap();
        let spec = crate::data::DatasetSpec::TwoMoonsRotate {
            n_source: 32,
            n_target: 32,
            noise: 0.1,
            angle_degrees: 30.0,
        };
        let ds = spec.generate(3).unwrap();
        crate::data::save_csv(
            ds.target_features(),
            Some(ds.eval_labels().unwrap()),
            &dir.path().join("target.csv"),
        )
        .unwrap();
        // No source.csv is ever written.
        let source = DatasetSource::Csv {
            source: dir.path().join("missing.csv"),
            target: dir.path().join("target.csv"),
            class_count: None,
        };
        let loaded = load_target_dataset(&source, 0).unwrap();
        assert_eq!(loaded.n_source(), 0);
        assert_eq!(loaded.n_target(), 32);
        assert_eq!(loaded.class_count(), 2);
    }

    #[test]
    fn report_csv_uses_fixed_six_decimals() {
        let rows = vec![ReportRow {
            name: "n".into(),
            model: "dart".into(),
            seed: 1,
            attack: "ifgsm".into(),
            eps: 0.1,
            clean_acc: 0.5,
            adv_acc: 0.25,
            prop1: crate::eval::audit_prop1_labels(&[0, 1], &[0, 0], &[0, 1]).unwrap(),
            thm1: crate::eval::audit_thm1_labels(&[0, 1], &[0, 0], &[0, 1], &[0, 1]).unwrap(),
        }];
        let csv = report_csv(&rows).unwrap();
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("name,model,seed,attack,eps"));
        assert!(lines.next().unwrap().contains("0.100000,0.500000,0.250000"));
    }
}
