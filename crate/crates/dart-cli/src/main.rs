//! Command-line front end: config-driven pretraining, robustification,
//! attack evaluation, the pilot study, report generation, synthetic data
//! export, and the numeric self-check suite.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dart_core::checks;
use dart_core::config::{parse_config, ConfigError, ExperimentConfig, RobustMethod};
use dart_core::data::{save_domain_csv, DatasetSpec};
use dart_core::eval::{audit_prop1, evaluate};
use dart_core::model::Model;
use dart_core::pilot::{default_suite, load_suite, run_pilot};
use dart_core::pipeline::{
    derived_data_seed, load_dataset, pretrain_seed, resolved_eval_attacks,
    robustify_from_checkpoint, run_pipeline, student_checkpoint_path, PipelineError, REPORT_FILE,
};

/// Environment variable naming the directory run outputs nest under when
/// neither `--out` nor the config's `out_dir` says otherwise.
const OUT_ROOT_VAR: &str = "DART_OUT_ROOT";
const DEFAULT_OUT_ROOT: &str = "runs";

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERDICT: u8 = 3;

/// A bad invocation, as opposed to a failure while running.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

#[derive(Parser)]
#[command(
    name = "dart",
    about = "Robust unsupervised domain adaptation: two-step training, attacks, and audits",
    version
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run seed; defaults to the config's seed list where one applies.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output path; defaults under the config's out_dir or $DART_OUT_ROOT.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train and freeze the non-robust teacher (pipeline step 1).
    Pretrain,
    /// Robustify against a frozen teacher checkpoint (pipeline step 2).
    /// The distillation method needs only target-domain data.
    Robustify {
        /// Teacher checkpoint; required by the dart method.
        #[arg(long, value_name = "FILE")]
        teacher: Option<PathBuf>,
        /// Override the config's step2 method.
        #[arg(long, value_name = "dart|at|trades")]
        method: Option<String>,
    },
    /// Evaluate a model checkpoint under the config's attack list.
    AttackEval {
        /// Model checkpoint to evaluate.
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
    },
    /// Run the pilot study and write its tables; exits 3 when an ordering
    /// verdict fails.
    Pilot {
        /// Pilot suite file; the built-in two-task suite when omitted.
        #[arg(long, value_name = "FILE")]
        suite: Option<PathBuf>,
        /// Seeds to run, comma separated.
        #[arg(long, value_delimiter = ',', value_name = "N,N,...")]
        seeds: Option<Vec<u64>>,
    },
    /// Run every remaining pipeline stage and write the report CSV.
    Report,
    /// Generate the config's synthetic dataset as CSV files.
    GenData,
    /// Run the gradient, attack-soundness, and invariant self-checks.
    Check,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_VALIDATION,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

fn classify(e: &anyhow::Error) -> u8 {
    if e.is::<Usage>() || e.is::<ConfigError>() {
        return EXIT_VALIDATION;
    }
    if let Some(p) = e.downcast_ref::<PipelineError>() {
        if matches!(p, PipelineError::Invalid { .. }) {
            return EXIT_VALIDATION;
        }
    }
    EXIT_RUNTIME
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match &cli.cmd {
        Cmd::Pretrain => cmd_pretrain(&cli.common),
        Cmd::Robustify { teacher, method } => {
            cmd_robustify(&cli.common, teacher.as_deref(), method.as_deref())
        }
        Cmd::AttackEval { model } => cmd_attack_eval(&cli.common, model),
        Cmd::Pilot { suite, seeds } => cmd_pilot(&cli.common, suite.as_deref(), seeds.as_deref()),
        Cmd::Report => cmd_report(&cli.common),
        Cmd::GenData => cmd_gen_data(&cli.common),
        Cmd::Check => cmd_check(&cli.common),
    }
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| usage("--config <FILE> is required for this command"))?;
    Ok(parse_config(path)?)
}

fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
}

/// Run directory: `--out`, else the config's `out_dir`, else
/// `$DART_OUT_ROOT/<experiment name>`.
fn run_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| out_root().join(&cfg.name))
}

fn seeds_to_run(common: &Common, cfg: &ExperimentConfig) -> Vec<u64> {
    match common.seed {
        Some(seed) => vec![seed],
        None => cfg.seeds.clone(),
    }
}

fn cmd_pretrain(common: &Common) -> anyhow::Result<u8> {
    let cfg = load_config(common)?;
    let dir = run_dir(common, &cfg);
    for seed in seeds_to_run(common, &cfg) {
        let (teacher, path) = pretrain_seed(&cfg, seed, &dir)?;
        println!(
            "seed {seed}: teacher frozen (checksum {:016x}) at {}",
            teacher.param_checksum(),
            path.display()
        );
    }
    Ok(0)
}

fn cmd_robustify(
    common: &Common,
    teacher: Option<&Path>,
    method: Option<&str>,
) -> anyhow::Result<u8> {
    let mut cfg = load_config(common)?;
    if let Some(name) = method {
        cfg.method = match name {
            "dart" => RobustMethod::Dart,
            "at" => RobustMethod::At,
            "trades" => RobustMethod::Trades,
            other => return Err(usage(format!("--method must be dart, at, or trades, got `{other}`"))),
        };
    }
    let seed = common.seed.unwrap_or_else(|| cfg.seeds[0]);
    let out = match common.out.clone() {
        Some(path) => path,
        None => {
            let dir = cfg
                .out_dir
                .clone()
                .unwrap_or_else(|| out_root().join(&cfg.name));
            student_checkpoint_path(&dir, seed)
        }
    };
    let student = robustify_from_checkpoint(&cfg, teacher, seed, &out)?;
    println!(
        "seed {seed}: {} student (checksum {:016x}) at {}",
        cfg.method.name(),
        student.param_checksum(),
        out.display()
    );
    Ok(0)
}

fn cmd_attack_eval(common: &Common, model_path: &Path) -> anyhow::Result<u8> {
    let cfg = load_config(common)?;
    let seed = common.seed.unwrap_or_else(|| cfg.seeds[0]);
    let (model, provenance) = Model::load_checkpoint(model_path)?;
    let dataset = load_dataset(&cfg.dataset, derived_data_seed(&cfg, seed))?;
    let attacks = resolved_eval_attacks(&cfg, seed);
    let report = evaluate(&model, &dataset, &attacks)?;

    println!(
        "model {} ({}, seed {})",
        model_path.display(),
        provenance.step,
        provenance.seed
    );
    println!("clean accuracy {:.6}", report.clean_accuracy);
    let mut csv = String::from("attack,eps,clean_acc,adv_acc,prop1_gap,prop1_holds\n");
    for (row, attack) in report.attacks.iter().zip(&attacks) {
        let audit = audit_prop1(&model, &dataset, attack)?;
        println!(
            "{} eps {:.6}: adversarial accuracy {:.6} (decomposition gap {:.6})",
            attack.method.name(),
            attack.epsilon,
            row.adv_accuracy,
            audit.gap
        );
        csv.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            attack.method.name(),
            attack.epsilon,
            report.clean_accuracy,
            row.adv_accuracy,
            audit.gap,
            audit.holds
        ));
    }
    if let Some(out) = &common.out {
        write_file(out, &csv)?;
        println!("rows written to {}", out.display());
    }
    Ok(0)
}

fn cmd_pilot(
    common: &Common,
    suite: Option<&Path>,
    seeds: Option<&[u64]>,
) -> anyhow::Result<u8> {
    let tasks = match suite {
        Some(path) => load_suite(path)?,
        None => default_suite(),
    };
    let seeds: Vec<u64> = match (seeds, common.seed) {
        (Some(list), _) => list.to_vec(),
        (None, Some(one)) => vec![one],
        (None, None) => (0..5).collect(),
    };
    let report = run_pilot(&tasks, &seeds)?;
    let dir = common.out.clone().unwrap_or_else(|| out_root().join("pilot"));
    report.write_to(&dir)?;
    print!("{}", report.summary_text());
    println!("tables written to {}", dir.display());
    if !report.audits_all_hold() {
        eprintln!("error: a bound audit failed; the run tables are inconsistent");
        return Ok(EXIT_RUNTIME);
    }
    if !report.all_verdicts_pass() {
        return Ok(EXIT_VERDICT);
    }
    Ok(0)
}

fn cmd_report(common: &Common) -> anyhow::Result<u8> {
    let cfg = load_config(common)?;
    let dir = run_dir(common, &cfg);
    let manifest = run_pipeline(&cfg, &dir)?;
    let report_path = dir.join(REPORT_FILE);
    print!("{}", std::fs::read_to_string(&report_path)?);
    println!(
        "run {} complete over {} seed(s); report at {}",
        manifest.name,
        manifest.seeds.len(),
        report_path.display()
    );
    Ok(0)
}

fn cmd_gen_data(common: &Common) -> anyhow::Result<u8> {
    let cfg = load_config(common)?;
    let spec: &DatasetSpec = match &cfg.dataset {
        dart_core::config::DatasetSource::Spec(spec) => spec,
        dart_core::config::DatasetSource::Csv { .. } => {
            return Err(usage("gen-data needs a synthetic dataset block, not csv"))
        }
    };
    let seed = common.seed.unwrap_or_else(|| cfg.seeds[0]);
    let dataset = spec.generate(derived_data_seed(&cfg, seed))?;
    let dir = common
        .out
        .clone()
        .unwrap_or_else(|| run_dir(common, &cfg).join(format!("data-seed-{seed}")));
    save_domain_csv(&dataset, &dir)?;
    println!(
        "wrote {} source and {} target rows under {}",
        dataset.n_source(),
        dataset.n_target(),
        dir.display()
    );
    Ok(0)
}

fn cmd_check(common: &Common) -> anyhow::Result<u8> {
    let results = checks::run_all(common.seed.unwrap_or(0));
    print!("{}", checks::render_text(&results));
    if let Some(out) = &common.out {
        write_file(out, &checks::render_text(&results))?;
    }
    if checks::all_passed(&results) {
        Ok(0)
    } else {
        Ok(EXIT_RUNTIME)
    }
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}
