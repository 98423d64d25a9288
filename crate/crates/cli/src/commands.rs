//! Subcommand implementations. Each writes its outputs under the configured
//! output directory and returns a summary for the caller to print.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tsrobust::checkpoint::Checkpoint;
use tsrobust::data::{convert_uci_charset, normalize, UciConversion};
use tsrobust::evaluation::{curves_to_csv, parse_curves_csv, robustness_curve, RobustnessCurve};
use tsrobust::model::Classifier;
use tsrobust::trainers::{accuracy, train_with_progress, Regime, TrainReport};

use crate::config::{DatasetSource, ExperimentConfig};
use crate::error::{io_err, CliError, CliResult};
use crate::plot::render_svg;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "train_report.json";
pub const TRAIN_MANIFEST_FILE: &str = "train_manifest.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const EVAL_MANIFEST_FILE: &str = "eval_manifest.json";

/// Progress messages on standard error unless quiet.
#[derive(Debug, Clone, Copy)]
pub struct Log {
    pub quiet: bool,
}

impl Log {
    pub fn info(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub model: u64,
    pub train: u64,
    pub eval: u64,
    pub dataset: Option<u64>,
}

/// Everything needed to rerun a command and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub tool_version: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub dataset_checksum: String,
    pub seeds: Seeds,
    pub checkpoint: Option<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub timings_seconds: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig, dataset_checksum: String) -> Self {
        let dataset_seed = match cfg.dataset {
            DatasetSource::Synthetic { seed, .. } => Some(seed),
            DatasetSource::Jsonl { .. } => None,
        };
        Self {
            format_version: MANIFEST_FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: cfg.clone(),
            config_hash: cfg.hash(),
            dataset_checksum,
            seeds: Seeds {
                model: cfg.seed,
                train: cfg.train.seed,
                eval: cfg.eval.seed,
                dataset: dataset_seed,
            },
            checkpoint: None,
            outputs: Vec::new(),
            timings_seconds: BTreeMap::new(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Consistency(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn cmd_convert(source: &Path, out: &Path, seed: u64) -> CliResult<UciConversion> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    Ok(convert_uci_charset(source, out, seed)?)
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: PathBuf,
}

/// Trains per `cfg` and writes checkpoint, report and manifest. A run that
/// diverges still writes everything; callers decide how to report it.
pub fn run_train(cfg: &ExperimentConfig, log: Log) -> CliResult<TrainOutcome> {
    let started = Instant::now();
    let raw = cfg.load_dataset()?;
    let checksum = raw.checksum();
    let bundle = normalize(&raw)?;
    let mut model = Classifier::build(cfg.model_config(bundle.channels(), bundle.num_classes))?;
    log.info(format!(
        "training {} ({} parameters) on {} examples, {} epochs",
        cfg.train.regime.as_str(),
        model.num_parameters(),
        bundle.train.len(),
        cfg.train.epochs
    ));
    let report = train_with_progress(&mut model, &bundle, &cfg.train, &mut |e| {
        let val = e.val_accuracy.map_or("-".to_string(), |v| format!("{v:.4}"));
        log.info(format!(
            "epoch {:>4}  loss {:.6}  train_acc {:.4}  val_acc {val}",
            e.epoch + 1,
            e.train_loss,
            e.train_accuracy
        ));
    })?;

    create_dir(&cfg.out_dir)?;
    let ckpt_path = cfg.out_dir.join(CHECKPOINT_FILE);
    Checkpoint::new(&model, bundle.stats.clone(), checksum.clone()).save(&ckpt_path)?;
    let report_path = cfg.out_dir.join(REPORT_FILE);
    write_json(&report_path, &report)?;
    let mut manifest = RunManifest::new("train", cfg, checksum);
    manifest.checkpoint = Some(ckpt_path.clone());
    manifest.outputs = vec![ckpt_path.clone(), report_path];
    manifest
        .timings_seconds
        .insert("train".into(), started.elapsed().as_secs_f64());
    write_json(&cfg.out_dir.join(TRAIN_MANIFEST_FILE), &manifest)?;
    Ok(TrainOutcome {
        report,
        checkpoint: ckpt_path,
    })
}

pub fn cmd_train(cfg: &ExperimentConfig, log: Log) -> CliResult<TrainReport> {
    let out = run_train(cfg, log)?;
    println!(
        "train_accuracy {:.2}%  test_accuracy {:.2}%",
        100.0 * out.report.final_train_accuracy,
        100.0 * out.report.final_test_accuracy
    );
    if !out.report.converged {
        return Err(CliError::NotConverged(
            out.report.divergence.clone().unwrap_or_else(|| "unknown".into()),
        ));
    }
    Ok(out.report)
}

pub struct EvalOutcome {
    pub curves: Vec<RobustnessCurve>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub csv: PathBuf,
}

/// Evaluates a checkpoint on the test split of the configured dataset, which
/// must be the dataset the checkpoint was trained on.
pub fn run_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, log: Log) -> CliResult<EvalOutcome> {
    let started = Instant::now();
    let ckpt = Checkpoint::load(checkpoint)?;
    let raw = cfg.load_dataset()?;
    let checksum = raw.checksum();
    if checksum != ckpt.dataset_checksum {
        return Err(CliError::ChecksumMismatch {
            expected: ckpt.dataset_checksum,
            actual: checksum,
        });
    }
    let bundle = normalize(&raw)?;
    if bundle.stats != ckpt.normalization {
        return Err(CliError::Consistency(
            "normalization statistics differ from the checkpoint's".into(),
        ));
    }
    let model = ckpt.classifier()?;
    let train_accuracy = accuracy(&model, &bundle.train)?.unwrap_or(0.0);
    let test_accuracy = accuracy(&model, &bundle.test)?.unwrap_or(0.0);

    let n = cfg
        .eval
        .max_examples
        .map_or(bundle.test.len(), |m| m.min(bundle.test.len()));
    log.info(format!(
        "evaluating {} attacks x {} budgets on {n} test examples",
        cfg.eval.attacks.len(),
        cfg.eval.epsilon_grid.len()
    ));
    let curves = robustness_curve(&model, &bundle.test, &cfg.eval)?;
    for c in &curves {
        let accs: Vec<String> = c.points.iter().map(|p| format!("{:.3}", p.robust_accuracy)).collect();
        log.info(format!("{:>9}: {}", c.attack, accs.join(" ")));
    }

    create_dir(&cfg.out_dir)?;
    let csv = cfg.out_dir.join(CURVES_FILE);
    fs::write(&csv, curves_to_csv(&curves)).map_err(|e| io_err(&csv, e))?;
    let mut manifest = RunManifest::new("evaluate", cfg, checksum);
    manifest.checkpoint = Some(checkpoint.to_path_buf());
    manifest.outputs = vec![csv.clone()];
    manifest
        .timings_seconds
        .insert("evaluate".into(), started.elapsed().as_secs_f64());
    write_json(&cfg.out_dir.join(EVAL_MANIFEST_FILE), &manifest)?;
    Ok(EvalOutcome {
        curves,
        train_accuracy,
        test_accuracy,
        csv,
    })
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path, log: Log) -> CliResult<EvalOutcome> {
    let out = run_evaluate(cfg, checkpoint, log)?;
    println!(
        "train_accuracy {:.2}%  test_accuracy {:.2}%  curves {}",
        100.0 * out.train_accuracy,
        100.0 * out.test_accuracy,
        out.csv.display()
    );
    Ok(out)
}

/// Title for a curves CSV written by `evaluate`, from the manifest beside it.
pub fn manifest_title(csv: &Path) -> Option<String> {
    let path = csv.with_file_name(EVAL_MANIFEST_FILE);
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(path).ok()?).ok()?;
    let train = &manifest.config.train;
    let beta = match train.regime {
        Regime::Trades => format!(" 1/lambda={}", train.trades_beta),
        _ => String::new(),
    };
    let gnlm = if manifest.config.model.use_gnlm { "on" } else { "off" };
    Some(format!(
        "{}{beta}, gnlm {gnlm}, seed {}",
        train.regime.as_str(),
        manifest.config.seed
    ))
}

/// Writes one SVG per CSV into `out_dir` (or next to the CSV). The title is
/// `title`, else derived from an evaluation manifest next to the CSV, else
/// the CSV's file stem.
pub fn cmd_plot(csvs: &[PathBuf], out_dir: Option<&Path>, title: Option<&str>) -> CliResult<Vec<PathBuf>> {
    if csvs.is_empty() {
        return Err(CliError::Usage("no CSV files given".into()));
    }
    let mut written = Vec::with_capacity(csvs.len());
    for csv in csvs {
        let text = fs::read_to_string(csv).map_err(|e| io_err(csv, e))?;
        let rows = parse_curves_csv(&text).map_err(|e| CliError::Usage(format!("{}: {e}", csv.display())))?;
        let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("curves");
        let dir = out_dir.map_or_else(
            || csv.parent().unwrap_or(Path::new("")).to_path_buf(),
            Path::to_path_buf,
        );
        if !dir.as_os_str().is_empty() {
            create_dir(&dir)?;
        }
        let path = dir.join(format!("{stem}.svg"));
        let title = title
            .map(str::to_string)
            .or_else(|| manifest_title(csv))
            .unwrap_or_else(|| stem.to_string());
        fs::write(&path, render_svg(&rows, &title)).map_err(|e| io_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
