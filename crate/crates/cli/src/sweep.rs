//! Grid of training regimes × denoising on/off, one directory per cell keyed
//! by the cell's config hash so interrupted sweeps resume where they stopped.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsrobust::trainers::{Regime, TrainReport};

use crate::commands::{run_evaluate, run_train, write_json, Log, CHECKPOINT_FILE, REPORT_FILE};
use crate::config::ExperimentConfig;
use crate::error::{io_err, CliError, CliResult};

pub const CELL_FILE: &str = "cell.json";
pub const TABLE_FILE: &str = "sweep_table.csv";
const MISSING: &str = "-";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GnlmChoice {
    Off,
    On,
    Both,
}

impl GnlmChoice {
    fn values(self) -> &'static [bool] {
        match self {
            GnlmChoice::Off => &[false],
            GnlmChoice::On => &[true],
            GnlmChoice::Both => &[false, true],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustCell {
    pub attack: String,
    pub epsilon: f64,
    pub accuracy: f64,
}

/// One table row. Accuracies are absent for cells that diverged or failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub regime: Regime,
    pub beta: Option<f64>,
    pub gnlm: bool,
    pub config_hash: String,
    pub train_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub robust: Vec<RobustCell>,
    pub status: String,
}

pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub resumed: usize,
    pub table: PathBuf,
}

/// Cell configs in table order: standard, adversarial, then TRADES per beta,
/// each with the requested denoising settings.
pub fn cell_configs(base: &ExperimentConfig, betas: &[f64], gnlm: GnlmChoice) -> Vec<ExperimentConfig> {
    let mut regimes: Vec<(Regime, Option<f64>)> = vec![(Regime::Standard, None), (Regime::Adversarial, None)];
    regimes.extend(betas.iter().map(|&b| (Regime::Trades, Some(b))));
    let mut cells = Vec::new();
    for (regime, beta) in regimes {
        for &use_gnlm in gnlm.values() {
            let mut cfg = base.clone();
            cfg.train.regime = regime;
            if let Some(b) = beta {
                cfg.train.trades_beta = b;
            }
            cfg.model.use_gnlm = use_gnlm;
            cfg.out_dir = PathBuf::new();
            let hash = cfg.hash();
            cfg.out_dir = base.out_dir.join("cells").join(&hash[..16]);
            cells.push(cfg);
        }
    }
    cells
}

pub fn run_sweep(base: &ExperimentConfig, betas: &[f64], gnlm: GnlmChoice, log: Log) -> CliResult<SweepSummary> {
    if betas.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
        return Err(CliError::Usage("betas must be finite and non-negative".into()));
    }
    let cells = cell_configs(base, betas, gnlm);
    let mut rows = Vec::with_capacity(cells.len());
    let mut resumed = 0;
    for (i, cfg) in cells.iter().enumerate() {
        let beta = (cfg.train.regime == Regime::Trades).then_some(cfg.train.trades_beta);
        let label = format!(
            "{}{} gnlm={}",
            cfg.train.regime.as_str(),
            beta.map_or(String::new(), |b| format!(" beta={b}")),
            if cfg.model.use_gnlm { "on" } else { "off" }
        );
        let cell_path = cfg.out_dir.join(CELL_FILE);
        if let Some(row) = read_cell(&cell_path) {
            log.info(format!("[{}/{}] {label}: resumed", i + 1, cells.len()));
            resumed += 1;
            rows.push(row);
            continue;
        }
        log.info(format!("[{}/{}] {label}", i + 1, cells.len()));
        let row = match run_cell(cfg, beta, log) {
            Ok(row) => {
                write_json(&cell_path, &row)?;
                row
            }
            // Failed cells are not persisted so a re-run retries them.
            Err(e) => {
                log.info(format!("  cell failed: {e}"));
                SweepRow {
                    regime: cfg.train.regime,
                    beta,
                    gnlm: cfg.model.use_gnlm,
                    config_hash: cfg.hash(),
                    train_accuracy: None,
                    test_accuracy: None,
                    robust: Vec::new(),
                    status: format!("error: {e}"),
                }
            }
        };
        rows.push(row);
    }
    fs::create_dir_all(&base.out_dir).map_err(|e| io_err(&base.out_dir, e))?;
    let table = base.out_dir.join(TABLE_FILE);
    fs::write(&table, render_table(&rows, base)).map_err(|e| io_err(&table, e))?;
    Ok(SweepSummary { rows, resumed, table })
}

fn read_cell(path: &Path) -> Option<SweepRow> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

fn run_cell(cfg: &ExperimentConfig, beta: Option<f64>, log: Log) -> CliResult<SweepRow> {
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    let report_path = cfg.out_dir.join(REPORT_FILE);
    let existing: Option<TrainReport> = fs::read_to_string(&report_path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .filter(|_| ckpt.exists());
    let report = match existing {
        Some(r) => r,
        None => run_train(cfg, log)?.report,
    };
    let mut row = SweepRow {
        regime: cfg.train.regime,
        beta,
        gnlm: cfg.model.use_gnlm,
        config_hash: cfg.hash(),
        train_accuracy: None,
        test_accuracy: None,
        robust: Vec::new(),
        status: "not_converged".into(),
    };
    if !report.converged {
        return Ok(row);
    }
    let eval = run_evaluate(cfg, &ckpt, log)?;
    row.train_accuracy = Some(eval.train_accuracy);
    row.test_accuracy = Some(eval.test_accuracy);
    row.robust = eval
        .curves
        .iter()
        .filter_map(|c| {
            c.points.last().map(|p| RobustCell {
                attack: c.attack.clone(),
                epsilon: p.epsilon,
                accuracy: p.robust_accuracy,
            })
        })
        .collect();
    row.status = "ok".into();
    Ok(row)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(MISSING.to_string(), |a| format!("{a:.6}"))
}

/// CSV with the clean-accuracy table's columns followed by robust accuracy of
/// each configured attack at the largest ε.
pub fn render_table(rows: &[SweepRow], base: &ExperimentConfig) -> String {
    let max_eps = base.eval.epsilon_grid.last().copied().unwrap_or(0.0);
    let attacks: Vec<String> = base.eval.attacks.iter().map(|a| a.name().to_string()).collect();
    let mut out = String::from("defense,inv_lambda,denoising,train_accuracy,test_accuracy");
    for a in &attacks {
        out.push_str(&format!(",robust_{a}@{max_eps}"));
    }
    out.push_str(",status\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}",
            r.regime.as_str(),
            r.beta.map_or(MISSING.to_string(), |b| b.to_string()),
            if r.gnlm { "gnlm" } else { MISSING },
            fmt_opt(r.train_accuracy),
            fmt_opt(r.test_accuracy)
        ));
        for a in &attacks {
            let acc = r.robust.iter().find(|c| &c.attack == a).map(|c| c.accuracy);
            out.push(',');
            out.push_str(&fmt_opt(acc));
        }
        let status: String = r
            .status
            .chars()
            .map(|c| if matches!(c, ',' | '\n' | '\r') { ' ' } else { c })
            .collect();
        out.push(',');
        out.push_str(&status);
        out.push('\n');
    }
    out
}
