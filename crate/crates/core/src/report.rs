//! Run records and the comparison table laid out like a with/without-ranking
//! results table: one row per run, grouped by loss arm, plus a median row
//! per arm.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{median, MetricsReport};
use crate::model::{flops_estimate, PARAM_COUNT};
use crate::train::TrainConfig;

pub const MODEL_NAME: &str = "ref-cnn";
pub const RUNS_ENV: &str = "QUAKERANK_RUNS";

/// Runs directory: `$QUAKERANK_RUNS` if set, else `./runs`.
pub fn default_runs_dir() -> PathBuf {
    std::env::var_os(RUNS_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_digest: String,
    pub config: TrainConfig,
    /// Test-split metrics of the selected checkpoint.
    pub metrics: MetricsReport,
    pub best_epoch: u32,
    pub best_val_mae: Option<f64>,
    pub input_height: usize,
    pub input_width: usize,
    pub checkpoint_path: PathBuf,
    pub epoch_log_path: PathBuf,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

pub fn unix_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

/// Picks an unused id of the form `<arm>-s<seed>-<digest>[-n]` in `runs_dir`.
pub fn reserve_run_id(runs_dir: &Path, config: &TrainConfig) -> Result<String> {
    fs::create_dir_all(runs_dir).map_err(|e| Error::storage(runs_dir, e))?;
    let arm = if config.ranking_enabled {
        "rank"
    } else {
        "mse"
    };
    let stem = format!("{arm}-s{}-{}", config.seed, config.digest());
    for n in 0u32.. {
        let id = if n == 0 {
            stem.clone()
        } else {
            format!("{stem}-{n}")
        };
        let path = runs_dir.join(format!("{id}.json"));
        // create_new makes the reservation atomic across processes.
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => return Ok(id),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::storage(path, e)),
        }
    }
    unreachable!("run id space exhausted")
}

pub fn write_run_record(runs_dir: &Path, record: &RunRecord) -> Result<PathBuf> {
    let path = runs_dir.join(format!("{}.json", record.run_id));
    let mut f = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .open(&path)
        .map_err(|e| Error::storage(&path, e))?;
    let json = serde_json::to_string_pretty(record)?;
    f.write_all(json.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::storage(&path, e))?;
    Ok(path)
}

/// Every parseable `*.json` run record in `runs_dir`, sorted by run id.
pub fn load_run_records(runs_dir: &Path) -> Result<Vec<RunRecord>> {
    let entries = fs::read_dir(runs_dir).map_err(|e| Error::storage(runs_dir, e))?;
    let mut records = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::storage(runs_dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::storage(&path, e))?;
        match serde_json::from_str::<RunRecord>(&text) {
            Ok(r) => records.push(r),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    records.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub params: usize,
    pub mflops: f64,
    pub ranking: bool,
    /// `None` marks the per-arm median row.
    pub seed: Option<u64>,
    pub mae: f64,
    pub pairwise_accuracy: Option<f64>,
    pub kendall_tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<TableRow>,
}

/// Per-run input to [`ComparisonTable::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub ranking: bool,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub metrics: MetricsReport,
}

impl From<&RunRecord> for RunSummary {
    fn from(r: &RunRecord) -> Self {
        RunSummary {
            ranking: r.config.ranking_enabled,
            seed: r.config.seed,
            height: r.input_height,
            width: r.input_width,
            metrics: r.metrics.clone(),
        }
    }
}

pub const CSV_HEADER: &str = "model,params,mflops,l_mr,seed,mae,pairwise_accuracy,kendall_tau";

fn opt_median(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    median(&v)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ComparisonTable {
    /// MSE-only arm first, then the ranking arm; runs sorted by seed inside
    /// each arm, followed by that arm's median row.
    pub fn build(runs: &[RunSummary]) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Empty("run list".into()));
        }
        let mut rows = Vec::new();
        for ranking in [false, true] {
            let mut arm: Vec<&RunSummary> = runs.iter().filter(|r| r.ranking == ranking).collect();
            if arm.is_empty() {
                continue;
            }
            arm.sort_by_key(|r| r.seed);
            let mut mflops = Vec::new();
            for r in &arm {
                let m = flops_estimate(r.height, r.width)?.mflops();
                mflops.push(m);
                rows.push(TableRow {
                    model: MODEL_NAME.into(),
                    params: PARAM_COUNT,
                    mflops: m,
                    ranking,
                    seed: Some(r.seed),
                    mae: r.metrics.mae,
                    pairwise_accuracy: r.metrics.pairwise_accuracy,
                    kendall_tau: r.metrics.kendall_tau,
                });
            }
            let maes: Vec<f64> = arm.iter().map(|r| r.metrics.mae).collect();
            rows.push(TableRow {
                model: MODEL_NAME.into(),
                params: PARAM_COUNT,
                mflops: median(&mflops).unwrap_or(0.0),
                ranking,
                seed: None,
                mae: median(&maes).expect("non-empty arm"),
                pairwise_accuracy: opt_median(arm.iter().map(|r| r.metrics.pairwise_accuracy)),
                kendall_tau: opt_median(arm.iter().map(|r| r.metrics.kendall_tau)),
            });
        }
        Ok(ComparisonTable { rows })
    }

    pub fn from_records(records: &[RunRecord]) -> Result<Self> {
        let runs: Vec<RunSummary> = records.iter().map(RunSummary::from).collect();
        Self::build(&runs)
    }

    pub fn median_row(&self, ranking: bool) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.ranking == ranking && r.seed.is_none())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.model,
                r.params,
                r.mflops,
                if r.ranking { "on" } else { "off" },
                r.seed.map_or("median".to_string(), |s| s.to_string()),
                r.mae,
                fmt_opt(r.pairwise_accuracy),
                fmt_opt(r.kendall_tau),
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => {
                return Err(Error::Manifest {
                    line: 1,
                    msg: format!("expected header {CSV_HEADER:?}"),
                })
            }
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Manifest { line: idx + 1, msg };
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 8 {
                return Err(err(format!("expected 8 columns, got {}", cols.len())));
            }
            let float = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    float(s).map(Some)
                }
            };
            rows.push(TableRow {
                model: cols[0].to_string(),
                params: cols[1].parse().map_err(|e| err(format!("params: {e}")))?,
                mflops: float(cols[2])?,
                ranking: match cols[3] {
                    "on" => true,
                    "off" => false,
                    other => return Err(err(format!("l_mr must be on/off, got {other:?}"))),
                },
                seed: match cols[4] {
                    "median" => None,
                    s => Some(s.parse().map_err(|e| err(format!("seed: {e}")))?),
                },
                mae: float(cols[5])?,
                pairwise_accuracy: opt(cols[6])?,
                kendall_tau: opt(cols[7])?,
            });
        }
        Ok(ComparisonTable { rows })
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| Model | # Params | MFLOPs | L_MR | Seed | MAE | Pair acc. | Kendall tau |\n\
             |---|---:|---:|:---:|---:|---:|---:|---:|\n",
        );
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for r in &self.rows {
            let seed = r.seed.map_or("**median**".to_string(), |s| s.to_string());
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} | {} | {} | {:.4} | {} | {} |",
                r.model,
                r.params,
                r.mflops,
                if r.ranking { "✓" } else { "" },
                seed,
                r.mae,
                cell(r.pairwise_accuracy),
                cell(r.kendall_tau),
            );
        }
        out
    }
}
