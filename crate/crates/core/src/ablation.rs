//! With/without-ranking comparison over several seeds.

use crate::dataset::{Manifest, Split};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::report::{ComparisonTable, RunSummary};
use crate::train::{evaluate_params, load_split, train_loaded, TrainConfig, TrainOutcome};

pub const MIN_SEEDS: usize = 3;

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub outcome: TrainOutcome,
    pub test: MetricsReport,
}

impl AblationRun {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            ranking: self.outcome.config.ranking_enabled,
            seed: self.outcome.config.seed,
            height: self.outcome.height,
            width: self.outcome.width,
            metrics: self.test.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub runs: Vec<AblationRun>,
    pub table: ComparisonTable,
}

/// The two arms for one seed: identical except for the ranking flag.
pub fn arm_configs(base: &TrainConfig, seed: u64) -> [TrainConfig; 2] {
    let mk = |ranking_enabled| TrainConfig {
        seed,
        ranking_enabled,
        ..base.clone()
    };
    [mk(false), mk(true)]
}

/// Trains both arms for every seed and scores each selected checkpoint on
/// the test split. `on_run` sees every finished run (for persisting records
/// or progress output).
pub fn run_ablation(
    base: &TrainConfig,
    manifest: &Manifest,
    seeds: &[u64],
    mut on_run: impl FnMut(&AblationRun) -> Result<()>,
) -> Result<AblationResult> {
    if seeds.len() < MIN_SEEDS {
        return Err(Error::Config(format!(
            "ablation needs at least {MIN_SEEDS} seeds, got {}",
            seeds.len()
        )));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(Error::Config("ablation seeds must be distinct".into()));
    }
    let pre = base.preprocess();
    let train = load_split(manifest, Split::Train, &pre)?;
    let val = load_split(manifest, Split::Val, &pre)?;
    let test = load_split(manifest, Split::Test, &pre)?;

    let mut runs = Vec::with_capacity(2 * seeds.len());
    for &seed in seeds {
        for cfg in arm_configs(base, seed) {
            let outcome = train_loaded(&cfg, manifest, &train, Some(&val))?;
            let test_metrics =
                evaluate_params(&outcome.params, &test, cfg.max_magnitude, &cfg.digest())?;
            log::info!(
                "seed {seed} [{}]: test mae {:.4}",
                cfg.loss_name(),
                test_metrics.mae
            );
            let run = AblationRun {
                outcome,
                test: test_metrics,
            };
            on_run(&run)?;
            runs.push(run);
        }
    }
    let summaries: Vec<RunSummary> = runs.iter().map(AblationRun::summary).collect();
    let table = ComparisonTable::build(&summaries)?;
    Ok(AblationResult { runs, table })
}
