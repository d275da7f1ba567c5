use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use quakerank::ablation::{run_ablation, AblationRun};
use quakerank::dataset::{load_manifest, Manifest, Split};
use quakerank::gradcheck::{gradcheck_with, GradcheckOptions, Precision};
use quakerank::losses::PairLabels;
use quakerank::metrics::MetricsReport;
use quakerank::model::flops_estimate;
use quakerank::report::{
    load_run_records, reserve_run_id, unix_ms, write_run_record, ComparisonTable, RunRecord,
    RUNS_ENV,
};
use quakerank::synthgen::{gen_dataset, oracle_baseline, SynthConfig};
use quakerank::train::{
    evaluate, evaluate_params, load_split, train_loaded, HeadBiasInit, TrainConfig, TrainOutcome,
};

#[derive(Parser)]
#[command(
    name = "quakerank",
    version,
    about = "Ranking-augmented magnitude regression on SAR tile pairs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train one model and record the run.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Train both loss arms over several seeds and print the comparison table.
    Ablation(AblationArgs),
    /// Build the comparison table from recorded runs.
    Report(ReportArgs),
    /// Finite-difference check of the backward pass.
    Gradcheck(GradcheckArgs),
    /// Per-layer FLOPs of the reference model.
    Flops(FlopsArgs),
    /// Fit and score the diff-energy baseline.
    Oracle(DataArg),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    tile_size: usize,
    #[arg(long, default_value_t = 512)]
    n_train: usize,
    #[arg(long, default_value_t = 128)]
    n_val: usize,
    #[arg(long, default_value_t = 128)]
    n_test: usize,
    #[arg(long, default_value_t = 6)]
    n_blobs: usize,
    #[arg(long, default_value_t = 0.25)]
    vh_ratio: f64,
    #[arg(long, default_value_t = 0.6)]
    deform_amp_max: f64,
    #[arg(long, default_value_t = 1)]
    speckle_looks: u32,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    #[value(name = "mse")]
    Mse,
    #[value(name = "mse+rank")]
    MseRank,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PairLabelArg {
    Labels,
    Predictions,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BiasInitArg {
    Zero,
    TrainMean,
}

#[derive(Args, Clone)]
struct RecipeArgs {
    #[arg(long, default_value_t = 0.02)]
    margin: f64,
    #[arg(long, default_value_t = 10)]
    epochs: u32,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    warmup: f64,
    #[arg(long, default_value_t = 0.5)]
    flip_prob: f64,
    #[arg(long, value_enum, default_value_t = BiasInitArg::Zero)]
    head_bias_init: BiasInitArg,
    /// Drop label-tied pairs instead of treating them as y = +1.
    #[arg(long)]
    exclude_ties: bool,
    /// Debug only: derive pair labels from the predictions.
    #[arg(long, value_enum, default_value_t = PairLabelArg::Labels, hide = true)]
    pair_labels: PairLabelArg,
}

impl RecipeArgs {
    fn config(&self, ranking_enabled: bool, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            peak_lr: self.lr,
            warmup_fraction: self.warmup,
            margin: self.margin,
            ranking_enabled,
            exclude_ties: self.exclude_ties,
            pair_labels: match self.pair_labels {
                PairLabelArg::Labels => PairLabels::GroundTruth,
                PairLabelArg::Predictions => PairLabels::Predictions,
            },
            seed,
            flip_prob: self.flip_prob,
            head_bias_init: match self.head_bias_init {
                BiasInitArg::Zero => HeadBiasInit::Zero,
                BiasInitArg::TrainMean => HeadBiasInit::TrainMean,
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = LossArg::MseRank)]
    loss: LossArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for the checkpoint and epoch log; defaults to `<runs>/<run_id>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = RUNS_ENV, default_value = "runs")]
    runs: PathBuf,
    #[command(flatten)]
    recipe: RecipeArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    #[arg(long, env = RUNS_ENV, default_value = "runs")]
    runs: PathBuf,
    #[command(flatten)]
    recipe: RecipeArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, env = RUNS_ENV, default_value = "runs")]
    runs: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    Float32,
    Float64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Float64)]
    precision: PrecisionArg,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, default_value_t = 32)]
    size: usize,
}

#[derive(Args)]
struct DataArg {
    #[arg(long)]
    data: PathBuf,
}

/// `--data` may name the dataset directory or its manifest file.
fn open_manifest(data: &Path) -> Result<Manifest> {
    let path = if data.is_dir() {
        data.join("manifest.jsonl")
    } else {
        data.to_path_buf()
    };
    load_manifest(&path).with_context(|| format!("loading dataset {}", data.display()))
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        tile_size: a.tile_size,
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        n_blobs: a.n_blobs,
        vh_ratio: a.vh_ratio,
        deform_amp_max: a.deform_amp_max,
        speckle_looks: a.speckle_looks,
        seed: a.seed,
        ..SynthConfig::default()
    };
    let manifest = gen_dataset(&cfg, &a.out)?;
    for (split, n) in manifest.split_counts() {
        println!("{split}: {n}");
    }
    if let Some(stats) = &manifest.stats {
        for (name, s) in ["vv", "vh"].iter().zip(stats) {
            println!("{name}: mean {:.4} dB, std {:.4} dB", s.mean_db, s.std_db);
        }
    }
    Ok(())
}

fn record_run(
    runs: &Path,
    run_id: String,
    outcome: &TrainOutcome,
    out_dir: &Path,
    test: MetricsReport,
    started: u128,
) -> quakerank::Result<RunRecord> {
    let (checkpoint_path, epoch_log_path) = outcome.write(out_dir)?;
    let record = RunRecord {
        run_id,
        config_digest: outcome.config.digest(),
        config: outcome.config.clone(),
        metrics: test,
        best_epoch: outcome.best_epoch,
        best_val_mae: outcome.best_val_mae,
        input_height: outcome.height,
        input_width: outcome.width,
        checkpoint_path,
        epoch_log_path,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
    };
    write_run_record(runs, &record)?;
    Ok(record)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let started = unix_ms();
    let manifest = open_manifest(&a.data)?;
    let cfg = a.recipe.config(a.loss == LossArg::MseRank, a.seed);
    cfg.validate()?;
    let pre = cfg.preprocess();
    let train = load_split(&manifest, Split::Train, &pre)?;
    let val = load_split(&manifest, Split::Val, &pre)?;
    let test = load_split(&manifest, Split::Test, &pre)?;
    let outcome = train_loaded(&cfg, &manifest, &train, Some(&val))?;
    let metrics = evaluate_params(&outcome.params, &test, cfg.max_magnitude, &cfg.digest())?;
    let run_id = reserve_run_id(&a.runs, &cfg)?;
    let out = a.out.unwrap_or_else(|| a.runs.join(&run_id));
    let record = record_run(&a.runs, run_id, &outcome, &out, metrics, started)?;
    print_json(&record)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let manifest = open_manifest(&a.data)?;
    let report = evaluate(&a.ckpt, &manifest, a.split)
        .with_context(|| format!("evaluating {}", a.ckpt.display()))?;
    print_json(&report)
}

fn print_table(table: &ComparisonTable) {
    println!("{}", table.to_markdown());
    print!("{}", table.to_csv());
}

fn cmd_ablation(a: AblationArgs) -> Result<()> {
    let manifest = open_manifest(&a.data)?;
    let base = a.recipe.config(true, 0);
    base.validate()?;
    let runs_dir = a.runs.clone();
    // Runs are sequential, so each one starts when the previous one ended.
    let mut started = unix_ms();
    let result = run_ablation(&base, &manifest, &a.seeds, |run: &AblationRun| {
        let cfg = &run.outcome.config;
        let run_id = reserve_run_id(&runs_dir, cfg)?;
        let out = runs_dir.join(&run_id);
        record_run(
            &runs_dir,
            run_id,
            &run.outcome,
            &out,
            run.test.clone(),
            started,
        )?;
        eprintln!(
            "seed {} [{}]: test mae {:.4}",
            cfg.seed,
            cfg.loss_name(),
            run.test.mae
        );
        started = unix_ms();
        Ok(())
    })?;
    print_table(&result.table);
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let records = load_run_records(&a.runs)?;
    if records.is_empty() {
        bail!("no run records in {}", a.runs.display());
    }
    print_table(&ComparisonTable::from_records(&records)?);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let opts = GradcheckOptions {
        precision: match a.precision {
            PrecisionArg::Float32 => Precision::F32,
            PrecisionArg::Float64 => Precision::F64,
        },
        ..Default::default()
    };
    let r = gradcheck_with(a.seed, &opts)?;
    for t in &r.per_tensor {
        eprintln!("{:<8} {:.3e}", t.name, t.max_rel_error);
    }
    eprintln!(
        "{}: max rel error {:.3e} at {}[{}] over {} parameters",
        if r.passed { "pass" } else { "FAIL" },
        r.max_rel_error,
        r.worst_tensor,
        r.worst_index,
        r.params_checked
    );
    print_json(&r)?;
    Ok(r.passed)
}

fn cmd_flops(a: FlopsArgs) -> Result<()> {
    let r = flops_estimate(a.size, a.size)?;
    for l in &r.layers {
        eprintln!("{:<6} {:>10}", l.name, l.flops);
    }
    eprintln!("total  {:>10} ({:.4} MFLOPs)", r.total(), r.mflops());
    print_json(&r)
}

fn cmd_oracle(a: DataArg) -> Result<()> {
    let manifest = open_manifest(&a.data)?;
    let r = oracle_baseline(&manifest)?;
    eprintln!(
        "oracle test mae {:.4} vs constant {:.4}",
        r.test_mae, r.constant_mae
    );
    print_json(&r)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablation(a) => cmd_ablation(a),
        Command::Report(a) => cmd_report(a),
        Command::Gradcheck(a) => match cmd_gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::FAILURE,
            Err(e) => Err(e),
        },
        Command::Flops(a) => cmd_flops(a),
        Command::Oracle(a) => cmd_oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
