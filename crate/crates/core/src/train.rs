//! Training loop and checkpoint evaluation.
//!
//! One optimizer step: take the next shuffled batch, flip each input with
//! its own pair of uniform draws, run the network, compute the composite
//! loss (or MSE alone), backpropagate and apply AdamW at the scheduled
//! learning rate. After every epoch the train split is re-scored without
//! augmentation and the validation MAE decides which parameters are kept.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{
    make_batches, read_tile, Manifest, SarTilePair, Split, DEFAULT_MAX_MAGNITUDE,
};
use crate::error::{Error, Result};
use crate::losses::{composite_loss_with, PairLabels, RankingOptions, DEFAULT_MARGIN};
use crate::metrics::{evaluate_predictions, MetricsReport};
use crate::model::{backward, forward, load_checkpoint, predict, save_checkpoint, ModelParams};
use crate::optim::{adamw_step, lr_at_step, AdamWConfig, AdamWState, ScheduleConfig};
use crate::preprocess::{
    flip_decision, prepare_input, ModelInput, Normalization, PreprocessConfig,
};
use crate::rng;

/// How the head bias starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadBiasInit {
    #[default]
    Zero,
    /// Mean train-split magnitude.
    TrainMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub margin: f64,
    pub ranking_enabled: bool,
    pub exclude_ties: bool,
    pub pair_labels: PairLabels,
    pub seed: u64,
    pub flip_prob: f64,
    pub max_magnitude: f64,
    pub head_bias_init: HeadBiasInit,
    pub adamw: AdamWConfig,
    pub normalize: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            peak_lr: 1e-4,
            warmup_fraction: 0.1,
            margin: DEFAULT_MARGIN,
            ranking_enabled: true,
            exclude_ties: false,
            pair_labels: PairLabels::GroundTruth,
            seed: 0,
            flip_prob: 0.5,
            max_magnitude: DEFAULT_MAX_MAGNITUDE,
            head_bias_init: HeadBiasInit::Zero,
            adamw: AdamWConfig::default(),
            normalize: Normalization::TrainStats,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 || (self.ranking_enabled && self.batch_size < 2) {
            return Err(Error::Config(format!(
                "batch size {} too small for this loss",
                self.batch_size
            )));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.max_magnitude > 0.0) {
            return Err(Error::Config("max_magnitude must be positive".into()));
        }
        self.preprocess().validate()
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            flip_prob: self.flip_prob,
            normalize: self.normalize,
            ..Default::default()
        }
    }

    pub fn ranking_options(&self) -> Option<RankingOptions> {
        self.ranking_enabled.then_some(RankingOptions {
            margin: self.margin,
            exclude_ties: self.exclude_ties,
            labels: self.pair_labels,
        })
    }

    pub fn loss_name(&self) -> &'static str {
        if self.ranking_enabled {
            "mse+rank"
        } else {
            "mse"
        }
    }

    /// Stable short hash of the full configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// One split decoded and run through the deterministic preprocessing chain.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub ids: Vec<String>,
    pub inputs: Vec<ModelInput>,
    pub labels: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

pub fn load_split(
    manifest: &Manifest,
    split: Split,
    cfg: &PreprocessConfig,
) -> Result<LoadedSplit> {
    let mut out = LoadedSplit {
        ids: Vec::new(),
        inputs: Vec::new(),
        labels: Vec::new(),
        height: 0,
        width: 0,
    };
    for r in manifest.records_in(split) {
        let pair = SarTilePair::new(
            read_tile(&manifest.resolve(&r.pre_path))?,
            read_tile(&manifest.resolve(&r.post_path))?,
        )?;
        let input = prepare_input(&pair, manifest.stats.as_deref(), cfg)?;
        if out.inputs.is_empty() {
            out.height = input.height();
            out.width = input.width();
        } else if (input.height(), input.width()) != (out.height, out.width) {
            return Err(Error::Shape(format!(
                "sample {} is {}x{}, split uses {}x{}",
                r.id,
                input.height(),
                input.width(),
                out.height,
                out.width
            )));
        }
        out.ids.push(r.id.clone());
        out.inputs.push(input);
        out.labels.push(r.magnitude);
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{split} split")));
    }
    Ok(out)
}

fn gather(inputs: &[&ModelInput]) -> Vec<f32> {
    let mut buf = Vec::with_capacity(inputs.iter().map(|i| i.data().len()).sum());
    for i in inputs {
        buf.extend_from_slice(i.data());
    }
    buf
}

const EVAL_CHUNK: usize = 64;

/// Raw (unclamped) predictions for every sample of a split, in split order.
pub fn predict_split(params: &ModelParams<f32>, split: &LoadedSplit) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(split.len());
    for chunk in split.inputs.chunks(EVAL_CHUNK) {
        let refs: Vec<&ModelInput> = chunk.iter().collect();
        let preds = predict(
            params,
            &gather(&refs),
            chunk.len(),
            split.height,
            split.width,
        )?;
        out.extend(preds.iter().map(|p| *p as f64));
    }
    Ok(out)
}

/// Metrics on predictions clamped to `[0, max_magnitude]`.
pub fn evaluate_params(
    params: &ModelParams<f32>,
    split: &LoadedSplit,
    max_magnitude: f64,
    config_digest: &str,
) -> Result<MetricsReport> {
    let preds: Vec<f64> = predict_split(params, split)?
        .into_iter()
        .map(|p| p.clamp(0.0, max_magnitude))
        .collect();
    evaluate_predictions(&preds, &split.labels, config_digest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub train_mse: f64,
    pub train_ranking: f64,
    pub train_total: f64,
    pub val_mae: Option<f64>,
    pub lr_last: f64,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_mse,train_ranking,train_total,val_mae,lr_last";

pub fn epoch_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for l in logs {
        let val = l.val_mae.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            l.epoch, l.train_mse, l.train_ranking, l.train_total, val, l.lr_last
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub config: TrainConfig,
    /// Parameters of the epoch with the lowest validation MAE (the last epoch
    /// when there is no validation split).
    pub params: ModelParams<f32>,
    pub best_epoch: u32,
    pub best_val_mae: Option<f64>,
    pub epochs: Vec<EpochLog>,
    pub total_steps: u64,
    pub height: usize,
    pub width: usize,
}

impl TrainOutcome {
    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "config": self.config,
            "config_digest": self.config.digest(),
            "best_epoch": self.best_epoch,
            "best_val_mae": self.best_val_mae,
            "epochs": self.config.epochs,
            "total_steps": self.total_steps,
            "input_height": self.height,
            "input_width": self.width,
        })
    }

    /// Writes `checkpoint.qrnk` and `epochs.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        let ckpt = dir.join("checkpoint.qrnk");
        save_checkpoint(&self.params, &self.metadata(), &ckpt)?;
        let csv = dir.join("epochs.csv");
        fs::write(&csv, epoch_csv(&self.epochs)).map_err(|e| Error::storage(&csv, e))?;
        Ok((ckpt, csv))
    }
}

struct LossTotals {
    mse: f64,
    ranking: f64,
    total: f64,
}

/// Mean loss components over the given batches, without augmentation.
fn score_batches(
    params: &ModelParams<f32>,
    data: &LoadedSplit,
    positions: &[Vec<usize>],
    ranking: Option<&RankingOptions>,
) -> Result<LossTotals> {
    let mut acc = LossTotals {
        mse: 0.0,
        ranking: 0.0,
        total: 0.0,
    };
    for batch in positions {
        let refs: Vec<&ModelInput> = batch.iter().map(|&i| &data.inputs[i]).collect();
        let preds = predict(params, &gather(&refs), batch.len(), data.height, data.width)?;
        let targets: Vec<f32> = batch.iter().map(|&i| data.labels[i] as f32).collect();
        let out = composite_loss_with(&preds, &targets, ranking)?;
        acc.mse += out.mse as f64;
        acc.ranking += out.ranking as f64;
        acc.total += out.total as f64;
    }
    let n = positions.len().max(1) as f64;
    Ok(LossTotals {
        mse: acc.mse / n,
        ranking: acc.ranking / n,
        total: acc.total / n,
    })
}

/// Trains on already-loaded splits.
pub fn train_loaded(
    config: &TrainConfig,
    manifest: &Manifest,
    train: &LoadedSplit,
    val: Option<&LoadedSplit>,
) -> Result<TrainOutcome> {
    config.validate()?;
    manifest.check_magnitudes(config.max_magnitude)?;

    // Map manifest record indices onto positions in the loaded split.
    let train_records: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if train_records.len() != train.len() {
        return Err(Error::Shape(
            "loaded train split does not match manifest".into(),
        ));
    }
    let position = |record: usize| train_records.binary_search(&record).expect("train record");

    let ranking = config.ranking_options();
    let seed = config.seed;
    let batches_per_epoch = make_batches(
        manifest,
        Split::Train,
        config.batch_size,
        seed,
        0,
        config.ranking_enabled,
    )?
    .batches
    .len() as u64;
    let total_steps = batches_per_epoch * config.epochs as u64;
    let warmup = ((total_steps as f64) * config.warmup_fraction).ceil() as u64;
    let schedule = ScheduleConfig {
        peak_lr: config.peak_lr,
        total_steps,
        warmup_steps: warmup,
    };
    schedule.validate()?;

    let mut params = ModelParams::<f32>::init(seed);
    if config.head_bias_init == HeadBiasInit::TrainMean {
        let mean = train.labels.iter().sum::<f64>() / train.len() as f64;
        params.get_mut("head.b").expect("head bias").data[0] = mean as f32;
    }
    let mut state = AdamWState::<f32>::new(config.adamw);
    let mut aug = rng::stream(seed, "train/augment");
    let digest = config.digest();

    let mut logs = Vec::with_capacity(config.epochs as usize);
    let mut best: Option<(f64, u32, ModelParams<f32>)> = None;
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let plan = make_batches(
            manifest,
            Split::Train,
            config.batch_size,
            seed,
            epoch as u64,
            config.ranking_enabled,
        )?;
        let positions: Vec<Vec<usize>> = plan
            .batches
            .iter()
            .map(|b| b.iter().map(|&r| position(r)).collect())
            .collect();
        let mut lr = 0.0;
        for batch in &positions {
            let flipped: Vec<ModelInput> = batch
                .iter()
                .map(|&i| {
                    let draws = (aug.gen::<f64>(), aug.gen::<f64>());
                    let (h, v) = flip_decision(draws, config.flip_prob);
                    train.inputs[i].flipped(h, v)
                })
                .collect();
            let refs: Vec<&ModelInput> = flipped.iter().collect();
            let (preds, trace) = forward(
                &params,
                &gather(&refs),
                batch.len(),
                train.height,
                train.width,
            )?;
            let targets: Vec<f32> = batch.iter().map(|&i| train.labels[i] as f32).collect();
            let loss = composite_loss_with(&preds, &targets, ranking.as_ref())?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    step,
                    detail: format!(
                        "mse={} ranking={} total={}",
                        loss.mse, loss.ranking, loss.total
                    ),
                });
            }
            let grads = backward(&params, &trace, &loss.grad_wrt_predictions)?;
            lr = lr_at_step(&schedule, step)?;
            adamw_step(&mut params, &grads, &mut state, lr)?;
            step += 1;
        }

        let scored = score_batches(&params, train, &positions, ranking.as_ref())?;
        if !scored.total.is_finite() {
            return Err(Error::NonFinite {
                what: "epoch loss",
                step,
                detail: format!("mse={} ranking={}", scored.mse, scored.ranking),
            });
        }
        let val_mae = match val {
            Some(v) => Some(evaluate_params(&params, v, config.max_magnitude, &digest)?.mae),
            None => None,
        };
        log::info!(
            "epoch {}/{} [{}] mse={:.4} rank={:.4} val_mae={}",
            epoch + 1,
            config.epochs,
            config.loss_name(),
            scored.mse,
            scored.ranking,
            val_mae.map_or("-".into(), |v| format!("{v:.4}"))
        );
        logs.push(EpochLog {
            epoch: epoch + 1,
            train_mse: scored.mse,
            train_ranking: scored.ranking,
            train_total: scored.total,
            val_mae,
            lr_last: lr,
        });

        // Without a validation split the last epoch wins; with one, the
        // earliest epoch with the lowest val MAE.
        let better = match (&best, val_mae) {
            (Some((b, _, _)), Some(v)) => v < *b,
            _ => true,
        };
        if better {
            best = Some((val_mae.unwrap_or(f64::NAN), epoch + 1, params.clone()));
        }
    }

    let (score, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        config: config.clone(),
        params: best_params,
        best_epoch,
        best_val_mae: score.is_finite().then_some(score),
        epochs: logs,
        total_steps,
        height: train.height,
        width: train.width,
    })
}

/// Loads the train and validation splits and runs [`train_loaded`].
pub fn train(config: &TrainConfig, manifest: &Manifest) -> Result<TrainOutcome> {
    config.validate()?;
    let pre = config.preprocess();
    let train = load_split(manifest, Split::Train, &pre)?;
    let val = if manifest.records_in(Split::Val).next().is_some() {
        Some(load_split(manifest, Split::Val, &pre)?)
    } else {
        None
    };
    train_loaded(config, manifest, &train, val.as_ref())
}

/// Training configuration stored in a checkpoint's metadata.
pub fn config_from_metadata(meta: &serde_json::Value) -> Result<TrainConfig> {
    let cfg = meta
        .get("config")
        .ok_or_else(|| Error::Config("checkpoint metadata has no training config".into()))?;
    Ok(serde_json::from_value(cfg.clone())?)
}

/// Scores a saved checkpoint on one split of a manifest. No augmentation,
/// no shuffling.
pub fn evaluate(checkpoint: &Path, manifest: &Manifest, split: Split) -> Result<MetricsReport> {
    let (params, meta) = load_checkpoint(checkpoint)?;
    let config = config_from_metadata(&meta)?;
    let data = load_split(manifest, split, &config.preprocess())?;
    let shape = (
        meta.get("input_height").and_then(|v| v.as_u64()),
        meta.get("input_width").and_then(|v| v.as_u64()),
    );
    if let (Some(h), Some(w)) = shape {
        if (h as usize, w as usize) != (data.height, data.width) {
            return Err(Error::Shape(format!(
                "checkpoint trained on {h}x{w} inputs, split is {}x{}",
                data.height, data.width
            )));
        }
    }
    evaluate_params(&params, &data, config.max_magnitude, &config.digest())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.epochs, 10);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.peak_lr, 1e-4);
        assert_eq!(c.warmup_fraction, 0.1);
        assert_eq!(c.margin, 0.02);
        assert_eq!(c.flip_prob, 0.5);
        assert_eq!(c.max_magnitude, 10.0);
    }

    #[test]
    fn validation() {
        let bad = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let ok = TrainConfig {
            batch_size: 1,
            ranking_enabled: false,
            ..Default::default()
        };
        assert!(ok.validate().is_ok());
        let bad = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn digest_tracks_config() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            ranking_enabled: false,
            ..Default::default()
        };
        assert_eq!(a.digest(), TrainConfig::default().digest());
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 16);
    }

    #[test]
    fn csv_layout() {
        let logs = vec![EpochLog {
            epoch: 1,
            train_mse: 0.5,
            train_ranking: 0.0,
            train_total: 0.5,
            val_mae: None,
            lr_last: 1e-4,
        }];
        assert_eq!(
            epoch_csv(&logs),
            format!("{EPOCH_CSV_HEADER}\n1,0.5,0,0.5,,0.0001\n")
        );
    }
}
