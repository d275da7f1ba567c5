//! Decibel conversion, per-channel standardization, paired flip augmentation
//! and pre/post channel stacking.

use serde::{Deserialize, Serialize};

use crate::dataset::{ChannelStats, SarTile, SarTilePair};
use crate::error::{Error, Result};

/// Number of stacked input channels: `[pre-VV, pre-VH, post-VV, post-VH]`.
pub const INPUT_CHANNELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    TrainStats,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub db_floor_eps: f32,
    pub flip_prob: f64,
    pub normalize: Normalization,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            db_floor_eps: 1e-10,
            flip_prob: 0.5,
            normalize: Normalization::TrainStats,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.db_floor_eps > 0.0) {
            return Err(Error::Config(format!(
                "db_floor_eps must be positive, got {}",
                self.db_floor_eps
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip_prob must lie in [0, 1], got {}",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

/// Channel-first `4 × H × W` network input.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ModelInput {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != INPUT_CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "input data length {} is not 4x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "model input contains non-finite values".into(),
            ));
        }
        Ok(ModelInput {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Applies the same flips to every channel.
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> ModelInput {
        let (h, w) = (self.height, self.width);
        let mut out = self.data.clone();
        if horizontal || vertical {
            for c in 0..INPUT_CHANNELS {
                let src = &self.data[c * h * w..(c + 1) * h * w];
                let dst = &mut out[c * h * w..(c + 1) * h * w];
                for y in 0..h {
                    let sy = if vertical { h - 1 - y } else { y };
                    for x in 0..w {
                        let sx = if horizontal { w - 1 - x } else { x };
                        dst[y * w + x] = src[sy * w + sx];
                    }
                }
            }
        }
        ModelInput {
            height: h,
            width: w,
            data: out,
        }
    }
}

#[inline]
pub fn db(x: f32, eps: f32) -> f32 {
    10.0 * x.max(eps).log10()
}

/// `10·log10(max(x, eps))` elementwise.
pub fn to_decibels(x: &[f32], eps: f32) -> Result<Vec<f32>> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    if let Some(v) = x.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!(
            "decibel conversion needs non-negative intensity, got {v}"
        )));
    }
    Ok(x.iter().map(|&v| db(v, eps)).collect())
}

/// Standardizes channel-last data: `(x[.., c] − mean[c]) / std[c]`.
pub fn normalize(x: &[f32], channels: usize, mean: &[f64], std: &[f64]) -> Result<Vec<f32>> {
    if mean.len() != channels || std.len() != channels {
        return Err(Error::Shape(format!(
            "{channels} channels but {} means and {} stds",
            mean.len(),
            std.len()
        )));
    }
    if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Config(format!(
            "channel std must be positive, got {s}"
        )));
    }
    if !x.len().is_multiple_of(channels) {
        return Err(Error::Shape(format!(
            "data length {} not divisible by {channels} channels",
            x.len()
        )));
    }
    let mut out = Vec::with_capacity(x.len());
    for px in x.chunks_exact(channels) {
        for (c, v) in px.iter().enumerate() {
            out.push(((*v as f64 - mean[c]) / std[c]) as f32);
        }
    }
    Ok(out)
}

pub fn flip_tile(tile: &SarTile, horizontal: bool, vertical: bool) -> SarTile {
    let (h, w, c) = (tile.height(), tile.width(), tile.channels());
    let src = tile.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        let sy = if vertical { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if horizontal { w - 1 - x } else { x };
            let base = (sy * w + sx) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    SarTile::new(h, w, c, out).expect("flip preserves tile invariants")
}

/// Horizontal flip iff `draws.0 < p`, vertical iff `draws.1 < p`; both tiles
/// of the pair always receive the same flips.
pub fn random_flips(pair: &SarTilePair, draws: (f64, f64), p: f64) -> SarTilePair {
    let (h, v) = flip_decision(draws, p);
    SarTilePair {
        pre: flip_tile(&pair.pre, h, v),
        post: flip_tile(&pair.post, h, v),
    }
}

pub fn flip_decision(draws: (f64, f64), p: f64) -> (bool, bool) {
    (draws.0 < p, draws.1 < p)
}

fn stack_channels_last(pre: &[f32], post: &[f32], height: usize, width: usize) -> Vec<f32> {
    let n = height * width;
    let mut out = vec![0.0f32; INPUT_CHANNELS * n];
    for i in 0..n {
        out[i] = pre[2 * i];
        out[n + i] = pre[2 * i + 1];
        out[2 * n + i] = post[2 * i];
        out[3 * n + i] = post[2 * i + 1];
    }
    out
}

/// Concatenates the dual-pol pre and post tiles into a `4 × H × W` input.
pub fn stack_pair(pair: &SarTilePair) -> Result<ModelInput> {
    if !pair.pre.same_shape(&pair.post) {
        return Err(Error::Shape("pre and post tiles differ in shape".into()));
    }
    if pair.pre.channels() != 2 {
        return Err(Error::Shape(format!(
            "expected 2 polarization channels, got {}",
            pair.pre.channels()
        )));
    }
    let (h, w) = (pair.pre.height(), pair.pre.width());
    ModelInput::new(
        h,
        w,
        stack_channels_last(pair.pre.data(), pair.post.data(), h, w),
    )
}

/// Inverse of [`stack_pair`]; only valid for inputs holding linear intensities.
pub fn unstack_pair(input: &ModelInput) -> Result<SarTilePair> {
    let (h, w) = (input.height, input.width);
    let n = h * w;
    let interleave =
        |a: &[f32], b: &[f32]| -> Vec<f32> { (0..n).flat_map(|i| [a[i], b[i]]).collect() };
    let pre = SarTile::new(h, w, 2, interleave(input.plane(0), input.plane(1)))?;
    let post = SarTile::new(h, w, 2, interleave(input.plane(2), input.plane(3)))?;
    SarTilePair::new(pre, post)
}

/// Deterministic part of the chain: dB, optional standardization with
/// train-split statistics, stacking. Flips commute with these elementwise
/// steps and are applied later on the stacked input.
pub fn prepare_input(
    pair: &SarTilePair,
    stats: Option<&[ChannelStats]>,
    cfg: &PreprocessConfig,
) -> Result<ModelInput> {
    if !pair.pre.same_shape(&pair.post) || pair.pre.channels() != 2 {
        return Err(Error::Shape("expected matching dual-pol tiles".into()));
    }
    let mut pre = to_decibels(pair.pre.data(), cfg.db_floor_eps)?;
    let mut post = to_decibels(pair.post.data(), cfg.db_floor_eps)?;
    if cfg.normalize == Normalization::TrainStats {
        let stats = stats.ok_or_else(|| {
            Error::Config("normalization requested but manifest has no stats".into())
        })?;
        let mean: Vec<f64> = stats.iter().map(|s| s.mean_db).collect();
        let std: Vec<f64> = stats.iter().map(|s| s.std_db).collect();
        pre = normalize(&pre, 2, &mean, &std)?;
        post = normalize(&post, 2, &mean, &std)?;
    }
    let (h, w) = (pair.pre.height(), pair.pre.width());
    ModelInput::new(h, w, stack_channels_last(&pre, &post, h, w))
}
