//! Synthetic bi-temporal tile pairs.
//!
//! Each sample is a smooth positive background (a sum of Gaussian blobs on a
//! 0.1 floor). The post-event acquisition adds a Gaussian bump whose peak
//! amplitude grows linearly with magnitude, from zero at `mag_min` to
//! `deform_amp_max` at `mag_max`. All four acquisitions (pre/post × VV/VH)
//! carry independent multiplicative Gamma speckle; VH is the VV field scaled
//! by `vh_ratio`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    read_tile, write_manifest, write_tile, ChannelStats, Manifest, Record, Sample, SarTile,
    SarTilePair, Split,
};
use crate::error::{Error, Result};
use crate::preprocess::{db, PreprocessConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub tile_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub mag_min: f64,
    pub mag_max: f64,
    pub n_blobs: usize,
    pub vh_ratio: f64,
    pub deform_amp_max: f64,
    pub speckle_looks: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            tile_size: 32,
            n_train: 512,
            n_val: 128,
            n_test: 128,
            mag_min: 4.0,
            mag_max: 7.0,
            n_blobs: 6,
            vh_ratio: 0.25,
            deform_amp_max: 0.6,
            speckle_looks: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.mag_min < self.mag_max) || !self.mag_min.is_finite() || !self.mag_max.is_finite()
        {
            return bad(format!(
                "need mag_min < mag_max, got {} and {}",
                self.mag_min, self.mag_max
            ));
        }
        if self.tile_size < 8 {
            return bad(format!("tile_size must be >= 8, got {}", self.tile_size));
        }
        // Zero amplitude is allowed: it is the no-signal control.
        if !(self.deform_amp_max >= 0.0) || !self.deform_amp_max.is_finite() {
            return bad(format!(
                "deform_amp_max must be >= 0, got {}",
                self.deform_amp_max
            ));
        }
        if !(self.vh_ratio > 0.0) {
            return bad(format!("vh_ratio must be positive, got {}", self.vh_ratio));
        }
        if self.speckle_looks < 1 {
            return bad("speckle_looks must be >= 1".into());
        }
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    /// Peak bump amplitude for a magnitude.
    pub fn deform_amplitude(&self, magnitude: f64) -> f64 {
        self.deform_amp_max * (magnitude - self.mag_min) / (self.mag_max - self.mag_min)
    }
}

fn gaussian_bump(field: &mut [f64], size: usize, amp: f64, cy: f64, cx: f64, sigma: f64) {
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in 0..size {
        for x in 0..size {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            field[y * size + x] += amp * (-d2 * inv).exp();
        }
    }
}

/// `0.1 + Σ_k a_k·exp(−‖p − c_k‖²/(2σ_k²))`, row-major `size × size`.
pub fn gen_background<R: Rng + ?Sized>(size: usize, n_blobs: usize, rng: &mut R) -> Vec<f64> {
    let mut field = vec![0.1; size * size];
    let s = size as f64;
    for _ in 0..n_blobs {
        let a = rng.gen_range(0.2..1.0);
        let cy = rng.gen_range(0.0..s);
        let cx = rng.gen_range(0.0..s);
        let sigma = rng.gen_range(s / 8.0..s / 3.0);
        gaussian_bump(&mut field, size, a, cy, cx, sigma);
    }
    field
}

/// Multiplies each value by an independent unit-mean `Gamma(looks, 1/looks)`
/// draw.
pub fn apply_speckle<R: Rng + ?Sized>(field: &[f64], looks: u32, rng: &mut R) -> Result<Vec<f64>> {
    if looks < 1 {
        return Err(Error::Config("speckle needs at least one look".into()));
    }
    if let Some(v) = field.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!(
            "speckle field must be positive, got {v}"
        )));
    }
    let l = looks as f64;
    let gamma = Gamma::new(l, 1.0 / l).expect("valid gamma parameters");
    Ok(field.iter().map(|f| f * gamma.sample(rng)).collect())
}

/// Speckle-free intensities of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanFields {
    pub background: Vec<f64>,
    pub deform: Vec<f64>,
}

impl CleanFields {
    pub fn pre_vv(&self) -> Vec<f64> {
        self.background.clone()
    }

    pub fn post_vv(&self) -> Vec<f64> {
        self.background
            .iter()
            .zip(&self.deform)
            .map(|(b, d)| b + d)
            .collect()
    }
}

/// Draws the background and the deformation bump. Consumes the same random
/// numbers regardless of `magnitude`.
pub fn gen_clean_fields<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    magnitude: f64,
    rng: &mut R,
) -> Result<CleanFields> {
    cfg.validate()?;
    if !(cfg.mag_min..=cfg.mag_max).contains(&magnitude) {
        return Err(Error::Domain(format!(
            "magnitude {magnitude} outside [{}, {}]",
            cfg.mag_min, cfg.mag_max
        )));
    }
    let size = cfg.tile_size;
    let s = size as f64;
    let background = gen_background(size, cfg.n_blobs, rng);
    let cy = rng.gen_range(0.0..s);
    let cx = rng.gen_range(0.0..s);
    let width = rng.gen_range(s / 6.0..s / 3.0);
    let mut deform = vec![0.0; size * size];
    gaussian_bump(
        &mut deform,
        size,
        cfg.deform_amplitude(magnitude),
        cy,
        cx,
        width,
    );
    Ok(CleanFields { background, deform })
}

fn to_tile(size: usize, vv: &[f64], vh: &[f64]) -> Result<SarTile> {
    let data = vv
        .iter()
        .zip(vh)
        .flat_map(|(a, b)| [*a as f32, *b as f32])
        .collect();
    SarTile::new(size, size, 2, data)
}

pub fn gen_sample<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    id: &str,
    magnitude: f64,
    split: Split,
    rng: &mut R,
) -> Result<Sample> {
    let clean = gen_clean_fields(cfg, magnitude, rng)?;
    let looks = cfg.speckle_looks;
    let pre = clean.pre_vv();
    let post = clean.post_vv();
    let scale = |f: &[f64]| f.iter().map(|v| v * cfg.vh_ratio).collect::<Vec<_>>();
    let pre_vv = apply_speckle(&pre, looks, rng)?;
    let pre_vh = apply_speckle(&scale(&pre), looks, rng)?;
    let post_vv = apply_speckle(&post, looks, rng)?;
    let post_vh = apply_speckle(&scale(&post), looks, rng)?;
    let size = cfg.tile_size;
    Ok(Sample {
        id: id.to_string(),
        pair: SarTilePair::new(
            to_tile(size, &pre_vv, &pre_vh)?,
            to_tile(size, &post_vv, &post_vh)?,
        )?,
        magnitude,
        split,
    })
}

pub fn sample_id(split: Split, index: usize) -> String {
    format!("{split}-{index:05}")
}

/// Generates one sample from its own seed stream. Independent of every other
/// sample, so generation order does not matter.
pub fn gen_indexed_sample(cfg: &SynthConfig, split: Split, index: usize) -> Result<Sample> {
    let id = sample_id(split, index);
    let mut rng = rng::stream(cfg.seed, &format!("synth/{id}"));
    let magnitude = rng.gen_range(cfg.mag_min..cfg.mag_max);
    gen_sample(cfg, &id, magnitude, split, &mut rng)
}

/// Running mean/variance of dB values per polarization channel.
#[derive(Default)]
struct DbAccumulator {
    n: [u64; 2],
    sum: [f64; 2],
    sum_sq: [f64; 2],
}

impl DbAccumulator {
    fn add(&mut self, tile: &SarTile, eps: f32) {
        for px in tile.data().chunks_exact(2) {
            for (c, &x) in px.iter().enumerate() {
                let v = db(x, eps) as f64;
                self.n[c] += 1;
                self.sum[c] += v;
                self.sum_sq[c] += v * v;
            }
        }
    }

    fn finish(&self) -> Result<Vec<ChannelStats>> {
        (0..2)
            .map(|c| {
                let n = self.n[c] as f64;
                let mean = self.sum[c] / n;
                let var = (self.sum_sq[c] / n - mean * mean).max(0.0);
                if !(var > 0.0) {
                    return Err(Error::Degenerate(format!(
                        "channel {c} has zero dB variance"
                    )));
                }
                Ok(ChannelStats {
                    mean_db: mean,
                    std_db: var.sqrt(),
                })
            })
            .collect()
    }
}

/// Writes `tiles/*.sart` and `manifest.jsonl` under `out_dir`. The manifest
/// header carries train-split dB statistics.
pub fn gen_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let tiles = out_dir.join("tiles");
    fs::create_dir_all(&tiles).map_err(|e| Error::storage(&tiles, e))?;
    let eps = PreprocessConfig::default().db_floor_eps;

    let mut records = Vec::new();
    let mut acc = DbAccumulator::default();
    for split in Split::ALL {
        for i in 0..cfg.split_size(split) {
            let sample = gen_indexed_sample(cfg, split, i)?;
            let pre_rel = format!("tiles/{}_pre.sart", sample.id);
            let post_rel = format!("tiles/{}_post.sart", sample.id);
            write_tile(&sample.pair.pre, &out_dir.join(&pre_rel))?;
            write_tile(&sample.pair.post, &out_dir.join(&post_rel))?;
            if split == Split::Train {
                acc.add(&sample.pair.pre, eps);
                acc.add(&sample.pair.post, eps);
            }
            records.push(Record {
                id: sample.id,
                pre_path: pre_rel,
                post_path: post_rel,
                magnitude: sample.magnitude,
                split,
            });
        }
    }
    if cfg.n_train == 0 {
        return Err(Error::Empty("train split".into()));
    }
    let manifest = Manifest {
        base_dir: out_dir.to_path_buf(),
        records,
        stats: Some(acc.finish()?),
    };
    write_manifest(&manifest, &out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub slope: f64,
    pub intercept: f64,
    pub test_mae: f64,
    /// MAE of always predicting the train-split mean magnitude.
    pub constant_mae: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// `mean |dB(post_VV) − dB(pre_VV)|` over pixels.
pub fn diff_energy(pair: &SarTilePair, eps: f32) -> f64 {
    let n = pair.pre.height() * pair.pre.width();
    let c = pair.pre.channels();
    let (pre, post) = (pair.pre.data(), pair.post.data());
    let sum: f64 = (0..n)
        .map(|i| (db(post[i * c], eps) as f64 - db(pre[i * c], eps) as f64).abs())
        .sum();
    sum / n as f64
}

/// Least-squares line from [`diff_energy`] to magnitude, fitted on the train
/// split and scored on the test split.
pub fn oracle_baseline(manifest: &Manifest) -> Result<OracleReport> {
    let eps = PreprocessConfig::default().db_floor_eps;
    let features = |split: Split| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut f = Vec::new();
        let mut m = Vec::new();
        for r in manifest.records_in(split) {
            let pair = SarTilePair::new(
                read_tile(&manifest.resolve(&r.pre_path))?,
                read_tile(&manifest.resolve(&r.post_path))?,
            )?;
            f.push(diff_energy(&pair, eps));
            m.push(r.magnitude);
        }
        if f.is_empty() {
            return Err(Error::Empty(format!("{split} split")));
        }
        Ok((f, m))
    };
    let (f, m) = features(Split::Train)?;
    let (ft, mt) = features(Split::Test)?;

    let n = f.len() as f64;
    let fm = f.iter().sum::<f64>() / n;
    let mm = m.iter().sum::<f64>() / n;
    let var: f64 = f.iter().map(|x| (x - fm).powi(2)).sum::<f64>() / n;
    let cov: f64 = f
        .iter()
        .zip(&m)
        .map(|(x, y)| (x - fm) * (y - mm))
        .sum::<f64>()
        / n;
    if !(var > 1e-12 * fm.abs().max(1.0).powi(2)) {
        return Err(Error::Degenerate(format!(
            "feature variance {var} is too small to fit"
        )));
    }
    let slope = cov / var;
    let intercept = mm - slope * fm;
    let nt = ft.len() as f64;
    let test_mae = ft
        .iter()
        .zip(&mt)
        .map(|(x, y)| (slope * x + intercept - y).abs())
        .sum::<f64>()
        / nt;
    let constant_mae = mt.iter().map(|y| (mm - y).abs()).sum::<f64>() / nt;
    Ok(OracleReport {
        slope,
        intercept,
        test_mae,
        constant_mae,
        n_train: f.len(),
        n_test: ft.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_background_is_floor() {
        let mut rng = rng::stream(0, "t");
        assert!(gen_background(16, 0, &mut rng).iter().all(|v| *v == 0.1));
    }

    #[test]
    fn background_floor_and_determinism() {
        let a = gen_background(32, 6, &mut rng::stream(5, "bg"));
        let b = gen_background(32, 6, &mut rng::stream(5, "bg"));
        assert_eq!(a, b);
        assert!(a.iter().all(|v| *v >= 0.1));
        assert!(a.iter().any(|v| *v > 0.2));
    }

    #[test]
    fn speckle_preconditions() {
        let mut rng = rng::stream(0, "t");
        assert!(apply_speckle(&[0.0, 1.0], 1, &mut rng).is_err());
        assert!(apply_speckle(&[1.0], 0, &mut rng).is_err());
    }

    #[test]
    fn single_look_speckle_has_unit_mean() {
        let mut rng = rng::stream(1, "speckle");
        let field: Vec<f64> = (0..1_000_000).map(|i| 0.5 + (i % 7) as f64).collect();
        let out = apply_speckle(&field, 1, &mut rng).unwrap();
        let ratio = out.iter().zip(&field).map(|(o, f)| o / f).sum::<f64>() / field.len() as f64;
        assert!((ratio - 1.0).abs() < 0.01, "{ratio}");
    }

    #[test]
    fn many_looks_converge_to_field() {
        let mut rng = rng::stream(2, "speckle");
        let field = gen_background(32, 6, &mut rng);
        let out = apply_speckle(&field, 1_000_000, &mut rng).unwrap();
        let worst = out
            .iter()
            .zip(&field)
            .map(|(o, f)| (o / f - 1.0).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.01, "{worst}");
    }

    #[test]
    fn amplitude_endpoints() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.deform_amplitude(4.0), 0.0);
        assert_eq!(cfg.deform_amplitude(7.0), 0.6);
        let clean = gen_clean_fields(&cfg, 4.0, &mut rng::stream(0, "x")).unwrap();
        assert!(clean.deform.iter().all(|d| *d == 0.0));
        assert_eq!(clean.pre_vv(), clean.post_vv());
        let clean = gen_clean_fields(&cfg, 7.0, &mut rng::stream(0, "x")).unwrap();
        let peak = clean.deform.iter().cloned().fold(0.0, f64::max);
        assert!(peak <= 0.6 && peak > 0.0);
        assert!(gen_clean_fields(&cfg, 7.5, &mut rng::stream(0, "x")).is_err());
    }

    #[test]
    fn clean_difference_grows_with_magnitude() {
        let cfg = SynthConfig::default();
        let mut last = f64::NEG_INFINITY;
        for k in 0..10 {
            let mag = 4.0 + 3.0 * k as f64 / 9.0;
            let clean = gen_clean_fields(&cfg, mag, &mut rng::stream(11, "mono")).unwrap();
            let n = clean.background.len() as f64;
            let diff: f64 = clean
                .post_vv()
                .iter()
                .zip(clean.pre_vv())
                .map(|(a, b)| a - b)
                .sum::<f64>()
                / n;
            assert!(diff > last, "level {k}: {diff} <= {last}");
            last = diff;
        }
    }

    #[test]
    fn samples_are_positive_and_labelled() {
        let cfg = SynthConfig::default();
        let s = gen_indexed_sample(&cfg, Split::Val, 3).unwrap();
        assert_eq!(s.id, "val-00003");
        assert!((4.0..7.0).contains(&s.magnitude));
        assert!(s.pair.pre.data().iter().all(|v| *v >= 0.0 && v.is_finite()));
        assert_eq!(s, gen_indexed_sample(&cfg, Split::Val, 3).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        for bad in [
            SynthConfig {
                mag_min: 7.0,
                ..Default::default()
            },
            SynthConfig {
                tile_size: 4,
                ..Default::default()
            },
            SynthConfig {
                deform_amp_max: -1.0,
                ..Default::default()
            },
            SynthConfig {
                speckle_looks: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
