use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the magnitude scale unless configured otherwise.
pub const DEFAULT_MAX_MAGNITUDE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Decibel statistics of one polarization channel over the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelStats {
    pub mean_db: f64,
    pub std_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub pre_path: String,
    pub post_path: String,
    pub magnitude: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory that relative tile paths resolve against.
    pub base_dir: PathBuf,
    pub records: Vec<Record>,
    /// Per-channel stats in `[VV, VH]` order.
    pub stats: Option<Vec<ChannelStats>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawMagnitude {
    Number(f64),
    Text(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    pre_path: String,
    post_path: String,
    magnitude: RawMagnitude,
    split: String,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    pre_path: &'a str,
    post_path: &'a str,
    magnitude: f64,
    split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stats: Vec<ChannelStats>,
}

impl Manifest {
    pub fn split_counts(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.split).or_insert(0) += 1;
        }
        counts
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    /// Checks every label lies in `[0, max_magnitude]`.
    pub fn check_magnitudes(&self, max_magnitude: f64) -> Result<()> {
        for r in &self.records {
            if !(0.0..=max_magnitude).contains(&r.magnitude) {
                return Err(Error::Domain(format!(
                    "sample {} has magnitude {} outside [0, {max_magnitude}]",
                    r.id, r.magnitude
                )));
            }
        }
        Ok(())
    }
}

/// Parses manifest text without touching the filesystem.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut stats = None;
    let mut seen_content = false;

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Manifest { line: lineno, msg };
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| err("expected a JSON object".into()))?;

        if !obj.contains_key("id") {
            if seen_content {
                return Err(err("stats header must be the first line".into()));
            }
            let header: Header = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
            if let Some(s) = header
                .stats
                .iter()
                .find(|s| !s.mean_db.is_finite() || !s.std_db.is_finite() || s.std_db <= 0.0)
            {
                return Err(err(format!("invalid channel stats {s:?}")));
            }
            stats = Some(header.stats);
            seen_content = true;
            continue;
        }
        seen_content = true;

        let raw: RawRecord = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
        let magnitude = match raw.magnitude {
            RawMagnitude::Number(v) => v,
            RawMagnitude::Text(s) => s
                .trim()
                .parse::<f64>()
                .map_err(|_| err(format!("magnitude {s:?} is not a number")))?,
        };
        if !magnitude.is_finite() {
            return Err(err(format!("magnitude {magnitude} is not finite")));
        }
        let split = raw.split.parse::<Split>().map_err(|e| err(e.to_string()))?;
        records.push(Record {
            id: raw.id,
            pre_path: raw.pre_path,
            post_path: raw.post_path,
            magnitude,
            split,
        });
    }

    let mut seen = HashSet::new();
    let mut dups: Vec<String> = Vec::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) && !dups.contains(&r.id) {
            dups.push(r.id.clone());
        }
    }
    if !dups.is_empty() {
        return Err(Error::DuplicateIds(dups));
    }

    Ok(Manifest {
        base_dir: base_dir.to_path_buf(),
        records,
        stats,
    })
}

/// Reads, validates and path-checks a manifest file.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = parse_manifest(&text, base)?;
    for r in &manifest.records {
        for rel in [&r.pre_path, &r.post_path] {
            let p = manifest.resolve(rel);
            if !p.is_file() {
                return Err(Error::storage(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "tile file not found"),
                ));
            }
        }
    }
    let counts = manifest.split_counts();
    log::info!(
        "loaded manifest {}: {}",
        path.display(),
        counts
            .iter()
            .map(|(s, n)| format!("{s}={n}"))
            .collect::<Vec<_>>()
            .join(" ")
    );
    Ok(manifest)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut out = String::new();
    if let Some(stats) = &manifest.stats {
        out.push_str(&serde_json::to_string(&Header {
            stats: stats.clone(),
        })?);
        out.push('\n');
    }
    for r in &manifest.records {
        out.push_str(&serde_json::to_string(&OutRecord {
            id: &r.id,
            pre_path: &r.pre_path,
            post_path: &r.post_path,
            magnitude: r.magnitude,
            split: r.split,
        })?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::storage(path, e))
}
