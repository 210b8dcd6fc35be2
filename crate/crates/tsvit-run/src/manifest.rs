//! Dataset manifests: tile listings, splits and normalization statistics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsvit_core::Rng;

use crate::error::{Result, RunError};
use crate::util::atomic_write;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(RunError::Invalid(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    /// Per-channel mean over the train split.
    pub mean: Vec<f32>,
    /// Per-channel standard deviation over the train split.
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileEntry {
    /// Path relative to the manifest file.
    pub path: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: u16,
    pub channels: usize,
    pub class_names: Vec<String>,
    pub normalization: Normalization,
    pub tiles: Vec<TileEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path)?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self)?;
        atomic_write(path, text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(RunError::Invalid(format!(
                "dataset needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.normalization.mean.len() != self.channels
            || self.normalization.std.len() != self.channels
        {
            return Err(RunError::Invalid(format!(
                "normalization stats cover {} / {} channels, dataset has {}",
                self.normalization.mean.len(),
                self.normalization.std.len(),
                self.channels
            )));
        }
        if self.normalization.std.iter().any(|&s| !(s > 0.0)) {
            return Err(RunError::Invalid("non-positive std in normalization".into()));
        }
        Ok(())
    }

    pub fn split_paths(&self, base: &Path, split: Split) -> Vec<PathBuf> {
        self.tiles
            .iter()
            .filter(|t| t.split == split)
            .map(|t| base.join(&t.path))
            .collect()
    }
}

/// Reassign splits by a seeded shuffle. Counts follow the ratios via
/// largest-remainder rounding, so they match to within one tile.
pub fn split(manifest: &mut DatasetManifest, ratios: (f64, f64, f64), seed: u64) -> Result<()> {
    let n = manifest.tiles.len();
    if n == 0 {
        return Err(RunError::Invalid("cannot split an empty dataset".into()));
    }
    let parts = [ratios.0, ratios.1, ratios.2];
    if parts.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(RunError::Invalid(format!(
            "split ratios {parts:?} must be in [0, 1] and sum to 1"
        )));
    }
    let exact: Vec<f64> = parts.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - counts[b] as f64)
            .partial_cmp(&(exact[a] - counts[a] as f64))
            .unwrap()
    });
    let mut short = n - counts.iter().sum::<usize>();
    for &i in &order {
        if short == 0 {
            break;
        }
        counts[i] += 1;
        short -= 1;
    }

    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed);
    rng.shuffle(&mut idx);
    for (pos, &tile_idx) in idx.iter().enumerate() {
        let split = if pos < counts[0] {
            Split::Train
        } else if pos < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
        manifest.tiles[tile_idx].split = split;
    }
    Ok(())
}
