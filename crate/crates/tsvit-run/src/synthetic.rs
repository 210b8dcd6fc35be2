//! Synthetic crop-time-series generator.
//!
//! Tiles contain rectangular parcels over a background; every class has a
//! smooth Gaussian bump over day-of-year per channel, plus i.i.d. noise.
//! The point is a learnable desk-scale task, not radiometric realism.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsvit_core::{Rng, Tensor};

use crate::error::{Result, RunError};
use crate::manifest::{split, DatasetManifest, Normalization, Split, TileEntry};
use crate::tile::{write_tile, Tile};

/// Nine roughly monthly acquisition dates, November through July, as
/// day-of-year indices of the season calendar.
pub const SEASON_DAYS: [u16; 9] = [1, 31, 62, 92, 123, 154, 182, 213, 243];

/// Evenly subsample the season calendar down to `t` acquisition dates.
pub fn season_days(t: usize) -> Result<Vec<u16>> {
    if t == 0 || t > SEASON_DAYS.len() {
        return Err(RunError::Invalid(format!(
            "timesteps must be in 1..={}, got {t}",
            SEASON_DAYS.len()
        )));
    }
    if t == 1 {
        return Ok(vec![SEASON_DAYS[4]]);
    }
    Ok((0..t)
        .map(|i| SEASON_DAYS[i * (SEASON_DAYS.len() - 1) / (t - 1)])
        .collect())
}

/// Temporal signature of one class: a Gaussian bump over day-of-year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    pub peak_day: f32,
    pub amplitude: f32,
    pub width: f32,
}

impl ClassProfile {
    /// Mean signal on `day` in channel `ch`: channels see the bump with
    /// alternating sign so classes differ in spectrum as well as timing.
    pub fn value(&self, day: f32, ch: usize) -> f32 {
        let z = (day - self.peak_day) / self.width;
        let bump = self.amplitude * (-0.5 * z * z).exp();
        let channel_gain = 1.0 - 0.4 * (ch % 3) as f32;
        bump * channel_gain
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub tiles: usize,
    pub k: u16,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub parcels_min: usize,
    pub parcels_max: usize,
    /// One per class, index 0 = background.
    pub profiles: Vec<ClassProfile>,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            tiles: 200,
            k: 2,
            t: 6,
            h: 12,
            w: 12,
            c: 3,
            parcels_min: 1,
            parcels_max: 3,
            profiles: default_profiles(2),
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Evenly spaced peak days across the season, pairwise well separated.
pub fn default_profiles(k: u16) -> Vec<ClassProfile> {
    let span = *SEASON_DAYS.last().unwrap() as f32 - SEASON_DAYS[0] as f32;
    (0..k)
        .map(|c| ClassProfile {
            peak_day: SEASON_DAYS[0] as f32 + span * (c as f32 + 0.5) / k as f32,
            amplitude: 1.0 + 0.25 * (c % 2) as f32,
            width: 35.0,
        })
        .collect()
}

pub const MIN_PEAK_SEPARATION: f32 = 10.0;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(RunError::Invalid(format!(
                "need at least 2 classes, got {}",
                self.k
            )));
        }
        if self.tiles == 0 {
            return Err(RunError::Invalid("tile count must be positive".into()));
        }
        if self.profiles.len() != self.k as usize {
            return Err(RunError::Invalid(format!(
                "{} profiles for K = {}",
                self.profiles.len(),
                self.k
            )));
        }
        for (i, a) in self.profiles.iter().enumerate() {
            for b in &self.profiles[i + 1..] {
                if (a.peak_day - b.peak_day).abs() < MIN_PEAK_SEPARATION {
                    return Err(RunError::Invalid(format!(
                        "profile peaks {} and {} closer than {MIN_PEAK_SEPARATION} days",
                        a.peak_day, b.peak_day
                    )));
                }
            }
        }
        if self.parcels_min == 0 || self.parcels_min > self.parcels_max {
            return Err(RunError::Invalid(format!(
                "bad parcel range {}..={}",
                self.parcels_min, self.parcels_max
            )));
        }
        if self.h < 4 || self.w < 4 {
            return Err(RunError::Invalid("tiles must be at least 4x4".into()));
        }
        season_days(self.t)?;
        Ok(())
    }

    pub fn generate_tile(&self, index: u64) -> Result<Tile> {
        let mut rng = Rng::new(self.seed).fork(index);
        let times = season_days(self.t)?;
        let (t, h, w, c) = (self.t, self.h, self.w, self.c);

        // Background everywhere, then paint rectangular parcels.
        let mut labels = vec![0u8; h * w];
        let parcels =
            self.parcels_min + rng.below(self.parcels_max - self.parcels_min + 1);
        for _ in 0..parcels {
            let ph = 2 + rng.below(h / 2 - 1);
            let pw = 2 + rng.below(w / 2 - 1);
            let y0 = rng.below(h - ph);
            let x0 = rng.below(w - pw);
            let class = 1 + rng.below(self.k as usize - 1);
            for y in y0..y0 + ph {
                for x in x0..x0 + pw {
                    labels[y * w + x] = class as u8;
                }
            }
        }

        let mut data = vec![0.0f32; t * h * w * c];
        for (ti, &day) in times.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let profile = &self.profiles[labels[y * w + x] as usize];
                    for ch in 0..c {
                        let clean = profile.value(day as f32, ch);
                        let noise = self.noise_sigma * rng.normal();
                        data[((ti * h + y) * w + x) * c + ch] = clean + noise;
                    }
                }
            }
        }
        Ok(Tile {
            data: Tensor::new(&[t, h, w, c], data).map_err(RunError::Core)?,
            times,
            labels,
            k: self.k,
        })
    }
}

/// Generate the tile files and manifest under `out_dir`. Deterministic
/// given the config; returns the manifest path.
pub fn generate_synthetic(cfg: &SyntheticConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::with_capacity(cfg.tiles);
    let mut tiles = Vec::with_capacity(cfg.tiles);
    for i in 0..cfg.tiles {
        let tile = cfg.generate_tile(i as u64)?;
        let rel = format!("tile_{i:05}.tsst");
        write_tile(&tile, &out_dir.join(&rel))?;
        entries.push(TileEntry {
            path: rel,
            split: Split::Train,
        });
        tiles.push(tile);
    }
    let mut manifest = DatasetManifest {
        name: format!("synthetic-k{}-seed{}", cfg.k, cfg.seed),
        num_classes: cfg.k,
        channels: cfg.c,
        class_names: (0..cfg.k).map(|c| format!("class_{c}")).collect(),
        normalization: Normalization {
            mean: vec![0.0; cfg.c],
            std: vec![1.0; cfg.c],
        },
        tiles: entries,
    };
    split(&mut manifest, (0.6, 0.2, 0.2), cfg.seed)?;

    // Per-channel standardization statistics over the train split.
    let mut sum = vec![0.0f64; cfg.c];
    let mut sum_sq = vec![0.0f64; cfg.c];
    let mut count = 0u64;
    for (tile, entry) in tiles.iter().zip(&manifest.tiles) {
        if entry.split != Split::Train {
            continue;
        }
        for (i, &v) in tile.data.data().iter().enumerate() {
            let ch = i % cfg.c;
            sum[ch] += v as f64;
            sum_sq[ch] += (v as f64) * (v as f64);
        }
        count += (tile.data.numel() / cfg.c) as u64;
    }
    if count == 0 {
        return Err(RunError::Invalid("train split is empty".into()));
    }
    for ch in 0..cfg.c {
        let mean = sum[ch] / count as f64;
        let var = (sum_sq[ch] / count as f64 - mean * mean).max(1e-12);
        manifest.normalization.mean[ch] = mean as f32;
        manifest.normalization.std[ch] = var.sqrt() as f32;
    }

    let manifest_path = out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;
    Ok(manifest_path)
}
