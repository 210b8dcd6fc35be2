//! Deterministic batching with per-epoch shuffling and normalization.

use std::path::Path;

use tsvit_core::Rng;

use crate::error::{Result, RunError};
use crate::manifest::{DatasetManifest, Split};
use crate::tile::{read_tile, Tile};

/// Standardize a tile in place with the manifest's per-channel stats.
pub fn normalize_tile(tile: &mut Tile, manifest: &DatasetManifest) -> Result<()> {
    let c = manifest.channels;
    if tile.dims().3 != c {
        return Err(RunError::Invalid(format!(
            "tile has {} channels, manifest {c}",
            tile.dims().3
        )));
    }
    let (mean, std) = (&manifest.normalization.mean, &manifest.normalization.std);
    for (i, v) in tile.data.data_mut().iter_mut().enumerate() {
        let ch = i % c;
        *v = (*v - mean[ch]) / std[ch];
    }
    Ok(())
}

/// Load a split's tiles once, normalized, in manifest order.
pub fn load_split(base: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<Tile>> {
    let mut tiles = Vec::new();
    for path in manifest.split_paths(base, split) {
        let mut tile = read_tile(&path)?;
        normalize_tile(&mut tile, manifest)?;
        tiles.push(tile);
    }
    Ok(tiles)
}

/// Batch index order for one epoch: a shuffle keyed by (seed, epoch), cut
/// into `batch_size` chunks with the last partial batch kept.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).fork(epoch).shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
