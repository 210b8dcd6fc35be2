//! The tile file format.
//!
//! Little-endian layout:
//! `"TSST"(4) | u16 version=1 | u16 T | u16 H | u16 W | u16 C | u16 K |
//! T x u16 day-of-year | f32 data (t, h, w, c) row-major | u8 labels (h, w)`

use std::io::{Read, Write};
use std::path::Path;

use tsvit_core::Tensor;

use crate::error::{Result, RunError};
use crate::util::atomic_write;

pub const TILE_MAGIC: &[u8; 4] = b"TSST";
pub const TILE_VERSION: u16 = 1;

/// One training sample: an image time series plus a per-pixel label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    /// (T, H, W, C) reflectance values.
    pub data: Tensor,
    /// Acquisition day-of-year per timestep, strictly increasing.
    pub times: Vec<u16>,
    /// Class index per pixel, row-major (H, W), each < k.
    pub labels: Vec<u8>,
    /// Number of classes the labels draw from.
    pub k: u16,
}

impl Tile {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.data.shape();
        if s.len() != 4 {
            return Err(RunError::Invalid(format!(
                "tile data must be (T, H, W, C), got {s:?}"
            )));
        }
        let (t, h, w, _) = self.dims();
        if self.times.len() != t {
            return Err(RunError::Invalid(format!(
                "{} acquisition days for T = {t}",
                self.times.len()
            )));
        }
        if !self.times.windows(2).all(|p| p[0] < p[1]) {
            return Err(RunError::Invalid(
                "acquisition days must be strictly increasing".into(),
            ));
        }
        if self.labels.len() != h * w {
            return Err(RunError::Invalid(format!(
                "{} labels for {h}x{w} pixels",
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| u16::from(l) >= self.k) {
            return Err(RunError::Invalid(format!(
                "label {bad} out of range for K = {}",
                self.k
            )));
        }
        if !self.data.all_finite() {
            return Err(RunError::Invalid("tile data contains non-finite values".into()));
        }
        Ok(())
    }

    /// On-disk size in bytes.
    pub fn file_size(&self) -> u64 {
        let (t, h, w, c) = self.dims();
        16 + 2 * t as u64 + 4 * (t * h * w * c) as u64 + (h * w) as u64
    }
}

pub fn write_tile(tile: &Tile, path: &Path) -> Result<()> {
    tile.validate()?;
    let (t, h, w, c) = tile.dims();
    let mut buf = Vec::with_capacity(tile.file_size() as usize);
    buf.write_all(TILE_MAGIC)?;
    for v in [TILE_VERSION, t as u16, h as u16, w as u16, c as u16, tile.k] {
        buf.write_all(&v.to_le_bytes())?;
    }
    for &day in &tile.times {
        buf.write_all(&day.to_le_bytes())?;
    }
    for &v in tile.data.data() {
        buf.write_all(&v.to_le_bytes())?;
    }
    buf.write_all(&tile.labels)?;
    atomic_write(path, &buf)
}

struct Reader<'p> {
    path: &'p Path,
    buf: Vec<u8>,
    offset: usize,
}

impl<'p> Reader<'p> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.offset + n > self.buf.len() {
            return Err(RunError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.buf.len() as u64,
                needed: (self.offset + n - self.buf.len()) as u64,
            });
        }
        let out = &self.buf[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

pub fn read_tile(path: &Path) -> Result<Tile> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { path, buf, offset: 0 };

    if r.take(4)? != TILE_MAGIC {
        return Err(RunError::BadMagic {
            path: path.to_path_buf(),
            expected: "TSST",
        });
    }
    let version = r.u16()?;
    if version != TILE_VERSION {
        return Err(RunError::BadVersion {
            path: path.to_path_buf(),
            found: version,
            offset: 4,
        });
    }
    let (t, h, w, c, k) = (
        r.u16()? as usize,
        r.u16()? as usize,
        r.u16()? as usize,
        r.u16()? as usize,
        r.u16()?,
    );
    let mut times = Vec::with_capacity(t);
    for _ in 0..t {
        times.push(r.u16()?);
    }
    let n = t * h * w * c;
    let data_offset = r.offset as u64;
    let bytes = r.take(4 * n)?;
    let mut data = Vec::with_capacity(n);
    for chunk in bytes.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    let labels = r.take(h * w)?.to_vec();
    if r.offset != r.buf.len() {
        return Err(RunError::Corrupt {
            path: path.to_path_buf(),
            what: format!("{} trailing bytes", r.buf.len() - r.offset),
            offset: r.offset as u64,
        });
    }
    let tile = Tile {
        data: Tensor::new(&[t, h, w, c], data)
            .map_err(|e| RunError::Corrupt {
                path: path.to_path_buf(),
                what: e.to_string(),
                offset: data_offset,
            })?,
        times,
        labels,
        k,
    };
    tile.validate().map_err(|e| RunError::Corrupt {
        path: path.to_path_buf(),
        what: e.to_string(),
        offset: data_offset,
    })?;
    Ok(tile)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tsvit_core::Rng;

    pub(crate) fn random_tile(rng: &mut Rng, t: usize, h: usize, w: usize, c: usize, k: u16) -> Tile {
        let mut times: Vec<u16> = Vec::new();
        let mut day = 0u16;
        for _ in 0..t {
            day += 1 + rng.below(30) as u16;
            times.push(day);
        }
        let labels = (0..h * w).map(|_| rng.below(k as usize) as u8).collect();
        Tile {
            data: Tensor::randn(&[t, h, w, c], 1.0, rng),
            times,
            labels,
            k,
        }
    }

    #[test]
    fn round_trip_is_bit_exact_for_many_random_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsst");
        let mut rng = Rng::new(1);
        for i in 0..1000 {
            let t = 1 + rng.below(5) as usize;
            let h = 1 + rng.below(6) as usize;
            let w = 1 + rng.below(6) as usize;
            let c = 1 + rng.below(4) as usize;
            let k = 2 + rng.below(5) as u16;
            let tile = random_tile(&mut rng, t, h, w, c, k);
            write_tile(&tile, &path).unwrap();
            let back = read_tile(&path).unwrap();
            assert_eq!(
                tile.data.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                back.data.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "iteration {i}"
            );
            assert_eq!(tile.times, back.times);
            assert_eq!(tile.labels, back.labels);
            assert_eq!(tile.k, back.k);
        }
    }

    #[test]
    fn corrupt_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsst");
        let tile = random_tile(&mut Rng::new(2), 2, 3, 3, 1, 2);
        write_tile(&tile, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = read_tile(&path).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn truncation_reported_with_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tsst");
        let tile = random_tile(&mut Rng::new(3), 2, 3, 3, 1, 2);
        write_tile(&tile, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = read_tile(&path).unwrap_err();
        assert!(err.to_string().contains("byte"), "{err}");
    }

    #[test]
    fn reference_config_tile_size() {
        // 16-byte header + 2 bytes per day + 4 bytes per value + 1 per label.
        let mut rng = Rng::new(4);
        let tile = random_tile(&mut rng, 9, 24, 24, 10, 2);
        assert_eq!(tile.file_size(), 16 + 2 * 9 + 4 * 9 * 24 * 24 * 10 + 24 * 24);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.tsst");
        write_tile(&tile, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), tile.file_size());
    }

    #[test]
    fn invalid_tiles_rejected() {
        let mut rng = Rng::new(5);
        let mut tile = random_tile(&mut rng, 2, 3, 3, 1, 2);
        tile.times = vec![50, 50];
        assert!(tile.validate().is_err(), "non-increasing days");
        let mut tile = random_tile(&mut rng, 2, 3, 3, 1, 2);
        tile.labels[0] = 7;
        assert!(tile.validate().is_err(), "label out of range");
        let mut tile = random_tile(&mut rng, 2, 3, 3, 1, 2);
        tile.data.data_mut()[0] = f32::NAN;
        assert!(tile.validate().is_err(), "non-finite data");
    }
}
