use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const TILE_MAGIC: [u8; 4] = *b"SART";
pub const TILE_VERSION: u32 = 1;
/// magic + version + H + W + C
pub const TILE_HEADER_LEN: usize = 20;

/// A single SAR acquisition: `height × width × channels` linear intensities,
/// row-major with channels last. Dual-pol tiles use channel order `[VV, VH]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SarTile {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl SarTile {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidTile(format!(
                "zero-sized dimension {height}x{width}x{channels}"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::InvalidTile("dimensions overflow".into()))?;
        if data.len() != expected {
            return Err(Error::InvalidTile(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some((i, v)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidTile(format!(
                "value {v} at index {i} is not a finite non-negative intensity"
            )));
        }
        Ok(SarTile {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        SarTile {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Copy of channel `c` as a row-major `height × width` plane.
    pub fn plane(&self, c: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn same_shape(&self, other: &SarTile) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(TILE_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&TILE_MAGIC);
        for v in [
            TILE_VERSION,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a tile file image. Rejects anything [`SarTile::new`] would reject.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                what: "tile header",
                expected: TILE_HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        if bytes[..4] != TILE_MAGIC {
            return Err(Error::BadMagic {
                expected: "SART".into(),
                found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
            });
        }
        if bytes.len() < TILE_HEADER_LEN {
            return Err(Error::Truncated {
                what: "tile header",
                expected: TILE_HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != TILE_VERSION {
            return Err(Error::Version {
                expected: TILE_VERSION,
                found: version,
            });
        }
        let (h, w, c) = (word(1) as u64, word(2) as u64, word(3) as u64);
        let payload = (bytes.len() - TILE_HEADER_LEN) as u64;
        let expected = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(c))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::InvalidTile(format!("dimensions {h}x{w}x{c} overflow")))?;
        if payload < expected {
            return Err(Error::Truncated {
                what: "tile payload",
                expected,
                found: payload,
            });
        }
        if payload > expected {
            return Err(Error::Shape(format!(
                "{} trailing bytes after {h}x{w}x{c} payload",
                payload - expected
            )));
        }
        let data = bytes[TILE_HEADER_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        SarTile::new(h as usize, w as usize, c as usize, data)
    }
}

/// Co-registered acquisitions of one area before (`pre`) and after (`post`)
/// the event.
#[derive(Debug, Clone, PartialEq)]
pub struct SarTilePair {
    pub pre: SarTile,
    pub post: SarTile,
}

impl SarTilePair {
    pub fn new(pre: SarTile, post: SarTile) -> Result<Self> {
        if !pre.same_shape(&post) {
            return Err(Error::Shape(format!(
                "pre is {}x{}x{}, post is {}x{}x{}",
                pre.height, pre.width, pre.channels, post.height, post.width, post.channels
            )));
        }
        Ok(SarTilePair { pre, post })
    }
}

pub fn write_tile(tile: &SarTile, path: &Path) -> Result<()> {
    fs::write(path, tile.encode()).map_err(|e| Error::storage(path, e))
}

pub fn read_tile(path: &Path) -> Result<SarTile> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    SarTile::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_pixel_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sart");
        let tile = SarTile::new(1, 1, 2, vec![0.5, 0.25]).unwrap();
        write_tile(&tile, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), TILE_HEADER_LEN + 8);
        assert_eq!(&bytes[..4], b"SART");
        assert_eq!(read_tile(&path).unwrap(), tile);
    }

    #[test]
    fn file_size_arithmetic() {
        let tile = SarTile::zeros(32, 32, 2);
        assert_eq!(tile.encode().len(), TILE_HEADER_LEN + 8192);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let tile = SarTile::new(2, 3, 1, vec![1.0; 6]).unwrap();
        let b = tile.encode();
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &3u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(&b[20..24], &1.0f32.to_le_bytes());
    }

    #[test]
    fn nan_rejected_before_write() {
        let err = SarTile::new(1, 1, 2, vec![f32::NAN, 0.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidTile(_)));
        let err = SarTile::new(1, 1, 2, vec![-1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidTile(_)));
    }

    #[test]
    fn bad_magic_names_expected() {
        let mut b = SarTile::zeros(1, 1, 2).encode();
        b[..4].copy_from_slice(b"XXXX");
        let err = SarTile::decode(&b).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
        assert!(err.to_string().contains("SART"));
    }

    #[test]
    fn version_mismatch() {
        let mut b = SarTile::zeros(1, 1, 2).encode();
        b[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            SarTile::decode(&b).unwrap_err(),
            Error::Version { found: 2, .. }
        ));
    }

    #[test]
    fn truncated_payload() {
        let b = SarTile::zeros(4, 4, 2).encode();
        let err = SarTile::decode(&b[..b.len() - 3]).unwrap_err();
        assert!(matches!(
            err,
            Error::Truncated {
                what: "tile payload",
                ..
            }
        ));
        let err = SarTile::decode(&b[..10]).unwrap_err();
        assert!(matches!(
            err,
            Error::Truncated {
                what: "tile header",
                ..
            }
        ));
    }

    #[test]
    fn huge_header_does_not_allocate() {
        let mut b = Vec::from(TILE_MAGIC);
        for v in [1u32, u32::MAX, u32::MAX, u32::MAX] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        assert!(SarTile::decode(&b).is_err());
    }

    #[test]
    fn pair_shape_mismatch() {
        let err = SarTilePair::new(SarTile::zeros(2, 2, 2), SarTile::zeros(3, 2, 2)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn roundtrip_is_bit_exact(
            h in 1usize..6, w in 1usize..6, c in 1usize..3,
            seed in proptest::collection::vec(0.0f32..f32::MAX, 50),
        ) {
            let data: Vec<f32> = (0..h * w * c).map(|i| seed[i % seed.len()]).collect();
            let tile = SarTile::new(h, w, c, data).unwrap();
            let back = SarTile::decode(&tile.encode()).unwrap();
            let a: Vec<u32> = tile.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back, tile);
        }
    }
}
