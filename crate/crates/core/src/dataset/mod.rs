//! Scene datasets: generation, MNIST ingestion, composition, and a bit-exact
//! binary container.
//!
//! Container layout (all multi-byte integers little-endian):
//!   magic "LDPD", u16 version = 1, u16 height, u16 width, u32 sample count,
//!   u8 max objects, then per sample H*W pixel bytes followed by H*W label
//!   bitmask bytes, then a trailing CRC-32 of everything before it.
//!
//! Pixels are stored as `round(255 * intensity)`. Label bitmasks set bit j
//! for object j (1-based); bit 0 is reserved, an all-zero mask is background.

mod idx;
mod mnist;
mod shapes;

pub use idx::{parse_idx, IdxData, IdxKind};
pub use mnist::{compose_multi_mnist, GlyphBank, HoldoutRole, UniqueSubset};
pub use shapes::{generate_multi_shapes, SpriteKind};

use crate::error::LdpError;
use crate::tensor::Tensor;
use std::io::Read;
use std::path::Path;

pub const CONTAINER_MAGIC: [u8; 4] = *b"LDPD";
pub const CONTAINER_VERSION: u16 = 1;

/// One scene: quantized pixels plus per-pixel owner bitmasks.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl SceneSample {
    /// Intensities in [0,1] as a flat tensor.
    pub fn intensities(&self) -> Tensor {
        Tensor::vector(self.pixels.iter().map(|&p| p as f64 / 255.0).collect())
    }

    /// Number of owning objects per pixel.
    pub fn owner_counts(&self) -> Vec<u32> {
        self.labels.iter().map(|&l| l.count_ones()).collect()
    }

    /// The object (1-based bit index) owning a single-owner pixel.
    pub fn sole_owner(&self, pixel: usize) -> Option<u8> {
        let l = self.labels[pixel];
        if l.count_ones() == 1 {
            Some(l.trailing_zeros() as u8)
        } else {
            None
        }
    }

    /// Ground-truth image of object `bit` alone on a black background: the
    /// composite intensity wherever the object covers, zero elsewhere.
    pub fn object_image(&self, bit: u8) -> Tensor {
        let mask = 1u8 << bit;
        Tensor::vector(
            self.pixels
                .iter()
                .zip(self.labels.iter())
                .map(|(&p, &l)| if l & mask != 0 { p as f64 / 255.0 } else { 0.0 })
                .collect(),
        )
    }

    /// Object bits present in this sample, ascending.
    pub fn present_objects(&self) -> Vec<u8> {
        let mut union = 0u8;
        for &l in &self.labels {
            union |= l;
        }
        (1..8).filter(|&b| union & (1 << b) != 0).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: u16,
    pub width: u16,
    pub max_objects: u8,
    pub samples: Vec<SceneSample>,
}

impl Dataset {
    pub fn pixel_count(&self) -> usize {
        self.height as usize * self.width as usize
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Fraction of samples containing at least one multi-owner pixel.
    pub fn overlap_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let overlapping = self
            .samples
            .iter()
            .filter(|s| s.labels.iter().any(|&l| l.count_ones() >= 2))
            .count();
        overlapping as f64 / self.samples.len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = self.pixel_count();
        let mut out = Vec::with_capacity(13 + self.samples.len() * 2 * m + 4);
        out.extend_from_slice(&CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        out.push(self.max_objects);
        for s in &self.samples {
            debug_assert_eq!(s.pixels.len(), m);
            debug_assert_eq!(s.labels.len(), m);
            out.extend_from_slice(&s.pixels);
            out.extend_from_slice(&s.labels);
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset, LdpError> {
        let err = |offset: usize, message: &str| LdpError::Format {
            offset,
            message: message.to_string(),
        };
        if bytes.len() < 17 {
            return Err(err(bytes.len(), "container truncated before header end"));
        }
        if bytes[0..4] != CONTAINER_MAGIC {
            return Err(err(0, "bad container magic"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CONTAINER_VERSION {
            return Err(err(4, &format!("unsupported container version {}", version)));
        }
        let height = u16::from_le_bytes([bytes[6], bytes[7]]);
        let width = u16::from_le_bytes([bytes[8], bytes[9]]);
        let count = u32::from_le_bytes([bytes[10], bytes[11], bytes[12], bytes[13]]) as usize;
        let max_objects = bytes[14];
        let m = height as usize * width as usize;
        let body_end = 15 + count * 2 * m;
        if bytes.len() < body_end + 4 {
            return Err(err(bytes.len(), "container truncated inside sample data"));
        }
        let declared = u32::from_le_bytes([
            bytes[body_end],
            bytes[body_end + 1],
            bytes[body_end + 2],
            bytes[body_end + 3],
        ]);
        let actual = crc32(&bytes[..body_end]);
        if declared != actual {
            return Err(err(body_end, "checksum mismatch"));
        }
        if bytes.len() != body_end + 4 {
            return Err(err(body_end + 4, "trailing bytes after checksum"));
        }
        let mut samples = Vec::with_capacity(count);
        let mut at = 15;
        for _ in 0..count {
            let pixels = bytes[at..at + m].to_vec();
            let labels = bytes[at + m..at + 2 * m].to_vec();
            samples.push(SceneSample { pixels, labels });
            at += 2 * m;
        }
        Ok(Dataset { height, width, max_objects, samples })
    }

    pub fn write_file(&self, path: &Path) -> Result<(), LdpError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| LdpError::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Dataset, LdpError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| LdpError::io(path, e))?;
        Dataset::from_bytes(&bytes)
    }
}

/// CRC-32 (IEEE 802.3 polynomial, reflected).
pub fn crc32(bytes: &[u8]) -> u32 {
    const fn table() -> [u32; 256] {
        let mut t = [0u32; 256];
        let mut i = 0;
        while i < 256 {
            let mut c = i as u32;
            let mut k = 0;
            while k < 8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
                k += 1;
            }
            t[i] = c;
            i += 1;
        }
        t
    }
    const TABLE: [u32; 256] = table();
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = TABLE[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}
