//! IDX image container parsing, bit-depth reduction, and uniform
//! dequantization.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{FunnelError, Result};
use crate::tensor::Tensor;

/// Integer-valued images with values in {0,…,2^bits − 1}, row-major, stored
/// pixel-major with channels innermost.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedImageSet {
    pub values: Vec<u32>,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub bits: u8,
}

impl QuantizedImageSet {
    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Value at (image, row, col) for single-channel sets.
    pub fn at(&self, n: usize, i: usize, j: usize) -> u32 {
        self.values[(n * self.height + i) * self.width * self.channels + j * self.channels]
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Upper bound on any single IDX dimension, to reject absurd headers early.
const MAX_IDX_DIM: u32 = 1 << 24;

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parse an IDX image file: big-endian magic 0x00000803, then count, rows,
/// cols as big-endian u32, then count·rows·cols unsigned bytes.
pub fn parse_idx(bytes: &[u8]) -> Result<QuantizedImageSet> {
    if bytes.is_empty() {
        return Err(FunnelError::Parse("empty IDX file".into()));
    }
    if bytes.len() < 16 {
        return Err(FunnelError::Parse(format!(
            "IDX header truncated: {} bytes, need 16",
            bytes.len()
        )));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(FunnelError::Parse(format!(
            "bad IDX magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let count = be_u32(bytes, 4);
    let rows = be_u32(bytes, 8);
    let cols = be_u32(bytes, 12);
    for (name, v) in [("count", count), ("rows", rows), ("cols", cols)] {
        if v == 0 || v > MAX_IDX_DIM {
            return Err(FunnelError::Parse(format!("IDX {name} field {v} out of range")));
        }
    }
    let expected = (count as usize)
        .checked_mul(rows as usize)
        .and_then(|v| v.checked_mul(cols as usize))
        .ok_or_else(|| FunnelError::Parse("IDX dimensions overflow".into()))?;
    let body = &bytes[16..];
    if body.len() != expected {
        return Err(FunnelError::Parse(format!(
            "IDX body has {} bytes, header declares {}",
            body.len(),
            expected
        )));
    }
    Ok(QuantizedImageSet {
        values: body.iter().map(|&b| b as u32).collect(),
        count: count as usize,
        height: rows as usize,
        width: cols as usize,
        channels: 1,
        bits: 8,
    })
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<QuantizedImageSet> {
    parse_idx(&std::fs::read(path)?)
}

/// Serialize a single-channel 8-bit set back to the IDX container.
pub fn write_idx(path: impl AsRef<Path>, set: &QuantizedImageSet) -> Result<()> {
    if set.channels != 1 || set.bits != 8 {
        return Err(FunnelError::Config("IDX export requires single-channel 8-bit images".into()));
    }
    let mut out = Vec::with_capacity(16 + set.values.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.count as u32).to_be_bytes());
    out.extend_from_slice(&(set.height as u32).to_be_bytes());
    out.extend_from_slice(&(set.width as u32).to_be_bytes());
    out.extend(set.values.iter().map(|&v| v as u8));
    std::fs::write(path, out)?;
    Ok(())
}

/// Drop the lowest bits: v′ = ⌊v / 2^(from−to)⌋.
pub fn reduce_bits(images: &QuantizedImageSet, from_bits: u8, to_bits: u8) -> Result<QuantizedImageSet> {
    if from_bits != images.bits {
        return Err(FunnelError::Config(format!(
            "from_bits {} does not match image depth {}",
            from_bits, images.bits
        )));
    }
    if to_bits > from_bits || to_bits == 0 {
        return Err(FunnelError::Config(format!(
            "cannot reduce {from_bits}-bit images to {to_bits} bits"
        )));
    }
    let shift = from_bits - to_bits;
    Ok(QuantizedImageSet {
        values: images.values.iter().map(|&v| v >> shift).collect(),
        bits: to_bits,
        ..images.clone()
    })
}

/// Uniform dequantization to [0,1): x = (v + u)/2^bits with u ~ U[0,1) per
/// element, drawn from a seeded stream. Returns one flattened row per image.
pub fn dequantize(images: &QuantizedImageSet, bits: u8, seed: u64) -> Result<Tensor> {
    if bits != images.bits {
        return Err(FunnelError::Config(format!(
            "bits {} does not match image depth {}",
            bits, images.bits
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let scale = f64::from(1u32 << bits);
    let data: Vec<f64> = images
        .values
        .iter()
        .map(|&v| (f64::from(v) + rng.gen::<f64>()) / scale)
        .collect();
    Ok(Tensor::matrix(images.count, images.pixels_per_image(), data))
}
