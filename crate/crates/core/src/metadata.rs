//! The perceptual metadata record: tile grid shape plus one saliency weight
//! per tile.
//!
//! Layout (`8 + rows * cols` bytes):
//!
//! | offset      | size | field                          |
//! |-------------|------|--------------------------------|
//! | 0           | 4    | magic `VGNT`                   |
//! | 4           | 1    | version (1)                    |
//! | 5           | 1    | rows                           |
//! | 6           | 1    | cols                           |
//! | 7           | n    | weights, row-major             |
//! | 7 + n       | 1    | XOR of every preceding byte    |

use serde::{Deserialize, Serialize};

pub const MAGIC: [u8; 4] = *b"VGNT";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 7;
/// Header plus trailing checksum.
pub const OVERHEAD: usize = HEADER_LEN + 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetadataError {
    #[error("metadata grid must have at least one row and column, got {rows}x{cols}")]
    EmptyGrid { rows: u8, cols: u8 },
    #[error("metadata has {actual} weights for a {rows}x{cols} grid")]
    WeightCount { rows: u8, cols: u8, actual: usize },
    #[error("bad metadata magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported metadata version {0}")]
    UnsupportedVersion(u8),
    #[error("metadata length {actual} does not match expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("metadata checksum mismatch: stored {stored:#04x}, computed {computed:#04x}")]
    Checksum { stored: u8, computed: u8 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerceptualMetadata {
    pub version: u8,
    pub rows: u8,
    pub cols: u8,
    pub weights: Vec<u8>,
}

impl PerceptualMetadata {
    pub fn new(rows: u8, cols: u8, weights: Vec<u8>) -> Result<Self, MetadataError> {
        let m = PerceptualMetadata {
            version: VERSION,
            rows,
            cols,
            weights,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn from_grid(grid: &crate::tiling::TileGrid, weights: &[u8]) -> Result<Self, MetadataError> {
        // TileGrid caps rows and cols at 255
        PerceptualMetadata::new(grid.rows() as u8, grid.cols() as u8, weights.to_vec())
    }

    fn validate(&self) -> Result<(), MetadataError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(MetadataError::EmptyGrid {
                rows: self.rows,
                cols: self.cols,
            });
        }
        if self.weights.len() != self.rows as usize * self.cols as usize {
            return Err(MetadataError::WeightCount {
                rows: self.rows,
                cols: self.cols,
                actual: self.weights.len(),
            });
        }
        Ok(())
    }

    pub fn encoded_len(&self) -> usize {
        OVERHEAD + self.rows as usize * self.cols as usize
    }
}

fn xor_all(bytes: &[u8]) -> u8 {
    bytes.iter().fold(0, |acc, b| acc ^ b)
}

pub fn encode_metadata(m: &PerceptualMetadata) -> Result<Vec<u8>, MetadataError> {
    m.validate()?;
    let mut out = Vec::with_capacity(m.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(m.version);
    out.push(m.rows);
    out.push(m.cols);
    out.extend_from_slice(&m.weights);
    out.push(xor_all(&out));
    Ok(out)
}

pub fn decode_metadata(b: &[u8]) -> Result<PerceptualMetadata, MetadataError> {
    if b.len() < OVERHEAD {
        return Err(MetadataError::Length {
            expected: OVERHEAD + 1,
            actual: b.len(),
        });
    }
    let magic: [u8; 4] = b[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(MetadataError::BadMagic(magic));
    }
    let version = b[4];
    if version != VERSION {
        return Err(MetadataError::UnsupportedVersion(version));
    }
    let (rows, cols) = (b[5], b[6]);
    if rows == 0 || cols == 0 {
        return Err(MetadataError::EmptyGrid { rows, cols });
    }
    let expected = OVERHEAD + rows as usize * cols as usize;
    if b.len() != expected {
        return Err(MetadataError::Length {
            expected,
            actual: b.len(),
        });
    }
    let (body, stored) = b.split_at(b.len() - 1);
    let computed = xor_all(body);
    if computed != stored[0] {
        return Err(MetadataError::Checksum {
            stored: stored[0],
            computed,
        });
    }
    Ok(PerceptualMetadata {
        version,
        rows,
        cols,
        weights: body[HEADER_LEN..].to_vec(),
    })
}
