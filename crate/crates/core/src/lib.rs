//! Saliency-driven tiled video compression.
//!
//! Pipeline per storage segment: aggregate a saliency map, pick a tile grid,
//! map tile saliency to bitrates, encode the tiles, and embed a compact
//! description of the grid and weights in the output container.
//! [`storage::Library`] runs that pipeline over whole videos.

pub mod config;
pub mod container;
pub mod cost;
pub mod encode;
pub mod error;
pub mod metadata;
pub mod metrics;
pub mod motion;
pub mod plane;
pub mod saliency;
pub mod search;
pub mod storage;
pub mod tiling;
pub mod video;

pub use error::{Error, Result};
pub use metadata::{decode_metadata, encode_metadata, MetadataError, PerceptualMetadata};
pub use plane::{Plane, Rect};
pub use saliency::{FixationMap, SaliencyMap};
pub use tiling::{TileGrid, TileLimits, TileQualityMap};
