//! Library configuration, read from `vignette.toml` at the library root.
//!
//! ```toml
//! segment_len_s = 12
//! floor_frac = 0.1
//! search_mode = "heuristic"
//! alpha = 0.5
//!
//! [encoder]
//! kind = "external"
//! command_template = "x265-tile {input} {output} {bitrate_kbps} {crop_x} {crop_y} {crop_w} {crop_h}"
//! worker_limit = 4
//!
//! [tiles]
//! max_tiles = 50
//!
//! [motion]
//! extractor = "mv-dump {input} > {output}"
//!
//! [[policies]]
//! kind = "popularity_decay"
//! threshold = 10
//! action = "vignette_squeeze"
//! squeeze_target_kbps = 1000
//! ```
//!
//! Every key is optional. `VIGNETTE_ENCODER`, when set, replaces the encoder
//! with the external backend running that command template.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encode::EncoderProfile;
use crate::error::{Error, Result};
use crate::motion::BlockMatchParams;
use crate::search::SearchMode;
use crate::storage::Policy;
use crate::tiling::{TileLimits, DEFAULT_FLOOR_FRAC};

pub const CONFIG_FILE: &str = "vignette.toml";
pub const DEFAULT_SEGMENT_LEN_S: f64 = 12.0;
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    /// Command template with `{input}` and `{output}`; when absent the
    /// built-in block matcher is used.
    pub extractor: Option<String>,
    pub block_match: BlockMatchParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub encoder: EncoderProfile,
    pub tiles: TileLimits,
    pub floor_frac: f64,
    pub segment_len_s: f64,
    pub search_mode: SearchMode,
    pub alpha: f64,
    pub motion: MotionConfig,
    pub policies: Vec<Policy>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            encoder: EncoderProfile::default(),
            tiles: TileLimits::default(),
            floor_frac: DEFAULT_FLOOR_FRAC,
            segment_len_s: DEFAULT_SEGMENT_LEN_S,
            search_mode: SearchMode::default(),
            alpha: DEFAULT_ALPHA,
            motion: MotionConfig::default(),
            policies: Vec::new(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let c: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads `<root>/vignette.toml`, or the defaults when it does not exist,
    /// then applies the environment override.
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let path = root.as_ref().join(CONFIG_FILE);
        let config = match std::fs::read_to_string(&path) {
            Ok(text) => Config::parse(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Config::default(),
            Err(e) => return Err(Error::io(path, e)),
        };
        Ok(config.with_env_override())
    }

    pub fn with_env_override(mut self) -> Self {
        self.encoder = self.encoder.with_env_override();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.floor_frac > 0.0 && self.floor_frac <= 1.0) {
            return Err(Error::Config(format!(
                "floor_frac must lie in (0, 1], got {}",
                self.floor_frac
            )));
        }
        if !(self.segment_len_s >= 1.0 && self.segment_len_s.is_finite()) {
            return Err(Error::Config(format!(
                "segment_len_s must be at least 1, got {}",
                self.segment_len_s
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.encoder.worker_limit == 0 {
            return Err(Error::Config("encoder.worker_limit must be at least 1".into()));
        }
        for p in &self.policies {
            p.validate()?;
        }
        Ok(())
    }
}
