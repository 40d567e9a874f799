//! Tile-configuration selection for a segment.
//!
//! Exhaustive search encodes every candidate and keeps the one with the best
//! eye-weighted PSNR. The heuristic never touches the encoder: it scores each
//! candidate by how homogeneous the motion inside its tiles is and keeps the
//! most homogeneous one.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encode::{Encoder, OutputSpec, SegmentSource};
use crate::error::{Error, Result};
use crate::motion::MotionField;
use crate::saliency::SaliencyMap;
use crate::tiling::{TileGrid, TileQualityMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    #[default]
    Heuristic,
    Exhaustive,
}

impl std::str::FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic" => Ok(SearchMode::Heuristic),
            "exhaustive" => Ok(SearchMode::Exhaustive),
            other => Err(Error::InvalidArgument(format!(
                "unknown search mode `{other}` (expected heuristic or exhaustive)"
            ))),
        }
    }
}

impl std::fmt::Display for SearchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SearchMode::Heuristic => "heuristic",
            SearchMode::Exhaustive => "exhaustive",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum CandidateScore {
    Exhaustive {
        size_bytes: u64,
        psnr_db: f64,
        ewpsnr_db: f64,
    },
    Heuristic {
        deviation: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateReport {
    pub grid: TileGrid,
    pub score: CandidateScore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub mode: SearchMode,
    pub chosen: TileGrid,
    pub per_config: Vec<CandidateReport>,
}

impl SearchResult {
    pub fn chosen_report(&self) -> &CandidateReport {
        self.per_config
            .iter()
            .find(|r| r.grid == self.chosen)
            .expect("chosen grid is always among the candidates")
    }
}

/// Scores closer than this are treated as equal, so floating-point noise in
/// otherwise identical deviations falls through to the tie-breaks.
const SCORE_EPS: f64 = 1e-9;

fn approx_cmp(a: f64, b: f64) -> Ordering {
    if (a - b).abs() <= SCORE_EPS * a.abs().max(b.abs()).max(1.0) {
        Ordering::Equal
    } else {
        a.partial_cmp(&b).unwrap_or(Ordering::Equal)
    }
}

fn by_size(g: &TileGrid) -> (usize, usize, usize) {
    (g.num_tiles(), g.rows(), g.cols())
}

/// Mean over tiles of the population standard deviation of motion-vector
/// magnitudes, attributing each vector to the tile holding its block origin.
/// Tiles with fewer than two vectors contribute zero.
pub fn motion_deviation(fields: &[MotionField], grid: &TileGrid) -> f64 {
    let n = grid.num_tiles();
    let mut per_tile: Vec<Vec<f64>> = vec![Vec::new(); n];
    for field in fields {
        for mv in &field.entries {
            if let Some(t) = grid.tile_at(mv.block_x as usize, mv.block_y as usize) {
                per_tile[t].push(mv.magnitude());
            }
        }
    }
    let total: f64 = per_tile
        .iter()
        .map(|m| {
            if m.len() < 2 {
                return 0.0;
            }
            let mean = m.iter().sum::<f64>() / m.len() as f64;
            let var = m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m.len() as f64;
            var.sqrt()
        })
        .sum();
    total / n as f64
}

/// Picks the candidate with minimum motion deviation; ties go to fewer
/// tiles, then fewer rows, then fewer columns.
pub fn heuristic_search(fields: &[MotionField], candidates: &[TileGrid]) -> Result<SearchResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate tile configurations".into()));
    }
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|g| motion_deviation(fields, g))
        .collect();
    let best = (0..candidates.len())
        .min_by(|&a, &b| {
            approx_cmp(scores[a], scores[b])
                .then_with(|| by_size(&candidates[a]).cmp(&by_size(&candidates[b])))
        })
        .unwrap();
    Ok(SearchResult {
        mode: SearchMode::Heuristic,
        chosen: candidates[best].clone(),
        per_config: candidates
            .iter()
            .zip(scores)
            .map(|(g, deviation)| CandidateReport {
                grid: g.clone(),
                score: CandidateScore::Heuristic { deviation },
            })
            .collect(),
    })
}

/// Encodes every candidate at saliency-mapped bitrates and keeps the best
/// EWPSNR; ties go to the smaller output, then fewer tiles.
pub fn exhaustive_search(
    segment: &SegmentSource,
    map: &SaliencyMap,
    candidates: &[TileGrid],
    target_kbps: u32,
    floor_frac: f64,
    encoder: &dyn Encoder,
    workers: usize,
) -> Result<SearchResult> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate tile configurations".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let scores: Vec<CandidateScore> = pool.install(|| {
        candidates
            .par_iter()
            .enumerate()
            .map(|(i, grid)| {
                let fail = |e: Error| Error::Encoder {
                    context: format!("candidate {grid}"),
                    reason: e.to_string(),
                };
                let quality = TileQualityMap::from_saliency(map, grid.clone(), target_kbps, floor_frac)?;
                let out = encoder.needs_output().then(|| OutputSpec {
                    dir: scratch.path().join(format!("c{i}")),
                    stem: "seg".into(),
                });
                let encoded = encoder
                    .transcode_tiled(segment, &quality, out.as_ref())
                    .map_err(fail)?;
                let missing = || {
                    fail(Error::Config(
                        "encoder reported no per-tile quality; configure a decode template".into(),
                    ))
                };
                let psnr_db = encoded.frame_psnr().ok_or_else(missing)?;
                let ewpsnr_db = encoded.ewpsnr(map).ok_or_else(missing)??;
                for f in &encoded.files {
                    let _ = std::fs::remove_file(f);
                }
                Ok(CandidateScore::Exhaustive {
                    size_bytes: encoded.total_size_bytes,
                    psnr_db,
                    ewpsnr_db,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let key = |s: &CandidateScore| match *s {
        CandidateScore::Exhaustive { size_bytes, ewpsnr_db, .. } => (ewpsnr_db, size_bytes),
        CandidateScore::Heuristic { .. } => unreachable!(),
    };
    let best = (0..candidates.len())
        .min_by(|&a, &b| {
            let (ea, sa) = key(&scores[a]);
            let (eb, sb) = key(&scores[b]);
            approx_cmp(eb, ea)
                .then(sa.cmp(&sb))
                .then_with(|| by_size(&candidates[a]).cmp(&by_size(&candidates[b])))
        })
        .unwrap();
    Ok(SearchResult {
        mode: SearchMode::Exhaustive,
        chosen: candidates[best].clone(),
        per_config: candidates
            .iter()
            .cloned()
            .zip(scores)
            .map(|(grid, score)| CandidateReport { grid, score })
            .collect(),
    })
}
