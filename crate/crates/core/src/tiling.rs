//! Uniform tile grids, configuration enumeration, and the saliency to
//! per-tile bitrate mapping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::Rect;
use crate::saliency::SaliencyMap;

/// Bounds on the grids considered by [`enumerate_configs`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileLimits {
    pub min_rows: usize,
    pub max_rows: usize,
    pub min_cols: usize,
    pub max_cols: usize,
    pub max_tiles: usize,
    pub min_tile_width: usize,
    pub min_tile_height: usize,
}

impl Default for TileLimits {
    fn default() -> Self {
        TileLimits {
            min_rows: 2,
            max_rows: 10,
            min_cols: 2,
            max_cols: 10,
            max_tiles: 50,
            min_tile_width: 256,
            min_tile_height: 64,
        }
    }
}

/// A rows x cols partition of the frame. Boundaries are even pixel offsets
/// starting at 0 and ending at the frame height (rows) or width (cols).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct TileGrid {
    row_boundaries: Vec<usize>,
    col_boundaries: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    rows: usize,
    cols: usize,
    row_boundaries: Vec<usize>,
    col_boundaries: Vec<usize>,
}

impl TryFrom<GridRepr> for TileGrid {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        if r.row_boundaries.len() != r.rows + 1 || r.col_boundaries.len() != r.cols + 1 {
            return Err(Error::InvalidArgument(format!(
                "{}x{} grid needs {} row and {} column boundaries",
                r.rows,
                r.cols,
                r.rows + 1,
                r.cols + 1
            )));
        }
        TileGrid::from_boundaries(r.row_boundaries, r.col_boundaries)
    }
}

impl From<TileGrid> for GridRepr {
    fn from(g: TileGrid) -> Self {
        GridRepr {
            rows: g.rows(),
            cols: g.cols(),
            row_boundaries: g.row_boundaries,
            col_boundaries: g.col_boundaries,
        }
    }
}

/// Floor-uniform split with the remainder spread over the leading parts,
/// each offset then rounded down to even.
fn split_even(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let rem = total % parts;
    (0..=parts)
        .map(|i| {
            if i == parts {
                total
            } else {
                (i * base + i.min(rem)) & !1
            }
        })
        .collect()
}

fn check_boundaries(b: &[usize], what: &str) -> Result<()> {
    if b.len() < 2 || b[0] != 0 {
        return Err(Error::InvalidArgument(format!(
            "{what} boundaries must start at 0 and contain at least one tile"
        )));
    }
    if b.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "{what} boundaries must be strictly increasing: {b:?}"
        )));
    }
    if b.iter().any(|v| v % 2 != 0) {
        return Err(Error::InvalidArgument(format!(
            "{what} boundaries must be even pixel offsets: {b:?}"
        )));
    }
    Ok(())
}

impl TileGrid {
    pub fn from_boundaries(row_boundaries: Vec<usize>, col_boundaries: Vec<usize>) -> Result<Self> {
        check_boundaries(&row_boundaries, "row")?;
        check_boundaries(&col_boundaries, "column")?;
        if row_boundaries.len() - 1 > 255 || col_boundaries.len() - 1 > 255 {
            return Err(Error::InvalidArgument("at most 255 rows and columns".into()));
        }
        Ok(TileGrid {
            row_boundaries,
            col_boundaries,
        })
    }

    /// Near-uniform grid over a frame with even dimensions.
    pub fn uniform(frame_w: usize, frame_h: usize, rows: usize, cols: usize) -> Result<Self> {
        if frame_w == 0 || frame_h == 0 || frame_w % 2 != 0 || frame_h % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "frame dimensions must be positive and even, got {frame_w}x{frame_h}"
            )));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("grid needs at least one row and column".into()));
        }
        TileGrid::from_boundaries(split_even(frame_h, rows), split_even(frame_w, cols))
    }

    pub fn single(frame_w: usize, frame_h: usize) -> Result<Self> {
        TileGrid::uniform(frame_w, frame_h, 1, 1)
    }

    pub fn rows(&self) -> usize {
        self.row_boundaries.len() - 1
    }

    pub fn cols(&self) -> usize {
        self.col_boundaries.len() - 1
    }

    pub fn num_tiles(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn frame_width(&self) -> usize {
        *self.col_boundaries.last().unwrap()
    }

    pub fn frame_height(&self) -> usize {
        *self.row_boundaries.last().unwrap()
    }

    pub fn row_boundaries(&self) -> &[usize] {
        &self.row_boundaries
    }

    pub fn col_boundaries(&self) -> &[usize] {
        &self.col_boundaries
    }

    pub fn label(&self) -> String {
        format!("{}x{}", self.rows(), self.cols())
    }

    pub fn tile_rect(&self, index: usize) -> Rect {
        let (r, c) = (index / self.cols(), index % self.cols());
        Rect {
            x: self.col_boundaries[c],
            y: self.row_boundaries[r],
            width: self.col_boundaries[c + 1] - self.col_boundaries[c],
            height: self.row_boundaries[r + 1] - self.row_boundaries[r],
        }
    }

    /// Tile rectangles in row-major order.
    pub fn tiles(&self) -> impl Iterator<Item = Rect> + '_ {
        (0..self.num_tiles()).map(|i| self.tile_rect(i))
    }

    /// Row-major index of the tile containing pixel `(x, y)`.
    pub fn tile_at(&self, x: usize, y: usize) -> Option<usize> {
        if x >= self.frame_width() || y >= self.frame_height() {
            return None;
        }
        let c = self.col_boundaries.partition_point(|&b| b <= x) - 1;
        let r = self.row_boundaries.partition_point(|&b| b <= y) - 1;
        Some(r * self.cols() + c)
    }

    pub fn area_fractions(&self) -> Vec<f64> {
        let total = (self.frame_width() * self.frame_height()) as f64;
        self.tiles().map(|t| t.area() as f64 / total).collect()
    }

    pub fn min_tile_width(&self) -> usize {
        self.col_boundaries.windows(2).map(|w| w[1] - w[0]).min().unwrap()
    }

    pub fn min_tile_height(&self) -> usize {
        self.row_boundaries.windows(2).map(|w| w[1] - w[0]).min().unwrap()
    }

    pub fn check_frame(&self, width: usize, height: usize) -> Result<()> {
        if (self.frame_width(), self.frame_height()) != (width, height) {
            return Err(Error::dims(
                (self.frame_width(), self.frame_height()),
                (width, height),
            ));
        }
        Ok(())
    }
}

impl std::fmt::Display for TileGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows(), self.cols())
    }
}

/// Result of [`enumerate_configs`]. `fallback` is set when nothing satisfied
/// the limits and the single-tile grid was returned instead.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Configs {
    pub grids: Vec<TileGrid>,
    pub fallback: bool,
}

/// All uniform grids allowed by `limits`, ordered by rows then cols.
pub fn enumerate_configs(frame_w: usize, frame_h: usize, limits: &TileLimits) -> Result<Configs> {
    if frame_w == 0 || frame_h == 0 || frame_w % 2 != 0 || frame_h % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "frame dimensions must be positive and even, got {frame_w}x{frame_h}"
        )));
    }
    let mut grids = Vec::new();
    for rows in limits.min_rows.max(1)..=limits.max_rows.min(255) {
        for cols in limits.min_cols.max(1)..=limits.max_cols.min(255) {
            if rows * cols > limits.max_tiles || rows > frame_h / 2 || cols > frame_w / 2 {
                continue;
            }
            let Ok(grid) = TileGrid::uniform(frame_w, frame_h, rows, cols) else {
                continue;
            };
            if grid.min_tile_width() >= limits.min_tile_width
                && grid.min_tile_height() >= limits.min_tile_height
            {
                grids.push(grid);
            }
        }
    }
    if grids.is_empty() {
        return Ok(Configs {
            grids: vec![TileGrid::single(frame_w, frame_h)?],
            fallback: true,
        });
    }
    Ok(Configs {
        grids,
        fallback: false,
    })
}

/// Per-tile weight: maximum saliency inside each tile, row-major.
pub fn tile_weights(map: &SaliencyMap, grid: &TileGrid) -> Result<Vec<u8>> {
    grid.check_frame(map.width(), map.height())?;
    Ok(grid.tiles().map(|t| map.plane().max_in(t)).collect())
}

pub const DEFAULT_FLOOR_FRAC: f64 = 0.10;

fn check_rate_params(target_kbps: u32, floor_frac: f64) -> Result<u32> {
    if target_kbps < 10 {
        return Err(Error::InvalidArgument(format!(
            "target bitrate must be at least 10 kbps, got {target_kbps}"
        )));
    }
    if !(floor_frac > 0.0 && floor_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "floor fraction must lie in (0, 1], got {floor_frac}"
        )));
    }
    let floor = (floor_frac * target_kbps as f64).round() as u32;
    if floor == 0 {
        return Err(Error::InvalidArgument(format!(
            "floor fraction {floor_frac} of {target_kbps} kbps rounds to zero"
        )));
    }
    Ok(floor)
}

fn linear_rate(weight: u8, target_kbps: u32, floor: u32) -> u32 {
    let span = (target_kbps - floor) as f64;
    (floor as f64 + weight as f64 / 255.0 * span).round() as u32
}

/// Linear saliency to bitrate law: weight 0 maps to `round(floor_frac * target)`,
/// weight 255 to `target`.
pub fn bitrate_for_weight(weight: u8, target_kbps: u32, floor_frac: f64) -> Result<u32> {
    let floor = check_rate_params(target_kbps, floor_frac)?;
    Ok(linear_rate(weight, target_kbps, floor))
}

pub fn map_bitrates(weights: &[u8], target_kbps: u32, floor_frac: f64) -> Result<Vec<u32>> {
    let floor = check_rate_params(target_kbps, floor_frac)?;
    Ok(weights
        .iter()
        .map(|&w| linear_rate(w, target_kbps, floor))
        .collect())
}

/// Per-tile weights and bitrates for one segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileQualityMap {
    pub grid: TileGrid,
    pub weights: Vec<u8>,
    pub bitrates_kbps: Vec<u32>,
    pub target_kbps: u32,
    pub floor_frac: f64,
}

impl TileQualityMap {
    pub fn new(grid: TileGrid, weights: Vec<u8>, target_kbps: u32, floor_frac: f64) -> Result<Self> {
        if weights.len() != grid.num_tiles() {
            return Err(Error::InvalidArgument(format!(
                "{} grid needs {} weights, got {}",
                grid,
                grid.num_tiles(),
                weights.len()
            )));
        }
        let bitrates_kbps = map_bitrates(&weights, target_kbps, floor_frac)?;
        Ok(TileQualityMap {
            grid,
            weights,
            bitrates_kbps,
            target_kbps,
            floor_frac,
        })
    }

    /// Every tile at the same rate; the conventional single-quality encode.
    pub fn uniform(grid: TileGrid, target_kbps: u32) -> Result<Self> {
        let n = grid.num_tiles();
        TileQualityMap::new(grid, vec![255; n], target_kbps, DEFAULT_FLOOR_FRAC)
    }

    pub fn from_saliency(
        map: &SaliencyMap,
        grid: TileGrid,
        target_kbps: u32,
        floor_frac: f64,
    ) -> Result<Self> {
        let weights = tile_weights(map, &grid)?;
        TileQualityMap::new(grid, weights, target_kbps, floor_frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plane::Plane;
    use proptest::prelude::*;

    /// Independent oracle: the literal double loop over (rows, cols) with the
    /// constraints checked on boundaries recomputed from scratch.
    fn brute_force(w: usize, h: usize, l: &TileLimits) -> Vec<(usize, usize)> {
        let offsets = |total: usize, n: usize| -> Vec<usize> {
            let mut v = Vec::new();
            let mut acc = 0;
            for i in 0..n {
                v.push(acc - acc % 2);
                acc += total / n + usize::from(i < total % n);
            }
            v.push(total);
            v
        };
        let mut out = Vec::new();
        for r in l.min_rows..=l.max_rows {
            for c in l.min_cols..=l.max_cols {
                if r * c > l.max_tiles {
                    continue;
                }
                let rb = offsets(h, r);
                let cb = offsets(w, c);
                let ok_h = rb.windows(2).all(|p| p[1] > p[0] && p[1] - p[0] >= l.min_tile_height);
                let ok_w = cb.windows(2).all(|p| p[1] > p[0] && p[1] - p[0] >= l.min_tile_width);
                if ok_h && ok_w {
                    out.push((r, c));
                }
            }
        }
        out
    }

    #[test]
    fn hd_defaults_give_49_grids() {
        let configs = enumerate_configs(1920, 1080, &TileLimits::default()).unwrap();
        assert!(!configs.fallback);
        let got: Vec<_> = configs.grids.iter().map(|g| (g.rows(), g.cols())).collect();
        let oracle = brute_force(1920, 1080, &TileLimits::default());
        assert_eq!(oracle.len(), 49);
        assert_eq!(got, oracle);
        assert!(got.iter().all(|&(_, c)| c <= 7));
    }

    #[test]
    fn tiny_frame_falls_back() {
        let configs = enumerate_configs(256, 64, &TileLimits::default()).unwrap();
        assert!(configs.fallback);
        assert_eq!(configs.grids.len(), 1);
        assert_eq!(configs.grids[0].num_tiles(), 1);
    }

    #[test]
    fn uhd_includes_5x10_and_10x5() {
        let configs = enumerate_configs(3840, 2160, &TileLimits::default()).unwrap();
        let has = |r, c| configs.grids.iter().any(|g| g.rows() == r && g.cols() == c);
        assert!(has(5, 10));
        assert!(has(10, 5));
        assert!(has(2, 2));
    }

    #[test]
    fn odd_frames_rejected() {
        assert!(enumerate_configs(1921, 1080, &TileLimits::default()).is_err());
        assert!(TileGrid::uniform(0, 10, 1, 1).is_err());
    }

    #[test]
    fn grid_serde_validates() {
        let g = TileGrid::uniform(640, 360, 3, 4).unwrap();
        let json = serde_json::to_string(&g).unwrap();
        assert_eq!(serde_json::from_str::<TileGrid>(&json).unwrap(), g);
        let bad = r#"{"rows":1,"cols":1,"row_boundaries":[0,3],"col_boundaries":[0,4]}"#;
        assert!(serde_json::from_str::<TileGrid>(bad).is_err());
        let bad = r#"{"rows":2,"cols":1,"row_boundaries":[0,4],"col_boundaries":[0,4]}"#;
        assert!(serde_json::from_str::<TileGrid>(bad).is_err());
    }

    #[test]
    fn weights_follow_tile_maxima() {
        let grid = TileGrid::uniform(8, 8, 2, 2).unwrap();
        let zero = SaliencyMap::new(Plane::filled(8, 8, 0));
        assert_eq!(tile_weights(&zero, &grid).unwrap(), vec![0; 4]);

        let quad = SaliencyMap::new(Plane::from_fn(8, 8, |x, y| match (x < 4, y < 4) {
            (true, true) => 10,
            (false, true) => 20,
            (true, false) => 30,
            (false, false) => 40,
        }));
        assert_eq!(tile_weights(&quad, &grid).unwrap(), vec![10, 20, 30, 40]);

        let mut spot = Plane::filled(8, 8, 0);
        spot.set(2, 1, 255);
        assert_eq!(
            tile_weights(&SaliencyMap::new(spot), &grid).unwrap(),
            vec![255, 0, 0, 0]
        );

        let wrong = SaliencyMap::new(Plane::filled(6, 8, 0));
        assert!(tile_weights(&wrong, &grid).is_err());
    }

    #[test]
    fn bitrate_law_examples() {
        assert_eq!(bitrate_for_weight(255, 20000, 0.1).unwrap(), 20000);
        assert_eq!(bitrate_for_weight(0, 20000, 0.1).unwrap(), 2000);
        assert_eq!(bitrate_for_weight(128, 20000, 0.1).unwrap(), 11035);
        assert!(bitrate_for_weight(0, 9, 0.1).is_err());
        assert!(bitrate_for_weight(0, 100, 0.0).is_err());
        assert!(bitrate_for_weight(0, 100, 1.5).is_err());
        assert!(bitrate_for_weight(0, 10, 0.01).is_err());
        assert_eq!(bitrate_for_weight(0, 100, 1.0).unwrap(), 100);
    }

    #[test]
    fn quality_map_checks_lengths() {
        let grid = TileGrid::uniform(8, 8, 2, 2).unwrap();
        assert!(TileQualityMap::new(grid.clone(), vec![0; 3], 1000, 0.1).is_err());
        let q = TileQualityMap::new(grid, vec![0, 85, 170, 255], 1000, 0.1).unwrap();
        assert_eq!(q.bitrates_kbps, vec![100, 400, 700, 1000]);
    }

    proptest! {
        #[test]
        fn uniform_grids_partition_the_frame(
            half_w in 1usize..2000, half_h in 1usize..1200, rows in 1usize..12, cols in 1usize..12
        ) {
            let (w, h) = (half_w * 2, half_h * 2);
            prop_assume!(rows <= h / 2 && cols <= w / 2);
            let grid = TileGrid::uniform(w, h, rows, cols).unwrap();
            let area: usize = grid.tiles().map(|t| t.area()).sum();
            prop_assert_eq!(area, w * h);
            // every pixel lands in exactly one tile, and tile_at agrees
            for &(x, y) in &[(0, 0), (w - 1, h - 1), (w / 3, h / 2), (w - 1, 0)] {
                let hits: Vec<usize> = (0..grid.num_tiles())
                    .filter(|&i| grid.tile_rect(i).contains(x, y))
                    .collect();
                prop_assert_eq!(hits.len(), 1);
                prop_assert_eq!(grid.tile_at(x, y), Some(hits[0]));
            }
            let widths: Vec<usize> = grid.col_boundaries().windows(2).map(|p| p[1] - p[0]).collect();
            let heights: Vec<usize> = grid.row_boundaries().windows(2).map(|p| p[1] - p[0]).collect();
            prop_assert!(widths.iter().max().unwrap() - widths.iter().min().unwrap() <= 2);
            prop_assert!(heights.iter().max().unwrap() - heights.iter().min().unwrap() <= 2);
        }

        #[test]
        fn enumeration_matches_oracle(
            half_w in 32usize..2000, half_h in 16usize..1200,
            min_w in 16usize..300, min_h in 16usize..100, max_tiles in 4usize..60
        ) {
            let limits = TileLimits { min_tile_width: min_w, min_tile_height: min_h, max_tiles, ..TileLimits::default() };
            let (w, h) = (half_w * 2, half_h * 2);
            let configs = enumerate_configs(w, h, &limits).unwrap();
            let oracle = brute_force(w, h, &limits);
            if oracle.is_empty() {
                prop_assert!(configs.fallback);
            } else {
                let got: Vec<_> = configs.grids.iter().map(|g| (g.rows(), g.cols())).collect();
                prop_assert_eq!(got, oracle);
            }
        }

        #[test]
        fn bitrates_monotone_and_exact(target in 10u32..200_000, frac_milli in 1u32..=1000) {
            let frac = frac_milli as f64 / 1000.0;
            prop_assume!((frac * target as f64).round() >= 1.0);
            let all: Vec<u8> = (0..=255).collect();
            let rates = map_bitrates(&all, target, frac).unwrap();
            prop_assert_eq!(rates[255], target);
            prop_assert_eq!(rates[0], (frac * target as f64).round() as u32);
            prop_assert!(rates.windows(2).all(|p| p[0] <= p[1]));
        }

        #[test]
        fn weight_ignores_pixels_outside_tile(seed in any::<u64>(), tile in 0usize..6) {
            let grid = TileGrid::uniform(24, 16, 2, 3).unwrap();
            let base = Plane::from_fn(24, 16, |x, y| ((x * 31 + y * 17 + seed as usize) % 251) as u8);
            let rect = grid.tile_rect(tile);
            let noisy = Plane::from_fn(24, 16, |x, y| {
                if rect.contains(x, y) { base.get(x, y) } else { ((x * 7 + y * 13) ^ seed as usize) as u8 }
            });
            let a = tile_weights(&SaliencyMap::new(base), &grid).unwrap();
            let b = tile_weights(&SaliencyMap::new(noisy), &grid).unwrap();
            prop_assert_eq!(a[tile], b[tile]);
        }
    }
}
