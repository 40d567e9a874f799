//! Tiled transcoding through a pluggable encoder backend.
//!
//! The external backend crops each tile out of the segment and encodes it as
//! an independent stream by running a shell command template once per tile.
//! The mock backend is a closed-form rate-distortion model used for hermetic
//! tests and fast search experiments:
//!
//! ```text
//! size   = sum_t b_t * 1000 * duration * A_t / 8 + H * tiles + lambda * crossings
//! psnr_t = clamp(lo, hi, beta0 + beta1 * log2(b_t / (rho * c_t)))
//! ```
//!
//! where `A_t` is the tile's share of the frame area, `c_t >= 1` its motion
//! complexity and `crossings` the number of motion vectors whose displaced
//! endpoint lands in a different tile than their origin.

use std::io::{self, BufWriter, Read, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{mse_from_psnr, psnr, psnr_from_mse, saliency_weight, FramePair};
use crate::motion::{run_shell, shell_quote, MotionField};
use crate::plane::Rect;
use crate::saliency::SaliencyMap;
use crate::tiling::{TileGrid, TileQualityMap};
use crate::video;

pub const ENCODER_ENV: &str = "VIGNETTE_ENCODER";

pub const PLACEHOLDERS: [&str; 8] = [
    "{input}",
    "{output}",
    "{bitrate_kbps}",
    "{crop_x}",
    "{crop_y}",
    "{crop_w}",
    "{crop_h}",
    "{duration_s}",
];

/// Placeholders a tile encode cannot do without.
pub const REQUIRED_PLACEHOLDERS: [&str; 7] = [
    "{input}",
    "{output}",
    "{bitrate_kbps}",
    "{crop_x}",
    "{crop_y}",
    "{crop_w}",
    "{crop_h}",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockRdParams {
    pub header_bytes_per_tile: f64,
    pub boundary_cost_bytes: f64,
    pub psnr_base_db: f64,
    pub psnr_slope_db: f64,
    pub ref_rate_kbps: f64,
    pub psnr_min_db: f64,
    pub psnr_max_db: f64,
    /// Mean motion-vector magnitude (pixels) that doubles a tile's complexity.
    pub motion_scale_px: f64,
}

impl Default for MockRdParams {
    fn default() -> Self {
        MockRdParams {
            header_bytes_per_tile: 200.0,
            boundary_cost_bytes: 8.0,
            psnr_base_db: 30.0,
            psnr_slope_db: 3.0,
            ref_rate_kbps: 250.0,
            psnr_min_db: 20.0,
            psnr_max_db: 50.0,
            motion_scale_px: 16.0,
        }
    }
}

impl MockRdParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("header_bytes_per_tile", self.header_bytes_per_tile),
            ("boundary_cost_bytes", self.boundary_cost_bytes),
            ("psnr_base_db", self.psnr_base_db),
            ("psnr_slope_db", self.psnr_slope_db),
            ("ref_rate_kbps", self.ref_rate_kbps),
            ("psnr_min_db", self.psnr_min_db),
            ("psnr_max_db", self.psnr_max_db),
            ("motion_scale_px", self.motion_scale_px),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("mock parameter {name} must be positive, got {v}")));
        }
        if self.psnr_min_db >= self.psnr_max_db {
            return Err(Error::Config("mock PSNR clamp must satisfy low < high".into()));
        }
        Ok(())
    }

    pub fn tile_psnr(&self, bitrate_kbps: f64, complexity: f64) -> f64 {
        let raw = self.psnr_base_db
            + self.psnr_slope_db * (bitrate_kbps / (self.ref_rate_kbps * complexity)).log2();
        raw.clamp(self.psnr_min_db, self.psnr_max_db)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MockOutcome {
    pub size_bytes: u64,
    pub payload_bytes_per_tile: Vec<f64>,
    pub per_tile_psnr_db: Vec<f64>,
}

/// Closed-form encode of one segment under the mock model.
pub fn mock_encode(
    params: &MockRdParams,
    quality: &TileQualityMap,
    duration_s: f64,
    complexity: &[f64],
    crossings: u64,
) -> Result<MockOutcome> {
    let n = quality.grid.num_tiles();
    if complexity.len() != n || quality.bitrates_kbps.len() != n {
        return Err(Error::InvalidArgument(format!(
            "mock encode needs {n} complexities and bitrates, got {} and {}",
            complexity.len(),
            quality.bitrates_kbps.len()
        )));
    }
    if let Some(c) = complexity.iter().find(|c| !(**c >= 1.0)) {
        return Err(Error::InvalidArgument(format!("tile complexity must be >= 1, got {c}")));
    }
    let fractions = quality.grid.area_fractions();
    let payload: Vec<f64> = quality
        .bitrates_kbps
        .iter()
        .zip(&fractions)
        .map(|(&b, &a)| b as f64 * 1000.0 * duration_s * a / 8.0)
        .collect();
    let total = payload.iter().sum::<f64>()
        + params.header_bytes_per_tile * n as f64
        + params.boundary_cost_bytes * crossings as f64;
    let per_tile_psnr_db = quality
        .bitrates_kbps
        .iter()
        .zip(complexity)
        .map(|(&b, &c)| params.tile_psnr(b as f64, c))
        .collect();
    Ok(MockOutcome {
        size_bytes: total.round() as u64,
        payload_bytes_per_tile: payload,
        per_tile_psnr_db,
    })
}

/// `c_t = 1 + mean |mv| / motion_scale_px` over the vectors originating in tile t.
pub fn tile_complexity(grid: &TileGrid, fields: &[MotionField], motion_scale_px: f64) -> Vec<f64> {
    let n = grid.num_tiles();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for field in fields {
        for mv in &field.entries {
            if let Some(t) = grid.tile_at(mv.block_x as usize, mv.block_y as usize) {
                sum[t] += mv.magnitude();
                count[t] += 1;
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(&s, &c)| if c == 0 { 1.0 } else { 1.0 + s / c as f64 / motion_scale_px })
        .collect()
}

/// Vectors whose displaced endpoint (clamped to the frame) falls in a
/// different tile than their origin.
pub fn boundary_crossings(grid: &TileGrid, fields: &[MotionField]) -> u64 {
    let (w, h) = (grid.frame_width() as i64, grid.frame_height() as i64);
    fields
        .iter()
        .flat_map(|f| &f.entries)
        .filter(|mv| {
            let ex = (mv.block_x as i64 + mv.dx as i64).clamp(0, w - 1) as usize;
            let ey = (mv.block_y as i64 + mv.dy as i64).clamp(0, h - 1) as usize;
            grid.tile_at(mv.block_x as usize, mv.block_y as usize) != grid.tile_at(ex, ey)
        })
        .count() as u64
}

/// Frame PSNR from per-tile PSNRs: per-tile MSEs averaged by area.
pub fn frame_psnr_from_tiles(per_tile_psnr_db: &[f64], area_fractions: &[f64]) -> Result<f64> {
    if per_tile_psnr_db.len() != area_fractions.len() || per_tile_psnr_db.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} tile PSNRs for {} area fractions",
            per_tile_psnr_db.len(),
            area_fractions.len()
        )));
    }
    let total: f64 = area_fractions.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "area fractions sum to {total}, expected 1"
        )));
    }
    if per_tile_psnr_db.windows(2).all(|w| w[0] == w[1]) {
        return Ok(per_tile_psnr_db[0]);
    }
    let mse: f64 = per_tile_psnr_db
        .iter()
        .zip(area_fractions)
        .map(|(&p, &a)| a * mse_from_psnr(p))
        .sum();
    Ok(psnr_from_mse(mse))
}

/// Saliency-weighted PSNR from per-tile PSNRs, assuming each tile's error is
/// spread evenly over its pixels. Uses the same per-pixel weight as
/// [`crate::metrics::ewpsnr`].
pub fn ewpsnr_from_tiles(per_tile_psnr_db: &[f64], grid: &TileGrid, map: &SaliencyMap) -> Result<f64> {
    grid.check_frame(map.width(), map.height())?;
    if per_tile_psnr_db.len() != grid.num_tiles() {
        return Err(Error::InvalidArgument("one PSNR per tile required".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (rect, &p) in grid.tiles().zip(per_tile_psnr_db) {
        let mass: f64 = (rect.y..rect.y + rect.height)
            .map(|y| {
                map.plane().row(y)[rect.x..rect.x + rect.width]
                    .iter()
                    .map(|&s| saliency_weight(s))
                    .sum::<f64>()
            })
            .sum();
        num += mass * mse_from_psnr(p);
        den += mass;
    }
    Ok(psnr_from_mse(num / den))
}

/// One segment as seen by an encoder.
#[derive(Clone, Debug)]
pub struct SegmentSource {
    pub width: usize,
    pub height: usize,
    pub duration_s: f64,
    /// Raw y4m source and the frame range belonging to this segment.
    pub source: Option<(PathBuf, Range<usize>)>,
    pub motion: Vec<MotionField>,
}

impl SegmentSource {
    pub fn synthetic(width: usize, height: usize, duration_s: f64, motion: Vec<MotionField>) -> Self {
        SegmentSource {
            width,
            height,
            duration_s,
            source: None,
            motion,
        }
    }
}

/// Where an encoder should place its output: `<dir>/<stem>.mp4` for a single
/// stream, `<dir>/<stem>.tile<k>.mp4` per tile otherwise.
#[derive(Clone, Debug)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub stem: String,
}

impl OutputSpec {
    pub fn segment_path(&self) -> PathBuf {
        self.dir.join(format!("{}.mp4", self.stem))
    }

    pub fn tile_path(&self, index: usize) -> PathBuf {
        self.dir.join(format!("{}.tile{index}.mp4", self.stem))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TileStream {
    Mock { payload_bytes: f64 },
    File { path: PathBuf, size_bytes: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSegment {
    pub quality: TileQualityMap,
    pub tile_streams: Vec<TileStream>,
    pub total_size_bytes: u64,
    pub per_tile_psnr_db: Option<Vec<f64>>,
    /// Container files written for this segment, if any.
    pub files: Vec<PathBuf>,
}

impl EncodedSegment {
    pub fn grid(&self) -> &TileGrid {
        &self.quality.grid
    }

    pub fn frame_psnr(&self) -> Option<f64> {
        let p = self.per_tile_psnr_db.as_ref()?;
        frame_psnr_from_tiles(p, &self.grid().area_fractions()).ok()
    }

    pub fn ewpsnr(&self, map: &SaliencyMap) -> Option<Result<f64>> {
        let p = self.per_tile_psnr_db.as_ref()?;
        Some(ewpsnr_from_tiles(p, self.grid(), map))
    }
}

pub trait Encoder: Send + Sync {
    fn transcode_tiled(
        &self,
        segment: &SegmentSource,
        quality: &TileQualityMap,
        output: Option<&OutputSpec>,
    ) -> Result<EncodedSegment>;

    /// Number of `transcode_tiled` calls so far.
    fn invocations(&self) -> usize;

    /// Whether `transcode_tiled` must be given an output location.
    fn needs_output(&self) -> bool {
        false
    }

    fn name(&self) -> &'static str;
}

#[derive(Debug, Default)]
pub struct MockEncoder {
    params: MockRdParams,
    calls: AtomicUsize,
}

impl MockEncoder {
    pub fn new(params: MockRdParams) -> Result<Self> {
        params.validate()?;
        Ok(MockEncoder {
            params,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn params(&self) -> &MockRdParams {
        &self.params
    }
}

impl Encoder for MockEncoder {
    fn transcode_tiled(
        &self,
        segment: &SegmentSource,
        quality: &TileQualityMap,
        output: Option<&OutputSpec>,
    ) -> Result<EncodedSegment> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        quality.grid.check_frame(segment.width, segment.height)?;
        let complexity = tile_complexity(&quality.grid, &segment.motion, self.params.motion_scale_px);
        let crossings = boundary_crossings(&quality.grid, &segment.motion);
        let outcome = mock_encode(&self.params, quality, segment.duration_s, &complexity, crossings)?;
        let mut files = Vec::new();
        if let Some(out) = output {
            let path = out.segment_path();
            write_mock_container(&path, outcome.size_bytes)?;
            files.push(path);
        }
        Ok(EncodedSegment {
            quality: quality.clone(),
            tile_streams: outcome
                .payload_bytes_per_tile
                .iter()
                .map(|&p| TileStream::Mock { payload_bytes: p })
                .collect(),
            total_size_bytes: outcome.size_bytes,
            per_tile_psnr_db: Some(outcome.per_tile_psnr_db),
            files,
        })
    }

    fn invocations(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn name(&self) -> &'static str {
        "mock"
    }
}

/// A minimal ISO-BMFF file whose `mdat` payload has `payload_bytes` bytes.
pub fn write_mock_container(path: &Path, payload_bytes: u64) -> Result<()> {
    let tmp_dir = crate::plane::parent_dir(path);
    std::fs::create_dir_all(tmp_dir).map_err(|e| Error::io(tmp_dir, e))?;
    let tmp = tempfile::NamedTempFile::new_in(tmp_dir).map_err(|e| Error::io(tmp_dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        let io_err = |e| Error::io(path, e);
        // ftyp: major brand isom, minor 0x200, compatible isom/iso2/mp41
        let ftyp: [&[u8]; 5] = [b"ftyp", b"isom", &[0, 0, 2, 0], b"isom", b"mp41"];
        let ftyp_len: usize = ftyp.iter().map(|p| p.len()).sum::<usize>() + 4;
        w.write_all(&(ftyp_len as u32).to_be_bytes()).map_err(io_err)?;
        for part in ftyp {
            w.write_all(part).map_err(io_err)?;
        }
        w.write_all(&8u32.to_be_bytes()).map_err(io_err)?;
        w.write_all(b"moov").map_err(io_err)?;
        if payload_bytes + 8 <= u32::MAX as u64 {
            w.write_all(&((payload_bytes + 8) as u32).to_be_bytes()).map_err(io_err)?;
            w.write_all(b"mdat").map_err(io_err)?;
        } else {
            w.write_all(&1u32.to_be_bytes()).map_err(io_err)?;
            w.write_all(b"mdat").map_err(io_err)?;
            w.write_all(&(payload_bytes + 16).to_be_bytes()).map_err(io_err)?;
        }
        io::copy(&mut io::repeat(0).take(payload_bytes), &mut w).map_err(io_err)?;
        w.flush().map_err(io_err)?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Runs an external encoder once per tile.
#[derive(Debug)]
pub struct ExternalEncoder {
    template: String,
    decode_template: Option<String>,
    workers: usize,
    calls: AtomicUsize,
}

pub fn validate_template(template: &str) -> Result<()> {
    let missing: Vec<&str> = REQUIRED_PLACEHOLDERS
        .iter()
        .copied()
        .filter(|p| !template.contains(p))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "encoder command template is missing placeholder(s) {}",
            missing.join(" ")
        )));
    }
    Ok(())
}

pub struct TileCommand<'a> {
    pub input: &'a Path,
    pub output: &'a Path,
    pub bitrate_kbps: u32,
    pub crop: Rect,
    pub duration_s: f64,
}

pub fn expand_template(template: &str, cmd: &TileCommand<'_>) -> String {
    template
        .replace("{input}", &shell_quote(&cmd.input.to_string_lossy()))
        .replace("{output}", &shell_quote(&cmd.output.to_string_lossy()))
        .replace("{bitrate_kbps}", &cmd.bitrate_kbps.to_string())
        .replace("{crop_x}", &cmd.crop.x.to_string())
        .replace("{crop_y}", &cmd.crop.y.to_string())
        .replace("{crop_w}", &cmd.crop.width.to_string())
        .replace("{crop_h}", &cmd.crop.height.to_string())
        .replace("{duration_s}", &format!("{}", cmd.duration_s))
}

impl ExternalEncoder {
    /// `decode_template` (placeholders `{input}`, `{output}`) turns one tile
    /// output back into y4m so per-tile PSNR can be measured.
    pub fn new(template: impl Into<String>, decode_template: Option<String>, workers: usize) -> Result<Self> {
        let template = template.into();
        validate_template(&template)?;
        if let Some(d) = &decode_template {
            if !d.contains("{input}") || !d.contains("{output}") {
                return Err(Error::Config(
                    "decode template needs {input} and {output} placeholders".into(),
                ));
            }
        }
        if workers == 0 {
            return Err(Error::Config("worker limit must be at least 1".into()));
        }
        Ok(ExternalEncoder {
            template,
            decode_template,
            workers,
            calls: AtomicUsize::new(0),
        })
    }

    fn measure_tiles(&self, segment_file: &Path, quality: &TileQualityMap, outputs: &[PathBuf]) -> Result<Vec<f64>> {
        let decode = self.decode_template.as_ref().expect("checked by caller");
        let reference = video::read_frames_any(segment_file)?;
        let scratch = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        outputs
            .iter()
            .zip(quality.grid.tiles())
            .enumerate()
            .map(|(k, (out, rect))| {
                let decoded_path = scratch.path().join(format!("tile{k}.y4m"));
                let cmd = decode
                    .replace("{input}", &shell_quote(&out.to_string_lossy()))
                    .replace("{output}", &shell_quote(&decoded_path.to_string_lossy()));
                run_shell(&cmd, &format!("decode of tile {k}"))?;
                let decoded = video::read_frames_any(&decoded_path)?;
                let crops = reference
                    .iter()
                    .map(|f| f.crop(rect))
                    .collect::<Result<Vec<_>>>()?;
                if decoded.len() != crops.len() {
                    return Err(Error::Encoder {
                        context: format!("tile {k}"),
                        reason: format!("decoded {} frames, expected {}", decoded.len(), crops.len()),
                    });
                }
                let pairs = crops
                    .iter()
                    .zip(&decoded)
                    .map(|(r, d)| FramePair::new(r, d))
                    .collect::<Result<Vec<_>>>()?;
                psnr(&pairs)
            })
            .collect()
    }
}

impl Encoder for ExternalEncoder {
    fn transcode_tiled(
        &self,
        segment: &SegmentSource,
        quality: &TileQualityMap,
        output: Option<&OutputSpec>,
    ) -> Result<EncodedSegment> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        quality.grid.check_frame(segment.width, segment.height)?;
        let output = output.ok_or_else(|| {
            Error::Config("external encoder needs an output location".into())
        })?;
        let (src, range) = segment.source.as_ref().ok_or_else(|| {
            Error::Config("external encoder needs a raw source for the segment".into())
        })?;
        std::fs::create_dir_all(&output.dir).map_err(|e| Error::io(&output.dir, e))?;

        // The encoder sees exactly the segment's frames.
        let scratch = tempfile::tempdir_in(&output.dir).map_err(|e| Error::io(&output.dir, e))?;
        let segment_file = scratch.path().join("segment.y4m");
        video::copy_frame_range(src, &segment_file, range.clone())?;

        let n = quality.grid.num_tiles();
        let outputs: Vec<PathBuf> = if n == 1 {
            vec![output.segment_path()]
        } else {
            (0..n).map(|k| output.tile_path(k)).collect()
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        let sizes: Vec<u64> = pool.install(|| {
            (0..n)
                .into_par_iter()
                .map(|k| {
                    let rect = quality.grid.tile_rect(k);
                    let cmd = expand_template(
                        &self.template,
                        &TileCommand {
                            input: &segment_file,
                            output: &outputs[k],
                            bitrate_kbps: quality.bitrates_kbps[k],
                            crop: rect,
                            duration_s: segment.duration_s,
                        },
                    );
                    run_shell(&cmd, &format!("{} tile {k}", quality.grid))?;
                    let meta = std::fs::metadata(&outputs[k]).map_err(|e| Error::Encoder {
                        context: format!("{} tile {k}", quality.grid),
                        reason: format!("no output at {}: {e}", outputs[k].display()),
                    })?;
                    Ok(meta.len())
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let total: u64 = sizes.iter().sum();
        if total == 0 {
            return Err(Error::Encoder {
                context: quality.grid.to_string(),
                reason: "encoder produced empty output".into(),
            });
        }
        let per_tile_psnr_db = match self.decode_template {
            Some(_) => Some(self.measure_tiles(&segment_file, quality, &outputs)?),
            None => None,
        };
        Ok(EncodedSegment {
            quality: quality.clone(),
            tile_streams: outputs
                .iter()
                .zip(&sizes)
                .map(|(p, &s)| TileStream::File {
                    path: p.clone(),
                    size_bytes: s,
                })
                .collect(),
            total_size_bytes: total,
            per_tile_psnr_db,
            files: outputs,
        })
    }

    fn invocations(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    fn needs_output(&self) -> bool {
        true
    }

    fn name(&self) -> &'static str {
        "external"
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderKind {
    Mock {
        #[serde(default)]
        params: MockRdParams,
    },
    External {
        command_template: String,
        #[serde(default)]
        decode_template: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderProfile {
    #[serde(flatten)]
    pub kind: EncoderKind,
    #[serde(default = "default_workers")]
    pub worker_limit: usize,
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

impl Default for EncoderProfile {
    fn default() -> Self {
        EncoderProfile {
            kind: EncoderKind::Mock {
                params: MockRdParams::default(),
            },
            worker_limit: default_workers(),
        }
    }
}

impl EncoderProfile {
    /// Applies the `VIGNETTE_ENCODER` override, which selects the external
    /// backend with the given command template.
    pub fn with_env_override(mut self) -> Self {
        if let Ok(t) = std::env::var(ENCODER_ENV) {
            if !t.trim().is_empty() {
                let decode_template = match &self.kind {
                    EncoderKind::External { decode_template, .. } => decode_template.clone(),
                    EncoderKind::Mock { .. } => None,
                };
                self.kind = EncoderKind::External {
                    command_template: t,
                    decode_template,
                };
            }
        }
        self
    }

    pub fn build(&self) -> Result<Box<dyn Encoder>> {
        if self.worker_limit == 0 {
            return Err(Error::Config("worker limit must be at least 1".into()));
        }
        Ok(match &self.kind {
            EncoderKind::Mock { params } => Box::new(MockEncoder::new(*params)?),
            EncoderKind::External {
                command_template,
                decode_template,
            } => Box::new(ExternalEncoder::new(
                command_template.clone(),
                decode_template.clone(),
                self.worker_limit,
            )?),
        })
    }
}
