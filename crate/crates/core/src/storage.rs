//! The video library: segmentation, the JSON manifest, compression policies,
//! and the four whole-video operations (`transcode`, `vignette_transcode`,
//! `vignette_squeeze`, `vignette_update`).
//!
//! On-disk layout under the library root:
//!
//! ```text
//! manifest.json
//! vignette.toml               optional configuration
//! <id>/seg_<i>.mp4            encoded segment (or seg_<i>.tile<k>.mp4 per tile)
//! <id>/seg_<i>.vgnt           metadata sidecar
//! <id>/seg_<i>.sal.pgm        aggregated saliency map
//! <id>/seg_<i>.mv.csv         motion vectors used for tiling
//! ```
//!
//! Each operation holds an exclusive claim on its video for its duration.
//! Operations on different videos may run concurrently; manifest writes are
//! serialized and atomic.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::container::{embed_in_container, sidecar_path, write_sidecar};
use crate::encode::{EncodedSegment, Encoder, OutputSpec, SegmentSource};
use crate::error::{Error, Result};
use crate::metadata::{encode_metadata, PerceptualMetadata};
use crate::motion::{
    estimate_pair, parse_motion_dump, sampled_pairs, write_motion_dump, BlockMatchParams,
    ExternalExtractor, MotionField,
};
use crate::plane::{write_atomic, Plane};
use crate::saliency::{builtin_frame_map, center_prior, update_map, MaxAccumulator, SaliencyMap};
use crate::search::{exhaustive_search, heuristic_search, SearchMode, SearchResult};
use crate::tiling::{enumerate_configs, TileGrid, TileQualityMap};
use crate::video::{probe, FrameRate, Y4mSource};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VideoState {
    Baseline,
    Vignette,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub index: usize,
    pub start_frame: usize,
    pub frame_count: usize,
    pub duration_s: f64,
    pub target_kbps: u32,
    pub grid: Option<TileGrid>,
    pub weights: Option<Vec<u8>>,
    pub bitrates_kbps: Option<Vec<u32>>,
    pub size_bytes: u64,
    /// Paths below are relative to the library root.
    pub saliency_map_path: Option<PathBuf>,
    pub motion_path: Option<PathBuf>,
    pub files: Vec<PathBuf>,
}

impl SegmentRecord {
    pub fn frames(&self) -> Range<usize> {
        self.start_frame..self.start_frame + self.frame_count
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub source_path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub frame_rate: FrameRate,
    pub frame_count: usize,
    pub source_kbps: u32,
    pub popularity: u64,
    pub state: VideoState,
    pub segments: Vec<SegmentRecord>,
}

impl VideoRecord {
    pub fn duration_s(&self) -> f64 {
        self.frame_count as f64 * self.frame_rate.frame_period_s()
    }

    pub fn size_bytes(&self) -> u64 {
        self.segments.iter().map(|s| s.size_bytes).sum()
    }

    pub fn check(&self) -> Result<()> {
        let bad = |why: String| Err(Error::State(format!("video `{}`: {why}", self.id)));
        let total: f64 = self.segments.iter().map(|s| s.duration_s).sum();
        if (total - self.duration_s()).abs() > self.frame_rate.frame_period_s() {
            return bad(format!(
                "segment durations sum to {total} s, video lasts {} s",
                self.duration_s()
            ));
        }
        for s in &self.segments {
            if let (Some(g), Some(w)) = (&s.grid, &s.weights) {
                if g.num_tiles() != w.len() {
                    return bad(format!("segment {} has {} weights for grid {g}", s.index, w.len()));
                }
            }
            if self.state == VideoState::Vignette
                && (s.grid.is_none() || s.weights.is_none() || s.saliency_map_path.is_none())
            {
                return bad(format!("segment {} lacks perceptual metadata", s.index));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryManifest {
    pub manifest_version: u32,
    pub library_root: PathBuf,
    pub videos: Vec<VideoRecord>,
}

impl LibraryManifest {
    pub fn new(library_root: impl Into<PathBuf>) -> Self {
        LibraryManifest {
            manifest_version: MANIFEST_VERSION,
            library_root: library_root.into(),
            videos: Vec::new(),
        }
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn total_size_bytes(&self) -> u64 {
        self.videos.iter().map(VideoRecord::size_bytes).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::State(format!("serializing manifest: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: LibraryManifest = serde_json::from_str(text)
            .map_err(|e| Error::State(format!("reading manifest: {e}")))?;
        if m.manifest_version != MANIFEST_VERSION {
            return Err(Error::State(format!(
                "unsupported manifest_version {} (expected {MANIFEST_VERSION})",
                m.manifest_version
            )));
        }
        let mut ids = HashSet::new();
        for v in &m.videos {
            if !ids.insert(v.id.as_str()) {
                return Err(Error::State(format!("duplicate video id `{}` in manifest", v.id)));
            }
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LibraryManifest::from_json(&text)
            .map_err(|e| Error::State(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        write_atomic(path.as_ref(), text.as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Policies

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Fires when the library holds more than `threshold` bytes.
    CapacityPressure,
    /// Fires for each video whose popularity is below `threshold`.
    PopularityDecay,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyAction {
    VignetteTranscode,
    VignetteSqueeze,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub kind: PolicyKind,
    pub threshold: f64,
    pub action: PolicyAction,
    #[serde(default)]
    pub squeeze_target_kbps: Option<u32>,
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::Config(format!(
                "policy threshold must be positive, got {}",
                self.threshold
            )));
        }
        if self.action == PolicyAction::VignetteSqueeze && self.squeeze_target_kbps.is_none() {
            return Err(Error::Config("squeeze policy needs squeeze_target_kbps".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScheduledAction {
    pub video_id: String,
    pub action: PolicyAction,
    pub squeeze_target_kbps: Option<u32>,
    /// Index of the policy that scheduled this action.
    pub policy: usize,
}

/// Plans the actions the policies call for. Policies are evaluated in order;
/// a video gets at most one action of each kind.
pub fn apply_policies(manifest: &LibraryManifest, policies: &[Policy]) -> Vec<ScheduledAction> {
    let mut out: Vec<ScheduledAction> = Vec::new();
    let mut seen = HashSet::new();
    let total = manifest.total_size_bytes() as f64;
    for (pi, p) in policies.iter().enumerate() {
        let mut targets: Vec<&VideoRecord> = match p.kind {
            PolicyKind::CapacityPressure if total > p.threshold => manifest.videos.iter().collect(),
            PolicyKind::CapacityPressure => Vec::new(),
            PolicyKind::PopularityDecay => manifest
                .videos
                .iter()
                .filter(|v| (v.popularity as f64) < p.threshold)
                .collect(),
        };
        targets.sort_by(|a, b| a.popularity.cmp(&b.popularity).then_with(|| a.id.cmp(&b.id)));
        for v in targets {
            if seen.insert((v.id.clone(), p.action)) {
                out.push(ScheduledAction {
                    video_id: v.id.clone(),
                    action: p.action,
                    squeeze_target_kbps: p.squeeze_target_kbps,
                    policy: pi,
                });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Segmentation

/// Splits `frame_count` frames into segments starting at keyframes. The k-th
/// boundary is the keyframe nearest to `k * segment_len_s` (earlier one on a
/// tie), for every multiple that falls inside the video.
pub fn plan_segments(
    frame_count: usize,
    rate: FrameRate,
    keyframes: &[usize],
    segment_len_s: f64,
) -> Result<Vec<Range<usize>>> {
    if frame_count == 0 {
        return Err(Error::InvalidArgument("video has no frames".into()));
    }
    if !(segment_len_s >= 1.0 && segment_len_s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "segment length must be at least 1 s, got {segment_len_s}"
        )));
    }
    let mut keys: Vec<usize> = keyframes.iter().copied().filter(|&k| k < frame_count).collect();
    keys.sort_unstable();
    keys.dedup();
    let mut bounds = vec![0usize];
    for k in 1.. {
        let target = k as f64 * segment_len_s * rate.as_f64();
        if target >= frame_count as f64 {
            break;
        }
        let last = *bounds.last().unwrap();
        let nearest = keys
            .iter()
            .copied()
            .filter(|&f| f > last)
            .min_by(|&a, &b| {
                let da = (a as f64 - target).abs();
                let db = (b as f64 - target).abs();
                da.partial_cmp(&db).unwrap().then(a.cmp(&b))
            });
        if let Some(f) = nearest {
            bounds.push(f);
        }
    }
    bounds.push(frame_count);
    Ok(bounds.windows(2).map(|w| w[0]..w[1]).collect())
}

// ---------------------------------------------------------------------------
// Per-segment analysis

/// Where segment saliency comes from.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum SaliencySource {
    #[default]
    Builtin,
    /// Directory with one PGM per video frame, taken in file-name order.
    FrameDir(PathBuf),
    /// One map used for every segment.
    Map(PathBuf),
}

impl SaliencySource {
    /// `builtin`, a `.pgm` file, or a directory of per-frame maps.
    pub fn parse(arg: &str) -> Self {
        if arg == "builtin" {
            SaliencySource::Builtin
        } else if Path::new(arg).is_dir() {
            SaliencySource::FrameDir(arg.into())
        } else {
            SaliencySource::Map(arg.into())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum MotionSource {
    BlockMatch(BlockMatchParams),
    /// Motion CSV covering the whole video.
    Dump(PathBuf),
    Extractor(String),
}

#[derive(Clone, Debug, Default)]
pub struct VignetteOptions {
    /// Defaults to each segment's current target.
    pub target_kbps: Option<u32>,
    /// Defaults to the configured search mode.
    pub mode: Option<SearchMode>,
    pub saliency: SaliencySource,
    /// Defaults to the configured extractor, or block matching.
    pub motion: Option<MotionSource>,
}

#[derive(Clone, Debug)]
pub struct VignetteReport {
    pub video: VideoRecord,
    pub searches: Vec<SearchResult>,
}

struct FrameAnalysis {
    map: Option<SaliencyMap>,
    motion: Vec<MotionField>,
}

/// One pass over a segment's frames computing the built-in saliency map
/// and/or block-matching motion.
fn analyze_frames(
    src: &mut Y4mSource,
    range: Range<usize>,
    prior: Option<&[f64]>,
    block: Option<&BlockMatchParams>,
) -> Result<FrameAnalysis> {
    let pairs: HashSet<usize> = block
        .map(|b| sampled_pairs(range.len(), b.max_pairs).into_iter().collect())
        .unwrap_or_default();
    let mut acc = MaxAccumulator::default();
    let mut motion = Vec::new();
    let mut prev: Option<Plane> = None;
    let start = range.start;
    src.for_each_in(range.clone(), |index, cur| {
        if let Some(p) = &prev {
            if let Some(prior) = prior {
                acc.push(&builtin_frame_map(prior, p, &cur)?)?;
            }
            if let Some(b) = block.filter(|_| pairs.contains(&(index - start))) {
                motion.push(estimate_pair(p, &cur, index as u32, b)?);
            }
        }
        prev = Some(cur);
        Ok(())
    })?;
    let map = match prior {
        // a one-frame segment has no temporal contrast: the prior alone
        Some(prior) if range.len() == 1 => {
            let f = prev.as_ref().expect("range is nonempty");
            Some(SaliencyMap::new(builtin_frame_map(prior, f, f)?))
        }
        Some(_) => acc.finish(),
        None => None,
    };
    Ok(FrameAnalysis { map, motion })
}

/// Produces each segment's saliency map and motion, in segment order.
struct SegmentAnalyzer {
    reader: Option<Y4mSource>,
    prior: Option<Vec<f64>>,
    block: Option<BlockMatchParams>,
    whole_video_motion: Option<Vec<MotionField>>,
    frame_maps: Option<Vec<PathBuf>>,
    fixed_map: Option<SaliencyMap>,
}

impl SegmentAnalyzer {
    fn next(&mut self, s: &SegmentRecord) -> Result<(SaliencyMap, Vec<MotionField>)> {
        let analysis = match self.reader.as_mut() {
            Some(r) => Some(analyze_frames(r, s.frames(), self.prior.as_deref(), self.block.as_ref())?),
            None => None,
        };
        let map = if let Some(m) = &self.fixed_map {
            m.clone()
        } else if let Some(files) = &self.frame_maps {
            aggregate_files(&files[s.frames()])?
        } else {
            analysis
                .as_ref()
                .and_then(|a| a.map.clone())
                .expect("built-in saliency computed during analysis")
        };
        let motion = match &self.whole_video_motion {
            Some(all) => all
                .iter()
                .filter(|f| s.frames().contains(&(f.frame_index as usize)))
                .cloned()
                .collect(),
            None => analysis.map(|a| a.motion).unwrap_or_default(),
        };
        Ok((map, motion))
    }
}

fn list_pgms(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    out.sort();
    Ok(out)
}

fn aggregate_files(paths: &[PathBuf]) -> Result<SaliencyMap> {
    let mut acc = MaxAccumulator::default();
    for p in paths {
        acc.push(&Plane::read_pgm(p)?)?;
    }
    acc.finish()
        .ok_or_else(|| Error::InvalidArgument("no saliency frames for segment".into()))
}

fn check_video_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "video id `{id}` must be nonempty ASCII letters, digits, '-', '_' or '.', not starting with '.'"
        )))
    }
}

// ---------------------------------------------------------------------------
// Library

pub struct Library {
    root: PathBuf,
    config: Config,
    encoder: Box<dyn Encoder>,
    manifest: Mutex<LibraryManifest>,
    claims: Mutex<HashSet<String>>,
}

struct Claim<'a> {
    claims: &'a Mutex<HashSet<String>>,
    id: String,
}

impl Drop for Claim<'_> {
    fn drop(&mut self) {
        self.claims.lock().unwrap().remove(&self.id);
    }
}

impl Library {
    /// Opens (creating if needed) the library at `root` with its
    /// `vignette.toml` configuration.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let config = Config::load(root.as_ref())?;
        Library::with_config(root, config)
    }

    pub fn with_config(root: impl AsRef<Path>, config: Config) -> Result<Self> {
        config.validate()?;
        let encoder = config.encoder.build()?;
        Library::with_encoder(root, config, encoder)
    }

    pub fn with_encoder(root: impl AsRef<Path>, config: Config, encoder: Box<dyn Encoder>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let path = root.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            LibraryManifest::load(&path)?
        } else {
            let m = LibraryManifest::new(&root);
            m.save(&path)?;
            m
        };
        Ok(Library {
            root,
            config,
            encoder,
            manifest: Mutex::new(manifest),
            claims: Mutex::new(HashSet::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn encoder(&self) -> &dyn Encoder {
        self.encoder.as_ref()
    }

    pub fn manifest(&self) -> LibraryManifest {
        self.manifest.lock().unwrap().clone()
    }

    pub fn video(&self, id: &str) -> Result<VideoRecord> {
        self.manifest
            .lock()
            .unwrap()
            .video(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("video `{id}` is not in the library")))
    }

    /// Absolute form of a library-relative path.
    pub fn resolve(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    fn claim(&self, id: &str) -> Result<Claim<'_>> {
        if !self.claims.lock().unwrap().insert(id.to_string()) {
            return Err(Error::State(format!("video `{id}` is busy with another operation")));
        }
        Ok(Claim {
            claims: &self.claims,
            id: id.to_string(),
        })
    }

    fn commit(&self, rec: VideoRecord, must_be_new: bool) -> Result<()> {
        rec.check()?;
        let mut guard = self.manifest.lock().unwrap();
        let mut next = guard.clone();
        match next.videos.iter_mut().find(|v| v.id == rec.id) {
            Some(_) if must_be_new => {
                return Err(Error::State(format!("video id `{}` already exists", rec.id)))
            }
            Some(slot) => *slot = rec,
            None => next.videos.push(rec),
        }
        next.save(self.root.join(MANIFEST_FILE))?;
        *guard = next;
        Ok(())
    }

    fn rel(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.root).unwrap_or(path).to_path_buf()
    }

    fn output_spec(&self, id: &str, index: usize) -> OutputSpec {
        OutputSpec {
            dir: self.root.join(id),
            stem: format!("seg_{index}"),
        }
    }

    fn segment_source(&self, v: &VideoRecord, s: &SegmentRecord, motion: Vec<MotionField>) -> SegmentSource {
        SegmentSource {
            width: v.width,
            height: v.height,
            duration_s: s.duration_s,
            source: Some((v.source_path.clone(), s.frames())),
            motion,
        }
    }

    /// Registers a y4m source, split into keyframe-aligned segments of about
    /// `segment_len_s` (default from the configuration).
    pub fn ingest(&self, path: impl AsRef<Path>, id: Option<&str>, segment_len_s: Option<f64>) -> Result<VideoRecord> {
        let path = path.as_ref();
        let source_path = path.canonicalize().map_err(|e| Error::io(path, e))?;
        let id = match id {
            Some(id) => id.to_string(),
            None => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
        };
        check_video_id(&id)?;
        let _claim = self.claim(&id)?;
        if self.manifest.lock().unwrap().video(&id).is_some() {
            return Err(Error::State(format!("video id `{id}` already exists")));
        }
        let info = probe(&source_path)?;
        if info.frame_count == 0 {
            return Err(Error::Video {
                path: source_path,
                reason: "zero-duration video".into(),
            });
        }
        let len = segment_len_s.unwrap_or(self.config.segment_len_s);
        let ranges = plan_segments(info.frame_count, info.frame_rate, &info.keyframes(), len)?;
        let file_bytes = std::fs::metadata(&source_path)
            .map_err(|e| Error::io(&source_path, e))?
            .len();
        let duration = info.duration_s();
        let source_kbps = ((file_bytes as f64 * 8.0 / duration / 1000.0).round() as u64)
            .clamp(10, u32::MAX as u64) as u32;
        let period = info.frame_rate.frame_period_s();
        let segments = ranges
            .iter()
            .enumerate()
            .map(|(index, r)| SegmentRecord {
                index,
                start_frame: r.start,
                frame_count: r.len(),
                duration_s: r.len() as f64 * period,
                target_kbps: source_kbps,
                grid: None,
                weights: None,
                bitrates_kbps: None,
                size_bytes: file_bytes * r.len() as u64 / info.frame_count as u64,
                saliency_map_path: None,
                motion_path: None,
                files: Vec::new(),
            })
            .collect();
        let rec = VideoRecord {
            id,
            source_path,
            width: info.width,
            height: info.height,
            frame_rate: info.frame_rate,
            frame_count: info.frame_count,
            source_kbps,
            popularity: 0,
            state: VideoState::Baseline,
            segments,
        };
        self.commit(rec.clone(), true)?;
        Ok(rec)
    }

    /// Deletes files the old segment record owned that the new one does not.
    fn remove_stale(&self, old: &SegmentRecord, new: &SegmentRecord) {
        let keep: Vec<&PathBuf> = new
            .files
            .iter()
            .chain(&new.saliency_map_path)
            .chain(&new.motion_path)
            .collect();
        for f in old.files.iter().chain(&old.saliency_map_path).chain(&old.motion_path) {
            if !keep.contains(&f) {
                let _ = std::fs::remove_file(self.resolve(f));
            }
        }
    }

    fn encode_segment(
        &self,
        v: &VideoRecord,
        s: &SegmentRecord,
        quality: &TileQualityMap,
        motion: Vec<MotionField>,
    ) -> Result<(EncodedSegment, OutputSpec)> {
        let out = self.output_spec(&v.id, s.index);
        let src = self.segment_source(v, s, motion);
        let encoded = self.encoder.transcode_tiled(&src, quality, Some(&out))?;
        Ok((encoded, out))
    }

    /// Writes the metadata record into every output file and the sidecar.
    fn embed(&self, encoded: &EncodedSegment, out: &OutputSpec) -> Result<()> {
        let meta = PerceptualMetadata::from_grid(encoded.grid(), &encoded.quality.weights)?;
        let bytes = encode_metadata(&meta)?;
        for f in &encoded.files {
            embed_in_container(f, f, &bytes)?;
        }
        write_sidecar(sidecar_path(out.segment_path()), &bytes)
    }

    fn files_rel(&self, encoded: &EncodedSegment, out: &OutputSpec, with_sidecar: bool) -> Vec<PathBuf> {
        let mut files: Vec<PathBuf> = encoded.files.iter().map(|f| self.rel(f)).collect();
        if with_sidecar {
            files.push(self.rel(&sidecar_path(out.segment_path())));
        }
        files
    }

    /// Conventional single-quality encode of every segment at `target_kbps`.
    pub fn transcode(&self, id: &str, target_kbps: u32) -> Result<VideoRecord> {
        let _claim = self.claim(id)?;
        let v = self.video(id)?;
        let mut next = v.clone();
        for (i, s) in v.segments.iter().enumerate() {
            let run = || -> Result<SegmentRecord> {
                let grid = TileGrid::single(v.width, v.height)?;
                let quality = TileQualityMap::uniform(grid, target_kbps)?;
                let (encoded, out) = self.encode_segment(&v, s, &quality, Vec::new())?;
                let files = self.files_rel(&encoded, &out, false);
                Ok(SegmentRecord {
                    target_kbps,
                    grid: None,
                    weights: None,
                    bitrates_kbps: None,
                    size_bytes: encoded.total_size_bytes,
                    saliency_map_path: None,
                    motion_path: None,
                    files,
                    ..s.clone()
                })
            };
            next.segments[i] = run().map_err(|e| e.in_segment(s.index))?;
        }
        next.state = VideoState::Baseline;
        self.commit(next.clone(), false)?;
        for (old, new) in v.segments.iter().zip(&next.segments) {
            self.remove_stale(old, new);
        }
        Ok(next)
    }

    fn select_grid(
        &self,
        mode: SearchMode,
        src: &SegmentSource,
        map: &SaliencyMap,
        target_kbps: u32,
    ) -> Result<SearchResult> {
        let candidates = enumerate_configs(src.width, src.height, &self.config.tiles)?.grids;
        match mode {
            SearchMode::Heuristic => heuristic_search(&src.motion, &candidates),
            SearchMode::Exhaustive => exhaustive_search(
                src,
                map,
                &candidates,
                target_kbps,
                self.config.floor_frac,
                self.encoder.as_ref(),
                self.config.encoder.worker_limit,
            ),
        }
    }

    /// Search, encode, and persist one segment given its map and motion.
    fn perceptual_segment(
        &self,
        v: &VideoRecord,
        s: &SegmentRecord,
        map: &SaliencyMap,
        motion: Vec<MotionField>,
        mode: SearchMode,
        target_kbps: u32,
    ) -> Result<(SegmentRecord, SearchResult)> {
        map.plane().ensure_dims(v.width, v.height)?;
        let dir = self.root.join(&v.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let map_path = dir.join(format!("seg_{}.sal.pgm", s.index));
        map.write_pgm(&map_path)?;
        let motion_path = dir.join(format!("seg_{}.mv.csv", s.index));
        write_motion_dump(&motion_path, &motion)?;

        let src = self.segment_source(v, s, motion);
        let search = self.select_grid(mode, &src, map, target_kbps)?;
        let quality =
            TileQualityMap::from_saliency(map, search.chosen.clone(), target_kbps, self.config.floor_frac)?;
        let out = self.output_spec(&v.id, s.index);
        let encoded = self.encoder.transcode_tiled(&src, &quality, Some(&out))?;
        self.embed(&encoded, &out)?;
        let rec = SegmentRecord {
            target_kbps,
            grid: Some(quality.grid.clone()),
            weights: Some(quality.weights.clone()),
            bitrates_kbps: Some(quality.bitrates_kbps.clone()),
            size_bytes: encoded.total_size_bytes,
            saliency_map_path: Some(self.rel(&map_path)),
            motion_path: Some(self.rel(&motion_path)),
            files: self.files_rel(&encoded, &out, true),
            ..s.clone()
        };
        Ok((rec, search))
    }

    /// Motion recorded for a segment by its last perceptual transcode.
    fn load_motion(&self, v: &VideoRecord, s: &SegmentRecord) -> Result<Vec<MotionField>> {
        match &s.motion_path {
            Some(p) if self.resolve(p).exists() => {
                parse_motion_dump(self.resolve(p), v.width as u32, v.height as u32)
            }
            _ => Ok(Vec::new()),
        }
    }

    fn analyzer(&self, v: &VideoRecord, opts: &VignetteOptions) -> Result<SegmentAnalyzer> {
        let motion_source = opts.motion.clone().unwrap_or_else(|| match &self.config.motion.extractor {
            Some(t) => MotionSource::Extractor(t.clone()),
            None => MotionSource::BlockMatch(self.config.motion.block_match),
        });
        let (w, h) = (v.width as u32, v.height as u32);
        let whole_video_motion = match &motion_source {
            MotionSource::BlockMatch(_) => None,
            MotionSource::Dump(p) => Some(parse_motion_dump(p, w, h)?),
            MotionSource::Extractor(t) => Some(ExternalExtractor::new(t.clone())?.extract(&v.source_path, w, h)?),
        };
        let frame_maps = match &opts.saliency {
            SaliencySource::FrameDir(dir) => {
                let files = list_pgms(dir)?;
                if files.len() != v.frame_count {
                    return Err(Error::InvalidArgument(format!(
                        "{} holds {} saliency maps for {} frames",
                        dir.display(),
                        files.len(),
                        v.frame_count
                    )));
                }
                Some(files)
            }
            _ => None,
        };
        let fixed_map = match &opts.saliency {
            SaliencySource::Map(p) => Some(SaliencyMap::read_pgm(p)?),
            _ => None,
        };
        let prior = matches!(opts.saliency, SaliencySource::Builtin).then(|| center_prior(v.width, v.height));
        let block = match &motion_source {
            MotionSource::BlockMatch(b) => Some(*b),
            _ => None,
        };
        let reader = if prior.is_some() || block.is_some() {
            Some(Y4mSource::open(&v.source_path)?)
        } else {
            None
        };
        Ok(SegmentAnalyzer {
            reader,
            prior,
            block,
            whole_video_motion,
            frame_maps,
            fixed_map,
        })
    }

    /// Saliency-driven tiled transcode of every segment.
    pub fn vignette_transcode(&self, id: &str, opts: &VignetteOptions) -> Result<VignetteReport> {
        let _claim = self.claim(id)?;
        let v = self.video(id)?;
        let mode = opts.mode.unwrap_or(self.config.search_mode);
        let mut analyzer = self.analyzer(&v, opts)?;
        let mut next = v.clone();
        let mut searches = Vec::with_capacity(v.segments.len());
        for (i, s) in v.segments.iter().enumerate() {
            let mut run = || -> Result<(SegmentRecord, SearchResult)> {
                let (map, motion) = analyzer.next(s)?;
                let target = opts.target_kbps.unwrap_or(s.target_kbps);
                self.perceptual_segment(&v, s, &map, motion, mode, target)
            };
            let (rec, search) = run().map_err(|e| e.in_segment(s.index))?;
            next.segments[i] = rec;
            searches.push(search);
        }
        next.state = VideoState::Vignette;
        self.commit(next.clone(), false)?;
        for (old, new) in v.segments.iter().zip(&next.segments) {
            self.remove_stale(old, new);
        }
        Ok(VignetteReport { video: next, searches })
    }

    /// The grid search `vignette_transcode` would run for each segment,
    /// without encoding the result or touching the library.
    pub fn search(&self, id: &str, opts: &VignetteOptions) -> Result<Vec<SearchResult>> {
        let v = self.video(id)?;
        let mode = opts.mode.unwrap_or(self.config.search_mode);
        let mut analyzer = self.analyzer(&v, opts)?;
        v.segments
            .iter()
            .map(|s| {
                let mut run = || -> Result<SearchResult> {
                    let (map, motion) = analyzer.next(s)?;
                    map.plane().ensure_dims(v.width, v.height)?;
                    let src = self.segment_source(&v, s, motion);
                    self.select_grid(mode, &src, &map, opts.target_kbps.unwrap_or(s.target_kbps))
                };
                run().map_err(|e| e.in_segment(s.index))
            })
            .collect()
    }

    fn require_vignette(&self, v: &VideoRecord, op: &str) -> Result<()> {
        if v.state != VideoState::Vignette {
            return Err(Error::State(format!(
                "{op} needs a video in vignette state; `{}` is baseline (run vignette_transcode first)",
                v.id
            )));
        }
        Ok(())
    }

    /// Re-encodes every segment at a lower target with its existing grid and
    /// weights.
    pub fn vignette_squeeze(&self, id: &str, target_kbps: u32) -> Result<VideoRecord> {
        let _claim = self.claim(id)?;
        let v = self.video(id)?;
        self.require_vignette(&v, "vignette_squeeze")?;
        for s in &v.segments {
            if target_kbps >= s.target_kbps {
                return Err(Error::UpwardTranscode {
                    current_kbps: s.target_kbps,
                    requested_kbps: target_kbps,
                }
                .in_segment(s.index));
            }
        }
        let mut next = v.clone();
        for (i, s) in v.segments.iter().enumerate() {
            let run = || -> Result<SegmentRecord> {
                let grid = s.grid.clone().expect("checked by VideoRecord::check");
                let weights = s.weights.clone().expect("checked by VideoRecord::check");
                let quality = TileQualityMap::new(grid, weights, target_kbps, self.config.floor_frac)?;
                let motion = self.load_motion(&v, s)?;
                let (encoded, out) = self.encode_segment(&v, s, &quality, motion)?;
                self.embed(&encoded, &out)?;
                Ok(SegmentRecord {
                    target_kbps,
                    bitrates_kbps: Some(quality.bitrates_kbps),
                    size_bytes: encoded.total_size_bytes,
                    files: self.files_rel(&encoded, &out, true),
                    ..s.clone()
                })
            };
            next.segments[i] = run().map_err(|e| e.in_segment(s.index))?;
        }
        self.commit(next.clone(), false)?;
        for (old, new) in v.segments.iter().zip(&next.segments) {
            self.remove_stale(old, new);
        }
        Ok(next)
    }

    /// Blends a fixation map into every segment's saliency map, then re-runs
    /// grid search and encoding at each segment's current target.
    pub fn vignette_update(&self, id: &str, fixation_path: impl AsRef<Path>, alpha: Option<f64>) -> Result<VignetteReport> {
        let _claim = self.claim(id)?;
        let v = self.video(id)?;
        self.require_vignette(&v, "vignette_update")?;
        let alpha = alpha.unwrap_or(self.config.alpha);
        let fixation = SaliencyMap::read_pgm(fixation_path)?;
        fixation.plane().ensure_dims(v.width, v.height)?;
        let mut next = v.clone();
        let mut searches = Vec::new();
        for (i, s) in v.segments.iter().enumerate() {
            let run = || -> Result<(SegmentRecord, SearchResult)> {
                let rel = s.saliency_map_path.as_ref().expect("checked by VideoRecord::check");
                let path = self.resolve(rel);
                if !path.exists() {
                    return Err(Error::NotFound(format!("saliency sidecar {}", path.display())));
                }
                let current = SaliencyMap::read_pgm(&path)?;
                let blended = update_map(&current, &fixation, alpha)?;
                let motion = self.load_motion(&v, s)?;
                self.perceptual_segment(&v, s, &blended, motion, self.config.search_mode, s.target_kbps)
            };
            let (rec, search) = run().map_err(|e| e.in_segment(s.index))?;
            next.segments[i] = rec;
            searches.push(search);
        }
        self.commit(next.clone(), false)?;
        for (old, new) in v.segments.iter().zip(&next.segments) {
            self.remove_stale(old, new);
        }
        Ok(VignetteReport { video: next, searches })
    }

    pub fn set_popularity(&self, id: &str, popularity: u64) -> Result<VideoRecord> {
        let _claim = self.claim(id)?;
        let mut v = self.video(id)?;
        v.popularity = popularity;
        self.commit(v.clone(), false)?;
        Ok(v)
    }

    pub fn plan(&self) -> Vec<ScheduledAction> {
        apply_policies(&self.manifest(), &self.config.policies)
    }

    pub fn execute(&self, action: &ScheduledAction) -> Result<VideoRecord> {
        match action.action {
            PolicyAction::VignetteTranscode => self
                .vignette_transcode(&action.video_id, &VignetteOptions::default())
                .map(|r| r.video),
            PolicyAction::VignetteSqueeze => {
                let target = action.squeeze_target_kbps.ok_or_else(|| {
                    Error::Config("squeeze action without squeeze_target_kbps".into())
                })?;
                self.vignette_squeeze(&action.video_id, target)
            }
        }
    }

    /// Runs actions for different videos in parallel and actions for the
    /// same video in order. Results follow the input order.
    pub fn execute_all(&self, actions: &[ScheduledAction]) -> Vec<Result<VideoRecord>> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, a) in actions.iter().enumerate() {
            groups.entry(a.video_id.as_str()).or_default().push(i);
        }
        let groups: Vec<Vec<usize>> = groups.into_values().collect();
        let mut results: Vec<(usize, Result<VideoRecord>)> = groups
            .par_iter()
            .flat_map_iter(|idx| idx.iter().map(|&i| (i, self.execute(&actions[i]))).collect::<Vec<_>>())
            .collect();
        results.sort_by_key(|(i, _)| *i);
        results.into_iter().map(|(_, r)| r).collect()
    }
}
