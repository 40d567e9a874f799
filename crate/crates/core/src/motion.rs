//! Block motion vectors: the CSV dump format, an external extractor adapter,
//! and a small built-in block-matching estimator for raw sources.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::Plane;

pub const MOTION_CSV_HEADER: [&str; 5] = ["frame", "block_x", "block_y", "dx", "dy"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionVector {
    pub block_x: u32,
    pub block_y: u32,
    pub dx: i32,
    pub dy: i32,
}

impl MotionVector {
    pub fn magnitude(&self) -> f64 {
        (self.dx as f64).hypot(self.dy as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionField {
    pub frame_index: u32,
    pub frame_w: u32,
    pub frame_h: u32,
    pub entries: Vec<MotionVector>,
}

impl MotionField {
    pub fn new(frame_index: u32, frame_w: u32, frame_h: u32, entries: Vec<MotionVector>) -> Result<Self> {
        if let Some(mv) = entries
            .iter()
            .find(|mv| mv.block_x >= frame_w || mv.block_y >= frame_h)
        {
            return Err(Error::InvalidArgument(format!(
                "vector origin ({}, {}) outside {frame_w}x{frame_h} frame",
                mv.block_x, mv.block_y
            )));
        }
        Ok(MotionField {
            frame_index,
            frame_w,
            frame_h,
            entries,
        })
    }
}

#[derive(Deserialize)]
struct Row {
    frame: u32,
    block_x: i64,
    block_y: i64,
    dx: i32,
    dy: i32,
}

/// Parses a motion CSV (`frame,block_x,block_y,dx,dy`). Fields come back
/// ordered by frame index, entries in file order.
pub fn parse_motion_dump(path: impl AsRef<Path>, frame_w: u32, frame_h: u32) -> Result<Vec<MotionField>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("{other:?}"),
            },
        })?;
    let parse_err = |line: u64, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.iter().ne(MOTION_CSV_HEADER) {
        return Err(parse_err(
            1,
            format!("expected header `{}`", MOTION_CSV_HEADER.join(",")),
        ));
    }

    let mut frames: BTreeMap<u32, Vec<MotionVector>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let row: Row = record
            .deserialize(Some(&headers))
            .map_err(|e| parse_err(line, e.to_string()))?;
        if row.block_x < 0
            || row.block_y < 0
            || row.block_x >= frame_w as i64
            || row.block_y >= frame_h as i64
        {
            return Err(parse_err(
                line,
                format!(
                    "block origin ({}, {}) outside {frame_w}x{frame_h} frame",
                    row.block_x, row.block_y
                ),
            ));
        }
        frames.entry(row.frame).or_default().push(MotionVector {
            block_x: row.block_x as u32,
            block_y: row.block_y as u32,
            dx: row.dx,
            dy: row.dy,
        });
    }
    Ok(frames
        .into_iter()
        .map(|(frame_index, entries)| MotionField {
            frame_index,
            frame_w,
            frame_h,
            entries,
        })
        .collect())
}

pub fn write_motion_dump(path: impl AsRef<Path>, fields: &[MotionField]) -> Result<()> {
    let path = path.as_ref();
    let io_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidArgument(format!("{other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(io_err)?;
    w.write_record(MOTION_CSV_HEADER).map_err(io_err)?;
    for f in fields {
        for mv in &f.entries {
            w.write_record(&[
                f.frame_index.to_string(),
                mv.block_x.to_string(),
                mv.block_y.to_string(),
                mv.dx.to_string(),
                mv.dy.to_string(),
            ])
            .map_err(io_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Runs an external motion-vector extractor. The template must contain
/// `{input}` and `{output}`; the command is expected to write a motion CSV to
/// `{output}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalExtractor {
    pub command_template: String,
}

impl ExternalExtractor {
    pub fn new(command_template: impl Into<String>) -> Result<Self> {
        let command_template = command_template.into();
        for p in ["{input}", "{output}"] {
            if !command_template.contains(p) {
                return Err(Error::Config(format!(
                    "motion extractor template is missing the {p} placeholder"
                )));
            }
        }
        Ok(ExternalExtractor { command_template })
    }

    pub fn extract(&self, input: &Path, frame_w: u32, frame_h: u32) -> Result<Vec<MotionField>> {
        let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let output = dir.path().join("motion.csv");
        let cmd = self
            .command_template
            .replace("{input}", &shell_quote(&input.to_string_lossy()))
            .replace("{output}", &shell_quote(&output.to_string_lossy()));
        run_shell(&cmd, "motion extractor")?;
        parse_motion_dump(&output, frame_w, frame_h)
    }
}

pub(crate) fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

pub(crate) fn run_shell(cmd: &str, context: &str) -> Result<()> {
    let out = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .output()
        .map_err(|e| Error::Encoder {
            context: context.to_string(),
            reason: format!("failed to spawn `{cmd}`: {e}"),
        })?;
    if !out.status.success() {
        let stderr = String::from_utf8_lossy(&out.stderr);
        let last = stderr.lines().last().unwrap_or("").trim();
        return Err(Error::Encoder {
            context: context.to_string(),
            reason: format!("`{cmd}` exited with {}: {last}", out.status),
        });
    }
    Ok(())
}

/// Parameters for the built-in full-search block matcher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockMatchParams {
    pub block_size: usize,
    pub search_range: i32,
    /// Frame pairs sampled per segment, spread evenly.
    pub max_pairs: usize,
}

impl Default for BlockMatchParams {
    fn default() -> Self {
        BlockMatchParams {
            block_size: 16,
            search_range: 4,
            max_pairs: 8,
        }
    }
}

fn sad(prev: &Plane, cur: &Plane, bx: usize, by: usize, bw: usize, bh: usize, dx: i32, dy: i32) -> Option<u32> {
    let sx = bx as i64 + dx as i64;
    let sy = by as i64 + dy as i64;
    if sx < 0 || sy < 0 || sx as usize + bw > prev.width() || sy as usize + bh > prev.height() {
        return None;
    }
    let (sx, sy) = (sx as usize, sy as usize);
    let mut acc = 0u32;
    for y in 0..bh {
        let a = &cur.row(by + y)[bx..bx + bw];
        let b = &prev.row(sy + y)[sx..sx + bw];
        acc += a.iter().zip(b).map(|(&p, &q)| p.abs_diff(q) as u32).sum::<u32>();
    }
    Some(acc)
}

/// Forward motion of each block of `cur` relative to `prev`: the vector points
/// from the block origin to where its content moved, so `(-dx, -dy)` is the
/// best match displacement in `prev`. Ties prefer the shortest vector.
pub fn estimate_pair(prev: &Plane, cur: &Plane, frame_index: u32, params: &BlockMatchParams) -> Result<MotionField> {
    let (w, h) = cur.dims();
    prev.ensure_dims(w, h)?;
    let bs = params.block_size.max(1);
    let r = params.search_range.max(0);
    let mut candidates: Vec<(i32, i32)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .collect();
    candidates.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));

    let origins: Vec<(usize, usize)> = (0..h)
        .step_by(bs)
        .flat_map(|y| (0..w).step_by(bs).map(move |x| (x, y)))
        .collect();
    let entries = origins
        .par_iter()
        .map(|&(bx, by)| {
            let bw = bs.min(w - bx);
            let bh = bs.min(h - by);
            let mut best = (u32::MAX, 0, 0);
            for &(dx, dy) in &candidates {
                if let Some(cost) = sad(prev, cur, bx, by, bw, bh, -dx, -dy) {
                    if cost < best.0 {
                        best = (cost, dx, dy);
                    }
                }
            }
            MotionVector {
                block_x: bx as u32,
                block_y: by as u32,
                dx: best.1,
                dy: best.2,
            }
        })
        .collect();
    MotionField::new(frame_index, w as u32, h as u32, entries)
}

/// Indices of the frame pairs `(i - 1, i)` sampled from a segment of
/// `frame_count` frames.
pub fn sampled_pairs(frame_count: usize, max_pairs: usize) -> Vec<usize> {
    if frame_count < 2 || max_pairs == 0 {
        return Vec::new();
    }
    let pairs = frame_count - 1;
    let n = pairs.min(max_pairs);
    let mut out: Vec<usize> = (0..n).map(|k| 1 + k * pairs / n).collect();
    out.dedup();
    out
}

pub fn estimate_motion(frames: &[Plane], params: &BlockMatchParams) -> Result<Vec<MotionField>> {
    sampled_pairs(frames.len(), params.max_pairs)
        .into_iter()
        .map(|i| estimate_pair(&frames[i - 1], &frames[i], i as u32, params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn header_only_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "frame,block_x,block_y,dx,dy\n");
        assert!(parse_motion_dump(&p, 64, 64).unwrap().is_empty());
    }

    #[test]
    fn rows_group_by_frame_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            "frame,block_x,block_y,dx,dy\n0,0,0,1,2\n0,16,0,-3,4\n1,0,16,0,0\n0,32,16,5,5\n",
        );
        let fields = parse_motion_dump(&p, 64, 64).unwrap();
        assert_eq!(fields.len(), 2);
        assert_eq!(fields[0].frame_index, 0);
        assert_eq!(fields[0].entries.len(), 3);
        assert_eq!(fields[0].entries[1], MotionVector { block_x: 16, block_y: 0, dx: -3, dy: 4 });
        assert_eq!(fields[0].entries[2].block_x, 32);
        assert_eq!(fields[1].entries.len(), 1);
    }

    #[test]
    fn out_of_bounds_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            "frame,block_x,block_y,dx,dy\n0,0,0,1,2\n0,64,0,0,0\n",
        );
        match parse_motion_dump(&p, 64, 64) {
            Err(Error::Parse { line, reason, .. }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("outside"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.csv", "frame,block_x,block_y,dx,dy\n0,0,zero,1,2\n");
        assert!(matches!(parse_motion_dump(&p, 64, 64), Err(Error::Parse { line: 2, .. })));
        let p = write(dir.path(), "n.csv", "frame,x,y,dx,dy\n");
        assert!(matches!(parse_motion_dump(&p, 64, 64), Err(Error::Parse { line: 1, .. })));
        let p = write(dir.path(), "o.csv", "frame,block_x,block_y,dx,dy\n0,0,0,1\n");
        assert!(parse_motion_dump(&p, 64, 64).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fields = vec![
            MotionField::new(0, 32, 32, vec![MotionVector { block_x: 0, block_y: 0, dx: 1, dy: -1 }]).unwrap(),
            MotionField::new(3, 32, 32, vec![MotionVector { block_x: 16, block_y: 16, dx: 0, dy: 2 }]).unwrap(),
        ];
        let p = dir.path().join("m.csv");
        write_motion_dump(&p, &fields).unwrap();
        assert_eq!(parse_motion_dump(&p, 32, 32).unwrap(), fields);
    }

    #[test]
    fn block_matcher_finds_translation() {
        // textured frame shifted right by 2 and down by 1
        let tex = |x: i64, y: i64| (((x * 37 + y * 91) ^ (x * y)) & 0xff) as u8;
        let prev = Plane::from_fn(64, 48, |x, y| tex(x as i64, y as i64));
        let cur = Plane::from_fn(64, 48, |x, y| tex(x as i64 - 2, y as i64 - 1));
        let field = estimate_pair(&prev, &cur, 1, &BlockMatchParams::default()).unwrap();
        assert_eq!(field.entries.len(), 4 * 3);
        // interior blocks see the true motion
        let mv = field.entries.iter().find(|m| m.block_x == 16 && m.block_y == 16).unwrap();
        assert_eq!((mv.dx, mv.dy), (2, 1));
    }

    #[test]
    fn sampled_pairs_spread() {
        assert!(sampled_pairs(1, 8).is_empty());
        assert_eq!(sampled_pairs(3, 8), vec![1, 2]);
        assert_eq!(sampled_pairs(101, 4), vec![1, 26, 51, 76]);
    }

    #[test]
    fn external_extractor_validates_and_runs() {
        assert!(ExternalExtractor::new("dump {input}").is_err());
        let dir = tempfile::tempdir().unwrap();
        let csv = write(dir.path(), "src.csv", "frame,block_x,block_y,dx,dy\n2,8,8,1,1\n");
        let ex = ExternalExtractor::new("cp {input} {output}").unwrap();
        let fields = ex.extract(&csv, 16, 16).unwrap();
        assert_eq!(fields[0].frame_index, 2);
        let failing = ExternalExtractor::new("false {input} {output}").unwrap();
        assert!(matches!(failing.extract(&csv, 16, 16), Err(Error::Encoder { .. })));
    }
}
