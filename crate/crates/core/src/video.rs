//! Raw video input: YUV4MPEG2 (`.y4m`) sources, read as luma planes.
//!
//! Every raw frame is independently decodable, so every frame of a y4m
//! source is a valid keyframe for segmentation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::Plane;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRate {
    pub num: u32,
    pub den: u32,
}

impl FrameRate {
    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn frame_period_s(self) -> f64 {
        self.den as f64 / self.num as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoInfo {
    pub width: usize,
    pub height: usize,
    pub frame_rate: FrameRate,
    pub frame_count: usize,
}

impl VideoInfo {
    pub fn duration_s(&self) -> f64 {
        self.frame_count as f64 * self.frame_rate.frame_period_s()
    }

    /// Frame indices usable as segment starts.
    pub fn keyframes(&self) -> Vec<usize> {
        (0..self.frame_count).collect()
    }
}

fn video_err(path: &Path, reason: impl ToString) -> Error {
    Error::Video {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Sequential luma reader over a y4m file.
pub struct Y4mSource {
    path: PathBuf,
    decoder: y4m::Decoder<BufReader<File>>,
    next_index: usize,
}

impl Y4mSource {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = y4m::decode(BufReader::new(file)).map_err(|e| video_err(path, format!("{e:?}")))?;
        if decoder.get_bytes_per_sample() != 1 {
            return Err(video_err(path, "only 8-bit y4m sources are supported"));
        }
        if decoder.get_width() == 0 || decoder.get_height() == 0 {
            return Err(video_err(path, "zero frame dimensions"));
        }
        let rate = decoder.get_framerate();
        if rate.num == 0 || rate.den == 0 {
            return Err(video_err(path, "invalid frame rate"));
        }
        Ok(Y4mSource {
            path: path.to_path_buf(),
            decoder,
            next_index: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.decoder.get_width()
    }

    pub fn height(&self) -> usize {
        self.decoder.get_height()
    }

    pub fn frame_rate(&self) -> FrameRate {
        let r = self.decoder.get_framerate();
        FrameRate {
            num: r.num as u32,
            den: r.den as u32,
        }
    }

    /// Next luma plane, or `None` at end of stream.
    pub fn next_luma(&mut self) -> Result<Option<Plane>> {
        let (w, h) = (self.width(), self.height());
        match self.decoder.read_frame() {
            Ok(frame) => {
                self.next_index += 1;
                let y = &frame.get_y_plane()[..w * h];
                Ok(Some(Plane::new(w, h, y.to_vec())?))
            }
            Err(y4m::Error::EOF) => Ok(None),
            Err(e) => Err(video_err(
                &self.path,
                format!("frame {}: {e:?}", self.next_index),
            )),
        }
    }

    /// Calls `f(index, luma)` for every frame whose index falls in `range`.
    pub fn for_each_in(
        &mut self,
        range: Range<usize>,
        mut f: impl FnMut(usize, Plane) -> Result<()>,
    ) -> Result<()> {
        while self.next_index < range.end {
            let index = self.next_index;
            match self.next_luma()? {
                Some(plane) if index >= range.start => f(index, plane)?,
                Some(_) => {}
                None => {
                    return Err(video_err(
                        &self.path,
                        format!("stream ended at frame {index}, expected {}", range.end),
                    ))
                }
            }
        }
        Ok(())
    }
}

pub fn probe(path: impl AsRef<Path>) -> Result<VideoInfo> {
    let mut src = Y4mSource::open(path)?;
    let mut count = 0;
    while src.decoder.read_frame().is_ok() {
        count += 1;
    }
    Ok(VideoInfo {
        width: src.width(),
        height: src.height(),
        frame_rate: src.frame_rate(),
        frame_count: count,
    })
}

/// Reads the luma planes of frames in `range`.
pub fn read_luma_range(path: impl AsRef<Path>, range: Range<usize>) -> Result<Vec<Plane>> {
    let mut src = Y4mSource::open(path)?;
    let mut out = Vec::with_capacity(range.len());
    src.for_each_in(range, |_, p| {
        out.push(p);
        Ok(())
    })?;
    Ok(out)
}

/// Copies frames in `range` (all planes) into a new y4m file.
pub fn copy_frame_range(src: &Path, dst: &Path, range: Range<usize>) -> Result<()> {
    let file = File::open(src).map_err(|e| Error::io(src, e))?;
    let mut decoder = y4m::decode(BufReader::new(file)).map_err(|e| video_err(src, format!("{e:?}")))?;
    let out = File::create(dst).map_err(|e| Error::io(dst, e))?;
    let mut encoder = y4m::encode(
        decoder.get_width(),
        decoder.get_height(),
        decoder.get_framerate(),
    )
    .with_colorspace(decoder.get_colorspace())
    .write_header(BufWriter::new(out))
    .map_err(|e| video_err(dst, format!("{e:?}")))?;
    for index in 0..range.end {
        let frame = decoder
            .read_frame()
            .map_err(|e| video_err(src, format!("frame {index}: {e:?}")))?;
        if index >= range.start {
            encoder
                .write_frame(&frame)
                .map_err(|e| video_err(dst, format!("{e:?}")))?;
        }
    }
    Ok(())
}

/// Writes luma planes as a monochrome y4m file.
pub fn write_luma_y4m(path: impl AsRef<Path>, frames: &[Plane], rate: FrameRate) -> Result<()> {
    let path = path.as_ref();
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot write a video with no frames".into()))?;
    let (w, h) = first.dims();
    let out = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = y4m::encode(w, h, y4m::Ratio::new(rate.num as usize, rate.den as usize))
        .with_colorspace(y4m::Colorspace::Cmono)
        .write_header(BufWriter::new(out))
        .map_err(|e| video_err(path, format!("{e:?}")))?;
    for frame in frames {
        frame.ensure_dims(w, h)?;
        encoder
            .write_frame(&y4m::Frame::new([frame.data(), &[], &[]], None))
            .map_err(|e| video_err(path, format!("{e:?}")))?;
    }
    Ok(())
}

/// Luma frames of a PGM (one frame) or a y4m (every frame).
pub fn read_frames_any(path: impl AsRef<Path>) -> Result<Vec<Plane>> {
    let path = path.as_ref();
    let mut magic = [0u8; 2];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map_err(|e| Error::io(path, e))?;
    if &magic == b"P5" {
        return Ok(vec![Plane::read_pgm(path)?]);
    }
    let mut src = Y4mSource::open(path)?;
    let mut out = Vec::new();
    while let Some(p) = src.next_luma()? {
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn y4m_round_trip_and_probe() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.y4m");
        let frames: Vec<Plane> = (0..5)
            .map(|i| Plane::from_fn(8, 4, |x, y| (x + y + i * 10) as u8))
            .collect();
        let rate = FrameRate { num: 5, den: 1 };
        write_luma_y4m(&path, &frames, rate).unwrap();
        let info = probe(&path).unwrap();
        assert_eq!((info.width, info.height, info.frame_count), (8, 4, 5));
        assert_eq!(info.frame_rate, rate);
        assert!((info.duration_s() - 1.0).abs() < 1e-12);
        assert_eq!(read_luma_range(&path, 1..3).unwrap(), frames[1..3].to_vec());

        let sub = dir.path().join("sub.y4m");
        copy_frame_range(&path, &sub, 2..5).unwrap();
        assert_eq!(read_frames_any(&sub).unwrap(), frames[2..5].to_vec());
    }

    #[test]
    fn short_stream_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.y4m");
        write_luma_y4m(&path, &[Plane::filled(4, 4, 1)], FrameRate { num: 1, den: 1 }).unwrap();
        assert!(read_luma_range(&path, 0..3).is_err());
    }
}
