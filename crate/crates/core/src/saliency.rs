//! Per-frame saliency maps, their per-segment aggregation, and closed-loop
//! blending with eye-tracker fixation maps.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::plane::Plane;

/// Per-frame saliency maps for one segment. All frames share dimensions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSaliencySequence {
    width: usize,
    height: usize,
    frames: Vec<Plane>,
}

impl FrameSaliencySequence {
    pub fn new(frames: Vec<Plane>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("saliency sequence needs at least one frame".into()))?;
        let (width, height) = first.dims();
        for f in &frames[1..] {
            f.ensure_dims(width, height)?;
        }
        Ok(FrameSaliencySequence {
            width,
            height,
            frames,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn frames(&self) -> &[Plane] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Aggregated visual-importance map for a segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SaliencyMap(Plane);

/// Eye-tracker derived map; same shape and range as a saliency map.
pub type FixationMap = SaliencyMap;

impl SaliencyMap {
    pub fn new(plane: Plane) -> Self {
        SaliencyMap(plane)
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn into_plane(self) -> Plane {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.0.get(x, y)
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        Plane::read_pgm(path).map(SaliencyMap)
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        self.0.write_pgm(path)
    }
}

/// Loads one PGM per frame, in the given order.
pub fn load_map_sequence<P: AsRef<Path>>(paths: &[P]) -> Result<FrameSaliencySequence> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no saliency map paths given".into()));
    }
    let frames = paths
        .iter()
        .map(Plane::read_pgm)
        .collect::<Result<Vec<_>>>()?;
    FrameSaliencySequence::new(frames)
}

/// Pointwise maximum over all frames.
pub fn aggregate(seq: &FrameSaliencySequence) -> SaliencyMap {
    let mut acc = MaxAccumulator::default();
    for f in seq.frames() {
        acc.push(f).expect("sequence frames share dimensions");
    }
    acc.finish().expect("sequence is nonempty")
}

/// Streaming form of [`aggregate`], for segments too long to hold in memory.
#[derive(Default)]
pub struct MaxAccumulator {
    acc: Option<Plane>,
}

impl MaxAccumulator {
    pub fn push(&mut self, frame: &Plane) -> Result<()> {
        match &mut self.acc {
            None => self.acc = Some(frame.clone()),
            Some(acc) => {
                frame.ensure_dims(acc.width(), acc.height())?;
                for (a, &b) in acc.data_mut().iter_mut().zip(frame.data()) {
                    *a = (*a).max(b);
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Option<SaliencyMap> {
        self.acc.map(SaliencyMap)
    }
}

/// Isotropic Gaussian centre-bias prior, sigma = 0.3 * min(width, height).
pub fn center_prior(width: usize, height: usize) -> Vec<f64> {
    let sigma = 0.3 * width.min(height) as f64;
    let two_s2 = 2.0 * sigma * sigma;
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let dy = y as f64 - cy;
        for x in 0..width {
            let dx = x as f64 - cx;
            out.push((-(dx * dx + dy * dy) / two_s2).exp());
        }
    }
    out
}

/// Built-in classical saliency for one frame: centre prior scaled by temporal
/// contrast against `prev`, normalized so the frame maximum becomes 255.
pub fn builtin_frame_map(prior: &[f64], prev: &Plane, cur: &Plane) -> Result<Plane> {
    let (w, h) = cur.dims();
    prev.ensure_dims(w, h)?;
    if prior.len() != w * h {
        return Err(Error::InvalidArgument("prior does not match frame size".into()));
    }
    let raw: Vec<f64> = prior
        .iter()
        .zip(cur.data().iter().zip(prev.data()))
        .map(|(&g, (&c, &p))| g * (1.0 + (c as f64 - p as f64).abs() / 255.0))
        .collect();
    let peak = raw.iter().copied().fold(0.0f64, f64::max);
    let data = raw
        .iter()
        .map(|&v| {
            if peak > 0.0 {
                (255.0 * v / peak).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect();
    Plane::new(w, h, data)
}

/// Deterministic stand-in for a learned saliency model. Frame 0 reuses the
/// temporal difference between frames 1 and 0.
pub fn generate_builtin(video_frames: &[Plane]) -> Result<FrameSaliencySequence> {
    if video_frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "built-in saliency needs at least 2 frames, got {}",
            video_frames.len()
        )));
    }
    let (w, h) = video_frames[0].dims();
    for f in video_frames {
        f.ensure_dims(w, h)?;
    }
    let prior = center_prior(w, h);
    let maps = (0..video_frames.len())
        .into_par_iter()
        .map(|i| {
            let (prev, cur) = if i == 0 { (0, 1) } else { (i - 1, i) };
            builtin_frame_map(&prior, &video_frames[prev], &video_frames[cur])
        })
        .collect::<Result<Vec<_>>>()?;
    FrameSaliencySequence::new(maps)
}

/// Blends a fixation map into the current map:
/// `round(alpha * current + (1 - alpha) * fixation)`, half away from zero.
pub fn update_map(current: &SaliencyMap, fixation: &FixationMap, alpha: f64) -> Result<SaliencyMap> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "blend weight alpha must lie in [0, 1], got {alpha}"
        )));
    }
    fixation.plane().ensure_dims(current.width(), current.height())?;
    let data = current
        .plane()
        .data()
        .iter()
        .zip(fixation.plane().data())
        .map(|(&c, &f)| (alpha * c as f64 + (1.0 - alpha) * f as f64).round().clamp(0.0, 255.0) as u8)
        .collect();
    Ok(SaliencyMap(Plane::new(current.width(), current.height(), data)?))
}
