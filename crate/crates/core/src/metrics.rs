//! PSNR and eye-weighted PSNR over luma frame pairs.
//!
//! Both metrics pool squared error over every pixel of every pair before
//! taking the log, and report [`PSNR_CAP_DB`] when the error is zero. EWPSNR
//! weights each pixel by `max(saliency, 1) / 255`, so an all-black map still
//! carries weight and a uniform map reduces to plain PSNR.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::saliency::SaliencyMap;

pub const PSNR_CAP_DB: f64 = 100.0;

const PEAK_SQ: f64 = 255.0 * 255.0;

#[derive(Clone, Copy, Debug)]
pub struct FramePair<'a> {
    pub reference: &'a Plane,
    pub processed: &'a Plane,
}

impl<'a> FramePair<'a> {
    pub fn new(reference: &'a Plane, processed: &'a Plane) -> Result<Self> {
        processed.ensure_dims(reference.width(), reference.height())?;
        Ok(FramePair {
            reference,
            processed,
        })
    }
}

/// PSNR in dB for a mean squared error, capped for zero error.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (PEAK_SQ / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn mse_from_psnr(psnr_db: f64) -> f64 {
    PEAK_SQ * 10f64.powf(-psnr_db / 10.0)
}

fn check_pairs(pairs: &[FramePair<'_>]) -> Result<(usize, usize)> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no frame pairs to compare".into()))?;
    let (w, h) = first.reference.dims();
    for p in pairs {
        p.reference.ensure_dims(w, h)?;
        p.processed.ensure_dims(w, h)?;
    }
    Ok((w, h))
}

// Per-frame sums are exact integers; frames are combined in index order.
fn frame_sse(p: &FramePair<'_>) -> u64 {
    p.reference
        .data()
        .iter()
        .zip(p.processed.data())
        .map(|(&a, &b)| {
            let d = a.abs_diff(b) as u64;
            d * d
        })
        .sum()
}

pub fn psnr(pairs: &[FramePair<'_>]) -> Result<f64> {
    let (w, h) = check_pairs(pairs)?;
    let sse: u64 = pairs.par_iter().map(frame_sse).collect::<Vec<_>>().iter().sum();
    let n = (w * h * pairs.len()) as f64;
    Ok(psnr_from_mse(sse as f64 / n))
}

/// Per-pixel EWPSNR weight for a saliency value.
#[inline]
pub fn saliency_weight(s: u8) -> f64 {
    s.max(1) as f64 / 255.0
}

pub fn ewpsnr(pairs: &[FramePair<'_>], map: &SaliencyMap) -> Result<f64> {
    let (w, h) = check_pairs(pairs)?;
    map.plane().ensure_dims(w, h)?;
    let weights: Vec<f64> = map.plane().data().iter().map(|&s| saliency_weight(s)).collect();
    let weight_sum: f64 = weights.iter().sum();
    let per_frame: Vec<f64> = pairs
        .par_iter()
        .map(|p| {
            p.reference
                .data()
                .iter()
                .zip(p.processed.data())
                .zip(&weights)
                .map(|((&a, &b), &wt)| {
                    let d = a as f64 - b as f64;
                    wt * d * d
                })
                .sum::<f64>()
        })
        .collect();
    let weighted: f64 = per_frame.iter().sum();
    Ok(psnr_from_mse(weighted / (weight_sum * pairs.len() as f64)))
}

pub fn bitrate_reduction(original_bytes: f64, new_bytes: f64) -> Result<f64> {
    if !(original_bytes > 0.0) {
        return Err(Error::InvalidArgument(
            "original size must be positive to compute a reduction".into(),
        ));
    }
    Ok(1.0 - new_bytes / original_bytes)
}
