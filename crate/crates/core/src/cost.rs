//! Data-center cost model: monthly compute, storage and transfer spend for a
//! video library with and without perceptual compression, and the view count
//! at which the two break even.
//!
//! compute  = num_videos * transcode_cost * (vignette ? multiplier : 1)
//! storage  = total_storage_gb * (vignette ? cf : 1) * storage_price * months
//! transfer = views * video_size_gb * (vignette ? cf : 1) * transfer_price
//!
//! where `transcode_cost` is the baseline per-video cost scaled by the
//! pricing tier.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PricingTier {
    #[default]
    OnDemand,
    /// 36% cheaper than on-demand.
    Reserved,
    /// 73% cheaper than on-demand.
    Spot,
}

impl PricingTier {
    pub fn compute_multiplier(self) -> f64 {
        match self {
            PricingTier::OnDemand => 1.0,
            PricingTier::Reserved => 0.64,
            PricingTier::Spot => 0.27,
        }
    }
}

impl FromStr for PricingTier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on_demand" | "on-demand" => Ok(PricingTier::OnDemand),
            "reserved" => Ok(PricingTier::Reserved),
            "spot" => Ok(PricingTier::Spot),
            _ => Err(Error::InvalidArgument(format!(
                "unknown pricing tier `{s}` (expected on_demand, reserved or spot)"
            ))),
        }
    }
}

impl fmt::Display for PricingTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PricingTier::OnDemand => "on_demand",
            PricingTier::Reserved => "reserved",
            PricingTier::Spot => "spot",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    pub num_videos: f64,
    pub video_size_gb: f64,
    pub variants: f64,
    pub total_storage_gb: f64,
    pub storage_price_per_gb_month: f64,
    pub transfer_price_per_gb: f64,
    pub baseline_transcode_cost_per_video: f64,
    pub vignette_compute_multiplier: f64,
    pub compressed_fraction: f64,
    pub horizon_months: f64,
    pub pricing: PricingTier,
}

impl Default for CostParams {
    fn default() -> Self {
        CostParams {
            num_videos: 1e6,
            video_size_gb: 0.01,
            variants: 100.0,
            total_storage_gb: 5e5,
            storage_price_per_gb_month: 0.023,
            transfer_price_per_gb: 0.05,
            baseline_transcode_cost_per_video: 0.212,
            vignette_compute_multiplier: 5.0,
            compressed_fraction: 0.10,
            horizon_months: 1.0,
            pricing: PricingTier::OnDemand,
        }
    }
}

/// Names accepted by [`CostParams::set`], in display order.
pub const PARAM_NAMES: [&str; 11] = [
    "num_videos",
    "video_size_gb",
    "variants",
    "total_storage_gb",
    "storage_price_per_gb_month",
    "transfer_price_per_gb",
    "baseline_transcode_cost_per_video",
    "vignette_compute_multiplier",
    "compressed_fraction",
    "horizon_months",
    "pricing",
];

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.numeric() {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "cost parameter {name} must be positive, got {v}"
                )));
            }
        }
        if self.compressed_fraction > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "compressed_fraction must be in (0, 1], got {}",
                self.compressed_fraction
            )));
        }
        Ok(())
    }

    fn numeric(&self) -> [(&'static str, f64); 10] {
        [
            ("num_videos", self.num_videos),
            ("video_size_gb", self.video_size_gb),
            ("variants", self.variants),
            ("total_storage_gb", self.total_storage_gb),
            ("storage_price_per_gb_month", self.storage_price_per_gb_month),
            ("transfer_price_per_gb", self.transfer_price_per_gb),
            ("baseline_transcode_cost_per_video", self.baseline_transcode_cost_per_video),
            ("vignette_compute_multiplier", self.vignette_compute_multiplier),
            ("compressed_fraction", self.compressed_fraction),
            ("horizon_months", self.horizon_months),
        ]
    }

    /// `(name, value)` for every parameter, as text.
    pub fn table(&self) -> Vec<(&'static str, String)> {
        let mut rows: Vec<(&'static str, String)> =
            self.numeric().iter().map(|&(k, v)| (k, v.to_string())).collect();
        rows.push(("pricing", self.pricing.to_string()));
        rows
    }

    pub fn get(&self, key: &str) -> Result<f64> {
        self.numeric()
            .iter()
            .find(|(k, _)| *k == key)
            .map(|&(_, v)| v)
            .ok_or_else(|| unknown_param(key))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "pricing" {
            self.pricing = value.parse()?;
            return Ok(());
        }
        let v: f64 = value.trim().parse().map_err(|_| {
            Error::InvalidArgument(format!("cost parameter {key}: `{value}` is not a number"))
        })?;
        let slot = match key {
            "num_videos" => &mut self.num_videos,
            "video_size_gb" => &mut self.video_size_gb,
            "variants" => &mut self.variants,
            "total_storage_gb" => &mut self.total_storage_gb,
            "storage_price_per_gb_month" => &mut self.storage_price_per_gb_month,
            "transfer_price_per_gb" => &mut self.transfer_price_per_gb,
            "baseline_transcode_cost_per_video" => &mut self.baseline_transcode_cost_per_video,
            "vignette_compute_multiplier" => &mut self.vignette_compute_multiplier,
            "compressed_fraction" => &mut self.compressed_fraction,
            "horizon_months" => &mut self.horizon_months,
            _ => return Err(unknown_param(key)),
        };
        *slot = v;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("override `{o}` is not of the form key=value"))
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(self)
    }
}

fn unknown_param(key: &str) -> Error {
    Error::InvalidArgument(format!(
        "unknown cost parameter `{key}` (known: {})",
        PARAM_NAMES.join(", ")
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub compute: f64,
    pub storage: f64,
    pub transfer: f64,
    pub total: f64,
}

pub fn system_cost(p: &CostParams, views: f64, vignette: bool) -> Result<CostBreakdown> {
    p.validate()?;
    if !(views >= 0.0) {
        return Err(Error::InvalidArgument(format!("views must be nonnegative, got {views}")));
    }
    let (mult, frac) = if vignette {
        (p.vignette_compute_multiplier, p.compressed_fraction)
    } else {
        (1.0, 1.0)
    };
    let compute =
        p.num_videos * p.baseline_transcode_cost_per_video * p.pricing.compute_multiplier() * mult;
    let storage = p.total_storage_gb * frac * p.storage_price_per_gb_month * p.horizon_months;
    let transfer = views * p.video_size_gb * frac * p.transfer_price_per_gb;
    Ok(CostBreakdown {
        compute,
        storage,
        transfer,
        total: compute + storage + transfer,
    })
}

/// Smallest view count at which the perceptual pipeline costs no more than the
/// baseline.
pub fn breakeven_views(p: &CostParams) -> Result<f64> {
    p.validate()?;
    let denom = (1.0 - p.compressed_fraction) * p.video_size_gb * p.transfer_price_per_gb;
    if denom <= 0.0 {
        return Err(Error::InvalidArgument(
            "break-even undefined: compressed_fraction = 1 leaves no per-view saving".into(),
        ));
    }
    let base = system_cost(p, 0.0, false)?;
    let vig = system_cost(p, 0.0, true)?;
    let delta_compute = vig.compute - base.compute;
    let storage_savings = base.storage - vig.storage;
    Ok(((delta_compute - storage_savings) / denom).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub breakeven_views: f64,
}

/// Break-even views as one parameter varies.
pub fn sweep(p: &CostParams, key: &str, values: &[f64]) -> Result<Vec<SweepRow>> {
    p.get(key)?;
    values
        .iter()
        .map(|&v| {
            let mut q = p.clone();
            q.set(key, &v.to_string())?;
            Ok(SweepRow {
                value: v,
                breakeven_views: breakeven_views(&q)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub views: f64,
    pub baseline_cost: f64,
    pub vignette_cost: f64,
}

/// Total cost of both pipelines at each view count.
pub fn cost_curve(p: &CostParams, views: &[f64]) -> Result<Vec<CurveRow>> {
    views
        .iter()
        .map(|&v| {
            Ok(CurveRow {
                views: v,
                baseline_cost: system_cost(p, v, false)?.total,
                vignette_cost: system_cost(p, v, true)?.total,
            })
        })
        .collect()
}

/// `n` view counts spaced geometrically over `[lo, hi]`.
pub fn geometric_views(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo && n >= 2) {
        return Err(Error::InvalidArgument(format!(
            "geometric range needs 0 < lo < hi and n >= 2, got lo={lo} hi={hi} n={n}"
        )));
    }
    let ratio = (hi / lo).powf(1.0 / (n - 1) as f64);
    Ok((0..n).map(|i| lo * ratio.powi(i as i32)).collect())
}

pub fn write_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)
            .map_err(|e| Error::InvalidArgument(format!("writing CSV: {e}")))?;
    }
    out.flush()
        .map_err(|e| Error::InvalidArgument(format!("writing CSV: {e}")))?;
    Ok(())
}
