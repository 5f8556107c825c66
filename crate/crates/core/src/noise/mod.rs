//! Automatic noise and signal estimation for magnitude volumes.
//!
//! Pixels above a threshold are treated as object and zeroed; the noise is
//! the corrected std of the surviving positive (background) pixels, averaged
//! over slices. The threshold itself comes from [`search::find_t_opt`].
//! [`background_roi_noise`] is the classical second-moment estimator on a
//! known background mask, kept as an independent cross-check.

pub mod search;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{PixelStats, Slice, Volume};

pub use search::{
    find_t_lower, find_t_opt, CurveSample, GridKind, HomogeneityCurve, NoObjectReason,
    SearchConfig, SearchMode, SearchModeUsed, ThresholdResult,
};

/// `1 / sqrt(2 - pi/2)`, the exact ratio of channel sigma to Rayleigh std.
pub fn rayleigh_correction_exact() -> f64 {
    1.0 / (2.0 - std::f64::consts::FRAC_PI_2).sqrt()
}

/// Zeroes every pixel strictly above `t`.
///
/// # Panics
/// If `t` is negative or NaN.
pub fn apply_threshold(slice: &Slice, t: f64) -> Slice {
    assert!(t >= 0.0, "threshold must be >= 0, got {t}");
    let pixels = slice
        .pixels()
        .iter()
        .map(|&v| if v > t { 0.0 } else { v })
        .collect();
    Slice::from_parts_unchecked(slice.width(), slice.height(), pixels)
}

/// `f_e` times the population std of the positive pixels that survive
/// thresholding at `t`; `None` when nothing survives.
pub fn positive_noise(slice: &Slice, t: f64, f_e: f64) -> Option<f64> {
    let retained = slice
        .pixels()
        .iter()
        .copied()
        .filter(|&v| v > 0.0 && v <= t);
    PixelStats::from_values(retained).std().map(|s| f_e * s)
}

/// [`positive_noise`] for every slice, in slice order.
pub fn per_slice_positive_noise(volume: &Volume, t: f64, f_e: f64) -> Vec<Option<f64>> {
    volume
        .slices()
        .iter()
        .map(|s| positive_noise(s, t, f_e))
        .collect()
}

/// Mean of [`positive_noise`] over the slices where it is defined.
pub fn mean_positive_noise(volume: &Volume, t: f64, f_e: f64) -> Result<f64> {
    mean_present(&per_slice_positive_noise(volume, t, f_e)).ok_or(Error::NoBackground { t })
}

fn mean_present(values: &[Option<f64>]) -> Option<f64> {
    let (n, sum) = values
        .iter()
        .flatten()
        .fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| sum / n as f64)
}

/// Variance (1/n) and mean of the per-slice stds of the thresholded slices,
/// zeros included. Reference implementation of one homogeneity-curve point.
pub fn homogeneity_variance(volume: &Volume, t: f64) -> (f64, f64) {
    let stds: Vec<f64> = volume
        .slices()
        .iter()
        .map(|s| {
            let values = s.pixels().iter().map(|&v| if v > t { 0.0 } else { v });
            PixelStats::from_values(values)
                .std()
                .expect("slices are never empty")
        })
        .collect();
    let n = stds.len() as f64;
    let mean = stds.iter().sum::<f64>() / n;
    let var = stds.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    (var, mean)
}

/// Per-pixel selection over a whole volume, slice-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    dims: (usize, usize, usize),
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, n: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height * n {
            return Err(Error::InvalidVolume(format!(
                "mask has {} entries for {width}x{height}x{n}",
                bits.len()
            )));
        }
        Ok(Mask {
            dims: (width, height, n),
            bits,
        })
    }

    /// Repeats one 2-D mask over `n` slices.
    pub fn from_slice_mask(
        width: usize,
        height: usize,
        n: usize,
        slice_bits: &[bool],
    ) -> Result<Self> {
        if slice_bits.len() != width * height {
            return Err(Error::InvalidVolume(format!(
                "slice mask has {} entries for {width}x{height}",
                slice_bits.len()
            )));
        }
        Mask::new(width, height, n, slice_bits.repeat(n))
    }

    pub fn full(width: usize, height: usize, n: usize) -> Self {
        Mask {
            dims: (width, height, n),
            bits: vec![true; width * height * n],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// `sqrt(<M^2> / 2)` over the masked pixels.
pub fn background_roi_noise(volume: &Volume, mask: &Mask) -> Result<f64> {
    if mask.dims != volume.dims() {
        return Err(Error::MaskMismatch {
            mask: mask.dims,
            volume: volume.dims(),
        });
    }
    let (count, sum_sq) = volume
        .iter_pixels()
        .zip(&mask.bits)
        .filter(|(_, &m)| m)
        .fold((0usize, 0.0), |(c, s), (v, _)| (c + 1, s + v * v));
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((0.5 * sum_sq / count as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    /// Noise sigma in intensity units.
    pub sigma: f64,
    /// Mean of the object pixels (original values above `t_opt`).
    pub signal_mean: f64,
    pub snr: f64,
    /// Corrected positive-pixel std per slice; `None` for skipped slices.
    pub per_slice_sigma: Vec<Option<f64>>,
    pub skipped_slices: Vec<usize>,
    pub object_pixels: usize,
    pub correction_factor: f64,
    pub threshold: ThresholdResult,
}

/// Runs the threshold search and measures noise, signal and SNR at `t_opt`.
pub fn estimate(volume: &Volume, cfg: &SearchConfig) -> Result<NoiseEstimate> {
    let threshold = find_t_opt(volume, cfg)?;
    estimate_at(volume, cfg, threshold)
}

/// Noise, signal and SNR for an already selected threshold.
pub fn estimate_at(
    volume: &Volume,
    cfg: &SearchConfig,
    threshold: ThresholdResult,
) -> Result<NoiseEstimate> {
    let t = threshold.t_opt;
    let f_e = cfg.correction_factor;
    let per_slice_sigma = per_slice_positive_noise(volume, t, f_e);
    let sigma = mean_present(&per_slice_sigma).ok_or(Error::NoBackground { t })?;
    let skipped_slices = per_slice_sigma
        .iter()
        .enumerate()
        .filter_map(|(j, s)| s.is_none().then_some(j))
        .collect();

    let (object_pixels, object_sum) = if threshold.no_object {
        (0, 0.0)
    } else {
        volume
            .iter_pixels()
            .filter(|&v| v > t)
            .fold((0usize, 0.0), |(c, s), v| (c + 1, s + v))
    };
    let signal_mean = if object_pixels > 0 {
        object_sum / object_pixels as f64
    } else {
        0.0
    };
    let snr = if sigma > 0.0 {
        signal_mean / sigma
    } else {
        0.0
    };

    Ok(NoiseEstimate {
        sigma,
        signal_mean,
        snr,
        per_slice_sigma,
        skipped_slices,
        object_pixels,
        correction_factor: f_e,
        threshold,
    })
}
