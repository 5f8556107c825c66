//! Resolution-independent quality: Lanczos-3 downsampling, noise versus
//! resolution curves and SNR normalisation.
//!
//! Resolution is the isotropic voxel edge length in millimetres. Merging
//! `N ~ r^3` voxels reduces noise as `r^(-3/2)`, so
//! `log(noise) = log(y0) - m log(r)` with `m` close to 1.5, and an SNR
//! measured at `r` maps to a reference resolution by `(ref / r)^m`.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{estimate, SearchConfig};
use crate::volume::{Slice, Volume};

pub const LANCZOS_LOBES: f64 = 3.0;
pub const DEFAULT_EXPONENT_M: f64 = 1.5;
pub const DEFAULT_REFERENCE_MM: f64 = 1.0;

/// `sinc(x) sinc(x/3)` on `|x| < 3`, zero elsewhere. Exactly zero at nonzero
/// integers and exactly one at the origin.
pub fn lanczos3_kernel(x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    if x.abs() >= LANCZOS_LOBES || x.fract() == 0.0 {
        return 0.0;
    }
    let px = PI * x;
    LANCZOS_LOBES * px.sin() * (px / LANCZOS_LOBES).sin() / (px * px)
}

/// Taps for one output sample: clamped source indices, weights summing to
/// one, and the index of the tap nearest the sample centre.
struct Taps {
    index: Vec<usize>,
    weight: Vec<f64>,
    nearest: usize,
}

fn axis_taps(in_len: usize, out_len: usize, factor: f64) -> Vec<Taps> {
    let support = LANCZOS_LOBES * factor;
    (0..out_len)
        .map(|i| {
            let c = (i as f64 + 0.5) * factor - 0.5;
            let first = (c - support).ceil() as i64;
            let last = (c + support).floor() as i64;
            let clamp = |j: i64| j.clamp(0, in_len as i64 - 1) as usize;
            let mut index = Vec::new();
            let mut weight = Vec::new();
            for j in first..=last {
                let w = lanczos3_kernel((j as f64 - c) / factor);
                if w != 0.0 {
                    index.push(clamp(j));
                    weight.push(w);
                }
            }
            let total: f64 = weight.iter().sum();
            weight.iter_mut().for_each(|w| *w /= total);
            Taps {
                index,
                weight,
                nearest: clamp(c.round() as i64),
            }
        })
        .collect()
}

/// Resamples `line` with `taps`. The result is written relative to the
/// nearest source value so that constant input is reproduced exactly.
fn resample_line(line: &[f64], taps: &Taps) -> f64 {
    let base = line[taps.nearest];
    let delta: f64 = taps
        .index
        .iter()
        .zip(&taps.weight)
        .map(|(&j, &w)| w * (line[j] - base))
        .sum();
    base + delta
}

/// Separable Lanczos-3 downsampling of all three axes to `floor(dim / factor)`.
///
/// The kernel is stretched by `factor`, so each output voxel averages over
/// its footprint. Source coordinates are clamped at the edges. Negative
/// lobes can undershoot next to sharp edges; such values are clamped to zero
/// to keep magnitudes non-negative.
pub fn downsample(volume: &Volume, factor: f64) -> Result<Volume> {
    if !(factor.is_finite() && factor >= 1.0) {
        return Err(Error::InvalidFactor(factor));
    }
    let (w, h, n) = volume.dims();
    let (ow, oh, on) = (
        (w as f64 / factor).floor() as usize,
        (h as f64 / factor).floor() as usize,
        (n as f64 / factor).floor() as usize,
    );
    if ow == 0 || oh == 0 || on == 0 {
        return Err(Error::EmptyAxis {
            factor,
            dims: (w, h, n),
        });
    }
    let (tx, ty, tz) = (
        axis_taps(w, ow, factor),
        axis_taps(h, oh, factor),
        axis_taps(n, on, factor),
    );

    // x then y, per slice.
    let planes: Vec<Vec<f64>> = volume
        .slices()
        .par_iter()
        .map(|s| {
            let px = s.pixels();
            let mut rows = vec![0.0; ow * h];
            for y in 0..h {
                let line = &px[y * w..(y + 1) * w];
                for (x, t) in tx.iter().enumerate() {
                    rows[y * ow + x] = resample_line(line, t);
                }
            }
            let mut out = vec![0.0; ow * oh];
            let mut column = vec![0.0; h];
            for x in 0..ow {
                for (y, c) in column.iter_mut().enumerate() {
                    *c = rows[y * ow + x];
                }
                for (y, t) in ty.iter().enumerate() {
                    out[y * ow + x] = resample_line(&column, t);
                }
            }
            out
        })
        .collect();

    // then z.
    let slices = tz
        .par_iter()
        .map(|t| {
            let mut px = vec![0.0; ow * oh];
            let mut line = vec![0.0; n];
            for (i, p) in px.iter_mut().enumerate() {
                for (z, v) in line.iter_mut().enumerate() {
                    *v = planes[z][i];
                }
                *p = resample_line(&line, t).max(0.0);
            }
            Slice::from_parts_unchecked(ow, oh, px)
        })
        .collect();
    Volume::new(slices, volume.voxel_size().scaled(factor))
}

/// Log-log secant `(ln n1 - ln n2) / (ln r2 - ln r1)`.
pub fn pairwise_gradient(r1: f64, noise1: f64, r2: f64, noise2: f64) -> Result<f64> {
    if !(r1 > 0.0 && r2 > 0.0) {
        return Err(Error::InvalidGradient(format!(
            "resolutions must be positive, got {r1} and {r2}"
        )));
    }
    if r1 == r2 {
        return Err(Error::InvalidGradient(format!(
            "resolutions are equal ({r1})"
        )));
    }
    if !(noise1 > 0.0 && noise2 > 0.0) {
        return Err(Error::InvalidGradient(format!(
            "noise values must be positive, got {noise1} and {noise2}"
        )));
    }
    Ok((noise1.ln() - noise2.ln()) / (r2.ln() - r1.ln()))
}

/// Power-law fit `noise = y0 * r^(-m)` by least squares on the logs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub gradient_m: f64,
    pub y0: f64,
    /// RMS residual of `ln(noise)`.
    pub residual_rms: f64,
}

pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints(points.len()));
    }
    if let Some(&(r, v)) = points.iter().find(|(r, v)| !(*r > 0.0 && *v > 0.0)) {
        return Err(Error::InvalidGradient(format!(
            "point ({r}, {v}) is not strictly positive"
        )));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(r, v)| (r.ln(), v.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidGradient("all resolutions are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = logs
        .iter()
        .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
        .sum();
    Ok(PowerLawFit {
        gradient_m: -slope,
        y0: intercept.exp(),
        residual_rms: (ss / n).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub factor: f64,
    pub resolution_mm: f64,
    pub noise: f64,
    pub snr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedPoint {
    pub factor: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionCurve {
    /// Ascending by resolution.
    pub points: Vec<CurvePoint>,
    pub fit: PowerLawFit,
    pub failures: Vec<FailedPoint>,
}

impl ResolutionCurve {
    pub fn gradient_m(&self) -> f64 {
        self.fit.gradient_m
    }

    pub fn y0(&self) -> f64 {
        self.fit.y0
    }

    /// CSV with header `resolution_mm,noise,snr`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "resolution_mm,noise,snr")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", p.resolution_mm, p.noise, p.snr)?;
        }
        Ok(())
    }
}

/// Downsamples by each factor, estimates noise on each result and fits the
/// power law. Points whose estimation fails are dropped and listed.
pub fn noise_resolution_curve(
    volume: &Volume,
    factors: &[f64],
    cfg: &SearchConfig,
) -> Result<ResolutionCurve> {
    if factors.len() < 2 {
        return Err(Error::TooFewPoints(factors.len()));
    }
    if let Some(&f) = factors.iter().find(|f| !(f.is_finite() && **f >= 1.0)) {
        return Err(Error::InvalidFactor(f));
    }
    cfg.validate()?;

    let outcomes: Vec<std::result::Result<CurvePoint, FailedPoint>> = factors
        .par_iter()
        .map(|&factor| {
            let fail = |reason: String| FailedPoint { factor, reason };
            let resampled = downsample(volume, factor).map_err(|e| fail(e.to_string()))?;
            let est = estimate(&resampled, cfg).map_err(|e| fail(e.to_string()))?;
            if est.sigma <= 0.0 {
                return Err(fail(format!("non-positive noise estimate {}", est.sigma)));
            }
            Ok(CurvePoint {
                factor,
                resolution_mm: resampled.voxel_size().effective_resolution(),
                noise: est.sigma,
                snr: est.snr,
            })
        })
        .collect();

    let mut points = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(p) => points.push(p),
            Err(f) => failures.push(f),
        }
    }
    points.sort_by(|a, b| a.resolution_mm.total_cmp(&b.resolution_mm));
    if points.len() < 2 {
        return Err(Error::TooFewPoints(points.len()));
    }
    let fit = fit_power_law(
        &points
            .iter()
            .map(|p| (p.resolution_mm, p.noise))
            .collect::<Vec<_>>(),
    )?;
    Ok(ResolutionCurve {
        points,
        fit,
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExponentSource {
    Default,
    User,
    Fitted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub snr_measured: f64,
    pub resolution_mm: f64,
    pub reference_resolution_mm: f64,
    pub exponent_m: f64,
    pub exponent_source: ExponentSource,
    pub snr_normalized: f64,
}

/// `snr * (ref_mm / resolution_mm)^m`.
pub fn normalize_quality(
    snr: f64,
    resolution_mm: f64,
    m: f64,
    ref_mm: f64,
    exponent_source: ExponentSource,
) -> Result<QualityScore> {
    if !(resolution_mm > 0.0 && ref_mm > 0.0) {
        return Err(Error::InvalidGradient(format!(
            "resolutions must be positive, got {resolution_mm} and {ref_mm}"
        )));
    }
    Ok(QualityScore {
        snr_measured: snr,
        resolution_mm,
        reference_resolution_mm: ref_mm,
        exponent_m: m,
        exponent_source,
        snr_normalized: snr * (ref_mm / resolution_mm).powf(m),
    })
}
