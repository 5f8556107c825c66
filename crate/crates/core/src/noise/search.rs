//! Threshold selection on the slice-homogeneity curve.
//!
//! For a threshold `t`, every pixel above `t` is zeroed and each slice's
//! population std (zeros included) is taken. The homogeneity curve is the
//! 1/n variance of those per-slice stds together with their mean. The
//! selected threshold is the grid argmin of the variance on `[t_lower, t_max]`,
//! rejected in favour of `t_max` when the mean std there exceeds the mean std
//! at `t_max`.
//!
//! Curve evaluations use per-slice sorted prefix sums, so each point costs
//! `O(n log P)` for `n` slices of `P` pixels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Probe start and probe step for the lower-bracket heuristic.
pub const DEFAULT_T_START: f64 = 40.0;
pub const DEFAULT_EPSILON: f64 = 10.0;
pub const DEFAULT_GRID_STEP: f64 = 1.0;
/// Std-to-sigma correction for Rayleigh-distributed background magnitudes.
pub const DEFAULT_CORRECTION_FACTOR: f64 = 1.53;
/// Above this intensity the probe constants are scaled by `intensity_max / 4095`.
pub const TWELVE_BIT_MAX: f64 = 4095.0;
/// Relative tolerance under which two curve values count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Lower bounds are shrunk by this relative margin before pruning so that
/// rounding in the bound can never discard a true minimiser.
const BOUND_SAFETY: f64 = 1e-9;
/// Intervals at most this long are evaluated point by point.
const LEAF_LEN: usize = 8;
/// Prefix-length spans up to this size get exact per-slice variance ranges.
const EXACT_SPAN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    BracketedMinimum,
    Exhaustive,
}

impl std::str::FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bracketed-minimum" | "bracketed" => Ok(SearchMode::BracketedMinimum),
            "exhaustive" => Ok(SearchMode::Exhaustive),
            other => Err(Error::InvalidConfig(format!(
                "unknown search mode {other:?} (expected bracketed-minimum or exhaustive)"
            ))),
        }
    }
}

/// Which thresholds are candidates for `t_opt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    /// `t_lower + i * grid_step`, plus `t_max`.
    Uniform,
    /// `t_lower` plus every distinct pixel value in `(t_lower, t_max]`.
    DistinctValues,
}

impl std::str::FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(GridKind::Uniform),
            "distinct-values" | "distinct" => Ok(GridKind::DistinctValues),
            other => Err(Error::InvalidConfig(format!(
                "unknown grid kind {other:?} (expected uniform or distinct-values)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub t_start: f64,
    pub epsilon: f64,
    pub grid_step: f64,
    pub correction_factor: f64,
    pub search_mode: SearchMode,
    pub grid: GridKind,
    /// Scale `t_start` and `epsilon` by `intensity_max / 4095` for volumes
    /// beyond the 12-bit range.
    pub auto_scale: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            t_start: DEFAULT_T_START,
            epsilon: DEFAULT_EPSILON,
            grid_step: DEFAULT_GRID_STEP,
            correction_factor: DEFAULT_CORRECTION_FACTOR,
            search_mode: SearchMode::BracketedMinimum,
            grid: GridKind::Uniform,
            auto_scale: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive("epsilon", self.epsilon)?;
        positive("grid_step", self.grid_step)?;
        positive("correction_factor", self.correction_factor)?;
        if !(self.t_start.is_finite() && self.t_start >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "t_start must be >= 0, got {}",
                self.t_start
            )));
        }
        Ok(())
    }

    /// `(t_start, epsilon)` after range scaling for a volume whose maximum is
    /// `intensity_max`.
    pub fn effective_probe(&self, intensity_max: f64) -> (f64, f64) {
        if self.auto_scale && intensity_max > TWELVE_BIT_MAX {
            let s = intensity_max / TWELVE_BIT_MAX;
            (self.t_start * s, self.epsilon * s)
        } else {
            (self.t_start, self.epsilon)
        }
    }
}

/// One evaluated point of the homogeneity curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveSample {
    pub t: f64,
    /// 1/n variance of the per-slice stds.
    pub variance: f64,
    /// Mean of the per-slice stds.
    pub mean_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchModeUsed {
    BracketedMinimum,
    Exhaustive,
    /// Bracketed search could not certify its minimum within budget and
    /// scanned the whole grid.
    ExhaustiveFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoObjectReason {
    /// Mean std at the curve minimum exceeds the mean std at `t_max`.
    GuardRejected,
    /// The probe never saw the curve descend, so the bracket collapsed to `t_max`.
    NoDescent,
    /// The curve minimum is `t_max` itself.
    MinimumAtTmax,
    /// Every pixel is zero.
    EmptyVolume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub t_opt: f64,
    /// Grid argmin before the mean-std guard.
    pub t_argmin: f64,
    pub t_lower: f64,
    pub t_max: f64,
    /// Evaluated grid samples, ascending in `t`.
    pub curve: Vec<CurveSample>,
    pub no_object: bool,
    pub no_object_reason: Option<NoObjectReason>,
    pub mode_used: SearchModeUsed,
    /// Number of grid points evaluated by the search.
    pub evaluations: usize,
    pub grid_len: usize,
    /// Probe start and step actually used, after range scaling.
    pub t_start_effective: f64,
    pub epsilon_effective: f64,
}

impl ThresholdResult {
    /// Curve sample at the returned threshold.
    pub fn sample_at_opt(&self) -> Option<&CurveSample> {
        self.curve.iter().find(|s| s.t == self.t_opt)
    }
}

struct SliceProfile {
    sorted: Vec<f64>,
    /// `sum[k]` is the sum of the `k` smallest values.
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

impl SliceProfile {
    fn new(pixels: &[f64]) -> Self {
        let mut sorted = pixels.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut sum = Vec::with_capacity(sorted.len() + 1);
        let mut sumsq = Vec::with_capacity(sorted.len() + 1);
        let (mut s, mut q) = (0.0, 0.0);
        sum.push(0.0);
        sumsq.push(0.0);
        for &v in &sorted {
            s += v;
            q += v * v;
            sum.push(s);
            sumsq.push(q);
        }
        SliceProfile { sorted, sum, sumsq }
    }

    /// Number of values `<= t`.
    fn retained(&self, t: f64) -> usize {
        self.sorted.partition_point(|&v| v <= t)
    }

    fn variance_at_len(&self, k: usize, n_pixels: f64) -> f64 {
        let mean = self.sum[k] / n_pixels;
        (self.sumsq[k] / n_pixels - mean * mean).max(0.0)
    }

    fn std_at(&self, t: f64, n_pixels: f64) -> f64 {
        self.variance_at_len(self.retained(t), n_pixels).sqrt()
    }

    /// Range of the thresholded std over all `t` in `[a, b]`.
    fn std_range(&self, a: f64, b: f64, n_pixels: f64) -> (f64, f64) {
        let (ka, kb) = (self.retained(a), self.retained(b));
        if kb - ka <= EXACT_SPAN {
            let (lo, hi) = (ka..=kb)
                .map(|k| self.variance_at_len(k, n_pixels))
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                });
            return (lo.sqrt(), hi.sqrt());
        }
        let lo = self.sumsq[ka] / n_pixels - (self.sum[kb] / n_pixels).powi(2);
        let hi = self.sumsq[kb] / n_pixels - (self.sum[ka] / n_pixels).powi(2);
        (lo.max(0.0).sqrt(), hi.max(0.0).sqrt())
    }
}

/// Fast evaluator for the homogeneity curve of one volume.
pub struct HomogeneityCurve {
    profiles: Vec<SliceProfile>,
    n_pixels: f64,
    t_max: f64,
}

impl HomogeneityCurve {
    pub fn new(volume: &Volume) -> Self {
        let profiles = volume
            .slices()
            .par_iter()
            .map(|s| SliceProfile::new(s.pixels()))
            .collect();
        HomogeneityCurve {
            profiles,
            n_pixels: (volume.width() * volume.height()) as f64,
            t_max: volume.intensity_max(),
        }
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    /// Per-slice population std of the thresholded slices, zeros included.
    pub fn slice_stds(&self, t: f64) -> Vec<f64> {
        self.profiles
            .iter()
            .map(|p| p.std_at(t, self.n_pixels))
            .collect()
    }

    pub fn eval(&self, t: f64) -> CurveSample {
        let (variance, mean_sigma) = population_moments(&self.slice_stds(t));
        CurveSample {
            t,
            variance,
            mean_sigma,
        }
    }

    /// A value no larger than the curve variance at any `t` in `[a, b]`.
    fn variance_lower_bound(&self, a: f64, b: f64) -> f64 {
        let boxes: Vec<(f64, f64)> = self
            .profiles
            .iter()
            .map(|p| p.std_range(a, b, self.n_pixels))
            .collect();
        min_variance_in_boxes(&boxes)
    }

    fn grid(&self, t_lower: f64, cfg: &SearchConfig) -> Vec<f64> {
        let mut grid = vec![t_lower];
        match cfg.grid {
            GridKind::Uniform => {
                let mut i = 1u64;
                loop {
                    let t = t_lower + i as f64 * cfg.grid_step;
                    if t >= self.t_max {
                        break;
                    }
                    grid.push(t);
                    i += 1;
                }
            }
            GridKind::DistinctValues => {
                let mut values: Vec<f64> = self
                    .profiles
                    .iter()
                    .flat_map(|p| {
                        let start = p.retained(t_lower);
                        p.sorted[start..].iter().copied()
                    })
                    .collect();
                values.sort_by(f64::total_cmp);
                values.dedup();
                grid.extend(values.into_iter().filter(|&v| v < self.t_max));
            }
        }
        if *grid.last().unwrap() < self.t_max {
            grid.push(self.t_max);
        }
        grid
    }
}

/// 1/n variance and mean, accumulated in index order.
fn population_moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (var, mean)
}

/// Smallest 1/n variance attainable by choosing one point from each interval.
///
/// The optimum clamps a common centre `c` into every interval; the objective
/// in `c` is a convex piecewise quadratic, minimised segment by segment.
fn min_variance_in_boxes(boxes: &[(f64, f64)]) -> f64 {
    let max_lo = boxes.iter().map(|b| b.0).fold(f64::NEG_INFINITY, f64::max);
    let min_hi = boxes.iter().map(|b| b.1).fold(f64::INFINITY, f64::min);
    if max_lo <= min_hi {
        return 0.0;
    }
    let cost = |c: f64| -> f64 {
        boxes
            .iter()
            .map(|&(lo, hi)| {
                let d = if c < lo {
                    lo - c
                } else if c > hi {
                    c - hi
                } else {
                    0.0
                };
                d * d
            })
            .sum()
    };
    let mut knots: Vec<f64> = boxes.iter().flat_map(|&(lo, hi)| [lo, hi]).collect();
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let mut best = f64::INFINITY;
    for w in knots.windows(2) {
        let (left, right) = (w[0], w[1]);
        let mid = 0.5 * (left + right);
        let (mut acc, mut cnt) = (0.0, 0usize);
        for &(lo, hi) in boxes {
            if lo > mid {
                acc += lo;
                cnt += 1;
            } else if hi < mid {
                acc += hi;
                cnt += 1;
            }
        }
        let c = if cnt == 0 {
            mid
        } else {
            (acc / cnt as f64).clamp(left, right)
        };
        best = best.min(cost(c));
    }
    best / boxes.len() as f64
}

fn is_tie(value: f64, best: f64) -> bool {
    value <= best + TIE_TOLERANCE * best.abs()
}

/// Smallest index whose value ties the minimum.
fn pick_min(evaluated: impl Iterator<Item = (usize, f64)> + Clone) -> usize {
    let best = evaluated
        .clone()
        .map(|(_, v)| v)
        .fold(f64::INFINITY, f64::min);
    evaluated
        .filter(|&(_, v)| is_tie(v, best))
        .map(|(i, _)| i)
        .min()
        .expect("at least one evaluated grid point")
}

/// Smallest probe `t = t_start + k * epsilon` whose curve variance exceeds
/// the variance one step later; `t_max` when no such probe lies below `t_max`.
pub fn find_t_lower(volume: &Volume, cfg: &SearchConfig) -> Result<f64> {
    cfg.validate()?;
    let curve = HomogeneityCurve::new(volume);
    let (t_start, eps) = cfg.effective_probe(volume.intensity_max());
    Ok(t_lower_on(&curve, t_start, eps))
}

fn t_lower_on(curve: &HomogeneityCurve, t_start: f64, eps: f64) -> f64 {
    let t_max = curve.t_max();
    let mut k = 0u64;
    loop {
        let t = t_start + k as f64 * eps;
        if t >= t_max {
            return t_max;
        }
        if curve.eval(t).variance - curve.eval(t + eps).variance > 0.0 {
            return t;
        }
        k += 1;
    }
}

/// Selects `t_opt` for `volume`.
pub fn find_t_opt(volume: &Volume, cfg: &SearchConfig) -> Result<ThresholdResult> {
    cfg.validate()?;
    let curve = HomogeneityCurve::new(volume);
    Ok(find_t_opt_on(&curve, cfg))
}

pub(crate) fn find_t_opt_on(curve: &HomogeneityCurve, cfg: &SearchConfig) -> ThresholdResult {
    let t_max = curve.t_max();
    let (t_start, eps) = cfg.effective_probe(t_max);
    let t_lower = t_lower_on(curve, t_start, eps);
    let grid = curve.grid(t_lower, cfg);

    let (samples, mode_used) = match cfg.search_mode {
        SearchMode::Exhaustive => (exhaustive(curve, &grid), SearchModeUsed::Exhaustive),
        SearchMode::BracketedMinimum => bracketed(curve, &grid),
    };

    let evaluations = samples.len();
    let argmin_idx = pick_min(samples.iter().map(|(i, s)| (*i, s.variance)));
    let argmin = samples
        .iter()
        .find(|(i, _)| *i == argmin_idx)
        .map(|(_, s)| *s)
        .unwrap();
    let at_max = samples
        .iter()
        .find(|(i, _)| *i == grid.len() - 1)
        .map(|(_, s)| *s)
        .unwrap_or_else(|| curve.eval(t_max));

    let reason = if t_max == 0.0 {
        Some(NoObjectReason::EmptyVolume)
    } else if argmin.mean_sigma > at_max.mean_sigma {
        Some(NoObjectReason::GuardRejected)
    } else if t_lower >= t_max {
        Some(NoObjectReason::NoDescent)
    } else if argmin.t >= t_max {
        Some(NoObjectReason::MinimumAtTmax)
    } else {
        None
    };
    let t_opt = if reason.is_some() { t_max } else { argmin.t };

    let mut curve_samples: Vec<CurveSample> = samples.into_iter().map(|(_, s)| s).collect();
    if !curve_samples.iter().any(|s| s.t == t_max) {
        curve_samples.push(at_max);
    }
    curve_samples.sort_by(|a, b| a.t.total_cmp(&b.t));

    ThresholdResult {
        t_opt,
        t_argmin: argmin.t,
        t_lower,
        t_max,
        curve: curve_samples,
        no_object: reason.is_some(),
        no_object_reason: reason,
        mode_used,
        evaluations,
        grid_len: grid.len(),
        t_start_effective: t_start,
        epsilon_effective: eps,
    }
}

fn exhaustive(curve: &HomogeneityCurve, grid: &[f64]) -> Vec<(usize, CurveSample)> {
    grid.par_iter()
        .enumerate()
        .map(|(i, &t)| (i, curve.eval(t)))
        .collect()
}

/// Memoised grid evaluations for the bracketed search.
struct Probe<'a> {
    curve: &'a HomogeneityCurve,
    grid: &'a [f64],
    values: Vec<Option<CurveSample>>,
    count: usize,
}

impl<'a> Probe<'a> {
    fn new(curve: &'a HomogeneityCurve, grid: &'a [f64]) -> Self {
        Probe {
            curve,
            grid,
            values: vec![None; grid.len()],
            count: 0,
        }
    }

    fn at(&mut self, i: usize) -> f64 {
        if let Some(s) = self.values[i] {
            return s.variance;
        }
        let s = self.curve.eval(self.grid[i]);
        self.values[i] = Some(s);
        self.count += 1;
        s.variance
    }

    fn best(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .map(|s| s.variance)
            .fold(f64::INFINITY, f64::min)
    }

    fn into_samples(self) -> Vec<(usize, CurveSample)> {
        self.values
            .into_iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|s| (i, s)))
            .collect()
    }
}

/// Interval halving on the sign of the discrete derivative, followed by a
/// branch-and-bound certificate that no unevaluated grid point can beat or
/// tie the best value found. Returns the same argmin as [`exhaustive`].
fn bracketed(
    curve: &HomogeneityCurve,
    grid: &[f64],
) -> (Vec<(usize, CurveSample)>, SearchModeUsed) {
    let mut probe = Probe::new(curve, grid);
    let (mut lo, mut hi) = (0, grid.len() - 1);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if probe.at(mid) > probe.at(mid + 1) {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    probe.at(lo);
    probe.at(grid.len() - 1);

    let budget = (grid.len() / 2).max(4 * LEAF_LEN);
    let mut stack = vec![(0usize, grid.len() - 1)];
    while let Some((i, j)) = stack.pop() {
        if probe.count > budget {
            return (exhaustive(curve, grid), SearchModeUsed::ExhaustiveFallback);
        }
        if (i..=j).all(|k| probe.values[k].is_some()) {
            continue;
        }
        let best = probe.best();
        let bound = curve.variance_lower_bound(grid[i], grid[j]) * (1.0 - BOUND_SAFETY);
        if bound > best + TIE_TOLERANCE * best.abs() {
            continue;
        }
        if j - i < LEAF_LEN {
            for k in i..=j {
                probe.at(k);
            }
            continue;
        }
        let mid = i + (j - i) / 2;
        probe.at(mid);
        stack.push((mid + 1, j));
        stack.push((i, mid - 1));
    }
    (probe.into_samples(), SearchModeUsed::BracketedMinimum)
}
