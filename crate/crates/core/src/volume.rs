//! Volumetric data model and pixel statistics.
//!
//! A [`Volume`] is an immutable stack of equally sized magnitude [`Slice`]s.
//! All statistics use the population (1/count) divisor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One 2-D magnitude image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Slice {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidSlice(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::InvalidSlice(format!(
                "{} pixels for a {width}x{height} slice",
                pixels.len()
            )));
        }
        if let Some((index, &value)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidPixel { index, value });
        }
        Ok(Slice {
            width,
            height,
            pixels,
        })
    }

    /// Builds a slice without validation. Callers guarantee the invariants.
    pub(crate) fn from_parts_unchecked(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        debug_assert_eq!(pixels.len(), width * height);
        Slice {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(0.0, f64::max)
    }
}

/// Voxel edge lengths in millimetres along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelSize(pub [f64; 3]);

impl VoxelSize {
    pub const ISOTROPIC_1MM: VoxelSize = VoxelSize([1.0, 1.0, 1.0]);

    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let v = VoxelSize([x, y, z]);
        v.validate()?;
        Ok(v)
    }

    fn validate(&self) -> Result<()> {
        if self.0.iter().all(|c| c.is_finite() && *c > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidVolume(format!(
                "voxel size components must be positive, got {:?}",
                self.0
            )))
        }
    }

    /// Effective isotropic edge length, the cube root of the voxel volume.
    pub fn effective_resolution(&self) -> f64 {
        (self.0[0] * self.0[1] * self.0[2]).cbrt()
    }

    pub fn scaled(&self, factor: f64) -> VoxelSize {
        VoxelSize([self.0[0] * factor, self.0[1] * factor, self.0[2] * factor])
    }
}

/// An ordered stack of `n >= 1` slices sharing one width and height.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    slices: Vec<Slice>,
    voxel_size: VoxelSize,
    intensity_max: f64,
}

impl Volume {
    pub fn new(slices: Vec<Slice>, voxel_size: VoxelSize) -> Result<Self> {
        voxel_size.validate()?;
        let first = slices
            .first()
            .ok_or_else(|| Error::InvalidVolume("a volume needs at least one slice".into()))?;
        let (w, h) = (first.width, first.height);
        if let Some((j, s)) = slices
            .iter()
            .enumerate()
            .find(|(_, s)| s.width != w || s.height != h)
        {
            return Err(Error::InvalidVolume(format!(
                "slice {j} is {}x{}, expected {w}x{h}",
                s.width, s.height
            )));
        }
        let intensity_max = slices.iter().map(Slice::max).fold(0.0, f64::max);
        Ok(Volume {
            slices,
            voxel_size,
            intensity_max,
        })
    }

    /// Builds a volume from a flat slice-major, row-major buffer.
    pub fn from_raw(
        width: usize,
        height: usize,
        n: usize,
        data: Vec<f64>,
        voxel_size: VoxelSize,
    ) -> Result<Self> {
        if width == 0 || height == 0 || n == 0 {
            return Err(Error::InvalidVolume(format!(
                "dimensions must be positive, got {width}x{height}x{n}"
            )));
        }
        if data.len() != width * height * n {
            return Err(Error::InvalidVolume(format!(
                "{} values for a {width}x{height}x{n} volume",
                data.len()
            )));
        }
        let slices = data
            .chunks_exact(width * height)
            .map(|c| Slice::new(width, height, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Volume::new(slices, voxel_size)
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn width(&self) -> usize {
        self.slices[0].width
    }

    pub fn height(&self) -> usize {
        self.slices[0].height
    }

    /// `(width, height, n_slices)`
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.width(), self.height(), self.n_slices())
    }

    pub fn voxel_size(&self) -> VoxelSize {
        self.voxel_size
    }

    /// Largest pixel value across all slices (`t_max`).
    pub fn intensity_max(&self) -> f64 {
        self.intensity_max
    }

    pub fn iter_pixels(&self) -> impl Iterator<Item = f64> + '_ {
        self.slices.iter().flat_map(|s| s.pixels.iter().copied())
    }

    /// Slice-major, row-major copy of all pixels.
    pub fn to_flat(&self) -> Vec<f64> {
        self.iter_pixels().collect()
    }

    /// Fraction of pixels that are exactly zero.
    pub fn zero_fraction(&self) -> f64 {
        let total = self.width() * self.height() * self.n_slices();
        let zeros = self.iter_pixels().filter(|v| *v == 0.0).count();
        zeros as f64 / total as f64
    }

    /// Applies `f` to every pixel. `f` must map non-negative finite values to
    /// non-negative finite values.
    pub fn map_pixels(&self, f: impl Fn(f64) -> f64) -> Result<Volume> {
        let slices = self
            .slices
            .iter()
            .map(|s| Slice::new(s.width, s.height, s.pixels.iter().map(|&v| f(v)).collect()))
            .collect::<Result<Vec<_>>>()?;
        Volume::new(slices, self.voxel_size)
    }
}

/// Count, mean and population standard deviation of a pixel population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PixelStats {
    /// No pixel was selected; mean and std are undefined.
    Empty,
    Populated {
        count: usize,
        mean: f64,
        std: f64,
    },
}

impl PixelStats {
    pub fn from_values(values: impl Iterator<Item = f64> + Clone) -> PixelStats {
        let (count, sum) = values
            .clone()
            .fold((0usize, 0.0f64), |(c, s), v| (c + 1, s + v));
        if count == 0 {
            return PixelStats::Empty;
        }
        let mean = sum / count as f64;
        let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
        PixelStats::Populated {
            count,
            mean,
            std: (ss / count as f64).sqrt(),
        }
    }

    pub fn count(&self) -> usize {
        match *self {
            PixelStats::Empty => 0,
            PixelStats::Populated { count, .. } => count,
        }
    }

    pub fn mean(&self) -> Option<f64> {
        match *self {
            PixelStats::Empty => None,
            PixelStats::Populated { mean, .. } => Some(mean),
        }
    }

    pub fn std(&self) -> Option<f64> {
        match *self {
            PixelStats::Empty => None,
            PixelStats::Populated { std, .. } => Some(std),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, PixelStats::Empty)
    }
}

/// Mean and population std over every pixel, zeros included.
pub fn stats_all(slice: &Slice) -> PixelStats {
    PixelStats::from_values(slice.pixels.iter().copied())
}

/// Mean and population std over pixels strictly greater than zero.
pub fn stats_positive(slice: &Slice) -> PixelStats {
    PixelStats::from_values(slice.pixels.iter().copied().filter(|v| *v > 0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slice(w: usize, h: usize, px: &[f64]) -> Slice {
        Slice::new(w, h, px.to_vec()).unwrap()
    }

    #[test]
    fn stats_all_examples() {
        assert_eq!(
            stats_all(&slice(2, 2, &[0.0; 4])),
            PixelStats::Populated {
                count: 4,
                mean: 0.0,
                std: 0.0
            }
        );
        assert_eq!(
            stats_all(&slice(2, 2, &[0.0, 0.0, 4.0, 4.0])),
            PixelStats::Populated {
                count: 4,
                mean: 2.0,
                std: 2.0
            }
        );
        for c in [0.5, 7.0, 4095.0, 123456.789] {
            assert_eq!(stats_all(&slice(3, 1, &[c; 3])).std(), Some(0.0));
        }
    }

    #[test]
    fn stats_positive_examples() {
        assert_eq!(
            stats_positive(&slice(2, 2, &[0.0, 0.0, 4.0, 4.0])),
            PixelStats::Populated {
                count: 2,
                mean: 4.0,
                std: 0.0
            }
        );
        assert_eq!(
            stats_positive(&slice(3, 1, &[0.0, 1.0, 3.0])),
            PixelStats::Populated {
                count: 2,
                mean: 2.0,
                std: 1.0
            }
        );
        let empty = stats_positive(&slice(2, 1, &[0.0, 0.0]));
        assert_eq!(empty, PixelStats::Empty);
        assert_eq!(empty.mean(), None);
        assert_eq!(empty.count(), 0);
    }

    #[test]
    fn slice_rejects_bad_input() {
        assert!(Slice::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Slice::new(0, 2, vec![]).is_err());
        assert!(matches!(
            Slice::new(2, 1, vec![1.0, -1.0]),
            Err(Error::InvalidPixel { index: 1, .. })
        ));
        assert!(Slice::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn volume_invariants() {
        let a = slice(2, 1, &[1.0, 9.0]);
        let b = slice(2, 1, &[3.0, 2.0]);
        let v = Volume::new(vec![a.clone(), b], VoxelSize::ISOTROPIC_1MM).unwrap();
        assert_eq!(v.intensity_max(), 9.0);
        assert_eq!(v.dims(), (2, 1, 2));

        assert!(Volume::new(vec![], VoxelSize::ISOTROPIC_1MM).is_err());
        assert!(Volume::new(
            vec![a.clone(), slice(1, 2, &[0.0, 0.0])],
            VoxelSize::ISOTROPIC_1MM
        )
        .is_err());
        assert!(Volume::new(vec![a], VoxelSize([1.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn effective_resolution_is_geometric_mean() {
        let v = VoxelSize::new(1.0, 2.0, 4.0).unwrap();
        assert!((v.effective_resolution() - 2.0).abs() < 1e-15);
    }
}
