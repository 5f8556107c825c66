//! Synthetic magnitude phantoms with complex Gaussian noise.
//!
//! The noiseless template is taken as the real channel. Each output pixel is
//! `sqrt((A + g_r)^2 + g_i^2)` with `g_r`, `g_i` independent `N(0, sigma^2)`.
//!
//! The noise stream is pinned so other implementations can reproduce volumes
//! bit for bit:
//!
//! * generator: PCG64 (XSL-RR 128/64, `rand_pcg::Pcg64`), initialised with
//!   `SeedableRng::seed_from_u64(seed)` from `rand_core`;
//! * uniform: `(next_u64() >> 11) * 2^-53`, in `[0, 1)`;
//! * normal pair: Marsaglia polar method. Draw `u = 2U - 1`, `v = 2U - 1`
//!   until `0 < s = u^2 + v^2 < 1`, then return `(u f, v f)` with
//!   `f = sqrt(-2 ln s / s)`;
//! * each pixel consumes exactly one normal pair, first value to the real
//!   channel, second to the imaginary channel, in slice order then row-major.

use std::path::Path;

use rand_core::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::Mask;
use crate::volume::{Slice, Volume, VoxelSize};

/// Seeded standard-normal pair generator. See the module docs for the exact
/// algorithm.
pub struct NormalPairs {
    rng: Pcg64,
}

impl NormalPairs {
    pub fn new(seed: u64) -> Self {
        NormalPairs {
            rng: Pcg64::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_pair(&mut self) -> (f64, f64) {
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                return (u * f, v * f);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    /// Ellipse inscribed in the `size` box.
    Disk,
    Rect,
}

/// A uniform-valued object painted onto every slice.
///
/// Coordinates are in pixel units: pixel `(x, y)` has its centre at `(x, y)`
/// and covers `[x - 0.5, x + 0.5]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomObject {
    pub shape: Shape,
    pub center: [f64; 2],
    /// Full extent along x and y.
    pub size: [f64; 2],
    pub value: f64,
}

impl PhantomObject {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 - self.center[0];
        let dy = y as f64 - self.center[1];
        let (rx, ry) = (0.5 * self.size[0], 0.5 * self.size[1]);
        match self.shape {
            Shape::Disk => (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0,
            Shape::Rect => dx.abs() <= rx && dy.abs() <= ry,
        }
    }
}

fn default_voxel() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub n_slices: usize,
    #[serde(default = "default_voxel")]
    pub voxel_size_mm: [f64; 3],
    #[serde(default)]
    pub background_value: f64,
    #[serde(default)]
    pub objects: Vec<PhantomObject>,
    /// Per-channel noise std.
    pub sigma: f64,
    pub seed: u64,
    /// Round magnitudes to the nearest integer, as scanner output would be.
    #[serde(default)]
    pub quantize: bool,
}

impl PhantomSpec {
    /// An object-free spec of the given size.
    pub fn blank(width: usize, height: usize, n_slices: usize, sigma: f64, seed: u64) -> Self {
        PhantomSpec {
            width,
            height,
            n_slices,
            voxel_size_mm: default_voxel(),
            background_value: 0.0,
            objects: Vec::new(),
            sigma,
            seed,
            quantize: false,
        }
    }

    /// Reads a spec from a `.toml` file, or JSON for any other extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_toml = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let spec: PhantomSpec = if is_toml {
            toml::from_str(&text).map_err(|e| Error::SpecParse(e.to_string()))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::SpecParse(e.to_string()))?
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPhantom(m));
        if self.width == 0 || self.height == 0 || self.n_slices == 0 {
            return bad(format!(
                "dimensions must be positive, got {}x{}x{}",
                self.width, self.height, self.n_slices
            ));
        }
        VoxelSize::new(
            self.voxel_size_mm[0],
            self.voxel_size_mm[1],
            self.voxel_size_mm[2],
        )
        .map_err(|e| Error::InvalidPhantom(e.to_string()))?;
        if !(self.background_value.is_finite() && self.background_value >= 0.0) {
            return bad(format!(
                "background_value must be >= 0, got {}",
                self.background_value
            ));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return bad(format!("sigma must be >= 0, got {}", self.sigma));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for (i, o) in self.objects.iter().enumerate() {
            if !(o.value.is_finite() && o.value >= 0.0) {
                return bad(format!("object {i}: value must be >= 0, got {}", o.value));
            }
            if !(o.size.iter().all(|s| s.is_finite() && *s > 0.0)) {
                return bad(format!(
                    "object {i}: size must be positive, got {:?}",
                    o.size
                ));
            }
            let (x0, x1) = (o.center[0] - 0.5 * o.size[0], o.center[0] + 0.5 * o.size[0]);
            let (y0, y1) = (o.center[1] - 0.5 * o.size[1], o.center[1] + 0.5 * o.size[1]);
            if x0 < -0.5 || y0 < -0.5 || x1 > w - 0.5 || y1 > h - 0.5 {
                return bad(format!(
                    "object {i} spans [{x0}, {x1}] x [{y0}, {y1}], outside the {}x{} image",
                    self.width, self.height
                ));
            }
        }
        Ok(())
    }

    fn template_slice(&self) -> Vec<f64> {
        let mut px = vec![self.background_value; self.width * self.height];
        for o in &self.objects {
            for y in 0..self.height {
                for x in 0..self.width {
                    if o.covers(x, y) {
                        px[y * self.width + x] = o.value;
                    }
                }
            }
        }
        px
    }

    /// Pixels covered by no object, on every slice.
    pub fn background_mask(&self) -> Mask {
        let bits: Vec<bool> = (0..self.width * self.height)
            .map(|i| {
                let (x, y) = (i % self.width, i / self.width);
                !self.objects.iter().any(|o| o.covers(x, y))
            })
            .collect();
        Mask::from_slice_mask(self.width, self.height, self.n_slices, &bits)
            .expect("mask built from spec dimensions")
    }
}

/// The noiseless volume: background everywhere, objects painted in order,
/// identical on every slice.
pub fn render_template(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let px = spec.template_slice();
    let slices = (0..spec.n_slices)
        .map(|_| Slice::from_parts_unchecked(spec.width, spec.height, px.clone()))
        .collect();
    Volume::new(slices, VoxelSize(spec.voxel_size_mm))
}

/// Replaces every pixel `A` by `|A + g_r + i g_i|`.
pub fn add_complex_gaussian(volume: &Volume, sigma: f64, seed: u64) -> Result<Volume> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidPhantom(format!(
            "sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(volume.clone());
    }
    let mut pairs = NormalPairs::new(seed);
    let slices = volume
        .slices()
        .iter()
        .map(|s| {
            let px = s
                .pixels()
                .iter()
                .map(|&a| {
                    let (gr, gi) = pairs.next_pair();
                    let re = a + sigma * gr;
                    let im = sigma * gi;
                    (re * re + im * im).sqrt()
                })
                .collect();
            Slice::from_parts_unchecked(s.width(), s.height(), px)
        })
        .collect();
    Volume::new(slices, volume.voxel_size())
}

/// Template, noise, and optional rounding, as described by `spec`.
pub fn generate(spec: &PhantomSpec) -> Result<Volume> {
    let noisy = add_complex_gaussian(&render_template(spec)?, spec.sigma, spec.seed)?;
    if spec.quantize {
        noisy.map_pixels(f64::round)
    } else {
        Ok(noisy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_spec() -> PhantomSpec {
        PhantomSpec {
            objects: vec![PhantomObject {
                shape: Shape::Disk,
                center: [16.0, 16.0],
                size: [20.0, 20.0],
                value: 1000.0,
            }],
            ..PhantomSpec::blank(32, 32, 3, 0.0, 1)
        }
    }

    #[test]
    fn template_examples() {
        let mut spec = PhantomSpec::blank(8, 6, 2, 0.0, 0);
        spec.background_value = 400.0;
        let v = render_template(&spec).unwrap();
        assert!(v.iter_pixels().all(|p| p == 400.0));

        spec.objects.push(PhantomObject {
            shape: Shape::Rect,
            center: [3.5, 2.5],
            size: [8.0, 6.0],
            value: 7.0,
        });
        let v = render_template(&spec).unwrap();
        assert!(v.iter_pixels().all(|p| p == 7.0));

        let v = render_template(&disk_spec()).unwrap();
        assert_eq!(v.slices()[0].get(16, 16), 1000.0);
        assert_eq!(v.slices()[2].get(0, 0), 0.0);
        assert_eq!(v.slices()[1].get(31, 31), 0.0);
    }

    #[test]
    fn rejects_out_of_bounds_objects() {
        let mut spec = disk_spec();
        spec.objects[0].center = [30.0, 16.0];
        assert!(matches!(
            render_template(&spec),
            Err(Error::InvalidPhantom(_))
        ));
    }

    #[test]
    fn zero_sigma_is_exact_template() {
        let t = render_template(&disk_spec()).unwrap();
        assert_eq!(add_complex_gaussian(&t, 0.0, 99).unwrap(), t);
        assert_eq!(generate(&disk_spec()).unwrap(), t);
    }

    #[test]
    fn deterministic_per_seed() {
        let mut spec = disk_spec();
        spec.sigma = 50.0;
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        spec.seed = 2;
        assert_ne!(a, generate(&spec).unwrap());
    }

    #[test]
    fn uniform_range_and_polar_pairs() {
        let mut p = NormalPairs::new(5);
        for _ in 0..10_000 {
            let u = p.uniform();
            assert!((0.0..1.0).contains(&u));
        }
        let n = 200_000;
        let (mut s, mut q) = (0.0, 0.0);
        for _ in 0..n {
            let (a, b) = p.next_pair();
            s += a + b;
            q += a * a + b * b;
        }
        let m = s / (2 * n) as f64;
        let var = q / (2 * n) as f64 - m * m;
        assert!(m.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn background_mask_excludes_objects() {
        let spec = disk_spec();
        let m = spec.background_mask();
        assert_eq!(m.dims(), (32, 32, 3));
        assert!(!m.bits()[16 * 32 + 16]);
        assert!(m.bits()[0]);
    }

    #[test]
    fn quantize_rounds() {
        let mut spec = disk_spec();
        spec.sigma = 10.0;
        spec.quantize = true;
        assert!(generate(&spec)
            .unwrap()
            .iter_pixels()
            .all(|p| p == p.round()));
    }

    #[test]
    fn spec_from_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let toml_path = dir.path().join("p.toml");
        std::fs::write(
            &toml_path,
            "width = 8\nheight = 8\nn_slices = 2\nsigma = 100.0\nseed = 3\nbackground_value = 400.0\n",
        )
        .unwrap();
        let spec = PhantomSpec::from_path(&toml_path).unwrap();
        assert_eq!(spec.background_value, 400.0);
        assert_eq!(spec.voxel_size_mm, [1.0; 3]);

        let json_path = dir.path().join("p.json");
        std::fs::write(&json_path, serde_json::to_string(&disk_spec()).unwrap()).unwrap();
        assert_eq!(PhantomSpec::from_path(&json_path).unwrap(), disk_spec());

        std::fs::write(&json_path, "{\"width\": 8}").unwrap();
        assert!(matches!(
            PhantomSpec::from_path(&json_path),
            Err(Error::SpecParse(_))
        ));
    }
}
