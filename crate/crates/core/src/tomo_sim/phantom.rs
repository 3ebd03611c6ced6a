//! Random ellipsoid phantoms.
//!
//! A phantom is a superposition of ellipsoids; a slice at depth `z` is the set
//! of elliptical cross-sections at that depth. Index 0 is always the dense
//! "bone-like" ellipsoid, which spans every slice and provides the default
//! region of interest. Index 1, when present, is a large low-intensity body.

use crate::error::{config_err, Result};
use crate::image::{Image, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Sub-pixel samples per axis used to rasterize partial-volume edges.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub num_ellipses: usize,
    pub intensity_range: [f64; 2],
    pub size: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            num_ellipses: 8,
            intensity_range: [0.1, 0.9],
            size: 128,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.intensity_range;
        if self.size == 0 {
            return Err(config_err!("phantom size must be positive"));
        }
        if !(lo.is_finite() && hi.is_finite()) || lo > hi || lo < 0.0 || hi > 1.0 {
            return Err(config_err!(
                "intensity range [{lo}, {hi}] must satisfy 0 <= lo <= hi <= 1"
            ));
        }
        Ok(())
    }
}

/// Ellipsoid in normalized coordinates: the image spans `[-1, 1]` on both axes.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Ellipsoid {
    cx: f64,
    cy: f64,
    semi_x: f64,
    semi_y: f64,
    angle: f64,
    depth_center: f64,
    depth_semi: f64,
    intensity: f64,
}

impl Ellipsoid {
    /// Cross-section scale at depth `z`, or `None` when the slice misses it.
    fn section_scale(&self, z: f64) -> Option<f64> {
        let t = (z - self.depth_center) / self.depth_semi;
        (t.abs() < 1.0).then(|| (1.0 - t * t).sqrt())
    }
}

/// A sampled phantom volume, sliceable at arbitrary depth.
#[derive(Clone, Debug)]
pub struct Phantom {
    spec: PhantomSpec,
    ellipsoids: Vec<Ellipsoid>,
}

impl Phantom {
    pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
        spec.validate()?;
        let [lo, hi] = spec.intensity_range;
        let span = hi - lo;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut ellipsoids = Vec::with_capacity(spec.num_ellipses);
        for k in 0..spec.num_ellipses {
            let e = match k {
                0 => {
                    let r = rng.random_range(0.0..0.3);
                    let phi = rng.random_range(0.0..std::f64::consts::TAU);
                    Ellipsoid {
                        cx: r * phi.cos(),
                        cy: r * phi.sin(),
                        semi_x: rng.random_range(0.12..0.25),
                        semi_y: rng.random_range(0.12..0.25),
                        angle: rng.random_range(0.0..std::f64::consts::PI),
                        depth_center: 0.0,
                        depth_semi: 2.0,
                        intensity: lo + span * rng.random_range(0.6..0.75),
                    }
                }
                1 => Ellipsoid {
                    cx: rng.random_range(-0.05..0.05),
                    cy: rng.random_range(-0.05..0.05),
                    semi_x: rng.random_range(0.6..0.8),
                    semi_y: rng.random_range(0.6..0.8),
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                    depth_center: 0.0,
                    depth_semi: 2.0,
                    intensity: lo + span * rng.random_range(0.0..0.3),
                },
                _ => {
                    let r = rng.random_range(0.0..0.6);
                    let phi = rng.random_range(0.0..std::f64::consts::TAU);
                    Ellipsoid {
                        cx: r * phi.cos(),
                        cy: r * phi.sin(),
                        semi_x: rng.random_range(0.03..0.2),
                        semi_y: rng.random_range(0.03..0.2),
                        angle: rng.random_range(0.0..std::f64::consts::PI),
                        depth_center: rng.random_range(-0.3..0.3),
                        depth_semi: rng.random_range(0.4..1.0),
                        intensity: lo + span * rng.random_range(0.0..0.4),
                    }
                }
            };
            ellipsoids.push(e);
        }
        Ok(Phantom {
            spec: spec.clone(),
            ellipsoids,
        })
    }

    pub fn spec(&self) -> &PhantomSpec {
        &self.spec
    }

    /// Rasterizes the cross-section at depth `z ∈ [-1, 1]`, clipped to `[0, 1]`.
    pub fn slice(&self, z: f64) -> Image {
        let n = self.spec.size;
        let sections: Vec<(Ellipsoid, f64)> = self
            .ellipsoids
            .iter()
            .filter_map(|e| e.section_scale(z).map(|s| (*e, s)))
            .collect();
        let half = n as f64 / 2.0;
        let sub = 1.0 / SUPERSAMPLE as f64;
        let weight = sub * sub;
        Image::from_fn(n, n, |px, py| {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f64 + (sx as f64 + 0.5) * sub - half) / half;
                    let y = (py as f64 + (sy as f64 + 0.5) * sub - half) / half;
                    let mut v = 0.0;
                    for (e, scale) in &sections {
                        let (s, c) = e.angle.sin_cos();
                        let dx = x - e.cx;
                        let dy = y - e.cy;
                        let u = (dx * c + dy * s) / (e.semi_x * scale);
                        let w = (-dx * s + dy * c) / (e.semi_y * scale);
                        if u * u + w * w <= 1.0 {
                            v += e.intensity;
                        }
                    }
                    acc += v.clamp(0.0, 1.0) * weight;
                }
            }
            acc as f32
        })
    }

    /// Pixel bounding box of the bone-like ellipse's central cross-section.
    pub fn bone_window(&self) -> Option<Window> {
        let e = self.ellipsoids.first()?;
        let n = self.spec.size as f64;
        let half = n / 2.0;
        let (s, c) = e.angle.sin_cos();
        let ext_x = ((e.semi_x * c).powi(2) + (e.semi_y * s).powi(2)).sqrt();
        let ext_y = ((e.semi_x * s).powi(2) + (e.semi_y * c).powi(2)).sqrt();
        let to_px = |v: f64| (v * half + half).clamp(0.0, n);
        let x0 = to_px(e.cx - ext_x).floor() as usize;
        let x1 = to_px(e.cx + ext_x).ceil() as usize;
        let y0 = to_px(e.cy - ext_y).floor() as usize;
        let y1 = to_px(e.cy + ext_y).ceil() as usize;
        (x1 > x0 && y1 > y0).then(|| Window::new(x0, y0, x1 - x0, y1 - y0))
    }
}

/// Central (z = 0) slice of the phantom described by `spec`.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Image> {
    Ok(Phantom::generate(spec)?.slice(0.0))
}

/// Evenly spaced slice depths in `[-0.3, 0.3]`; a single slice sits at 0.
pub fn slice_depths(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..count)
            .map(|k| -0.3 + 0.6 * k as f64 / (count - 1) as f64)
            .collect(),
    }
}
