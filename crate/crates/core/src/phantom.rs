//! Analytic specimens: an attenuating box centred at the origin with
//! spherical inclusions.
//!
//! Line integrals are exact (slab clipping for the box, quadratic roots for
//! the spheres). Attenuation is in 1/m, lengths in m, so projections are
//! dimensionless `∫μ dl` values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Pose, SystemGeometry, Vec3};

/// Effective attenuation of the aluminium-like material, 0.5 /cm.
pub const DEFAULT_ATTENUATION: f64 = 50.0;
/// Defect radius, 1 mm.
pub const DEFAULT_DEFECT_RADIUS: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Defect {
    pub centre: Vec3,
    pub radius: f64,
    /// Added to the box attenuation inside the sphere; negative for voids.
    pub attenuation_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Specimen {
    pub half_extents: Vec3,
    pub attenuation: f64,
    pub defects: Vec<Defect>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecimenPreset {
    /// 10 cm × 8 cm × 8 cm block with a single 1 mm void.
    #[default]
    AluminiumBox,
}

impl SpecimenPreset {
    pub fn half_extents(self) -> Vec3 {
        match self {
            SpecimenPreset::AluminiumBox => Vec3::new(0.05, 0.04, 0.04),
        }
    }
}

pub fn make_specimen(preset: SpecimenPreset, defect_centre: Vec3) -> Result<Specimen> {
    make_specimen_with(preset, defect_centre, DEFAULT_ATTENUATION)
}

pub fn make_specimen_with(
    preset: SpecimenPreset,
    defect_centre: Vec3,
    attenuation: f64,
) -> Result<Specimen> {
    let s = Specimen {
        half_extents: preset.half_extents(),
        attenuation,
        defects: vec![Defect {
            centre: defect_centre,
            radius: DEFAULT_DEFECT_RADIUS,
            attenuation_delta: -attenuation,
        }],
    };
    s.validate()?;
    Ok(s)
}

impl Specimen {
    pub fn validate(&self) -> Result<()> {
        let h = self.half_extents;
        if !(h.x > 0.0 && h.y > 0.0 && h.z > 0.0) {
            return Err(Error::invalid("box half-extents must be positive"));
        }
        if !self.attenuation.is_finite() || self.attenuation < 0.0 {
            return Err(Error::invalid("box attenuation must be finite and non-negative"));
        }
        for (i, d) in self.defects.iter().enumerate() {
            if !(d.radius > 0.0) {
                return Err(Error::invalid(format!("defect {i} radius must be positive")));
            }
            let inside = (0..3).all(|a| d.centre.axis(a).abs() < h.axis(a) - d.radius);
            if !inside {
                return Err(Error::invalid(format!(
                    "defect {i} at {:?} (r = {}) is not strictly inside the box",
                    d.centre.to_array(),
                    d.radius
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("specimen serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Attenuation at a point.
    pub fn attenuation_at(&self, p: Vec3) -> f64 {
        let h = self.half_extents;
        if p.x.abs() > h.x || p.y.abs() > h.y || p.z.abs() > h.z {
            return 0.0;
        }
        let mut mu = self.attenuation;
        for d in &self.defects {
            let r = p - d.centre;
            if r.dot(r) <= d.radius * d.radius {
                mu += d.attenuation_delta;
            }
        }
        mu
    }

    /// `∫μ dl` over `t ∈ [t0, t1]` along the unit-direction ray `origin + t·dir`.
    fn integrate(&self, origin: Vec3, dir: Vec3, t0: f64, t1: f64) -> f64 {
        let box_len = box_chord(self.half_extents, origin, dir, t0, t1);
        if box_len == 0.0 {
            return 0.0;
        }
        let mut total = self.attenuation * box_len;
        for d in &self.defects {
            total += d.attenuation_delta * sphere_chord(d.centre, d.radius, origin, dir, t0, t1);
        }
        total
    }
}

/// Length of the part of `origin + t·dir`, `t ∈ [t0, t1]`, inside the
/// axis-aligned box `[-h, h]`. `dir` must be unit length.
pub(crate) fn box_chord(h: Vec3, origin: Vec3, dir: Vec3, t0: f64, t1: f64) -> f64 {
    let mut lo = t0;
    let mut hi = t1;
    for a in 0..3 {
        let o = origin.axis(a);
        let d = dir.axis(a);
        let ha = h.axis(a);
        if d == 0.0 {
            if o.abs() > ha {
                return 0.0;
            }
            continue;
        }
        let ta = (-ha - o) / d;
        let tb = (ha - o) / d;
        lo = lo.max(ta.min(tb));
        hi = hi.min(ta.max(tb));
    }
    (hi - lo).max(0.0)
}

fn sphere_chord(centre: Vec3, radius: f64, origin: Vec3, dir: Vec3, t0: f64, t1: f64) -> f64 {
    let oc = origin - centre;
    let b = oc.dot(dir);
    // squared distance of the closest approach, free of the b² - c cancellation
    let perp = oc - dir * b;
    let disc = radius * radius - perp.dot(perp);
    if disc <= 0.0 {
        return 0.0;
    }
    let sq = disc.sqrt();
    let lo = (-b - sq).max(t0);
    let hi = (-b + sq).min(t1);
    (hi - lo).max(0.0)
}

/// `∫μ dl` along the full line through `origin` with direction `direction`.
pub fn line_integral(s: &Specimen, origin: Vec3, direction: Vec3) -> Result<f64> {
    let n = direction.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::invalid("ray direction must be non-zero"));
    }
    Ok(s.integrate(origin, direction * (1.0 / n), f64::NEG_INFINITY, f64::INFINITY))
}

/// `∫μ dl` along the segment from `a` to `b`.
pub fn segment_integral(s: &Specimen, a: Vec3, b: Vec3) -> f64 {
    let d = b - a;
    let len = d.norm();
    if len == 0.0 {
        return 0.0;
    }
    s.integrate(a, d * (1.0 / len), 0.0, len)
}

/// Regular voxel grid. `origin` is the outer corner of voxel `(0, 0, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: Vec3,
}

impl GridSpec {
    /// Grid centred on `centre`.
    pub fn centred_at(dims: [usize; 3], voxel_size: f64, centre: Vec3) -> Self {
        let half = Vec3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64) * (voxel_size / 2.0);
        GridSpec {
            dims,
            voxel_size,
            origin: centre - half,
        }
    }

    pub fn centred(dims: [usize; 3], voxel_size: f64) -> Self {
        GridSpec::centred_at(dims, voxel_size, Vec3::ZERO)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) || !(self.voxel_size > 0.0) {
            return Err(Error::invalid("grid needs dims >= 1 and a positive voxel size"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn voxel_centre(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = self.voxel_size;
        self.origin + Vec3::new((i as f64 + 0.5) * s, (j as f64 + 0.5) * s, (k as f64 + 0.5) * s)
    }

    pub fn min_corner(&self) -> Vec3 {
        self.origin
    }

    pub fn max_corner(&self) -> Vec3 {
        let s = self.voxel_size;
        self.origin
            + Vec3::new(
                self.dims[0] as f64 * s,
                self.dims[1] as f64 * s,
                self.dims[2] as f64 * s,
            )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: GridSpec,
    /// x fastest, then y, then z.
    pub data: Vec<f64>,
}

impl Volume {
    pub fn zeros(grid: GridSpec) -> Self {
        Volume {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    pub fn from_data(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        crate::error::check_len(grid.len(), data.len())?;
        Ok(Volume { grid, data })
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn argmax(&self) -> [usize; 3] {
        let mut best = 0;
        for (idx, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = idx;
            }
        }
        self.grid.coords(best)
    }
}

/// Per-voxel attenuation sampled at voxel centres.
pub fn voxelize(s: &Specimen, grid: &GridSpec) -> Result<Volume> {
    grid.validate()?;
    let lo = grid.min_corner();
    let hi = grid.max_corner();
    let h = s.half_extents;
    let covers = (0..3).all(|a| lo.axis(a) <= -h.axis(a) && hi.axis(a) >= h.axis(a));
    if !covers {
        return Err(Error::invalid("voxel grid does not cover the specimen box"));
    }
    let data = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let [i, j, k] = grid.coords(idx);
            s.attenuation_at(grid.voxel_centre(i, j, k))
        })
        .collect();
    Ok(Volume { grid: *grid, data })
}

/// Detector image of line integrals, row-major (`row * cols + col`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub pose: Pose,
}

impl ProjectionImage {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

/// One exact line integral per detector pixel centre.
pub fn forward_project(s: &Specimen, pose: &Pose, g: &SystemGeometry) -> ProjectionImage {
    let (rows, cols) = g.detector_pixels;
    let src = pose.source_point;
    let data: Vec<f64> = (0..rows * cols)
        .into_par_iter()
        .map(|p| {
            let (r, c) = (p / cols, p % cols);
            let dir = (pose.pixel_centre(g, r, c) - src).normalized();
            s.integrate(src, dir, f64::NEG_INFINITY, f64::INFINITY)
        })
        .collect();
    ProjectionImage {
        rows,
        cols,
        data,
        pose: *pose,
    }
}

/// Replaces each integral `p` by `-ln(N/I₀)` with `N ~ Poisson(I₀·e^{-p})`.
/// Counts below 1 are clamped to 1.
pub fn apply_poisson_noise(image: &mut ProjectionImage, photons: f64, seed: u64) -> Result<()> {
    if !(photons > 0.0) || !photons.is_finite() {
        return Err(Error::invalid("photon count must be positive and finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in image.data.iter_mut() {
        let lambda = photons * (-*p).exp();
        let counts = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| Error::invalid(e.to_string()))?
                .sample(&mut rng)
        } else {
            0.0
        };
        *p = -(counts.max(1.0) / photons).ln();
    }
    Ok(())
}
