//! Spherical acquisition geometry.
//!
//! Scan positions live on a sphere around the isocentre. The source sits at
//! `R_s · d(φ, θ)` and the detector centre at `-R_d · d(φ, θ)`, with
//! `d = (cos θ cos φ, cos θ sin φ, sin θ)`. The detector `v` axis follows the
//! meridian towards the north pole and `u = v × ray`, so `(u, v, ray)` is
//! right-handed.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        self * (1.0 / self.norm())
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn axis(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl From<Vec3> for [f64; 3] {
    fn from(v: Vec3) -> Self {
        v.to_array()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Azimuth in `[0, 2π)` and elevation in `[-π/2, π/2]`, radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanPosition {
    pub azimuth: f64,
    pub elevation: f64,
}

impl ScanPosition {
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self> {
        if !(0.0..2.0 * PI).contains(&azimuth) || !(-PI / 2.0..=PI / 2.0).contains(&elevation) {
            return Err(Error::invalid(format!(
                "scan position ({azimuth}, {elevation}) out of range"
            )));
        }
        Ok(ScanPosition { azimuth, elevation })
    }

    /// Unit vector pointing from the isocentre to the source.
    pub fn direction(&self) -> Vec3 {
        let (sp, cp) = self.azimuth.sin_cos();
        let (st, ct) = self.elevation.sin_cos();
        Vec3::new(ct * cp, ct * sp, st)
    }
}

/// Source/detector distances in metres and the detector sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemGeometry {
    pub source_isocentre_distance: f64,
    pub detector_isocentre_distance: f64,
    /// `(rows, cols)`.
    pub detector_pixels: (usize, usize),
    /// Metres per pixel along `(u, v)`.
    pub pixel_pitch: (f64, f64),
}

impl Default for SystemGeometry {
    /// 1 m source–isocentre, 3 m detector–isocentre, 375 × 375 pixels at 400 µm.
    fn default() -> Self {
        SystemGeometry {
            source_isocentre_distance: 1.0,
            detector_isocentre_distance: 3.0,
            detector_pixels: (375, 375),
            pixel_pitch: (400e-6, 400e-6),
        }
    }
}

impl SystemGeometry {
    pub fn validate(&self) -> Result<()> {
        let ok = self.source_isocentre_distance > 0.0
            && self.detector_isocentre_distance > 0.0
            && self.detector_pixels.0 > 0
            && self.detector_pixels.1 > 0
            && self.pixel_pitch.0 > 0.0
            && self.pixel_pitch.1 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("system geometry needs positive distances, pixels and pitch"))
        }
    }

    pub fn source_detector_distance(&self) -> f64 {
        self.source_isocentre_distance + self.detector_isocentre_distance
    }

    pub fn rows(&self) -> usize {
        self.detector_pixels.0
    }

    pub fn cols(&self) -> usize {
        self.detector_pixels.1
    }
}

/// Source point and detector frame for one scan position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub source_point: Vec3,
    pub detector_centre: Vec3,
    pub detector_u_axis: Vec3,
    pub detector_v_axis: Vec3,
}

impl Pose {
    /// Unit vector of the central ray, source towards detector.
    pub fn ray_direction(&self) -> Vec3 {
        (self.detector_centre - self.source_point).normalized()
    }

    /// World position of the centre of detector pixel `(row, col)`.
    ///
    /// Columns run along `u`, rows along `v`; the detector centre lies
    /// between the middle pixels.
    pub fn pixel_centre(&self, g: &SystemGeometry, row: usize, col: usize) -> Vec3 {
        let du = (col as f64 - (g.cols() as f64 - 1.0) / 2.0) * g.pixel_pitch.0;
        let dv = (row as f64 - (g.rows() as f64 - 1.0) / 2.0) * g.pixel_pitch.1;
        self.detector_centre + self.detector_u_axis * du + self.detector_v_axis * dv
    }
}

/// Golden angle `π(3 - √5)`.
pub fn golden_angle() -> f64 {
    PI * (3.0 - 5f64.sqrt())
}

/// `n` near-uniform positions: `z_i = 1 - (2i+1)/n`, azimuth `i·golden` mod 2π.
pub fn fibonacci_sphere(n: usize) -> Result<Vec<ScanPosition>> {
    if n == 0 {
        return Err(Error::invalid("fibonacci_sphere needs n >= 1"));
    }
    let ga = golden_angle();
    let nf = n as f64;
    Ok((0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / nf;
            let azimuth = (i as f64 * ga).rem_euclid(2.0 * PI);
            ScanPosition {
                azimuth,
                elevation: z.asin(),
            }
        })
        .collect())
}

/// Great-circle distance on a sphere of the given radius.
pub fn haversine(a: &ScanPosition, b: &ScanPosition, radius: f64) -> f64 {
    let dlat = b.elevation - a.elevation;
    let dlon = b.azimuth - a.azimuth;
    let s_lat = (dlat / 2.0).sin();
    let s_lon = (dlon / 2.0).sin();
    let h = (s_lat * s_lat + a.elevation.cos() * b.elevation.cos() * s_lon * s_lon).clamp(0.0, 1.0);
    2.0 * radius * h.sqrt().atan2((1.0 - h).sqrt())
}

pub fn pose_from_position(p: &ScanPosition, g: &SystemGeometry) -> Pose {
    let d = p.direction();
    let (sp, cp) = p.azimuth.sin_cos();
    let (st, ct) = p.elevation.sin_cos();
    // d/dθ of the direction; unit length and defined at the poles too
    let v = Vec3::new(-st * cp, -st * sp, ct);
    let ray = -d;
    let u = v.cross(ray);
    Pose {
        source_point: d * g.source_isocentre_distance,
        detector_centre: d * (-g.detector_isocentre_distance),
        detector_u_axis: u,
        detector_v_axis: v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pos(a: f64, e: f64) -> ScanPosition {
        ScanPosition {
            azimuth: a,
            elevation: e,
        }
    }

    #[test]
    fn fibonacci_single_point_is_equatorial() {
        let p = fibonacci_sphere(1).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].elevation, 0.0);
        assert_eq!(p[0].azimuth, 0.0);
    }

    #[test]
    fn fibonacci_rejects_zero() {
        assert!(fibonacci_sphere(0).is_err());
    }

    #[test]
    fn fibonacci_unit_vectors() {
        let p = fibonacci_sphere(1000).unwrap();
        assert_eq!(p.len(), 1000);
        for q in &p {
            assert!((q.direction().norm() - 1.0).abs() < 1e-12);
            assert!((0.0..2.0 * PI).contains(&q.azimuth));
        }
    }

    #[test]
    fn haversine_examples() {
        let a = pos(1.0, 0.3);
        assert_eq!(haversine(&a, &a, 1.0), 0.0);
        assert!((haversine(&pos(0.2, PI / 2.0), &pos(4.0, -PI / 2.0), 2.0) - 2.0 * PI).abs() < 1e-12);
        assert!((haversine(&pos(0.0, 0.0), &pos(PI / 2.0, 0.0), 1.0) - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn pose_reference_orientation() {
        let g = SystemGeometry::default();
        let pose = pose_from_position(&pos(0.0, 0.0), &g);
        assert_eq!(pose.source_point, Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(pose.detector_centre, Vec3::new(-3.0, 0.0, 0.0));
        assert_eq!(pose.detector_v_axis, Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(pose.detector_u_axis, Vec3::new(0.0, -1.0, 0.0));
    }

    #[test]
    fn pose_at_pole_is_well_defined() {
        let g = SystemGeometry::default();
        let pose = pose_from_position(&pos(0.7, PI / 2.0), &g);
        let ray = pose.ray_direction();
        assert!(pose.detector_u_axis.dot(pose.detector_v_axis).abs() < 1e-12);
        assert!(pose.detector_v_axis.dot(ray).abs() < 1e-12);
        assert!((pose.detector_u_axis.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn default_geometry_matches_reference_setup() {
        let g = SystemGeometry::default();
        assert_eq!(g.source_detector_distance(), 4.0);
        assert_eq!(g.detector_pixels, (375, 375));
        assert_eq!(g.pixel_pitch, (400e-6, 400e-6));
    }

    #[test]
    fn positions_serialize_as_objects() {
        let s = serde_json::to_string(&vec![pos(0.5, -0.25)]).unwrap();
        assert_eq!(s, r#"[{"azimuth":0.5,"elevation":-0.25}]"#);
    }
}
