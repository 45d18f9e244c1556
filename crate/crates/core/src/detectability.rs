//! Projection-dependent detectability index.
//!
//! ```text
//! d² = (Σ_f |MTF(f)|² |W_t(f)|²)² / Σ_f |NPS(f)·MTF(f)|² |W_t(f)|²
//! ```
//!
//! summed over the DFT bins of the task grid. `W_t` is the magnitude of the
//! unnormalized DFT of a spherical ROI mask. The pose enters through the
//! models: the Gaussian aperture is demagnified onto the ROI, and the fluence
//! NPS grows as `exp(∫μ dl)` along the ray from the source through the ROI
//! centre.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};
use crate::phantom::{line_integral, GridSpec, Specimen};

#[derive(Debug, Clone)]
pub struct TaskFunction {
    pub grid: GridSpec,
    pub roi_centre: Vec3,
    pub roi_radius: f64,
    mask: Vec<bool>,
    spectrum: Vec<f64>,
    /// `|f|²` per bin in cycles² per voxel².
    freq_sq: Vec<f64>,
}

impl TaskFunction {
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn roi_voxels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Scales `|W_t|` in place.
    pub fn scale_spectrum(&mut self, s: f64) {
        self.spectrum.iter_mut().for_each(|w| *w *= s);
    }
}

fn signed_frequency(k: usize, n: usize) -> f64 {
    let k = k as f64;
    let n = n as f64;
    if k < n / 2.0 {
        k / n
    } else {
        (k - n) / n
    }
}

/// Unnormalized forward 3-D DFT, in place, x fastest.
fn dft3(data: &mut [Complex<f64>], dims: [usize; 3]) {
    let mut planner = FftPlanner::new();
    let [nx, ny, nz] = dims;

    let fx = planner.plan_fft_forward(nx);
    data.chunks_exact_mut(nx).for_each(|line| fx.process(line));

    let fy = planner.plan_fft_forward(ny);
    let mut buf = vec![Complex::new(0.0, 0.0); ny];
    for k in 0..nz {
        for i in 0..nx {
            for j in 0..ny {
                buf[j] = data[i + nx * (j + ny * k)];
            }
            fy.process(&mut buf);
            for j in 0..ny {
                data[i + nx * (j + ny * k)] = buf[j];
            }
        }
    }

    let fz = planner.plan_fft_forward(nz);
    let mut buf = vec![Complex::new(0.0, 0.0); nz];
    for j in 0..ny {
        for i in 0..nx {
            for k in 0..nz {
                buf[k] = data[i + nx * (j + ny * k)];
            }
            fz.process(&mut buf);
            for k in 0..nz {
                data[i + nx * (j + ny * k)] = buf[k];
            }
        }
    }
}

/// Spherical ROI mask over `grid` and its DFT magnitude.
pub fn build_task(grid: &GridSpec, roi_centre: Vec3, roi_radius: f64) -> Result<TaskFunction> {
    grid.validate()?;
    if !(roi_radius > 0.0) {
        return Err(Error::invalid("roi radius must be positive"));
    }
    let lo = grid.min_corner();
    let hi = grid.max_corner();
    let inside = (0..3).all(|a| {
        roi_centre.axis(a) - roi_radius >= lo.axis(a) && roi_centre.axis(a) + roi_radius <= hi.axis(a)
    });
    if !inside {
        return Err(Error::invalid("region of interest extends outside the task grid"));
    }

    let r2 = roi_radius * roi_radius;
    let mask: Vec<bool> = (0..grid.len())
        .map(|idx| {
            let [i, j, k] = grid.coords(idx);
            let d = grid.voxel_centre(i, j, k) - roi_centre;
            d.dot(d) <= r2
        })
        .collect();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::invalid("region of interest contains no voxel centres"));
    }

    let mut buf: Vec<Complex<f64>> = mask
        .iter()
        .map(|&m| Complex::new(if m { 1.0 } else { 0.0 }, 0.0))
        .collect();
    dft3(&mut buf, grid.dims);
    let spectrum: Vec<f64> = buf.iter().map(|c| c.norm()).collect();

    // Parseval for the unnormalized transform
    let energy: f64 = spectrum.iter().map(|w| w * w).sum();
    let expected = (grid.len() * count) as f64;
    if (energy - expected).abs() > 1e-9 * expected {
        return Err(Error::invalid(format!(
            "task spectrum failed Parseval check: {energy} vs {expected}"
        )));
    }

    let [nx, ny, nz] = grid.dims;
    let freq_sq = (0..grid.len())
        .map(|idx| {
            let [i, j, k] = grid.coords(idx);
            let f = [
                signed_frequency(i, nx),
                signed_frequency(j, ny),
                signed_frequency(k, nz),
            ];
            f.iter().map(|v| v * v).sum()
        })
        .collect();

    Ok(TaskFunction {
        grid: *grid,
        roi_centre,
        roi_radius,
        mask,
        spectrum,
        freq_sq,
    })
}

/// Frequency response of the imaging chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrequencyResponseModel {
    /// Constant response.
    Flat { level: f64 },
    /// `exp(-2π² σ² |f|²)` with `σ` the detector-plane aperture width in
    /// metres, divided by the magnification at the ROI. MTF only.
    GaussianAperture { sigma: f64 },
    /// `level · exp(∫μ dl)` along the ray from the source through the ROI
    /// centre. NPS only.
    Fluence { level: f64 },
}

impl FrequencyResponseModel {
    pub fn validate_mtf(&self) -> Result<()> {
        match *self {
            FrequencyResponseModel::Flat { level } if level > 0.0 && level <= 1.0 => Ok(()),
            FrequencyResponseModel::GaussianAperture { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            other => Err(Error::invalid(format!("{other:?} is not a valid MTF model"))),
        }
    }

    pub fn validate_nps(&self) -> Result<()> {
        match *self {
            FrequencyResponseModel::Flat { level } | FrequencyResponseModel::Fluence { level }
                if level > 0.0 && level.is_finite() =>
            {
                Ok(())
            }
            other => Err(Error::invalid(format!("{other:?} is not a valid NPS model"))),
        }
    }
}

/// Magnification of the ROI centre onto the detector.
fn magnification(pose: &Pose, point: Vec3) -> f64 {
    let sdd = (pose.detector_centre - pose.source_point).norm();
    let depth = (point - pose.source_point).dot(pose.ray_direction());
    sdd / depth
}

pub fn compute_pdi(
    pose: &Pose,
    task: &TaskFunction,
    mtf: &FrequencyResponseModel,
    nps: &FrequencyResponseModel,
    specimen: &Specimen,
) -> Result<f64> {
    mtf.validate_mtf()?;
    nps.validate_nps()?;

    let roi = task.roi_centre;
    let noise_level = match *nps {
        FrequencyResponseModel::Flat { level } => level,
        FrequencyResponseModel::Fluence { level } => {
            let path = line_integral(specimen, pose.source_point, roi - pose.source_point)?;
            level * path.exp()
        }
        FrequencyResponseModel::GaussianAperture { .. } => unreachable!("rejected by validate_nps"),
    };
    let noise_sq = noise_level * noise_level;

    let (num, den) = match *mtf {
        FrequencyResponseModel::Flat { level } => {
            let l2 = level * level;
            task.spectrum.iter().fold((0.0, 0.0), |(s1, s2), w| {
                let t = l2 * w * w;
                (s1 + t, s2 + noise_sq * t)
            })
        }
        FrequencyResponseModel::GaussianAperture { sigma } => {
            let sigma_vox = sigma / (magnification(pose, roi) * task.grid.voxel_size);
            let c = -4.0 * PI * PI * sigma_vox * sigma_vox;
            task.spectrum
                .iter()
                .zip(&task.freq_sq)
                .fold((0.0, 0.0), |(s1, s2), (w, f2)| {
                    // |MTF|² = exp(-4π²σ²|f|²)
                    let t = (c * f2).exp() * w * w;
                    (s1 + t, s2 + noise_sq * t)
                })
        }
        FrequencyResponseModel::Fluence { .. } => unreachable!("rejected by validate_mtf"),
    };

    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::invalid("detectability denominator is zero or not finite"));
    }
    Ok(num * num / den)
}

/// `d²` per pose; non-negative and in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectabilityVector(pub Vec<f64>);

impl DetectabilityVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn pdi_vector(
    poses: &[Pose],
    task: &TaskFunction,
    mtf: &FrequencyResponseModel,
    nps: &FrequencyResponseModel,
    specimen: &Specimen,
) -> Result<DetectabilityVector> {
    if poses.is_empty() {
        return Err(Error::invalid("pdi_vector needs at least one pose"));
    }
    let values = poses
        .par_iter()
        .map(|p| compute_pdi(p, task, mtf, nps, specimen))
        .collect::<Result<Vec<f64>>>()?;
    Ok(DetectabilityVector(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pose_from_position, ScanPosition, SystemGeometry};
    use crate::phantom::{make_specimen, SpecimenPreset};

    fn grid16() -> GridSpec {
        GridSpec::centred([16, 16, 16], 0.001)
    }

    fn voxel_centre_task(grid: &GridSpec) -> TaskFunction {
        build_task(grid, grid.voxel_centre(8, 8, 8), 0.0004).unwrap()
    }

    #[test]
    fn single_voxel_spectrum_is_flat() {
        let task = voxel_centre_task(&grid16());
        assert_eq!(task.roi_voxels(), 1);
        assert!(task.spectrum().iter().all(|w| (w - 1.0).abs() < 1e-12));
    }

    #[test]
    fn empty_roi_rejected() {
        // centre between voxel centres with a tiny radius
        let err = build_task(&grid16(), Vec3::ZERO, 1e-5);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn roi_outside_grid_rejected() {
        assert!(build_task(&grid16(), Vec3::new(0.0075, 0.0, 0.0), 0.002).is_err());
    }

    #[test]
    fn parseval_holds() {
        let task = build_task(&grid16(), Vec3::new(0.0003, -0.0002, 0.0001), 0.003).unwrap();
        let energy: f64 = task.spectrum().iter().map(|w| w * w).sum();
        let expect = (4096 * task.roi_voxels()) as f64;
        assert!((energy - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn flat_models_single_voxel() {
        let task = voxel_centre_task(&grid16());
        let specimen = make_specimen(SpecimenPreset::AluminiumBox, Vec3::new(0.01, 0.0, 0.0)).unwrap();
        let pose = pose_from_position(&ScanPosition { azimuth: 0.3, elevation: 0.2 }, &SystemGeometry::default());
        let c = 2.5;
        let d2 = compute_pdi(
            &pose,
            &task,
            &FrequencyResponseModel::Flat { level: 1.0 },
            &FrequencyResponseModel::Flat { level: c },
            &specimen,
        )
        .unwrap();
        assert!((d2 - 4096.0 / (c * c)).abs() < 1e-9);
    }

    #[test]
    fn model_roles_are_checked() {
        assert!(FrequencyResponseModel::Fluence { level: 1.0 }.validate_mtf().is_err());
        assert!(FrequencyResponseModel::GaussianAperture { sigma: 1e-3 }.validate_nps().is_err());
        assert!(FrequencyResponseModel::Flat { level: 1.5 }.validate_mtf().is_err());
        assert!(FrequencyResponseModel::Flat { level: 0.0 }.validate_nps().is_err());
    }

    #[test]
    fn empty_pose_list_rejected() {
        let task = voxel_centre_task(&grid16());
        let specimen = make_specimen(SpecimenPreset::AluminiumBox, Vec3::ZERO).unwrap();
        let flat = FrequencyResponseModel::Flat { level: 1.0 };
        assert!(pdi_vector(&[], &task, &flat, &flat, &specimen).is_err());
    }

    #[test]
    fn models_roundtrip_json() {
        let m = FrequencyResponseModel::GaussianAperture { sigma: 4e-4 };
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"kind":"gaussian_aperture","sigma":0.0004}"#);
        assert_eq!(serde_json::from_str::<FrequencyResponseModel>(&s).unwrap(), m);
    }
}
