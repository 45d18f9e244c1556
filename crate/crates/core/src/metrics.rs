//! ROI-restricted RMSE and SSIM.
//!
//! Both metrics min-max normalize each volume over the bounding box of the
//! spherical ROI first, then evaluate only at voxels whose centres fall
//! inside the sphere. SSIM uses an 11×11 Gaussian window (σ = 1.5) inside
//! each axial slice, truncated and renormalized at slice borders, with
//! `C1 = 0.01²` and `C2 = 0.03²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::phantom::{GridSpec, Volume};

const WINDOW_RADIUS: isize = 5;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub centre: Vec3,
    pub radius: f64,
}

impl RoiSpec {
    pub fn new(centre: Vec3, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::invalid("roi radius must be positive"));
        }
        Ok(RoiSpec { centre, radius })
    }

    /// Inclusive voxel index ranges whose centres lie in the ROI bounding box.
    fn bbox(&self, grid: &GridSpec) -> Option<[(usize, usize); 3]> {
        let mut out = [(0, 0); 3];
        for (a, slot) in out.iter_mut().enumerate() {
            let s = grid.voxel_size;
            let o = grid.origin.axis(a);
            let c = self.centre.axis(a);
            // centre of voxel i is o + (i + 0.5)s
            let first = ((c - self.radius - o) / s - 0.5).ceil().max(0.0);
            let last = ((c + self.radius - o) / s - 0.5).floor();
            if last < first || first >= grid.dims[a] as f64 {
                return None;
            }
            *slot = (first as usize, (last as usize).min(grid.dims[a] - 1));
        }
        Some(out)
    }

    /// Linear indices of voxels whose centres lie inside the sphere.
    pub fn voxels(&self, grid: &GridSpec) -> Vec<usize> {
        let Some(bb) = self.bbox(grid) else {
            return Vec::new();
        };
        let r2 = self.radius * self.radius;
        let mut out = Vec::new();
        for k in bb[2].0..=bb[2].1 {
            for j in bb[1].0..=bb[1].1 {
                for i in bb[0].0..=bb[0].1 {
                    let d = grid.voxel_centre(i, j, k) - self.centre;
                    if d.dot(d) <= r2 {
                        out.push(grid.index(i, j, k));
                    }
                }
            }
        }
        out
    }
}

/// Min-max scales the whole volume to the range found in `region`'s bounding
/// box, or over the full volume when `region` is `None`.
pub fn normalize(v: &Volume, region: Option<&RoiSpec>) -> Result<Volume> {
    let (lo, hi) = match region {
        None => v
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x))),
        Some(roi) => {
            let bb = roi
                .bbox(&v.grid)
                .ok_or_else(|| Error::invalid("region of interest misses the volume"))?;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for k in bb[2].0..=bb[2].1 {
                for j in bb[1].0..=bb[1].1 {
                    for i in bb[0].0..=bb[0].1 {
                        let x = v.get(i, j, k);
                        lo = lo.min(x);
                        hi = hi.max(x);
                    }
                }
            }
            (lo, hi)
        }
    };
    if !(hi > lo) {
        return Err(Error::invalid("cannot normalize a constant region"));
    }
    let scale = 1.0 / (hi - lo);
    Ok(Volume {
        grid: v.grid,
        data: v.data.iter().map(|x| (x - lo) * scale).collect(),
    })
}

fn same_grid(a: &Volume, b: &Volume) -> Result<()> {
    if a.grid != b.grid {
        return Err(Error::invalid("volumes are on different grids"));
    }
    Ok(())
}

fn roi_voxels(grid: &GridSpec, roi: &RoiSpec) -> Result<Vec<usize>> {
    let vox = roi.voxels(grid);
    if vox.is_empty() {
        return Err(Error::invalid("region of interest contains no voxels"));
    }
    Ok(vox)
}

pub fn rmse(a: &Volume, b: &Volume, roi: &RoiSpec) -> Result<f64> {
    same_grid(a, b)?;
    let vox = roi_voxels(&a.grid, roi)?;
    let na = normalize(a, Some(roi))?;
    let nb = normalize(b, Some(roi))?;
    let sum: f64 = vox
        .iter()
        .map(|&i| {
            let d = na.data[i] - nb.data[i];
            d * d
        })
        .sum();
    Ok((sum / vox.len() as f64).sqrt())
}

fn gaussian_window() -> Vec<f64> {
    let n = (2 * WINDOW_RADIUS + 1) as usize;
    let mut w = Vec::with_capacity(n * n);
    for dy in -WINDOW_RADIUS..=WINDOW_RADIUS {
        for dx in -WINDOW_RADIUS..=WINDOW_RADIUS {
            let r2 = (dx * dx + dy * dy) as f64;
            w.push((-r2 / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp());
        }
    }
    w
}

fn local_ssim(a: &Volume, b: &Volume, window: &[f64], at: [usize; 3]) -> f64 {
    let [nx, ny, _] = a.grid.dims;
    let [ci, cj, k] = at;
    let side = (2 * WINDOW_RADIUS + 1) as usize;
    let mut taps = Vec::with_capacity(side * side);
    for (widx, &w) in window.iter().enumerate() {
        let di = (widx % side) as isize - WINDOW_RADIUS;
        let dj = (widx / side) as isize - WINDOW_RADIUS;
        let i = ci as isize + di;
        let j = cj as isize + dj;
        if i < 0 || j < 0 || i >= nx as isize || j >= ny as isize {
            continue;
        }
        let idx = a.grid.index(i as usize, j as usize, k);
        taps.push((w, a.data[idx], b.data[idx]));
    }
    let wsum: f64 = taps.iter().map(|t| t.0).sum();
    let mu_a = taps.iter().map(|t| t.0 * t.1).sum::<f64>() / wsum;
    let mu_b = taps.iter().map(|t| t.0 * t.2).sum::<f64>() / wsum;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for &(w, x, y) in &taps {
        let (dx, dy) = (x - mu_a, y - mu_b);
        va += w * dx * dx;
        vb += w * dy * dy;
        cov += w * dx * dy;
    }
    va /= wsum;
    vb /= wsum;
    cov /= wsum;
    ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2)) / ((mu_a * mu_a + mu_b * mu_b + C1) * (va + vb + C2))
}

pub fn ssim(a: &Volume, b: &Volume, roi: &RoiSpec) -> Result<f64> {
    same_grid(a, b)?;
    let vox = roi_voxels(&a.grid, roi)?;
    let na = normalize(a, Some(roi))?;
    let nb = normalize(b, Some(roi))?;
    let window = gaussian_window();
    let total: f64 = vox
        .iter()
        .map(|&idx| local_ssim(&na, &nb, &window, a.grid.coords(idx)))
        .sum();
    Ok(total / vox.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(grid: GridSpec) -> Volume {
        let data = (0..grid.len())
            .map(|idx| {
                let [i, j, k] = grid.coords(idx);
                ((i * 7 + j * 3 + k * 5) % 11) as f64 / 10.0
            })
            .collect();
        Volume { grid, data }
    }

    fn roi() -> RoiSpec {
        RoiSpec::new(Vec3::ZERO, 0.004).unwrap()
    }

    #[test]
    fn normalize_unit_range_is_identity() {
        let grid = GridSpec::centred([3, 1, 1], 1.0);
        let v = Volume { grid, data: vec![0.0, 0.25, 1.0] };
        assert_eq!(normalize(&v, None).unwrap().data, v.data);
    }

    #[test]
    fn normalize_is_affine_invariant() {
        let v = ramp(GridSpec::centred([12, 12, 12], 0.001));
        let w = Volume {
            grid: v.grid,
            data: v.data.iter().map(|x| 3.5 * x - 2.0).collect(),
        };
        let (nv, nw) = (normalize(&v, Some(&roi())).unwrap(), normalize(&w, Some(&roi())).unwrap());
        for (a, b) in nv.data.iter().zip(&nw.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_volume_rejected() {
        let grid = GridSpec::centred([4, 4, 4], 0.002);
        let v = Volume { grid, data: vec![2.0; 64] };
        assert!(normalize(&v, None).is_err());
        assert!(rmse(&v, &v, &roi()).is_err());
    }

    #[test]
    fn identities() {
        let v = ramp(GridSpec::centred([12, 12, 12], 0.001));
        assert_eq!(rmse(&v, &v, &roi()).unwrap(), 0.0);
        assert_eq!(ssim(&v, &v, &roi()).unwrap(), 1.0);
    }

    #[test]
    fn empty_roi_rejected() {
        let v = ramp(GridSpec::centred([12, 12, 12], 0.001));
        let tiny = RoiSpec::new(Vec3::ZERO, 1e-5).unwrap();
        assert!(rmse(&v, &v, &tiny).is_err());
        assert!(ssim(&v, &v, &tiny).is_err());
    }

    #[test]
    fn mismatched_grids_rejected() {
        let a = ramp(GridSpec::centred([12, 12, 12], 0.001));
        let b = ramp(GridSpec::centred([12, 12, 12], 0.0011));
        assert!(rmse(&a, &b, &roi()).is_err());
    }

    #[test]
    fn constant_offset_inside_sphere() {
        // bounding-box corners pin both ranges to [0, 1]
        let grid = GridSpec::centred([9, 9, 9], 0.001);
        let roi = RoiSpec::new(Vec3::ZERO, 0.0035).unwrap();
        let inside = roi.voxels(&grid);
        let mut a = Volume { grid, data: vec![0.5; grid.len()] };
        a.data[grid.index(1, 1, 1)] = 0.0;
        a.data[grid.index(7, 7, 7)] = 1.0;
        let mut b = a.clone();
        let c = 0.125;
        for &i in &inside {
            a.data[i] = 0.25;
            b.data[i] = 0.25 + c;
        }
        assert!((rmse(&a, &b, &roi).unwrap() - c).abs() < 1e-15);
    }
}
