//! ART (Kaczmarz) reconstruction with system rows traced on the fly.
//!
//! Rows are exact voxel traversal lengths along the source-to-pixel ray,
//! computed Siddon-style: collect the parametric crossings with every grid
//! plane inside the bounding box, merge them, and assign each interval to the
//! voxel containing its midpoint.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::{Pose, SystemGeometry, Vec3};
use crate::phantom::{GridSpec, ProjectionImage, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowOrder {
    Sequential,
    Shuffled { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtConfig {
    /// Full sweeps over all rows.
    pub iterations: usize,
    /// `λ ∈ (0, 2)`.
    pub relaxation: f64,
    pub order: RowOrder,
    /// Clamp negative voxels to zero after each sweep.
    pub nonnegative: bool,
}

impl Default for ArtConfig {
    fn default() -> Self {
        ArtConfig {
            iterations: 3,
            relaxation: 0.3,
            order: RowOrder::Shuffled { seed: 0 },
            nonnegative: true,
        }
    }
}

impl ArtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("ART needs at least one iteration"));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::invalid(format!(
                "relaxation {} outside (0, 2)",
                self.relaxation
            )));
        }
        Ok(())
    }
}

/// Sparse system-matrix row: voxel indices and traversal lengths in metres.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRow {
    pub indices: Vec<u32>,
    pub weights: Vec<f64>,
}

impl SparseRow {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.weights)
            .map(|(&i, w)| w * x[i as usize])
            .sum()
    }

    fn clear(&mut self) {
        self.indices.clear();
        self.weights.clear();
    }
}

/// Reusable buffers for tracing many rays.
#[derive(Debug, Default)]
pub struct RayTracer {
    planes: [Vec<f64>; 3],
    merged: Vec<f64>,
}

impl RayTracer {
    /// Traces the segment `from → to` through `grid` into `row`.
    pub fn trace(&mut self, grid: &GridSpec, from: Vec3, to: Vec3, row: &mut SparseRow) {
        row.clear();
        let delta = to - from;
        let length = delta.norm();
        if length == 0.0 {
            return;
        }
        let dir = delta * (1.0 / length);
        let lo = grid.min_corner();
        let hi = grid.max_corner();

        let mut t_in = 0.0f64;
        let mut t_out = length;
        for a in 0..3 {
            let o = from.axis(a);
            let d = dir.axis(a);
            if d == 0.0 {
                if o < lo.axis(a) || o > hi.axis(a) {
                    return;
                }
                continue;
            }
            let ta = (lo.axis(a) - o) / d;
            let tb = (hi.axis(a) - o) / d;
            t_in = t_in.max(ta.min(tb));
            t_out = t_out.min(ta.max(tb));
        }
        if t_out <= t_in {
            return;
        }

        let s = grid.voxel_size;
        for a in 0..3 {
            let planes = &mut self.planes[a];
            planes.clear();
            let d = dir.axis(a);
            if d == 0.0 {
                continue;
            }
            let o = from.axis(a);
            let base = lo.axis(a);
            for m in 0..=grid.dims[a] {
                let t = (base + m as f64 * s - o) / d;
                if t > t_in && t < t_out {
                    planes.push(t);
                }
            }
            if d < 0.0 {
                planes.reverse();
            }
        }

        self.merged.clear();
        self.merged.push(t_in);
        merge3(&self.planes, &mut self.merged);
        self.merged.push(t_out);

        let dims = grid.dims;
        for w in self.merged.windows(2) {
            let len = w[1] - w[0];
            if len <= 0.0 {
                continue;
            }
            let mid = from + dir * (0.5 * (w[0] + w[1]));
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let f = ((mid.axis(a) - lo.axis(a)) / s).floor();
                idx[a] = (f.max(0.0) as usize).min(dims[a] - 1);
            }
            row.indices.push(grid.index(idx[0], idx[1], idx[2]) as u32);
            row.weights.push(len);
        }
    }
}

fn merge3(lists: &[Vec<f64>; 3], out: &mut Vec<f64>) {
    let mut pos = [0usize; 3];
    loop {
        let mut best: Option<usize> = None;
        for a in 0..3 {
            if pos[a] < lists[a].len()
                && best.is_none_or(|b| lists[a][pos[a]] < lists[b][pos[b]])
            {
                best = Some(a);
            }
        }
        match best {
            Some(a) => {
                out.push(lists[a][pos[a]]);
                pos[a] += 1;
            }
            None => break,
        }
    }
}

/// System row for detector pixel `(row, col)` of `pose`.
pub fn system_row(
    pose: &Pose,
    geometry: &SystemGeometry,
    pixel: (usize, usize),
    grid: &GridSpec,
) -> SparseRow {
    let mut out = SparseRow::default();
    let target = pose.pixel_centre(geometry, pixel.0, pixel.1);
    RayTracer::default().trace(grid, pose.source_point, target, &mut out);
    out
}

pub fn art_reconstruct(
    projections: &[ProjectionImage],
    geometry: &SystemGeometry,
    grid: &GridSpec,
    cfg: &ArtConfig,
) -> Result<Volume> {
    art_reconstruct_with(projections, geometry, grid, cfg, |_, _| {})
}

/// [`art_reconstruct`] with a callback after every sweep (sweep index from 0).
pub fn art_reconstruct_with(
    projections: &[ProjectionImage],
    geometry: &SystemGeometry,
    grid: &GridSpec,
    cfg: &ArtConfig,
    mut on_sweep: impl FnMut(usize, &Volume),
) -> Result<Volume> {
    cfg.validate()?;
    grid.validate()?;
    if projections.is_empty() {
        return Err(Error::invalid("ART needs at least one projection"));
    }
    let (rows, cols) = geometry.detector_pixels;
    for p in projections {
        check_len(rows * cols, p.data.len())?;
    }

    let pixels = rows * cols;
    let mut order: Vec<u32> = (0..(projections.len() * pixels) as u32).collect();
    if let RowOrder::Shuffled { seed } = cfg.order {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }

    let mut vol = Volume::zeros(*grid);
    let mut tracer = RayTracer::default();
    let mut row = SparseRow::default();
    for sweep in 0..cfg.iterations {
        for &r in &order {
            let (p, pix) = (r as usize / pixels, r as usize % pixels);
            let proj = &projections[p];
            let target = proj.pose.pixel_centre(geometry, pix / cols, pix % cols);
            tracer.trace(grid, proj.pose.source_point, target, &mut row);
            if row.is_empty() {
                continue;
            }
            let norm_sq: f64 = row.weights.iter().map(|w| w * w).sum();
            let residual = proj.data[pix] - row.dot(&vol.data);
            let step = cfg.relaxation * residual / norm_sq;
            for (&i, w) in row.indices.iter().zip(&row.weights) {
                vol.data[i as usize] += step * w;
            }
        }
        if cfg.nonnegative {
            vol.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        on_sweep(sweep, &vol);
    }
    Ok(vol)
}

/// Applies the system matrix: one simulated projection per pose.
pub fn project_volume(vol: &Volume, poses: &[Pose], geometry: &SystemGeometry) -> Vec<ProjectionImage> {
    let (rows, cols) = geometry.detector_pixels;
    let mut tracer = RayTracer::default();
    let mut row = SparseRow::default();
    poses
        .iter()
        .map(|pose| {
            let data = (0..rows * cols)
                .map(|pix| {
                    let target = pose.pixel_centre(geometry, pix / cols, pix % cols);
                    tracer.trace(&vol.grid, pose.source_point, target, &mut row);
                    row.dot(&vol.data)
                })
                .collect();
            ProjectionImage {
                rows,
                cols,
                data,
                pose: *pose,
            }
        })
        .collect()
}
