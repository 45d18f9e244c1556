//! On-disk formats.
//!
//! | Artifact | Files |
//! |----------|-------|
//! | projection | `<stem>.raw` (row-major LE `f32`) + `<stem>.json` sidecar |
//! | volume | `<stem>.raw` (x fastest, LE `f32`) + `<stem>.json` sidecar |
//! | label / mask | JSON `{n, k, delta_min, mask}` |
//! | detectability | CSV `index,azimuth,elevation,d2` |
//! | metrics | CSV `specimen,method,rmse,ssim` |
//! | positions | JSON array of `{azimuth, elevation}` |
//! | slice dump | binary PGM, 8 bit |
//!
//! Sidecars carry the SHA-256 of the raw payload, which loaders verify.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detectability::DetectabilityVector;
use crate::error::{Error, Result};
use crate::geometry::{Pose, ScanPosition, SystemGeometry, Vec3};
use crate::phantom::{GridSpec, ProjectionImage, Volume};
use crate::ste::SelectionMask;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))
}

pub fn encode_f32(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect()
}

pub fn decode_f32(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != 4 * expected {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", 4 * expected, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn raw_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("raw")
}

fn read_verified_raw(sidecar: &Path, expected: usize, sha256: &str) -> Result<Vec<f64>> {
    let raw = raw_path(sidecar);
    let bytes = read_bytes(&raw)?;
    if sha256_hex(&bytes) != sha256 {
        return Err(Error::Stale {
            path: raw,
            reason: "payload does not match the hash in its sidecar".into(),
        });
    }
    decode_f32(&raw, &bytes, expected)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSidecar {
    pub rows: usize,
    pub cols: usize,
    pub pose: Pose,
    pub geometry: SystemGeometry,
    pub specimen_hash: String,
    pub position: ScanPosition,
    /// SHA-256 of the `.raw` payload.
    pub sha256: String,
}

/// Writes `<stem>.raw` and `<stem>.json`; returns the payload hash.
pub fn save_projection(
    sidecar: &Path,
    image: &ProjectionImage,
    geometry: &SystemGeometry,
    position: ScanPosition,
    specimen_hash: &str,
) -> Result<String> {
    let bytes = encode_f32(&image.data);
    let sha256 = sha256_hex(&bytes);
    write_bytes(&raw_path(sidecar), &bytes)?;
    write_json(
        sidecar,
        &ProjectionSidecar {
            rows: image.rows,
            cols: image.cols,
            pose: image.pose,
            geometry: *geometry,
            specimen_hash: specimen_hash.to_string(),
            position,
            sha256: sha256.clone(),
        },
    )?;
    Ok(sha256)
}

pub fn load_projection(sidecar: &Path) -> Result<(ProjectionImage, ProjectionSidecar)> {
    let meta: ProjectionSidecar = read_json(sidecar)?;
    let data = read_verified_raw(sidecar, meta.rows * meta.cols, &meta.sha256)?;
    Ok((
        ProjectionImage {
            rows: meta.rows,
            cols: meta.cols,
            data,
            pose: meta.pose,
        },
        meta,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: Vec3,
    pub sha256: String,
}

pub fn save_volume(sidecar: &Path, v: &Volume) -> Result<String> {
    let bytes = encode_f32(&v.data);
    let sha256 = sha256_hex(&bytes);
    write_bytes(&raw_path(sidecar), &bytes)?;
    write_json(
        sidecar,
        &VolumeSidecar {
            dims: v.grid.dims,
            voxel_size: v.grid.voxel_size,
            origin: v.grid.origin,
            sha256: sha256.clone(),
        },
    )?;
    Ok(sha256)
}

pub fn load_volume(sidecar: &Path) -> Result<Volume> {
    let meta: VolumeSidecar = read_json(sidecar)?;
    let grid = GridSpec {
        dims: meta.dims,
        voxel_size: meta.voxel_size,
        origin: meta.origin,
    };
    grid.validate().map_err(|e| Error::format(sidecar, e))?;
    let data = read_verified_raw(sidecar, grid.len(), &meta.sha256)?;
    Volume::from_data(grid, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFile {
    pub n: usize,
    pub k: usize,
    pub delta_min: f64,
    pub mask: Vec<u8>,
}

impl LabelFile {
    pub fn new(mask: &SelectionMask, delta_min: f64) -> Self {
        LabelFile {
            n: mask.len(),
            k: mask.k(),
            delta_min,
            mask: mask.values().to_vec(),
        }
    }

    pub fn to_mask(&self) -> Result<SelectionMask> {
        if self.mask.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: self.mask.len(),
            });
        }
        SelectionMask::new(self.mask.clone(), self.k)
    }
}

pub fn save_label(path: &Path, label: &LabelFile) -> Result<()> {
    write_json(path, label)
}

pub fn load_label(path: &Path) -> Result<LabelFile> {
    let label: LabelFile = read_json(path)?;
    label.to_mask().map_err(|e| Error::format(path, e))?;
    Ok(label)
}

pub fn save_positions(path: &Path, positions: &[ScanPosition]) -> Result<()> {
    write_json(path, &positions)
}

pub fn load_positions(path: &Path) -> Result<Vec<ScanPosition>> {
    read_json(path)
}

pub fn pdi_csv(positions: &[ScanPosition], d2: &DetectabilityVector) -> Result<String> {
    if positions.len() != d2.len() {
        return Err(Error::DimensionMismatch {
            expected: positions.len(),
            got: d2.len(),
        });
    }
    let mut out = String::from("index,azimuth,elevation,d2\n");
    for (i, (p, v)) in positions.iter().zip(d2.as_slice()).enumerate() {
        out.push_str(&format!("{i},{},{},{v}\n", p.azimuth, p.elevation));
    }
    Ok(out)
}

fn csv_lines<'a>(path: &Path, text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(Error::format(path, format!("expected header `{header}`")));
    }
    let width = header.split(',').count();
    let rows: Vec<(usize, Vec<&str>)> = lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| (i + 2, l.split(',').collect()))
        .collect();
    if let Some((line, _)) = rows.iter().find(|(_, f)| f.len() != width) {
        return Err(Error::format(path, format!("line {line}: expected {width} fields")));
    }
    Ok(rows.into_iter())
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: usize, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::format(path, format!("line {line}: cannot parse `{s}`")))
}

pub fn save_pdi(path: &Path, positions: &[ScanPosition], d2: &DetectabilityVector) -> Result<()> {
    write_bytes(path, pdi_csv(positions, d2)?.as_bytes())
}

pub fn load_pdi(path: &Path) -> Result<(Vec<ScanPosition>, DetectabilityVector)> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|e| Error::format(path, e))?;
    let mut positions = Vec::new();
    let mut d2 = Vec::new();
    for (line, f) in csv_lines(path, &text, "index,azimuth,elevation,d2")? {
        let index: usize = parse_field(path, line, f[0])?;
        if index != positions.len() {
            return Err(Error::format(path, format!("line {line}: index out of order")));
        }
        positions.push(ScanPosition {
            azimuth: parse_field(path, line, f[1])?,
            elevation: parse_field(path, line, f[2])?,
        });
        d2.push(parse_field(path, line, f[3])?);
    }
    Ok((positions, DetectabilityVector(d2)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub specimen: String,
    pub method: String,
    pub rmse: f64,
    pub ssim: f64,
}

pub const METRICS_HEADER: &str = "specimen,method,rmse,ssim";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.specimen, r.method, r.rmse, r.ssim));
    }
    out
}

pub fn save_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(r) = rows.iter().find(|r| r.specimen.contains(',') || r.method.contains(',')) {
        return Err(Error::invalid(format!("name `{}` contains a comma", r.specimen)));
    }
    write_bytes(path, metrics_csv(rows).as_bytes())
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|e| Error::format(path, e))?;
    let rows = csv_lines(path, &text, METRICS_HEADER)?
        .map(|(line, f)| {
            Ok(MetricsRow {
                specimen: f[0].to_string(),
                method: f[1].to_string(),
                rmse: parse_field(path, line, f[2])?,
                ssim: parse_field(path, line, f[3])?,
            })
        })
        .collect();
    rows
}

/// Binary 8-bit PGM; values are clipped to `[0, 1]` and scaled to 255.
pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::DimensionMismatch {
            expected: width * height,
            got: values.len(),
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Parses a binary PGM written by [`pgm_bytes`], returning `(width, height, pixels)`.
pub fn parse_pgm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |r: &str| Error::format(path, r);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit binary PGM"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(bad("pixel count does not match header"));
    }
    Ok((w, h, data.to_vec()))
}

/// Axial slice `k` (fixed z) as a PGM, x along the width.
pub fn save_slice_pgm(path: &Path, v: &Volume, k: usize) -> Result<()> {
    let [nx, ny, nz] = v.grid.dims;
    if k >= nz {
        return Err(Error::invalid(format!("slice {k} outside 0..{nz}")));
    }
    let slice = &v.data[k * nx * ny..(k + 1) * nx * ny];
    write_bytes(path, &pgm_bytes(nx, ny, slice)?)
}
