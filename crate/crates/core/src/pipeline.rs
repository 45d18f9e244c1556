//! Run configuration and the staged driver behind the command-line tool.
//!
//! ```text
//! <out>/
//!   config.json  positions.json
//!   specimens/<name>/
//!     specimen.json
//!     projections/  NNNN.raw NNNN.json manifest.json
//!     pdi/          pdi.csv manifest.json
//!     label/        label.json manifest.json
//!     predict/      prediction.json manifest.json
//!     reconstruct/  {reference,label,prediction}.{raw,json} manifest.json
//!     evaluate/     {reference,label,prediction}_zNNN.pgm
//!   model/          checkpoint.bin history.csv manifest.json
//!   evaluate/       metrics.csv manifest.json
//! ```
//!
//! Every stage directory holds a manifest with the hash of the configuration
//! section it used, the digests of the manifests it consumed and a digest of
//! its own outputs. A stage refuses to consume an upstream whose
//! configuration or inputs have changed since it ran.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detectability::{build_task, pdi_vector, FrequencyResponseModel};
use crate::error::{Error, Result};
use crate::geometry::{fibonacci_sphere, pose_from_position, ScanPosition, SystemGeometry, Vec3};
use crate::io::{self, LabelFile, MetricsRow};
use crate::labeler::{default_delta_min, select_greedy, LabelProblem};
use crate::metrics::{normalize, rmse, ssim, RoiSpec};
use crate::model::{
    architecture_name, downsample, read_checkpoint, train_prepared, write_checkpoint, CheckpointHeader,
    Regressor, ThresholdGradient, TrainConfig,
};
use crate::phantom::{apply_poisson_noise, forward_project, make_specimen_with, GridSpec, ProjectionImage, Specimen, SpecimenPreset, DEFAULT_ATTENUATION};
use crate::recon::{art_reconstruct, ArtConfig};
use crate::softrank::{hard_rank, ScoreVector};
use crate::ste::{threshold_topk, SelectionMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecimenConfig {
    pub name: String,
    #[serde(default)]
    pub preset: SpecimenPreset,
    pub defect_centre: Vec3,
    #[serde(default = "default_attenuation")]
    pub attenuation: f64,
    pub role: Role,
}

fn default_attenuation() -> f64 {
    DEFAULT_ATTENUATION
}

impl SpecimenConfig {
    pub fn specimen(&self) -> Result<Specimen> {
        make_specimen_with(self.preset, self.defect_centre, self.attenuation)
    }
}

/// `"auto"` or a separation in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaMin {
    Auto(AutoTag),
    Radians(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

impl DeltaMin {
    pub fn resolve(self, k: usize) -> Result<f64> {
        match self {
            DeltaMin::Auto(_) => default_delta_min(k),
            DeltaMin::Radians(r) if r >= 0.0 && r.is_finite() => Ok(r),
            DeltaMin::Radians(r) => Err(Error::invalid(format!("delta_min {r} must be non-negative"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectabilityConfig {
    /// Cube side of the task grid, centred on the defect.
    pub task_grid: usize,
    pub task_voxel_size: f64,
    pub roi_radius: f64,
    pub mtf: FrequencyResponseModel,
    pub nps: FrequencyResponseModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Unattenuated photons per pixel.
    pub photons: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    pub grid: GridSpec,
    pub art: ArtConfig,
}

/// [`TrainConfig`] without `k` and `seed`, which live at the top level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub eps: f64,
    pub bce_clamp: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    #[serde(default)]
    pub threshold_gradient: ThresholdGradient,
    #[serde(default = "yes")]
    pub standardize_inputs: bool,
    #[serde(default)]
    pub standardize_scores: bool,
    #[serde(default)]
    pub eps_final: Option<f64>,
    #[serde(default)]
    pub lr_decay: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub roi_radius: f64,
    /// Axial slices dumped around the ROI centre, as offsets in voxels.
    pub slice_offsets: [i64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: SystemGeometry,
    pub specimens: Vec<SpecimenConfig>,
    pub n_positions: usize,
    pub k: usize,
    pub delta_min: DeltaMin,
    pub detectability: DetectabilityConfig,
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    pub reconstruction: ReconConfig,
    pub train: TrainSettings,
    pub evaluation: EvaluationConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Six box specimens (five train, one test), 200 positions, `k = 20`,
    /// 64 × 64 detector covering the same field of view as 375 × 375 at 400 µm.
    pub fn desk_scale() -> Self {
        let centres = [
            (0.0, 0.0, 0.0),
            (0.008, 0.004, -0.003),
            (-0.010, 0.006, 0.005),
            (0.005, -0.009, 0.008),
            (-0.006, -0.005, -0.010),
            (0.004, 0.007, -0.006),
        ];
        let specimens = centres
            .iter()
            .enumerate()
            .map(|(i, &(x, y, z))| SpecimenConfig {
                name: format!("box{i}"),
                preset: SpecimenPreset::AluminiumBox,
                defect_centre: Vec3::new(x, y, z),
                attenuation: DEFAULT_ATTENUATION,
                role: if i + 1 == centres.len() { Role::Test } else { Role::Train },
            })
            .collect();
        let pitch = 375.0 * 400e-6 / 64.0;
        RunConfig {
            seed: 0,
            geometry: SystemGeometry {
                source_isocentre_distance: 1.0,
                detector_isocentre_distance: 3.0,
                detector_pixels: (64, 64),
                pixel_pitch: (pitch, pitch),
            },
            specimens,
            n_positions: 200,
            k: 20,
            delta_min: DeltaMin::Auto(AutoTag::Auto),
            detectability: DetectabilityConfig {
                task_grid: 16,
                task_voxel_size: 0.0006,
                roi_radius: 0.004,
                mtf: FrequencyResponseModel::GaussianAperture { sigma: pitch },
                nps: FrequencyResponseModel::Fluence { level: 1.0 },
            },
            noise: None,
            reconstruction: ReconConfig {
                grid: GridSpec::centred([104, 84, 84], 0.001),
                art: ArtConfig::default(),
            },
            train: TrainSettings {
                learning_rate: 1e-3,
                epochs: 600,
                eps: 0.2,
                bce_clamp: 0.01,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                threshold_gradient: ThresholdGradient::Negated,
                standardize_inputs: true,
                standardize_scores: true,
                eps_final: Some(0.005),
                lr_decay: true,
            },
            evaluation: EvaluationConfig {
                roi_radius: 0.004,
                slice_offsets: [-2, 0, 2],
            },
            output_dir: PathBuf::from("out"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            eps: t.eps,
            k: self.k,
            bce_clamp: t.bce_clamp,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            seed: self.seed,
            threshold_gradient: t.threshold_gradient,
            standardize_inputs: t.standardize_inputs,
            standardize_scores: t.standardize_scores,
            eps_final: t.eps_final,
            lr_decay: t.lr_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.specimens.is_empty() {
            return Err(Error::invalid("config lists no specimens"));
        }
        for (i, s) in self.specimens.iter().enumerate() {
            let ok = !s.name.is_empty()
                && s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !ok {
                return Err(Error::invalid(format!(
                    "specimen name `{}` must be non-empty [A-Za-z0-9_-]",
                    s.name
                )));
            }
            if self.specimens[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::invalid(format!("duplicate specimen name `{}`", s.name)));
            }
            s.specimen()?;
        }
        if self.n_positions == 0 || self.k == 0 || self.k > self.n_positions {
            return Err(Error::invalid(format!(
                "need 1 ≤ k ≤ n_positions, got k = {}, n_positions = {}",
                self.k, self.n_positions
            )));
        }
        self.delta_min.resolve(self.k)?;
        let d = &self.detectability;
        if d.task_grid == 0 || !(d.task_voxel_size > 0.0) || !(d.roi_radius > 0.0) {
            return Err(Error::invalid("detectability task grid and ROI must be positive"));
        }
        d.mtf.validate_mtf()?;
        d.nps.validate_nps()?;
        if let Some(n) = &self.noise {
            if !(n.photons > 0.0) || !n.photons.is_finite() {
                return Err(Error::invalid("noise photons must be positive"));
            }
        }
        self.reconstruction.grid.validate()?;
        self.reconstruction.art.validate()?;
        self.train_config().validate()?;
        if !(self.evaluation.roi_radius > 0.0) {
            return Err(Error::invalid("evaluation ROI radius must be positive"));
        }
        Ok(())
    }

    /// Parses a config document and applies `key.path=value` overrides.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let bytes = io::read_bytes(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e))?;
        Self::from_json(&text, overrides)
    }

    fn specimens_with(&self, role: Role) -> impl Iterator<Item = &SpecimenConfig> {
        self.specimens.iter().filter(move |s| s.role == role)
    }
}

/// Sets `a.b.0.c=value` inside a JSON document. `value` is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{assignment}` is not key=value")))?;
    if key.is_empty() {
        return Err(Error::invalid(format!("override `{assignment}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = doc;
    for (depth, part) in parts.iter().enumerate() {
        let last = depth + 1 == parts.len();
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.get_mut(*part)
                    .ok_or_else(|| Error::invalid(format!("override: unknown key `{key}`")))?
            }
            Value::Array(items) => {
                let i: usize = part
                    .parse()
                    .map_err(|_| Error::invalid(format!("override: `{part}` is not an index in `{key}`")))?;
                let len = items.len();
                let slot = items
                    .get_mut(i)
                    .ok_or_else(|| Error::invalid(format!("override: index {i} ≥ {len} in `{key}`")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::invalid(format!("override: `{key}` descends into a scalar"))),
        };
    }
    unreachable!("loop returns on the last key")
}

/// Stage bookkeeping stored as `manifest.json` in every stage directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    /// Hash of the configuration section the stage used.
    pub config: String,
    /// Consumed manifests (relative to the output root) and their digests.
    pub inputs: BTreeMap<String, String>,
    /// Output file names and their SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub digest: String,
}

impl Manifest {
    fn new(stage: &str, config: String, inputs: BTreeMap<String, String>, outputs: BTreeMap<String, String>) -> Self {
        let mut h = String::new();
        h.push_str(stage);
        h.push('\n');
        h.push_str(&config);
        for (k, v) in inputs.iter().chain(&outputs) {
            h.push_str(&format!("\n{k}={v}"));
        }
        Manifest {
            stage: stage.to_string(),
            config,
            inputs,
            outputs,
            digest: io::sha256_hex(h.as_bytes()),
        }
    }
}

/// What a stage did, printed by the command-line tool.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub stage: &'static str,
    pub artifacts: usize,
    pub summary: BTreeMap<String, Value>,
}

impl StageReport {
    fn new(stage: &'static str, artifacts: usize) -> Self {
        StageReport {
            stage,
            artifacts,
            summary: BTreeMap::new(),
        }
    }

    fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.summary
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }
}

/// Predicted scores and the hard top-`k` selection used downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub n: usize,
    pub k: usize,
    pub scores: Vec<f64>,
    pub mask: Vec<u8>,
    /// Entries the soft-rank threshold of the training pipeline selects.
    pub soft_selected: usize,
}

fn hash_json<T: Serialize>(v: &T) -> String {
    io::sha256_hex(&serde_json::to_vec(v).unwrap_or_default())
}

/// Owns the paths below one output directory.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

const SIMULATE: &str = "simulate";
const PDI: &str = "pdi";
const LABEL: &str = "label";
const TRAIN: &str = "train";
const PREDICT: &str = "predict";
const RECONSTRUCT: &str = "reconstruct";
const EVALUATE: &str = "evaluate";

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn specimen_dir(&self, name: &str) -> PathBuf {
        self.root.join("specimens").join(name)
    }

    pub fn stage_dir(&self, specimen: Option<&str>, stage: &str) -> PathBuf {
        let dir = match stage {
            SIMULATE => "projections",
            s => s,
        };
        match specimen {
            Some(name) => self.specimen_dir(name).join(dir),
            None => self.root.join(if stage == TRAIN { "model" } else { dir }),
        }
    }

    fn manifest_key(&self, specimen: Option<&str>, stage: &str) -> String {
        let dir = self.stage_dir(specimen, stage);
        let rel = dir.strip_prefix(&self.root).unwrap_or(&dir);
        let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        format!("{}/manifest.json", parts.join("/"))
    }

    pub fn projection_sidecar(&self, specimen: &str, index: usize) -> PathBuf {
        self.stage_dir(Some(specimen), SIMULATE).join(format!("{index:04}.json"))
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.stage_dir(None, EVALUATE).join("metrics.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.stage_dir(None, TRAIN).join("checkpoint.bin")
    }

    fn write_manifest(&self, specimen: Option<&str>, m: &Manifest) -> Result<String> {
        io::write_json(&self.root.join(self.manifest_key(specimen, &m.stage)), m)?;
        Ok(m.digest.clone())
    }
}

fn producer(stage: &str) -> &'static str {
    match stage {
        SIMULATE => SIMULATE,
        PDI => PDI,
        LABEL => LABEL,
        TRAIN => TRAIN,
        PREDICT => PREDICT,
        RECONSTRUCT => RECONSTRUCT,
        _ => EVALUATE,
    }
}

/// Stage configuration hashes; each covers only its own section, upstream
/// changes are caught through the input chain.
fn stage_config_hash(cfg: &RunConfig, stage: &str, specimen: Option<&SpecimenConfig>) -> String {
    let v = match stage {
        SIMULATE => serde_json::json!({
            "geometry": cfg.geometry,
            "n_positions": cfg.n_positions,
            "noise": cfg.noise,
            "seed": cfg.noise.map(|_| cfg.seed),
            "specimen": specimen,
        }),
        PDI => serde_json::json!(cfg.detectability),
        LABEL => serde_json::json!({ "k": cfg.k, "delta_min": cfg.delta_min }),
        TRAIN => serde_json::json!({ "train": cfg.train_config() }),
        PREDICT => serde_json::json!({ "k": cfg.k }),
        RECONSTRUCT => serde_json::json!(cfg.reconstruction),
        _ => serde_json::json!(cfg.evaluation),
    };
    hash_json(&v)
}

struct Driver<'a> {
    cfg: &'a RunConfig,
    ws: Workspace,
}

impl<'a> Driver<'a> {
    fn new(cfg: &'a RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Driver {
            cfg,
            ws: Workspace::new(cfg.output_dir.clone()),
        })
    }

    fn specimen(&self, name: &str) -> Option<&'a SpecimenConfig> {
        self.cfg.specimens.iter().find(|s| s.name == name)
    }

    /// Loads an upstream manifest after checking it, and recursively its
    /// inputs, against the current configuration.
    fn require(&self, consumer: &'static str, specimen: Option<&str>, stage: &'static str) -> Result<Manifest> {
        let key = self.ws.manifest_key(specimen, stage);
        self.require_key(consumer, &key)
    }

    fn require_key(&self, consumer: &'static str, key: &str) -> Result<Manifest> {
        let path = self.ws.root.join(key);
        let m: Manifest = match io::read_json(&path) {
            Ok(m) => m,
            Err(Error::Io { .. }) => {
                let stage = stage_from_key(key);
                return Err(Error::MissingStage {
                    stage: consumer,
                    producer: producer(stage),
                    path,
                });
            }
            Err(e) => return Err(e),
        };
        let specimen = specimen_from_key(key).and_then(|n| self.specimen(n));
        if specimen_from_key(key).is_some() && specimen.is_none() {
            return Err(Error::Stale {
                path,
                reason: "specimen no longer in the configuration".into(),
            });
        }
        if m.config != stage_config_hash(self.cfg, &m.stage, specimen) {
            return Err(Error::Stale {
                path,
                reason: format!(
                    "produced with a different configuration; rerun `{}`",
                    producer(&m.stage)
                ),
            });
        }
        for (dep, digest) in &m.inputs {
            let upstream = self.require_key(consumer, dep)?;
            if &upstream.digest != digest {
                return Err(Error::Stale {
                    path,
                    reason: format!("input {dep} changed since this stage ran; rerun `{}`", producer(&m.stage)),
                });
            }
        }
        Ok(m)
    }

    fn input_entry(&self, m: &Manifest, specimen: Option<&str>) -> (String, String) {
        (self.ws.manifest_key(specimen, &m.stage), m.digest.clone())
    }

    fn positions(&self) -> Result<Vec<ScanPosition>> {
        fibonacci_sphere(self.cfg.n_positions)
    }

    fn load_projections(&self, consumer: &'static str, name: &str) -> Result<Vec<ProjectionImage>> {
        let m = self.require(consumer, Some(name), SIMULATE)?;
        let dir = self.ws.stage_dir(Some(name), SIMULATE);
        (0..self.cfg.n_positions)
            .map(|i| {
                let side = self.ws.projection_sidecar(name, i);
                let (img, meta) = io::load_projection(&side)?;
                let file = format!("{i:04}.raw");
                if m.outputs.get(&file) != Some(&meta.sha256) {
                    return Err(Error::Stale {
                        path: dir.join(file),
                        reason: "projection differs from the one recorded by `simulate`".into(),
                    });
                }
                Ok(img)
            })
            .collect()
    }

    fn load_label(&self, consumer: &'static str, name: &str) -> Result<SelectionMask> {
        let m = self.require(consumer, Some(name), LABEL)?;
        let path = self.ws.stage_dir(Some(name), LABEL).join("label.json");
        let bytes = io::read_bytes(&path)?;
        check_output(&m, "label.json", &bytes, &path)?;
        io::load_label(&path)?.to_mask()
    }

    fn load_prediction(&self, name: &str) -> Result<SelectionMask> {
        let m = self.require(RECONSTRUCT, Some(name), PREDICT)?;
        let path = self.ws.stage_dir(Some(name), PREDICT).join("prediction.json");
        let bytes = io::read_bytes(&path)?;
        check_output(&m, "prediction.json", &bytes, &path)?;
        let p: PredictionFile = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e))?;
        SelectionMask::new(p.mask, p.k).map_err(|e| Error::format(&path, e))
    }

    fn load_model(&self) -> Result<Regressor> {
        let m = self.require(PREDICT, None, TRAIN)?;
        let path = self.ws.checkpoint();
        let bytes = io::read_bytes(&path)?;
        check_output(&m, "checkpoint.bin", &bytes, &path)?;
        let (r, _) = read_checkpoint(bytes.as_slice()).map_err(|e| Error::format(&path, e))?;
        Ok(r)
    }

    fn simulate(&self) -> Result<StageReport> {
        let positions = self.positions()?;
        io::write_json(&self.ws.root.join("config.json"), self.cfg)?;
        io::save_positions(&self.ws.root.join("positions.json"), &positions)?;
        let g = &self.cfg.geometry;
        for (si, sc) in self.cfg.specimens.iter().enumerate() {
            let specimen = sc.specimen()?;
            let hash = specimen.content_hash();
            io::write_json(&self.ws.specimen_dir(&sc.name).join("specimen.json"), &specimen)?;
            let dir = self.ws.stage_dir(Some(&sc.name), SIMULATE);
            clear_dir(&dir)?;
            let mut outputs = BTreeMap::new();
            for (i, pos) in positions.iter().enumerate() {
                let pose = pose_from_position(pos, g);
                let mut img = forward_project(&specimen, &pose, g);
                if let Some(noise) = &self.cfg.noise {
                    let seed = self.cfg.seed ^ ((si as u64) << 32 | i as u64);
                    apply_poisson_noise(&mut img, noise.photons, seed)?;
                }
                let sha = io::save_projection(&self.ws.projection_sidecar(&sc.name, i), &img, g, *pos, &hash)?;
                outputs.insert(format!("{i:04}.raw"), sha);
            }
            let m = Manifest::new(SIMULATE, stage_config_hash(self.cfg, SIMULATE, Some(sc)), BTreeMap::new(), outputs);
            self.ws.write_manifest(Some(&sc.name), &m)?;
        }
        Ok(StageReport::new(SIMULATE, self.cfg.specimens.len() * positions.len())
            .with("specimens", self.cfg.specimens.len())
            .with("positions", positions.len()))
    }

    fn pdi(&self) -> Result<StageReport> {
        let positions = self.positions()?;
        let poses: Vec<_> = positions.iter().map(|p| pose_from_position(p, &self.cfg.geometry)).collect();
        let d = &self.cfg.detectability;
        for sc in &self.cfg.specimens {
            let sim = self.require(PDI, Some(&sc.name), SIMULATE)?;
            let specimen = sc.specimen()?;
            let grid = GridSpec::centred_at([d.task_grid; 3], d.task_voxel_size, sc.defect_centre);
            let task = build_task(&grid, sc.defect_centre, d.roi_radius)?;
            let d2 = pdi_vector(&poses, &task, &d.mtf, &d.nps, &specimen)?;
            let csv = io::pdi_csv(&positions, &d2)?;
            let path = self.ws.stage_dir(Some(&sc.name), PDI).join("pdi.csv");
            io::write_bytes(&path, csv.as_bytes())?;
            let inputs = BTreeMap::from([self.input_entry(&sim, Some(&sc.name))]);
            let outputs = BTreeMap::from([("pdi.csv".to_string(), io::sha256_hex(csv.as_bytes()))]);
            let m = Manifest::new(PDI, stage_config_hash(self.cfg, PDI, Some(sc)), inputs, outputs);
            self.ws.write_manifest(Some(&sc.name), &m)?;
        }
        Ok(StageReport::new(PDI, self.cfg.specimens.len()))
    }

    fn label(&self) -> Result<StageReport> {
        let delta = self.cfg.delta_min.resolve(self.cfg.k)?;
        let mut objectives = BTreeMap::new();
        for sc in &self.cfg.specimens {
            let pm = self.require(LABEL, Some(&sc.name), PDI)?;
            let path = self.ws.stage_dir(Some(&sc.name), PDI).join("pdi.csv");
            check_output(&pm, "pdi.csv", &io::read_bytes(&path)?, &path)?;
            let (positions, d2) = io::load_pdi(&path)?;
            let problem = LabelProblem::new(d2, positions, self.cfg.k, delta)?;
            let mask = select_greedy(&problem)?;
            objectives.insert(sc.name.clone(), problem.objective(&mask));
            let out = self.ws.stage_dir(Some(&sc.name), LABEL).join("label.json");
            io::save_label(&out, &LabelFile::new(&mask, delta))?;
            let inputs = BTreeMap::from([self.input_entry(&pm, Some(&sc.name))]);
            let outputs = BTreeMap::from([("label.json".to_string(), io::sha256_hex(&io::read_bytes(&out)?))]);
            let m = Manifest::new(LABEL, stage_config_hash(self.cfg, LABEL, Some(sc)), inputs, outputs);
            self.ws.write_manifest(Some(&sc.name), &m)?;
        }
        Ok(StageReport::new(LABEL, self.cfg.specimens.len())
            .with("delta_min", delta)
            .with("objective", objectives))
    }

    fn train(&self) -> Result<StageReport> {
        let tc = self.cfg.train_config();
        let mut dataset = Vec::new();
        let mut inputs = BTreeMap::new();
        let mut names = Vec::new();
        for sc in self.cfg.specimens_with(Role::Train) {
            let lm = self.require(TRAIN, Some(&sc.name), LABEL)?;
            let sm = self.require(TRAIN, Some(&sc.name), SIMULATE)?;
            inputs.extend([self.input_entry(&lm, Some(&sc.name)), self.input_entry(&sm, Some(&sc.name))]);
            let scan = self.load_projections(TRAIN, &sc.name)?;
            let x = scan.iter().map(downsample).collect::<Result<Vec<_>>>()?;
            dataset.push((x, self.load_label(TRAIN, &sc.name)?));
            names.push(sc.name.clone());
        }
        if dataset.is_empty() {
            return Err(Error::invalid("no specimen has role `train`"));
        }
        let outcome = train_prepared(&dataset, &tc)?;

        let header = CheckpointHeader {
            architecture: architecture_name(),
            seed: tc.seed,
            config: tc,
        };
        let mut blob = Vec::new();
        write_checkpoint(&outcome.regressor, &header, &mut blob).map_err(|e| Error::io(self.ws.checkpoint(), e))?;
        io::write_bytes(&self.ws.checkpoint(), &blob)?;

        let mut csv = String::from("epoch,specimen,loss,selected\n");
        for (e, (losses, counts)) in outcome.history.iter().zip(&outcome.selected).enumerate() {
            for ((l, c), name) in losses.iter().zip(counts).zip(&names) {
                csv.push_str(&format!("{e},{name},{l},{c}\n"));
            }
        }
        let hist = self.ws.stage_dir(None, TRAIN).join("history.csv");
        io::write_bytes(&hist, csv.as_bytes())?;

        let outputs = BTreeMap::from([
            ("checkpoint.bin".to_string(), io::sha256_hex(&blob)),
            ("history.csv".to_string(), io::sha256_hex(csv.as_bytes())),
        ]);
        let m = Manifest::new(TRAIN, stage_config_hash(self.cfg, TRAIN, None), inputs, outputs);
        self.ws.write_manifest(None, &m)?;
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        Ok(StageReport::new(TRAIN, 2)
            .with("initial_loss", mean(&outcome.history[0]))
            .with("final_loss", mean(outcome.history.last().expect("epochs ≥ 1"))))
    }

    fn predict(&self) -> Result<StageReport> {
        let model = self.load_model()?;
        let tm = self.require(PREDICT, None, TRAIN)?;
        let tc = self.cfg.train_config();
        let mut overlap = BTreeMap::new();
        for sc in &self.cfg.specimens {
            let sm = self.require(PREDICT, Some(&sc.name), SIMULATE)?;
            let scan = self.load_projections(PREDICT, &sc.name)?;
            let out = crate::model::forward_pipeline(&model, &scan, &tc)?;
            let mask = predicted_mask(&out.scores, self.cfg.k)?;
            let file = PredictionFile {
                n: scan.len(),
                k: self.cfg.k,
                scores: out.scores.as_slice().to_vec(),
                mask: mask.values().to_vec(),
                soft_selected: out.mask.count(),
            };
            if let Ok(label) = io::load_label(&self.ws.stage_dir(Some(&sc.name), LABEL).join("label.json")) {
                let shared = label.mask.iter().zip(mask.values()).filter(|(a, b)| **a == 1 && **b == 1).count();
                overlap.insert(sc.name.clone(), shared);
            }
            let path = self.ws.stage_dir(Some(&sc.name), PREDICT).join("prediction.json");
            io::write_json(&path, &file)?;
            let inputs = BTreeMap::from([self.input_entry(&tm, None), self.input_entry(&sm, Some(&sc.name))]);
            let outputs = BTreeMap::from([("prediction.json".to_string(), io::sha256_hex(&io::read_bytes(&path)?))]);
            let m = Manifest::new(PREDICT, stage_config_hash(self.cfg, PREDICT, Some(sc)), inputs, outputs);
            self.ws.write_manifest(Some(&sc.name), &m)?;
        }
        Ok(StageReport::new(PREDICT, self.cfg.specimens.len()).with("label_overlap", overlap))
    }

    fn reconstruct(&self) -> Result<StageReport> {
        let rc = &self.cfg.reconstruction;
        let mut count = 0;
        for sc in self.cfg.specimens_with(Role::Test) {
            let sm = self.require(RECONSTRUCT, Some(&sc.name), SIMULATE)?;
            let lm = self.require(RECONSTRUCT, Some(&sc.name), LABEL)?;
            let pm = self.require(RECONSTRUCT, Some(&sc.name), PREDICT)?;
            let scan = self.load_projections(RECONSTRUCT, &sc.name)?;
            let label = self.load_label(RECONSTRUCT, &sc.name)?;
            let pred = self.load_prediction(&sc.name)?;
            let dir = self.ws.stage_dir(Some(&sc.name), RECONSTRUCT);
            let mut outputs = BTreeMap::new();
            let all = SelectionMask::new(vec![1; scan.len()], scan.len())?;
            for (method, mask) in [("reference", &all), ("label", &label), ("prediction", &pred)] {
                let subset: Vec<ProjectionImage> = mask.indices().into_iter().map(|i| scan[i].clone()).collect();
                let vol = art_reconstruct(&subset, &self.cfg.geometry, &rc.grid, &rc.art)?;
                let sha = io::save_volume(&dir.join(format!("{method}.json")), &vol)?;
                outputs.insert(format!("{method}.raw"), sha);
            }
            let inputs = BTreeMap::from([
                self.input_entry(&sm, Some(&sc.name)),
                self.input_entry(&lm, Some(&sc.name)),
                self.input_entry(&pm, Some(&sc.name)),
            ]);
            let m = Manifest::new(RECONSTRUCT, stage_config_hash(self.cfg, RECONSTRUCT, Some(sc)), inputs, outputs);
            self.ws.write_manifest(Some(&sc.name), &m)?;
            count += 3;
        }
        if count == 0 {
            return Err(Error::invalid("no specimen has role `test`"));
        }
        Ok(StageReport::new(RECONSTRUCT, count))
    }

    fn evaluate(&self) -> Result<StageReport> {
        let mut rows = Vec::new();
        let mut inputs = BTreeMap::new();
        let ev = &self.cfg.evaluation;
        for sc in self.cfg.specimens_with(Role::Test) {
            let rm = self.require(EVALUATE, Some(&sc.name), RECONSTRUCT)?;
            inputs.insert(self.ws.manifest_key(Some(&sc.name), RECONSTRUCT), rm.digest.clone());
            let dir = self.ws.stage_dir(Some(&sc.name), RECONSTRUCT);
            let mut vols = BTreeMap::new();
            for method in ["reference", "label", "prediction"] {
                let side = dir.join(format!("{method}.json"));
                let v = io::load_volume(&side)?;
                let file = format!("{method}.raw");
                let sha = io::sha256_hex(&io::encode_f32(&v.data));
                if rm.outputs.get(&file) != Some(&sha) {
                    return Err(Error::Stale {
                        path: dir.join(file),
                        reason: "volume differs from the one recorded by `reconstruct`".into(),
                    });
                }
                vols.insert(method, v);
            }
            let roi = RoiSpec::new(sc.defect_centre, ev.roi_radius)?;
            let reference = &vols["reference"];
            for (method, tag) in [("label", "label"), ("prediction", "prediction")] {
                rows.push(MetricsRow {
                    specimen: sc.name.clone(),
                    method: tag.to_string(),
                    rmse: rmse(&vols[method], reference, &roi)?,
                    ssim: ssim(&vols[method], reference, &roi)?,
                });
            }
            let grid = reference.grid;
            let kc = ((sc.defect_centre.z - grid.origin.z) / grid.voxel_size - 0.5).round() as i64;
            let slices_dir = self.ws.stage_dir(Some(&sc.name), EVALUATE);
            clear_dir(&slices_dir)?;
            for (method, v) in &vols {
                let nv = normalize(v, Some(&roi))?;
                for off in ev.slice_offsets {
                    let k = (kc + off).clamp(0, grid.dims[2] as i64 - 1) as usize;
                    io::save_slice_pgm(&slices_dir.join(format!("{method}_z{k:03}.pgm")), &nv, k)?;
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::invalid("no specimen has role `test`"));
        }
        let path = self.ws.metrics_csv();
        io::save_metrics(&path, &rows)?;
        let outputs = BTreeMap::from([("metrics.csv".to_string(), io::sha256_hex(&io::read_bytes(&path)?))]);
        let m = Manifest::new(EVALUATE, stage_config_hash(self.cfg, EVALUATE, None), inputs, outputs);
        self.ws.write_manifest(None, &m)?;
        Ok(StageReport::new(EVALUATE, rows.len()).with("metrics", rows))
    }
}

fn stage_from_key(key: &str) -> &str {
    let mut parts = key.rsplit('/').skip(1);
    match parts.next().unwrap_or("") {
        "projections" => SIMULATE,
        "model" => TRAIN,
        s => s,
    }
}

fn specimen_from_key(key: &str) -> Option<&str> {
    let mut parts = key.split('/');
    (parts.next() == Some("specimens")).then(|| parts.next()).flatten()
}

fn check_output(m: &Manifest, file: &str, bytes: &[u8], path: &Path) -> Result<()> {
    if m.outputs.get(file).map(String::as_str) != Some(io::sha256_hex(bytes).as_str()) {
        return Err(Error::Stale {
            path: path.to_path_buf(),
            reason: format!("file differs from the one recorded by `{}`", producer(&m.stage)),
        });
    }
    Ok(())
}

fn clear_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Inference-time selection: the hard top-`k` of the scores, i.e. the
/// `eps → 0` limit of the training pipeline's threshold.
pub fn predicted_mask(scores: &ScoreVector, k: usize) -> Result<SelectionMask> {
    threshold_topk(&hard_rank(scores), k)
}

/// One pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Simulate,
    Pdi,
    Label,
    Train,
    Predict,
    Reconstruct,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Simulate,
        Stage::Pdi,
        Stage::Label,
        Stage::Train,
        Stage::Predict,
        Stage::Reconstruct,
        Stage::Evaluate,
    ];
}

pub fn run_stage(cfg: &RunConfig, stage: Stage) -> Result<StageReport> {
    let d = Driver::new(cfg)?;
    match stage {
        Stage::Simulate => d.simulate(),
        Stage::Pdi => d.pdi(),
        Stage::Label => d.label(),
        Stage::Train => d.train(),
        Stage::Predict => d.predict(),
        Stage::Reconstruct => d.reconstruct(),
        Stage::Evaluate => d.evaluate(),
    }
}

/// Runs every stage in order.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<StageReport>> {
    Stage::ALL.iter().map(|&s| run_stage(cfg, s)).collect()
}
