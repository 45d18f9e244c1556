use std::collections::BTreeMap;
use std::path::Path;

use projsel::error::Error;
use projsel::geometry::Vec3;
use projsel::io::{load_label, load_metrics};
use projsel::phantom::GridSpec;
use projsel::pipeline::{run_all, run_stage, DeltaMin, Role, RunConfig, SpecimenConfig, Stage, Workspace};

fn small_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::desk_scale();
    cfg.output_dir = dir.to_path_buf();
    cfg.n_positions = 12;
    cfg.k = 3;
    cfg.geometry.detector_pixels = (32, 32);
    cfg.geometry.pixel_pitch = (0.0047, 0.0047);
    cfg.train.epochs = 4;
    cfg.reconstruction.grid = GridSpec::centred([24, 24, 24], 0.001);
    let base = cfg.specimens[0].clone();
    cfg.specimens = vec![
        SpecimenConfig { name: "a".into(), defect_centre: Vec3::new(0.002, 0.0, 0.0), role: Role::Train, ..base.clone() },
        SpecimenConfig { name: "b".into(), defect_centre: Vec3::new(0.0, 0.003, 0.001), role: Role::Train, ..base.clone() },
        SpecimenConfig { name: "c".into(), defect_centre: Vec3::new(-0.001, 0.0, 0.002), role: Role::Test, ..base },
    ];
    cfg
}

/// Every file below `root` except the recorded configuration, which
/// contains the output path.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let key = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                if key != "config.json" {
                    out.insert(key, std::fs::read(&path).unwrap());
                }
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn runs_are_reproducible_and_idempotent() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let reports = run_all(&small_config(a.path())).unwrap();
    assert_eq!(reports.len(), Stage::ALL.len());
    let first = snapshot(a.path());
    assert!(first.contains_key("evaluate/metrics.csv"));
    assert!(first.contains_key("model/checkpoint.bin"));
    run_all(&small_config(a.path())).unwrap();
    assert_eq!(snapshot(a.path()), first);
    run_all(&small_config(b.path())).unwrap();
    assert_eq!(snapshot(b.path()), first);

    let rows = load_metrics(&Workspace::new(a.path()).metrics_csv()).unwrap();
    let methods: Vec<_> = rows.iter().map(|r| (r.specimen.as_str(), r.method.as_str())).collect();
    assert_eq!(methods, vec![("c", "label"), ("c", "prediction")]);
}

#[test]
fn stages_require_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for stage in [Stage::Pdi, Stage::Label, Stage::Train, Stage::Predict, Stage::Reconstruct, Stage::Evaluate] {
        let err = run_stage(&cfg, stage).unwrap_err();
        assert!(matches!(err, Error::MissingStage { .. }), "{stage:?}: {err}");
        assert_eq!(err.kind(), "missing_stage");
    }
}

#[test]
fn configuration_changes_make_downstream_stale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    for stage in [Stage::Simulate, Stage::Pdi, Stage::Label] {
        run_stage(&cfg, stage).unwrap();
    }
    let changed = RunConfig { k: 4, ..cfg.clone() };
    assert!(matches!(run_stage(&changed, Stage::Train), Err(Error::Stale { .. })));
    let moved = RunConfig { n_positions: 10, ..cfg.clone() };
    assert!(run_stage(&moved, Stage::Label).is_err());

    run_stage(&cfg, Stage::Train).unwrap();
    let mut retrained = cfg.clone();
    retrained.train.learning_rate = 5e-4;
    assert!(matches!(run_stage(&retrained, Stage::Predict), Err(Error::Stale { .. })));

    // tampering with a recorded artefact is caught too
    let label = Workspace::new(dir.path()).stage_dir(Some("a"), "label").join("label.json");
    let text = std::fs::read_to_string(&label).unwrap();
    std::fs::write(&label, text.replace("1", "0")).unwrap();
    assert!(run_stage(&cfg, Stage::Train).is_err());
}

#[test]
fn selecting_everything_labels_every_position_and_ties_the_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.n_positions = 6;
    cfg.k = 6;
    cfg.delta_min = DeltaMin::Radians(0.0);
    run_all(&cfg).unwrap();
    for name in ["a", "b", "c"] {
        let path = Workspace::new(dir.path()).stage_dir(Some(name), "label").join("label.json");
        let mask = load_label(&path).unwrap().to_mask().unwrap();
        assert!(mask.values().iter().all(|&v| v == 1));
    }
    // prediction and label are both the full set
    let rows = load_metrics(&Workspace::new(dir.path()).metrics_csv()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].rmse, rows[0].ssim), (rows[1].rmse, rows[1].ssim));
    assert_eq!(rows[0].rmse, 0.0);
}

#[test]
fn invalid_configurations_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_config(dir.path());
    let mut no_test = base.clone();
    no_test.specimens.retain(|s| s.role == Role::Train);
    let too_many = RunConfig { k: 13, ..base.clone() };
    let mut dup = base.clone();
    dup.specimens[1].name = "a".into();
    for cfg in [no_test, too_many, dup] {
        assert!(run_all(&cfg).is_err());
    }
    let text = serde_json::to_string(&base).unwrap();
    assert!(RunConfig::from_json(&text, &["train.epochs=0".into()]).is_err());
    assert!(RunConfig::from_json(&text, &["no_such_key=1".into()]).is_err());
    let cfg = RunConfig::from_json(&text, &["k=2".into(), "train.lr_decay=false".into()]).unwrap();
    assert_eq!((cfg.k, cfg.train.lr_decay), (2, false));
}
