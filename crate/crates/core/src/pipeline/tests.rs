use super::*;
use crate::phantom::TrochleaPhantomSpec;

fn oracle_config(out: &Path) -> PipelineConfig {
    let text = r#"
out_dir = "run"
seed = 7
[input.phantom]
dims = [96, 96, 96]
spacing = 0.5
spec = { condyle_half_width = 12.0, groove_depth = 3.0, condyle_height = 12.0, bone_extent = [32.0, 18.0, 30.0], patella_radius = 4.0, patella_gap = 7.0 }
healthy = [8.0, 5.0]
[fusion]
enabled = false
[inpaint]
denoiser = "oracle"
schedule = { steps = 10 }
mask = { offset_mm = 10.0 }
"#;
    PipelineConfig::parse(text, out, &[]).unwrap()
}

#[test]
fn stage_seeds_are_named_and_stable() {
    assert_eq!(stage_seed(1, "fuse"), stage_seed(1, "fuse"));
    assert_ne!(stage_seed(1, "fuse"), stage_seed(1, "inpaint"));
    assert_ne!(stage_seed(1, "fuse"), stage_seed(2, "fuse"));
}

#[test]
fn oracle_run_restores_the_healthy_groove_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = oracle_config(dir.path());
    let m = run_pipeline(&cfg, RunOptions::default()).unwrap();
    assert!(m.is_complete());
    let names: Vec<&str> = m.stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, ["acquire", "fuse", "mask", "inpaint", "mesh", "diffmap", "measure"]);
    assert_eq!(m.stage("fuse").unwrap().status, StageStatus::Skipped);
    let meas = m.measurements.as_ref().unwrap();
    let healthy = TrochleaPhantomSpec {
        condyle_half_width: 8.0,
        groove_depth: 5.0,
        ..Default::default()
    };
    let sa = meas.after.sulcus_angle.unwrap();
    assert!((sa - healthy.analytic_sulcus_angle().unwrap()).abs() < 2.0, "{sa}");
    assert!((meas.after.groove_depth.unwrap() - 5.0).abs() < 0.5);
    assert!(meas.before.sulcus_angle.unwrap() > sa);
    assert!(meas.distance.max > 0.0);

    // Everything is reused on an identical rerun.
    let again = run_pipeline(&cfg, RunOptions::default()).unwrap();
    assert_eq!(again.outputs_digest, m.outputs_digest);
    assert!(again
        .stages
        .iter()
        .all(|s| matches!(s.status, StageStatus::Reused | StageStatus::Skipped)));

    // Deleting one output recomputes only that stage, bit for bit.
    std::fs::remove_file(cfg.out_dir.join("inpainted.gvol")).unwrap();
    let third = run_pipeline(&cfg, RunOptions::default()).unwrap();
    assert_eq!(third.stage("inpaint").unwrap().status, StageStatus::Done);
    assert_eq!(third.stage("mesh").unwrap().status, StageStatus::Reused);
    assert_eq!(third.stage("inpaint").unwrap().outputs, m.stage("inpaint").unwrap().outputs);
    assert_eq!(third.outputs_digest, m.outputs_digest);

    let loaded = RunManifest::load(&cfg.out_dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded, third);

    // A changed parameter invalidates the stage and its dependants.
    let mut other = cfg.clone();
    other.inpaint.mask.offset_mm = 12.0;
    let fourth = run_pipeline(&other, RunOptions::default()).unwrap();
    assert_eq!(fourth.stage("acquire").unwrap().status, StageStatus::Reused);
    assert_eq!(fourth.stage("mask").unwrap().status, StageStatus::Done);
    assert_eq!(fourth.stage("inpaint").unwrap().status, StageStatus::Done);
}

#[test]
fn separate_runs_hash_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = run_pipeline(&oracle_config(a.path()), RunOptions::default()).unwrap();
    let mb = run_pipeline(&oracle_config(b.path()), RunOptions { force: true }).unwrap();
    assert_eq!(ma.outputs_digest, mb.outputs_digest);
    let hashes = |m: &RunManifest| m.stages.iter().map(|s| s.outputs.clone()).collect::<Vec<_>>();
    assert_eq!(hashes(&ma), hashes(&mb));
    let mut seeded = oracle_config(b.path());
    seeded.seed = 8;
    let mc = run_pipeline(&seeded, RunOptions::default()).unwrap();
    assert_ne!(mc.stage("acquire").unwrap().outputs, ma.stage("acquire").unwrap().outputs);
}

#[test]
fn a_failing_stage_leaves_a_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    // Odd dims pass the mask stage but cannot be wavelet transformed.
    let grid = Grid::new([9, 8, 8], [1.0; 3], [0.0; 3]).unwrap();
    let mut labels = LabelVolume::background(grid);
    labels.set(4, 4, 4, crate::volume::Label::Patella);
    let lp = dir.path().join("l.gvol");
    crate::volume::write_labels(&labels, &lp).unwrap();
    let text = "out_dir = \"run\"\n[input]\nlabels = \"l.gvol\"\n[inpaint]\ndenoiser = \"oracle\"\noracle_labels = \"l.gvol\"\n";
    let cfg = PipelineConfig::parse(text, dir.path(), &[]).unwrap();
    let e = run_pipeline(&cfg, RunOptions::default()).unwrap_err();
    assert_eq!(e.exit_code(), 3);
    assert!(matches!(&e, PipelineError::Stage { stage, .. } if stage == "inpaint"), "{e}");
    let m = RunManifest::load(&cfg.out_dir.join(MANIFEST_FILE)).unwrap();
    assert!(!m.is_complete());
    assert_eq!(m.failure.as_ref().unwrap().stage, "inpaint");
    assert_eq!(m.stage("mask").unwrap().status, StageStatus::Done);
    assert_eq!(m.stage("inpaint").unwrap().status, StageStatus::Failed);
    assert!(m.stage("mesh").is_none());
}

#[test]
fn invalid_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::parse("out_dir = \"o\"\n[input]\nlabels = \"missing.gvol\"\n", dir.path(), &[]).unwrap();
    let e = run_pipeline(&cfg, RunOptions::default()).unwrap_err();
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("input.labels"));
    assert!(!cfg.out_dir.exists());
}

#[test]
fn fusion_grid_covers_the_scans() {
    let g = Grid::new([8, 8, 2], [1.0, 1.0, 4.0], [0.0, 0.0, 1.5]).unwrap();
    let v = Volume::filled(g, 0.0);
    let f = fusion_grid(&[v], None).unwrap();
    assert_eq!(f.dims(), [8, 8, 8]);
    assert_eq!(f.origin(), [0.0; 3]);
    assert_eq!(f.spacing(), [1.0; 3]);
}
