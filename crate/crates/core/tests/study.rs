//! Cross-module flows through files on disk, using only the public API.

use grooveforge_core::diffusion::{build_mask, inpaint, train_wdm, MaskConfig, MaskShape, TrainingExample, WdmConfig, WdmModel};
use grooveforge_core::mesh::{label_mesh, read_mesh, signed_surface_distance, write_mesh};
use grooveforge_core::morphometrics::{measure_sulcus, SulcusConfig};
use grooveforge_core::phantom::{phantom_labels, toy_grid, toy_variants, TrochleaPhantomSpec};
use grooveforge_core::volume::{read_labels, write_labels, Grid, Label};

fn groove(w: f64, d: f64) -> TrochleaPhantomSpec {
    TrochleaPhantomSpec {
        condyle_half_width: w,
        groove_depth: d,
        condyle_height: 14.0,
        bone_extent: [36.0, 20.0, 30.0],
        patella_radius: 5.0,
        patella_gap: 9.0,
        noise_sigma: 0.0,
        ..Default::default()
    }
}

#[test]
fn deeper_groove_shows_up_in_mesh_distances_and_measurements() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::new([96, 96, 96], [0.5; 3], [0.0; 3]).unwrap();
    let shallow = phantom_labels(&groove(10.0, 3.0), grid).unwrap();
    let deep = phantom_labels(&groove(10.0, 6.0), grid).unwrap();
    write_labels(&shallow, dir.path().join("shallow.gvol")).unwrap();
    write_labels(&deep, dir.path().join("deep.gvol")).unwrap();
    let shallow = read_labels(dir.path().join("shallow.gvol")).unwrap();
    let deep = read_labels(dir.path().join("deep.gvol")).unwrap();

    let cfg = SulcusConfig::default();
    let a = measure_sulcus(&shallow, &cfg).unwrap();
    let b = measure_sulcus(&deep, &cfg).unwrap();
    assert!(b.sulcus_angle < a.sulcus_angle);
    assert!((b.groove_depth - a.groove_depth - 3.0).abs() < 0.5, "{} {}", a.groove_depth, b.groove_depth);

    let (pa, pb) = (dir.path().join("a.stl"), dir.path().join("b.ply"));
    write_mesh(&pa, &label_mesh(&shallow, Label::Femur).unwrap(), None).unwrap();
    write_mesh(&pb, &label_mesh(&deep, Label::Femur).unwrap(), None).unwrap();
    let map = signed_surface_distance(&read_mesh(&pb).unwrap(), &read_mesh(&pa).unwrap()).unwrap();
    // Only the groove moved, by at most the 3 mm change in depth.
    assert!(map.stats.max > 2.0 && map.stats.max < 3.5, "{:?}", map.stats);
    assert!(map.stats.p95 < map.stats.max);
    let inward = map.values.iter().filter(|v| **v < -1.0).count();
    let outward = map.values.iter().filter(|v| **v > 1.0).count();
    assert!(inward > 10 * outward.max(1), "{inward} {outward}");
}

#[test]
fn a_saved_checkpoint_inpaints_like_the_trained_model() {
    let dir = tempfile::tempdir().unwrap();
    let mask = MaskConfig {
        offset_mm: 3.0,
        shape: MaskShape::Box,
    };
    let labels: Vec<_> = toy_variants(4, 3).iter().map(|s| phantom_labels(s, toy_grid()).unwrap()).collect();
    let examples: Vec<_> = labels.iter().map(|l| TrainingExample::new(l, &mask).unwrap()).collect();
    let cfg = WdmConfig {
        width: 4,
        time_dim: 8,
        iterations: 4,
        mask,
        ..Default::default()
    };
    let mut losses = Vec::new();
    let model = train_wdm(&examples, cfg, |r| losses.push(r.loss)).unwrap();
    assert_eq!(losses.len(), 4);
    let path = dir.path().join("m.gwdm");
    model.save(&path).unwrap();
    let loaded = WdmModel::load(&path).unwrap();
    assert_eq!(loaded, model);

    let m = build_mask(&labels[0], &mask).unwrap();
    let s = model.schedule().unwrap();
    let x = inpaint(&model.denoiser, &labels[0], &m, &s, 9).unwrap();
    let y = inpaint(&loaded.denoiser, &labels[0], &m, &s, 9).unwrap();
    assert_eq!(x, y);
    let outside_same = (0..toy_grid().len())
        .filter(|&v| !m.inside[v])
        .all(|v| x.labels.labels()[v] == labels[0].labels()[v]);
    assert!(outside_same);
}
