use super::*;
use crate::phantom::{phantom_labels, PhantomLayout, TrochleaPhantomSpec};
use proptest::prelude::{any, proptest, prop_assert, prop_assert_eq};

fn default_schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

#[test]
fn single_step_schedule() {
    let s = NoiseSchedule::linear(1, 0.01, 0.02).unwrap();
    assert_eq!(s.alpha_bar(1), 1.0 - 0.01);
    assert_eq!(s.posterior_variance(1), 0.0);
}

#[test]
fn default_schedule_vanishes() {
    let s = default_schedule();
    let mut log_sum = 0.0f64;
    for i in 0..1000 {
        let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
        log_sum += (1.0 - beta).ln();
    }
    let expected = log_sum.exp();
    assert!((s.alpha_bar(1000) / expected - 1.0).abs() < 1e-10);
    assert!((3.9e-5..4.1e-5).contains(&s.alpha_bar(1000)), "{}", s.alpha_bar(1000));
    assert_eq!(s.posterior_variance(1), 0.0);
}

#[test]
fn bad_schedules_are_rejected() {
    assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
    assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
    assert!(NoiseSchedule::linear(10, 0.01, 1.0).is_err());
    assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
}

fn check_invariants(s: &NoiseSchedule) {
    let n = s.steps();
    for t in 1..=n {
        assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        if t > 1 {
            assert!(s.beta(t) > s.beta(t - 1));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.posterior_variance(t) >= 0.0);
        assert!((s.alpha_bar(t) - s.alpha_bar(t - 1) * s.alpha(t)).abs() < 1e-10);
        let (c0, ct) = s.posterior_coefficients(t);
        let x0 = 0.73;
        let mean = c0 * x0 + ct * s.alpha_bar(t).sqrt() * x0;
        assert!((mean - s.alpha_bar(t - 1).sqrt() * x0).abs() < 1e-10, "t={t}");
    }
    assert!(s.alpha_bar(n) < s.alpha_bar(1) && s.alpha_bar(1) < 1.0);
}

#[test]
fn schedule_identities() {
    check_invariants(&default_schedule());
    let scaled = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
    assert_eq!(scaled.steps(), 100);
    check_invariants(&scaled);
    let reference = default_schedule().alpha_bar(1000);
    assert!((scaled.alpha_bar(100) / reference - 1.0).abs() < 1e-9);
    let plain = NoiseSchedule::from_config(&ScheduleConfig {
        preserve_terminal: false,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(plain, NoiseSchedule::linear(100, 1e-4, 0.02).unwrap());
}

#[test]
fn noiseless_forward() {
    let s = default_schedule();
    let x0 = [0.5f32, -1.0, 2.0];
    let xt = forward_noise(&x0, 400, &[0.0; 3], &s).unwrap();
    let a = s.alpha_bar(400).sqrt();
    for (x, y) in x0.iter().zip(&xt) {
        assert!((*y as f64 - a * *x as f64).abs() < 1e-6);
    }
    assert!(matches!(forward_noise(&x0, 0, &[0.0; 3], &s), Err(DiffusionError::StepOutOfRange { .. })));
    assert!(matches!(forward_noise(&x0, 1001, &[0.0; 3], &s), Err(DiffusionError::StepOutOfRange { .. })));
    let xt = forward_noise(&x0, 1000, &[0.0; 3], &s).unwrap();
    let ratio = (xt.iter().map(|v| v * v).sum::<f32>() / x0.iter().map(|v| v * v).sum::<f32>()).sqrt();
    assert!(ratio < 0.01);
}

/// Empirical moments of `x_t − √ᾱ_t·x₀` over 10⁵ elements.
pub(crate) fn forward_moments(s: &NoiseSchedule, t: usize, seed: u64) -> (f64, f64, f64) {
    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0: Vec<f32> = (0..n).map(|_| if rng.random_bool(0.3) { 1.0 } else { -1.0 }).collect();
    let eps: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let xt = forward_noise(&x0, t, &eps, s).unwrap();
    let a = s.alpha_bar(t).sqrt();
    let mean_x = xt.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let mean_expected = x0.iter().map(|&v| a * v as f64).sum::<f64>() / n as f64;
    let r: Vec<f64> = xt.iter().zip(&x0).map(|(&y, &x)| y as f64 - a * x as f64).collect();
    let rm = r.iter().sum::<f64>() / n as f64;
    let var = r.iter().map(|v| (v - rm).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean_x, mean_expected, var)
}

#[test]
fn forward_marginals_match() {
    let s = default_schedule();
    for t in [1, 500, 1000] {
        let (m, e, var) = forward_moments(&s, t, t as u64);
        let target = 1.0 - s.alpha_bar(t);
        assert!((var / target - 1.0).abs() < 0.02, "t={t}: {var} vs {target}");
        assert!((m - e).abs() < 0.02 * target.sqrt(), "t={t}");
    }
    let (_, _, var) = forward_moments(&default_schedule(), 1, 9);
    assert!((var / 1e-4 - 1.0).abs() < 0.02);
}

fn random_labels(seed: u64, dims: [usize; 3]) -> LabelVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap();
    LabelVolume::new(g, (0..g.len()).map(|_| rng.random_range(0..5u8)).collect()).unwrap()
}

proptest! {
    #[test]
    fn encode_decode_identity(seed in any::<u64>(), nx in 1usize..6, ny in 1usize..6, nz in 1usize..6) {
        let l = random_labels(seed, [nx, ny, nz]);
        let e = encode_labels(&l);
        prop_assert!(e.data.iter().all(|v| *v == 1.0 || *v == -1.0));
        prop_assert_eq!(decode_labels(&e, *l.grid()).unwrap(), l);
    }
}

fn single_patella(dims: [usize; 3], at: [usize; 3], spacing: [f64; 3]) -> LabelVolume {
    let g = Grid::new(dims, spacing, [0.0; 3]).unwrap();
    let mut l = LabelVolume::background(g);
    l.set(at[0], at[1], at[2], Label::Patella);
    l
}

#[test]
fn zero_offset_mask_is_the_patella_box() {
    let mut l = single_patella([8, 8, 8], [2, 3, 4], [1.0; 3]);
    l.set(5, 4, 6, Label::Patella);
    let m = build_mask(
        &l,
        &MaskConfig {
            offset_mm: 0.0,
            shape: MaskShape::Box,
        },
    )
    .unwrap();
    assert_eq!(m.bounds(), Some(([2, 3, 4], [5, 4, 6])));
    assert_eq!(m.count(), 4 * 2 * 3);
}

#[test]
fn thirty_mm_box_around_one_voxel() {
    let l = single_patella([64, 64, 64], [32, 32, 32], [1.0; 3]);
    let m = build_mask(&l, &MaskConfig::default()).unwrap();
    assert_eq!(m.count(), 61 * 61 * 61);
    assert_eq!(m.bounds(), Some(([2; 3], [62; 3])));
    let l = single_patella([40, 64, 64], [32, 32, 32], [1.0, 1.0, 2.0]);
    let m = build_mask(&l, &MaskConfig::default()).unwrap();
    assert_eq!(m.bounds(), Some(([2, 2, 17], [39, 62, 47])));
}

#[test]
fn missing_patella_is_an_error() {
    let g = Grid::new([4, 4, 4], [1.0; 3], [0.0; 3]).unwrap();
    assert!(matches!(build_mask(&LabelVolume::background(g), &MaskConfig::default()), Err(DiffusionError::NoPatella)));
}

#[test]
fn sphere_mask_matches_brute_force() {
    let mut l = random_labels(3, [9, 7, 6]);
    let data: Vec<u8> = l
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &v)| if v == 3 && i % 5 == 0 { 3 } else { 0 })
        .collect();
    let g = Grid::new([9, 7, 6], [0.8, 1.1, 1.7], [0.0; 3]).unwrap();
    l = LabelVolume::new(g, data).unwrap();
    let cfg = MaskConfig {
        offset_mm: 2.3,
        shape: MaskShape::Sphere,
    };
    let m = build_mask(&l, &cfg).unwrap();
    let pts: Vec<[f64; 3]> = (0..g.len())
        .filter(|&i| l.labels()[i] == 3)
        .map(|i| g.index_to_world_unchecked(g.unravel(i)))
        .collect();
    assert!(!pts.is_empty());
    for i in 0..g.len() {
        let p = g.index_to_world_unchecked(g.unravel(i));
        let near = pts
            .iter()
            .any(|q| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>() <= 2.3f64.powi(2) * (1.0 + 1e-12));
        assert_eq!(m.inside[i], near, "voxel {i}");
    }
}

fn phantom_32(spec: &TrochleaPhantomSpec) -> LabelVolume {
    let g = Grid::new([32, 32, 32], [1.5; 3], [0.0; 3]).unwrap();
    phantom_labels(spec, g).unwrap()
}

fn small_spec() -> TrochleaPhantomSpec {
    TrochleaPhantomSpec {
        condyle_half_width: 10.0,
        groove_depth: 5.0,
        condyle_height: 12.0,
        bone_extent: [36.0, 20.0, 36.0],
        patella_radius: 5.0,
        patella_gap: 8.0,
        noise_sigma: 0.0,
        ..Default::default()
    }
}

#[test]
fn phantom_mask_covers_the_trough_line() {
    let spec = small_spec();
    let labels = phantom_32(&spec);
    let g = *labels.grid();
    let m = build_mask(&labels, &MaskConfig::default()).unwrap();
    let layout = PhantomLayout::new(&spec, &g);
    let mut checked = 0;
    for k in 0..32 {
        let z = g.origin()[2] + k as f64 * 1.5;
        if z < layout.femur_lo[2] || z > layout.femur_hi[2] {
            continue;
        }
        let idx = g.world_to_index([layout.center[0], layout.trough_y, z]).unwrap();
        assert!(m.inside[g.linear(idx[0], idx[1], idx[2])], "slice {k}");
        checked += 1;
    }
    assert!(checked > 20);
}

#[test]
fn one_step_oracle_reproduces_ground_truth() {
    let truth = phantom_32(&small_spec());
    let patho = phantom_32(&small_spec().with_groove(14.0, 1.5));
    let mask = build_mask(&patho, &MaskConfig::default()).unwrap();
    let oracle = OracleDenoiser::for_labels(&truth).unwrap();
    let s = NoiseSchedule::linear(1, 1e-4, 0.02).unwrap();
    let out = inpaint(&oracle, &patho, &mask, &s, 1).unwrap();
    for i in 0..truth.labels().len() {
        if mask.inside[i] {
            assert_eq!(out.labels.labels()[i], truth.labels()[i]);
        } else {
            assert_eq!(out.labels.labels()[i], patho.labels()[i]);
        }
    }
    assert_eq!(out.raw, truth);
}

#[test]
fn sampling_never_touches_voxels_outside_the_mask() {
    let source = random_labels(8, [8, 8, 8]);
    let mut source_data = source.labels().to_vec();
    source_data[4 + 8 * (4 + 8 * 4)] = Label::Patella as u8;
    let source = LabelVolume::new(*source.grid(), source_data).unwrap();
    let mask = build_mask(
        &source,
        &MaskConfig {
            offset_mm: 1.0,
            shape: MaskShape::Box,
        },
    )
    .unwrap();
    let cfg = WdmConfig {
        width: 4,
        time_dim: 8,
        schedule: ScheduleConfig {
            steps: 5,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut d = Denoiser::<f32>::init(cfg.denoiser_config(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    d.head.weight.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    let s = NoiseSchedule::from_config(&cfg.schedule).unwrap();
    let a = inpaint(&d, &source, &mask, &s, 42).unwrap();
    for i in 0..source.labels().len() {
        if !mask.inside[i] {
            assert_eq!(a.labels.labels()[i], source.labels()[i]);
        }
    }
    let b = inpaint(&d, &source, &mask, &s, 42).unwrap();
    assert_eq!(a, b);
}

#[test]
fn low_noise_copy_has_near_zero_loss() {
    let labels = phantom_32(&small_spec());
    let ex = TrainingExample::new(&labels, &MaskConfig::default()).unwrap();
    let s = default_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eps: Vec<f32> = (0..ex.x0.len()).map(|_| rng.sample(StandardNormal)).collect();
    let xt = forward_noise(ex.x0.as_slice().unwrap(), 1, &eps, &s).unwrap();
    let mse = xt.iter().zip(ex.x0.iter()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / xt.len() as f64;
    assert!(mse < 2e-4, "{mse}");
}

#[test]
fn untrained_loss_is_the_coefficient_energy() {
    let labels = phantom_32(&small_spec());
    let ex = TrainingExample::new(&labels, &MaskConfig::default()).unwrap();
    let energy = ex.x0.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / ex.x0.len() as f64;
    let mut trainer = Trainer::new(WdmConfig {
        width: 4,
        ..Default::default()
    })
    .unwrap();
    let rec = trainer.train_step(&ex).unwrap();
    assert!((rec.loss / energy - 1.0).abs() < 1e-5, "{} vs {energy}", rec.loss);
    assert!((1..=100).contains(&rec.t));
    assert_eq!(rec.iteration, 1);
}

#[test]
fn training_reduces_loss_on_one_example() {
    let labels = phantom_32(&small_spec());
    let ex = TrainingExample::new(&labels, &MaskConfig::default()).unwrap();
    let cfg = WdmConfig {
        width: 4,
        iterations: 60,
        lr0: 3e-3,
        schedule: ScheduleConfig {
            steps: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut losses = Vec::new();
    train_wdm(std::slice::from_ref(&ex), cfg, |r| losses.push(r.loss)).unwrap();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[50..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
}

#[test]
fn checkpoint_round_trip() {
    let cfg = WdmConfig {
        width: 4,
        seed: 5,
        ..Default::default()
    };
    let mut d = Denoiser::<f32>::init(cfg.denoiser_config(), 5).unwrap();
    d.head.bias.fill(0.25);
    let model = WdmModel { denoiser: d, config: cfg };
    let bytes = model.to_bytes();
    assert_eq!(&bytes[..4], b"GWDM");
    assert_eq!(WdmModel::from_bytes(&bytes).unwrap(), model);
    assert!(WdmModel::from_bytes(&bytes[..bytes.len() - 2]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(WdmModel::from_bytes(&extra).is_err());
}
