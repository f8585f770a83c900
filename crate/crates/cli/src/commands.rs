use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;

use grooveforge_core::diffusion::{
    self, build_mask, MaskConfig, MaskShape, NoiseSchedule, OracleDenoiser, ScheduleConfig, TrainingExample,
    WdmConfig, WdmModel,
};
use grooveforge_core::inr::{self, ChannelPolicy, InrTrainConfig};
use grooveforge_core::mesh::{label_mesh, read_mesh, signed_surface_distance, write_mesh};
use grooveforge_core::morphometrics::{measure_sulcus, SlicePolicy, SulcusConfig};
use grooveforge_core::phantom::{
    generate_phantom, phantom_labels, simulate_anisotropic_scans, toy_grid, toy_variants, TrochleaPhantomSpec,
};
use grooveforge_core::pipeline::report::{compare_dirs, Report, SulcusRecord};
use grooveforge_core::pipeline::{
    fusion_grid, phantom_scans, run_pipeline, write_atomic, PipelineConfig, RunOptions, MANIFEST_FILE,
};
use grooveforge_core::volume::{
    read_any, read_labels, read_nifti, read_volume, write_labels, write_volume, GvolPayload, Label, LabelVolume,
    Volume,
};
use grooveforge_core::wavelet::{dwt3, idwt3, MultiVolume};

/// Message plus process exit code: 2 for bad input, 3 for a failed step.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn failed(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

type CliResult = Result<(), CliError>;

fn at<E: Display>(path: &Path) -> impl Fn(E) -> String + '_ {
    move |e| format!("{}: {e}", path.display())
}

fn bad_input<E: Display>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| CliError::usage(at(path)(e))
}

fn failed<E: Display>(e: E) -> CliError {
    CliError::failed(e.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::failed(at(dir)(e)))?;
    }
    write_atomic(path, bytes).map_err(|e| CliError::failed(at(path)(e)))
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    write_file(path, serde_json::to_string_pretty(value).map_err(failed)?.as_bytes())
}

/// GVOL, or NIfTI when the name ends in `.nii`.
fn load_volume(path: &Path) -> Result<Volume, CliError> {
    if path.extension().is_some_and(|e| e == "nii") {
        read_nifti(path).map_err(bad_input(path))
    } else {
        read_volume(path).map_err(bad_input(path))
    }
}

fn load_labels(path: &Path) -> Result<LabelVolume, CliError> {
    read_labels(path).map_err(bad_input(path))
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(bad_input(path))?;
    toml::from_str(&text).map_err(bad_input(path))
}

fn parse_label(name: &str) -> Result<Label, String> {
    Label::from_name(name).ok_or_else(|| {
        let known: Vec<&str> = Label::ALL.iter().map(|l| l.name()).collect();
        format!("unknown label '{name}' ({})", known.join(", "))
    })
}

fn parse_shape(s: &str) -> Result<MaskShape, String> {
    match s {
        "box" => Ok(MaskShape::Box),
        "sphere" => Ok(MaskShape::Sphere),
        _ => Err(format!("unknown mask shape '{s}' (box, sphere)")),
    }
}

#[derive(Args)]
pub struct PhantomArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with the phantom parameters.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Groove half-width in mm.
    #[arg(long)]
    half_width: Option<f64>,
    /// Groove depth in mm.
    #[arg(long)]
    depth: Option<f64>,
    /// Voxels per axis.
    #[arg(long, default_value_t = 64)]
    dims: usize,
    /// Isotropic voxel size in mm.
    #[arg(long, default_value_t = 1.0)]
    spacing: f64,
    /// Thickness of the simulated acquisitions in mm.
    #[arg(long, default_value_t = 4.0)]
    slice_thickness: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Instead write this many randomised label volumes on the toy grid.
    #[arg(long)]
    variants: Option<usize>,
}

fn grid_json(g: &grooveforge_core::volume::Grid) -> serde_json::Value {
    json!({ "dims": g.dims(), "spacing": g.spacing(), "origin": g.origin() })
}

fn spec_summary(spec: &TrochleaPhantomSpec) -> serde_json::Value {
    json!({
        "spec": spec,
        "sulcus_angle": spec.analytic_sulcus_angle(),
        "groove_depth": spec.analytic_groove_depth(),
    })
}

pub fn phantom(a: PhantomArgs) -> CliResult {
    let mut spec: TrochleaPhantomSpec = match &a.spec {
        Some(p) => parse_toml(p)?,
        None => TrochleaPhantomSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    if let Some(n) = a.variants {
        let grid = toy_grid();
        let mut cases = Vec::with_capacity(n);
        for (i, v) in toy_variants(n, spec.seed).iter().enumerate() {
            let name = format!("case_{i:03}.gvol");
            let labels = phantom_labels(v, grid).map_err(failed)?;
            write_file(&a.out.join(&name), &grooveforge_core::volume::encode_labels(&labels))?;
            cases.push(json!({ "file": name, "phantom": spec_summary(v) }));
        }
        write_json(&a.out.join("corpus.json"), &json!({ "grid": grid_json(&grid), "cases": cases }))?;
        println!("wrote {n} label volumes to {}", a.out.display());
        return Ok(());
    }
    spec = spec.with_groove(
        a.half_width.unwrap_or(spec.condyle_half_width),
        a.depth.unwrap_or(spec.groove_depth),
    );
    spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
    if a.dims == 0 || !(a.spacing > 0.0) || !(a.slice_thickness >= a.spacing) {
        return Err(CliError::usage("dims must be positive and slice thickness at least the spacing"));
    }
    let (gt, labels) = generate_phantom(&spec, [a.dims; 3], [a.spacing; 3]).map_err(|e| CliError::usage(e.to_string()))?;
    let scans = simulate_anisotropic_scans(&gt, &phantom_scans(a.slice_thickness)).map_err(failed)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::failed(at(&a.out)(e)))?;
    write_volume(&gt, a.out.join("gt.gvol")).map_err(failed)?;
    write_labels(&labels, a.out.join("labels.gvol")).map_err(failed)?;
    for (scan, plane) in scans.iter().zip(["axial", "sagittal", "coronal"]) {
        write_volume(scan, a.out.join(format!("scan_{plane}.gvol"))).map_err(failed)?;
    }
    let mut doc = spec_summary(&spec);
    doc["grid"] = grid_json(gt.grid());
    doc["slice_thickness"] = json!(a.slice_thickness);
    write_json(&a.out.join("phantom.json"), &doc)?;
    println!(
        "phantom w={} d={}: SA {:.2} deg, TGD {:.2} mm -> {}",
        spec.condyle_half_width,
        spec.groove_depth,
        spec.analytic_sulcus_angle().unwrap_or(f64::NAN),
        spec.analytic_groove_depth(),
        a.out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct FuseArgs {
    #[arg(long)]
    axial: PathBuf,
    #[arg(long)]
    sagittal: PathBuf,
    #[arg(long)]
    coronal: PathBuf,
    /// Fused isotropic volume.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with network and optimiser settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also save the trained network (GINR).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// axial, sagittal, coronal, mean or single:K.
    #[arg(long, default_value = "axial")]
    policy: ChannelPolicy,
    /// Output spacing in mm; defaults to the finest input spacing.
    #[arg(long)]
    spacing: Option<f64>,
}

pub fn fuse(a: FuseArgs) -> CliResult {
    let mut cfg: InrTrainConfig = match &a.config {
        Some(p) => parse_toml(p)?,
        None => InrTrainConfig::default(),
    };
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.hidden = a.hidden.unwrap_or(cfg.hidden);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    if a.spacing.is_some_and(|s| !(s > 0.0)) {
        return Err(CliError::usage("spacing must be positive"));
    }
    let scans = [&a.axial, &a.sagittal, &a.coronal]
        .into_iter()
        .map(|p| load_volume(p))
        .collect::<Result<Vec<_>, _>>()?;
    let (model, report) = inr::train(&scans, &cfg).map_err(failed)?;
    log::info!("final loss {:.4e}", report.final_loss());
    let grid = fusion_grid(&scans, a.spacing).map_err(CliError::failed)?;
    let fused = model.sample_volume(grid, a.policy).map_err(failed)?;
    write_file(&a.out, &grooveforge_core::volume::encode_volume(&fused))?;
    if let Some(p) = &a.model {
        write_file(p, &model.to_bytes())?;
    }
    println!("fused {:?} voxels -> {}", grid.dims(), a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory searched recursively for label volumes (*.gvol).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint (GWDM).
    #[arg(long)]
    out: PathBuf,
    /// TOML file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    offset_mm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training log, one JSON record (iteration, t, loss) per line.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn gvol_files(dir: &Path, found: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            gvol_files(&p, found)?;
        } else if p.extension().is_some_and(|e| e == "gvol") {
            found.push(p);
        }
    }
    Ok(())
}

pub fn train_wdm(a: TrainArgs) -> CliResult {
    let mut cfg: WdmConfig = match &a.config {
        Some(p) => parse_toml(p)?,
        None => WdmConfig::default(),
    };
    cfg.iterations = a.iterations.unwrap_or(cfg.iterations);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.schedule.steps = a.steps.unwrap_or(cfg.schedule.steps);
    cfg.mask.offset_mm = a.offset_mm.unwrap_or(cfg.mask.offset_mm);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let mut files = Vec::new();
    gvol_files(&a.data, &mut files).map_err(bad_input(&a.data))?;
    files.sort();
    if files.is_empty() {
        return Err(CliError::usage(format!("{}: no .gvol label volumes found", a.data.display())));
    }
    let examples = files
        .iter()
        .map(|p| TrainingExample::new(&load_labels(p)?, &cfg.mask).map_err(bad_input(p)))
        .collect::<Result<Vec<_>, _>>()?;
    log::info!("training on {} volumes for {} iterations", examples.len(), cfg.iterations);
    let mut lines = String::new();
    let every = (cfg.iterations / 20).max(1);
    let model = diffusion::train_wdm(&examples, cfg, |r| {
        lines.push_str(&serde_json::to_string(r).expect("record serialises"));
        lines.push('\n');
        if r.iteration % every == 0 {
            log::info!("iteration {} t={} loss {:.4e}", r.iteration, r.t, r.loss);
        }
    })
    .map_err(failed)?;
    write_file(&a.out, &model.to_bytes())?;
    if let Some(p) = &a.log {
        write_file(p, lines.as_bytes())?;
    }
    println!("model -> {}", a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct InpaintArgs {
    #[arg(long)]
    labels: PathBuf,
    /// Trained checkpoint (GWDM).
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    model: Option<PathBuf>,
    /// Healthy labels returned verbatim by an oracle denoiser.
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Growth of the patella region that is regenerated.
    #[arg(long, default_value_t = 30.0)]
    offset_mm: f64,
    #[arg(long, default_value = "box", value_parser = parse_shape)]
    shape: MaskShape,
    /// Reverse steps for the oracle; a model uses its own schedule.
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also save the uncomposited generation.
    #[arg(long)]
    raw: Option<PathBuf>,
}

pub fn inpaint(a: InpaintArgs) -> CliResult {
    let labels = load_labels(&a.labels)?;
    let mask_cfg = MaskConfig {
        offset_mm: a.offset_mm,
        shape: a.shape,
    };
    let mask = build_mask(&labels, &mask_cfg).map_err(bad_input(&a.labels))?;
    let result = match (&a.model, &a.oracle) {
        (Some(p), _) => {
            let model = WdmModel::load(p).map_err(bad_input(p))?;
            let schedule = model.schedule().map_err(failed)?;
            diffusion::inpaint(&model.denoiser, &labels, &mask, &schedule, a.seed)
        }
        (None, Some(p)) => {
            let healthy = load_labels(p)?;
            let oracle = OracleDenoiser::for_labels(&healthy).map_err(bad_input(p))?;
            let schedule = NoiseSchedule::from_config(&ScheduleConfig {
                steps: a.steps,
                ..Default::default()
            })
            .map_err(|e| CliError::usage(e.to_string()))?;
            diffusion::inpaint(&oracle, &labels, &mask, &schedule, a.seed)
        }
        (None, None) => unreachable!("clap requires one denoiser"),
    }
    .map_err(failed)?;
    write_file(&a.out, &grooveforge_core::volume::encode_labels(&result.labels))?;
    if let Some(p) = &a.raw {
        write_file(p, &grooveforge_core::volume::encode_labels(&result.raw))?;
    }
    println!("inpainted {} voxels -> {}", mask.count(), a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct MeshArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value = "femur", value_parser = parse_label)]
    label: Label,
    /// `.ply` or `.stl`.
    #[arg(long)]
    out: PathBuf,
}

pub fn mesh(a: MeshArgs) -> CliResult {
    let labels = load_labels(&a.labels)?;
    if labels.count(a.label) == 0 {
        return Err(CliError::usage(format!("{}: no {} voxels", a.labels.display(), a.label.name())));
    }
    let mesh = label_mesh(&labels, a.label).map_err(failed)?;
    write_mesh(&a.out, &mesh, None).map_err(|e| CliError::usage(at(&a.out)(e)))?;
    println!("{} triangles -> {}", mesh.triangles.len(), a.out.display());
    Ok(())
}

#[derive(Args)]
pub struct DiffmapArgs {
    /// Reference surface.
    #[arg(long)]
    a: PathBuf,
    /// Surface carrying the distances.
    #[arg(long)]
    b: PathBuf,
    /// PLY with a per-vertex `distance` property.
    #[arg(long)]
    out: PathBuf,
    /// Also write mean/max/p95 as JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
}

pub fn diffmap(a: DiffmapArgs) -> CliResult {
    let ma = read_mesh(&a.a).map_err(bad_input(&a.a))?;
    let mb = read_mesh(&a.b).map_err(bad_input(&a.b))?;
    let map = signed_surface_distance(&mb, &ma).map_err(failed)?;
    if a.out.extension().is_none_or(|e| e != "ply") {
        return Err(CliError::usage("the distance map is written as .ply"));
    }
    let mut buf = Vec::new();
    grooveforge_core::mesh::write_ply(&mb, Some(&map.values), &mut buf).map_err(failed)?;
    write_file(&a.out, &buf)?;
    let stats = json!(map.stats);
    if let Some(p) = &a.stats {
        write_json(p, &stats)?;
    }
    println!("{stats}");
    Ok(())
}

#[derive(Args)]
pub struct MeasureArgs {
    #[arg(long)]
    labels: PathBuf,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Measure this axial slice instead of searching near the patella.
    #[arg(long)]
    slice: Option<usize>,
}

pub fn measure(a: MeasureArgs) -> CliResult {
    let labels = load_labels(&a.labels)?;
    let mut cfg = SulcusConfig::default();
    if let Some(slice) = a.slice {
        cfg.slice_policy = SlicePolicy::Fixed { slice };
    }
    let m = measure_sulcus(&labels, &cfg).map_err(failed)?;
    let doc = json!({ "labels": a.labels, "measurement": m });
    if let Some(p) = &a.report {
        write_json(p, &doc)?;
    }
    let r = SulcusRecord::from(&m);
    match (r.sulcus_angle, r.groove_depth) {
        (Some(sa), Some(tgd)) => println!("slice {}: SA {sa:.2} deg, TGD {tgd:.2} mm", m.slice),
        _ => println!("slice {}: no valid groove ({:?})", m.slice, m.reason),
    }
    Ok(())
}

#[derive(Args)]
pub struct CompareArgs {
    /// Directory of pre-operative label volumes.
    #[arg(long)]
    before: PathBuf,
    /// Directory with same-named post-operative volumes.
    #[arg(long)]
    after: PathBuf,
    /// Line-delimited JSON output.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn emit(report: &Report, json_path: Option<&Path>) -> CliResult {
    if let Some(p) = json_path {
        write_file(p, report.to_json_lines().as_bytes())?;
    }
    print!("{}", report.to_text());
    Ok(())
}

pub fn compare(a: CompareArgs) -> CliResult {
    let report = compare_dirs(&a.before, &a.after, &SulcusConfig::default()).map_err(|e| CliError {
        code: e.exit_code() as u8,
        message: e.to_string(),
    })?;
    emit(&report, a.json.as_deref())
}

#[derive(Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override one key, e.g. `--set inpaint.mask.offset_mm=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Recompute every stage even when outputs can be reused.
    #[arg(long)]
    force: bool,
}

pub fn run(a: RunArgs) -> CliResult {
    let cfg = PipelineConfig::load(&a.config, &a.overrides).map_err(|e| CliError::usage(e.to_string()))?;
    let m = run_pipeline(&cfg, RunOptions { force: a.force }).map_err(|e| CliError {
        code: e.exit_code() as u8,
        message: e.to_string(),
    })?;
    for s in &m.stages {
        println!("{:<8} {:<8} {:>8.2}s", s.name, format!("{:?}", s.status).to_lowercase(), s.wall_time_s);
    }
    if let Some(meas) = &m.measurements {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        println!(
            "SA {} -> {} deg, TGD {} -> {} mm, surface shift max {:.2} mm",
            f(meas.before.sulcus_angle),
            f(meas.after.sulcus_angle),
            f(meas.before.groove_depth),
            f(meas.after.groove_depth),
            meas.distance.max
        );
    }
    println!("manifest {} digest {}", cfg.out_dir.join(MANIFEST_FILE).display(), m.outputs_digest);
    Ok(())
}

#[derive(Args)]
pub struct ReportArgs {
    /// Manifest files, or run directories containing one.
    #[arg(required = true)]
    manifests: Vec<PathBuf>,
    /// Line-delimited JSON output.
    #[arg(long)]
    json: Option<PathBuf>,
}

pub fn report(a: ReportArgs) -> CliResult {
    let paths: Vec<PathBuf> = a
        .manifests
        .iter()
        .map(|p| if p.is_dir() { p.join(MANIFEST_FILE) } else { p.clone() })
        .collect();
    let report = Report::from_manifests(&paths).map_err(|e| CliError {
        code: e.exit_code() as u8,
        message: e.to_string(),
    })?;
    emit(&report, a.json.as_deref())
}

pub fn dwt_roundtrip(path: &Path) -> CliResult {
    let (dims, data): ([usize; 3], Vec<f64>) = match read_any(path).map_err(bad_input(path))? {
        GvolPayload::F32(v) => (v.dims(), v.data().iter().map(|&x| x as f64).collect()),
        GvolPayload::I32 { grid, values } => (grid.dims(), values.iter().map(|&x| x as f64).collect()),
    };
    let x = MultiVolume::new(1, dims, data).map_err(failed)?;
    let c = dwt3(&x).map_err(bad_input(path))?;
    let y = idwt3(&c).map_err(failed)?;
    let max_err = x.data.iter().zip(&y.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let energy: f64 = x.data.iter().map(|v| v * v).sum();
    let rel = if energy > 0.0 { (c.energy() - energy).abs() / energy } else { c.energy() };
    println!("dims {dims:?}: max abs reconstruction error {max_err:.3e}, relative energy error {rel:.3e}");
    Ok(())
}
