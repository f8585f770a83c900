//! Staged end-to-end run: acquire (phantom) → fuse → mask → inpaint →
//! mesh → diffmap → measure, with hashed outputs and a run manifest.
//!
//! Every stage has a key derived from its parameters and the hashes of its
//! inputs. A rerun reuses a stage when the previous manifest holds the same
//! key and the recorded output files are still on disk with matching hashes.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffusion::{build_mask, inpaint, Mask, NoiseSchedule, OracleDenoiser, WdmModel};
use crate::inr::{self, InrTrainConfig};
use crate::mesh::{label_mesh, read_ply, signed_surface_distance, write_ply, DistanceStats};
use crate::morphometrics::measure_sulcus;
use crate::phantom::{generate_phantom, phantom_labels, simulate_anisotropic_scans, Plane, ScanSpec};
use crate::volume::{encode_labels, encode_volume, read_labels, read_volume, Grid, LabelVolume, Volume};

pub use config::{
    ConfigError, DenoiserSource, FieldError, FusionConfig, InpaintConfig, InputConfig, MeshConfig, PhantomInput,
    PipelineConfig,
};
pub use report::{compare_dirs, CaseRow, MetricTest, Report, ReportError, SulcusRecord};

pub const MANIFEST_SCHEMA: &str = "grooveforge-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL: &str = "grooveforge";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Done,
    Reused,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub key: String,
    pub wall_time_s: f64,
    /// Output file name (relative to the run directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurements {
    pub before: SulcusRecord,
    pub after: SulcusRecord,
    /// Signed distance from the inpainted surface to the original.
    pub distance: DistanceStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    /// Digest over every stage's output hashes; equal across identical runs.
    pub outputs_digest: String,
    pub measurements: Option<Measurements>,
    pub failure: Option<StageFailure>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| ReportError::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let schema = value.get("schema").and_then(|s| s.as_str()).unwrap_or("<missing>");
        if schema != MANIFEST_SCHEMA {
            return Err(ReportError::Schema {
                path: path.to_path_buf(),
                message: format!("schema '{schema}', expected '{MANIFEST_SCHEMA}'"),
            });
        }
        serde_json::from_value(value).map_err(|e| ReportError::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none() && self.measurements.is_some()
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage '{stage}' failed: {message}")]
    Stage { stage: String, message: String },
    #[error("run directory {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    /// Process exit code: 2 for invalid input, 3 for a failed stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Recompute every stage even if reusable outputs exist.
    pub force: bool,
}

/// Independent seed for the named stream under the run seed.
pub fn stage_seed(seed: u64, name: &str) -> u64 {
    let h = Sha256::digest(format!("{seed}/{name}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

type StageResult<T> = Result<T, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn save_volume(v: &Volume, path: &Path) -> StageResult<()> {
    write_atomic(path, &encode_volume(v)).map_err(err)
}

fn save_labels(v: &LabelVolume, path: &Path) -> StageResult<()> {
    write_atomic(path, &encode_labels(v)).map_err(err)
}

fn load_labels(path: &Path) -> StageResult<LabelVolume> {
    read_labels(path).map_err(|e| format!("{}: {e}", path.display()))
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    out: PathBuf,
    previous: Option<RunManifest>,
    records: Vec<StageRecord>,
}

impl Runner<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Hash of a produced output, or of an external input file.
    fn hash_of(&self, path: &Path) -> StageResult<String> {
        for r in &self.records {
            for (name, h) in &r.outputs {
                if self.out.join(name) == path {
                    return Ok(h.clone());
                }
            }
        }
        sha256_file(path).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn reusable(&self, name: &str, key: &str) -> Option<StageRecord> {
        let prev = self.previous.as_ref()?.stage(name)?;
        if prev.key != key || !matches!(prev.status, StageStatus::Done | StageStatus::Reused) {
            return None;
        }
        let intact = prev
            .outputs
            .iter()
            .all(|(f, h)| sha256_file(&self.out.join(f)).is_ok_and(|got| &got == h));
        intact.then(|| prev.clone())
    }

    fn skip(&mut self, name: &str) {
        self.records.push(StageRecord {
            name: name.into(),
            status: StageStatus::Skipped,
            key: String::new(),
            wall_time_s: 0.0,
            outputs: BTreeMap::new(),
            error: None,
        });
    }

    fn stage(
        &mut self,
        name: &str,
        params: serde_json::Value,
        inputs: &[&Path],
        outputs: &[&str],
        force: bool,
        body: impl FnOnce(&Self) -> StageResult<()>,
    ) -> Result<(), PipelineError> {
        let start = Instant::now();
        let fail = |records: &mut Vec<StageRecord>, message: String| {
            records.push(StageRecord {
                name: name.into(),
                status: StageStatus::Failed,
                key: String::new(),
                wall_time_s: start.elapsed().as_secs_f64(),
                outputs: BTreeMap::new(),
                error: Some(message.clone()),
            });
            PipelineError::Stage {
                stage: name.into(),
                message,
            }
        };
        let mut input_hashes = Vec::new();
        for p in inputs {
            match self.hash_of(p) {
                Ok(h) => input_hashes.push(h),
                Err(m) => return Err(fail(&mut self.records, m)),
            }
        }
        let material = json!({ "stage": name, "params": params, "inputs": input_hashes, "outputs": outputs });
        let key = hex::encode(Sha256::digest(material.to_string().as_bytes()));
        if !force {
            if let Some(mut prev) = self.reusable(name, &key) {
                log::info!("stage {name}: reusing outputs");
                prev.status = StageStatus::Reused;
                prev.wall_time_s = start.elapsed().as_secs_f64();
                self.records.push(prev);
                return Ok(());
            }
        }
        log::info!("stage {name}: running");
        if let Err(m) = body(self) {
            return Err(fail(&mut self.records, m));
        }
        let mut hashes = BTreeMap::new();
        for f in outputs {
            match sha256_file(&self.path(f)) {
                Ok(h) => {
                    hashes.insert(f.to_string(), h);
                }
                Err(e) => return Err(fail(&mut self.records, format!("output {f} missing: {e}"))),
            }
        }
        self.records.push(StageRecord {
            name: name.into(),
            status: StageStatus::Done,
            key,
            wall_time_s: start.elapsed().as_secs_f64(),
            outputs: hashes,
            error: None,
        });
        Ok(())
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            for (f, d) in &r.outputs {
                h.update(format!("{}:{f}:{d}\n", r.name).as_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Orthogonal acquisitions with mildly different intensity responses.
pub fn phantom_scans(thickness: f64) -> [ScanSpec; 3] {
    [
        ScanSpec::new(Plane::Axial, thickness),
        ScanSpec::new(Plane::Sagittal, thickness).with_intensity(0.9, 0.05),
        ScanSpec::new(Plane::Coronal, thickness).with_intensity(1.1, -0.03),
    ]
}

/// Isotropic grid over the union extent of the scans.
pub fn fusion_grid(scans: &[Volume], spacing: Option<f64>) -> StageResult<Grid> {
    let s = spacing.unwrap_or_else(|| {
        scans
            .iter()
            .flat_map(|v| v.grid().spacing())
            .fold(f64::INFINITY, f64::min)
    });
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in scans {
        let (a, b) = v.grid().extent();
        for k in 0..3 {
            lo[k] = lo[k].min(a[k]);
            hi[k] = hi[k].max(b[k]);
        }
    }
    let dims = [0, 1, 2].map(|k| (((hi[k] - lo[k]) / s) - 1e-9).ceil().max(1.0) as usize);
    Grid::new(dims, [s; 3], [0, 1, 2].map(|k| lo[k] + 0.5 * s)).map_err(err)
}

fn read_mask(path: &Path) -> StageResult<Mask> {
    let m = load_labels(path)?;
    Ok(Mask {
        grid: *m.grid(),
        inside: m.labels().iter().map(|&v| v != 0).collect(),
    })
}

/// Executes the configured run in `cfg.out_dir` and writes `manifest.json`.
/// A failed stage still leaves a manifest recording what completed.
pub fn run_pipeline(cfg: &PipelineConfig, opts: RunOptions) -> Result<RunManifest, PipelineError> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).map_err(|source| PipelineError::Io {
        path: out.clone(),
        source,
    })?;
    let manifest_path = out.join(MANIFEST_FILE);
    let previous = if opts.force {
        None
    } else {
        RunManifest::load(&manifest_path).ok()
    };
    let mut runner = Runner {
        cfg,
        out: out.clone(),
        previous,
        records: Vec::new(),
    };
    let result = run_stages(&mut runner, opts.force);
    let measurements = match &result {
        Ok(()) => read_measurements(&runner).ok(),
        Err(_) => None,
    };
    let failure = match &result {
        Err(PipelineError::Stage { stage, message }) => Some(StageFailure {
            stage: stage.clone(),
            message: message.clone(),
        }),
        Err(e) => Some(StageFailure {
            stage: "setup".into(),
            message: e.to_string(),
        }),
        Ok(()) => None,
    };
    let manifest = RunManifest {
        schema: MANIFEST_SCHEMA.into(),
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config: cfg.clone(),
        outputs_digest: runner.digest(),
        stages: runner.records,
        measurements,
        failure,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    write_atomic(&manifest_path, text.as_bytes()).map_err(|source| PipelineError::Io {
        path: manifest_path.clone(),
        source,
    })?;
    result.map(|()| manifest)
}

fn read_measurements(r: &Runner) -> StageResult<Measurements> {
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.path("measurements.json")).map_err(err)?).map_err(err)?;
    let d: DistanceStats = serde_json::from_str(&fs::read_to_string(r.path("distance.json")).map_err(err)?).map_err(err)?;
    Ok(Measurements {
        before: serde_json::from_value(m["before"].clone()).map_err(err)?,
        after: serde_json::from_value(m["after"].clone()).map_err(err)?,
        distance: d,
    })
}

fn run_stages(r: &mut Runner, force: bool) -> Result<(), PipelineError> {
    let cfg = r.cfg;
    let seed = cfg.seed;
    let input = &cfg.input;

    // Acquire: synthesise the study when configured as a phantom.
    let (labels_path, scan_paths, healthy_path) = match &input.phantom {
        Some(ph) => {
            let mut outputs = vec!["gt.gvol", "labels.gvol", "scan_axial.gvol", "scan_sagittal.gvol", "scan_coronal.gvol"];
            if ph.healthy.is_some() {
                outputs.push("healthy_labels.gvol");
            }
            let acquire_seed = stage_seed(seed, "acquire");
            r.stage(
                "acquire",
                json!({ "phantom": ph, "seed": acquire_seed }),
                &[],
                &outputs,
                force,
                |r| {
                    let spec = crate::phantom::TrochleaPhantomSpec {
                        seed: acquire_seed,
                        ..ph.spec.clone()
                    };
                    let (gt, labels) = generate_phantom(&spec, ph.dims, [ph.spacing; 3]).map_err(err)?;
                    let scans = simulate_anisotropic_scans(&gt, &phantom_scans(ph.slice_thickness)).map_err(err)?;
                    save_volume(&gt, &r.path("gt.gvol"))?;
                    save_labels(&labels, &r.path("labels.gvol"))?;
                    for (scan, name) in scans.iter().zip(["scan_axial.gvol", "scan_sagittal.gvol", "scan_coronal.gvol"]) {
                        save_volume(scan, &r.path(name))?;
                    }
                    if let Some([w, d]) = ph.healthy {
                        let healthy = phantom_labels(&spec.with_groove(w, d), *labels.grid()).map_err(err)?;
                        save_labels(&healthy, &r.path("healthy_labels.gvol"))?;
                    }
                    Ok(())
                },
            )?;
            let scans = ["scan_axial.gvol", "scan_sagittal.gvol", "scan_coronal.gvol"].map(|n| r.path(n));
            let healthy = ph.healthy.map(|_| r.path("healthy_labels.gvol"));
            (r.path("labels.gvol"), Some(scans), healthy)
        }
        None => {
            r.skip("acquire");
            let scans = cfg.scans().map(|s| s.map(Path::to_path_buf));
            (input.labels.clone().expect("validated"), scans, None)
        }
    };

    // Fuse the three acquisitions into one isotropic volume.
    match (&input.fused, &scan_paths) {
        (None, Some(scans)) if cfg.fusion.enabled => {
            let fuse_seed = stage_seed(seed, "fuse");
            let inputs: Vec<&Path> = scans.iter().map(PathBuf::as_path).collect();
            r.stage(
                "fuse",
                json!({ "fusion": cfg.fusion, "seed": fuse_seed }),
                &inputs,
                &["fused.gvol", "inr.ginr"],
                force,
                |r| {
                    let vols = scans
                        .iter()
                        .map(|p| read_volume(p).map_err(|e| format!("{}: {e}", p.display())))
                        .collect::<StageResult<Vec<_>>>()?;
                    let inr_cfg = InrTrainConfig {
                        seed: fuse_seed,
                        ..cfg.fusion.inr.clone()
                    };
                    let (model, report) = inr::train(&vols, &inr_cfg).map_err(err)?;
                    log::info!("fusion final loss {:.3e}", report.final_loss());
                    let grid = fusion_grid(&vols, cfg.fusion.spacing)?;
                    let fused = model.sample_volume(grid, cfg.fusion.policy).map_err(err)?;
                    save_volume(&fused, &r.path("fused.gvol"))?;
                    write_atomic(&r.path("inr.ginr"), &model.to_bytes()).map_err(err)
                },
            )?;
        }
        _ => r.skip("fuse"),
    }

    let mask_path = r.path("mask.gvol");
    r.stage("mask", json!({ "mask": cfg.inpaint.mask }), &[&labels_path], &["mask.gvol"], force, |r| {
        let labels = load_labels(&labels_path)?;
        let mask = build_mask(&labels, &cfg.inpaint.mask).map_err(err)?;
        let data = mask.inside.iter().map(|&m| m as u8).collect();
        save_labels(&LabelVolume::new(mask.grid, data).map_err(err)?, &r.path("mask.gvol"))
    })?;

    let inpaint_seed = stage_seed(seed, "inpaint");
    let reference: PathBuf = match cfg.inpaint.denoiser {
        DenoiserSource::Model => cfg.inpaint.model.clone().expect("validated"),
        DenoiserSource::Oracle => cfg
            .inpaint
            .oracle_labels
            .clone()
            .or(healthy_path)
            .expect("validated"),
    };
    r.stage(
        "inpaint",
        json!({ "denoiser": cfg.inpaint.denoiser, "schedule": cfg.inpaint.schedule, "seed": inpaint_seed }),
        &[&labels_path, &mask_path, &reference],
        &["inpainted.gvol", "inpainted_raw.gvol"],
        force,
        |r| {
            let labels = load_labels(&labels_path)?;
            let mask = read_mask(&mask_path)?;
            let result = match cfg.inpaint.denoiser {
                DenoiserSource::Model => {
                    let model = WdmModel::load(&reference).map_err(|e| format!("{}: {e}", reference.display()))?;
                    let schedule = model.schedule().map_err(err)?;
                    inpaint(&model.denoiser, &labels, &mask, &schedule, inpaint_seed)
                }
                DenoiserSource::Oracle => {
                    let healthy = load_labels(&reference)?;
                    if !healthy.grid().same_geometry(labels.grid(), 1e-9) {
                        return Err("oracle labels do not share the study grid".into());
                    }
                    let oracle = OracleDenoiser::for_labels(&healthy).map_err(err)?;
                    let schedule = NoiseSchedule::from_config(&cfg.inpaint.schedule).map_err(err)?;
                    inpaint(&oracle, &labels, &mask, &schedule, inpaint_seed)
                }
            }
            .map_err(err)?;
            save_labels(&result.labels, &r.path("inpainted.gvol"))?;
            save_labels(&result.raw, &r.path("inpainted_raw.gvol"))
        },
    )?;

    let label = cfg.mesh_label().expect("validated");
    let before_name = format!("{}_before.ply", label.name());
    let after_name = format!("{}_after.ply", label.name());
    let inpainted_path = r.path("inpainted.gvol");
    r.stage(
        "mesh",
        json!({ "label": label.name() }),
        &[&labels_path, &inpainted_path],
        &[before_name.as_str(), after_name.as_str()],
        force,
        |r| {
            for (src, name) in [(&labels_path, &before_name), (&inpainted_path, &after_name)] {
                let mesh = label_mesh(&load_labels(src)?, label).map_err(err)?;
                let mut buf = Vec::new();
                write_ply(&mesh, None, &mut buf).map_err(err)?;
                write_atomic(&r.path(name), &buf).map_err(err)?;
            }
            Ok(())
        },
    )?;

    let (before_mesh, after_mesh) = (r.path(&before_name), r.path(&after_name));
    r.stage(
        "diffmap",
        json!({}),
        &[&before_mesh, &after_mesh],
        &["diffmap.ply", "distance.json"],
        force,
        |r| {
            let read = |p: &Path| -> StageResult<_> {
                let bytes = fs::read(p).map_err(err)?;
                Ok(read_ply(&mut bytes.as_slice()).map_err(err)?.0)
            };
            let (a, b) = (read(&before_mesh)?, read(&after_mesh)?);
            let map = signed_surface_distance(&b, &a).map_err(err)?;
            let mut buf = Vec::new();
            write_ply(&b, Some(&map.values), &mut buf).map_err(err)?;
            write_atomic(&r.path("diffmap.ply"), &buf).map_err(err)?;
            let stats = serde_json::to_string_pretty(&map.stats).map_err(err)?;
            write_atomic(&r.path("distance.json"), stats.as_bytes()).map_err(err)
        },
    )?;

    r.stage(
        "measure",
        json!({ "metrics": cfg.metrics }),
        &[&labels_path, &inpainted_path],
        &["measurements.json"],
        force,
        |r| {
            let before = measure_sulcus(&load_labels(&labels_path)?, &cfg.metrics).map_err(err)?;
            let after = measure_sulcus(&load_labels(&inpainted_path)?, &cfg.metrics).map_err(err)?;
            let doc = json!({ "before": SulcusRecord::from(&before), "after": SulcusRecord::from(&after) });
            write_atomic(&r.path("measurements.json"), serde_json::to_string_pretty(&doc).map_err(err)?.as_bytes()).map_err(err)
        },
    )?;
    Ok(())
}

#[cfg(test)]
mod tests;
