//! Run configuration: one TOML file, `--set key=value` overrides, and
//! validation that names the offending key.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{MaskConfig, NoiseSchedule, ScheduleConfig};
use crate::inr::{ChannelPolicy, InrTrainConfig};
use crate::morphometrics::SulcusConfig;
use crate::phantom::TrochleaPhantomSpec;
use crate::volume::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every random stream in the run.
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub input: InputConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub inpaint: InpaintConfig,
    #[serde(default)]
    pub mesh: MeshConfig,
    #[serde(default)]
    pub metrics: SulcusConfig,
}

/// Either a synthetic study or files on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub phantom: Option<PhantomInput>,
    pub axial: Option<PathBuf>,
    pub sagittal: Option<PathBuf>,
    pub coronal: Option<PathBuf>,
    /// An already fused volume; the fuse stage is skipped.
    pub fused: Option<PathBuf>,
    /// Segmentation of the study (required without a phantom).
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomInput {
    pub spec: TrochleaPhantomSpec,
    #[serde(default = "default_dims")]
    pub dims: [usize; 3],
    #[serde(default = "default_spacing")]
    pub spacing: f64,
    /// Thickness of the three simulated orthogonal acquisitions.
    #[serde(default = "default_thickness")]
    pub slice_thickness: f64,
    /// Groove `[half_width, depth]` of the matching healthy anatomy, which
    /// the oracle denoiser reproduces.
    pub healthy: Option<[f64; 2]>,
}

fn default_dims() -> [usize; 3] {
    [64; 3]
}

fn default_spacing() -> f64 {
    1.0
}

fn default_thickness() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub enabled: bool,
    pub inr: InrTrainConfig,
    pub policy: ChannelPolicy,
    /// Isotropic output spacing; defaults to the finest scan spacing.
    pub spacing: Option<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            inr: InrTrainConfig::default(),
            policy: ChannelPolicy::default(),
            spacing: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiserSource {
    #[default]
    Model,
    /// Returns the true healthy coefficients; for end-to-end checks.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintConfig {
    pub denoiser: DenoiserSource,
    pub model: Option<PathBuf>,
    /// Healthy labels for the oracle when the input is not a phantom.
    pub oracle_labels: Option<PathBuf>,
    /// Used by the oracle; a trained model carries its own schedule.
    pub schedule: ScheduleConfig,
    pub mask: MaskConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    pub label: String,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { label: "femur".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override '{0}': expected key=value")]
    Override(String),
    #[error("invalid config:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<FieldError>),
}

impl ConfigError {
    pub fn fields(&self) -> Vec<&str> {
        match self {
            ConfigError::Invalid(v) => v.iter().map(|e| e.field.as_str()).collect(),
            _ => Vec::new(),
        }
    }
}

/// Sets `dotted.key` in `table`, parsing `value` as TOML and falling back to
/// a bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.into()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(assignment.into()));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("{assignment} ({p} is not a table)")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text, applies overrides, and resolves relative paths
    /// against `base_dir`. Does not validate.
    pub fn parse(text: &str, base_dir: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        let i = &mut self.input;
        for p in [&mut i.axial, &mut i.sagittal, &mut i.coronal, &mut i.fused, &mut i.labels]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        for p in [&mut self.inpaint.model, &mut self.inpaint.oracle_labels].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn scans(&self) -> Option<[&Path; 3]> {
        let i = &self.input;
        Some([i.axial.as_deref()?, i.sagittal.as_deref()?, i.coronal.as_deref()?])
    }

    pub fn mesh_label(&self) -> Option<Label> {
        Label::from_name(&self.mesh.label)
    }

    /// Checks ranges and file existence; every problem is reported with its key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut err = |field: &str, message: String| {
            errs.push(FieldError {
                field: field.into(),
                message,
            })
        };
        let exists = |p: &Path| p.is_file();

        if self.out_dir.as_os_str().is_empty() {
            err("out_dir", "must not be empty".into());
        }
        let i = &self.input;
        for (name, p) in [
            ("input.axial", &i.axial),
            ("input.sagittal", &i.sagittal),
            ("input.coronal", &i.coronal),
            ("input.fused", &i.fused),
            ("input.labels", &i.labels),
        ] {
            if let Some(p) = p {
                if !exists(p) {
                    err(name, format!("file not found: {}", p.display()));
                }
            }
        }
        let n_scans = [&i.axial, &i.sagittal, &i.coronal].iter().filter(|p| p.is_some()).count();
        if n_scans != 0 && n_scans != 3 {
            err("input.axial", "axial, sagittal and coronal must be given together".into());
        }
        match &i.phantom {
            Some(ph) => {
                if n_scans > 0 || i.labels.is_some() {
                    err("input.phantom", "cannot be combined with scan or label files".into());
                }
                if let Err(e) = ph.spec.validate() {
                    err("input.phantom.spec", e.to_string());
                }
                if ph.dims.iter().any(|&d| d == 0 || d % 2 != 0) {
                    err("input.phantom.dims", format!("must be positive and even, got {:?}", ph.dims));
                }
                if !(ph.spacing.is_finite() && ph.spacing > 0.0) {
                    err("input.phantom.spacing", format!("must be > 0, got {}", ph.spacing));
                } else {
                    let ratio = ph.slice_thickness / ph.spacing;
                    let k = ratio.round();
                    if !(k >= 1.0 && (ratio - k).abs() < 1e-6) {
                        err(
                            "input.phantom.slice_thickness",
                            format!("must be a whole multiple of spacing {}, got {}", ph.spacing, ph.slice_thickness),
                        );
                    } else if ph.dims.iter().any(|&d| d % k as usize != 0) {
                        err(
                            "input.phantom.slice_thickness",
                            format!("{} slices per scan voxel do not divide dims {:?}", k, ph.dims),
                        );
                    }
                }
                if let Some([w, d]) = ph.healthy {
                    if let Err(e) = ph.spec.with_groove(w, d).validate() {
                        err("input.phantom.healthy", e.to_string());
                    }
                }
            }
            None => {
                if i.labels.is_none() {
                    err("input.labels", "required when no phantom is configured".into());
                }
            }
        }

        let f = &self.fusion;
        if f.enabled && i.fused.is_none() {
            if let Err(e) = f.inr.validate() {
                err("fusion.inr", e.to_string());
            }
            if f.inr.layers < 2 {
                err("fusion.inr.layers", format!("must be >= 2, got {}", f.inr.layers));
            }
            if f.inr.hidden == 0 {
                err("fusion.inr.hidden", "must be > 0".into());
            }
            if let ChannelPolicy::Single(k) = f.policy {
                if k > 2 {
                    err("fusion.policy", format!("channel {k} out of range for 3 scans"));
                }
            }
        }
        if let Some(s) = f.spacing {
            if !(s.is_finite() && s > 0.0) {
                err("fusion.spacing", format!("must be > 0, got {s}"));
            }
        }

        let p = &self.inpaint;
        match p.denoiser {
            DenoiserSource::Model => match &p.model {
                None => err("inpaint.model", "required when inpaint.denoiser = \"model\"".into()),
                Some(m) if !exists(m) => err("inpaint.model", format!("file not found: {}", m.display())),
                _ => {}
            },
            DenoiserSource::Oracle => {
                let healthy = i.phantom.as_ref().and_then(|ph| ph.healthy).is_some();
                match &p.oracle_labels {
                    Some(l) if !exists(l) => err("inpaint.oracle_labels", format!("file not found: {}", l.display())),
                    None if !healthy => err(
                        "inpaint.oracle_labels",
                        "oracle needs healthy labels or input.phantom.healthy".into(),
                    ),
                    _ => {}
                }
            }
        }
        if let Err(e) = NoiseSchedule::from_config(&p.schedule) {
            err("inpaint.schedule", e.to_string());
        }
        if !(p.mask.offset_mm.is_finite() && p.mask.offset_mm >= 0.0) {
            err("inpaint.mask.offset_mm", format!("must be >= 0, got {}", p.mask.offset_mm));
        }

        if self.mesh_label().is_none() {
            err("mesh.label", format!("unknown label '{}'", self.mesh.label));
        }
        let m = &self.metrics;
        if !(m.min_peak_separation.is_finite() && m.min_peak_separation >= 0.0) {
            err("metrics.min_peak_separation", format!("must be >= 0, got {}", m.min_peak_separation));
        }
        if !(0.0..0.5).contains(&m.wall_trim) {
            err("metrics.wall_trim", format!("must be in [0, 0.5), got {}", m.wall_trim));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}
