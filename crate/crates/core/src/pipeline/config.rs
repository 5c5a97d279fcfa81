use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::registration::RegistrationConfig;
use crate::volume_change::{DEFAULT_FOV_MARGIN, DEFAULT_MAX_FOLDING};

fn default_window_lo() -> f64 {
    -100.0
}
fn default_window_hi() -> f64 {
    400.0
}
fn default_spacing() -> Option<f64> {
    Some(2.0)
}
fn default_margin() -> f64 {
    DEFAULT_FOV_MARGIN
}
fn default_folding() -> f64 {
    DEFAULT_MAX_FOLDING
}

/// Output file names inside the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputNames {
    pub report: String,
    pub deformation_field: String,
    pub jacobian: String,
    pub cost_history: String,
    /// Overlays are written as `<prefix>_{sagittal,coronal,axial}.png`.
    pub overlay_prefix: String,
}

impl Default for OutputNames {
    fn default() -> Self {
        Self {
            report: "report.json".into(),
            deformation_field: "deformation_field.nii.gz".into(),
            jacobian: "jacobian.nii.gz".into(),
            cost_history: "cost_history.csv".into(),
            overlay_prefix: "overlay".into(),
        }
    }
}

/// Everything that controls a run. Loaded from TOML; unknown keys are rejected.
///
/// ```toml
/// window_lo = -100.0
/// window_hi = 400.0
/// resample_spacing = 2.0
/// fov_margin = 1.0
/// max_folding = 0.01
/// swap_phases = false
///
/// [registration]
/// levels = 3
/// bending_weight = 0.01
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_window_lo")]
    pub window_lo: f64,
    #[serde(default = "default_window_hi")]
    pub window_hi: f64,
    /// Isotropic working spacing in mm; omit to keep the fixed volume's grid.
    #[serde(default = "default_spacing")]
    pub resample_spacing: Option<f64>,
    /// Voxels a mapped point must stay inside the moving volume to count.
    #[serde(default = "default_margin")]
    pub fov_margin: f64,
    #[serde(default = "default_folding")]
    pub max_folding: f64,
    /// The fixed input is the expiration scan (labels only; the maths is unchanged).
    #[serde(default)]
    pub swap_phases: bool,
    #[serde(default)]
    pub registration: RegistrationConfig,
    #[serde(default)]
    pub output: OutputNames,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window_lo: default_window_lo(),
            window_hi: default_window_hi(),
            resample_spacing: default_spacing(),
            fov_margin: default_margin(),
            max_folding: default_folding(),
            swap_phases: false,
            registration: RegistrationConfig::default(),
            output: OutputNames::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.window_lo < self.window_hi) {
            return Err(Error::InvalidWindow {
                lo: self.window_lo,
                hi: self.window_hi,
            });
        }
        if let Some(s) = self.resample_spacing {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidSpacing([s; 3]));
            }
        }
        if !(self.fov_margin >= 0.0) {
            return bad(format!("fov_margin {} must be >= 0", self.fov_margin));
        }
        if !(0.0..=1.0).contains(&self.max_folding) {
            return bad(format!("max_folding {} must be in [0, 1]", self.max_folding));
        }
        let o = &self.output;
        for name in [&o.report, &o.deformation_field, &o.jacobian, &o.cost_history, &o.overlay_prefix] {
            if name.is_empty() || name.contains(['/', '\\']) {
                return bad(format!("output name {name:?} must be a plain file name"));
            }
        }
        self.registration.validate()
    }

    /// `sha256:<hex>` of the canonical JSON form of every field.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(json.as_bytes());
        let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
        format!("sha256:{hex}")
    }

    /// The config as a TOML document (the form `load` accepts).
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn phase_labels(&self) -> (&'static str, &'static str) {
        if self.swap_phases {
            ("expiration", "inspiration")
        } else {
            ("inspiration", "expiration")
        }
    }
}
