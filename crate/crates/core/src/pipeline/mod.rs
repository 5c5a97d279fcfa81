//! End-to-end measurement from NIfTI files to a report and QC artifacts.

mod config;
mod overlay;

pub use config::{OutputNames, PipelineConfig};
pub use overlay::{render_overlay, write_png, RgbImage, CONTOUR_RGB};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::deformation_analysis::{jacobian_determinant_field, JacobianField};
use crate::error::{Error, Result};
use crate::grid_ops::{
    dilate_mask, resample_onto, resample_to_spacing, warp_volume, window_intensity, InterpolationKind,
};
use crate::phantom::{synthesize_phantom_pair, AnalyticWarp, PhantomSpec};
use crate::registration::{overlap_center_of_mass_init, register, RegistrationResult};
use crate::volume_change::{fov_valid_mask, measure_partial_volume_change};
use crate::volume_io::{
    read_deformation_field, read_mask, read_nifti, write_deformation_field, write_nifti, ImageVolume,
};

/// JSON schema of the report file.
pub const REPORT_SCHEMA: &str = include_str!("report.schema.json");

/// The report as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub v_fixed_ml: f64,
    pub v_mapped_ml: f64,
    pub delta_percent: f64,
    pub coverage_fraction: f64,
    pub folding_fraction: f64,
    pub n_voxels: usize,
    pub voxel_volume_ml: f64,
    pub fixed_phase: String,
    pub moving_phase: String,
    pub config_digest: String,
    /// Relative to the report's directory.
    pub cost_history_path: String,
    /// Seconds since the Unix epoch; omitted in deterministic runs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub created_unix: Option<u64>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Checks a parsed report against [`REPORT_SCHEMA`]: required keys, types,
/// ranges and no extra keys.
pub fn validate_report(value: &Value) -> Result<()> {
    let schema: Value = serde_json::from_str(REPORT_SCHEMA).expect("bundled schema parses");
    let bad = |m: String| Err(Error::InvalidVolume(format!("report: {m}")));
    let Some(obj) = value.as_object() else {
        return bad("not an object".into());
    };
    let props = schema["properties"].as_object().expect("schema has properties");
    for key in schema["required"].as_array().expect("schema has required") {
        let key = key.as_str().expect("required keys are strings");
        if !obj.contains_key(key) {
            return bad(format!("missing {key}"));
        }
    }
    for (key, v) in obj {
        let Some(p) = props.get(key) else {
            return bad(format!("unexpected key {key}"));
        };
        let ok = match p["type"].as_str() {
            Some("number") => v.is_number(),
            Some("integer") => v.is_u64(),
            Some("string") => v.is_string(),
            _ => false,
        };
        if !ok {
            return bad(format!("{key} has the wrong type"));
        }
        if let Some(x) = v.as_f64() {
            if p.get("minimum").and_then(Value::as_f64).is_some_and(|m| x < m)
                || p.get("maximum").and_then(Value::as_f64).is_some_and(|m| x > m)
            {
                return bad(format!("{key} = {x} is out of range"));
            }
        }
        if let (Some(allowed), Some(s)) = (p.get("enum").and_then(Value::as_array), v.as_str()) {
            if !allowed.iter().any(|a| a.as_str() == Some(s)) {
                return bad(format!("{key} = {s:?} is not allowed"));
            }
        }
    }
    Ok(())
}

pub struct PipelineInputs<'a> {
    pub fixed: &'a Path,
    pub moving: &'a Path,
    pub mask: &'a Path,
}

/// Volumes already on disk or in memory, as handed to [`run_volumes`].
pub struct LoadedInputs {
    pub fixed: ImageVolume,
    pub moving: ImageVolume,
    pub mask: ImageVolume,
}

pub struct RunOutput {
    pub report: RunReport,
    pub registration: RegistrationResult,
    pub jacobian: JacobianField,
    /// Liver mask on the working grid.
    pub mask: ImageVolume,
    pub report_path: PathBuf,
}

pub fn load_inputs(inputs: &PipelineInputs) -> Result<LoadedInputs> {
    Ok(LoadedInputs {
        fixed: read_nifti(inputs.fixed)?,
        moving: read_nifti(inputs.moving)?,
        mask: read_mask(inputs.mask)?,
    })
}

/// Reads the three files and runs [`run_volumes`].
pub fn run_pipeline(
    inputs: &PipelineInputs,
    config: &PipelineConfig,
    out_dir: &Path,
    deterministic: bool,
) -> Result<RunOutput> {
    config.validate()?;
    let loaded = load_inputs(inputs)?;
    run_volumes(loaded, config, out_dir, deterministic)
}

/// Window, resample, register, integrate det J, and write all artifacts.
///
/// The deformation field, Jacobian, cost history and overlays are written
/// before the volume measurement so they survive a folding failure.
pub fn run_volumes(
    inputs: LoadedInputs,
    config: &PipelineConfig,
    out_dir: &Path,
    deterministic: bool,
) -> Result<RunOutput> {
    config.validate()?;
    let LoadedInputs { fixed, moving, mask } = inputs;
    let mut mask = mask;
    if !mask.geometry().approx_eq(fixed.geometry(), 1e-3) {
        log::warn!("liver mask grid differs from the fixed volume; resampling (nearest neighbour)");
        mask = resample_onto(&mask, fixed.geometry(), InterpolationKind::NearestNeighbor);
    }
    if mask.count() == 0 {
        return Err(Error::EmptyMask);
    }

    // Centre of mass on raw HU, before windowing flattens the body contrast.
    let init = overlap_center_of_mass_init(&fixed, &moving)?;
    let (lo, hi) = (config.window_lo, config.window_hi);
    let mut f = window_intensity(&fixed, lo, hi)?;
    let mut m = window_intensity(&moving, lo, hi)?;
    if let Some(s) = config.resample_spacing {
        f = resample_to_spacing(&f, [s; 3], InterpolationKind::Trilinear)?;
        m = resample_to_spacing(&m, [s; 3], InterpolationKind::Trilinear)?;
        mask = resample_onto(&mask, f.geometry(), InterpolationKind::NearestNeighbor);
    }
    let sample_mask = match config.registration.metric_mask_dilation_mm {
        Some(r) => Some(dilate_mask(&mask, r)?),
        None => None,
    };

    let reg = register(&f, &m, init, &config.registration, sample_mask.as_ref())?;
    let jac = jacobian_determinant_field(&reg.field);

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let names = &config.output;
    write_deformation_field(&reg.field, out_dir.join(&names.deformation_field))?;
    write_nifti(&jac.to_volume(), out_dir.join(&names.jacobian))?;
    let cost_path = out_dir.join(&names.cost_history);
    std::fs::write(&cost_path, reg.cost_history_csv()).map_err(|e| Error::io(&cost_path, e))?;
    write_overlays(&f, &m, &reg, &mask, out_dir, &names.overlay_prefix)?;

    let valid = fov_valid_mask(&reg.field, m.geometry(), config.fov_margin)?;
    let vc = measure_partial_volume_change(&mask, &jac, &valid, config.max_folding)?;
    let (fixed_phase, moving_phase) = config.phase_labels();
    let report = RunReport {
        v_fixed_ml: vc.v_fixed_ml,
        v_mapped_ml: vc.v_mapped_ml,
        delta_percent: vc.delta_percent,
        coverage_fraction: vc.coverage_fraction,
        folding_fraction: vc.folding_fraction,
        n_voxels: vc.n_voxels,
        voxel_volume_ml: vc.voxel_volume_ml,
        fixed_phase: fixed_phase.into(),
        moving_phase: moving_phase.into(),
        config_digest: config.digest(),
        cost_history_path: names.cost_history.clone(),
        created_unix: (!deterministic).then(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        }),
    };
    let report_path = out_dir.join(&names.report);
    std::fs::write(&report_path, report.to_json()).map_err(|e| Error::io(&report_path, e))?;
    Ok(RunOutput {
        report,
        registration: reg,
        jacobian: jac,
        mask,
        report_path,
    })
}

/// Reads a vector-field NIfTI and writes its det J as a scalar NIfTI.
pub fn jacobian_file(field_path: &Path, out_path: &Path) -> Result<JacobianField> {
    let field = read_deformation_field(field_path)?;
    let jac = jacobian_determinant_field(&field);
    write_nifti(&jac.to_volume(), out_path)?;
    Ok(jac)
}

/// Windowed slice of `vol_path` with the outline of `mask_path`, as PNG.
pub fn overlay_file(
    vol_path: &Path,
    mask_path: &Path,
    axis: usize,
    index: usize,
    window: (f64, f64),
    out_path: &Path,
) -> Result<RgbImage> {
    let vol = read_nifti(vol_path)?;
    let mut mask = read_mask(mask_path)?;
    if !mask.geometry().approx_eq(vol.geometry(), 1e-3) {
        log::warn!("mask grid differs from the volume; resampling (nearest neighbour)");
        mask = resample_onto(&mask, vol.geometry(), InterpolationKind::NearestNeighbor);
    }
    let img = render_overlay(&vol, &mask, axis, index, window)?;
    write_png(out_path, &img)?;
    Ok(img)
}

/// Contents of `truth.json` next to a synthesized phantom pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub ground_truth_delta_percent: f64,
    pub warp: AnalyticWarp,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub seed: u64,
    pub noise_sigma: f64,
}

/// Writes `fixed.nii.gz`, `moving.nii.gz`, `liver_mask.nii.gz` and `truth.json`.
pub fn write_phantom_case(spec: &PhantomSpec, warp: &AnalyticWarp, out_dir: &Path) -> Result<PhantomTruth> {
    let (pair, mask) = synthesize_phantom_pair(spec, warp)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_nifti(&pair.fixed, out_dir.join("fixed.nii.gz"))?;
    write_nifti(&pair.moving, out_dir.join("moving.nii.gz"))?;
    write_nifti(&mask, out_dir.join("liver_mask.nii.gz"))?;
    let truth = PhantomTruth {
        ground_truth_delta_percent: pair.ground_truth_delta_percent,
        warp: warp.clone(),
        dims: spec.dims,
        spacing: spec.spacing,
        seed: spec.seed,
        noise_sigma: spec.noise_sigma,
    };
    let path = out_dir.join("truth.json");
    let mut text = serde_json::to_string_pretty(&truth).expect("truth serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(truth)
}

/// Warped moving volume with the liver outline, through the mask centroid.
fn write_overlays(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    reg: &RegistrationResult,
    mask: &ImageVolume,
    out_dir: &Path,
    prefix: &str,
) -> Result<()> {
    let warped = warp_volume(moving, &reg.field, InterpolationKind::Trilinear)?;
    let g = fixed.geometry();
    let mut centroid = [0.0; 3];
    let mut n = 0.0;
    for (l, v) in mask.data().iter().enumerate() {
        if *v > 0.5 {
            let c = g.voxel_coords(l);
            for a in 0..3 {
                centroid[a] += c[a] as f64;
            }
            n += 1.0;
        }
    }
    for (axis, name) in ["sagittal", "coronal", "axial"].iter().enumerate() {
        let index = if n > 0.0 {
            (centroid[axis] / n).round() as usize
        } else {
            g.dims[axis] / 2
        };
        let img = render_overlay(&warped, mask, axis, index, (0.0, 1.0))?;
        write_png(&out_dir.join(format!("{prefix}_{name}.png")), &img)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunReport {
        RunReport {
            v_fixed_ml: 100.0,
            v_mapped_ml: 108.0,
            delta_percent: 8.0,
            coverage_fraction: 1.0,
            folding_fraction: 0.0,
            n_voxels: 12500,
            voxel_volume_ml: 0.008,
            fixed_phase: "inspiration".into(),
            moving_phase: "expiration".into(),
            config_digest: "sha256:00".into(),
            cost_history_path: "cost_history.csv".into(),
            created_unix: None,
        }
    }

    #[test]
    fn report_validates() {
        let v: Value = serde_json::from_str(&sample().to_json()).unwrap();
        validate_report(&v).unwrap();
        let stamped = RunReport {
            created_unix: Some(1),
            ..sample()
        };
        validate_report(&serde_json::to_value(stamped).unwrap()).unwrap();
    }

    #[test]
    fn schema_violations_are_caught() {
        let mut v = serde_json::to_value(sample()).unwrap();
        v["coverage_fraction"] = 1.5.into();
        assert!(validate_report(&v).is_err());
        let mut v = serde_json::to_value(sample()).unwrap();
        v.as_object_mut().unwrap().remove("delta_percent");
        assert!(validate_report(&v).is_err());
        let mut v = serde_json::to_value(sample()).unwrap();
        v["extra"] = 1.into();
        assert!(validate_report(&v).is_err());
        let mut v = serde_json::to_value(sample()).unwrap();
        v["fixed_phase"] = "exhale".into();
        assert!(validate_report(&v).is_err());
    }
}
