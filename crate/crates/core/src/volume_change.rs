//! Partial-liver volume change: det J integrated over the liver mask,
//! restricted to fixed voxels whose mapped point stays inside the moving scan.

use serde::{Deserialize, Serialize};

use crate::deformation_analysis::JacobianField;
use crate::error::{Error, Result};
use crate::registration::DeformationField;
use crate::volume_io::{Geometry, ImageVolume};

pub const DEFAULT_FOV_MARGIN: f64 = 1.0;
pub const DEFAULT_MAX_FOLDING: f64 = 0.01;

/// Fixed-grid mask: 1 where `T(x)` lies at least `margin` voxels inside the moving FOV.
#[derive(Clone, Debug, PartialEq)]
pub struct FovValidityMask(pub ImageVolume);

impl FovValidityMask {
    pub fn mask(&self) -> &ImageVolume {
        &self.0
    }

    pub fn valid_fraction(&self) -> f64 {
        self.0.count() as f64 / self.0.geometry().len() as f64
    }
}

pub fn fov_valid_mask(
    field: &DeformationField,
    moving_geometry: &Geometry,
    margin: f64,
) -> Result<FovValidityMask> {
    if !(margin >= 0.0) {
        return Err(Error::InvalidConfig(format!("fov margin {margin} must be >= 0")));
    }
    let bits: Vec<bool> = field
        .mapped_points()
        .iter()
        .map(|y| {
            let q = moving_geometry.world_to_voxel(y);
            (0..3).all(|a| {
                q[a] >= margin && q[a] <= (moving_geometry.dims[a] - 1) as f64 - margin
            })
        })
        .collect();
    Ok(FovValidityMask(ImageVolume::mask_from_bools(
        field.geometry().clone(),
        &bits,
    )?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeChangeReport {
    pub v_fixed_ml: f64,
    pub v_mapped_ml: f64,
    pub delta_percent: f64,
    pub coverage_fraction: f64,
    pub folding_fraction: f64,
    pub n_voxels: usize,
    pub voxel_volume_ml: f64,
    pub config_digest: String,
}

/// Indices of `liver ∩ valid`, plus the liver voxel count.
fn region(liver: &ImageVolume, jac: &JacobianField, valid: &FovValidityMask) -> Result<(Vec<usize>, usize)> {
    if !liver.is_mask() || !valid.0.is_mask() {
        return Err(Error::NotAMask);
    }
    let g = jac.geometry();
    if !liver.geometry().approx_eq(g, 1e-6) || !valid.0.geometry().approx_eq(g, 1e-6) {
        return Err(Error::GeometryMismatch(
            "liver mask, Jacobian and validity mask must share one grid".into(),
        ));
    }
    let mut n_liver = 0;
    let mut omega = Vec::new();
    for (l, (m, v)) in liver.data().iter().zip(valid.0.data()).enumerate() {
        if *m > 0.5 {
            n_liver += 1;
            if *v > 0.5 {
                omega.push(l);
            }
        }
    }
    if omega.is_empty() {
        return Err(Error::EmptyRegion);
    }
    Ok((omega, n_liver))
}

/// Volume change over `liver ∩ valid`. Positive means the moving phase is larger.
pub fn measure_partial_volume_change(
    liver_mask: &ImageVolume,
    jac: &JacobianField,
    valid: &FovValidityMask,
    max_folding: f64,
) -> Result<VolumeChangeReport> {
    let (omega, n_liver) = region(liver_mask, jac, valid)?;
    let det = jac.det();
    let n = omega.len();
    let sum: f64 = omega.iter().map(|&l| det[l]).sum();
    let folded = omega.iter().filter(|&&l| det[l] <= 0.0).count();
    let folding = folded as f64 / n as f64;
    if folding > max_folding {
        return Err(Error::FoldingExceeded {
            fraction: folding,
            max: max_folding,
        });
    }
    let voxel_ml = jac.geometry().voxel_volume_mm3() / 1000.0;
    let v_fixed = n as f64 * voxel_ml;
    let v_mapped = sum * voxel_ml;
    Ok(VolumeChangeReport {
        v_fixed_ml: v_fixed,
        v_mapped_ml: v_mapped,
        delta_percent: 100.0 * (v_mapped - v_fixed) / v_fixed,
        coverage_fraction: n as f64 / n_liver as f64,
        folding_fraction: folding,
        n_voxels: n,
        voxel_volume_ml: voxel_ml,
        config_digest: String::new(),
    })
}

/// Mean det J over `liver ∩ valid`.
pub fn mean_jacobian(liver_mask: &ImageVolume, jac: &JacobianField, valid: &FovValidityMask) -> Result<f64> {
    let (omega, _) = region(liver_mask, jac, valid)?;
    let det = jac.det();
    Ok(omega.iter().map(|&l| det[l]).sum::<f64>() / omega.len() as f64)
}
