//! Jacobian determinant, folding and displacement statistics of a dense field.

use nalgebra::{Matrix3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::parallel;
use crate::registration::DeformationField;
use crate::volume_io::{Geometry, ImageVolume, VolumeKind};

/// Per-voxel `det(I + du/dx)` on the field's grid.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianField {
    geometry: Geometry,
    det: Vec<f64>,
}

impl JacobianField {
    pub fn new(geometry: Geometry, det: Vec<f64>) -> Result<Self> {
        if det.len() != geometry.len() {
            return Err(Error::InvalidVolume(format!(
                "{} determinants for {} voxels",
                det.len(),
                geometry.len()
            )));
        }
        Ok(Self { geometry, det })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn det(&self) -> &[f64] {
        &self.det
    }

    /// As a scalar intensity volume, e.g. for writing to NIfTI.
    pub fn to_volume(&self) -> ImageVolume {
        ImageVolume::new(self.geometry.clone(), self.det.clone(), VolumeKind::Intensity)
            .expect("length checked on construction")
    }
}

/// Derivative of the displacement along voxel axis `a` at index `c` (per voxel step).
fn axis_diff(u: &[Vector3<f64>], dims: [usize; 3], c: [usize; 3], a: usize) -> Vector3<f64> {
    let stride = [1, dims[0], dims[0] * dims[1]][a];
    let l = c[0] + dims[0] * (c[1] + dims[1] * c[2]);
    let n = dims[a];
    if c[a] == 0 {
        u[l + stride] - u[l]
    } else if c[a] == n - 1 {
        u[l] - u[l - stride]
    } else {
        (u[l + stride] - u[l - stride]) * 0.5
    }
}

/// `J = I + du/dx` by central differences inside, one-sided on faces.
pub fn jacobian_determinant_field(field: &DeformationField) -> JacobianField {
    let g = field.geometry().clone();
    let u = field.displacements();
    let dims = g.dims;
    // du/dx = (du/dq) (dq/dx), with dq/dx the world-to-index matrix.
    let w2i = g.world_to_index();
    let mut det = vec![0.0; g.len()];
    parallel::fill_chunks(&mut det, g.slice_len(), |_, l, d| {
        let c = g.voxel_coords(l);
        let dq = Matrix3::from_columns(&[
            axis_diff(u, dims, c, 0),
            axis_diff(u, dims, c, 1),
            axis_diff(u, dims, c, 2),
        ]);
        let j = Matrix3::identity() + dq * w2i;
        *d = det3(&j);
    });
    JacobianField { geometry: g, det }
}

/// Direct cofactor expansion along the first row.
fn det3(m: &Matrix3<f64>) -> f64 {
    m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
        - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
        + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
}

fn check_mask(mask: &ImageVolume, g: &Geometry) -> Result<()> {
    if !mask.is_mask() {
        return Err(Error::NotAMask);
    }
    if !mask.geometry().approx_eq(g, 1e-6) {
        return Err(Error::GeometryMismatch("mask grid differs from field grid".into()));
    }
    Ok(())
}

/// Fraction of in-mask voxels with `det <= 0`.
pub fn folding_fraction(jac: &JacobianField, mask: &ImageVolume) -> Result<f64> {
    check_mask(mask, &jac.geometry)?;
    let mut n = 0usize;
    let mut folded = 0usize;
    for (d, m) in jac.det.iter().zip(mask.data()) {
        if *m > 0.5 {
            n += 1;
            if *d <= 0.0 {
                folded += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(folded as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DisplacementStats {
    pub mean_mag: f64,
    pub max_mag: f64,
    /// Nearest-rank 99th percentile.
    pub p99_mag: f64,
    pub mean_axis: [f64; 3],
}

/// Magnitude statistics of `u` over the mask.
pub fn displacement_stats(field: &DeformationField, mask: &ImageVolume) -> Result<DisplacementStats> {
    check_mask(mask, field.geometry())?;
    let mut mags = Vec::new();
    let mut axis = Vector3::zeros();
    for (u, m) in field.displacements().iter().zip(mask.data()) {
        if *m > 0.5 {
            mags.push(u.norm());
            axis += u;
        }
    }
    if mags.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = mags.len();
    let mean = mags.iter().sum::<f64>() / n as f64;
    mags.sort_by(f64::total_cmp);
    let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
    let axis = axis / n as f64;
    Ok(DisplacementStats {
        mean_mag: mean,
        max_mag: mags[n - 1],
        p99_mag: mags[rank - 1],
        mean_axis: [axis.x, axis.y, axis.z],
    })
}
