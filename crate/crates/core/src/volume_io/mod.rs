//! Image volumes, their physical geometry and NIfTI-1 persistence.
//!
//! Voxel data is stored x-fastest (`i + nx * (j + ny * k)`), which is also
//! the NIfTI on-disk order. World coordinates are millimetres:
//! `world = direction * diag(spacing) * index + origin`.

mod nifti;

pub use nifti::{
    read_deformation_field, read_mask, read_nifti, write_deformation_field, write_nifti,
    NiftiHeader, DT_FLOAT32, DT_FLOAT64, DT_INT16, DT_UINT8, INTENT_VECTOR,
};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in world space, millimetres.
pub type WorldPoint = Vector3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolumeKind {
    Intensity,
    Mask,
}

/// Sampling lattice of a volume: size, voxel spacing, position and orientation.
#[derive(Clone, Debug, PartialEq)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    /// Columns are the world-space unit vectors of the voxel axes.
    pub direction: Matrix3<f64>,
}

impl Geometry {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        direction: Matrix3<f64>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidVolume(format!(
                "every axis needs at least 2 voxels, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSpacing(spacing));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidVolume(format!("non-finite origin {origin:?}")));
        }
        let residual = direction.transpose() * direction - Matrix3::identity();
        if residual.amax() >= ORTHONORMAL_TOL {
            return Err(Error::InvalidVolume(
                "direction matrix is not orthonormal".into(),
            ));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            direction,
        })
    }

    /// Axis-aligned geometry with identity direction.
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        Self::new(dims, spacing, origin, Matrix3::identity())
    }

    /// Axis-aligned geometry whose voxel grid is centred on the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [0, 1, 2].map(|a| -((dims[a] as f64) - 1.0) * 0.5 * spacing[a]);
        Self::axis_aligned(dims, spacing, origin)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn voxel_coords(&self, linear: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [linear % nx, (linear / nx) % ny, linear / (nx * ny)]
    }

    /// Number of voxels in one z-slice.
    #[inline]
    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    /// `direction * diag(spacing)`.
    pub fn index_to_world(&self) -> Matrix3<f64> {
        self.direction * Matrix3::from_diagonal(&Vector3::from(self.spacing))
    }

    /// `diag(1/spacing) * direction^T`.
    pub fn world_to_index(&self) -> Matrix3<f64> {
        let inv = Vector3::from(self.spacing.map(|s| 1.0 / s));
        Matrix3::from_diagonal(&inv) * self.direction.transpose()
    }

    #[inline]
    pub fn voxel_to_world(&self, index: [f64; 3]) -> WorldPoint {
        self.index_to_world() * Vector3::from(index) + Vector3::from(self.origin)
    }

    #[inline]
    pub fn world_to_voxel(&self, point: &WorldPoint) -> [f64; 3] {
        let q = self.world_to_index() * (point - Vector3::from(self.origin));
        [q.x, q.y, q.z]
    }

    /// World position of every voxel centre, in storage order.
    pub fn world_points(&self) -> Vec<WorldPoint> {
        let m = self.index_to_world();
        let o = Vector3::from(self.origin);
        (0..self.len())
            .map(|l| {
                let [i, j, k] = self.voxel_coords(l);
                m * Vector3::new(i as f64, j as f64, k as f64) + o
            })
            .collect()
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// True when the index range `[0, dim-1]` contains `index` on every axis
    /// with at least `margin` voxels to spare.
    #[inline]
    pub fn contains_index(&self, index: [f64; 3], margin: f64) -> bool {
        (0..3).all(|a| index[a] >= margin && index[a] <= (self.dims[a] as f64 - 1.0) - margin)
    }

    /// Same lattice within `tol` (mm for origin, mm for spacing, absolute for direction).
    pub fn approx_eq(&self, other: &Geometry, tol: f64) -> bool {
        self.dims == other.dims
            && (0..3).all(|a| (self.spacing[a] - other.spacing[a]).abs() <= tol)
            && (0..3).all(|a| (self.origin[a] - other.origin[a]).abs() <= tol)
            && (self.direction - other.direction).amax() <= tol
    }

    pub fn center_world(&self) -> WorldPoint {
        self.voxel_to_world(self.dims.map(|d| (d as f64 - 1.0) * 0.5))
    }
}

/// A scalar volume with physical geometry. CT intensities are Hounsfield units;
/// masks hold exactly 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageVolume {
    geometry: Geometry,
    data: Vec<f64>,
    kind: VolumeKind,
}

impl ImageVolume {
    pub fn new(geometry: Geometry, data: Vec<f64>, kind: VolumeKind) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        if kind == VolumeKind::Mask && data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidVolume("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            geometry,
            data,
            kind,
        })
    }

    pub fn filled(geometry: Geometry, value: f64, kind: VolumeKind) -> Result<Self> {
        let data = vec![value; geometry.len()];
        Self::new(geometry, data, kind)
    }

    /// Builds a volume by evaluating `f(i, j, k)` at each voxel.
    pub fn from_fn<F>(geometry: Geometry, kind: VolumeKind, f: F) -> Result<Self>
    where
        F: Fn(usize, usize, usize) -> f64 + Sync + Send,
    {
        let mut data = vec![0.0; geometry.len()];
        let g = &geometry;
        crate::parallel::fill_chunks(&mut data, g.slice_len(), |_, l, v| {
            let [i, j, k] = g.voxel_coords(l);
            *v = f(i, j, k);
        });
        Self::new(geometry, data, kind)
    }

    /// Mask from a boolean per voxel.
    pub fn mask_from_bools(geometry: Geometry, bits: &[bool]) -> Result<Self> {
        let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self::new(geometry, data, VolumeKind::Mask)
    }

    #[inline]
    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    #[inline]
    pub fn is_mask(&self) -> bool {
        self.kind == VolumeKind::Mask
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geometry.linear_index(i, j, k)]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Number of voxels set in a mask (sum of values for intensities).
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    pub fn as_bools(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v > 0.5).collect()
    }
}

pub fn voxel_to_world(vol: &ImageVolume, index: [f64; 3]) -> WorldPoint {
    vol.geometry().voxel_to_world(index)
}

pub fn world_to_voxel(vol: &ImageVolume, point: &WorldPoint) -> [f64; 3] {
    vol.geometry().world_to_voxel(point)
}

/// Rotation about the z axis, handy for building oblique test geometries.
pub fn rotation_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}
