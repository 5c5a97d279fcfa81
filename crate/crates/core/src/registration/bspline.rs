//! Uniform cubic B-spline control lattice.
//!
//! The lattice shares the fixed image's direction, so evaluating it on any
//! grid with that direction separates into three 1D passes of four taps each.
//! Continuous lattice coordinates are `q = diag(1/spacing) * D^T (p - origin)`;
//! a point is supported when `1 <= q <= dims - 2` on every axis.

use nalgebra::{Matrix3, Vector3};

use super::{AffineParams, DeformationField};
use crate::error::{Error, Result};
use crate::parallel;
use crate::volume_io::{Geometry, WorldPoint};

/// Uniform cubic B-spline weights for fractional offset `t` in `[0, 1]`.
#[inline]
pub fn bspline_basis(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [
        s * s * s / 6.0,
        (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0,
        (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0,
        t3 / 6.0,
    ]
}

/// First control index and weights for lattice coordinate `q`, if supported.
#[inline]
fn support(q: f64, m: usize) -> Option<(usize, [f64; 4])> {
    const TOL: f64 = 1e-9;
    if !(q >= 1.0 - TOL && q <= (m - 2) as f64 + TOL) {
        return None;
    }
    let q = q.clamp(1.0, (m - 2) as f64);
    let c = (q.floor() as usize).min(m - 3);
    Some((c - 1, bspline_basis(q - c as f64)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlPointGrid {
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub dims: [usize; 3],
    pub direction: Matrix3<f64>,
    /// Displacement (mm, world frame) per control point, x-fastest.
    pub coefficients: Vec<Vector3<f64>>,
}

/// Sparse rows of a 1D linear map: `out[o] = sum(w * in[i])`.
type AxisRows = Vec<Vec<(usize, f64)>>;

impl ControlPointGrid {
    /// Zero lattice covering `geometry` with one ring of control points beyond
    /// the field-of-view on each side plus one spare.
    pub fn for_geometry(geometry: &Geometry, spacing: [f64; 3]) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidSpacing(spacing));
        }
        let dims = [0, 1, 2].map(|a| {
            let extent = (geometry.dims[a] - 1) as f64 * geometry.spacing[a];
            ((extent / spacing[a]) - 1e-9).ceil().max(0.0) as usize + 4
        });
        let shift = geometry.direction * Vector3::from(spacing);
        let o = Vector3::from(geometry.origin) - shift;
        Ok(Self {
            origin: [o.x, o.y, o.z],
            spacing,
            dims,
            direction: geometry.direction,
            coefficients: vec![Vector3::zeros(); dims.iter().product()],
        })
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Continuous lattice coordinate of a world point.
    pub fn lattice_coords(&self, p: &WorldPoint) -> [f64; 3] {
        let d = self.direction.transpose() * (p - Vector3::from(self.origin));
        [d.x / self.spacing[0], d.y / self.spacing[1], d.z / self.spacing[2]]
    }

    /// World position of control point `(i, j, k)`.
    pub fn control_point_world(&self, i: usize, j: usize, k: usize) -> WorldPoint {
        let local = Vector3::new(
            i as f64 * self.spacing[0],
            j as f64 * self.spacing[1],
            k as f64 * self.spacing[2],
        );
        self.direction * local + Vector3::from(self.origin)
    }

    fn check_direction(&self, geometry: &Geometry) -> Result<()> {
        if (self.direction - geometry.direction).amax() > 1e-9 {
            return Err(Error::GeometryMismatch(
                "control grid and image have different directions".into(),
            ));
        }
        Ok(())
    }

    /// Per-axis `(first control index, weights)` for every voxel of `geometry`.
    fn axis_weights(&self, geometry: &Geometry) -> Result<[Vec<(usize, [f64; 4])>; 3]> {
        self.check_direction(geometry)?;
        let off = self.direction.transpose()
            * (Vector3::from(geometry.origin) - Vector3::from(self.origin));
        let mut out: [Vec<(usize, [f64; 4])>; 3] = Default::default();
        for a in 0..3 {
            for i in 0..geometry.dims[a] {
                let q = (i as f64 * geometry.spacing[a] + off[a]) / self.spacing[a];
                let s = support(q, self.dims[a]).ok_or_else(|| {
                    let mut idx = [0.0; 3];
                    idx[a] = i as f64;
                    let p = geometry.voxel_to_world(idx);
                    Error::OutsideSupport([p.x, p.y, p.z])
                })?;
                out[a].push(s);
            }
        }
        Ok(out)
    }

    fn forward_rows(w: &[(usize, [f64; 4])]) -> AxisRows {
        w.iter()
            .map(|&(b, ws)| (0..4).map(|t| (b + t, ws[t])).collect())
            .collect()
    }

    fn transposed_rows(w: &[(usize, [f64; 4])], m: usize) -> AxisRows {
        let mut rows: AxisRows = vec![Vec::new(); m];
        for (i, &(b, ws)) in w.iter().enumerate() {
            for t in 0..4 {
                rows[b + t].push((i, ws[t]));
            }
        }
        rows
    }

    /// Spline displacement at every voxel of `geometry`, by separable passes.
    pub fn dense_displacements(&self, geometry: &Geometry) -> Result<Vec<Vector3<f64>>> {
        let w = self.axis_weights(geometry)?;
        let mut data = self.coefficients.clone();
        let mut dims = self.dims;
        for a in 0..3 {
            let rows = Self::forward_rows(&w[a]);
            data = axis_apply(&data, dims, a, &rows);
            dims[a] = rows.len();
        }
        Ok(data)
    }

    /// Adjoint of [`dense_displacements`]: accumulates per-voxel vectors onto
    /// control points, `out[k] = sum_x B_k(x) v(x)`.
    pub fn accumulate_to_coefficients(
        &self,
        geometry: &Geometry,
        values: &[Vector3<f64>],
    ) -> Result<Vec<Vector3<f64>>> {
        if values.len() != geometry.len() {
            return Err(Error::GeometryMismatch("value count differs from grid".into()));
        }
        let w = self.axis_weights(geometry)?;
        let mut data = values.to_vec();
        let mut dims = geometry.dims;
        for a in (0..3).rev() {
            let rows = Self::transposed_rows(&w[a], self.dims[a]);
            data = axis_apply(&data, dims, a, &rows);
            dims[a] = self.dims[a];
        }
        Ok(data)
    }

    /// Same function on a lattice with half the spacing (dyadic subdivision).
    pub fn refined(&self) -> ControlPointGrid {
        let mut data = self.coefficients.clone();
        let mut dims = self.dims;
        for a in 0..3 {
            let m = self.dims[a];
            let n = 2 * m - 2;
            let at = |j: isize| j.clamp(0, m as isize - 1) as usize;
            let rows: AxisRows = (0..n)
                .map(|k| {
                    if k % 2 == 1 {
                        let j = k.div_ceil(2) as isize;
                        vec![(at(j - 1), 0.125), (at(j), 0.75), (at(j + 1), 0.125)]
                    } else {
                        let j = (k / 2) as isize;
                        vec![(at(j), 0.5), (at(j + 1), 0.5)]
                    }
                })
                .collect();
            data = axis_apply(&data, dims, a, &rows);
            dims[a] = n;
        }
        let spacing = self.spacing.map(|s| 0.5 * s);
        let o = Vector3::from(self.origin) + self.direction * Vector3::from(spacing);
        ControlPointGrid {
            origin: [o.x, o.y, o.z],
            spacing,
            dims,
            direction: self.direction,
            coefficients: data,
        }
    }
}

/// Applies a sparse 1D map along `axis` of an x-fastest 3D array.
fn axis_apply(
    src: &[Vector3<f64>],
    dims: [usize; 3],
    axis: usize,
    rows: &[Vec<(usize, f64)>],
) -> Vec<Vector3<f64>> {
    let mut out_dims = dims;
    out_dims[axis] = rows.len();
    let stride_in = [1, dims[0], dims[0] * dims[1]];
    let mut out = vec![Vector3::zeros(); out_dims.iter().product()];
    let slice = out_dims[0] * out_dims[1];
    parallel::fill_chunks(&mut out, slice, |_, l, v| {
        let c = [
            l % out_dims[0],
            (l / out_dims[0]) % out_dims[1],
            l / slice,
        ];
        let mut base = 0;
        for a in 0..3 {
            if a != axis {
                base += c[a] * stride_in[a];
            }
        }
        let mut acc = Vector3::zeros();
        for &(i, w) in &rows[c[axis]] {
            acc += src[base + i * stride_in[axis]] * w;
        }
        *v = acc;
    });
    out
}

/// Spline displacement at one world point (64-term tensor-product sum).
pub fn bspline_evaluate(grid: &ControlPointGrid, point: &WorldPoint) -> Result<Vector3<f64>> {
    let q = grid.lattice_coords(point);
    let mut sup = [(0usize, [0.0; 4]); 3];
    for a in 0..3 {
        sup[a] = support(q[a], grid.dims[a])
            .ok_or(Error::OutsideSupport([point.x, point.y, point.z]))?;
    }
    let mut u = Vector3::zeros();
    for (c, wz) in sup[2].1.iter().enumerate() {
        for (b, wy) in sup[1].1.iter().enumerate() {
            let wzy = wz * wy;
            for (a, wx) in sup[0].1.iter().enumerate() {
                let l = grid.linear_index(sup[0].0 + a, sup[1].0 + b, sup[2].0 + c);
                u += grid.coefficients[l] * (wzy * wx);
            }
        }
    }
    Ok(u)
}

/// Dense field `u(x) = A x + t + s(x) - x` on `geometry`.
pub fn compose_to_dense(
    affine: &AffineParams,
    grid: &ControlPointGrid,
    geometry: &Geometry,
) -> Result<DeformationField> {
    let s = grid.dense_displacements(geometry)?;
    let disp = geometry
        .world_points()
        .iter()
        .zip(s)
        .map(|(p, d)| affine.apply(p) + d - p)
        .collect();
    DeformationField::new(geometry.clone(), disp)
}
