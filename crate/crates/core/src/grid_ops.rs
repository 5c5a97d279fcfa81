//! Sampling, resampling, intensity windowing, gradients, warping and mask utilities.

use std::collections::VecDeque;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::parallel;
use crate::registration::DeformationField;
use crate::volume_io::{Geometry, ImageVolume, VolumeKind, WorldPoint};

/// Air, used for intensity samples outside the field-of-view.
pub const OUTSIDE_HU: f64 = -1024.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpolationKind {
    Trilinear,
    NearestNeighbor,
}

/// Interpolated value plus whether the index was inside the field-of-view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub value: f64,
    pub inside: bool,
}

pub fn default_outside(kind: VolumeKind) -> f64 {
    match kind {
        VolumeKind::Intensity => OUTSIDE_HU,
        VolumeKind::Mask => 0.0,
    }
}

const EDGE_TOL: f64 = 1e-9;

/// Lower cell corner and fractional offset along one axis; `None` outside `[0, n-1]`.
#[inline]
fn cell(x: f64, n: usize) -> Option<(usize, f64)> {
    let max = (n - 1) as f64;
    // Tolerate round-off from world/index round trips at the faces.
    if !(x >= -EDGE_TOL && x <= max + EDGE_TOL) {
        return None;
    }
    let x = x.clamp(0.0, max);
    let i = (x.floor() as usize).min(n - 2);
    Some((i, x - i as f64))
}

/// Trilinear interpolation on raw x-fastest data. Returns the value and its
/// derivative with respect to the continuous voxel index.
#[inline]
pub(crate) fn trilinear_value_grad(
    data: &[f64],
    dims: [usize; 3],
    idx: [f64; 3],
) -> Option<(f64, [f64; 3])> {
    let (i, tx) = cell(idx[0], dims[0])?;
    let (j, ty) = cell(idx[1], dims[1])?;
    let (k, tz) = cell(idx[2], dims[2])?;
    let nx = dims[0];
    let nxy = nx * dims[1];
    let b = i + nx * j + nxy * k;
    let c000 = data[b];
    let c100 = data[b + 1];
    let c010 = data[b + nx];
    let c110 = data[b + nx + 1];
    let c001 = data[b + nxy];
    let c101 = data[b + nxy + 1];
    let c011 = data[b + nxy + nx];
    let c111 = data[b + nxy + nx + 1];

    let c00 = c000 * (1.0 - tx) + c100 * tx;
    let c10 = c010 * (1.0 - tx) + c110 * tx;
    let c01 = c001 * (1.0 - tx) + c101 * tx;
    let c11 = c011 * (1.0 - tx) + c111 * tx;
    let c0 = c00 * (1.0 - ty) + c10 * ty;
    let c1 = c01 * (1.0 - ty) + c11 * ty;
    let value = c0 * (1.0 - tz) + c1 * tz;

    let dx0 = (c100 - c000) + ((c110 - c010) - (c100 - c000)) * ty;
    let dx1 = (c101 - c001) + ((c111 - c011) - (c101 - c001)) * ty;
    let gx = dx0 + (dx1 - dx0) * tz;
    let gy = (c10 - c00) + ((c11 - c01) - (c10 - c00)) * tz;
    let gz = c1 - c0;
    Some((value, [gx, gy, gz]))
}

#[inline]
pub(crate) fn trilinear_value(data: &[f64], dims: [usize; 3], idx: [f64; 3]) -> Option<f64> {
    let (i, tx) = cell(idx[0], dims[0])?;
    let (j, ty) = cell(idx[1], dims[1])?;
    let (k, tz) = cell(idx[2], dims[2])?;
    let nx = dims[0];
    let nxy = nx * dims[1];
    let b = i + nx * j + nxy * k;
    // Exact at both ends of the cell.
    let lerp = |a: f64, c: f64, t: f64| a * (1.0 - t) + c * t;
    let c00 = lerp(data[b], data[b + 1], tx);
    let c10 = lerp(data[b + nx], data[b + nx + 1], tx);
    let c01 = lerp(data[b + nxy], data[b + nxy + 1], tx);
    let c11 = lerp(data[b + nxy + nx], data[b + nxy + nx + 1], tx);
    Some(lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz))
}

#[inline]
fn nearest_value(data: &[f64], dims: [usize; 3], idx: [f64; 3]) -> Option<f64> {
    let mut n = [0usize; 3];
    for a in 0..3 {
        let r = idx[a].round();
        if !(r >= 0.0 && r <= (dims[a] - 1) as f64) {
            return None;
        }
        n[a] = r as usize;
    }
    Some(data[n[0] + dims[0] * (n[1] + dims[1] * n[2])])
}

/// Trilinear sample at a continuous voxel index with the kind's default outside value.
pub fn trilinear_sample(vol: &ImageVolume, index: [f64; 3]) -> Sample {
    trilinear_sample_with(vol, index, default_outside(vol.kind()))
}

pub fn trilinear_sample_with(vol: &ImageVolume, index: [f64; 3], outside: f64) -> Sample {
    match trilinear_value(vol.data(), vol.dims(), index) {
        Some(value) => Sample {
            value,
            inside: true,
        },
        None => Sample {
            value: outside,
            inside: false,
        },
    }
}

pub fn sample(vol: &ImageVolume, index: [f64; 3], interp: InterpolationKind) -> Sample {
    let outside = default_outside(vol.kind());
    let v = match interp {
        InterpolationKind::Trilinear => trilinear_value(vol.data(), vol.dims(), index),
        InterpolationKind::NearestNeighbor => nearest_value(vol.data(), vol.dims(), index),
    };
    match v {
        Some(value) => Sample {
            value,
            inside: true,
        },
        None => Sample {
            value: outside,
            inside: false,
        },
    }
}

fn check_interp(vol: &ImageVolume, interp: InterpolationKind) -> InterpolationKind {
    if vol.is_mask() && interp != InterpolationKind::NearestNeighbor {
        log::debug!("masks are always resampled nearest-neighbour");
        InterpolationKind::NearestNeighbor
    } else {
        interp
    }
}

/// Samples `vol` at the world position of every voxel of `target`.
pub fn resample_onto(vol: &ImageVolume, target: &Geometry, interp: InterpolationKind) -> ImageVolume {
    let interp = check_interp(vol, interp);
    let m = vol.geometry().world_to_index() * target.index_to_world();
    let off = vol.geometry().world_to_index()
        * (Vector3::from(target.origin) - Vector3::from(vol.geometry().origin));
    ImageVolume::from_fn(target.clone(), vol.kind(), |i, j, k| {
        let q = m * Vector3::new(i as f64, j as f64, k as f64) + off;
        sample(vol, [q.x, q.y, q.z], interp).value
    })
    .expect("resampled volume keeps kind invariants")
}

/// Resamples to a new voxel spacing covering the same world extent.
pub fn resample_to_spacing(
    vol: &ImageVolume,
    target: [f64; 3],
    interp: InterpolationKind,
) -> Result<ImageVolume> {
    if target.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidSpacing(target));
    }
    let g = vol.geometry();
    let dims = [0, 1, 2].map(|a| {
        let n = (g.dims[a] as f64 * g.spacing[a] / target[a] - 1e-9).ceil() as usize;
        n.max(2)
    });
    let out = Geometry::new(dims, target, g.origin, g.direction)?;
    if out.approx_eq(g, 0.0) {
        return Ok(vol.clone());
    }
    Ok(resample_onto(vol, &out, interp))
}

/// Linear intensity window mapped onto `[0, 1]` with clamping.
pub fn window_intensity(vol: &ImageVolume, lo: f64, hi: f64) -> Result<ImageVolume> {
    if !(lo < hi) {
        return Err(Error::InvalidWindow { lo, hi });
    }
    let scale = 1.0 / (hi - lo);
    let data = vol
        .data()
        .iter()
        .map(|&v| ((v - lo) * scale).clamp(0.0, 1.0))
        .collect();
    ImageVolume::new(vol.geometry().clone(), data, VolumeKind::Intensity)
}

/// Intensity gradient per millimetre in world axes: central differences inside,
/// one-sided differences on the faces.
pub fn central_gradient(vol: &ImageVolume, index: [usize; 3]) -> WorldPoint {
    let g = vol.geometry();
    let mut d = Vector3::zeros();
    for a in 0..3 {
        let n = g.dims[a];
        let i = index[a];
        let at = |p: usize| {
            let mut idx = index;
            idx[a] = p;
            vol.get(idx[0], idx[1], idx[2])
        };
        d[a] = if i == 0 {
            (at(1) - at(0)) / g.spacing[a]
        } else if i == n - 1 {
            (at(n - 1) - at(n - 2)) / g.spacing[a]
        } else {
            (at(i + 1) - at(i - 1)) / (2.0 * g.spacing[a])
        };
    }
    g.direction * d
}

/// Pull-back warp: `output(x) = vol(x + u(x))` on the field's grid.
pub fn warp_volume(
    vol: &ImageVolume,
    field: &DeformationField,
    interp: InterpolationKind,
) -> Result<ImageVolume> {
    warp_volume_onto(vol, field, field.geometry(), interp)
}

/// As [`warp_volume`], but checks the field against the requested output grid.
pub fn warp_volume_onto(
    vol: &ImageVolume,
    field: &DeformationField,
    output: &Geometry,
    interp: InterpolationKind,
) -> Result<ImageVolume> {
    if !field.geometry().approx_eq(output, 1e-6) {
        return Err(Error::GeometryMismatch(
            "deformation field is not defined on the requested output grid".into(),
        ));
    }
    let interp = check_interp(vol, interp);
    let fg = field.geometry();
    let w2i = vol.geometry().world_to_index();
    let vo = Vector3::from(vol.geometry().origin);
    let disp = field.displacements();
    ImageVolume::from_fn(output.clone(), vol.kind(), |i, j, k| {
        let l = fg.linear_index(i, j, k);
        let p = fg.voxel_to_world([i as f64, j as f64, k as f64]) + disp[l];
        let q = w2i * (p - vo);
        sample(vol, [q.x, q.y, q.z], interp).value
    })
}

/// Mask of voxels with `lo <= v <= hi`.
pub fn threshold_mask(vol: &ImageVolume, lo: f64, hi: f64) -> Result<ImageVolume> {
    if !(lo < hi) {
        return Err(Error::InvalidWindow { lo, hi });
    }
    let bits: Vec<bool> = vol.data().iter().map(|&v| v >= lo && v <= hi).collect();
    ImageVolume::mask_from_bools(vol.geometry().clone(), &bits)
}

/// Keeps the largest 6-connected component. Ties go to the component found first
/// in storage order.
pub fn largest_connected_component(mask: &ImageVolume) -> Result<ImageVolume> {
    if !mask.is_mask() {
        return Err(Error::NotAMask);
    }
    let g = mask.geometry();
    let [nx, ny, nz] = g.dims;
    let set = mask.as_bools();
    let mut label = vec![0u32; set.len()];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..set.len() {
        if !set[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(l) = queue.pop_front() {
            size += 1;
            let [i, j, k] = g.voxel_coords(l);
            let mut visit = |n: usize| {
                if set[n] && label[n] == 0 {
                    label[n] = next;
                    queue.push_back(n);
                }
            };
            if i > 0 {
                visit(l - 1);
            }
            if i + 1 < nx {
                visit(l + 1);
            }
            if j > 0 {
                visit(l - nx);
            }
            if j + 1 < ny {
                visit(l + nx);
            }
            if k > 0 {
                visit(l - nx * ny);
            }
            if k + 1 < nz {
                visit(l + nx * ny);
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    let bits: Vec<bool> = label.iter().map(|&l| l != 0 && l == best.0).collect();
    ImageVolume::mask_from_bools(g.clone(), &bits)
}

fn gaussian_kernel(sigma_vox: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_vox).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-0.5 * (x as f64 / sigma_vox).powi(2)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with `sigma_mm` standard deviation; edges are clamped.
pub fn gaussian_smooth(vol: &ImageVolume, sigma_mm: f64) -> ImageVolume {
    if !(sigma_mm > 0.0) {
        return vol.clone();
    }
    let g = vol.geometry();
    let dims = g.dims;
    let mut data = vol.data().to_vec();
    for axis in 0..3 {
        let sigma_vox = sigma_mm / g.spacing[axis];
        if sigma_vox < 0.1 {
            continue;
        }
        let kernel = gaussian_kernel(sigma_vox);
        let r = (kernel.len() / 2) as isize;
        let stride = [1, dims[0], dims[0] * dims[1]][axis];
        let n = dims[axis] as isize;
        let src = data.clone();
        parallel::fill_chunks(&mut data, g.slice_len(), |_, l, v| {
            let pos = ((l / stride) % dims[axis]) as isize;
            let base = l as isize - pos * stride as isize;
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let p = (pos + t as isize - r).clamp(0, n - 1);
                acc += w * src[(base + p * stride as isize) as usize];
            }
            *v = acc;
        });
    }
    ImageVolume::new(g.clone(), data, vol.kind()).expect("blur keeps length")
}

/// Sub-volume `[lo, hi)` per axis, with the origin moved so world positions are unchanged.
pub fn crop(vol: &ImageVolume, lo: [usize; 3], hi: [usize; 3]) -> Result<ImageVolume> {
    let g = vol.geometry();
    for a in 0..3 {
        if hi[a] > g.dims[a] || hi[a] < lo[a] + 2 {
            return Err(Error::InvalidVolume(format!(
                "crop [{lo:?}, {hi:?}) does not fit dims {:?}",
                g.dims
            )));
        }
    }
    let dims = [0, 1, 2].map(|a| hi[a] - lo[a]);
    let o = g.voxel_to_world(lo.map(|v| v as f64));
    let out = Geometry::new(dims, g.spacing, [o.x, o.y, o.z], g.direction)?;
    ImageVolume::from_fn(out, vol.kind(), |i, j, k| {
        vol.get(i + lo[0], j + lo[1], k + lo[2])
    })
}

/// Binary dilation by a ball of `radius_mm`.
pub fn dilate_mask(mask: &ImageVolume, radius_mm: f64) -> Result<ImageVolume> {
    if !mask.is_mask() {
        return Err(Error::NotAMask);
    }
    let g = mask.geometry();
    let r = [0, 1, 2].map(|a| (radius_mm / g.spacing[a]).floor() as isize);
    let mut offsets = Vec::new();
    for dz in -r[2]..=r[2] {
        for dy in -r[1]..=r[1] {
            for dx in -r[0]..=r[0] {
                let d2 = (dx as f64 * g.spacing[0]).powi(2)
                    + (dy as f64 * g.spacing[1]).powi(2)
                    + (dz as f64 * g.spacing[2]).powi(2);
                if d2 <= radius_mm * radius_mm {
                    offsets.push([dx, dy, dz]);
                }
            }
        }
    }
    let dims = g.dims.map(|d| d as isize);
    ImageVolume::from_fn(g.clone(), VolumeKind::Mask, |i, j, k| {
        let hit = offsets.iter().any(|o| {
            let p = [i as isize + o[0], j as isize + o[1], k as isize + o[2]];
            (0..3).all(|a| p[a] >= 0 && p[a] < dims[a])
                && mask.get(p[0] as usize, p[1] as usize, p[2] as usize) > 0.5
        });
        if hit {
            1.0
        } else {
            0.0
        }
    })
}
