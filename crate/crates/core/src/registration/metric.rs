//! Similarity metrics over the fixed grid.
//!
//! The sample set Ω is every fixed voxel allowed by the sample mask whose
//! mapped point lands inside the moving field-of-view, shrunk by an optional
//! per-axis inset (in moving voxels). Partial sums are formed
//! per fixed z-slice and folded in slice order.

use nalgebra::Vector3;

use super::{MetricKind, Transform};
use crate::error::{Error, Result};
use crate::grid_ops::trilinear_value_grad;
use crate::parallel;
use crate::volume_io::{Geometry, ImageVolume, WorldPoint};

use super::AffineParams;

/// Cost plus, when requested, `dC/dy` for each fixed voxel's mapped point `y`.
pub(crate) struct MetricEval {
    pub cost: f64,
    pub point_gradients: Option<Vec<Vector3<f64>>>,
}

#[derive(Clone, Copy, Default)]
struct Sums {
    n: f64,
    f: f64,
    m: f64,
    ff: f64,
    mm: f64,
    fm: f64,
    sq: f64,
}

impl Sums {
    fn add(&mut self, o: &Sums) {
        self.n += o.n;
        self.f += o.f;
        self.m += o.m;
        self.ff += o.ff;
        self.mm += o.mm;
        self.fm += o.fm;
        self.sq += o.sq;
    }
}

const ZERO_VARIANCE: f64 = 1e-12;

/// Evaluates `kind` for fixed values sampled against `moving` at `mapped`.
pub(crate) fn evaluate(
    kind: MetricKind,
    fixed: &ImageVolume,
    mapped: &[WorldPoint],
    moving: &ImageVolume,
    sample_mask: Option<&[bool]>,
    moving_inset: [f64; 3],
    want_gradient: bool,
) -> Result<MetricEval> {
    let fg = fixed.geometry();
    let n = fg.len();
    debug_assert_eq!(mapped.len(), n);
    let w2i = moving.geometry().world_to_index();
    // dM/dy = (dq/dy)^T dM/dq
    let i2w_t = w2i.transpose();
    let mo = Vector3::from(moving.geometry().origin);
    let md = moving.dims();
    let mdata = moving.data();
    let fdata = fixed.data();
    let slice = fg.slice_len();
    let nz = fg.dims[2];

    // Per-voxel moving value and world gradient; NaN value marks "not in Ω".
    let mut samples = vec![(f64::NAN, Vector3::zeros()); n];
    parallel::fill_chunks(&mut samples, slice, |_, l, s| {
        if sample_mask.is_some_and(|m| !m[l]) {
            return;
        }
        let q = w2i * (mapped[l] - mo);
        if (0..3).any(|a| q[a] < moving_inset[a] || q[a] > (md[a] - 1) as f64 - moving_inset[a]) {
            return;
        }
        if let Some((v, g)) = trilinear_value_grad(mdata, md, [q.x, q.y, q.z]) {
            *s = (v, i2w_t * Vector3::from(g));
        }
    });

    let partials = parallel::map_tiles(nz, |k| {
        let mut s = Sums::default();
        for l in k * slice..(k + 1) * slice {
            let m = samples[l].0;
            if m.is_nan() {
                continue;
            }
            let f = fdata[l];
            s.n += 1.0;
            s.f += f;
            s.m += m;
            s.ff += f * f;
            s.mm += m * m;
            s.fm += f * m;
            s.sq += (f - m) * (f - m);
        }
        s
    });
    let mut t = Sums::default();
    for p in &partials {
        t.add(p);
    }
    let count = t.n as usize;
    let min_count = match kind {
        MetricKind::Ssd => 1,
        MetricKind::Ncc => 8,
    };
    if count < min_count {
        return Err(Error::EmptyOverlap);
    }

    // dC/dm for each sample in Ω, as a closure over global sums.
    let (cost, dcdm): (f64, Box<dyn Fn(f64, f64) -> f64 + Sync>) = match kind {
        MetricKind::Ssd => {
            let inv = 1.0 / t.n;
            (t.sq * inv, Box::new(move |f, m| -2.0 * (f - m) * inv))
        }
        MetricKind::Ncc => {
            let fbar = t.f / t.n;
            let mbar = t.m / t.n;
            let sff = (t.ff - t.n * fbar * fbar).max(0.0);
            let smm = (t.mm - t.n * mbar * mbar).max(0.0);
            let sfm = t.fm - t.n * fbar * mbar;
            if sff <= ZERO_VARIANCE * t.n || smm <= ZERO_VARIANCE * t.n {
                log::warn!("zero intensity variance over the sample set; NCC cost set to 1");
                (1.0, Box::new(|_, _| 0.0))
            } else {
                let denom = (sff * smm).sqrt();
                let r = sfm / denom;
                (
                    1.0 - r * r,
                    Box::new(move |f, m| -2.0 * r * ((f - fbar) / denom - r * (m - mbar) / smm)),
                )
            }
        }
    };

    let point_gradients = if want_gradient {
        let mut g = vec![Vector3::zeros(); n];
        parallel::fill_chunks(&mut g, slice, |_, l, out| {
            let (m, dm) = samples[l];
            if !m.is_nan() {
                *out = dm * dcdm(fdata[l], m);
            }
        });
        Some(g)
    } else {
        None
    };
    Ok(MetricEval {
        cost,

        point_gradients,
    })
}

fn mask_bits(fixed: &ImageVolume, sample_mask: Option<&ImageVolume>) -> Result<Option<Vec<bool>>> {
    match sample_mask {
        None => Ok(None),
        Some(m) => {
            if !m.is_mask() {
                return Err(Error::NotAMask);
            }
            if !m.geometry().approx_eq(fixed.geometry(), 1e-6) {
                return Err(Error::GeometryMismatch(
                    "sample mask must be on the fixed grid".into(),
                ));
            }
            Ok(Some(m.as_bools()))
        }
    }
}

/// Metric value of `kind` for `transform`.
pub fn metric_value(
    kind: MetricKind,
    fixed: &ImageVolume,
    moving: &ImageVolume,
    transform: &dyn Transform,
    sample_mask: Option<&ImageVolume>,
) -> Result<f64> {
    let bits = mask_bits(fixed, sample_mask)?;
    let mapped = transform.map_grid(fixed.geometry())?;
    Ok(evaluate(kind, fixed, &mapped, moving, bits.as_deref(), [0.0; 3], false)?.cost)
}

/// Mean squared intensity difference over Ω.
pub fn ssd_metric(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    transform: &dyn Transform,
    sample_mask: Option<&ImageVolume>,
) -> Result<f64> {
    metric_value(MetricKind::Ssd, fixed, moving, transform, sample_mask)
}

/// `1 - r^2` with `r` the Pearson correlation over Ω.
pub fn ncc_metric(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    transform: &dyn Transform,
    sample_mask: Option<&ImageVolume>,
) -> Result<f64> {
    metric_value(MetricKind::Ncc, fixed, moving, transform, sample_mask)
}

fn centroid(vol: &ImageVolume) -> Result<WorldPoint> {
    centroid_within(vol, None)
}

/// Intensity centroid over the voxels lying inside `region`'s field of view
/// (all voxels when `region` is `None`).
fn centroid_within(vol: &ImageVolume, region: Option<&Geometry>) -> Result<WorldPoint> {
    let g = vol.geometry();
    let inside = |l: usize| {
        region.is_none_or(|r| {
            let q = r.world_to_voxel(&g.voxel_to_world(g.voxel_coords(l).map(|c| c as f64)));
            (0..3).all(|a| q[a] >= -0.5 && q[a] <= r.dims[a] as f64 - 0.5)
        })
    };
    let slice = g.slice_len();
    let partials = parallel::map_tiles(g.dims[2], |k| {
        let mut w = 0.0;
        let mut acc = Vector3::zeros();
        for l in k * slice..(k + 1) * slice {
            let weight = (vol.data()[l] + 1024.0).max(0.0);
            if weight > 0.0 && inside(l) {
                let [i, j, kk] = g.voxel_coords(l);
                acc += Vector3::new(i as f64, j as f64, kk as f64) * weight;
                w += weight;
            }
        }
        (w, acc)
    });
    let (mut w, mut acc) = (0.0, Vector3::zeros());
    for (pw, pa) in partials {
        w += pw;
        acc += pa;
    }
    if !(w > 0.0) {
        return Err(Error::DegenerateVolume(
            "total intensity weight is zero".into(),
        ));
    }
    let idx = acc / w;
    Ok(g.voxel_to_world([idx.x, idx.y, idx.z]))
}

/// Translation aligning intensity centroids (weights `HU + 1024`, clamped at 0).
pub fn center_of_mass_init(fixed: &ImageVolume, moving: &ImageVolume) -> Result<AffineParams> {
    if fixed.is_mask() || moving.is_mask() {
        return Err(Error::DegenerateVolume(
            "centre-of-mass initialisation needs intensity volumes".into(),
        ));
    }
    let cf = centroid(fixed)?;
    let cm = centroid(moving)?;
    Ok(AffineParams::translation(cm - cf))
}

/// Like [`center_of_mass_init`], but each centroid only counts voxels that the
/// other scan also covers, so a shorter scan does not drag the estimate along
/// its own axis. Falls back to whole-volume centroids when the scans share no
/// weighted voxels.
pub fn overlap_center_of_mass_init(fixed: &ImageVolume, moving: &ImageVolume) -> Result<AffineParams> {
    if fixed.is_mask() || moving.is_mask() {
        return Err(Error::DegenerateVolume(
            "centre-of-mass initialisation needs intensity volumes".into(),
        ));
    }
    match (
        centroid_within(fixed, Some(moving.geometry())),
        centroid_within(moving, Some(fixed.geometry())),
    ) {
        (Ok(cf), Ok(cm)) => Ok(AffineParams::translation(cm - cf)),
        _ => center_of_mass_init(fixed, moving),
    }
}
