//! Synthetic inspiration/expiration pairs with an ellipsoidal liver and
//! analytically known warps.
//!
//! World `z` points superior (towards the lungs). The fixed volume is the
//! phantom itself; the moving volume shows the tissue at `x` at `warp(x)`.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_ops::{trilinear_sample_with, OUTSIDE_HU};
use crate::parallel;
use crate::volume_io::{Geometry, ImageVolume, VolumeKind, WorldPoint};

/// Compression that gives the default respiratory warp a +8% liver volume
/// change on the default phantom (solved once by bisection on the 4x oracle).
pub const RESPIRATORY_COMPRESSION_8PCT: f64 = 0.07977178340544933;

/// A straight tube inside the liver, drawn at body intensity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vessel {
    /// Any point on the axis (mm).
    pub point: [f64; 3],
    /// Axis direction; need not be normalised.
    pub direction: [f64; 3],
    pub radius: f64,
}

impl Vessel {
    fn contains(&self, p: &WorldPoint) -> bool {
        let d = Vector3::from(self.direction).normalize();
        let r = p - Vector3::from(self.point);
        (r - d * r.dot(&d)).norm_squared() <= self.radius * self.radius
    }
}

/// Oblique tubes through the default liver. Without them the liver interior is
/// flat and its motion can only be inferred from the surface.
fn default_vessels() -> Vec<Vessel> {
    let v = |point: [f64; 3], direction: [f64; 3]| Vessel {
        point,
        direction,
        radius: 3.0,
    };
    vec![
        v([-15.0, 0.0, -20.0], [1.0, 0.0, 1.0]),
        v([-30.0, 12.0, -12.0], [0.0, 1.0, 1.0]),
        v([0.0, -12.0, -30.0], [1.0, 1.0, -1.0]),
        v([-42.0, -15.0, -25.0], [1.0, -1.0, 2.0]),
        v([12.0, 15.0, -8.0], [-2.0, 1.0, 1.0]),
        v([-20.0, -20.0, -5.0], [2.0, 1.0, -1.0]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Liver ellipsoid semi-axes (mm).
    pub liver_axes: [f64; 3],
    pub liver_center: [f64; 3],
    pub liver_hu: f64,
    pub body_hu: f64,
    pub lung_hu: f64,
    pub background_hu: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Torso cross-section semi-axes in x and y (mm).
    pub body_axes: [f64; 2],
    /// Half length of the torso along z; `None` runs it through the volume.
    pub body_half_length: Option<f64>,
    /// Lowest point of the lung dome (mm).
    pub lung_base_z: f64,
    /// How far the dome rises at the lateral lung wall (mm).
    pub lung_dome_rise: f64,
    /// Gap between torso wall and lungs (mm).
    pub lung_inset: f64,
    /// Relative amplitude of a periodic bulge of the torso cross-section along
    /// z; gives the otherwise z-invariant torso structure at every level.
    pub body_ripple: f64,
    /// Period of that bulge (mm).
    pub body_ripple_period: f64,
    /// Sub-samples per axis averaged into each voxel. 1 samples the voxel
    /// centre only (piecewise-constant); larger values mimic partial volume.
    pub partial_volume: usize,
    /// Tubes of body intensity inside the liver. The liver mask still covers
    /// them.
    pub liver_vessels: Vec<Vessel>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [96; 3],
            spacing: [2.0; 3],
            liver_axes: [60.0, 45.0, 40.0],
            liver_center: [-15.0, 0.0, -20.0],
            liver_hu: 90.0,
            body_hu: 40.0,
            lung_hu: -800.0,
            background_hu: OUTSIDE_HU,
            noise_sigma: 10.0,
            seed: 0,
            body_axes: [88.0, 68.0],
            body_half_length: None,
            lung_base_z: 25.0,
            lung_dome_rise: 15.0,
            lung_inset: 8.0,
            body_ripple: 0.06,
            body_ripple_period: 80.0,
            partial_volume: 1,
            liver_vessels: default_vessels(),
        }
    }
}

impl PhantomSpec {
    /// Volume grid centred on the world origin.
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::centered(self.dims, self.spacing).map_err(|e| Error::SpecInvalid(e.to_string()))
    }

    fn in_liver(&self, p: &WorldPoint) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.liver_center[a]) / self.liver_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Cross-section scale of the torso at height `z`.
    fn ripple(&self, z: f64) -> f64 {
        1.0 + self.body_ripple * (std::f64::consts::TAU * z / self.body_ripple_period).sin()
    }

    fn in_body(&self, p: &WorldPoint) -> bool {
        let f = self.ripple(p.z);
        let r = (p.x / (f * self.body_axes[0])).powi(2) + (p.y / (f * self.body_axes[1])).powi(2);
        r <= 1.0 && self.body_half_length.is_none_or(|h| p.z.abs() <= h)
    }

    fn in_lung(&self, p: &WorldPoint) -> bool {
        let f = self.ripple(p.z);
        let ax = f * self.body_axes[0] - self.lung_inset;
        let ay = f * self.body_axes[1] - self.lung_inset;
        let r = (p.x / ax).powi(2) + (p.y / ay).powi(2);
        r <= 1.0 && p.z > self.lung_base_z + self.lung_dome_rise * r && self.in_body(p)
    }

    /// Noise-free tissue value at a world point.
    pub fn tissue_hu(&self, p: &WorldPoint) -> f64 {
        if self.in_liver(p) {
            if self.liver_vessels.iter().any(|v| v.contains(p)) {
                self.body_hu
            } else {
                self.liver_hu
            }
        } else if self.in_lung(p) {
            self.lung_hu
        } else if self.in_body(p) {
            self.body_hu
        } else {
            self.background_hu
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if self.dims.iter().any(|&d| d < 2) {
            return bad(format!("dims {:?} must be at least 2", self.dims));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return bad(format!("spacing {:?} must be positive", self.spacing));
        }
        if self.liver_axes.iter().any(|&s| !(s > 0.0)) || self.body_axes.iter().any(|&s| !(s > 0.0)) {
            return bad("semi-axes must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise sigma must be non-negative".into());
        }
        if !(0.0..0.5).contains(&self.body_ripple) || !(self.body_ripple_period > 0.0) {
            return bad("body ripple must be in [0, 0.5) with a positive period".into());
        }
        for v in &self.liver_vessels {
            let finite = v.point.iter().chain(&v.direction).all(|c| c.is_finite());
            if !finite || Vector3::from(v.direction).norm() == 0.0 || !(v.radius > 0.0) {
                return bad(format!("vessel {v:?} needs a finite point, a non-zero direction and a positive radius"));
            }
        }
        if !(1..=8).contains(&self.partial_volume) {
            return bad("partial_volume must be between 1 and 8".into());
        }
        let finite = [self.liver_hu, self.body_hu, self.lung_hu, self.background_hu, self.lung_base_z]
            .iter()
            .chain(&self.liver_center)
            .all(|v| v.is_finite());
        if !finite {
            return bad("intensities and positions must be finite".into());
        }
        // The ellipsoid surface, sampled densely, must stay inside the torso.
        let c = Vector3::from(self.liver_center);
        let n = 48;
        for i in 0..=n {
            let theta = std::f64::consts::PI * i as f64 / n as f64;
            for j in 0..2 * n {
                let phi = std::f64::consts::PI * j as f64 / n as f64;
                let p = c + Vector3::new(
                    self.liver_axes[0] * theta.sin() * phi.cos(),
                    self.liver_axes[1] * theta.sin() * phi.sin(),
                    self.liver_axes[2] * theta.cos(),
                );
                if !self.in_body(&p) {
                    return bad("liver ellipsoid does not fit inside the torso".into());
                }
            }
        }
        Ok(())
    }

    /// Analytic ellipsoid volume, ml.
    pub fn liver_volume_ml(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.liver_axes.iter().product::<f64>() / 1000.0
    }
}

/// Adds `N(0, sigma^2)` noise; stream `stream_base + k` drives z-slice `k`, so
/// the draw is independent of scheduling.
fn add_noise(data: &mut [f64], g: &Geometry, sigma: f64, seed: u64, stream_base: u64) {
    if sigma <= 0.0 {
        return;
    }
    parallel::for_each_chunk_mut(data, g.slice_len(), |k, chunk| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_base + k as u64);
        for v in chunk.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * z;
        }
    });
}

/// Offsets (voxel units) of the sub-sample centres averaged into a voxel.
fn sub_offsets(n: usize) -> Vec<[f64; 3]> {
    let t: Vec<f64> = (0..n).map(|s| (s as f64 + 0.5) / n as f64 - 0.5).collect();
    let mut out = Vec::with_capacity(n * n * n);
    for &c in &t {
        for &b in &t {
            for &a in &t {
                out.push([a, b, c]);
            }
        }
    }
    out
}

/// Noise-free intensities on `g`: each voxel averages `tissue_hu(pull(p))`
/// over its sub-sample points `p`.
fn render(
    spec: &PhantomSpec,
    g: &Geometry,
    pull: impl Fn(&WorldPoint) -> Result<WorldPoint> + Sync,
) -> Result<Vec<f64>> {
    let offsets = sub_offsets(spec.partial_volume);
    let inv = 1.0 / offsets.len() as f64;
    let mut data = vec![0.0; g.len()];
    let failure = std::sync::Mutex::new(None);
    parallel::fill_chunks(&mut data, g.slice_len(), |_, l, v| {
        let c = g.voxel_coords(l);
        let mut acc = 0.0;
        for o in &offsets {
            let p = g.voxel_to_world([c[0] as f64 + o[0], c[1] as f64 + o[1], c[2] as f64 + o[2]]);
            match pull(&p) {
                Ok(x) => acc += spec.tissue_hu(&x),
                Err(e) => {
                    failure.lock().expect("no panics while held").get_or_insert(e);
                    return;
                }
            }
        }
        *v = acc * inv;
    });
    match failure.into_inner().expect("no panics while held") {
        Some(e) => Err(e),
        None => Ok(data),
    }
}

/// Streams at or above this drive the moving scan's noise.
const MOVING_STREAM_BASE: u64 = 1 << 32;

fn liver_mask(spec: &PhantomSpec, g: &Geometry) -> Result<ImageVolume> {
    ImageVolume::from_fn(g.clone(), VolumeKind::Mask, |i, j, k| {
        if spec.in_liver(&g.voxel_to_world([i as f64, j as f64, k as f64])) {
            1.0
        } else {
            0.0
        }
    })
}

/// Phantom volume (HU) and its exact liver indicator.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(ImageVolume, ImageVolume)> {
    spec.validate()?;
    let g = spec.geometry()?;
    let mut data = render(spec, &g, |p| Ok(*p))?;
    add_noise(&mut data, &g, spec.noise_sigma, spec.seed, 0);
    let vol = ImageVolume::new(g.clone(), data, VolumeKind::Intensity)?;
    Ok((vol, liver_mask(spec, &g)?))
}

/// Smooth, orientation-preserving maps with closed-form Jacobians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalyticWarp {
    Translation {
        offset: [f64; 3],
    },
    UniformScale {
        factor: f64,
        center: [f64; 3],
    },
    /// `u_a(x) = sum_b coefficients[a][b] * (x_b - center_b)^2`.
    Polynomial {
        center: [f64; 3],
        coefficients: [[f64; 3]; 3],
    },
    /// Cranio-caudal push plus antero-posterior compression, both following
    /// `g(z) = 1 / (1 + exp(-(z - boundary_z) / sharpness))`:
    /// `T(x, y, z) = (x, cy + (y - cy)(1 - compression g), z + amplitude_z g)`.
    Respiratory {
        amplitude_z: f64,
        compression: f64,
        sharpness: f64,
        boundary_z: f64,
        center_y: f64,
    },
}

const INVERSE_TOL_MM: f64 = 1e-6;
const INVERSE_MAX_ITERS: usize = 50;

impl AnalyticWarp {
    pub fn identity() -> Self {
        AnalyticWarp::Translation { offset: [0.0; 3] }
    }

    /// Respiratory fixture tuned to +8% on the default phantom.
    pub fn respiratory_default() -> Self {
        AnalyticWarp::Respiratory {
            amplitude_z: 30.0,
            compression: RESPIRATORY_COMPRESSION_8PCT,
            sharpness: 60.0,
            boundary_z: 20.0,
            center_y: 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AnalyticWarp::Translation { .. } => "translation",
            AnalyticWarp::UniformScale { .. } => "uniform_scale",
            AnalyticWarp::Polynomial { .. } => "polynomial",
            AnalyticWarp::Respiratory { .. } => "respiratory",
        }
    }

    fn params(&self) -> Vec<f64> {
        match self {
            AnalyticWarp::Translation { offset } => offset.to_vec(),
            AnalyticWarp::UniformScale { factor, center } => {
                std::iter::once(*factor).chain(center.iter().copied()).collect()
            }
            AnalyticWarp::Polynomial { center, coefficients } => center
                .iter()
                .chain(coefficients.iter().flatten())
                .copied()
                .collect(),
            AnalyticWarp::Respiratory {
                amplitude_z,
                compression,
                sharpness,
                boundary_z,
                center_y,
            } => vec![*amplitude_z, *compression, *sharpness, *boundary_z, *center_y],
        }
    }

    fn logistic(z: f64, boundary: f64, sharpness: f64) -> (f64, f64) {
        let g = 1.0 / (1.0 + (-(z - boundary) / sharpness).exp());
        (g, g * (1.0 - g) / sharpness)
    }

    pub fn map(&self, p: &WorldPoint) -> WorldPoint {
        match self {
            AnalyticWarp::Translation { offset } => p + Vector3::from(*offset),
            AnalyticWarp::UniformScale { factor, center } => {
                let c = Vector3::from(*center);
                c + (p - c) * *factor
            }
            AnalyticWarp::Polynomial { center, coefficients } => {
                let d = p - Vector3::from(*center);
                let sq = d.component_mul(&d);
                p + Matrix3::from_fn(|a, b| coefficients[a][b]) * sq
            }
            AnalyticWarp::Respiratory {
                amplitude_z,
                compression,
                sharpness,
                boundary_z,
                center_y,
            } => {
                let (g, _) = Self::logistic(p.z, *boundary_z, *sharpness);
                Vector3::new(
                    p.x,
                    center_y + (p.y - center_y) * (1.0 - compression * g),
                    p.z + amplitude_z * g,
                )
            }
        }
    }

    /// `dT/dx` at `p`.
    pub fn jacobian(&self, p: &WorldPoint) -> Matrix3<f64> {
        match self {
            AnalyticWarp::Translation { .. } => Matrix3::identity(),
            AnalyticWarp::UniformScale { factor, .. } => Matrix3::identity() * *factor,
            AnalyticWarp::Polynomial { center, coefficients } => {
                let d = p - Vector3::from(*center);
                Matrix3::identity() + Matrix3::from_fn(|a, b| 2.0 * coefficients[a][b] * d[b])
            }
            AnalyticWarp::Respiratory {
                amplitude_z,
                compression,
                sharpness,
                boundary_z,
                center_y,
            } => {
                let (g, gp) = Self::logistic(p.z, *boundary_z, *sharpness);
                let mut j = Matrix3::identity();
                j[(1, 1)] = 1.0 - compression * g;
                j[(1, 2)] = -(p.y - center_y) * compression * gp;
                j[(2, 2)] = 1.0 + amplitude_z * gp;
                j
            }
        }
    }

    /// Closed-form `det dT/dx`.
    pub fn det(&self, p: &WorldPoint) -> f64 {
        match self {
            AnalyticWarp::Translation { .. } => 1.0,
            AnalyticWarp::UniformScale { factor, .. } => factor.powi(3),
            AnalyticWarp::Polynomial { .. } => self.jacobian(p).determinant(),
            AnalyticWarp::Respiratory {
                amplitude_z,
                compression,
                sharpness,
                boundary_z,
                ..
            } => {
                // Triangular Jacobian: product of the diagonal.
                let (g, gp) = Self::logistic(p.z, *boundary_z, *sharpness);
                (1.0 - compression * g) * (1.0 + amplitude_z * gp)
            }
        }
    }

    /// Solves `T(x) = y` by the fixed-point iteration `x <- y - u(x)`.
    pub fn inverse(&self, y: &WorldPoint) -> Result<WorldPoint> {
        let mut x = *y;
        for _ in 0..INVERSE_MAX_ITERS {
            let r = self.map(&x) - y;
            if r.norm() <= INVERSE_TOL_MM {
                return Ok(x);
            }
            x -= r;
            if !x.iter().all(|v| v.is_finite()) {
                break;
            }
        }
        Err(Error::WarpNotInvertible([y.x, y.y, y.z]))
    }

    /// Parameters finite and `det > 0` at every voxel of `domain`.
    pub fn validate_on(&self, domain: &Geometry) -> Result<()> {
        if !self.params().iter().all(|v| v.is_finite()) {
            return Err(Error::SpecInvalid(format!("{} warp has non-finite parameters", self.name())));
        }
        if let AnalyticWarp::Respiratory { sharpness, .. } = self {
            if !(*sharpness > 0.0) {
                return Err(Error::SpecInvalid("respiratory sharpness must be positive".into()));
            }
        }
        if let Some(p) = domain.world_points().into_iter().find(|p| self.det(p) <= 0.0) {
            return Err(Error::SpecInvalid(format!(
                "{} warp folds at ({:.1}, {:.1}, {:.1})",
                self.name(),
                p.x,
                p.y,
                p.z
            )));
        }
        Ok(())
    }
}

/// Mapped point and closed-form det J.
pub fn warp_analytic(warp: &AnalyticWarp, point: &WorldPoint) -> (WorldPoint, f64) {
    (warp.map(point), warp.det(point))
}

/// Percent volume change of the mask under `warp`: mean det J over a regular
/// `supersample^3` sub-grid of every mask voxel.
pub fn ground_truth_volume_change(mask: &ImageVolume, warp: &AnalyticWarp, supersample: usize) -> Result<f64> {
    if !mask.is_mask() {
        return Err(Error::NotAMask);
    }
    let ss = supersample.max(1);
    let g = mask.geometry();
    let offsets: Vec<f64> = (0..ss).map(|t| (t as f64 + 0.5) / ss as f64 - 0.5).collect();
    let data = mask.data();
    let slice = g.slice_len();
    let partials = parallel::map_tiles(g.dims[2], |k| {
        let mut sum = 0.0;
        let mut n = 0usize;
        for l in k * slice..(k + 1) * slice {
            if data[l] <= 0.5 {
                continue;
            }
            let c = g.voxel_coords(l).map(|v| v as f64);
            for oz in &offsets {
                for oy in &offsets {
                    for ox in &offsets {
                        let p = g.voxel_to_world([c[0] + ox, c[1] + oy, c[2] + oz]);
                        sum += warp.det(&p);
                        n += 1;
                    }
                }
            }
        }
        (sum, n)
    });
    let (sum, n) = partials
        .into_iter()
        .fold((0.0, 0usize), |(s, n), (a, b)| (s + a, n + b));
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(100.0 * (sum / n as f64 - 1.0))
}

#[derive(Clone, Debug)]
pub struct SyntheticPair {
    /// Inspiration phase.
    pub fixed: ImageVolume,
    /// Expiration phase.
    pub moving: ImageVolume,
    pub ground_truth_delta_percent: f64,
}

/// Builds the moving volume by pulling the phantom back through the inverse warp,
/// replicating the phantom's faces where the pre-image leaves its grid.
pub fn synthesize_pair(phantom: &ImageVolume, mask: &ImageVolume, warp: &AnalyticWarp) -> Result<SyntheticPair> {
    let g = phantom.geometry();
    if !mask.geometry().approx_eq(g, 1e-6) {
        return Err(Error::GeometryMismatch("phantom and mask grids differ".into()));
    }
    warp.validate_on(g)?;
    let w2i = g.world_to_index();
    let origin = Vector3::from(g.origin);
    let points = g.world_points();
    let mut data = vec![0.0; g.len()];
    let failure = std::sync::Mutex::new(None);
    parallel::fill_chunks(&mut data, g.slice_len(), |_, l, v| {
        match warp.inverse(&points[l]) {
            Ok(x) => {
                // Pre-images beyond the phantom grid take the nearest face value:
                // the anatomy continues past the scanned slab rather than ending in air.
                let q = w2i * (x - origin);
                let q = [0, 1, 2].map(|a| q[a].clamp(0.0, (g.dims[a] - 1) as f64));
                *v = trilinear_sample_with(phantom, q, OUTSIDE_HU).value;
            }
            Err(e) => {
                let mut f = failure.lock().expect("no panics while held");
                f.get_or_insert(e);
            }
        }
    });
    if let Some(e) = failure.into_inner().expect("no panics while held") {
        return Err(e);
    }
    let moving = ImageVolume::new(g.clone(), data, VolumeKind::Intensity)?;
    Ok(SyntheticPair {
        fixed: phantom.clone(),
        moving,
        ground_truth_delta_percent: ground_truth_volume_change(mask, warp, 4)?,
    })
}

/// Pair rendered from the tissue model itself: the fixed scan samples the
/// phantom at `x`, the moving scan samples it at `warp^-1(y)`, and each gets
/// its own noise draw. Unlike [`synthesize_pair`] the two scans share no noise
/// and no interpolation blur. Returns the pair and the fixed liver mask.
pub fn synthesize_phantom_pair(spec: &PhantomSpec, warp: &AnalyticWarp) -> Result<(SyntheticPair, ImageVolume)> {
    let (fixed, mask) = generate_phantom(spec)?;
    let g = fixed.geometry().clone();
    warp.validate_on(&g)?;
    let mut data = render(spec, &g, |y| warp.inverse(y))?;
    add_noise(&mut data, &g, spec.noise_sigma, spec.seed, MOVING_STREAM_BASE);
    let moving = ImageVolume::new(g, data, VolumeKind::Intensity)?;
    let truth = ground_truth_volume_change(&mask, warp, 4)?;
    Ok((
        SyntheticPair {
            fixed,
            moving,
            ground_truth_delta_percent: truth,
        },
        mask,
    ))
}

/// Respiratory warp whose compression is solved by bisection so the mask's
/// ground-truth change equals `target_percent`.
pub fn calibrate_respiratory(
    mask: &ImageVolume,
    amplitude_z: f64,
    sharpness: f64,
    boundary_z: f64,
    center_y: f64,
    target_percent: f64,
) -> Result<AnalyticWarp> {
    let make = |c: f64| AnalyticWarp::Respiratory {
        amplitude_z,
        compression: c,
        sharpness,
        boundary_z,
        center_y,
    };
    // Volume change decreases monotonically with compression.
    let f = |c: f64| ground_truth_volume_change(mask, &make(c), 4).map(|v| v - target_percent);
    let (mut lo, mut hi) = (-0.5, 0.9);
    let (flo, fhi) = (f(lo)?, f(hi)?);
    if flo < 0.0 || fhi > 0.0 {
        return Err(Error::SpecInvalid(format!(
            "target {target_percent}% is out of reach for this amplitude"
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(make(0.5 * (lo + hi)))
}
