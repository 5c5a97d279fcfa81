//! Multi-resolution B-spline free-form deformation on top of an affine map.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::affine::affine_register_pyramid;
use super::bending::bending_energy;
use super::bspline::{compose_to_dense, ControlPointGrid};
use super::metric::evaluate;
use super::optimize::{self, Evaluation, Settings};
use super::{AffineParams, CostRecord, MetricKind, RegistrationConfig, RegistrationResult, Stage};
use crate::error::{Error, Result};
use crate::grid_ops::{gaussian_smooth, resample_onto, resample_to_spacing, trilinear_value, InterpolationKind};
use crate::volume_io::{Geometry, ImageVolume, WorldPoint};

/// One resolution level: smoothed, downsampled copies of both volumes.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub fixed: ImageVolume,
    pub moving: ImageVolume,
    /// Fixed voxels allowed into the metric sample set.
    pub(crate) sample_bits: Option<Vec<bool>>,
    /// How far (moving voxels) a mapped point must stay inside the moving faces.
    pub(crate) moving_inset: [f64; 3],
    /// One sample point per fixed voxel, jittered within the voxel.
    pub(crate) sample_points: Vec<WorldPoint>,
    /// `fixed` interpolated at `sample_points`, stored on the fixed grid.
    pub(crate) fixed_samples: ImageVolume,
}

/// Smoothing pads with edge values, so samples within this many sigmas of a
/// face see padding rather than anatomy and are left out of the metric.
const FACE_MARGIN_SIGMAS: f64 = 2.0;

/// Levels ordered coarsest first. Level `l` of `L` is downsampled by
/// `2^(L-l)` after Gaussian smoothing with `smoothing_sigma * (L - l + 1)` mm.
/// Fixed voxels closer than two sigmas to a face of the fixed volume are
/// dropped from the sample set, and mapped points must keep the same distance
/// from the moving faces.
///
/// The metric samples each fixed voxel at a random point inside it rather than
/// at its centre. With centred samples a flat, noisy region scores better when
/// it maps between moving grid nodes, where interpolation averages the noise
/// away, and the optimizer drifts there by up to half a voxel.
#[derive(Clone, Debug)]
pub struct RegistrationPyramid {
    pub levels: Vec<PyramidLevel>,
    finest: Geometry,
}

impl RegistrationPyramid {
    pub fn build(
        fixed: &ImageVolume,
        moving: &ImageVolume,
        sample_mask: Option<&ImageVolume>,
        config: &RegistrationConfig,
    ) -> Result<Self> {
        if let Some(m) = sample_mask {
            if !m.is_mask() {
                return Err(Error::NotAMask);
            }
            if !m.geometry().approx_eq(fixed.geometry(), 1e-6) {
                return Err(Error::GeometryMismatch(
                    "sample mask must share the fixed geometry".into(),
                ));
            }
        }
        let total = config.levels;
        let stride = config.sample_stride;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let offset: [usize; 3] = [0; 3].map(|_| rng.random_range(0..stride));
        let mut levels = Vec::with_capacity(total);
        for l in 1..=total {
            let factor = (1usize << (total - l)) as f64;
            let sigma = config.smoothing_sigma * (total - l + 1) as f64;
            let down = |v: &ImageVolume| -> Result<ImageVolume> {
                let s = gaussian_smooth(v, sigma);
                let target = v.geometry().spacing.map(|h| h * factor);
                resample_to_spacing(&s, target, InterpolationKind::Trilinear)
            };
            let f = down(fixed)?;
            let m = down(moving)?;
            let mut bits = sample_mask.map(|mask| {
                resample_onto(mask, f.geometry(), InterpolationKind::NearestNeighbor).as_bools()
            });
            let margin = FACE_MARGIN_SIGMAS * sigma;
            let g = f.geometry();
            let fixed_inset = g.spacing.map(|h| margin / h);
            let b = bits.get_or_insert_with(|| vec![true; g.len()]);
            for (l, keep) in b.iter_mut().enumerate() {
                let c = g.voxel_coords(l);
                let near_face = (0..3).any(|a| {
                    let i = c[a] as f64;
                    i < fixed_inset[a] || i > (g.dims[a] - 1) as f64 - fixed_inset[a]
                });
                let off_stride = (0..3).any(|a| !(c[a] + offset[a]).is_multiple_of(stride));
                if near_face || off_stride {
                    *keep = false;
                }
            }
            let moving_inset = m.geometry().spacing.map(|h| margin / h);
            let (sample_points, fixed_samples) = jittered_samples(&f, &mut rng)?;
            levels.push(PyramidLevel {
                fixed: f,
                moving: m,
                sample_bits: bits,
                moving_inset,
                sample_points,
                fixed_samples,
            });
        }
        Ok(Self {
            levels,
            finest: fixed.geometry().clone(),
        })
    }
}

/// Draws one point per voxel, uniform within the voxel and clamped to the grid,
/// and interpolates `fixed` there.
fn jittered_samples(fixed: &ImageVolume, rng: &mut ChaCha8Rng) -> Result<(Vec<WorldPoint>, ImageVolume)> {
    let g = fixed.geometry();
    let mut points = Vec::with_capacity(g.len());
    let mut values = Vec::with_capacity(g.len());
    for l in 0..g.len() {
        let c = g.voxel_coords(l);
        let q: [f64; 3] = std::array::from_fn(|a| {
            let d: f64 = rng.random_range(-0.5..0.5);
            (c[a] as f64 + d).clamp(0.0, (g.dims[a] - 1) as f64)
        });
        let v = trilinear_value(fixed.data(), g.dims, q).expect("clamped index lies in the grid");
        points.push(g.voxel_to_world(q));
        values.push(v);
    }
    Ok((points, ImageVolume::new(g.clone(), values, fixed.kind())?))
}

fn flatten(c: &[Vector3<f64>]) -> Vec<f64> {
    c.iter().flat_map(|v| [v.x, v.y, v.z]).collect()
}

fn unflatten(x: &[f64], out: &mut [Vector3<f64>]) {
    for (o, c) in out.iter_mut().zip(x.chunks_exact(3)) {
        *o = Vector3::new(c[0], c[1], c[2]);
    }
}

/// Metric, bending energy and gradients for the spline stage.
struct FfdObjective<'a> {
    fixed: &'a ImageVolume,
    moving: &'a ImageVolume,
    base: Vec<WorldPoint>,
    kind: MetricKind,
    weight: f64,
    sample_bits: Option<&'a [bool]>,
    moving_inset: [f64; 3],
}

impl FfdObjective<'_> {
    fn eval(&self, grid: &ControlPointGrid) -> Result<Evaluation> {
        let g = self.fixed.geometry();
        let s = grid.dense_displacements(g)?;
        let mapped: Vec<WorldPoint> = self.base.iter().zip(&s).map(|(b, d)| b + d).collect();
        let ev = evaluate(self.kind, self.fixed, &mapped, self.moving, self.sample_bits, self.moving_inset, true)?;
        let pg = ev.point_gradients.expect("gradient requested");
        let mut grad = grid.accumulate_to_coefficients(g, &pg)?;
        let mut bending = 0.0;
        if self.weight > 0.0 {
            let (e, ge) = bending_energy(grid);
            bending = e;
            for (a, b) in grad.iter_mut().zip(ge) {
                *a += b * self.weight;
            }
        }
        Ok(Evaluation {
            metric: ev.cost,
            bending,
            total: ev.cost + self.weight * bending,
            grad: flatten(&grad),
        })
    }
}

/// `metric + weight * bending` for `T(x) = A x + t + s(x)` and its gradient
/// with respect to every control-point coefficient.
pub fn ffd_cost_and_gradient(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    affine: &AffineParams,
    grid: &ControlPointGrid,
    kind: MetricKind,
    bending_weight: f64,
    sample_mask: Option<&[bool]>,
) -> Result<(f64, Vec<Vector3<f64>>)> {
    let obj = FfdObjective {
        fixed,
        moving,
        base: fixed
            .geometry()
            .world_points()
            .iter()
            .map(|p| affine.apply(p))
            .collect(),
        kind,
        weight: bending_weight,
        sample_bits: sample_mask,
        moving_inset: [0.0; 3],
    };
    let e = obj.eval(grid)?;
    let mut g = vec![Vector3::zeros(); grid.len()];
    unflatten(&e.grad, &mut g);
    Ok((e.total, g))
}

fn ffd_levels(
    pyramid: &RegistrationPyramid,
    affine: &AffineParams,
    config: &RegistrationConfig,
    history: &mut Vec<CostRecord>,
) -> Result<(ControlPointGrid, Vec<bool>)> {
    let mut grid =
        ControlPointGrid::for_geometry(&pyramid.finest, [config.cp_spacing_coarsest; 3])?;
    let mut converged = Vec::with_capacity(pyramid.levels.len());
    for (li, level) in pyramid.levels.iter().enumerate() {
        let level_no = li + 1;
        if li > 0 {
            grid = grid.refined();
        }
        let obj = FfdObjective {
            fixed: &level.fixed_samples,
            moving: &level.moving,
            base: level.sample_points.iter().map(|p| affine.apply(p)).collect(),
            kind: config.metric,
            weight: config.bending_weight,
            sample_bits: level.sample_bits.as_deref(),
            moving_inset: level.moving_inset,
        };
        let settings = Settings {
            max_iters: config.max_iters_per_level,
            step_init: config.step_init,
            grad_tol: config.grad_tol,
            group: 3,
            level: level_no,
        };
        let mut trial = grid.clone();
        let eval = |x: &[f64]| -> Result<Option<Evaluation>> {
            unflatten(x, &mut trial.coefficients);
            match obj.eval(&trial) {
                Ok(e) => Ok(Some(e)),
                Err(Error::EmptyOverlap) => Ok(None),
                Err(e) => Err(e),
            }
        };
        let out = optimize::descend(flatten(&grid.coefficients), &settings, eval, |it, e| {
            history.push(CostRecord {
                stage: Stage::Ffd,
                level: level_no,
                iteration: it,
                metric: e.metric,
                bending: e.bending,
                total: e.total,
            })
        })?;
        unflatten(&out.x, &mut grid.coefficients);
        converged.push(out.converged);
    }
    Ok((grid, converged))
}

/// Spline stage only, with `affine` held fixed.
pub fn ffd_register(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    affine: AffineParams,
    config: &RegistrationConfig,
    sample_mask: Option<&ImageVolume>,
) -> Result<RegistrationResult> {
    config.validate()?;
    let pyramid = RegistrationPyramid::build(fixed, moving, sample_mask, config)?;
    let mut history = Vec::new();
    let (grid, converged) = ffd_levels(&pyramid, &affine, config, &mut history)?;
    let field = compose_to_dense(&affine, &grid, fixed.geometry())?;
    Ok(RegistrationResult {
        affine,
        grid,
        field,
        cost_history: history,
        converged,
        affine_converged: Vec::new(),
    })
}

/// Affine stage from `init`, then the spline stage, sharing one pyramid.
pub fn register(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    init: AffineParams,
    config: &RegistrationConfig,
    sample_mask: Option<&ImageVolume>,
) -> Result<RegistrationResult> {
    config.validate()?;
    let pyramid = RegistrationPyramid::build(fixed, moving, sample_mask, config)?;
    let mut history = Vec::new();
    let (affine, affine_converged) = affine_register_pyramid(&pyramid, init, config, &mut history)?;
    log::info!("affine stage done: {:?}", affine);
    let (grid, converged) = ffd_levels(&pyramid, &affine, config, &mut history)?;
    let field = compose_to_dense(&affine, &grid, fixed.geometry())?;
    Ok(RegistrationResult {
        affine,
        grid,
        field,
        cost_history: history,
        converged,
        affine_converged,
    })
}
