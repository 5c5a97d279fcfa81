//! Twelve-parameter affine alignment.
//!
//! Internally the transform is written about the fixed-volume centre `c`,
//! `T(x) = A (x - c) + c + tau`, and the linear part is scaled by a radius `R`
//! (half the largest fixed extent) so one unit of any parameter moves points
//! by roughly one millimetre.

use nalgebra::{Matrix3, Vector3};

use super::ffd::RegistrationPyramid;
use super::metric::evaluate;
use super::optimize::{self, Evaluation, Settings};
use super::{AffineParams, CostRecord, MetricKind, RegistrationConfig, Stage};
use crate::error::{Error, Result};
use crate::parallel;
use crate::volume_io::{Geometry, ImageVolume, WorldPoint};

/// Metric value and its gradient with respect to `[A (row-major), t]` of
/// `T(x) = A x + t`.
pub fn affine_cost_and_gradient(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    params: &AffineParams,
    kind: MetricKind,
    sample_mask: Option<&[bool]>,
) -> Result<(f64, [f64; 12])> {
    let g = fixed.geometry();
    let points = g.world_points();
    let (cost, ga, gt) = cost_grad(fixed, moving, params, kind, sample_mask, [0.0; 3], &points)?;
    let mut out = [0.0; 12];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = ga[(r, c)];
        }
        out[9 + r] = gt[r];
    }
    Ok((cost, out))
}

fn cost_grad(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    params: &AffineParams,
    kind: MetricKind,
    sample_mask: Option<&[bool]>,
    moving_inset: [f64; 3],
    points: &[WorldPoint],
) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    let g = fixed.geometry();
    let mapped: Vec<WorldPoint> = points.iter().map(|p| params.apply(p)).collect();
    let ev = evaluate(kind, fixed, &mapped, moving, sample_mask, moving_inset, true)?;
    let pg = ev.point_gradients.expect("gradient requested");
    let slice = g.slice_len();
    let partials = parallel::map_tiles(g.dims[2], |k| {
        let mut ga = Matrix3::zeros();
        let mut gt = Vector3::zeros();
        for l in k * slice..(k + 1) * slice {
            let d = pg[l];
            if d == Vector3::zeros() {
                continue;
            }
            ga += d * points[l].transpose();
            gt += d;
        }
        (ga, gt)
    });
    let mut ga = Matrix3::zeros();
    let mut gt = Vector3::zeros();
    for (a, t) in partials {
        ga += a;
        gt += t;
    }
    Ok((ev.cost, ga, gt))
}

struct Param {
    center: Vector3<f64>,
    radius: f64,
}

impl Param {
    fn new(g: &Geometry) -> Self {
        let extent = (0..3)
            .map(|a| (g.dims[a] - 1) as f64 * g.spacing[a])
            .fold(0.0, f64::max);
        Self {
            center: g.center_world(),
            radius: (0.5 * extent).max(1.0),
        }
    }

    fn encode(&self, p: &AffineParams) -> Vec<f64> {
        let tau = p.translation + p.linear * self.center - self.center;
        let mut x = Vec::with_capacity(12);
        for r in 0..3 {
            for c in 0..3 {
                x.push(p.linear[(r, c)] * self.radius);
            }
        }
        x.extend_from_slice(tau.as_slice());
        x
    }

    fn decode(&self, x: &[f64]) -> AffineParams {
        let a = Matrix3::from_fn(|r, c| x[3 * r + c] / self.radius);
        let tau = Vector3::new(x[9], x[10], x[11]);
        AffineParams {
            linear: a,
            translation: self.center + tau - a * self.center,
        }
    }

    /// Chain rule from raw `(dC/dA, dC/dt)` to the scaled centred parameters.
    fn gradient(&self, ga: &Matrix3<f64>, gt: &Vector3<f64>) -> Vec<f64> {
        let gl = (ga - gt * self.center.transpose()) / self.radius;
        let mut out = Vec::with_capacity(12);
        for r in 0..3 {
            for c in 0..3 {
                out.push(gl[(r, c)]);
            }
        }
        out.extend_from_slice(gt.as_slice());
        out
    }
}

/// Runs affine descent over every pyramid level, coarsest first.
pub(crate) fn affine_register_pyramid(
    pyramid: &RegistrationPyramid,
    init: AffineParams,
    config: &RegistrationConfig,
    history: &mut Vec<CostRecord>,
) -> Result<(AffineParams, Vec<bool>)> {
    let mut current = init;
    let mut converged = Vec::new();
    for (li, level) in pyramid.levels.iter().enumerate() {
        let level_no = li + 1;
        let fixed = &level.fixed_samples;
        let param = Param::new(fixed.geometry());
        let points = &level.sample_points;
        let mask = level.sample_bits.as_deref();
        let settings = Settings {
            max_iters: config.max_iters_per_level,
            step_init: config.step_init,
            grad_tol: config.grad_tol,
            group: 1,
            level: level_no,
        };
        let eval = |x: &[f64]| -> Result<Option<Evaluation>> {
            let p = param.decode(x);
            if !p.is_valid() {
                return Ok(None);
            }
            match cost_grad(fixed, &level.moving, &p, config.metric, mask, level.moving_inset, points) {
                Ok((cost, ga, gt)) => Ok(Some(Evaluation {
                    metric: cost,
                    bending: 0.0,
                    total: cost,
                    grad: param.gradient(&ga, &gt),
                })),
                Err(Error::EmptyOverlap) => Ok(None),
                Err(e) => Err(e),
            }
        };
        let out = optimize::descend(param.encode(&current), &settings, eval, |it, e| {
            history.push(CostRecord {
                stage: Stage::Affine,
                level: level_no,
                iteration: it,
                metric: e.metric,
                bending: 0.0,
                total: e.total,
            })
        })?;
        current = param.decode(&out.x);
        converged.push(out.converged);
    }
    Ok((current, converged))
}

/// Affine registration of windowed volumes starting from `init`.
pub fn affine_register(
    fixed: &ImageVolume,
    moving: &ImageVolume,
    init: AffineParams,
    config: &RegistrationConfig,
) -> Result<AffineParams> {
    config.validate()?;
    let pyramid = RegistrationPyramid::build(fixed, moving, None, config)?;
    let mut history = Vec::new();
    affine_register_pyramid(&pyramid, init, config, &mut history).map(|(p, _)| p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_encoding_round_trips() {
        let g = Geometry::centered([10, 12, 14], [2.0; 3]).unwrap();
        let p = Param::new(&g);
        let a = AffineParams {
            linear: Matrix3::new(1.1, 0.02, 0.0, -0.01, 0.95, 0.03, 0.0, 0.01, 1.02),
            translation: Vector3::new(3.0, -1.0, 7.0),
        };
        let back = p.decode(&p.encode(&a));
        assert!((back.linear - a.linear).amax() < 1e-12);
        assert!((back.translation - a.translation).amax() < 1e-12);
    }
}
