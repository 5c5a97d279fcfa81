//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repeat_core::phantom::{synthesize_phantom_pair, AnalyticWarp, PhantomSpec};
use repeat_core::pipeline::{run_volumes, LoadedInputs, PipelineConfig, RunOutput};
use repeat_core::registration::Stage;
use repeat_core::volume_io::{Geometry, ImageVolume, VolumeKind};

/// A finished phantom run plus the fixture it came from.
pub struct PhantomRun {
    pub output: RunOutput,
    pub truth_percent: f64,
    pub fixed_mask: ImageVolume,
    pub seconds: f64,
}

pub fn run_phantom(spec: &PhantomSpec, warp: &AnalyticWarp, config: &PipelineConfig, out: &Path) -> PhantomRun {
    let (pair, mask) = synthesize_phantom_pair(spec, warp).expect("phantom pair");
    let inputs = LoadedInputs {
        fixed: pair.fixed,
        moving: pair.moving,
        mask: mask.clone(),
    };
    let t = std::time::Instant::now();
    let output = run_volumes(inputs, config, out, true).expect("pipeline run");
    PhantomRun {
        output,
        truth_percent: pair.ground_truth_delta_percent,
        fixed_mask: mask,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Largest increase of the accepted total cost within any (stage, level).
pub fn worst_cost_increase(output: &RunOutput) -> f64 {
    let h = &output.registration.cost_history;
    let mut worst = f64::NEG_INFINITY;
    for w in h.windows(2) {
        let same = w[0].stage == w[1].stage && w[0].level == w[1].level;
        if same {
            worst = worst.max(w[1].total - w[0].total);
        }
    }
    worst
}

pub fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Affine => "affine",
        Stage::Ffd => "ffd",
    }
}

/// Mean |T_est(x) - T_true(x)| over the mask voxels, mm.
pub fn mean_tre(output: &RunOutput, warp: &AnalyticWarp) -> f64 {
    let field = &output.registration.field;
    let g = field.geometry();
    let mask = &output.mask;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (l, u) in field.displacements().iter().enumerate() {
        if mask.data()[l] > 0.5 {
            let x = g.voxel_to_world(g.voxel_coords(l).map(|v| v as f64));
            sum += (x + u - warp.map(&x)).norm();
            n += 1;
        }
    }
    sum / n as f64
}

/// Smooth random intensities: a sum of Gaussian blobs plus a gentle ramp.
pub fn smooth_random_volume(geometry: &Geometry, seed: u64) -> ImageVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = geometry.voxel_to_world([0.0; 3]);
    let hi = geometry.voxel_to_world(geometry.dims.map(|d| (d - 1) as f64));
    let blobs: Vec<(Vector3<f64>, f64, f64)> = (0..8)
        .map(|_| {
            let c = Vector3::from_fn(|a, _| rng.random_range(lo[a]..hi[a]));
            (c, rng.random_range(-1.0..1.0), rng.random_range(3.0..7.0))
        })
        .collect();
    let ramp = Vector3::from_fn(|_, _| rng.random_range(-0.02..0.02));
    let g = geometry.clone();
    ImageVolume::from_fn(geometry.clone(), VolumeKind::Intensity, move |i, j, k| {
        let p = g.voxel_to_world([i as f64, j as f64, k as f64]);
        let mut v = ramp.dot(&p);
        for (c, a, s) in &blobs {
            v += a * (-(p - *c).norm_squared() / (2.0 * s * s)).exp();
        }
        v
    })
    .expect("volume")
}
