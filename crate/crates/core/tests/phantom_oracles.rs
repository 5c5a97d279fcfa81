//! Phantom ground truth checked against independent oracles: voxel counting
//! in moving space, finite differences of the analytic map, and the
//! closed-form ellipsoid volume.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use repeat_core::deformation_analysis::jacobian_determinant_field;
use repeat_core::phantom::{
    calibrate_respiratory, generate_phantom, ground_truth_volume_change, synthesize_pair, AnalyticWarp, PhantomSpec,
    RESPIRATORY_COMPRESSION_8PCT,
};
use repeat_core::registration::DeformationField;
use repeat_core::volume_change::{fov_valid_mask, measure_partial_volume_change};
use repeat_core::volume_io::{ImageVolume, WorldPoint};

/// Mask volume in moving space (ml): count fine-grid points `y` whose
/// pre-image `warp^-1(y)` falls in a mask voxel. `ss` fine points per voxel edge.
fn counting_oracle_ml(mask: &ImageVolume, warp: &AnalyticWarp, ss: usize) -> f64 {
    let g = mask.geometry();
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for (l, v) in mask.data().iter().enumerate() {
        if *v > 0.5 {
            let y = warp.map(&g.voxel_to_world(g.voxel_coords(l).map(|c| c as f64)));
            lo = lo.inf(&y);
            hi = hi.sup(&y);
        }
    }
    let step = g.spacing.map(|s| s / ss as f64);
    let pad = Vector3::from(g.spacing) * 2.0;
    let (lo, hi) = (lo - pad, hi + pad);
    let n = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / step[a]).ceil() as usize);
    let count: usize = (0..n[2])
        .into_par_iter()
        .map(|k| {
            let mut c = 0;
            for j in 0..n[1] {
                for i in 0..n[0] {
                    let y: WorldPoint = lo + Vector3::new(
                        (i as f64 + 0.5) * step[0],
                        (j as f64 + 0.5) * step[1],
                        (k as f64 + 0.5) * step[2],
                    );
                    let x = warp.inverse(&y).expect("invertible warp");
                    let q = g.world_to_voxel(&x).map(|v| v.round());
                    let inside = (0..3).all(|a| q[a] >= 0.0 && q[a] <= (g.dims[a] - 1) as f64);
                    if inside && mask.get(q[0] as usize, q[1] as usize, q[2] as usize) > 0.5 {
                        c += 1;
                    }
                }
            }
            c
        })
        .sum();
    count as f64 * step.iter().product::<f64>() / 1000.0
}

fn mask_ml(mask: &ImageVolume) -> f64 {
    mask.count() as f64 * mask.geometry().voxel_volume_mm3() / 1000.0
}

fn respiratory(amplitude_z: f64, compression: f64) -> AnalyticWarp {
    AnalyticWarp::Respiratory {
        amplitude_z,
        compression,
        sharpness: 60.0,
        boundary_z: 20.0,
        center_y: 0.0,
    }
}

#[test]
fn voxelized_liver_matches_ellipsoid_volume() {
    let spec = PhantomSpec::default();
    let (_, mask) = generate_phantom(&spec).unwrap();
    let rel = (mask_ml(&mask) - spec.liver_volume_ml()).abs() / spec.liver_volume_ml();
    assert!(rel < 0.015, "relative error {rel}");
    let [a, b, c] = spec.liver_axes;
    assert!((spec.liver_volume_ml() - 4.0 / 3.0 * std::f64::consts::PI * a * b * c / 1000.0).abs() < 1e-9);
}

#[test]
fn respiratory_truth_matches_counting_oracle() {
    let (_, mask) = generate_phantom(&PhantomSpec::default()).unwrap();
    let warp = respiratory(10.0, 0.05);
    let truth = ground_truth_volume_change(&mask, &warp, 4).unwrap();
    let counted = 100.0 * (counting_oracle_ml(&mask, &warp, 4) / mask_ml(&mask) - 1.0);
    assert!((truth - counted).abs() < 0.3, "truth {truth} vs counting {counted}");
}

#[test]
fn default_respiratory_fixture_is_plus_eight_percent() {
    let (_, mask) = generate_phantom(&PhantomSpec::default()).unwrap();
    let warp = AnalyticWarp::respiratory_default();
    let t4 = ground_truth_volume_change(&mask, &warp, 4).unwrap();
    let t8 = ground_truth_volume_change(&mask, &warp, 8).unwrap();
    assert!((t4 - 8.0).abs() < 1e-6, "{t4}");
    assert!((t4 - t8).abs() < 0.05);
    let counted = 100.0 * (counting_oracle_ml(&mask, &warp, 4) / mask_ml(&mask) - 1.0);
    assert!((counted - 8.0).abs() < 0.3, "counting oracle {counted}");

    let AnalyticWarp::Respiratory { compression, .. } = calibrate_respiratory(&mask, 30.0, 60.0, 20.0, 0.0, 8.0).unwrap()
    else {
        unreachable!()
    };
    assert!((compression - RESPIRATORY_COMPRESSION_8PCT).abs() < 1e-9);
}

#[test]
fn jacobian_integration_matches_counting_oracle() {
    let (_, mask) = generate_phantom(&PhantomSpec::default()).unwrap();
    let warp = AnalyticWarp::respiratory_default();
    let g = mask.geometry().clone();
    let field = DeformationField::from_fn(g.clone(), |p| warp.map(p) - p).unwrap();
    let jac = jacobian_determinant_field(&field);
    let valid = fov_valid_mask(&field, &g, 0.0).unwrap();
    let report = measure_partial_volume_change(&mask, &jac, &valid, 0.01).unwrap();
    assert_eq!(report.coverage_fraction, 1.0);
    let counted = counting_oracle_ml(&mask, &warp, 4);
    let rel = (report.v_mapped_ml - counted).abs() / counted;
    assert!(rel < 0.02, "v_mapped {} vs counted {counted}", report.v_mapped_ml);
}

#[test]
fn closed_form_det_matches_finite_differences() {
    let warp = respiratory(10.0, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-4;
    for _ in 0..1000 {
        let p = Vector3::new(
            rng.random_range(-95.0..95.0),
            rng.random_range(-95.0..95.0),
            rng.random_range(-95.0..95.0),
        );
        let cols: Vec<Vector3<f64>> = (0..3)
            .map(|a| {
                let e = Vector3::ith(a, h);
                (warp.map(&(p + e)) - warp.map(&(p - e))) / (2.0 * h)
            })
            .collect();
        let fd = Matrix3::from_columns(&cols).determinant();
        let exact = warp.det(&p);
        assert!((fd - exact).abs() / exact < 1e-5, "at {p}: {fd} vs {exact}");
    }
}

#[test]
fn analytic_truths() {
    let (_, mask) = generate_phantom(&PhantomSpec {
        dims: [48; 3],
        spacing: [4.0; 3],
        ..PhantomSpec::default()
    })
    .unwrap();
    let shift = AnalyticWarp::Translation { offset: [5.0, 0.0, 0.0] };
    assert_eq!(ground_truth_volume_change(&mask, &shift, 4).unwrap(), 0.0);
    for s in [0.9, 1.05, 1.2] {
        let warp = AnalyticWarp::UniformScale {
            factor: s,
            center: [0.0; 3],
        };
        let t = ground_truth_volume_change(&mask, &warp, 4).unwrap();
        assert!((t - 100.0 * (s * s * s - 1.0)).abs() < 1e-6);
    }
    for (a, c) in [(10.0, 0.05), (20.0, -0.03), (30.0, 0.1)] {
        let warp = respiratory(a, c);
        let d = ground_truth_volume_change(&mask, &warp, 4).unwrap()
            - ground_truth_volume_change(&mask, &warp, 8).unwrap();
        assert!(d.abs() < 0.05, "4x vs 8x differ by {d}");
    }
}

#[test]
fn identity_pair_reproduces_the_phantom() {
    let (phantom, mask) = generate_phantom(&PhantomSpec {
        noise_sigma: 0.0,
        dims: [48; 3],
        spacing: [4.0; 3],
        ..PhantomSpec::default()
    })
    .unwrap();
    let pair = synthesize_pair(&phantom, &mask, &AnalyticWarp::identity()).unwrap();
    let worst = pair
        .moving
        .data()
        .iter()
        .zip(phantom.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1.0, "max difference {worst} HU");
    assert_eq!(pair.ground_truth_delta_percent, 0.0);

    let scaled = synthesize_pair(
        &phantom,
        &mask,
        &AnalyticWarp::UniformScale {
            factor: 1.05,
            center: [0.0; 3],
        },
    )
    .unwrap();
    assert!((scaled.ground_truth_delta_percent - 15.7625).abs() < 1e-6);
}
