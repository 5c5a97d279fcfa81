mod common;

use nalgebra::Vector3;
use repeat_core::grid_ops::window_intensity;
use repeat_core::phantom::{synthesize_phantom_pair, AnalyticWarp, PhantomSpec};
use repeat_core::pipeline::PipelineConfig;
use repeat_core::registration::{
    affine_register, center_of_mass_init, ssd_metric, AffineParams, Identity, MetricKind, RegistrationConfig,
};
use repeat_core::volume_io::{ImageVolume, VolumeKind};
use repeat_core::Error;

use common::{mean_tre, run_phantom, worst_cost_increase};

fn windowed_pair(warp: &AnalyticWarp) -> (ImageVolume, ImageVolume, AffineParams) {
    let (pair, _) = synthesize_phantom_pair(&PhantomSpec::default(), warp).unwrap();
    let init = center_of_mass_init(&pair.fixed, &pair.moving).unwrap();
    let cfg = PipelineConfig::default();
    (
        window_intensity(&pair.fixed, cfg.window_lo, cfg.window_hi).unwrap(),
        window_intensity(&pair.moving, cfg.window_lo, cfg.window_hi).unwrap(),
        init,
    )
}

#[test]
fn center_of_mass_finds_a_z_shift() {
    let spec = PhantomSpec {
        body_half_length: Some(70.0),
        ..PhantomSpec::default()
    };
    let warp = AnalyticWarp::Translation { offset: [0.0, 0.0, 7.0] };
    let (pair, _) = synthesize_phantom_pair(&spec, &warp).unwrap();
    let t = center_of_mass_init(&pair.fixed, &pair.moving).unwrap().translation;
    assert!((t - Vector3::new(0.0, 0.0, 7.0)).norm() < 0.5, "{t}");

    let same = center_of_mass_init(&pair.fixed, &pair.fixed).unwrap().translation;
    assert_eq!(same, Vector3::zeros());

    let air = ImageVolume::filled(pair.fixed.geometry().clone(), -1024.0, VolumeKind::Intensity).unwrap();
    assert!(matches!(center_of_mass_init(&air, &air), Err(Error::DegenerateVolume(_))));
}

#[test]
fn affine_self_registration_stays_at_identity() {
    let (f, _, _) = windowed_pair(&AnalyticWarp::identity());
    let cfg = RegistrationConfig {
        metric: MetricKind::Ssd,
        ..RegistrationConfig::default()
    };
    let a = affine_register(&f, &f, AffineParams::identity(), &cfg).unwrap();
    assert!((a.linear - nalgebra::Matrix3::identity()).amax() < 1e-6);
    assert!(a.translation.norm() < 1e-4);
    assert!(ssd_metric(&f, &f, &a, None).unwrap() < 1e-8);
    assert_eq!(ssd_metric(&f, &f, &Identity, None).unwrap(), 0.0);
}

#[test]
fn affine_recovers_a_translation() {
    let warp = AnalyticWarp::Translation { offset: [3.0, -2.0, 5.0] };
    let (f, m, init) = windowed_pair(&warp);
    let a = affine_register(&f, &m, init, &RegistrationConfig::default()).unwrap();
    // Compare the recovered map at the liver centre.
    let c = Vector3::new(-15.0, 0.0, -20.0);
    let err = (a.apply(&c) - c - Vector3::new(3.0, -2.0, 5.0)).norm();
    assert!(err < 0.5, "translation error {err} mm ({:?})", a.translation);
}

#[test]
fn affine_recovers_a_uniform_scale() {
    let warp = AnalyticWarp::UniformScale {
        factor: 1.05,
        center: [0.0; 3],
    };
    let (f, m, init) = windowed_pair(&warp);
    let a = affine_register(&f, &m, init, &RegistrationConfig::default()).unwrap();
    let det = a.linear.determinant();
    assert!((det - 1.157625).abs() / 1.157625 < 0.01, "det {det}");
}

#[test]
fn polynomial_warp_is_tracked_in_the_liver() {
    // u = k (dz^2, dx^2, dy^2) about the volume centre: about 10 mm at the
    // liver's left tip (x = -75 mm), and still invertible at the grid corners.
    let k = 0.0018;
    let warp = AnalyticWarp::Polynomial {
        center: [0.0; 3],
        coefficients: [[0.0, 0.0, k], [k, 0.0, 0.0], [0.0, k, 0.0]],
    };
    let spec = PhantomSpec::default();
    warp.validate_on(&spec.geometry().unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = run_phantom(&spec, &warp, &PipelineConfig::default(), dir.path());

    let g = run.fixed_mask.geometry();
    let max_disp = run
        .fixed_mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.5)
        .map(|(l, _)| {
            let x = g.voxel_to_world(g.voxel_coords(l).map(|c| c as f64));
            (warp.map(&x) - x).norm()
        })
        .fold(0.0, f64::max);
    assert!((9.0..=11.0).contains(&max_disp), "max displacement in liver {max_disp}");

    let tre = mean_tre(&run.output, &warp);
    assert!(tre < 2.0, "mean TRE {tre} mm");
    assert!(worst_cost_increase(&run.output) <= 0.0);
    assert!(run.output.report.folding_fraction < 0.01);
    assert!(
        (run.output.report.delta_percent - run.truth_percent).abs() < 1.5,
        "{} vs {}",
        run.output.report.delta_percent,
        run.truth_percent
    );
}
