use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repeat_core::grid_ops::{
    largest_connected_component, resample_to_spacing, threshold_mask, trilinear_sample, warp_volume,
    window_intensity, InterpolationKind,
};
use repeat_core::phantom::{generate_phantom, PhantomSpec};
use repeat_core::registration::DeformationField;
use repeat_core::volume_io::{Geometry, ImageVolume, VolumeKind};

fn ellipsoid_ml(spec: &PhantomSpec) -> f64 {
    let [a, b, c] = spec.liver_axes;
    4.0 / 3.0 * std::f64::consts::PI * a * b * c / 1000.0
}

fn mask_ml(mask: &ImageVolume) -> f64 {
    mask.count() as f64 * mask.geometry().voxel_volume_mm3() / 1000.0
}

#[test]
fn constant_volume_samples_to_the_constant() {
    let g = Geometry::centered([9, 8, 7], [1.3, 0.7, 2.0]).unwrap();
    let v = ImageVolume::filled(g, 42.5, VolumeKind::Intensity).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..500 {
        let q = [rng.random_range(0.0..8.0), rng.random_range(0.0..7.0), rng.random_range(0.0..6.0)];
        let s = trilinear_sample(&v, q);
        assert!(s.inside);
        assert!((s.value - 42.5).abs() < 1e-12);
    }
}

#[test]
fn resample_examples() {
    let (phantom, mask) = generate_phantom(&PhantomSpec {
        dims: [24, 20, 16],
        spacing: [4.0, 5.0, 6.0],
        ..PhantomSpec::default()
    })
    .unwrap();
    let same = resample_to_spacing(&phantom, [4.0, 5.0, 6.0], InterpolationKind::Trilinear).unwrap();
    assert_eq!(same.dims(), phantom.dims());
    assert!(same.data().iter().zip(phantom.data()).all(|(a, b)| (a - b).abs() <= 1e-12));

    let nn = resample_to_spacing(&mask, [3.0; 3], InterpolationKind::NearestNeighbor).unwrap();
    assert!(nn.is_mask());
    assert!(nn.data().iter().all(|&v| v == 0.0 || v == 1.0));

    let big = ImageVolume::filled(Geometry::centered([64; 3], [1.0; 3]).unwrap(), 0.0, VolumeKind::Intensity).unwrap();
    let half = resample_to_spacing(&big, [2.0; 3], InterpolationKind::Trilinear).unwrap();
    assert_eq!(half.dims(), [32, 32, 32]);
}

#[test]
fn liver_window_on_phantom_is_in_unit_range() {
    let (phantom, _) = generate_phantom(&PhantomSpec {
        dims: [32; 3],
        spacing: [6.0; 3],
        ..PhantomSpec::default()
    })
    .unwrap();
    let w = window_intensity(&phantom, -100.0, 400.0).unwrap();
    assert!(w.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(w.data().contains(&0.0));
    assert!(w.data().iter().any(|&v| v > 0.3));
}

#[test]
fn translation_moves_bright_cube_back() {
    let g = Geometry::centered([40; 3], [1.0; 3]).unwrap();
    let cube = ImageVolume::from_fn(g.clone(), VolumeKind::Intensity, |i, j, k| {
        let inside = (22..28).contains(&i) && (15..21).contains(&j) && (17..23).contains(&k);
        if inside {
            100.0
        } else {
            0.0
        }
    })
    .unwrap();
    let field = DeformationField::from_fn(g.clone(), |_| Vector3::new(5.0, 0.0, 0.0)).unwrap();
    let out = warp_volume(&cube, &field, InterpolationKind::Trilinear).unwrap();
    let centroid = |v: &ImageVolume| {
        let mut acc = Vector3::zeros();
        let mut w = 0.0;
        // Samples that leave the grid read as air; only the bright cube counts.
        for (l, x) in v.data().iter().enumerate().filter(|(_, x)| **x > 0.0) {
            let p = g.voxel_to_world(g.voxel_coords(l).map(|c| c as f64));
            acc += p * *x;
            w += x;
        }
        acc / w
    };
    let shift = centroid(&out) - centroid(&cube);
    assert!((shift - Vector3::new(-5.0, 0.0, 0.0)).norm() < 1e-9, "{shift}");

    let mask = ImageVolume::from_fn(g.clone(), VolumeKind::Mask, |i, _, _| (i > 20) as u8 as f64).unwrap();
    let field = DeformationField::from_fn(g, |p| Vector3::new(0.3 * p.y.sin(), 0.7, -1.2)).unwrap();
    let warped = warp_volume(&mask, &field, InterpolationKind::NearestNeighbor).unwrap();
    assert!(warped.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn threshold_recovers_the_ellipsoid() {
    let spec = PhantomSpec {
        noise_sigma: 0.0,
        liver_vessels: Vec::new(),
        ..PhantomSpec::default()
    };
    let (phantom, _) = generate_phantom(&spec).unwrap();
    let liver = threshold_mask(&phantom, 80.0, 100.0).unwrap();
    let rel = (mask_ml(&liver) - ellipsoid_ml(&spec)).abs() / ellipsoid_ml(&spec);
    assert!(rel < 0.01, "relative error {rel}");

    let air = ImageVolume::filled(phantom.geometry().clone(), -1024.0, VolumeKind::Intensity).unwrap();
    assert_eq!(threshold_mask(&air, -100.0, 400.0).unwrap().count(), 0);
    let all = threshold_mask(&phantom, -2000.0, 2000.0).unwrap();
    assert_eq!(all.count(), phantom.geometry().len());
}

#[test]
fn largest_component_examples() {
    let g = Geometry::centered([20; 3], [1.0; 3]).unwrap();
    // 5x5x4 = 100 voxels and a separate 5-voxel rod.
    let two = ImageVolume::from_fn(g.clone(), VolumeKind::Mask, |i, j, k| {
        let big = (2..7).contains(&i) && (2..7).contains(&j) && (2..6).contains(&k);
        let small = (12..17).contains(&i) && j == 15 && k == 15;
        (big || small) as u8 as f64
    })
    .unwrap();
    assert_eq!(two.count(), 105);
    let kept = largest_connected_component(&two).unwrap();
    assert_eq!(kept.count(), 100);
    assert_eq!(kept.get(3, 3, 3), 1.0);
    assert_eq!(kept.get(14, 15, 15), 0.0);

    let one = largest_connected_component(&kept).unwrap();
    assert_eq!(one.data(), kept.data());

    let empty = ImageVolume::filled(g, 0.0, VolumeKind::Mask).unwrap();
    assert_eq!(largest_connected_component(&empty).unwrap().count(), 0);
}
