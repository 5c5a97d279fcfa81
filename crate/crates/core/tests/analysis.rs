use std::collections::VecDeque;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use repeat_core::deformation_analysis::{displacement_stats, folding_fraction, jacobian_determinant_field, JacobianField};
use repeat_core::phantom::{generate_phantom, PhantomSpec};
use repeat_core::pipeline::{render_overlay, CONTOUR_RGB};
use repeat_core::registration::DeformationField;
use repeat_core::volume_change::{fov_valid_mask, mean_jacobian, measure_partial_volume_change};
use repeat_core::volume_io::{Geometry, ImageVolume, VolumeKind};

fn random_mask(g: &Geometry, seed: u64) -> ImageVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bits: Vec<bool> = (0..g.len()).map(|_| rng.random_bool(0.4)).collect();
    ImageVolume::mask_from_bools(g.clone(), &bits).unwrap()
}

#[test]
fn displacement_stats_match_direct_sums() {
    let g = Geometry::centered([11, 9, 7], [1.0, 1.5, 2.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let disp: Vec<Vector3<f64>> = (0..g.len())
        .map(|_| Vector3::from_fn(|_, _| rng.random_range(-4.0..4.0)))
        .collect();
    let field = DeformationField::new(g.clone(), disp.clone()).unwrap();
    let mask = random_mask(&g, 6);
    let s = displacement_stats(&field, &mask).unwrap();
    let inside: Vec<&Vector3<f64>> = disp.iter().zip(mask.data()).filter(|(_, m)| **m > 0.5).map(|(u, _)| u).collect();
    let n = inside.len() as f64;
    let mean = inside.iter().map(|u| u.norm()).sum::<f64>() / n;
    let max = inside.iter().map(|u| u.norm()).fold(0.0, f64::max);
    assert!((s.mean_mag - mean).abs() <= 1e-12);
    assert_eq!(s.max_mag, max);
    for a in 0..3 {
        let m = inside.iter().map(|u| u[a]).sum::<f64>() / n;
        assert!((s.mean_axis[a] - m).abs() <= 1e-12);
    }
}

#[test]
fn mean_jacobian_matches_direct_average() {
    let g = Geometry::centered([10, 10, 10], [2.0; 3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let det: Vec<f64> = (0..g.len()).map(|_| rng.random_range(0.5..1.5)).collect();
    let jac = JacobianField::new(g.clone(), det.clone()).unwrap();
    let mask = random_mask(&g, 9);
    let valid = fov_valid_mask(&DeformationField::zeros(g.clone()), &g, 0.0).unwrap();
    let got = mean_jacobian(&mask, &jac, &valid).unwrap();
    let (sum, n) = det
        .iter()
        .zip(mask.data())
        .filter(|(_, m)| **m > 0.5)
        .fold((0.0, 0.0), |(s, n), (d, _)| (s + d, n + 1.0));
    assert!((got - sum / n).abs() <= 1e-12);

    let constant = JacobianField::new(g.clone(), vec![1.3; g.len()]).unwrap();
    assert!((mean_jacobian(&mask, &constant, &valid).unwrap() - 1.3).abs() < 1e-12);
}

#[test]
fn fov_margin_and_folding_examples() {
    let g = Geometry::centered([12, 10, 8], [1.0; 3]).unwrap();
    let zero = DeformationField::zeros(g.clone());
    assert_eq!(fov_valid_mask(&zero, &g, 0.0).unwrap().valid_fraction(), 1.0);
    assert_eq!(fov_valid_mask(&zero, &g, 8.0).unwrap().valid_fraction(), 0.0);

    let fold = DeformationField::from_fn(g.clone(), |p| Vector3::new(-2.0 * p.x, 0.0, 0.0)).unwrap();
    let jac = jacobian_determinant_field(&fold);
    let all = ImageVolume::filled(g.clone(), 1.0, VolumeKind::Mask).unwrap();
    assert_eq!(folding_fraction(&jac, &all).unwrap(), 1.0);
    assert_eq!(folding_fraction(&jacobian_determinant_field(&zero), &all).unwrap(), 0.0);
}

#[test]
fn uniform_scale_interior_mask() {
    let g = Geometry::centered([30; 3], [2.0; 3]).unwrap();
    let s: f64 = 1.05;
    let field = DeformationField::from_fn(g.clone(), |p| p * (s - 1.0)).unwrap();
    let jac = jacobian_determinant_field(&field);
    let mask = ImageVolume::from_fn(g.clone(), VolumeKind::Mask, |i, j, k| {
        [i, j, k].iter().all(|c| (8..22).contains(c)) as u8 as f64
    })
    .unwrap();
    let valid = fov_valid_mask(&field, &g, 1.0).unwrap();
    let r = measure_partial_volume_change(&mask, &jac, &valid, 0.01).unwrap();
    assert!((r.delta_percent - 15.7625).abs() < 0.1, "{}", r.delta_percent);
    assert_eq!(r.coverage_fraction, 1.0);
}

/// Pixels reachable from the image border without crossing the contour.
fn outside_region(img: &repeat_core::pipeline::RgbImage) -> Vec<bool> {
    let (w, h) = (img.width, img.height);
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    for x in 0..w {
        for y in 0..h {
            let border = x == 0 || y == 0 || x == w - 1 || y == h - 1;
            if border && img.pixel(x, y) != CONTOUR_RGB {
                seen[y * w + x] = true;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let nbrs = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
        for (nx, ny) in nbrs {
            if nx < w && ny < h && !seen[ny * w + nx] && img.pixel(nx, ny) != CONTOUR_RGB {
                seen[ny * w + nx] = true;
                queue.push_back((nx, ny));
            }
        }
    }
    seen
}

#[test]
fn contour_encloses_the_bright_liver_section() {
    let spec = PhantomSpec {
        noise_sigma: 0.0,
        liver_vessels: Vec::new(),
        ..PhantomSpec::default()
    };
    let (vol, mask) = generate_phantom(&spec).unwrap();
    let g = vol.geometry();
    // Axial slice through the liver centre.
    let k = g.world_to_voxel(&Vector3::from(spec.liver_center))[2].round() as usize;
    let img = render_overlay(&vol, &mask, 2, k, (-100.0, 400.0)).unwrap();
    let outside = outside_region(&img);
    let liver_grey = ((90.0 + 100.0) / 500.0 * 255.0f64).round() as u8;

    let [a, b, c] = spec.liver_axes;
    let z = g.voxel_to_world([0.0, 0.0, k as f64]).z - spec.liver_center[2];
    let scale = (1.0 - (z / c).powi(2)).sqrt();
    let (mut liver_pixels, mut contour_pixels) = (0, 0);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = g.voxel_to_world([x as f64, y as f64, k as f64]);
            let r = (((p.x - spec.liver_center[0]) / (a * scale)).powi(2)
                + ((p.y - spec.liver_center[1]) / (b * scale)).powi(2))
            .sqrt();
            let px = img.pixel(x, y);
            if px == CONTOUR_RGB {
                contour_pixels += 1;
                // Contour sits on the analytic ellipse, within a voxel or so.
                assert!((0.9..=1.02).contains(&r), "contour pixel ({x},{y}) at radius {r}");
            } else if r < 0.9 {
                liver_pixels += 1;
                assert_eq!(px, [liver_grey; 3], "pixel ({x},{y})");
                assert!(!outside[y * img.width + x], "liver pixel ({x},{y}) is not enclosed");
            }
        }
    }
    assert!(liver_pixels > 500 && contour_pixels > 50, "{liver_pixels} {contour_pixels}");
}
