//! Browser demo for the volume change pipeline.
//!
//! One [`Demo`] holds a synthetic inspiration/expiration pair. The page can
//! browse slices of either phase, show the analytic Jacobian of the warp that
//! produced it, and run a small registration to compare the measured change
//! against the known one. Everything stays in memory; nothing touches a
//! filesystem.

use repeat_core::deformation_analysis::{jacobian_determinant_field, JacobianField};
use repeat_core::grid_ops::window_intensity;
use repeat_core::phantom::{calibrate_respiratory, synthesize_phantom_pair, AnalyticWarp, PhantomSpec};
use repeat_core::pipeline::{render_overlay, RgbImage, CONTOUR_RGB};
use repeat_core::registration::{overlap_center_of_mass_init, register, RegistrationConfig};
use repeat_core::volume_change::{fov_valid_mask, measure_partial_volume_change, DEFAULT_FOV_MARGIN, DEFAULT_MAX_FOLDING};
use repeat_core::volume_io::{ImageVolume, VolumeKind};
use repeat_core::Error;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Field of view of every demo phantom, mm per axis.
const FOV_MM: f64 = 192.0;
const WINDOW: (f64, f64) = (-100.0, 400.0);
const OUTLINE_ON_JACOBIAN: [u8; 3] = [0, 0, 0];

fn js(e: Error) -> String {
    e.to_string()
}

/// Outcome of [`Demo::register`], serialized for the page.
#[derive(Serialize)]
struct Measurement {
    delta_percent: f64,
    truth_percent: f64,
    coverage_fraction: f64,
    folding_fraction: f64,
    cost_first: f64,
    cost_last: f64,
    iterations: usize,
}

#[wasm_bindgen]
pub struct Demo {
    fixed: ImageVolume,
    moving: ImageVolume,
    mask: ImageVolume,
    warp: AnalyticWarp,
    truth: f64,
    registered: Option<JacobianField>,
}

#[wasm_bindgen]
impl Demo {
    /// `kind` is `translate` (param: x offset, mm), `scale` (param: factor)
    /// or `respiratory` (param: target volume change, percent).
    #[wasm_bindgen(constructor)]
    pub fn new(kind: &str, param: f64, size: usize, seed: u32) -> Result<Demo, String> {
        if !(16..=128).contains(&size) {
            return Err(format!("size {size} outside 16..=128"));
        }
        let spec = PhantomSpec {
            dims: [size; 3],
            spacing: [FOV_MM / size as f64; 3],
            seed: seed as u64,
            ..PhantomSpec::default()
        };
        let warp = match kind {
            "translate" => AnalyticWarp::Translation {
                offset: [param, 0.0, 0.0],
            },
            "scale" => AnalyticWarp::UniformScale {
                factor: param,
                center: [0.0; 3],
            },
            "respiratory" => {
                let AnalyticWarp::Respiratory {
                    amplitude_z,
                    sharpness,
                    boundary_z,
                    center_y,
                    ..
                } = AnalyticWarp::respiratory_default()
                else {
                    unreachable!("respiratory_default is a respiratory warp")
                };
                let (_, mask) = repeat_core::phantom::generate_phantom(&spec).map_err(js)?;
                calibrate_respiratory(&mask, amplitude_z, sharpness, boundary_z, center_y, param).map_err(js)?
            }
            other => return Err(format!("unknown phantom kind {other:?}")),
        };
        let (pair, mask) = synthesize_phantom_pair(&spec, &warp).map_err(js)?;
        Ok(Demo {
            fixed: pair.fixed,
            moving: pair.moving,
            mask,
            warp,
            truth: pair.ground_truth_delta_percent,
            registered: None,
        })
    }

    /// Voxels per axis; every slice is `size x size` pixels.
    pub fn size(&self) -> usize {
        self.fixed.dims()[0]
    }

    pub fn truth_percent(&self) -> f64 {
        self.truth
    }

    /// RGBA slice of `phase` (`fixed` or `moving`) with the fixed liver outline.
    pub fn slice_rgba(&self, phase: &str, axis: usize, index: usize) -> Result<Vec<u8>, String> {
        let vol = match phase {
            "fixed" => &self.fixed,
            "moving" => &self.moving,
            other => return Err(format!("unknown phase {other:?}")),
        };
        let img = render_overlay(vol, &self.mask, axis, index, WINDOW).map_err(js)?;
        Ok(rgba(&img, |p| p))
    }

    /// det J of the generating warp, blue below 1 and red above, saturating at `1 +- range`.
    pub fn analytic_jacobian_rgba(&self, axis: usize, index: usize, range: f64) -> Result<Vec<u8>, String> {
        let g = self.fixed.geometry().clone();
        let det = ImageVolume::from_fn(g.clone(), VolumeKind::Intensity, |i, j, k| {
            self.warp.det(&g.voxel_to_world([i as f64, j as f64, k as f64]))
        })
        .map_err(js)?;
        self.jacobian_rgba(&det, axis, index, range)
    }

    /// Registers fixed to moving with `levels` levels of at most `iters`
    /// iterations each and returns the measurement as JSON.
    pub fn register(&mut self, levels: usize, iters: usize) -> Result<String, String> {
        let config = RegistrationConfig {
            levels,
            max_iters_per_level: iters,
            ..RegistrationConfig::default()
        };
        let init = overlap_center_of_mass_init(&self.fixed, &self.moving).map_err(js)?;
        let f = window_intensity(&self.fixed, WINDOW.0, WINDOW.1).map_err(js)?;
        let m = window_intensity(&self.moving, WINDOW.0, WINDOW.1).map_err(js)?;
        let reg = register(&f, &m, init, &config, None).map_err(js)?;
        let jac = jacobian_determinant_field(&reg.field);
        let valid = fov_valid_mask(&reg.field, m.geometry(), DEFAULT_FOV_MARGIN).map_err(js)?;
        let vc = measure_partial_volume_change(&self.mask, &jac, &valid, DEFAULT_MAX_FOLDING).map_err(js)?;
        self.registered = Some(jac);
        let cost = |r: Option<&repeat_core::registration::CostRecord>| r.map_or(f64::NAN, |c| c.total);
        let out = Measurement {
            delta_percent: vc.delta_percent,
            truth_percent: self.truth,
            coverage_fraction: vc.coverage_fraction,
            folding_fraction: vc.folding_fraction,
            cost_first: cost(reg.cost_history.first()),
            cost_last: cost(reg.cost_history.last()),
            iterations: reg.cost_history.len(),
        };
        Ok(serde_json::to_string(&out).expect("measurement serializes"))
    }

    /// Same colouring as [`Demo::analytic_jacobian_rgba`], for the last registration.
    pub fn registered_jacobian_rgba(&self, axis: usize, index: usize, range: f64) -> Result<Vec<u8>, String> {
        let jac = self.registered.as_ref().ok_or("no registration has run yet")?;
        self.jacobian_rgba(&jac.to_volume(), axis, index, range)
    }
}

impl Demo {
    fn jacobian_rgba(&self, det: &ImageVolume, axis: usize, index: usize, range: f64) -> Result<Vec<u8>, String> {
        if range.is_nan() || range <= 0.0 {
            return Err(format!("range {range} must be positive"));
        }
        let img = render_overlay(det, &self.mask, axis, index, (1.0 - range, 1.0 + range)).map_err(js)?;
        Ok(rgba(&img, diverging))
    }
}

/// Grey level 0..255 (det 1-range..1+range) to blue-white-red; the outline turns black.
fn diverging(p: [u8; 3]) -> [u8; 3] {
    if p == CONTOUR_RGB {
        return OUTLINE_ON_JACOBIAN;
    }
    let t = p[0] as f64 / 127.5 - 1.0;
    let fade = |t: f64| (255.0 * (1.0 - t.abs())).round() as u8;
    if t < 0.0 {
        [fade(t), fade(t), 255]
    } else {
        [255, fade(t), fade(t)]
    }
}

fn rgba(img: &RgbImage, colour: impl Fn([u8; 3]) -> [u8; 3]) -> Vec<u8> {
    img.pixels
        .chunks_exact(3)
        .flat_map(|p| {
            let [r, g, b] = colour([p[0], p[1], p[2]]);
            [r, g, b, 255]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diverging_map_endpoints() {
        assert_eq!(diverging([0; 3]), [0, 0, 255]);
        assert_eq!(diverging([255; 3]), [255, 0, 0]);
        assert_eq!(diverging([128; 3]), [255, 254, 254]);
        assert_eq!(diverging(CONTOUR_RGB), OUTLINE_ON_JACOBIAN);
    }
}
