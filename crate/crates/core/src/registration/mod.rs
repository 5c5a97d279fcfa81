//! Fixed-to-moving registration: centre-of-mass initialisation, affine
//! alignment, then multi-resolution cubic B-spline free-form deformation.
//!
//! The total transform maps fixed (inspiration) world points into moving
//! (expiration) world space: `T(x) = A x + t + s(x)`, where `s` is the spline.

mod affine;
mod bending;
mod bspline;
mod ffd;
mod metric;
mod optimize;

pub use affine::{affine_cost_and_gradient, affine_register};
pub use bending::bending_energy;
pub use bspline::{bspline_basis, bspline_evaluate, compose_to_dense, ControlPointGrid};
pub use ffd::{ffd_cost_and_gradient, ffd_register, register, RegistrationPyramid};
pub use metric::{center_of_mass_init, metric_value, ncc_metric, overlap_center_of_mass_init, ssd_metric};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume_io::{Geometry, WorldPoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Ssd,
    #[default]
    Ncc,
}

/// `x -> linear * x + translation`, world millimetres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl AffineParams {
    pub fn identity() -> Self {
        Self {
            linear: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn translation(t: Vector3<f64>) -> Self {
        Self {
            linear: Matrix3::identity(),
            translation: t,
        }
    }

    /// Orientation-preserving with finite entries.
    pub fn is_valid(&self) -> bool {
        self.linear.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && self.linear.determinant() > 0.0
    }

    #[inline]
    pub fn apply(&self, p: &WorldPoint) -> WorldPoint {
        self.linear * p + self.translation
    }
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::identity()
    }
}

/// Anything that maps fixed world points into moving world space.
pub trait Transform: Sync {
    fn apply(&self, p: &WorldPoint) -> WorldPoint;

    /// Mapped position of every voxel of `geometry`, in storage order.
    fn map_grid(&self, geometry: &Geometry) -> Result<Vec<WorldPoint>> {
        Ok(geometry.world_points().iter().map(|p| self.apply(p)).collect())
    }
}

impl Transform for AffineParams {
    fn apply(&self, p: &WorldPoint) -> WorldPoint {
        AffineParams::apply(self, p)
    }
}

/// The identity map.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Transform for Identity {
    fn apply(&self, p: &WorldPoint) -> WorldPoint {
        *p
    }
}

/// Affine plus spline displacement.
#[derive(Clone, Debug)]
pub struct FfdTransform {
    pub affine: AffineParams,
    pub grid: ControlPointGrid,
}

impl Transform for FfdTransform {
    fn apply(&self, p: &WorldPoint) -> WorldPoint {
        let s = bspline_evaluate(&self.grid, p).unwrap_or_else(|_| Vector3::zeros());
        self.affine.apply(p) + s
    }

    fn map_grid(&self, geometry: &Geometry) -> Result<Vec<WorldPoint>> {
        let s = self.grid.dense_displacements(geometry)?;
        Ok(geometry
            .world_points()
            .iter()
            .zip(s)
            .map(|(p, d)| self.affine.apply(p) + d)
            .collect())
    }
}

/// Dense per-voxel displacement `u(x)` in world millimetres on the fixed grid;
/// the total map is `T(x) = x + u(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    geometry: Geometry,
    displacements: Vec<Vector3<f64>>,
}

impl DeformationField {
    pub fn new(geometry: Geometry, displacements: Vec<Vector3<f64>>) -> Result<Self> {
        if displacements.len() != geometry.len() {
            return Err(Error::MalformedField(format!(
                "{} displacements for {} voxels",
                displacements.len(),
                geometry.len()
            )));
        }
        if displacements.iter().any(|u| !u.iter().all(|v| v.is_finite())) {
            return Err(Error::MalformedField("non-finite displacement".into()));
        }
        Ok(Self {
            geometry,
            displacements,
        })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            displacements: vec![Vector3::zeros(); n],
        }
    }

    /// Field of `f(world point)` evaluated at each voxel centre.
    pub fn from_fn<F>(geometry: Geometry, f: F) -> Result<Self>
    where
        F: Fn(&WorldPoint) -> Vector3<f64>,
    {
        let disp = geometry.world_points().iter().map(f).collect();
        Self::new(geometry, disp)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn displacements(&self) -> &[Vector3<f64>] {
        &self.displacements
    }

    /// Mapped world position `x + u(x)` for every voxel.
    pub fn mapped_points(&self) -> Vec<WorldPoint> {
        self.geometry
            .world_points()
            .into_iter()
            .zip(&self.displacements)
            .map(|(p, u)| p + u)
            .collect()
    }
}

impl Transform for DeformationField {
    /// Trilinear interpolation of the displacement; zero outside the grid.
    fn apply(&self, p: &WorldPoint) -> WorldPoint {
        let q = self.geometry.world_to_voxel(p);
        let dims = self.geometry.dims;
        let mut u = Vector3::zeros();
        for c in 0..3 {
            u[c] =interp_component(&self.displacements, dims, q, c).unwrap_or(0.0);
        }
        p + u
    }

    fn map_grid(&self, geometry: &Geometry) -> Result<Vec<WorldPoint>> {
        if geometry.approx_eq(&self.geometry, 1e-9) {
            Ok(self.mapped_points())
        } else {
            Ok(geometry.world_points().iter().map(|p| self.apply(p)).collect())
        }
    }
}

fn interp_component(data: &[Vector3<f64>], dims: [usize; 3], q: [f64; 3], c: usize) -> Option<f64> {
    let mut base = [0usize; 3];
    let mut t = [0f64; 3];
    for a in 0..3 {
        if !(q[a] >= 0.0 && q[a] <= (dims[a] - 1) as f64) {
            return None;
        }
        base[a] = (q[a].floor() as usize).min(dims[a] - 2);
        t[a] = q[a] - base[a] as f64;
    }
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { t[0] } else { 1.0 - t[0] })
                    * (if dy == 1 { t[1] } else { 1.0 - t[1] })
                    * (if dz == 1 { t[2] } else { 1.0 - t[2] });
                let l = (base[0] + dx) + dims[0] * ((base[1] + dy) + dims[1] * (base[2] + dz));
                acc += w * data[l][c];
            }
        }
    }
    Some(acc)
}

fn default_levels() -> usize {
    3
}
fn default_cp_spacing() -> f64 {
    32.0
}
fn default_bending() -> f64 {
    0.01
}
fn default_iters() -> usize {
    100
}
fn default_step() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    1e-4
}
fn default_sigma() -> f64 {
    2.0
}
fn default_stride() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Resolution levels, coarsest first.
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Control-point spacing (mm) at the coarsest level; halves every level.
    #[serde(default = "default_cp_spacing")]
    pub cp_spacing_coarsest: f64,
    #[serde(default)]
    pub metric: MetricKind,
    /// Weight of the bending-energy penalty.
    #[serde(default = "default_bending")]
    pub bending_weight: f64,
    #[serde(default = "default_iters")]
    pub max_iters_per_level: usize,
    /// Largest parameter change per iteration, mm.
    #[serde(default = "default_step")]
    pub step_init: f64,
    /// Stop a level once the relative cost decrease of a step falls below this.
    #[serde(default = "default_tol")]
    pub grad_tol: f64,
    /// Gaussian sigma unit (mm); level `l` of `L` is smoothed with `sigma * (L - l + 1)`.
    #[serde(default = "default_sigma")]
    pub smoothing_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Metric sampling stride in voxels (1 = every voxel).
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
    /// Restrict metric sampling to the liver mask dilated by this many mm.
    #[serde(default)]
    pub metric_mask_dilation_mm: Option<f64>,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            levels: default_levels(),
            cp_spacing_coarsest: default_cp_spacing(),
            metric: MetricKind::Ncc,
            bending_weight: default_bending(),
            max_iters_per_level: default_iters(),
            step_init: default_step(),
            grad_tol: default_tol(),
            smoothing_sigma: default_sigma(),
            seed: 0,
            sample_stride: default_stride(),
            metric_mask_dilation_mm: None,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(1..=5).contains(&self.levels) {
            return bad("levels must be in 1..=5");
        }
        if !(self.cp_spacing_coarsest > 0.0) {
            return bad("cp_spacing_coarsest must be positive");
        }
        if !(self.bending_weight >= 0.0) || !self.bending_weight.is_finite() {
            return bad("bending_weight must be non-negative");
        }
        if !(self.step_init > 0.0) {
            return bad("step_init must be positive");
        }
        if !(self.grad_tol >= 0.0) {
            return bad("grad_tol must be non-negative");
        }
        if !(self.smoothing_sigma >= 0.0) {
            return bad("smoothing_sigma must be non-negative");
        }
        if self.sample_stride == 0 {
            return bad("sample_stride must be at least 1");
        }
        if let Some(d) = self.metric_mask_dilation_mm {
            if !(d >= 0.0) {
                return bad("metric_mask_dilation_mm must be non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Affine,
    Ffd,
}

/// One accepted optimizer state (iteration 0 is the level's starting point).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostRecord {
    pub stage: Stage,
    pub level: usize,
    pub iteration: usize,
    pub metric: f64,
    pub bending: f64,
    /// `metric + bending_weight * bending`, the minimised objective.
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub affine: AffineParams,
    pub grid: ControlPointGrid,
    pub field: DeformationField,
    pub cost_history: Vec<CostRecord>,
    /// One entry per FFD level: true if stopped by tolerance rather than the iteration cap.
    pub converged: Vec<bool>,
    pub affine_converged: Vec<bool>,
}

impl RegistrationResult {
    pub fn transform(&self) -> FfdTransform {
        FfdTransform {
            affine: self.affine,
            grid: self.grid.clone(),
        }
    }

    /// Cost history as CSV text.
    pub fn cost_history_csv(&self) -> String {
        let mut s = String::from("stage,level,iteration,metric,bending,total\n");
        for r in &self.cost_history {
            let stage = match r.stage {
                Stage::Affine => "affine",
                Stage::Ffd => "ffd",
            };
            s.push_str(&format!(
                "{stage},{},{},{:.17e},{:.17e},{:.17e}\n",
                r.level, r.iteration, r.metric, r.bending, r.total
            ));
        }
        s
    }
}
