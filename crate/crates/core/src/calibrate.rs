//! Refractive interface calibration from known underwater targets.
//!
//! Estimates the flat-port normal and distance of one camera by minimising
//! refractive reprojection error over observations of known 3D points.
//! The normal is parameterised by two tangent-plane angles around the
//! current estimate (the unit constraint never enters the solver), and the
//! optimiser is a damped least-squares iteration with a finite-difference
//! Jacobian. Intrinsics, pose, and eta are trusted inputs from the rig.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Point3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::refractive_project;
use crate::rig::{Device, InterfaceEntry, RigConfig, RigError};

/// Minimum number of point observations.
pub const MIN_OBSERVATIONS: usize = 6;

/// Residual value substituted when the forward projection fails for a point.
pub const PROJECTION_SENTINEL: f64 = 1e6;

const FD_STEP: f64 = 1e-6;
const MAX_ITERATIONS: usize = 200;
const STEP_TOL: f64 = 1e-10;
const REL_DECREASE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("need at least {MIN_OBSERVATIONS} observations, got {0}")]
    TooFewObservations(usize),
    #[error("target and pixel lists differ in length ({targets} vs {pixels})")]
    LengthMismatch { targets: usize, pixels: usize },
    #[error("targets are collinear; the interface is unobservable")]
    DegenerateGeometry,
    #[error("initial distance must be positive, got {0}")]
    BadInitialDistance(f64),
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Observations of known world points in one camera.
#[derive(Debug, Clone)]
pub struct CalibObservation {
    pub camera_id: String,
    pub target_points: Vec<Point3<f64>>,
    pub observed_pixels: Vec<[f64; 2]>,
}

impl CalibObservation {
    pub fn new(
        camera_id: &str,
        target_points: Vec<Point3<f64>>,
        observed_pixels: Vec<[f64; 2]>,
    ) -> Result<Self, CalibrateError> {
        if target_points.len() != observed_pixels.len() {
            return Err(CalibrateError::LengthMismatch {
                targets: target_points.len(),
                pixels: observed_pixels.len(),
            });
        }
        if target_points.len() < MIN_OBSERVATIONS {
            return Err(CalibrateError::TooFewObservations(target_points.len()));
        }
        Ok(Self {
            camera_id: camera_id.to_string(),
            target_points,
            observed_pixels,
        })
    }

    pub fn len(&self) -> usize {
        self.target_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_points.is_empty()
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, CalibrateError> {
        let file: ObservationFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        let targets = file
            .observations
            .iter()
            .map(|o| Point3::new(o.x, o.y, o.z))
            .collect();
        let pixels = file.observations.iter().map(|o| [o.u, o.v]).collect();
        Self::new(&file.camera_id, targets, pixels)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), CalibrateError> {
        let file = ObservationFile {
            camera_id: self.camera_id.clone(),
            observations: self
                .target_points
                .iter()
                .zip(&self.observed_pixels)
                .map(|(p, px)| ObservationEntry {
                    x: p.x,
                    y: p.y,
                    z: p.z,
                    u: px[0],
                    v: px[1],
                })
                .collect(),
        };
        fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservationFile {
    camera_id: String,
    observations: Vec<ObservationEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservationEntry {
    x: f64,
    y: f64,
    z: f64,
    u: f64,
    v: f64,
}

/// Starting point for the estimation.
#[derive(Debug, Clone, Copy)]
pub struct InterfaceGuess {
    pub normal: Vector3<f64>,
    pub distance: f64,
}

impl Default for InterfaceGuess {
    /// Housings mount ports roughly perpendicular to the lens.
    fn default() -> Self {
        Self {
            normal: Vector3::z(),
            distance: 0.05,
        }
    }
}

/// Estimated interface parameters.
#[derive(Debug, Clone, Serialize)]
pub struct InterfaceEstimate {
    pub normal: [f64; 3],
    pub distance: f64,
    /// Per-point RMS reprojection error, pixels.
    pub rms_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl InterfaceEstimate {
    pub fn normal_vec(&self) -> Vector3<f64> {
        Vector3::new(self.normal[0], self.normal[1], self.normal[2])
    }

    /// Rig-config patch fragment with the camera's eta carried over.
    pub fn to_interface_entry(&self, eta: f64) -> InterfaceEntry {
        InterfaceEntry {
            normal: self.normal,
            distance: self.distance,
            eta,
        }
    }
}

/// Rotate `n0` by the tangent-plane angles `(alpha, beta)`.
fn perturb_normal(n0: &Unit<Vector3<f64>>, alpha: f64, beta: f64) -> Unit<Vector3<f64>> {
    let (t1, t2) = tangent_basis(n0);
    let angle = (alpha * alpha + beta * beta).sqrt();
    if angle < 1e-18 {
        return *n0;
    }
    let axis_dir = (t1 * alpha + t2 * beta) / angle;
    // Rotate n0 by `angle` toward axis_dir (exponential map on the sphere).
    Unit::new_normalize(n0.into_inner() * angle.cos() + axis_dir * angle.sin())
}

fn tangent_basis(n: &Unit<Vector3<f64>>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let t1 = helper.cross(n).normalize();
    let t2 = n.into_inner().cross(&t1);
    (t1, t2)
}

fn residuals_for(
    device: &Device,
    normal: &Unit<Vector3<f64>>,
    distance: f64,
    eta: f64,
    obs: &CalibObservation,
) -> Vec<f64> {
    let interface = crate::optics::RefractiveInterface {
        normal: *normal,
        distance,
        eta,
    };
    let mut out = Vec::with_capacity(obs.len() * 2);
    for (target, pixel) in obs.target_points.iter().zip(&obs.observed_pixels) {
        match refractive_project(target, &device.intrinsics, &device.pose, &interface) {
            Ok(uv) => {
                out.push(uv[0] - pixel[0]);
                out.push(uv[1] - pixel[1]);
            }
            Err(_) => {
                out.push(PROJECTION_SENTINEL);
                out.push(PROJECTION_SENTINEL);
            }
        }
    }
    out
}

/// Reprojection residuals for interface parameters
/// `(alpha, beta, distance)`, the two normal angles taken around the
/// camera's current rig interface normal.
///
/// Each observation contributes `(du, dv)`; points whose forward projection
/// fails contribute the sentinel value instead.
pub fn residuals(
    params: &[f64; 3],
    obs: &CalibObservation,
    rig: &RigConfig,
) -> Result<Vec<f64>, CalibrateError> {
    if obs.len() < MIN_OBSERVATIONS {
        return Err(CalibrateError::TooFewObservations(obs.len()));
    }
    let device = rig.camera(&obs.camera_id)?;
    let normal = perturb_normal(&device.interface.normal, params[0], params[1]);
    Ok(residuals_for(
        device,
        &normal,
        params[2],
        device.interface.eta,
        obs,
    ))
}

/// Central-difference Jacobian of [`residuals`] at `params`.
pub fn residual_jacobian(
    params: &[f64; 3],
    obs: &CalibObservation,
    rig: &RigConfig,
) -> Result<DMatrix<f64>, CalibrateError> {
    let n = obs.len() * 2;
    let mut jac = DMatrix::zeros(n, 3);
    for k in 0..3 {
        let mut plus = *params;
        let mut minus = *params;
        plus[k] += FD_STEP;
        minus[k] -= FD_STEP;
        let rp = residuals(&plus, obs, rig)?;
        let rm = residuals(&minus, obs, rig)?;
        for i in 0..n {
            jac[(i, k)] = (rp[i] - rm[i]) / (2.0 * FD_STEP);
        }
    }
    Ok(jac)
}

fn check_not_collinear(points: &[Point3<f64>]) -> Result<(), CalibrateError> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    let mut ev: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    // Second-largest spread direction must carry real extent.
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(CalibrateError::DegenerateGeometry);
    }
    Ok(())
}

/// Estimate the interface normal and distance by damped least squares.
///
/// The damping factor starts at 1e-3 and is divided by 10 after an accepted
/// step and multiplied by 10 after a rejected one. The Jacobian is formed by
/// central finite differences (step 1e-6 on the angles and the distance).
/// Iteration stops when the step norm falls below 1e-10, the relative
/// residual decrease falls below 1e-12, or after 200 iterations; in the last
/// case `converged` is false and the best parameters so far are returned.
pub fn estimate_interface(
    obs: &CalibObservation,
    rig: &RigConfig,
    init: &InterfaceGuess,
) -> Result<InterfaceEstimate, CalibrateError> {
    estimate_interface_with_trace(obs, rig, init).map(|(est, _)| est)
}

/// [`estimate_interface`] plus the accepted-cost history (one entry per
/// accepted step, including the initial cost).
pub fn estimate_interface_with_trace(
    obs: &CalibObservation,
    rig: &RigConfig,
    init: &InterfaceGuess,
) -> Result<(InterfaceEstimate, Vec<f64>), CalibrateError> {
    if obs.len() < MIN_OBSERVATIONS {
        return Err(CalibrateError::TooFewObservations(obs.len()));
    }
    if init.distance <= 0.0 {
        return Err(CalibrateError::BadInitialDistance(init.distance));
    }
    let device = rig.camera(&obs.camera_id)?;
    check_not_collinear(&obs.target_points)?;
    let eta = device.interface.eta;

    let mut normal = Unit::new_normalize(init.normal);
    let mut distance = init.distance;
    let mut cost = cost_of(&residuals_for(device, &normal, distance, eta, obs));
    let mut trace = vec![cost];
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        // Jacobian around the current estimate (angles measured from it).
        let residual_at = |a: f64, b: f64, d: f64| {
            let n = perturb_normal(&normal, a, b);
            residuals_for(device, &n, d, eta, obs)
        };
        let r0 = residual_at(0.0, 0.0, distance);
        let n_res = r0.len();
        let mut jac = DMatrix::zeros(n_res, 3);
        for k in 0..3 {
            let mut p = [0.0, 0.0, distance];
            let mut m = [0.0, 0.0, distance];
            p[k] += FD_STEP;
            m[k] -= FD_STEP;
            let rp = residual_at(p[0], p[1], p[2]);
            let rm = residual_at(m[0], m[1], m[2]);
            for i in 0..n_res {
                jac[(i, k)] = (rp[i] - rm[i]) / (2.0 * FD_STEP);
            }
        }
        let r_vec = DVector::from_column_slice(&r0);
        let gradient = jac.transpose() * &r_vec;
        let hessian = jac.transpose() * &jac;

        let damped = &hessian + DMatrix::identity(3, 3) * lambda;
        let Some(step) = damped.lu().solve(&(-&gradient)) else {
            lambda *= 10.0;
            continue;
        };
        if step.norm() < STEP_TOL {
            converged = true;
            break;
        }
        let cand_normal = perturb_normal(&normal, step[0], step[1]);
        let cand_distance = distance + step[2];
        if cand_distance <= 0.0 {
            lambda *= 10.0;
            continue;
        }
        let cand_cost = cost_of(&residuals_for(device, &cand_normal, cand_distance, eta, obs));
        if cand_cost < cost {
            let rel_decrease = (cost - cand_cost) / cost.max(f64::MIN_POSITIVE);
            normal = cand_normal;
            distance = cand_distance;
            cost = cand_cost;
            trace.push(cost);
            lambda = (lambda / 10.0).max(1e-15);
            if rel_decrease < REL_DECREASE_TOL {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e14 {
                break;
            }
        }
    }

    let n = normal.into_inner();
    let estimate = InterfaceEstimate {
        normal: [n.x, n.y, n.z],
        distance,
        rms_residual: (cost / obs.len() as f64).sqrt(),
        iterations,
        converged,
    };
    Ok((estimate, trace))
}

fn cost_of(residuals: &[f64]) -> f64 {
    residuals.iter().map(|r| r * r).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{Intrinsics, Pose, RefractiveInterface, DEFAULT_ETA_AIR_WATER};
    use crate::rig::DeviceRole;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Rig whose cam0 carries the true interface to be recovered.
    fn calib_rig(true_normal: Vector3<f64>, true_distance: f64) -> RigConfig {
        RigConfig {
            devices: vec![Device {
                id: "cam0".into(),
                role: DeviceRole::Camera,
                resolution: (1280, 1024),
                intrinsics: Intrinsics::new(1600.0, 1600.0, 639.5, 511.5).unwrap(),
                pose: Pose::looking_at(
                    Point3::new(-0.2, 0.1, 0.0),
                    Point3::new(0.0, 0.0, 1.0),
                    Vector3::y(),
                ),
                interface: RefractiveInterface::new(true_normal, true_distance, DEFAULT_ETA_AIR_WATER)
                    .unwrap(),
            }],
        }
    }

    /// Forward-model observations of a 3D grid of targets.
    fn synthetic_observations(rig: &RigConfig, count: usize, seed: u64) -> CalibObservation {
        let device = rig.camera("cam0").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut targets = Vec::new();
        let mut pixels = Vec::new();
        while targets.len() < count {
            let p = Point3::new(
                rng.gen_range(-0.35..0.35),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(0.6..1.4),
            );
            let Ok(uv) = refractive_project(&p, &device.intrinsics, &device.pose, &device.interface)
            else {
                continue;
            };
            if uv[0] < 0.0 || uv[1] < 0.0 || uv[0] > 1279.0 || uv[1] > 1023.0 {
                continue;
            }
            targets.push(p);
            pixels.push(uv);
        }
        CalibObservation::new("cam0", targets, pixels).unwrap()
    }

    fn tilted_normal(base: Vector3<f64>, degrees: f64, azimuth: f64) -> Vector3<f64> {
        let n0 = Unit::new_normalize(base);
        let a = degrees.to_radians() * azimuth.cos();
        let b = degrees.to_radians() * azimuth.sin();
        perturb_normal(&n0, a, b).into_inner()
    }

    #[test]
    fn residuals_zero_at_ground_truth() {
        let rig = calib_rig(Vector3::z(), 0.05);
        let obs = synthetic_observations(&rig, 30, 1);
        let r = residuals(&[0.0, 0.0, 0.05], &obs, &rig).unwrap();
        assert_eq!(r.len(), 60);
        for v in r {
            assert!(v.abs() < 1e-6, "residual {v}");
        }
    }

    #[test]
    fn residuals_sensitive_to_distance() {
        let rig = calib_rig(Vector3::z(), 0.05);
        let obs = synthetic_observations(&rig, 30, 2);
        let r = residuals(&[0.0, 0.0, 0.051], &obs, &rig).unwrap();
        let max = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max > 1e-3, "1 mm distance change must move pixels, max={max}");
    }

    #[test]
    fn residuals_reject_too_few() {
        let rig = calib_rig(Vector3::z(), 0.05);
        let obs = CalibObservation {
            camera_id: "cam0".into(),
            target_points: vec![],
            observed_pixels: vec![],
        };
        assert!(matches!(
            residuals(&[0.0, 0.0, 0.05], &obs, &rig),
            Err(CalibrateError::TooFewObservations(0))
        ));
        assert!(CalibObservation::new("cam0", vec![Point3::origin(); 3], vec![[0.0; 2]; 3]).is_err());
        assert!(CalibObservation::new("cam0", vec![Point3::origin(); 7], vec![[0.0; 2]; 6]).is_err());
    }

    #[test]
    fn recovers_interface_from_perturbed_init() {
        let true_normal = tilted_normal(Vector3::z(), 2.0, 0.8);
        let rig = calib_rig(true_normal, 0.05);
        let obs = synthetic_observations(&rig, 50, 3);
        let init = InterfaceGuess {
            normal: tilted_normal(true_normal, 5.0, 2.4),
            distance: 0.06,
        };
        let est = estimate_interface(&obs, &rig, &init).unwrap();
        assert!(est.converged);
        assert!(
            (est.distance - 0.05).abs() < 1e-4,
            "distance error {}",
            (est.distance - 0.05).abs()
        );
        let angle = est
            .normal_vec()
            .normalize()
            .dot(&true_normal.normalize())
            .clamp(-1.0, 1.0)
            .acos()
            .to_degrees();
        assert!(angle < 0.05, "normal error {angle} deg");
        assert!((est.normal_vec().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ground_truth_init_converges_immediately() {
        let rig = calib_rig(Vector3::z(), 0.05);
        let obs = synthetic_observations(&rig, 30, 4);
        let init = InterfaceGuess {
            normal: Vector3::z(),
            distance: 0.05,
        };
        let est = estimate_interface(&obs, &rig, &init).unwrap();
        assert!(est.converged);
        assert!(est.iterations <= 2, "iterations = {}", est.iterations);
        assert!(est.rms_residual < 1e-6);
    }

    #[test]
    fn cost_is_monotone_over_accepted_steps() {
        let true_normal = tilted_normal(Vector3::z(), 3.0, 1.7);
        let rig = calib_rig(true_normal, 0.055);
        let obs = synthetic_observations(&rig, 40, 5);
        let init = InterfaceGuess {
            normal: Vector3::z(),
            distance: 0.045,
        };
        let (_, trace) = estimate_interface_with_trace(&obs, &rig, &init).unwrap();
        assert!(trace.len() > 1);
        for pair in trace.windows(2) {
            assert!(pair[1] <= pair[0], "cost increased: {pair:?}");
        }
    }

    #[test]
    fn estimate_invariant_under_permutation() {
        let true_normal = tilted_normal(Vector3::z(), 1.5, 0.3);
        let rig = calib_rig(true_normal, 0.05);
        let obs = synthetic_observations(&rig, 40, 6);
        let mut rev_targets = obs.target_points.clone();
        let mut rev_pixels = obs.observed_pixels.clone();
        rev_targets.reverse();
        rev_pixels.reverse();
        let obs_rev = CalibObservation::new("cam0", rev_targets, rev_pixels).unwrap();
        let init = InterfaceGuess {
            normal: Vector3::z(),
            distance: 0.055,
        };
        let a = estimate_interface(&obs, &rig, &init).unwrap();
        let b = estimate_interface(&obs_rev, &rig, &init).unwrap();
        assert!((a.distance - b.distance).abs() < 1e-6);
        assert!((a.normal_vec() - b.normal_vec()).norm() < 1e-6);
    }

    #[test]
    fn collinear_targets_rejected() {
        let rig = calib_rig(Vector3::z(), 0.05);
        let device = rig.camera("cam0").unwrap();
        let mut targets = Vec::new();
        let mut pixels = Vec::new();
        for i in 0..10 {
            let p = Point3::new(0.0, -0.2 + 0.04 * i as f64, 1.0);
            let uv = refractive_project(&p, &device.intrinsics, &device.pose, &device.interface)
                .unwrap();
            targets.push(p);
            pixels.push(uv);
        }
        let obs = CalibObservation::new("cam0", targets, pixels).unwrap();
        let init = InterfaceGuess::default();
        assert!(matches!(
            estimate_interface(&obs, &rig, &init),
            Err(CalibrateError::DegenerateGeometry)
        ));
    }

    #[test]
    fn central_jacobian_matches_forward_difference() {
        let true_normal = tilted_normal(Vector3::z(), 2.5, 4.0);
        let rig = calib_rig(true_normal, 0.06);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..5 {
            let obs = synthetic_observations(&rig, 12, 100 + trial);
            let params = [
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.02..0.02),
                rng.gen_range(0.045..0.075),
            ];
            let central = residual_jacobian(&params, &obs, &rig).unwrap();
            // Independent forward-difference estimate.
            let h = 1e-7;
            let r0 = residuals(&params, &obs, &rig).unwrap();
            let mut forward = DMatrix::zeros(r0.len(), 3);
            for k in 0..3 {
                let mut p = params;
                p[k] += h;
                let rp = residuals(&p, &obs, &rig).unwrap();
                for i in 0..r0.len() {
                    forward[(i, k)] = (rp[i] - r0[i]) / h;
                }
            }
            let rel = (central.clone() - forward.clone()).norm() / forward.norm().max(1e-12);
            assert!(rel < 1e-4, "jacobian mismatch {rel}");
        }
    }

    #[test]
    fn noisy_distance_recovery_median_under_1mm() {
        let true_normal = tilted_normal(Vector3::z(), 2.0, 5.1);
        let rig = calib_rig(true_normal, 0.05);
        let normal_noise = Normal::new(0.0, 0.5).unwrap();
        let mut errors = Vec::new();
        for trial in 0..20u64 {
            let mut obs = synthetic_observations(&rig, 50, 200 + trial);
            let mut rng = ChaCha8Rng::seed_from_u64(900 + trial);
            for px in &mut obs.observed_pixels {
                px[0] += normal_noise.sample(&mut rng);
                px[1] += normal_noise.sample(&mut rng);
            }
            let init = InterfaceGuess {
                normal: tilted_normal(true_normal, 5.0, 1.0),
                distance: 0.06,
            };
            let est = estimate_interface(&obs, &rig, &init).unwrap();
            errors.push((est.distance - 0.05).abs());
        }
        errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = errors[errors.len() / 2];
        assert!(median < 1e-3, "median distance error {median}");
    }

    #[test]
    fn observation_file_round_trip() {
        let rig = calib_rig(Vector3::z(), 0.05);
        let obs = synthetic_observations(&rig, 10, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("obs.json");
        obs.save(&path).unwrap();
        let back = CalibObservation::load(&path).unwrap();
        assert_eq!(back.camera_id, "cam0");
        assert_eq!(back.len(), 10);
        assert_eq!(back.target_points[3], obs.target_points[3]);
        assert_eq!(back.observed_pixels[3], obs.observed_pixels[3]);
    }
}
