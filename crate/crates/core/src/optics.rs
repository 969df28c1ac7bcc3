//! Pinhole device geometry and flat-port refractive ray tracing.
//!
//! Cameras and projectors share the same model: a pinhole described by
//! [`Intrinsics`] and a [`Pose`], plus a [`RefractiveInterface`] for the
//! housing port. The interface is a single flat air-water boundary in the
//! device frame, given by a unit normal (pointing from the device into the
//! water) and the distance from the device center to the plane. Glass
//! thickness is collapsed into that one boundary.
//!
//! Device frame convention: +z is the optical axis, pixels follow the usual
//! image layout, and `Pose` maps device coordinates to world coordinates.

use nalgebra::{Matrix3, Point3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default air-to-water refractive index ratio (n_air / n_water).
pub const DEFAULT_ETA_AIR_WATER: f64 = 1.0 / 1.33;

const UNIT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OpticsError {
    #[error("focal lengths must be positive, got fx={fx} fy={fy}")]
    BadIntrinsics { fx: f64, fy: f64 },
    #[error("rotation is not orthonormal with determinant +1")]
    BadRotation,
    #[error("interface normal must be a unit vector")]
    BadNormal,
    #[error("interface distance must be positive, got {0}")]
    BadDistance(f64),
    #[error("eta must satisfy 0 < eta <= 1, got {0}")]
    BadEta(f64),
    #[error("total internal reflection (eta*sin(theta_i) > 1)")]
    TotalInternalReflection,
    #[error("ray is parallel to or facing away from the interface")]
    RayMissesInterface,
    #[error("point is not on the water side of the interface")]
    PointBehindInterface,
    #[error("refractive projection did not converge")]
    ProjectionNoConvergence,
}

/// Pinhole intrinsic parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub skew: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, OpticsError> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(OpticsError::BadIntrinsics { fx, fy });
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            skew: 0.0,
        })
    }

    /// Normalised device-frame direction for a pixel (z = 1 plane).
    fn pixel_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let y = (v - self.cy) / self.fy;
        let x = (u - self.cx) / self.fx - self.skew * (v - self.cy) / (self.fx * self.fy);
        Vector3::new(x, y, 1.0)
    }

    /// Pixel for a device-frame point with z > 0 (inverse of
    /// [`Self::pixel_direction`]).
    fn project_device(&self, p: &Vector3<f64>) -> [f64; 2] {
        let x = p.x / p.z;
        let y = p.y / p.z;
        let v = self.cy + self.fy * y;
        let u = self.cx + self.fx * x + self.skew * y;
        [u, v]
    }
}

/// Rigid device-to-world transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, OpticsError> {
        let rtr = rotation.transpose() * rotation;
        if (rtr - Matrix3::identity()).norm() > UNIT_TOL * 10.0
            || (rotation.determinant() - 1.0).abs() > UNIT_TOL * 10.0
        {
            return Err(OpticsError::BadRotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Pose placing the device at `eye` with its optical axis toward
    /// `target`; `up` is only a hint for the image-vertical direction.
    pub fn looking_at(eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        Self {
            rotation: Matrix3::from_columns(&[x, y, z]),
            translation: eye.coords,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Device center in world coordinates.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.translation)
    }

    pub fn device_to_world_dir(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    pub fn world_to_device_dir(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * d
    }

    pub fn device_to_world_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn world_to_device_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation.transpose() * (p.coords - self.translation))
    }
}

/// Flat refractive boundary in the device frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RefractiveInterface {
    /// Unit normal in the device frame, pointing from the device into water.
    pub normal: Unit<Vector3<f64>>,
    /// Distance from the device center to the interface plane, meters.
    pub distance: f64,
    /// Refractive index ratio n_air / n_water.
    pub eta: f64,
}

impl RefractiveInterface {
    pub fn new(normal: Vector3<f64>, distance: f64, eta: f64) -> Result<Self, OpticsError> {
        if (normal.norm() - 1.0).abs() > 1e-6 {
            return Err(OpticsError::BadNormal);
        }
        if distance <= 0.0 {
            return Err(OpticsError::BadDistance(distance));
        }
        if eta <= 0.0 || eta > 1.0 {
            return Err(OpticsError::BadEta(eta));
        }
        Ok(Self {
            normal: Unit::new_normalize(normal),
            distance,
            eta,
        })
    }

    /// Port perpendicular to the optical axis at `distance`, default water eta.
    pub fn axial(distance: f64) -> Self {
        Self {
            normal: Unit::new_unchecked(Vector3::z()),
            distance,
            eta: DEFAULT_ETA_AIR_WATER,
        }
    }
}

/// Half-line with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Point3<f64>,
    pub direction: Unit<Vector3<f64>>,
}

impl Ray {
    pub fn new(origin: Point3<f64>, direction: Vector3<f64>) -> Self {
        Self {
            origin,
            direction: Unit::new_normalize(direction),
        }
    }

    pub fn at(&self, t: f64) -> Point3<f64> {
        self.origin + self.direction.into_inner() * t
    }

    /// Shortest distance from `p` to the ray's supporting line.
    pub fn distance_to_point(&self, p: &Point3<f64>) -> f64 {
        let w = p - self.origin;
        w.cross(&self.direction).norm()
    }
}

/// Back-project a pixel into an in-air world ray from the device center.
pub fn pixel_to_ray(pixel: [f64; 2], intrinsics: &Intrinsics, pose: &Pose) -> Ray {
    let d = intrinsics.pixel_direction(pixel[0], pixel[1]);
    Ray::new(pose.center(), pose.device_to_world_dir(&d))
}

/// Refract a unit direction through a surface with unit normal `n`.
///
/// `eta` is the ratio of the incident medium's index to the transmitted
/// medium's index. The sign of `n` does not matter; it is oriented against
/// the propagation internally so that the output is unit length and coplanar
/// with `(d, n)`.
pub fn refract_direction(
    d: &Unit<Vector3<f64>>,
    n: &Unit<Vector3<f64>>,
    eta: f64,
) -> Result<Unit<Vector3<f64>>, OpticsError> {
    // Orient the normal against the incoming direction: cos(theta_i) >= 0.
    let mut nn = n.into_inner();
    let mut cos_i = -d.dot(&nn);
    if cos_i < 0.0 {
        nn = -nn;
        cos_i = -cos_i;
    }
    let sin2_t = eta * eta * (1.0 - cos_i * cos_i);
    if sin2_t > 1.0 {
        return Err(OpticsError::TotalInternalReflection);
    }
    let cos_t = (1.0 - sin2_t).sqrt();
    let t = d.into_inner() * eta + nn * (eta * cos_i - cos_t);
    Ok(Unit::new_normalize(t))
}

/// Trace an in-air device ray through the flat port into the water.
///
/// The returned ray starts at the interface crossing point (world frame)
/// with the refracted direction.
pub fn trace_through_interface(
    ray: &Ray,
    interface: &RefractiveInterface,
    pose: &Pose,
) -> Result<Ray, OpticsError> {
    let d_dev = pose.world_to_device_dir(&ray.direction);
    let o_dev = pose.world_to_device_point(&ray.origin);
    let n = interface.normal.into_inner();
    let along = d_dev.dot(&n);
    if along <= 1e-15 {
        return Err(OpticsError::RayMissesInterface);
    }
    let t = (interface.distance - o_dev.coords.dot(&n)) / along;
    if t < 0.0 {
        return Err(OpticsError::RayMissesInterface);
    }
    let crossing_dev = o_dev + d_dev * t;
    let crossing = pose.device_to_world_point(&crossing_dev);
    let n_world = Unit::new_normalize(pose.device_to_world_dir(&n));
    let refracted = refract_direction(&ray.direction, &n_world, interface.eta)?;
    Ok(Ray {
        origin: crossing,
        direction: refracted,
    })
}

/// Project an underwater world point to the pixel whose refracted ray passes
/// through it.
///
/// The interface crossing is found by a 1-D root find on the radial offset
/// `r` within the plane of incidence: bracketed bisection refined by Newton
/// steps, tolerance 1e-12 m on `r`, at most 128 iterations.
pub fn refractive_project(
    point: &Point3<f64>,
    intrinsics: &Intrinsics,
    pose: &Pose,
    interface: &RefractiveInterface,
) -> Result<[f64; 2], OpticsError> {
    let x = pose.world_to_device_point(point).coords;
    let n = interface.normal.into_inner();
    let d0 = interface.distance;
    let axial = x.dot(&n);
    let height = axial - d0;
    if height <= 0.0 {
        return Err(OpticsError::PointBehindInterface);
    }

    let lateral_vec = x - n * axial;
    let lateral = lateral_vec.norm();
    let eta = interface.eta;

    let crossing_dev = if lateral < 1e-14 {
        // On-axis: no bending regardless of eta.
        n * d0
    } else {
        let u = lateral_vec / lateral;
        // Snell residual at crossing offset r: eta*sin(theta_air) - sin(theta_water).
        let f = |r: f64| {
            let sin_air = r / (r * r + d0 * d0).sqrt();
            let dl = lateral - r;
            let sin_water = dl / (dl * dl + height * height).sqrt();
            eta * sin_air - sin_water
        };
        let r_max = d0 * (89.0f64).to_radians().tan();
        let mut lo = 0.0;
        let mut hi = lateral.min(r_max);
        if f(hi) < 0.0 {
            // Beyond the modelled field: no crossing inside the bracket.
            return Err(OpticsError::ProjectionNoConvergence);
        }
        // f(lo) <= 0 <= f(hi); f is monotone increasing on the bracket.
        // Iterate well past the 1e-12 m contract so the pixel error stays
        // below 1e-9 px even at short port distances.
        let step_tol = 1e-15 * (1.0 + lateral);
        let mut r = 0.5 * (lo + hi);
        let mut converged = false;
        for _ in 0..128 {
            let fr = f(r);
            if fr > 0.0 {
                hi = r;
            } else {
                lo = r;
            }
            // Newton refinement from the bisection midpoint.
            let h = 1e-7 * (1.0 + r.abs());
            let df = (f(r + h) - f(r - h)) / (2.0 * h);
            let mut next = if df.abs() > 1e-18 { r - fr / df } else { f64::NAN };
            if !next.is_finite() || next <= lo || next >= hi {
                next = 0.5 * (lo + hi);
            }
            if (next - r).abs() < step_tol || hi - lo < step_tol {
                r = next;
                converged = true;
                break;
            }
            r = next;
        }
        if !converged && (hi - lo) > 1e-12 {
            return Err(OpticsError::ProjectionNoConvergence);
        }
        n * d0 + u * r
    };

    Ok(intrinsics.project_device(&crossing_dev))
}
