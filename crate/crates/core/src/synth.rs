//! Synthetic capture: render gray-code stacks of analytic scenes through the
//! full refractive model, with per-pixel ground truth.
//!
//! The renderer stands in for the ocean. For every camera pixel it traces
//! the refracted ray into the water, intersects the analytic scene, projects
//! the hit back into the projector (including a projector-side occlusion
//! check), and fills the whole pattern stack from that one correspondence.
//! Shading is albedo-only with fixed white/black levels, so decode contrast
//! is exactly predictable; optional Gaussian intensity noise is generated
//! from a seeded counter-based stream and is bit-reproducible.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graycode::PatternSequence;
use crate::optics::{pixel_to_ray, refractive_project, trace_through_interface, Ray};
use crate::pgm::GrayImage;
use crate::reconstruct::{CloudPoint, PointCloud};
use crate::rig::{RigConfig, RigError};

/// Fixed shading levels (8-bit intensities).
pub const WHITE_LEVEL: f64 = 220.0;
pub const BLACK_LEVEL: f64 = 30.0;

const T_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error("scene must contain at least one primitive")]
    EmptyScene,
    #[error("sphere radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("albedo must lie in [0, 1], got {0}")]
    BadAlbedo(f64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("ground truth file: {0}")]
    GroundTruthFormat(String),
}

/// Analytic scene surface.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Plane {
        point: [f64; 3],
        normal: [f64; 3],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Triangle {
        vertices: [[f64; 3]; 3],
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenePrimitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub albedo: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<ScenePrimitive>,
}

impl Scene {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.primitives.is_empty() {
            return Err(SynthError::EmptyScene);
        }
        for p in &self.primitives {
            if let Shape::Sphere { radius, .. } = p.shape {
                if radius <= 0.0 {
                    return Err(SynthError::BadRadius(radius));
                }
            }
            if !(0.0..=1.0).contains(&p.albedo) {
                return Err(SynthError::BadAlbedo(p.albedo));
            }
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, SynthError> {
        let scene: Scene = serde_json::from_str(&fs::read_to_string(path)?)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), SynthError> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Nearest intersection along `ray`: `(t, primitive index)`.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some(t) = intersect_shape(&p.shape, ray) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }
}

/// Nearest positive hit parameter of `ray` against `shape`.
pub fn intersect_shape(shape: &Shape, ray: &Ray) -> Option<f64> {
    let o = ray.origin;
    let d = ray.direction.into_inner();
    match shape {
        Shape::Plane { point, normal } => {
            let n = Vector3::new(normal[0], normal[1], normal[2]);
            let denom = d.dot(&n);
            if denom.abs() < 1e-15 {
                return None;
            }
            let p0 = Point3::new(point[0], point[1], point[2]);
            let t = (p0 - o).dot(&n) / denom;
            (t > T_EPS).then_some(t)
        }
        Shape::Sphere { center, radius } => {
            let c = Point3::new(center[0], center[1], center[2]);
            let oc = o - c;
            let b = d.dot(&oc);
            let disc = b * b - (oc.norm_squared() - radius * radius);
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t0 = -b - sq;
            if t0 > T_EPS {
                return Some(t0);
            }
            let t1 = -b + sq;
            (t1 > T_EPS).then_some(t1)
        }
        Shape::Triangle { vertices } => {
            // Moller-Trumbore.
            let v0 = Point3::from(Vector3::from(vertices[0]));
            let v1 = Point3::from(Vector3::from(vertices[1]));
            let v2 = Point3::from(Vector3::from(vertices[2]));
            let e1 = v1 - v0;
            let e2 = v2 - v0;
            let pvec = d.cross(&e2);
            let det = e1.dot(&pvec);
            if det.abs() < 1e-15 {
                return None;
            }
            let inv_det = 1.0 / det;
            let tvec = o - v0;
            let u = tvec.dot(&pvec) * inv_det;
            if !(0.0..=1.0).contains(&u) {
                return None;
            }
            let qvec = tvec.cross(&e1);
            let v = d.dot(&qvec) * inv_det;
            if v < 0.0 || u + v > 1.0 {
                return None;
            }
            let t = e2.dot(&qvec) * inv_det;
            (t > T_EPS).then_some(t)
        }
    }
}

/// Additive Gaussian intensity noise, `sigma` in 8-bit levels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub const NONE: Self = Self { sigma: 0.0, seed: 0 };
}

/// Rendered stack plus per-pixel ground truth.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub camera_id: String,
    pub projector_id: String,
    pub width: u32,
    pub height: u32,
    /// One image per pattern, in manifest order.
    pub stack: Vec<GrayImage>,
    /// World-space hit point per camera pixel, row-major.
    pub hits: Vec<Option<Point3<f64>>>,
    /// Projector pixel illuminating each camera pixel, row-major; `None`
    /// when the hit is missing, outside the projector, or occluded.
    pub proj_px: Vec<Option<(u32, u32)>>,
}

struct PixelGeometry {
    hit: Option<Point3<f64>>,
    proj: Option<(u32, u32)>,
    albedo: f64,
}

/// Render the pattern stack of `scene` as seen by `camera_id` and lit by
/// `projector_id`.
pub fn render(
    scene: &Scene,
    rig: &RigConfig,
    camera_id: &str,
    projector_id: &str,
    patterns: &PatternSequence,
    noise: NoiseModel,
) -> Result<RenderOutput, SynthError> {
    scene.validate()?;
    let camera = rig.camera(camera_id)?;
    let projector = rig.projector(projector_id)?;
    let (w, h) = camera.resolution;
    let (pw, ph) = (
        patterns.spec.projector_width,
        patterns.spec.projector_height,
    );

    // Geometry pass: one correspondence per camera pixel.
    let geometry: Vec<PixelGeometry> = (0..w as usize * h as usize)
        .into_par_iter()
        .map(|i| {
            let (x, y) = (i % w as usize, i / w as usize);
            let miss = PixelGeometry {
                hit: None,
                proj: None,
                albedo: 0.0,
            };
            let air = pixel_to_ray([x as f64, y as f64], &camera.intrinsics, &camera.pose);
            let Ok(wet) = trace_through_interface(&air, &camera.interface, &camera.pose) else {
                return miss;
            };
            let Some((t, prim)) = scene.intersect(&wet) else {
                return miss;
            };
            let hit = wet.at(t);
            let albedo = scene.primitives[prim].albedo;
            let Ok(uv) = refractive_project(
                &hit,
                &projector.intrinsics,
                &projector.pose,
                &projector.interface,
            ) else {
                return PixelGeometry {
                    hit: Some(hit),
                    proj: None,
                    albedo,
                };
            };
            let px = (uv[0] + 0.5).floor();
            let py = (uv[1] + 0.5).floor();
            let in_bounds = px >= 0.0 && py >= 0.0 && (px as u32) < pw && (py as u32) < ph;
            let lit = in_bounds && !occluded(scene, projector, &hit, uv);
            PixelGeometry {
                hit: Some(hit),
                proj: lit.then(|| (px as u32, py as u32)),
                albedo,
            }
        })
        .collect();

    // Fill pass: per pattern, per pixel, one lookup; noise streams are keyed
    // by pattern index so the result is independent of thread scheduling.
    let stack: Vec<GrayImage> = patterns
        .patterns
        .par_iter()
        .map(|pattern| {
            let mut img = GrayImage::new(w, h);
            let data = img.pixels_mut();
            for (i, g) in geometry.iter().enumerate() {
                let level = match g.proj {
                    Some((px, py)) if pattern.pixels.get(px, py) > 127 => {
                        BLACK_LEVEL + g.albedo * (WHITE_LEVEL - BLACK_LEVEL)
                    }
                    _ => BLACK_LEVEL,
                };
                data[i] = level.round() as u8;
            }
            if noise.sigma > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
                rng.set_stream(pattern.index as u64 + 1);
                let normal = Normal::new(0.0, noise.sigma).expect("positive sigma");
                for v in img.pixels_mut() {
                    let noisy = *v as f64 + normal.sample(&mut rng);
                    *v = noisy.round().clamp(0.0, 255.0) as u8;
                }
            }
            img
        })
        .collect();

    Ok(RenderOutput {
        camera_id: camera_id.to_string(),
        projector_id: projector_id.to_string(),
        width: w,
        height: h,
        stack,
        hits: geometry.iter().map(|g| g.hit).collect(),
        proj_px: geometry.iter().map(|g| g.proj).collect(),
    })
}

/// Does any surface block the projector-to-hit light path?
fn occluded(
    scene: &Scene,
    projector: &crate::rig::Device,
    hit: &Point3<f64>,
    uv: [f64; 2],
) -> bool {
    let air = pixel_to_ray(uv, &projector.intrinsics, &projector.pose);
    let Ok(wet) = trace_through_interface(&air, &projector.interface, &projector.pose) else {
        return true;
    };
    let t_hit = (hit - wet.origin).dot(&wet.direction);
    match scene.intersect(&wet) {
        Some((t, _)) => t < t_hit - 1e-6,
        None => false,
    }
}

impl RenderOutput {
    /// All ground-truth hit points as a zero-gap cloud, row-major like the
    /// reconstruction output.
    pub fn ground_truth_cloud(&self) -> PointCloud {
        let mut points = Vec::new();
        for (i, hit) in self.hits.iter().enumerate() {
            if let Some(p) = hit {
                points.push(CloudPoint {
                    position: *p,
                    gap: 0.0,
                    pixel: (i as u32 % self.width, i as u32 / self.width),
                });
            }
        }
        PointCloud {
            source_a: self.camera_id.clone(),
            source_b: self.projector_id.clone(),
            points,
        }
    }

    /// Ground-truth hit for camera pixel `(x, y)`.
    pub fn hit_at(&self, x: u32, y: u32) -> Option<Point3<f64>> {
        self.hits[(y * self.width + x) as usize]
    }

    /// Ground-truth projector pixel for camera pixel `(x, y)`.
    pub fn proj_at(&self, x: u32, y: u32) -> Option<(u32, u32)> {
        self.proj_px[(y * self.width + x) as usize]
    }
}

const GT_MAGIC: &[u8; 4] = b"SSGT";
const GT_CHANNELS: u32 = 5;

/// Write ground truth as binary f32 arrays.
///
/// Layout: magic `SSGT`, then u32 LE version (1), width, height, channels
/// (5), followed by `width*height*5` f32 LE values row-major per pixel:
/// hit x/y/z (meters) and projector x/y (pixels), NaN where absent.
pub fn write_ground_truth<P: AsRef<Path>>(out: &RenderOutput, path: P) -> Result<(), SynthError> {
    let mut buf = Vec::with_capacity(20 + out.hits.len() * 20);
    buf.extend_from_slice(GT_MAGIC);
    for v in [1u32, out.width, out.height, GT_CHANNELS] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for (hit, proj) in out.hits.iter().zip(&out.proj_px) {
        let h = hit.map_or([f32::NAN; 3], |p| [p.x as f32, p.y as f32, p.z as f32]);
        let q = proj.map_or([f32::NAN; 2], |(x, y)| [x as f32, y as f32]);
        for v in h.iter().chain(q.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Ground truth arrays read back from disk.
pub struct GroundTruth {
    pub width: u32,
    pub height: u32,
    pub hits: Vec<Option<Point3<f64>>>,
    pub proj_px: Vec<Option<(u32, u32)>>,
}

pub fn read_ground_truth<P: AsRef<Path>>(path: P) -> Result<GroundTruth, SynthError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| SynthError::GroundTruthFormat(m.to_string());
    if bytes.len() < 20 || &bytes[..4] != GT_MAGIC {
        return Err(bad("missing SSGT magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    if u32_at(4) != 1 {
        return Err(bad("unsupported version"));
    }
    let (width, height, channels) = (u32_at(8), u32_at(12), u32_at(16));
    if channels != GT_CHANNELS {
        return Err(bad("unexpected channel count"));
    }
    let n = width as usize * height as usize;
    if bytes.len() != 20 + n * GT_CHANNELS as usize * 4 {
        return Err(bad("truncated data"));
    }
    let mut hits = Vec::with_capacity(n);
    let mut proj_px = Vec::with_capacity(n);
    for i in 0..n {
        let base = 20 + i * GT_CHANNELS as usize * 4;
        let f = |k: usize| {
            f32::from_le_bytes(bytes[base + 4 * k..base + 4 * k + 4].try_into().unwrap())
        };
        let (hx, hy, hz, px, py) = (f(0), f(1), f(2), f(3), f(4));
        hits.push(if hx.is_nan() {
            None
        } else {
            Some(Point3::new(hx as f64, hy as f64, hz as f64))
        });
        proj_px.push(if px.is_nan() {
            None
        } else {
            Some((px as u32, py as u32))
        });
    }
    Ok(GroundTruth {
        width,
        height,
        hits,
        proj_px,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graycode::{decode_stack, generate_patterns, PatternSpec};
    use crate::optics::{Intrinsics, Pose, RefractiveInterface, DEFAULT_ETA_AIR_WATER};
    use crate::rig::{Device, DeviceRole};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_rig(eta: f64) -> RigConfig {
        let interface = RefractiveInterface::new(Vector3::z(), 0.05, eta).unwrap();
        RigConfig {
            devices: vec![
                Device {
                    id: "cam0".into(),
                    role: DeviceRole::Camera,
                    resolution: (96, 72),
                    intrinsics: Intrinsics::new(110.0, 110.0, 47.5, 35.5).unwrap(),
                    pose: Pose::looking_at(
                        Point3::new(-0.15, 0.0, 0.0),
                        Point3::new(0.0, 0.0, 1.0),
                        Vector3::y(),
                    ),
                    interface: interface.clone(),
                },
                Device {
                    id: "proj0".into(),
                    role: DeviceRole::Projector,
                    resolution: (80, 60),
                    intrinsics: Intrinsics::new(90.0, 90.0, 39.5, 29.5).unwrap(),
                    pose: Pose::looking_at(
                        Point3::new(0.15, 0.0, 0.0),
                        Point3::new(0.0, 0.0, 1.0),
                        Vector3::y(),
                    ),
                    interface,
                },
            ],
        }
    }

    fn plane_scene() -> Scene {
        Scene {
            primitives: vec![ScenePrimitive {
                shape: Shape::Plane {
                    point: [0.0, 0.0, 1.0],
                    normal: [0.1, 0.05, -1.0],
                },
                albedo: 1.0,
            }],
        }
    }

    fn patterns_for(rig: &RigConfig) -> PatternSequence {
        let proj = rig.projector("proj0").unwrap();
        let spec = PatternSpec::new(proj.resolution.0, proj.resolution.1).unwrap();
        generate_patterns(&spec).unwrap()
    }

    #[test]
    fn scene_validation() {
        assert!(matches!(
            Scene { primitives: vec![] }.validate(),
            Err(SynthError::EmptyScene)
        ));
        let bad = Scene {
            primitives: vec![ScenePrimitive {
                shape: Shape::Sphere {
                    center: [0.0; 3],
                    radius: -1.0,
                },
                albedo: 0.5,
            }],
        };
        assert!(matches!(bad.validate(), Err(SynthError::BadRadius(_))));
        let bad = Scene {
            primitives: vec![ScenePrimitive {
                shape: Shape::Plane {
                    point: [0.0; 3],
                    normal: [0.0, 0.0, 1.0],
                },
                albedo: 1.5,
            }],
        };
        assert!(matches!(bad.validate(), Err(SynthError::BadAlbedo(_))));
    }

    #[test]
    fn scene_json_round_trip() {
        let scene = Scene {
            primitives: vec![
                ScenePrimitive {
                    shape: Shape::Sphere {
                        center: [0.0, 0.1, 1.0],
                        radius: 0.2,
                    },
                    albedo: 0.7,
                },
                ScenePrimitive {
                    shape: Shape::Triangle {
                        vertices: [[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
                    },
                    albedo: 1.0,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        scene.save(&path).unwrap();
        let back = Scene::load(&path).unwrap();
        assert_eq!(back.primitives.len(), 2);
        assert!(matches!(back.primitives[0].shape, Shape::Sphere { .. }));
    }

    /// March along the ray in 1e-4 steps and report the first sign change of
    /// the implicit surface function.
    fn marching_oracle(shape: &Shape, ray: &Ray, t_max: f64) -> Option<f64> {
        let implicit = |p: Point3<f64>| -> f64 {
            match shape {
                Shape::Plane { point, normal } => {
                    let n = Vector3::new(normal[0], normal[1], normal[2]);
                    (p - Point3::new(point[0], point[1], point[2])).dot(&n)
                }
                Shape::Sphere { center, radius } => {
                    (p - Point3::new(center[0], center[1], center[2])).norm() - radius
                }
                Shape::Triangle { .. } => unreachable!(),
            }
        };
        let step = 1e-4;
        let mut prev = implicit(ray.at(step));
        let mut t = step;
        while t < t_max {
            t += step;
            let cur = implicit(ray.at(t));
            if prev.signum() != cur.signum() {
                return Some(t - step / 2.0);
            }
            prev = cur;
        }
        None
    }

    #[test]
    fn intersections_match_marching_oracle() {
        let shapes = [
            Shape::Plane {
                point: [0.0, 0.0, 1.0],
                normal: [0.2, -0.1, -1.0],
            },
            Shape::Sphere {
                center: [0.1, -0.05, 1.2],
                radius: 0.4,
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for shape in &shapes {
            let mut checked = 0;
            while checked < 40 {
                let ray = Ray::new(
                    Point3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 0.0),
                    Vector3::new(
                        rng.gen_range(-0.5..0.5),
                        rng.gen_range(-0.5..0.5),
                        1.0,
                    ),
                );
                let got = intersect_shape(shape, &ray);
                let want = marching_oracle(shape, &ray, 3.0);
                match (got, want) {
                    (Some(t), Some(to)) => {
                        assert!((t - to).abs() < 1e-3, "t={t} oracle={to}");
                        checked += 1;
                    }
                    (None, None) => {}
                    (Some(t), None) => assert!(t > 3.0),
                    (None, Some(to)) => panic!("missed hit at {to}"),
                }
            }
        }
    }

    #[test]
    fn white_pattern_reads_white_level() {
        let rig = small_rig(DEFAULT_ETA_AIR_WATER);
        let out = render(
            &plane_scene(),
            &rig,
            "cam0",
            "proj0",
            &patterns_for(&rig),
            NoiseModel::NONE,
        )
        .unwrap();
        // Stack index 0 is the white reference.
        let white = &out.stack[0];
        let mut lit = 0;
        for y in 0..out.height {
            for x in 0..out.width {
                if out.proj_at(x, y).is_some() {
                    assert_eq!(white.get(x, y), WHITE_LEVEL as u8);
                    lit += 1;
                }
            }
        }
        assert!(lit > 1000, "projector must cover most of the view, lit={lit}");
    }

    #[test]
    fn missed_rays_read_black_level() {
        let rig = small_rig(DEFAULT_ETA_AIR_WATER);
        // Sphere smaller than the view: edge pixels miss.
        let scene = Scene {
            primitives: vec![ScenePrimitive {
                shape: Shape::Sphere {
                    center: [0.0, 0.0, 1.0],
                    radius: 0.08,
                },
                albedo: 1.0,
            }],
        };
        let out = render(&scene, &rig, "cam0", "proj0", &patterns_for(&rig), NoiseModel::NONE)
            .unwrap();
        assert!(out.hit_at(0, 0).is_none());
        for img in &out.stack {
            assert_eq!(img.get(0, 0), BLACK_LEVEL as u8);
        }
        assert!(out.hit_at(out.width / 2, out.height / 2).is_some());
    }

    /// The module's defining test: decoding a noiseless render reproduces
    /// the ground-truth projector map exactly on all decodable pixels.
    #[test]
    fn decode_matches_ground_truth_exactly() {
        let rig = small_rig(DEFAULT_ETA_AIR_WATER);
        let patterns = patterns_for(&rig);
        let out = render(&plane_scene(), &rig, "cam0", "proj0", &patterns, NoiseModel::NONE)
            .unwrap();
        let map = decode_stack("cam0", &out.stack, &patterns.spec, 0.0).unwrap();
        let mut decoded = 0;
        for y in 0..out.height {
            for x in 0..out.width {
                assert_eq!(map.get(x, y).proj, out.proj_at(x, y), "pixel ({x},{y})");
                if map.get(x, y).proj.is_some() {
                    decoded += 1;
                }
            }
        }
        assert!(decoded > 1000);
    }

    #[test]
    fn noise_is_bit_reproducible() {
        let rig = small_rig(DEFAULT_ETA_AIR_WATER);
        let patterns = patterns_for(&rig);
        let noise = NoiseModel { sigma: 2.0, seed: 42 };
        let a = render(&plane_scene(), &rig, "cam0", "proj0", &patterns, noise).unwrap();
        let b = render(&plane_scene(), &rig, "cam0", "proj0", &patterns, noise).unwrap();
        for (ia, ib) in a.stack.iter().zip(&b.stack) {
            assert_eq!(ia.pixels(), ib.pixels());
        }
        let c = render(
            &plane_scene(),
            &rig,
            "cam0",
            "proj0",
            &patterns,
            NoiseModel { sigma: 2.0, seed: 43 },
        )
        .unwrap();
        assert_ne!(a.stack[0].pixels(), c.stack[0].pixels());
    }

    /// A hit whose projection falls outside the projector image is never lit
    /// above the black level.
    #[test]
    fn shadow_pixels_stay_black() {
        let rig = small_rig(DEFAULT_ETA_AIR_WATER);
        // Wide plane; camera sees regions the projector cannot reach.
        let scene = Scene {
            primitives: vec![ScenePrimitive {
                shape: Shape::Plane {
                    point: [0.0, 0.0, 0.55],
                    normal: [0.0, 0.0, -1.0],
                },
                albedo: 1.0,
            }],
        };
        let out = render(&scene, &rig, "cam0", "proj0", &patterns_for(&rig), NoiseModel::NONE)
            .unwrap();
        let mut unlit_hits = 0;
        for y in 0..out.height {
            for x in 0..out.width {
                if out.hit_at(x, y).is_some() && out.proj_at(x, y).is_none() {
                    unlit_hits += 1;
                    for img in &out.stack {
                        assert!(img.get(x, y) <= BLACK_LEVEL as u8);
                    }
                }
            }
        }
        assert!(unlit_hits > 0, "expected some projector shadow");
    }

    /// A triangle hovering between the projector and the plane casts a
    /// projector-side shadow onto plane pixels the camera still sees.
    #[test]
    fn projector_side_occlusion() {
        let rig = small_rig(DEFAULT_ETA_AIR_WATER);
        let blocker = ScenePrimitive {
            // Near the projector's line of sight to the plane center.
            shape: Shape::Triangle {
                vertices: [[0.12, -0.08, 0.6], [0.2, 0.1, 0.6], [0.04, 0.1, 0.6]],
            },
            albedo: 1.0,
        };
        let mut scene = plane_scene();
        scene.primitives.push(blocker);
        let out = render(&scene, &rig, "cam0", "proj0", &patterns_for(&rig), NoiseModel::NONE)
            .unwrap();
        // Shadowed plane pixels: hit on the plane (z near 1) but unlit.
        let mut shadowed = 0;
        for (hit, proj) in out.hits.iter().zip(&out.proj_px) {
            if let Some(p) = hit {
                if p.z > 0.8 && proj.is_none() {
                    shadowed += 1;
                }
            }
        }
        assert!(shadowed > 20, "expected a shadow, got {shadowed} pixels");
    }

    #[test]
    fn ground_truth_cloud_on_plane() {
        let rig = small_rig(DEFAULT_ETA_AIR_WATER);
        let out = render(
            &plane_scene(),
            &rig,
            "cam0",
            "proj0",
            &patterns_for(&rig),
            NoiseModel::NONE,
        )
        .unwrap();
        let cloud = out.ground_truth_cloud();
        let expected = out.hits.iter().filter(|h| h.is_some()).count();
        assert_eq!(cloud.len(), expected);
        let n = Vector3::new(0.1, 0.05, -1.0);
        for p in &cloud.points {
            let d = (p.position - Point3::new(0.0, 0.0, 1.0)).dot(&n);
            assert!(d.abs() < 1e-12 * n.norm().max(1.0));
            assert_eq!(p.gap, 0.0);
        }
    }

    #[test]
    fn ground_truth_file_round_trip() {
        let rig = small_rig(DEFAULT_ETA_AIR_WATER);
        let out = render(
            &plane_scene(),
            &rig,
            "cam0",
            "proj0",
            &patterns_for(&rig),
            NoiseModel::NONE,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gt.bin");
        write_ground_truth(&out, &path).unwrap();
        let gt = read_ground_truth(&path).unwrap();
        assert_eq!((gt.width, gt.height), (out.width, out.height));
        assert_eq!(gt.proj_px, out.proj_px);
        for (a, b) in gt.hits.iter().zip(&out.hits) {
            match (a, b) {
                (Some(pa), Some(pb)) => assert!((pa - pb).norm() < 1e-6),
                (None, None) => {}
                _ => panic!("hit mask mismatch"),
            }
        }
    }
}
