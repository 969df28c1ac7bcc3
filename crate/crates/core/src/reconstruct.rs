//! Refraction-aware triangulation of decoded correspondences.
//!
//! Both matching routes build underwater rays through each device's flat
//! port and intersect them with midpoint triangulation: the reconstructed
//! point is the midpoint of the mutual perpendicular segment between the two
//! rays, and the segment length (`gap`) doubles as the match quality filter.
//!
//! `camera-projector` triangulates each decoded camera pixel against the
//! projector pixel it decoded to. `camera-camera` matches pixels of two
//! cameras that decoded the same projector code; a code seen more than once
//! inside one camera is discarded entirely.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Point3;
use serde::Serialize;
use thiserror::Error;

use crate::graycode::CorrespondenceMap;
use crate::optics::{pixel_to_ray, trace_through_interface, OpticsError, Ray};
use crate::rig::{Device, RigConfig, RigError};

/// Default mutual-perpendicular gap cutoff: the millimeter target with a 2x
/// margin for integer-pixel quantization.
pub const DEFAULT_MAX_GAP: f64 = 0.002;

#[derive(Debug, Error)]
pub enum ReconstructError {
    #[error("rays are parallel")]
    ParallelRays,
    #[error("correspondence map is {map_w}x{map_h} but camera `{id}` is {cam_w}x{cam_h}")]
    ResolutionMismatch {
        id: String,
        cam_w: u32,
        cam_h: u32,
        map_w: u32,
        map_h: u32,
    },
    #[error(transparent)]
    Rig(#[from] RigError),
    #[error("optics: {0}")]
    Optics(#[from] OpticsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One triangulated point.
#[derive(Debug, Clone, Copy)]
pub struct CloudPoint {
    pub position: Point3<f64>,
    /// Length of the mutual perpendicular between the two rays, meters.
    pub gap: f64,
    /// Pixel in the first source device (the camera for camera-projector
    /// pairs, camera A for camera-camera pairs).
    pub pixel: (u32, u32),
}

/// Triangulated points from one device pair.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub source_a: String,
    pub source_b: String,
    pub points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Counters from one reconstruction run.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TriangulationReport {
    /// Correspondences attempted (decoded pixels or matched codes).
    pub total: usize,
    pub triangulated: usize,
    pub rejected_by_gap: usize,
    /// RMS gap over kept points, meters.
    pub rms_gap: f64,
    /// Fraction of camera pixels that decoded at all.
    pub coverage: f64,
}

/// Closest point to two skew rays and the gap between them.
pub fn triangulate_rays(a: &Ray, b: &Ray) -> Result<(Point3<f64>, f64), ReconstructError> {
    let da = a.direction.into_inner();
    let db = b.direction.into_inner();
    if da.cross(&db).norm() <= 1e-12 {
        return Err(ReconstructError::ParallelRays);
    }
    // Least-squares s, t for |a.o + s*da - b.o - t*db|^2 with unit directions.
    let w = a.origin - b.origin;
    let dot = da.dot(&db);
    let wa = da.dot(&w);
    let wb = db.dot(&w);
    let denom = 1.0 - dot * dot;
    let s = (dot * wb - wa) / denom;
    let t = (wb - dot * wa) / denom;
    let pa = a.origin + da * s;
    let pb = b.origin + db * t;
    let gap = (pa - pb).norm();
    Ok((Point3::from((pa.coords + pb.coords) * 0.5), gap))
}

fn underwater_pixel_ray(device: &Device, pixel: [f64; 2]) -> Result<Ray, OpticsError> {
    let ray = pixel_to_ray(pixel, &device.intrinsics, &device.pose);
    trace_through_interface(&ray, &device.interface, &device.pose)
}

fn check_map_matches(camera: &Device, map: &CorrespondenceMap) -> Result<(), ReconstructError> {
    if (map.width(), map.height()) != camera.resolution {
        return Err(ReconstructError::ResolutionMismatch {
            id: camera.id.clone(),
            cam_w: camera.resolution.0,
            cam_h: camera.resolution.1,
            map_w: map.width(),
            map_h: map.height(),
        });
    }
    Ok(())
}

/// Triangulate every decoded pixel of `map` against the projector.
pub fn reconstruct_camera_projector(
    map: &CorrespondenceMap,
    rig: &RigConfig,
    camera_id: &str,
    projector_id: &str,
    max_gap: f64,
) -> Result<(PointCloud, TriangulationReport), ReconstructError> {
    let camera = rig.camera(camera_id)?;
    let projector = rig.projector(projector_id)?;
    check_map_matches(camera, map)?;

    let mut points = Vec::new();
    let mut total = 0usize;
    let mut sum_sq = 0.0;
    for y in 0..map.height() {
        for x in 0..map.width() {
            let Some((px, py)) = map.get(x, y).proj else {
                continue;
            };
            total += 1;
            let Ok(cam_ray) = underwater_pixel_ray(camera, [x as f64, y as f64]) else {
                continue;
            };
            let Ok(proj_ray) = underwater_pixel_ray(projector, [px as f64, py as f64]) else {
                continue;
            };
            let Ok((position, gap)) = triangulate_rays(&cam_ray, &proj_ray) else {
                continue;
            };
            if gap <= max_gap {
                sum_sq += gap * gap;
                points.push(CloudPoint {
                    position,
                    gap,
                    pixel: (x, y),
                });
            }
        }
    }

    let triangulated = points.len();
    let report = TriangulationReport {
        total,
        triangulated,
        rejected_by_gap: total - triangulated,
        rms_gap: if triangulated > 0 {
            (sum_sq / triangulated as f64).sqrt()
        } else {
            0.0
        },
        coverage: map.coverage(),
    };
    Ok((
        PointCloud {
            source_a: camera_id.to_string(),
            source_b: projector_id.to_string(),
            points,
        },
        report,
    ))
}

/// Pixels of one camera keyed by decoded code; codes decoded by more than
/// one pixel map to `None` and are dropped from matching.
fn unique_codes(map: &CorrespondenceMap) -> HashMap<(u32, u32), Option<(u32, u32)>> {
    let mut codes: HashMap<(u32, u32), Option<(u32, u32)>> = HashMap::new();
    for y in 0..map.height() {
        for x in 0..map.width() {
            if let Some(code) = map.get(x, y).proj {
                codes
                    .entry(code)
                    .and_modify(|e| *e = None)
                    .or_insert(Some((x, y)));
            }
        }
    }
    codes
}

/// Triangulate pixels of two cameras that decoded identical projector codes.
pub fn reconstruct_camera_camera(
    map_a: &CorrespondenceMap,
    map_b: &CorrespondenceMap,
    rig: &RigConfig,
    camera_a: &str,
    camera_b: &str,
    max_gap: f64,
) -> Result<(PointCloud, TriangulationReport), ReconstructError> {
    let cam_a = rig.camera(camera_a)?;
    let cam_b = rig.camera(camera_b)?;
    check_map_matches(cam_a, map_a)?;
    check_map_matches(cam_b, map_b)?;

    let codes_b = unique_codes(map_b);
    let seen_a = unique_codes(map_a);

    let mut points = Vec::new();
    let mut total = 0usize;
    let mut sum_sq = 0.0;
    // Row-major scan of camera A keeps the output order deterministic.
    for y in 0..map_a.height() {
        for x in 0..map_a.width() {
            let Some(code) = map_a.get(x, y).proj else {
                continue;
            };
            if seen_a.get(&code) != Some(&Some((x, y))) {
                continue; // collided inside camera A
            }
            let Some(&Some((bx, by))) = codes_b.get(&code) else {
                continue; // absent or collided inside camera B
            };
            total += 1;
            let Ok(ray_a) = underwater_pixel_ray(cam_a, [x as f64, y as f64]) else {
                continue;
            };
            let Ok(ray_b) = underwater_pixel_ray(cam_b, [bx as f64, by as f64]) else {
                continue;
            };
            let Ok((position, gap)) = triangulate_rays(&ray_a, &ray_b) else {
                continue;
            };
            if gap <= max_gap {
                sum_sq += gap * gap;
                points.push(CloudPoint {
                    position,
                    gap,
                    pixel: (x, y),
                });
            }
        }
    }

    let triangulated = points.len();
    let report = TriangulationReport {
        total,
        triangulated,
        rejected_by_gap: total - triangulated,
        rms_gap: if triangulated > 0 {
            (sum_sq / triangulated as f64).sqrt()
        } else {
            0.0
        },
        coverage: map_a.coverage(),
    };
    Ok((
        PointCloud {
            source_a: camera_a.to_string(),
            source_b: camera_b.to_string(),
            points,
        },
        report,
    ))
}

/// Write the cloud as ASCII PLY 1.0 with float vertex properties x, y, z
/// and gap.
///
/// Values are stored at f32 precision and printed with the shortest decimal
/// representation that round-trips, so re-parsing reproduces them bit-exactly.
pub fn export_ply<P: AsRef<Path>>(cloud: &PointCloud, path: P) -> Result<(), ReconstructError> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(
        w,
        "ply\nformat ascii 1.0\ncomment device pair {} {}\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float gap\nend_header\n",
        cloud.source_a,
        cloud.source_b,
        cloud.points.len()
    )?;
    for p in &cloud.points {
        writeln!(
            w,
            "{} {} {} {}",
            p.position.x as f32, p.position.y as f32, p.position.z as f32, p.gap as f32
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Parse an ASCII PLY written by [`export_ply`] back into vertex rows.
pub fn parse_ply_vertices(text: &str) -> Option<Vec<[f32; 4]>> {
    let mut lines = text.lines();
    let mut count = None;
    for line in lines.by_ref() {
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = rest.trim().parse::<usize>().ok();
        }
        if line.trim() == "end_header" {
            break;
        }
    }
    let count = count?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next()?;
        let mut it = line.split_whitespace().map(|t| t.parse::<f32>());
        let mut row = [0f32; 4];
        for v in &mut row {
            *v = it.next()?.ok()?;
        }
        out.push(row);
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graycode::DecodedPixel;
    use crate::optics::{Intrinsics, Pose, RefractiveInterface};
    use crate::rig::DeviceRole;
    use nalgebra::{Matrix3, Vector3};
    use proptest::prelude::*;

    fn ray(o: [f64; 3], d: [f64; 3]) -> Ray {
        Ray::new(
            Point3::new(o[0], o[1], o[2]),
            Vector3::new(d[0], d[1], d[2]),
        )
    }

    #[test]
    fn triangulate_exact_intersection() {
        let a = ray([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        let b = ray([1.0, 0.0, 0.0], [-1.0, 0.0, 1.0]);
        let (p, gap) = triangulate_rays(&a, &b).unwrap();
        assert!((p - Point3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert!(gap < 1e-12);
    }

    /// Skew-ray expectation solved by hand from the 2x2 normal equations:
    /// s = 1, t = sqrt(2), closest points (0,0,1) and (0,1,1).
    #[test]
    fn triangulate_skew_rays_midpoint() {
        let a = ray([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        let b = ray([1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]);
        let (p, gap) = triangulate_rays(&a, &b).unwrap();
        assert!((p - Point3::new(0.0, 0.5, 1.0)).norm() < 1e-12);
        assert!((gap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn triangulate_rejects_parallel() {
        let a = ray([0.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        let b = ray([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        assert!(matches!(
            triangulate_rays(&a, &b),
            Err(ReconstructError::ParallelRays)
        ));
    }

    fn two_camera_rig() -> RigConfig {
        let interface = RefractiveInterface::new(Vector3::z(), 0.05, 1.0).unwrap();
        let mk = |id: &str, x: f64, role| Device {
            id: id.into(),
            role,
            resolution: (64, 48),
            intrinsics: Intrinsics::new(64.0, 64.0, 31.5, 23.5).unwrap(),
            pose: Pose::looking_at(
                Point3::new(x, 0.0, 0.0),
                Point3::new(0.0, 0.0, 1.0),
                Vector3::y(),
            ),
            interface: interface.clone(),
        };
        RigConfig {
            devices: vec![
                mk("camA", -0.1, DeviceRole::Camera),
                mk("camB", 0.1, DeviceRole::Camera),
                mk("proj", 0.0, DeviceRole::Projector),
            ],
        }
    }

    #[test]
    fn empty_map_gives_empty_cloud() {
        let rig = two_camera_rig();
        let map = CorrespondenceMap::new("camA", 64, 48);
        let (cloud, report) =
            reconstruct_camera_projector(&map, &rig, "camA", "proj", DEFAULT_MAX_GAP).unwrap();
        assert!(cloud.is_empty());
        assert_eq!(report.total, 0);
        assert_eq!(report.triangulated, 0);
        assert_eq!(report.rejected_by_gap, 0);
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let rig = two_camera_rig();
        let map = CorrespondenceMap::new("camA", 32, 32);
        assert!(matches!(
            reconstruct_camera_projector(&map, &rig, "camA", "proj", DEFAULT_MAX_GAP),
            Err(ReconstructError::ResolutionMismatch { .. })
        ));
        assert!(reconstruct_camera_projector(&map, &rig, "nope", "proj", 1.0).is_err());
        assert!(reconstruct_camera_projector(&map, &rig, "camA", "camB", 1.0).is_err());
    }

    #[test]
    fn disjoint_codes_give_empty_cloud() {
        let rig = two_camera_rig();
        let mut map_a = CorrespondenceMap::new("camA", 64, 48);
        let mut map_b = CorrespondenceMap::new("camB", 64, 48);
        map_a.set(
            0,
            0,
            DecodedPixel {
                proj: Some((1, 1)),
                confidence: 1.0,
            },
        );
        map_b.set(
            0,
            0,
            DecodedPixel {
                proj: Some((2, 2)),
                confidence: 1.0,
            },
        );
        let (cloud, report) =
            reconstruct_camera_camera(&map_a, &map_b, &rig, "camA", "camB", 1.0).unwrap();
        assert!(cloud.is_empty());
        assert_eq!(report.total, 0);
    }

    #[test]
    fn duplicate_code_in_one_camera_discarded() {
        let rig = two_camera_rig();
        let mut map_a = CorrespondenceMap::new("camA", 64, 48);
        let mut map_b = CorrespondenceMap::new("camB", 64, 48);
        let hit = DecodedPixel {
            proj: Some((5, 5)),
            confidence: 1.0,
        };
        map_a.set(3, 3, hit);
        map_a.set(4, 3, hit); // collision in camera A
        map_b.set(10, 3, hit);
        let (cloud, _) =
            reconstruct_camera_camera(&map_a, &map_b, &rig, "camA", "camB", 1.0).unwrap();
        assert!(cloud.is_empty());

        // Without the collision the same code triangulates.
        let mut map_a2 = CorrespondenceMap::new("camA", 64, 48);
        map_a2.set(3, 3, hit);
        let (cloud, report) =
            reconstruct_camera_camera(&map_a2, &map_b, &rig, "camA", "camB", 1.0).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(report.total, 1);
    }

    #[test]
    fn ply_export_empty_and_single() {
        let dir = tempfile::tempdir().unwrap();
        let empty = PointCloud {
            source_a: "camA".into(),
            source_b: "proj".into(),
            points: vec![],
        };
        let path = dir.path().join("empty.ply");
        export_ply(&empty, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("element vertex 0"));
        assert!(text.starts_with("ply\nformat ascii 1.0\n"));
        assert_eq!(parse_ply_vertices(&text).unwrap().len(), 0);

        let single = PointCloud {
            source_a: "camA".into(),
            source_b: "proj".into(),
            points: vec![CloudPoint {
                position: Point3::new(1.0, 2.0, 3.0),
                gap: 0.0,
                pixel: (0, 0),
            }],
        };
        let path = dir.path().join("one.ply");
        export_ply(&single, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let data_line = text.lines().last().unwrap();
        assert_eq!(data_line, "1 2 3 0");
    }

    #[test]
    fn ply_round_trips_f32_bits() {
        let mut points = Vec::new();
        let mut v = 0.1234567f64;
        for i in 0..64 {
            v = v * 1.7 + 0.013;
            points.push(CloudPoint {
                position: Point3::new(v, -v * 3.3, v.fract() + 0.5),
                gap: v.fract() * 1e-3,
                pixel: (i, 0),
            });
        }
        let cloud = PointCloud {
            source_a: "a".into(),
            source_b: "b".into(),
            points,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.ply");
        export_ply(&cloud, &path).unwrap();
        let rows = parse_ply_vertices(&fs::read_to_string(&path).unwrap()).unwrap();
        for (row, p) in rows.iter().zip(&cloud.points) {
            assert_eq!(row[0].to_bits(), (p.position.x as f32).to_bits());
            assert_eq!(row[1].to_bits(), (p.position.y as f32).to_bits());
            assert_eq!(row[2].to_bits(), (p.position.z as f32).to_bits());
            assert_eq!(row[3].to_bits(), (p.gap as f32).to_bits());
        }
    }

    fn arb_ray() -> impl Strategy<Value = Ray> {
        (
            prop::array::uniform3(-2.0f64..2.0),
            prop::array::uniform3(-1.0f64..1.0),
        )
            .prop_filter_map("nonzero dir", |(o, d)| {
                let dv = Vector3::new(d[0], d[1], d[2]);
                (dv.norm() > 1e-3).then(|| ray(o, d))
            })
    }

    proptest! {
        /// The triangulated point is equidistant from both rays, each side
        /// half the gap, and swapping the rays changes nothing.
        #[test]
        fn triangulation_midpoint_properties(a in arb_ray(), b in arb_ray()) {
            prop_assume!(a.direction.into_inner().cross(&b.direction.into_inner()).norm() > 1e-6);
            let (p, gap) = triangulate_rays(&a, &b).unwrap();
            let da = a.distance_to_point(&p);
            let db = b.distance_to_point(&p);
            prop_assert!((da - db).abs() < 1e-9);
            prop_assert!((da - gap / 2.0).abs() < 1e-9);
            let (p2, gap2) = triangulate_rays(&b, &a).unwrap();
            prop_assert!((p - p2).norm() < 1e-9);
            prop_assert!((gap - gap2).abs() < 1e-12);
        }
    }

    /// Applying one rigid transform to every device transforms the cloud by
    /// exactly that transform.
    #[test]
    fn rigid_invariance() {
        let rig = two_camera_rig();
        let mut map = CorrespondenceMap::new("camA", 64, 48);
        for (i, (x, y)) in [(10u32, 10u32), (20, 17), (40, 30), (55, 44)].iter().enumerate() {
            map.set(
                *x,
                *y,
                DecodedPixel {
                    proj: Some((10 + i as u32 * 7, 8 + i as u32 * 5)),
                    confidence: 1.0,
                },
            );
        }
        let (cloud, _) =
            reconstruct_camera_projector(&map, &rig, "camA", "proj", f64::INFINITY).unwrap();
        assert!(!cloud.is_empty());

        let axis = Vector3::new(0.3, -1.0, 0.5).normalize();
        let q = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(axis), 0.7);
        let q: Matrix3<f64> = *q.matrix();
        let shift = Vector3::new(0.4, -0.2, 1.1);
        let mut moved = rig.clone();
        for d in &mut moved.devices {
            d.pose = Pose::new(q * d.pose.rotation(), q * d.pose.translation() + shift).unwrap();
        }
        let (cloud2, _) =
            reconstruct_camera_projector(&map, &moved, "camA", "proj", f64::INFINITY).unwrap();
        assert_eq!(cloud.len(), cloud2.len());
        for (p, p2) in cloud.points.iter().zip(&cloud2.points) {
            let expect = Point3::from(q * p.position.coords + shift);
            assert!((p2.position - expect).norm() < 1e-9);
        }
    }
}
