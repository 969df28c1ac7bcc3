//! Rig configuration: the cameras and projectors of one deployment.
//!
//! A rig file is JSON with a mandatory `version` field and one entry per
//! device. Rotations are row-major 9-number arrays (device-to-world);
//! translations are meters. Each device carries its own flat-port
//! [`RefractiveInterface`]. Intrinsics and poses are trusted inputs here;
//! only the interface block is ever re-estimated (see [`crate::calibrate`]).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{Intrinsics, OpticsError, Pose, RefractiveInterface};

pub const RIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RigError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported rig schema version {0} (expected {RIG_SCHEMA_VERSION})")]
    Version(u32),
    #[error("duplicate device id `{0}`")]
    DuplicateId(String),
    #[error("unknown device id `{0}`")]
    UnknownDevice(String),
    #[error("device `{0}` is not a {1}")]
    WrongRole(String, &'static str),
    #[error("device `{id}`: {source}")]
    Device { id: String, source: OpticsError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceRole {
    Camera,
    Projector,
}

/// One camera or projector with its full geometric model.
#[derive(Debug, Clone)]
pub struct Device {
    pub id: String,
    pub role: DeviceRole,
    pub resolution: (u32, u32),
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub interface: RefractiveInterface,
}

/// All devices of a deployment.
#[derive(Debug, Clone, Default)]
pub struct RigConfig {
    pub devices: Vec<Device>,
}

impl RigConfig {
    pub fn device(&self, id: &str) -> Result<&Device, RigError> {
        self.devices
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| RigError::UnknownDevice(id.to_string()))
    }

    pub fn device_mut(&mut self, id: &str) -> Result<&mut Device, RigError> {
        self.devices
            .iter_mut()
            .find(|d| d.id == id)
            .ok_or_else(|| RigError::UnknownDevice(id.to_string()))
    }

    pub fn camera(&self, id: &str) -> Result<&Device, RigError> {
        let d = self.device(id)?;
        if d.role != DeviceRole::Camera {
            return Err(RigError::WrongRole(id.to_string(), "camera"));
        }
        Ok(d)
    }

    pub fn projector(&self, id: &str) -> Result<&Device, RigError> {
        let d = self.device(id)?;
        if d.role != DeviceRole::Projector {
            return Err(RigError::WrongRole(id.to_string(), "projector"));
        }
        Ok(d)
    }

    pub fn cameras(&self) -> impl Iterator<Item = &Device> {
        self.devices.iter().filter(|d| d.role == DeviceRole::Camera)
    }

    pub fn projectors(&self) -> impl Iterator<Item = &Device> {
        self.devices
            .iter()
            .filter(|d| d.role == DeviceRole::Projector)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, RigError> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self, RigError> {
        let file: RigFile = serde_json::from_str(s)?;
        file.try_into()
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), RigError> {
        fs::write(path, self.to_json_string()? + "\n")?;
        Ok(())
    }

    pub fn to_json_string(&self) -> Result<String, RigError> {
        Ok(serde_json::to_string_pretty(&RigFile::from(self))?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RigFile {
    version: u32,
    devices: Vec<DeviceEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DeviceEntry {
    id: String,
    role: DeviceRole,
    resolution: [u32; 2],
    intrinsics: Intrinsics,
    pose: PoseEntry,
    interface: InterfaceEntry,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseEntry {
    /// Row-major device-to-world rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
}

/// Interface block; also the schema fragment written by calibration patches.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InterfaceEntry {
    pub normal: [f64; 3],
    pub distance: f64,
    pub eta: f64,
}

impl From<&RefractiveInterface> for InterfaceEntry {
    fn from(i: &RefractiveInterface) -> Self {
        let n = i.normal.into_inner();
        Self {
            normal: [n.x, n.y, n.z],
            distance: i.distance,
            eta: i.eta,
        }
    }
}

impl InterfaceEntry {
    pub fn to_interface(&self) -> Result<RefractiveInterface, OpticsError> {
        RefractiveInterface::new(
            Vector3::new(self.normal[0], self.normal[1], self.normal[2]),
            self.distance,
            self.eta,
        )
    }
}

impl TryFrom<RigFile> for RigConfig {
    type Error = RigError;

    fn try_from(file: RigFile) -> Result<Self, RigError> {
        if file.version != RIG_SCHEMA_VERSION {
            return Err(RigError::Version(file.version));
        }
        let mut seen = BTreeSet::new();
        let mut devices = Vec::with_capacity(file.devices.len());
        for entry in file.devices {
            if !seen.insert(entry.id.clone()) {
                return Err(RigError::DuplicateId(entry.id));
            }
            let wrap = |id: &str| {
                let id = id.to_string();
                move |source| RigError::Device { id, source }
            };
            let r = entry.pose.rotation;
            let rotation = Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]);
            let t = entry.pose.translation;
            let pose = Pose::new(rotation, Vector3::new(t[0], t[1], t[2]))
                .map_err(wrap(&entry.id))?;
            let interface = entry.interface.to_interface().map_err(wrap(&entry.id))?;
            if entry.intrinsics.fx <= 0.0 || entry.intrinsics.fy <= 0.0 {
                return Err(RigError::Device {
                    id: entry.id,
                    source: OpticsError::BadIntrinsics {
                        fx: entry.intrinsics.fx,
                        fy: entry.intrinsics.fy,
                    },
                });
            }
            devices.push(Device {
                id: entry.id,
                role: entry.role,
                resolution: (entry.resolution[0], entry.resolution[1]),
                intrinsics: entry.intrinsics,
                pose,
                interface,
            });
        }
        Ok(RigConfig { devices })
    }
}

impl From<&RigConfig> for RigFile {
    fn from(rig: &RigConfig) -> Self {
        let devices = rig
            .devices
            .iter()
            .map(|d| {
                let r = d.pose.rotation();
                DeviceEntry {
                    id: d.id.clone(),
                    role: d.role,
                    resolution: [d.resolution.0, d.resolution.1],
                    intrinsics: d.intrinsics,
                    pose: PoseEntry {
                        rotation: [
                            r[(0, 0)],
                            r[(0, 1)],
                            r[(0, 2)],
                            r[(1, 0)],
                            r[(1, 1)],
                            r[(1, 2)],
                            r[(2, 0)],
                            r[(2, 1)],
                            r[(2, 2)],
                        ],
                        translation: [
                            d.pose.translation().x,
                            d.pose.translation().y,
                            d.pose.translation().z,
                        ],
                    },
                    interface: InterfaceEntry::from(&d.interface),
                }
            })
            .collect();
        RigFile {
            version: RIG_SCHEMA_VERSION,
            devices,
        }
    }
}
