//! Structured-light 3D scanning for flat-port underwater camera rigs.
//!
//! The crate covers the full desk-scale pipeline of a multi-camera,
//! multi-projector undersea scanner:
//!
//! - [`graycode`] — gray-code pattern sequences and image-stack decoding.
//! - [`optics`] — pinhole geometry plus flat-port refractive ray tracing.
//! - [`rig`] — rig configuration (devices, poses, interfaces) as JSON.
//! - [`reconstruct`] — refraction-aware two-ray triangulation and PLY export.
//! - [`calibrate`] — least-squares estimation of the refractive interface.
//! - [`synth`] — analytic scene renderer used as the test oracle.
//! - [`controlplane`] — relay protocol, device simulators, capture sessions,
//!   scheduler, and primary/backup failover.
//! - [`cli`] — the `seascan` command-line entry point.

pub mod calibrate;
pub mod cli;
pub mod controlplane;
pub mod graycode;
pub mod optics;
pub mod pgm;
pub mod reconstruct;
pub mod rig;
pub mod synth;
