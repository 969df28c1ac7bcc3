//! Simulated control plane: relay power protocol, device simulators, the
//! capture-session state machine, scheduling, and primary/backup failover.
//!
//! Every device (relay board, projectors, cameras) speaks one newline
//! terminated ASCII protocol over TCP (see [`protocol`]). The orchestrator
//! drives a full scan as a [`session::CaptureSession`]: power up via the
//! relay, show each pattern and capture it on every camera before moving to
//! the next one, collect the buffers, upload stack plus manifest to an
//! [`sink::UploadSink`], and power the projectors back off — lights attract
//! fish, so projector power is confined to the session window even on
//! failure.

pub mod devices;
pub mod events;
pub mod failover;
pub mod orchestrator;
pub mod protocol;
pub mod relay;
pub mod scheduler;
pub mod session;
pub mod sink;

pub use devices::{CameraSource, DeviceSim, FaultPlan, SimWorld};
pub use events::{Event, EventLog};
pub use failover::{failover_step, spawn_controller, ControllerHandle, ControllerRole, Role};
pub use orchestrator::{Orchestrator, OrchestratorConfig, RetryPolicy};
pub use protocol::{Command, PortRef};
pub use relay::{PortMap, RelayState, RELAY_PORT_COUNT};
pub use scheduler::{scheduler_tick, Schedule, ScheduleMode, TickDecision};
pub use session::{CaptureSession, SessionState};
pub use sink::{DirectorySink, MemorySink, SessionManifest, UploadSink};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("operation timed out")]
    Timeout,
    #[error("device replied ERR: {0}")]
    DeviceError(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("unknown relay port `{0}`")]
    UnknownPort(String),
    #[error("controller is not primary")]
    NotPrimary,
    #[error("another session is already active")]
    SessionActive,
    #[error("device `{0}` has no configured address")]
    UnknownDeviceAddr(String),
    #[error("interval schedules must be at least 60 s, got {0} s")]
    IntervalTooShort(u64),
    #[error("takeover timeout must be at least 3x the heartbeat period")]
    TakeoverTooShort,
    #[error("invalid schedule `{0}` (expected on-demand, interval:<secs>, or daily:<HH:MM>)")]
    BadSchedule(String),
    #[error(transparent)]
    Rig(#[from] crate::rig::RigError),
    #[error("session error: {0}")]
    Session(String),
}
