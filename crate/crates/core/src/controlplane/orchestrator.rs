//! The controller side: drives devices through a capture session.
//!
//! The orchestrator holds one TCP connection per device for the duration of
//! a session. Captures are serialized per pattern with a barrier — every
//! camera must return its buffer before the next pattern is shown — which is
//! the simultaneity contract of the deployed system. Cleanup always tries to
//! blank the projector and switch its relay ports off, whatever went wrong.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio::task::JoinSet;
use tokio::time::timeout;

use super::events::{Event, EventLog};
use super::failover::Role;
use super::protocol::{parse_reply, Command, PortRef};
use super::relay::RelayState;
use super::session::{CaptureSession, SessionState};
use super::sink::{sha256_hex, ImageEntry, SessionManifest, UploadSink};
use super::ControlError;
use crate::graycode::PatternSequence;
use crate::rig::{DeviceRole, RigConfig};

/// Transport retry policy: attempts = retries + 1, exponential backoff.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retries: u32,
    pub base_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_backoff: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        self.base_backoff * 2u32.pow(attempt)
    }
}

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    pub relay_addr: SocketAddr,
    /// Device id to TCP address.
    pub device_addrs: HashMap<String, SocketAddr>,
    pub op_timeout: Duration,
    pub retry: RetryPolicy,
}

impl OrchestratorConfig {
    pub fn new(relay_addr: SocketAddr) -> Self {
        Self {
            relay_addr,
            device_addrs: HashMap::new(),
            op_timeout: Duration::from_secs(2),
            retry: RetryPolicy::default(),
        }
    }

    fn addr_of(&self, device_id: &str) -> Result<SocketAddr, ControlError> {
        self.device_addrs
            .get(device_id)
            .copied()
            .ok_or_else(|| ControlError::UnknownDeviceAddr(device_id.to_string()))
    }
}

/// Line-protocol client over one TCP connection.
struct LineClient {
    reader: BufReader<TcpStream>,
    op_timeout: Duration,
}

impl LineClient {
    async fn connect(addr: SocketAddr, op_timeout: Duration) -> Result<Self, ControlError> {
        let stream = timeout(op_timeout, TcpStream::connect(addr))
            .await
            .map_err(|_| ControlError::Timeout)??;
        Ok(Self {
            reader: BufReader::new(stream),
            op_timeout,
        })
    }

    async fn connect_and_hello(
        addr: SocketAddr,
        device_type: &str,
        id: &str,
        op_timeout: Duration,
    ) -> Result<Self, ControlError> {
        let mut client = Self::connect(addr, op_timeout).await?;
        client
            .request(&Command::Hello {
                device_type: device_type.to_string(),
                id: id.to_string(),
            })
            .await?;
        Ok(client)
    }

    /// Send one command and parse the single reply line.
    async fn request(&mut self, cmd: &Command) -> Result<String, ControlError> {
        let line = cmd.wire() + "\n";
        timeout(self.op_timeout, async {
            self.reader.get_mut().write_all(line.as_bytes()).await?;
            let mut reply = String::new();
            let n = self.reader.read_line(&mut reply).await?;
            if n == 0 {
                return Err(ControlError::Protocol("connection closed".into()));
            }
            parse_reply(&reply).map_err(ControlError::DeviceError)
        })
        .await
        .map_err(|_| ControlError::Timeout)?
    }

    /// CAPTURE: one reply line with the byte count, then the raw payload.
    async fn capture(
        &mut self,
        session_id: &str,
        pattern: usize,
    ) -> Result<Vec<u8>, ControlError> {
        let payload = self
            .request(&Command::Capture {
                session_id: session_id.to_string(),
                pattern,
            })
            .await?;
        let nbytes: usize = payload
            .trim()
            .parse()
            .map_err(|_| ControlError::Protocol(format!("bad byte count `{payload}`")))?;
        timeout(self.op_timeout, async {
            let mut buf = vec![0u8; nbytes];
            self.reader.read_exact(&mut buf).await?;
            Ok::<_, ControlError>(buf)
        })
        .await
        .map_err(|_| ControlError::Timeout)?
    }
}

/// Session driver for one controller.
pub struct Orchestrator {
    config: OrchestratorConfig,
    events: Arc<EventLog>,
    /// Role handle; sessions only start while this reads Primary.
    role: Arc<RwLock<Role>>,
    session_active: AtomicBool,
}

impl Orchestrator {
    pub fn new(config: OrchestratorConfig, events: Arc<EventLog>) -> Self {
        Self {
            config,
            events,
            role: Arc::new(RwLock::new(Role::Primary)),
            session_active: AtomicBool::new(false),
        }
    }

    /// Wire to an external role source (a failover controller).
    pub fn with_role_handle(mut self, role: Arc<RwLock<Role>>) -> Self {
        self.role = role;
        self
    }

    pub fn events(&self) -> Arc<EventLog> {
        self.events.clone()
    }

    fn is_primary(&self) -> bool {
        *self.role.read().unwrap() == Role::Primary
    }

    /// Run `op` with the transport retry policy. Only transport failures are
    /// retried; an explicit `ERR` reply is final.
    async fn with_retries<T, F, Fut>(&self, mut op: F) -> Result<T, ControlError>
    where
        F: FnMut() -> Fut,
        Fut: std::future::Future<Output = Result<T, ControlError>>,
    {
        let mut attempt = 0;
        loop {
            match op().await {
                Ok(v) => return Ok(v),
                Err(e) => {
                    let transient = matches!(
                        e,
                        ControlError::Io(_) | ControlError::Timeout | ControlError::Protocol(_)
                    );
                    if !transient || attempt >= self.config.retry.retries {
                        return Err(e);
                    }
                    tokio::time::sleep(self.config.retry.backoff(attempt)).await;
                    attempt += 1;
                }
            }
        }
    }

    /// Switch one relay port; idempotent, retried on transport failure.
    pub async fn relay_set(&self, port: &PortRef, on: bool) -> Result<RelayState, ControlError> {
        let state = self
            .with_retries(|| async {
                let mut client = LineClient::connect_and_hello(
                    self.config.relay_addr,
                    "relay",
                    "relay0",
                    self.config.op_timeout,
                )
                .await?;
                let payload = client
                    .request(&Command::Set {
                        port: port.clone(),
                        on,
                    })
                    .await?;
                RelayState::from_hex(&payload)
            })
            .await?;
        self.events.emit(Event::Relay {
            port: port_index(port),
            on,
            state_hex: state.hex(),
            t_ms: self.events.now_ms(),
        });
        Ok(state)
    }

    /// Read the full 16-port state.
    pub async fn relay_get(&self) -> Result<RelayState, ControlError> {
        self.with_retries(|| async {
            let mut client = LineClient::connect_and_hello(
                self.config.relay_addr,
                "relay",
                "relay0",
                self.config.op_timeout,
            )
            .await?;
            let payload = client.request(&Command::Get).await?;
            RelayState::from_hex(&payload)
        })
        .await
    }

    /// Run one full capture session against the rig's cameras and the given
    /// projector, uploading into `sink`.
    ///
    /// Returns the finished session record; a failure during the run yields
    /// a `Failed` session (with cleanup done), not an `Err`. `Err` is
    /// reserved for refusals: not primary, or a session already active.
    pub async fn run_session(
        &self,
        rig: &RigConfig,
        patterns: &PatternSequence,
        sink: &dyn UploadSink,
        session_id: &str,
        projector_id: &str,
    ) -> Result<CaptureSession, ControlError> {
        if !self.is_primary() {
            return Err(ControlError::NotPrimary);
        }
        if self.session_active.swap(true, Ordering::SeqCst) {
            return Err(ControlError::SessionActive);
        }
        let result = self
            .run_session_inner(rig, patterns, sink, session_id, projector_id)
            .await;
        self.session_active.store(false, Ordering::SeqCst);
        result
    }

    async fn run_session_inner(
        &self,
        rig: &RigConfig,
        patterns: &PatternSequence,
        sink: &dyn UploadSink,
        session_id: &str,
        projector_id: &str,
    ) -> Result<CaptureSession, ControlError> {
        let mut session = CaptureSession::new(session_id, self.events.now_ms());
        let mut camera_ids: Vec<String> = rig
            .devices
            .iter()
            .filter(|d| d.role == DeviceRole::Camera)
            .map(|d| d.id.clone())
            .collect();
        camera_ids.sort();
        let projector_ports: Vec<String> = rig
            .projectors()
            .map(|d| d.id.clone())
            .collect();

        match self
            .drive_session(
                &mut session,
                rig,
                patterns,
                sink,
                &camera_ids,
                projector_id,
            )
            .await
        {
            Ok(()) => {}
            Err(e) => {
                // Cleanup contract: projectors must end up dark and off.
                self.cleanup_projectors(projector_id, &projector_ports).await;
                self.record_fail(&mut session, &e.to_string());
            }
        }
        Ok(session)
    }

    async fn drive_session(
        &self,
        session: &mut CaptureSession,
        rig: &RigConfig,
        patterns: &PatternSequence,
        sink: &dyn UploadSink,
        camera_ids: &[String],
        projector_id: &str,
    ) -> Result<(), ControlError> {
        rig.projector(projector_id)?;
        let session_id = session.id.clone();

        // Power up projector and cameras.
        self.record_state(session, SessionState::PoweringOn)?;
        for id in camera_ids.iter().map(String::as_str).chain([projector_id]) {
            self.relay_set(&PortRef::Name(id.to_string()), true).await?;
        }

        // Bring up device connections.
        self.record_state(session, SessionState::Projecting)?;
        let mut projector = LineClient::connect_and_hello(
            self.config.addr_of(projector_id)?,
            "projector",
            projector_id,
            self.config.op_timeout,
        )
        .await?;
        projector.request(&Command::Blank).await?;
        let mut cameras: Vec<(String, LineClient)> = Vec::new();
        for id in camera_ids {
            let client = LineClient::connect_and_hello(
                self.config.addr_of(id)?,
                "camera",
                id,
                self.config.op_timeout,
            )
            .await?;
            cameras.push((id.clone(), client));
        }

        // Project/capture loop: all cameras finish a pattern before the next
        // SHOW (the simultaneity barrier).
        self.record_state(session, SessionState::Capturing)?;
        let mut buffers: BTreeMap<(String, usize), Vec<u8>> = BTreeMap::new();
        for pattern in &patterns.patterns {
            let index = pattern.index;
            projector.request(&Command::Show { pattern: index }).await?;
            let mut set: JoinSet<(String, LineClient, Result<Vec<u8>, ControlError>)> =
                JoinSet::new();
            for (id, mut client) in cameras.drain(..) {
                let sid = session_id.clone();
                set.spawn(async move {
                    let result = client.capture(&sid, index).await;
                    (id, client, result)
                });
            }
            let mut failure: Option<(String, ControlError)> = None;
            while let Some(joined) = set.join_next().await {
                let (id, client, result) = joined
                    .map_err(|e| ControlError::Session(format!("capture task panicked: {e}")))?;
                match result {
                    Ok(bytes) => {
                        self.events.emit(Event::Capture {
                            session: session_id.clone(),
                            camera: id.clone(),
                            pattern: index,
                            t_ms: self.events.now_ms(),
                        });
                        buffers.insert((id.clone(), index), bytes);
                        cameras.push((id, client));
                    }
                    Err(e) => failure = Some((id, e)),
                }
            }
            if let Some((id, e)) = failure {
                return Err(ControlError::Session(format!(
                    "camera {id} failed at pattern {index}: {e}"
                )));
            }
            cameras.sort_by(|a, b| a.0.cmp(&b.0));
        }
        projector.request(&Command::Blank).await?;

        // Collect: verify the buffer set is complete.
        self.record_state(session, SessionState::Collecting)?;
        let expected = camera_ids.len() * patterns.patterns.len();
        if buffers.len() != expected {
            return Err(ControlError::Session(format!(
                "collected {} buffers, expected {expected}",
                buffers.len()
            )));
        }

        // Upload stack + manifest.
        self.record_state(session, SessionState::Uploading)?;
        let dir = SessionManifest::session_dir(&session_id);
        let mut images = Vec::with_capacity(buffers.len());
        for ((camera, pattern), bytes) in &buffers {
            let rel = SessionManifest::image_rel_path(camera, *pattern);
            sink.put(&format!("{dir}/{rel}"), bytes)?;
            session.artifacts.push(format!("{dir}/{rel}"));
            images.push(ImageEntry {
                camera: camera.clone(),
                pattern: *pattern,
                file: rel,
                sha256: sha256_hex(bytes),
                bytes: bytes.len(),
            });
        }
        let manifest = SessionManifest {
            version: 1,
            session_id: session_id.clone(),
            pattern_manifest: patterns.manifest(),
            cameras: camera_ids.to_vec(),
            images,
        };
        let manifest_json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| ControlError::Session(e.to_string()))? + "\n";
        sink.put(&format!("{dir}/manifest.json"), manifest_json.as_bytes())?;
        session.artifacts.push(format!("{dir}/manifest.json"));
        self.events.emit(Event::Upload {
            session: session_id.clone(),
            files: buffers.len() + 1,
            t_ms: self.events.now_ms(),
        });

        // Power down: projector ports always, cameras too on the happy path.
        self.record_state(session, SessionState::PoweringOff)?;
        for id in camera_ids.iter().map(String::as_str).chain([projector_id]) {
            self.relay_set(&PortRef::Name(id.to_string()), false).await?;
        }
        self.record_state(session, SessionState::Done)?;
        Ok(())
    }

    /// Best-effort: blank the session projector and power every projector
    /// port off. Light attracts fish; this runs on every failure path.
    async fn cleanup_projectors(&self, projector_id: &str, all_projectors: &[String]) {
        if let Ok(addr) = self.config.addr_of(projector_id) {
            if let Ok(mut client) =
                LineClient::connect_and_hello(addr, "projector", projector_id, self.config.op_timeout)
                    .await
            {
                let _ = client.request(&Command::Blank).await;
            }
        }
        for id in all_projectors {
            let _ = self.relay_set(&PortRef::Name(id.clone()), false).await;
        }
    }

    fn record_state(
        &self,
        session: &mut CaptureSession,
        next: SessionState,
    ) -> Result<(), ControlError> {
        let from = session.state().name().to_string();
        let to = next.name().to_string();
        session.advance(next, self.events.now_ms())?;
        self.events.emit(Event::SessionState {
            session: session.id.clone(),
            from,
            to,
            t_ms: self.events.now_ms(),
        });
        Ok(())
    }

    fn record_fail(&self, session: &mut CaptureSession, reason: &str) {
        let from = session.state().name().to_string();
        session.fail(reason, self.events.now_ms());
        self.events.emit(Event::SessionState {
            session: session.id.clone(),
            from,
            to: "failed".to_string(),
            t_ms: self.events.now_ms(),
        });
    }
}

/// Resolve a port reference against the deployed map for event reporting.
fn port_index(port: &PortRef) -> u8 {
    match port {
        PortRef::Index(i) => *i,
        PortRef::Name(name) => super::relay::PortMap::deployed()
            .port_for_device(name)
            .unwrap_or(u8::MAX),
    }
}
