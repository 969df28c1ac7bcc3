//! TCP device simulators: relay board, projector, cameras.
//!
//! All simulated devices in one process share a [`SimWorld`], so the
//! simulation enforces physical coupling: a camera only serves frames for
//! the pattern the projector is currently showing, and a device whose relay
//! port is off drops every connection, exactly like an unpowered box. Fault
//! plans inject mid-session connection drops for failure testing.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;

use super::protocol::Command;
use super::relay::{PortMap, RelayState};
use crate::pgm::GrayImage;

/// Shared state of the simulated seafloor hardware.
pub struct SimWorld {
    pub port_map: PortMap,
    relay: Mutex<RelayState>,
    /// Pattern index the projector is currently showing.
    current_pattern: Mutex<Option<usize>>,
    faults: Mutex<HashMap<String, FaultPlan>>,
}

/// Injected misbehaviour for one device.
#[derive(Debug, Clone, Default)]
pub struct FaultPlan {
    /// Drop the connection when asked to capture this pattern index, and
    /// stay dead afterwards.
    pub drop_at_pattern: Option<usize>,
    /// Refuse the handshake outright.
    pub refuse_hello: bool,
    /// Set once a fault has fired; the device stays unreachable.
    pub dead: bool,
}

impl SimWorld {
    pub fn new() -> Arc<Self> {
        Arc::new(Self {
            port_map: PortMap::deployed(),
            relay: Mutex::new(RelayState::all_off()),
            current_pattern: Mutex::new(None),
            faults: Mutex::new(HashMap::new()),
        })
    }

    pub fn relay_state(&self) -> RelayState {
        *self.relay.lock().unwrap()
    }

    pub fn set_relay(&self, index: u8, on: bool) -> RelayState {
        let mut relay = self.relay.lock().unwrap();
        relay.set(index, on);
        *relay
    }

    pub fn powered(&self, device_id: &str) -> bool {
        match self.port_map.port_for_device(device_id) {
            Some(port) => self.relay_state().get(port),
            // Devices without a relay port (e.g. extra test cameras) are
            // treated as wired to always-on power.
            None => true,
        }
    }

    pub fn current_pattern(&self) -> Option<usize> {
        *self.current_pattern.lock().unwrap()
    }

    pub fn set_fault(&self, device_id: &str, plan: FaultPlan) {
        self.faults.lock().unwrap().insert(device_id.to_string(), plan);
    }

    pub fn clear_faults(&self) {
        self.faults.lock().unwrap().clear();
    }

    fn fault_of(&self, device_id: &str) -> FaultPlan {
        self.faults
            .lock()
            .unwrap()
            .get(device_id)
            .cloned()
            .unwrap_or_default()
    }

    fn mark_dead(&self, device_id: &str) {
        self.faults
            .lock()
            .unwrap()
            .entry(device_id.to_string())
            .or_default()
            .dead = true;
    }
}

/// Where a simulated camera gets its frames.
#[derive(Clone)]
pub enum CameraSource {
    /// Serve images from a pre-rendered stack, indexed by pattern.
    Stack(Arc<Vec<GrayImage>>),
    /// Synthesise a small deterministic test frame per pattern.
    Flat { width: u32, height: u32 },
}

impl CameraSource {
    fn frame(&self, pattern: usize) -> GrayImage {
        match self {
            CameraSource::Stack(stack) => stack
                .get(pattern)
                .cloned()
                .unwrap_or_else(|| GrayImage::filled(4, 4, 0)),
            CameraSource::Flat { width, height } => {
                let mut img = GrayImage::new(*width, *height);
                for y in 0..*height {
                    for x in 0..*width {
                        img.set(x, y, ((x + y + pattern as u32) % 256) as u8);
                    }
                }
                img
            }
        }
    }
}

/// A running simulated device.
pub struct DeviceSim {
    pub id: String,
    pub addr: SocketAddr,
    handle: JoinHandle<()>,
}

impl DeviceSim {
    pub fn abort(&self) {
        self.handle.abort();
    }
}

impl Drop for DeviceSim {
    fn drop(&mut self) {
        self.handle.abort();
    }
}

enum DeviceKind {
    Relay,
    Projector,
    Camera(CameraSource),
}

impl DeviceKind {
    fn type_name(&self) -> &'static str {
        match self {
            DeviceKind::Relay => "relay",
            DeviceKind::Projector => "projector",
            DeviceKind::Camera(_) => "camera",
        }
    }
}

/// Spawn the relay board simulator; `bind` may use port 0.
pub async fn spawn_relay(world: Arc<SimWorld>, bind: SocketAddr) -> std::io::Result<DeviceSim> {
    spawn_device(world, "relay0", DeviceKind::Relay, bind).await
}

pub async fn spawn_projector(
    world: Arc<SimWorld>,
    id: &str,
    bind: SocketAddr,
) -> std::io::Result<DeviceSim> {
    spawn_device(world, id, DeviceKind::Projector, bind).await
}

pub async fn spawn_camera(
    world: Arc<SimWorld>,
    id: &str,
    source: CameraSource,
    bind: SocketAddr,
) -> std::io::Result<DeviceSim> {
    spawn_device(world, id, DeviceKind::Camera(source), bind).await
}

async fn spawn_device(
    world: Arc<SimWorld>,
    id: &str,
    kind: DeviceKind,
    bind: SocketAddr,
) -> std::io::Result<DeviceSim> {
    let listener = TcpListener::bind(bind).await?;
    let addr = listener.local_addr()?;
    let id_owned = id.to_string();
    let kind = Arc::new(kind);
    let handle = tokio::spawn(async move {
        loop {
            let Ok((stream, _)) = listener.accept().await else {
                return;
            };
            let world = world.clone();
            let id = id_owned.clone();
            let kind = kind.clone();
            tokio::spawn(async move {
                let _ = serve_connection(stream, world, id, kind).await;
            });
        }
    });
    Ok(DeviceSim {
        id: id.to_string(),
        addr,
        handle,
    })
}

async fn serve_connection(
    stream: TcpStream,
    world: Arc<SimWorld>,
    id: String,
    kind: Arc<DeviceKind>,
) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line).await? == 0 {
            return Ok(()); // client hung up
        }
        // Unpowered or dead devices do not answer; the connection just dies.
        let is_relay = matches!(*kind, DeviceKind::Relay);
        if !is_relay && !world.powered(&id) {
            return Ok(());
        }
        if world.fault_of(&id).dead {
            return Ok(());
        }
        let cmd = match Command::parse(&line) {
            Ok(cmd) => cmd,
            Err(reason) => {
                reader
                    .get_mut()
                    .write_all(format!("ERR {reason}\n").as_bytes())
                    .await?;
                continue;
            }
        };
        let reply = handle_command(&cmd, &world, &id, &kind);
        match reply {
            Response::Line(text) => {
                reader.get_mut().write_all(text.as_bytes()).await?;
            }
            Response::CaptureFrame(img) => {
                let bytes = img.to_pgm_bytes();
                let header = format!("OK {}\n", bytes.len());
                reader.get_mut().write_all(header.as_bytes()).await?;
                reader.get_mut().write_all(&bytes).await?;
            }
            Response::Drop => {
                world.mark_dead(&id);
                return Ok(());
            }
        }
    }
}

enum Response {
    Line(String),
    CaptureFrame(GrayImage),
    Drop,
}

fn handle_command(
    cmd: &Command,
    world: &SimWorld,
    id: &str,
    kind: &DeviceKind,
) -> Response {
    let err = |reason: &str| Response::Line(format!("ERR {reason}\n"));
    match cmd {
        Command::Hello {
            device_type,
            id: hello_id,
        } => {
            if world.fault_of(id).refuse_hello {
                return Response::Drop;
            }
            if device_type != kind.type_name() || hello_id != id {
                return err("wrong device");
            }
            Response::Line("OK sim-1.0\n".to_string())
        }
        Command::Set { port, on } => {
            let DeviceKind::Relay = kind else {
                return err("not a relay");
            };
            match world.port_map.resolve(port) {
                Ok(index) => {
                    let state = world.set_relay(index, *on);
                    Response::Line(format!("OK {}\n", state.hex()))
                }
                Err(_) => err(&format!("unknown port {port}")),
            }
        }
        Command::Get => {
            let DeviceKind::Relay = kind else {
                return err("not a relay");
            };
            Response::Line(format!("OK {}\n", world.relay_state().hex()))
        }
        Command::Show { pattern } => {
            let DeviceKind::Projector = kind else {
                return err("not a projector");
            };
            *world.current_pattern.lock().unwrap() = Some(*pattern);
            Response::Line("OK\n".to_string())
        }
        Command::Blank => {
            let DeviceKind::Projector = kind else {
                return err("not a projector");
            };
            *world.current_pattern.lock().unwrap() = None;
            Response::Line("OK\n".to_string())
        }
        Command::Capture { pattern, .. } => {
            let DeviceKind::Camera(source) = kind else {
                return err("not a camera");
            };
            if world.fault_of(id).drop_at_pattern == Some(*pattern) {
                return Response::Drop;
            }
            // The buffer holds whatever the projector is actually showing.
            if world.current_pattern() != Some(*pattern) {
                return err("pattern not being projected");
            }
            Response::CaptureFrame(source.frame(*pattern))
        }
        Command::Beat { .. } => err("not a controller"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tokio::io::AsyncReadExt;

    async fn send_line(stream: &mut BufReader<TcpStream>, line: &str) -> String {
        stream
            .get_mut()
            .write_all(format!("{line}\n").as_bytes())
            .await
            .unwrap();
        let mut reply = String::new();
        stream.read_line(&mut reply).await.unwrap();
        reply
    }

    fn local() -> SocketAddr {
        "127.0.0.1:0".parse().unwrap()
    }

    #[tokio::test]
    async fn relay_set_get_and_bounds() {
        let world = SimWorld::new();
        let relay = spawn_relay(world.clone(), local()).await.unwrap();
        let stream = TcpStream::connect(relay.addr).await.unwrap();
        let mut client = BufReader::new(stream);

        assert_eq!(send_line(&mut client, "HELLO relay relay0").await, "OK sim-1.0\n");
        assert_eq!(send_line(&mut client, "GET").await, "OK 0000\n");
        // Idempotent set.
        assert_eq!(send_line(&mut client, "SET cam3 ON").await, "OK 0008\n");
        assert_eq!(send_line(&mut client, "SET cam3 ON").await, "OK 0008\n");
        assert_eq!(send_line(&mut client, "SET 8 ON").await, "OK 0108\n");
        assert_eq!(send_line(&mut client, "SET cam3 OFF").await, "OK 0100\n");
        let reply = send_line(&mut client, "SET 17 ON").await;
        assert!(reply.starts_with("ERR "), "{reply}");
        let reply = send_line(&mut client, "WHAT").await;
        assert!(reply.starts_with("ERR "), "{reply}");
    }

    #[tokio::test]
    async fn camera_requires_power_and_matching_pattern() {
        let world = SimWorld::new();
        let proj = spawn_projector(world.clone(), "proj0", local()).await.unwrap();
        let cam = spawn_camera(
            world.clone(),
            "cam0",
            CameraSource::Flat {
                width: 8,
                height: 6,
            },
            local(),
        )
        .await
        .unwrap();

        // Unpowered camera drops the connection.
        let stream = TcpStream::connect(cam.addr).await.unwrap();
        let mut client = BufReader::new(stream);
        client.get_mut().write_all(b"HELLO camera cam0\n").await.unwrap();
        let mut buf = String::new();
        assert_eq!(client.read_line(&mut buf).await.unwrap(), 0, "expected drop");

        // Power camera and projector, show pattern 2, capture it.
        world.set_relay(world.port_map.port_for_device("cam0").unwrap(), true);
        world.set_relay(world.port_map.port_for_device("proj0").unwrap(), true);
        let mut pclient = BufReader::new(TcpStream::connect(proj.addr).await.unwrap());
        assert_eq!(send_line(&mut pclient, "HELLO projector proj0").await, "OK sim-1.0\n");
        assert_eq!(send_line(&mut pclient, "SHOW 2").await, "OK\n");

        let mut cclient = BufReader::new(TcpStream::connect(cam.addr).await.unwrap());
        assert_eq!(send_line(&mut cclient, "HELLO camera cam0").await, "OK sim-1.0\n");
        // Wrong pattern index: the projector is showing 2.
        let reply = send_line(&mut cclient, "CAPTURE s1 3").await;
        assert!(reply.starts_with("ERR "), "{reply}");
        // Right pattern: OK <nbytes> + PGM payload.
        let reply = send_line(&mut cclient, "CAPTURE s1 2").await;
        let nbytes: usize = reply.trim().strip_prefix("OK ").unwrap().parse().unwrap();
        let mut payload = vec![0u8; nbytes];
        cclient.read_exact(&mut payload).await.unwrap();
        let img = GrayImage::from_pgm_bytes(&payload).unwrap();
        assert_eq!(img.dimensions(), (8, 6));
        assert_eq!(img.get(0, 0), 2); // flat source encodes the pattern index

        // Blank, then capture refuses again.
        assert_eq!(send_line(&mut pclient, "BLANK").await, "OK\n");
        let reply = send_line(&mut cclient, "CAPTURE s1 2").await;
        assert!(reply.starts_with("ERR "), "{reply}");
    }

    #[tokio::test]
    async fn fault_plan_drops_and_stays_dead() {
        let world = SimWorld::new();
        let proj = spawn_projector(world.clone(), "proj0", local()).await.unwrap();
        let cam = spawn_camera(
            world.clone(),
            "cam0",
            CameraSource::Flat {
                width: 4,
                height: 4,
            },
            local(),
        )
        .await
        .unwrap();
        world.set_relay(world.port_map.port_for_device("cam0").unwrap(), true);
        world.set_relay(world.port_map.port_for_device("proj0").unwrap(), true);
        world.set_fault(
            "cam0",
            FaultPlan {
                drop_at_pattern: Some(1),
                ..Default::default()
            },
        );

        let mut pclient = BufReader::new(TcpStream::connect(proj.addr).await.unwrap());
        send_line(&mut pclient, "HELLO projector proj0").await;
        send_line(&mut pclient, "SHOW 0").await;

        let mut cclient = BufReader::new(TcpStream::connect(cam.addr).await.unwrap());
        send_line(&mut cclient, "HELLO camera cam0").await;
        let reply = send_line(&mut cclient, "CAPTURE s1 0").await;
        let nbytes: usize = reply.trim().strip_prefix("OK ").unwrap().parse().unwrap();
        let mut payload = vec![0u8; nbytes];
        cclient.read_exact(&mut payload).await.unwrap();

        // Pattern 1 triggers the drop.
        send_line(&mut pclient, "SHOW 1").await;
        cclient.get_mut().write_all(b"CAPTURE s1 1\n").await.unwrap();
        let mut buf = String::new();
        assert_eq!(cclient.read_line(&mut buf).await.unwrap(), 0, "expected drop");

        // Reconnects also die until the fault is cleared.
        let mut retry = BufReader::new(TcpStream::connect(cam.addr).await.unwrap());
        retry.get_mut().write_all(b"HELLO camera cam0\n").await.unwrap();
        let mut buf = String::new();
        assert_eq!(retry.read_line(&mut buf).await.unwrap(), 0);

        world.clear_faults();
        let mut again = BufReader::new(TcpStream::connect(cam.addr).await.unwrap());
        assert_eq!(send_line(&mut again, "HELLO camera cam0").await, "OK sim-1.0\n");
    }
}
