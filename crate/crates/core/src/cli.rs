//! The `seascan` command line: pattern generation, simulation, decoding,
//! reconstruction, calibration, device simulators, orchestration, and relay
//! control.
//!
//! Exit codes: 0 success, 1 domain error (message on stderr), 2 usage.
//! Structured logs go to stderr as JSON lines; primary results land in the
//! paths given by `--out`/`--sink`. All outputs are deterministic for a
//! fixed `--seed`.

use std::collections::HashMap;
use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::calibrate::{estimate_interface, CalibObservation, InterfaceGuess};
use crate::controlplane::scheduler::wait_hint;
use crate::controlplane::sink::ImageEntry;
use crate::controlplane::{
    devices, scheduler_tick, CameraSource, DirectorySink, EventLog, Orchestrator,
    OrchestratorConfig, PortRef, Schedule, SessionManifest, SimWorld, TickDecision, UploadSink,
};
use crate::graycode::{decode_stack, generate_patterns, PatternSpec, SequenceManifest};
use crate::pgm::GrayImage;
use crate::reconstruct::{
    export_ply, reconstruct_camera_camera, reconstruct_camera_projector, DEFAULT_MAX_GAP,
};
use crate::rig::{DeviceRole, RigConfig};
use crate::synth::{render, write_ground_truth, NoiseModel, Scene};

/// Environment variable giving the base TCP port for simulated devices.
pub const PORT_BASE_ENV: &str = "SEASCAN_PORT_BASE";
const DEFAULT_PORT_BASE: u16 = 7600;

#[derive(Parser)]
#[command(
    name = "seascan",
    version,
    about = "Structured-light 3D scanning for flat-port underwater rigs",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: CommandKind,
}

#[derive(Subcommand)]
enum CommandKind {
    /// Generate gray-code pattern PGMs plus a manifest.
    Patterns(PatternsArgs),
    /// Render a synthetic capture of a scene through the refractive model.
    Simulate(SimulateArgs),
    /// Decode a captured stack into a correspondence map.
    Decode(DecodeArgs),
    /// Triangulate a correspondence map into a PLY point cloud.
    Reconstruct(ReconstructArgs),
    /// Estimate a camera's refractive interface from target observations.
    Calibrate(CalibrateArgs),
    /// Run simulated devices (relay board, projector, cameras) over TCP.
    Devices(DevicesArgs),
    /// Run the capture orchestrator against (simulated) devices.
    Orchestrate(OrchestrateArgs),
    /// Switch or query relay power ports.
    Relay(RelayArgs),
}

#[derive(Args)]
struct PatternsArgs {
    #[arg(long, default_value_t = 1024)]
    width: u32,
    #[arg(long, default_value_t = 768)]
    height: u32,
    /// Skip the per-plane inverse patterns.
    #[arg(long)]
    no_inverses: bool,
    /// Skip the white/black reference frames.
    #[arg(long)]
    no_references: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    rig: PathBuf,
    #[arg(long)]
    camera: String,
    #[arg(long)]
    projector: String,
    /// Gaussian intensity noise sigma in 8-bit levels.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "sim")]
    session_id: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    /// Capture directory holding manifest.json (simulate output or one
    /// sink session directory).
    #[arg(long)]
    captures: PathBuf,
    #[arg(long)]
    camera: String,
    /// Minimum per-pixel contrast as a fraction of the white-black range.
    #[arg(long, default_value_t = crate::graycode::DEFAULT_CONTRAST_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MatchMode {
    /// Camera pixels against the projector pixels they decoded.
    CameraProjector,
    /// Two cameras matched through identical projector codes.
    CameraCamera,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    rig: PathBuf,
    #[arg(long, value_enum, default_value = "camera-projector")]
    mode: MatchMode,
    /// Correspondence map of the (first) camera.
    #[arg(long)]
    map: PathBuf,
    /// Second camera's map (camera-camera mode).
    #[arg(long)]
    map_b: Option<PathBuf>,
    #[arg(long)]
    camera: String,
    #[arg(long)]
    projector: Option<String>,
    #[arg(long)]
    camera_b: Option<String>,
    /// Reject matches whose mutual-perpendicular gap exceeds this (meters).
    #[arg(long, default_value_t = DEFAULT_MAX_GAP)]
    max_gap: f64,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON triangulation report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Observations JSON: camera id plus {x,y,z,u,v} entries.
    #[arg(long)]
    obs: PathBuf,
    #[arg(long)]
    rig: PathBuf,
    /// Initial normal guess as `x,y,z` (device frame).
    #[arg(long)]
    init_normal: Option<String>,
    #[arg(long, default_value_t = 0.05)]
    init_distance: f64,
    /// Output rig-patch JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DevicesArgs {
    #[arg(long)]
    rig: PathBuf,
    /// Base TCP port; relay binds here, device i at base+1+i.
    #[arg(long)]
    port_base: Option<u16>,
    /// Serve camera frames from this capture directory (manifest.json).
    #[arg(long)]
    captures: Option<PathBuf>,
    /// Synthesised frame size when no captures are given, as WxH.
    #[arg(long, default_value = "64x48")]
    camera_size: String,
    /// Exit after this many seconds instead of serving forever.
    #[arg(long)]
    run_secs: Option<u64>,
}

#[derive(Args)]
struct OrchestrateArgs {
    #[arg(long)]
    rig: PathBuf,
    /// `on-demand`, `interval:<secs>`, or `daily:<HH:MM>`.
    #[arg(long, default_value = "on-demand")]
    schedule: String,
    /// Upload sink, `dir:<path>`.
    #[arg(long)]
    sink: String,
    #[arg(long)]
    port_base: Option<u16>,
    /// Projector to drive; defaults to the first projector in the rig.
    #[arg(long)]
    projector: Option<String>,
    /// Run one session immediately and exit.
    #[arg(long)]
    once: bool,
    /// Stop after this many sessions (scheduler mode).
    #[arg(long)]
    max_sessions: Option<usize>,
    #[arg(long, default_value = "scan")]
    session_prefix: String,
}

#[derive(Args)]
struct RelayArgs {
    /// Switch a port: `<name-or-index>=on|off`.
    #[arg(long)]
    set: Option<String>,
    /// Print the 16-port state.
    #[arg(long)]
    get: bool,
    #[arg(long)]
    port_base: Option<u16>,
}

/// Run the CLI; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        CommandKind::Patterns(args) => cmd_patterns(args),
        CommandKind::Simulate(args) => cmd_simulate(args),
        CommandKind::Decode(args) => cmd_decode(args),
        CommandKind::Reconstruct(args) => cmd_reconstruct(args),
        CommandKind::Calibrate(args) => cmd_calibrate(args),
        CommandKind::Devices(args) => cmd_devices(args),
        CommandKind::Orchestrate(args) => cmd_orchestrate(args),
        CommandKind::Relay(args) => cmd_relay(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("seascan: error: {e:#}");
            1
        }
    }
}

fn cmd_patterns(args: PatternsArgs) -> Result<()> {
    let mut spec = PatternSpec::new(args.width, args.height)?;
    spec.include_inverses = !args.no_inverses;
    spec.include_references = !args.no_references;
    let seq = generate_patterns(&spec)?;
    seq.write_dir(&args.out)?;
    println!(
        "wrote {} patterns ({} column bits, {} row bits) to {}",
        seq.patterns.len(),
        spec.col_bits(),
        spec.row_bits(),
        args.out.display()
    );
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let scene = Scene::load(&args.scene)?;
    let rig = RigConfig::load(&args.rig)?;
    let projector = rig.projector(&args.projector)?;
    let spec = PatternSpec::new(projector.resolution.0, projector.resolution.1)?;
    let patterns = generate_patterns(&spec)?;
    let noise = NoiseModel {
        sigma: args.sigma,
        seed: args.seed,
    };
    let out = render(&scene, &rig, &args.camera, &args.projector, &patterns, noise)?;

    std::fs::create_dir_all(&args.out)?;
    let sink = DirectorySink::new(&args.out)?;
    let mut images = Vec::new();
    for (pattern, img) in out.stack.iter().enumerate() {
        let rel = SessionManifest::image_rel_path(&args.camera, pattern);
        let bytes = img.to_pgm_bytes();
        sink.put(&rel, &bytes)?;
        images.push(ImageEntry {
            camera: args.camera.clone(),
            pattern,
            file: rel,
            sha256: crate::controlplane::sink::sha256_hex(&bytes),
            bytes: bytes.len(),
        });
    }
    let manifest = SessionManifest {
        version: 1,
        session_id: format!("{}-seed{}", args.session_id, args.seed),
        pattern_manifest: patterns.manifest(),
        cameras: vec![args.camera.clone()],
        images,
    };
    std::fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    write_ground_truth(&out, args.out.join("ground_truth.bin"))?;
    println!(
        "rendered {} frames for {} via {} into {}",
        out.stack.len(),
        args.camera,
        args.projector,
        args.out.display()
    );
    Ok(())
}

/// Load the stack for one camera from a capture directory, in pattern order.
fn load_stack(captures: &Path, camera: &str) -> Result<(Vec<GrayImage>, SequenceManifest)> {
    let manifest = SessionManifest::load(captures.join("manifest.json"))
        .with_context(|| format!("reading {}/manifest.json", captures.display()))?;
    let mut entries: Vec<&ImageEntry> = manifest
        .images
        .iter()
        .filter(|e| e.camera == camera)
        .collect();
    if entries.is_empty() {
        bail!("camera `{camera}` has no images in {}", captures.display());
    }
    entries.sort_by_key(|e| e.pattern);
    let mut stack = Vec::with_capacity(entries.len());
    for entry in entries {
        stack.push(GrayImage::load_pgm(captures.join(&entry.file))?);
    }
    Ok((stack, manifest.pattern_manifest))
}

fn spec_from_manifest(manifest: &SequenceManifest) -> PatternSpec {
    PatternSpec {
        projector_width: manifest.projector_width,
        projector_height: manifest.projector_height,
        include_inverses: manifest.include_inverses,
        include_references: manifest.include_references,
    }
}

fn cmd_decode(args: DecodeArgs) -> Result<()> {
    let (stack, pattern_manifest) = load_stack(&args.captures, &args.camera)?;
    let spec = spec_from_manifest(&pattern_manifest);
    let map = decode_stack(&args.camera, &stack, &spec, args.threshold)?;
    map.save_json(&args.out)?;
    println!(
        "decoded {}: {}/{} pixels ({:.1}% coverage)",
        args.camera,
        map.decoded_count(),
        (map.width() * map.height()) as usize,
        100.0 * map.coverage()
    );
    Ok(())
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let rig = RigConfig::load(&args.rig)?;
    let map = crate::graycode::CorrespondenceMap::load_json(&args.map)?;
    let (cloud, report) = match args.mode {
        MatchMode::CameraProjector => {
            let projector = args
                .projector
                .clone()
                .ok_or_else(|| anyhow!("--projector is required in camera-projector mode"))?;
            reconstruct_camera_projector(&map, &rig, &args.camera, &projector, args.max_gap)?
        }
        MatchMode::CameraCamera => {
            let camera_b = args
                .camera_b
                .clone()
                .ok_or_else(|| anyhow!("--camera-b is required in camera-camera mode"))?;
            let map_b_path = args
                .map_b
                .clone()
                .ok_or_else(|| anyhow!("--map-b is required in camera-camera mode"))?;
            let map_b = crate::graycode::CorrespondenceMap::load_json(&map_b_path)?;
            reconstruct_camera_camera(&map, &map_b, &rig, &args.camera, &camera_b, args.max_gap)?
        }
    };
    export_ply(&cloud, &args.out)?;
    if let Some(report_path) = &args.report {
        std::fs::write(report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    println!(
        "triangulated {} of {} correspondences (rms gap {:.3e} m, coverage {:.1}%) -> {}",
        report.triangulated,
        report.total,
        report.rms_gap,
        100.0 * report.coverage,
        args.out.display()
    );
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let obs = CalibObservation::load(&args.obs)?;
    let rig = RigConfig::load(&args.rig)?;
    let mut init = InterfaceGuess {
        distance: args.init_distance,
        ..Default::default()
    };
    if let Some(raw) = &args.init_normal {
        let parts: Vec<f64> = raw
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| anyhow!("--init-normal must be `x,y,z`"))?;
        if parts.len() != 3 {
            bail!("--init-normal must be `x,y,z`");
        }
        init.normal = nalgebra::Vector3::new(parts[0], parts[1], parts[2]);
    }
    let camera = rig.camera(&obs.camera_id)?;
    let eta = camera.interface.eta;
    let estimate = estimate_interface(&obs, &rig, &init)?;
    let patch = serde_json::json!({
        "camera_id": obs.camera_id,
        "interface": estimate.to_interface_entry(eta),
        "rms_residual": estimate.rms_residual,
        "iterations": estimate.iterations,
        "converged": estimate.converged,
    });
    std::fs::write(&args.out, serde_json::to_string_pretty(&patch)? + "\n")?;
    println!(
        "estimated interface for {}: distance {:.6} m, rms {:.4} px, {} iterations{}",
        obs.camera_id,
        estimate.distance,
        estimate.rms_residual,
        estimate.iterations,
        if estimate.converged { "" } else { " (NOT converged)" }
    );
    Ok(())
}

fn port_base(flag: Option<u16>) -> u16 {
    flag.or_else(|| {
        std::env::var(PORT_BASE_ENV)
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(DEFAULT_PORT_BASE)
}

/// Deterministic device address assignment shared by `devices` and
/// `orchestrate`: relay at the base port, device i at base+1+i in rig order.
fn device_addrs(rig: &RigConfig, base: u16) -> (SocketAddr, HashMap<String, SocketAddr>) {
    let relay: SocketAddr = format!("127.0.0.1:{base}").parse().unwrap();
    let mut map = HashMap::new();
    for (i, device) in rig.devices.iter().enumerate() {
        map.insert(
            device.id.clone(),
            format!("127.0.0.1:{}", base + 1 + i as u16).parse().unwrap(),
        );
    }
    (relay, map)
}

fn parse_camera_size(s: &str) -> Result<(u32, u32)> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| anyhow!("--camera-size must be WxH"))?;
    Ok((w.parse()?, h.parse()?))
}

fn cmd_devices(args: DevicesArgs) -> Result<()> {
    let rig = RigConfig::load(&args.rig)?;
    let base = port_base(args.port_base);
    let (relay_addr, addrs) = device_addrs(&rig, base);
    let (cam_w, cam_h) = parse_camera_size(&args.camera_size)?;

    // Per-camera frame sources.
    let mut sources: HashMap<String, CameraSource> = HashMap::new();
    if let Some(captures) = &args.captures {
        let manifest = SessionManifest::load(captures.join("manifest.json"))?;
        for camera in &manifest.cameras {
            let (stack, _) = load_stack(captures, camera)?;
            sources.insert(camera.clone(), CameraSource::Stack(Arc::new(stack)));
        }
    }

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let world = SimWorld::new();
        let mut sims = Vec::new();
        sims.push(devices::spawn_relay(world.clone(), relay_addr).await?);
        for device in &rig.devices {
            let addr = addrs[&device.id];
            let sim = match device.role {
                DeviceRole::Projector => {
                    devices::spawn_projector(world.clone(), &device.id, addr).await?
                }
                DeviceRole::Camera => {
                    let source = sources.get(&device.id).cloned().unwrap_or(CameraSource::Flat {
                        width: cam_w,
                        height: cam_h,
                    });
                    devices::spawn_camera(world.clone(), &device.id, source, addr).await?
                }
            };
            sims.push(sim);
        }
        let listing: Vec<serde_json::Value> = sims
            .iter()
            .map(|s| serde_json::json!({"id": s.id, "addr": s.addr.to_string()}))
            .collect();
        println!("{}", serde_json::to_string(&serde_json::json!({"devices": listing}))?);
        match args.run_secs {
            Some(secs) => tokio::time::sleep(std::time::Duration::from_secs(secs)).await,
            None => std::future::pending::<()>().await,
        }
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}

fn cmd_orchestrate(args: OrchestrateArgs) -> Result<()> {
    let rig = RigConfig::load(&args.rig)?;
    let schedule = Schedule::parse(&args.schedule)?;
    let sink_path = args
        .sink
        .strip_prefix("dir:")
        .ok_or_else(|| anyhow!("--sink must be `dir:<path>`"))?;
    let sink = DirectorySink::new(sink_path)?;
    let base = port_base(args.port_base);
    let (relay_addr, addrs) = device_addrs(&rig, base);
    let projector_id = match &args.projector {
        Some(id) => id.clone(),
        None => rig
            .projectors()
            .next()
            .map(|d| d.id.clone())
            .ok_or_else(|| anyhow!("rig has no projector"))?,
    };
    let projector = rig.projector(&projector_id)?;
    let spec = PatternSpec::new(projector.resolution.0, projector.resolution.1)?;
    let patterns = generate_patterns(&spec)?;

    let mut config = OrchestratorConfig::new(relay_addr);
    config.device_addrs = addrs;
    let events = Arc::new(EventLog::stderr());
    let orchestrator = Orchestrator::new(config, events.clone());

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let mut session_counter = 0usize;
        let mut last_run: Option<chrono::NaiveDateTime> = None;
        loop {
            let trigger = if args.once {
                true
            } else {
                let now = chrono::Local::now().naive_local();
                let decision = scheduler_tick(now, &schedule, last_run);
                events.emit(crate::controlplane::Event::Scheduler {
                    decision: match decision {
                        TickDecision::Trigger => "trigger".to_string(),
                        TickDecision::Wait(d) => format!("wait:{}s", d.as_secs()),
                    },
                    t_ms: events.now_ms(),
                });
                match decision {
                    TickDecision::Trigger => true,
                    TickDecision::Wait(_) => {
                        tokio::time::sleep(wait_hint(decision)).await;
                        false
                    }
                }
            };
            if trigger {
                let session_id = format!("{}{}", args.session_prefix, session_counter);
                session_counter += 1;
                last_run = Some(chrono::Local::now().naive_local());
                let session = orchestrator
                    .run_session(&rig, &patterns, &sink, &session_id, &projector_id)
                    .await?;
                println!(
                    "session {}: {}{}",
                    session.id,
                    session.state().name(),
                    session
                        .failure_reason()
                        .map(|r| format!(" ({r})"))
                        .unwrap_or_default()
                );
                if args.once || args.max_sessions.is_some_and(|m| session_counter >= m) {
                    break;
                }
            }
        }
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}

fn cmd_relay(args: RelayArgs) -> Result<()> {
    let base = port_base(args.port_base);
    let relay_addr: SocketAddr = format!("127.0.0.1:{base}").parse().unwrap();
    let config = OrchestratorConfig::new(relay_addr);
    let events = Arc::new(EventLog::stderr());
    let orchestrator = Orchestrator::new(config, events);

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        if let Some(set) = &args.set {
            let (port, state) = set
                .split_once('=')
                .ok_or_else(|| anyhow!("--set takes <port>=on|off"))?;
            let on = match state {
                "on" => true,
                "off" => false,
                other => bail!("bad switch state `{other}`"),
            };
            let port_ref: PortRef = port.parse().unwrap();
            let state = orchestrator.relay_set(&port_ref, on).await?;
            println!("{}", state.hex());
        } else if args.get {
            let state = orchestrator.relay_get().await?;
            println!("{}", state.hex());
        } else {
            bail!("relay needs --set or --get");
        }
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(())
}
