//! Primary/backup controller failover.
//!
//! The primary emits `BEAT primary <seq>` every heartbeat period; the backup
//! promotes itself once the observed heartbeat age exceeds the takeover
//! timeout. A promoted controller never demotes automatically — split-brain
//! recovery beyond a single failure is out of scope.

use std::fmt;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;

use super::events::{Event, EventLog};
use super::protocol::Command;
use super::ControlError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Primary,
    Backup,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Primary => "primary",
            Role::Backup => "backup",
        })
    }
}

/// Failover configuration of one controller.
#[derive(Debug, Clone, Copy)]
pub struct ControllerRole {
    pub role: Role,
    pub heartbeat_period: Duration,
    pub takeover_timeout: Duration,
}

impl ControllerRole {
    pub fn new(
        role: Role,
        heartbeat_period: Duration,
        takeover_timeout: Duration,
    ) -> Result<Self, ControlError> {
        if takeover_timeout < heartbeat_period * 3 {
            return Err(ControlError::TakeoverTooShort);
        }
        Ok(Self {
            role,
            heartbeat_period,
            takeover_timeout,
        })
    }
}

/// Pure promotion rule: a backup becomes primary when the heartbeat age
/// exceeds the takeover timeout; nothing ever demotes.
pub fn failover_step(state: &ControllerRole, last_heartbeat_age: Duration) -> Role {
    match state.role {
        Role::Primary => Role::Primary,
        Role::Backup => {
            if last_heartbeat_age > state.takeover_timeout {
                Role::Primary
            } else {
                Role::Backup
            }
        }
    }
}

/// Handle to a running controller's failover machinery.
pub struct ControllerHandle {
    pub name: String,
    pub addr: SocketAddr,
    role: Arc<RwLock<Role>>,
    promoted_at: Arc<RwLock<Option<Instant>>>,
    tasks: Vec<JoinHandle<()>>,
}

impl ControllerHandle {
    pub fn role(&self) -> Role {
        *self.role.read().unwrap()
    }

    /// Shared role flag, for wiring into an orchestrator.
    pub fn role_handle(&self) -> Arc<RwLock<Role>> {
        self.role.clone()
    }

    pub fn promoted_at(&self) -> Option<Instant> {
        *self.promoted_at.read().unwrap()
    }

    /// Simulate a hardware death: all tasks stop immediately.
    pub fn kill(&self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

impl Drop for ControllerHandle {
    fn drop(&mut self) {
        self.kill();
    }
}

/// Spawn a controller's heartbeat listener, beater, and promotion monitor.
///
/// `listen` may use port 0; the bound address is reported in the handle.
/// `peer` is the other controller's heartbeat address.
pub async fn spawn_controller(
    name: &str,
    config: ControllerRole,
    listen: SocketAddr,
    peer: SocketAddr,
    events: Arc<EventLog>,
) -> std::io::Result<ControllerHandle> {
    let listener = TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    let role = Arc::new(RwLock::new(config.role));
    let promoted_at = Arc::new(RwLock::new(None));
    // Starting "now" means a backup allows the peer one full timeout to
    // start beating before considering promotion.
    let last_beat = Arc::new(RwLock::new(Instant::now()));
    let mut tasks = Vec::new();

    // Listener: record incoming beats.
    {
        let last_beat = last_beat.clone();
        tasks.push(tokio::spawn(async move {
            loop {
                let Ok((stream, _)) = listener.accept().await else {
                    return;
                };
                let last_beat = last_beat.clone();
                tokio::spawn(async move {
                    let mut reader = BufReader::new(stream);
                    let mut line = String::new();
                    loop {
                        line.clear();
                        match reader.read_line(&mut line).await {
                            Ok(0) | Err(_) => return,
                            Ok(_) => {}
                        }
                        let reply = match Command::parse(&line) {
                            Ok(Command::Beat { .. }) => {
                                *last_beat.write().unwrap() = Instant::now();
                                "OK\n".to_string()
                            }
                            Ok(_) => "ERR not a device\n".to_string(),
                            Err(reason) => format!("ERR {reason}\n"),
                        };
                        if reader.get_mut().write_all(reply.as_bytes()).await.is_err() {
                            return;
                        }
                    }
                });
            }
        }));
    }

    // Beater: while primary, send BEAT every period.
    {
        let role = role.clone();
        tasks.push(tokio::spawn(async move {
            let mut seq = 0u64;
            let mut conn: Option<BufReader<TcpStream>> = None;
            loop {
                tokio::time::sleep(config.heartbeat_period).await;
                if *role.read().unwrap() != Role::Primary {
                    continue;
                }
                seq += 1;
                let line = Command::Beat {
                    role: Role::Primary,
                    seq,
                }
                .wire()
                    + "\n";
                if conn.is_none() {
                    conn = TcpStream::connect(peer).await.ok().map(BufReader::new);
                }
                let Some(stream) = conn.as_mut() else {
                    continue;
                };
                let ok = async {
                    stream.get_mut().write_all(line.as_bytes()).await.ok()?;
                    let mut reply = String::new();
                    stream.read_line(&mut reply).await.ok()
                }
                .await
                .is_some();
                if !ok {
                    conn = None;
                }
            }
        }));
    }

    // Monitor: backups watch the heartbeat age and promote themselves.
    {
        let role = role.clone();
        let promoted_at = promoted_at.clone();
        let last_beat = last_beat.clone();
        let name = name.to_string();
        let events = events.clone();
        let tick = (config.heartbeat_period / 5).max(Duration::from_millis(1));
        tasks.push(tokio::spawn(async move {
            loop {
                tokio::time::sleep(tick).await;
                let current = *role.read().unwrap();
                let state = ControllerRole {
                    role: current,
                    ..config
                };
                let age = last_beat.read().unwrap().elapsed();
                let next = failover_step(&state, age);
                if next != current {
                    *role.write().unwrap() = next;
                    *promoted_at.write().unwrap() = Some(Instant::now());
                    events.emit(Event::Failover {
                        controller: name.clone(),
                        from: current.to_string(),
                        to: next.to_string(),
                        t_ms: events.now_ms(),
                    });
                }
            }
        }));
    }

    Ok(ControllerHandle {
        name: name.to_string(),
        addr,
        role,
        promoted_at,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(role: Role) -> ControllerRole {
        ControllerRole::new(role, Duration::from_secs(1), Duration::from_millis(3500)).unwrap()
    }

    #[test]
    fn takeover_floor_enforced() {
        assert!(ControllerRole::new(
            Role::Backup,
            Duration::from_secs(1),
            Duration::from_millis(2999)
        )
        .is_err());
        assert!(ControllerRole::new(
            Role::Backup,
            Duration::from_secs(1),
            Duration::from_secs(3)
        )
        .is_ok());
    }

    #[test]
    fn backup_promotes_only_past_timeout() {
        let backup = config(Role::Backup);
        assert_eq!(
            failover_step(&backup, Duration::from_millis(3499)),
            Role::Backup
        );
        assert_eq!(
            failover_step(&backup, Duration::from_millis(3501)),
            Role::Primary
        );
    }

    #[test]
    fn primary_never_demotes() {
        let primary = config(Role::Primary);
        assert_eq!(failover_step(&primary, Duration::from_secs(3600)), Role::Primary);
        assert_eq!(failover_step(&primary, Duration::ZERO), Role::Primary);
    }

    /// Discrete-event simulation: primary killed at t; exactly one primary
    /// before t, zero or one between t and t+timeout, exactly one after.
    #[test]
    fn simulated_pair_single_primary() {
        let period_ms = 1000u64;
        let timeout_ms = 3500u64;
        let kill_at = 10_000u64;
        let backup_cfg = ControllerRole::new(
            Role::Backup,
            Duration::from_millis(period_ms),
            Duration::from_millis(timeout_ms),
        )
        .unwrap();

        let mut backup_role = Role::Backup;
        let mut primary_alive = true;
        let mut last_beat = 0u64;
        for t in (0..20_000u64).step_by(100) {
            if t >= kill_at {
                primary_alive = false;
            }
            if primary_alive && t % period_ms == 0 {
                last_beat = t;
            }
            let state = ControllerRole {
                role: backup_role,
                ..backup_cfg
            };
            backup_role = failover_step(&state, Duration::from_millis(t - last_beat));

            let primaries =
                usize::from(primary_alive) + usize::from(backup_role == Role::Primary);
            if t < kill_at {
                assert_eq!(primaries, 1, "t={t}");
            } else if t > kill_at + timeout_ms {
                assert_eq!(primaries, 1, "t={t}");
                assert_eq!(backup_role, Role::Primary);
            } else {
                assert!(primaries <= 1, "two primaries at t={t}");
            }
        }
    }
}
