//! The device wire protocol: newline-terminated ASCII, bit-exact.
//!
//! ```text
//! HELLO <device-type> <id>            -> OK <firmware>
//! SET <port> ON|OFF                   -> OK <16-bit-hex-state>   (relay)
//! GET                                 -> OK <16-bit-hex-state>   (relay)
//! SHOW <pattern-index>                -> OK                      (projector)
//! BLANK                               -> OK                      (projector)
//! CAPTURE <session-id> <pattern-idx>  -> OK <nbytes> + raw PGM   (camera)
//! BEAT <role> <seq>                   -> OK                      (heartbeat)
//! ```
//!
//! Any malformed line is answered with `ERR <reason>`.

use std::fmt;

use super::failover::Role;

/// Relay port addressed by name or index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PortRef {
    Index(u8),
    Name(String),
}

impl fmt::Display for PortRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PortRef::Index(i) => write!(f, "{i}"),
            PortRef::Name(n) => write!(f, "{n}"),
        }
    }
}

impl std::str::FromStr for PortRef {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.parse::<u8>() {
            Ok(i) => PortRef::Index(i),
            Err(_) => PortRef::Name(s.to_string()),
        })
    }
}

/// One request line.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Hello { device_type: String, id: String },
    Set { port: PortRef, on: bool },
    Get,
    Show { pattern: usize },
    Blank,
    Capture { session_id: String, pattern: usize },
    Beat { role: Role, seq: u64 },
}

impl Command {
    /// Serialise to the exact wire form (no trailing newline).
    pub fn wire(&self) -> String {
        match self {
            Command::Hello { device_type, id } => format!("HELLO {device_type} {id}"),
            Command::Set { port, on } => {
                format!("SET {port} {}", if *on { "ON" } else { "OFF" })
            }
            Command::Get => "GET".to_string(),
            Command::Show { pattern } => format!("SHOW {pattern}"),
            Command::Blank => "BLANK".to_string(),
            Command::Capture {
                session_id,
                pattern,
            } => format!("CAPTURE {session_id} {pattern}"),
            Command::Beat { role, seq } => format!("BEAT {role} {seq}"),
        }
    }

    /// Parse one request line; the error is the `ERR` reason.
    pub fn parse(line: &str) -> Result<Command, String> {
        let mut parts = line.trim_end_matches(['\r', '\n']).split(' ');
        let verb = parts.next().unwrap_or("");
        let args: Vec<&str> = parts.collect();
        if args.iter().any(|a| a.is_empty()) {
            return Err("empty argument".to_string());
        }
        match verb {
            "HELLO" => {
                if args.len() != 2 {
                    return Err("HELLO takes <device-type> <id>".into());
                }
                Ok(Command::Hello {
                    device_type: args[0].to_string(),
                    id: args[1].to_string(),
                })
            }
            "SET" => {
                if args.len() != 2 {
                    return Err("SET takes <port> ON|OFF".into());
                }
                let on = match args[1] {
                    "ON" => true,
                    "OFF" => false,
                    other => return Err(format!("bad switch state `{other}`")),
                };
                Ok(Command::Set {
                    port: args[0].parse().unwrap(),
                    on,
                })
            }
            "GET" => {
                if !args.is_empty() {
                    return Err("GET takes no arguments".into());
                }
                Ok(Command::Get)
            }
            "SHOW" => {
                if args.len() != 1 {
                    return Err("SHOW takes <pattern-index>".into());
                }
                let pattern = args[0]
                    .parse()
                    .map_err(|_| format!("bad pattern index `{}`", args[0]))?;
                Ok(Command::Show { pattern })
            }
            "BLANK" => {
                if !args.is_empty() {
                    return Err("BLANK takes no arguments".into());
                }
                Ok(Command::Blank)
            }
            "CAPTURE" => {
                if args.len() != 2 {
                    return Err("CAPTURE takes <session-id> <pattern-index>".into());
                }
                let pattern = args[1]
                    .parse()
                    .map_err(|_| format!("bad pattern index `{}`", args[1]))?;
                Ok(Command::Capture {
                    session_id: args[0].to_string(),
                    pattern,
                })
            }
            "BEAT" => {
                if args.len() != 2 {
                    return Err("BEAT takes <role> <seq>".into());
                }
                let role = match args[0] {
                    "primary" => Role::Primary,
                    "backup" => Role::Backup,
                    other => return Err(format!("bad role `{other}`")),
                };
                let seq = args[1]
                    .parse()
                    .map_err(|_| format!("bad sequence `{}`", args[1]))?;
                Ok(Command::Beat { role, seq })
            }
            other => Err(format!("unknown command `{other}`")),
        }
    }
}

/// Parse a reply line: `OK[ <payload>]` or `ERR <reason>`.
pub fn parse_reply(line: &str) -> Result<String, String> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line == "OK" {
        return Ok(String::new());
    }
    if let Some(payload) = line.strip_prefix("OK ") {
        return Ok(payload.to_string());
    }
    if let Some(reason) = line.strip_prefix("ERR ") {
        return Err(reason.to_string());
    }
    Err(format!("unparseable reply `{line}`"))
}
