//! Relay board state: 16 software-switchable power ports.

use super::protocol::PortRef;
use super::ControlError;

pub const RELAY_PORT_COUNT: usize = 16;

/// On/off state of all 16 ports. The hex wire form packs port `k` into bit
/// `k` of a 16-bit word, printed as four lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RelayState {
    ports: [bool; RELAY_PORT_COUNT],
}

impl RelayState {
    /// Fresh board: all ports off.
    pub fn all_off() -> Self {
        Self::default()
    }

    pub fn get(&self, index: u8) -> bool {
        self.ports[index as usize]
    }

    pub fn set(&mut self, index: u8, on: bool) {
        self.ports[index as usize] = on;
    }

    pub fn word(&self) -> u16 {
        self.ports
            .iter()
            .enumerate()
            .fold(0u16, |w, (k, &on)| if on { w | (1 << k) } else { w })
    }

    pub fn hex(&self) -> String {
        format!("{:04x}", self.word())
    }

    pub fn from_hex(s: &str) -> Result<Self, ControlError> {
        let word = u16::from_str_radix(s.trim(), 16)
            .map_err(|_| ControlError::Protocol(format!("bad relay state `{s}`")))?;
        let mut state = Self::default();
        for k in 0..RELAY_PORT_COUNT {
            state.ports[k] = (word >> k) & 1 == 1;
        }
        Ok(state)
    }

    pub fn ports(&self) -> &[bool; RELAY_PORT_COUNT] {
        &self.ports
    }
}

/// Named assignment of the 16 ports.
#[derive(Debug, Clone)]
pub struct PortMap {
    names: Vec<(String, u8)>,
}

impl PortMap {
    /// The deployed assignment: 8 cameras, 3 projectors, 2 controller PCs,
    /// 2 Ethernet switches, 1 spare.
    pub fn deployed() -> Self {
        let mut names = Vec::with_capacity(RELAY_PORT_COUNT);
        for k in 0..8 {
            names.push((format!("cam{k}"), k as u8));
        }
        for k in 0..3 {
            names.push((format!("proj{k}"), 8 + k as u8));
        }
        names.push(("pc0".to_string(), 11));
        names.push(("pc1".to_string(), 12));
        names.push(("switch0".to_string(), 13));
        names.push(("switch1".to_string(), 14));
        names.push(("spare".to_string(), 15));
        Self { names }
    }

    pub fn resolve(&self, port: &PortRef) -> Result<u8, ControlError> {
        match port {
            PortRef::Index(i) => {
                if (*i as usize) < RELAY_PORT_COUNT {
                    Ok(*i)
                } else {
                    Err(ControlError::UnknownPort(i.to_string()))
                }
            }
            PortRef::Name(name) => self
                .names
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, i)| *i)
                .ok_or_else(|| ControlError::UnknownPort(name.clone())),
        }
    }

    pub fn name_of(&self, index: u8) -> Option<&str> {
        self.names
            .iter()
            .find(|(_, i)| *i == index)
            .map(|(n, _)| n.as_str())
    }

    /// Relay port for a rig device id, when the id matches a port name.
    pub fn port_for_device(&self, device_id: &str) -> Option<u8> {
        self.resolve(&PortRef::Name(device_id.to_string())).ok()
    }
}
