//! Capture-session state machine.
//!
//! One session is one scheduled scan. States advance strictly forward:
//!
//! ```text
//! Idle -> PoweringOn -> Projecting -> Capturing -> Collecting
//!      -> Uploading -> PoweringOff -> Done
//! ```
//!
//! `Failed` is reachable from any non-terminal state. The projector power
//! ports are on only between the PoweringOn and PoweringOff transitions of
//! the owning session.

use super::ControlError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionState {
    Idle,
    PoweringOn,
    Projecting,
    Capturing,
    Collecting,
    Uploading,
    PoweringOff,
    Done,
    Failed(String),
}

impl SessionState {
    pub fn name(&self) -> &'static str {
        match self {
            SessionState::Idle => "idle",
            SessionState::PoweringOn => "powering_on",
            SessionState::Projecting => "projecting",
            SessionState::Capturing => "capturing",
            SessionState::Collecting => "collecting",
            SessionState::Uploading => "uploading",
            SessionState::PoweringOff => "powering_off",
            SessionState::Done => "done",
            SessionState::Failed(_) => "failed",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, SessionState::Done | SessionState::Failed(_))
    }

    fn order(&self) -> Option<usize> {
        Some(match self {
            SessionState::Idle => 0,
            SessionState::PoweringOn => 1,
            SessionState::Projecting => 2,
            SessionState::Capturing => 3,
            SessionState::Collecting => 4,
            SessionState::Uploading => 5,
            SessionState::PoweringOff => 6,
            SessionState::Done => 7,
            SessionState::Failed(_) => return None,
        })
    }
}

/// One scheduled scan and its transition history.
#[derive(Debug, Clone)]
pub struct CaptureSession {
    pub id: String,
    state: SessionState,
    /// `(state, t_ms)` per transition, including the initial Idle.
    pub transitions: Vec<(SessionState, u64)>,
    /// Sink-relative paths uploaded so far.
    pub artifacts: Vec<String>,
}

impl CaptureSession {
    pub fn new(id: &str, t_ms: u64) -> Self {
        Self {
            id: id.to_string(),
            state: SessionState::Idle,
            transitions: vec![(SessionState::Idle, t_ms)],
            artifacts: Vec::new(),
        }
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    /// Advance to the immediate successor state. Skipping or reordering is a
    /// programming error and is rejected.
    pub fn advance(&mut self, next: SessionState, t_ms: u64) -> Result<(), ControlError> {
        let (Some(cur), Some(nxt)) = (self.state.order(), next.order()) else {
            return Err(ControlError::Session(format!(
                "cannot advance from {} to {}",
                self.state.name(),
                next.name()
            )));
        };
        if nxt != cur + 1 {
            return Err(ControlError::Session(format!(
                "out-of-order transition {} -> {}",
                self.state.name(),
                next.name()
            )));
        }
        self.state = next.clone();
        self.transitions.push((next, t_ms));
        Ok(())
    }

    /// Mark the session failed; valid from any non-terminal state.
    pub fn fail(&mut self, reason: &str, t_ms: u64) {
        if self.state.is_terminal() {
            return;
        }
        let failed = SessionState::Failed(reason.to_string());
        self.state = failed.clone();
        self.transitions.push((failed, t_ms));
    }

    pub fn failure_reason(&self) -> Option<&str> {
        match &self.state {
            SessionState::Failed(reason) => Some(reason),
            _ => None,
        }
    }
}
