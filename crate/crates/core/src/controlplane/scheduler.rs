//! Scan scheduling: on demand, fixed interval, or daily at a time of day.

use std::time::Duration;

use chrono::{NaiveDateTime, NaiveTime};

use super::ControlError;

/// How long an idle (on-demand or disabled) scheduler sleeps between checks.
pub const IDLE_WAIT: Duration = Duration::from_secs(3600);

pub const MIN_INTERVAL_SECS: u64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    OnDemand,
    Interval(Duration),
    Daily(NaiveTime),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub mode: ScheduleMode,
    pub enabled: bool,
}

impl Schedule {
    pub fn on_demand() -> Self {
        Self {
            mode: ScheduleMode::OnDemand,
            enabled: true,
        }
    }

    pub fn interval(secs: u64) -> Result<Self, ControlError> {
        if secs < MIN_INTERVAL_SECS {
            return Err(ControlError::IntervalTooShort(secs));
        }
        Ok(Self {
            mode: ScheduleMode::Interval(Duration::from_secs(secs)),
            enabled: true,
        })
    }

    pub fn daily(time: NaiveTime) -> Self {
        Self {
            mode: ScheduleMode::Daily(time),
            enabled: true,
        }
    }

    /// Parse `on-demand`, `interval:<secs>`, or `daily:<HH:MM>`.
    pub fn parse(s: &str) -> Result<Self, ControlError> {
        let bad = || ControlError::BadSchedule(s.to_string());
        if s == "on-demand" {
            return Ok(Self::on_demand());
        }
        if let Some(rest) = s.strip_prefix("interval:") {
            let secs = rest.parse().map_err(|_| bad())?;
            return Self::interval(secs);
        }
        if let Some(rest) = s.strip_prefix("daily:") {
            let time = NaiveTime::parse_from_str(rest, "%H:%M").map_err(|_| bad())?;
            return Ok(Self::daily(time));
        }
        Err(bad())
    }
}

/// Scheduler decision for one tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickDecision {
    Trigger,
    Wait(Duration),
}

/// Pure scheduling decision.
///
/// Interval mode triggers once `now - last_run >= interval` (boundary
/// inclusive). Daily mode triggers at the first tick at or past the time of
/// day that has not yet run that day. On-demand (and disabled) schedules
/// never trigger on their own.
pub fn scheduler_tick(
    now: NaiveDateTime,
    schedule: &Schedule,
    last_run: Option<NaiveDateTime>,
) -> TickDecision {
    if !schedule.enabled {
        return TickDecision::Wait(IDLE_WAIT);
    }
    match schedule.mode {
        ScheduleMode::OnDemand => TickDecision::Wait(IDLE_WAIT),
        ScheduleMode::Interval(interval) => {
            let Some(last) = last_run else {
                return TickDecision::Trigger;
            };
            let elapsed = (now - last).to_std().unwrap_or(Duration::ZERO);
            if elapsed >= interval {
                TickDecision::Trigger
            } else {
                TickDecision::Wait(interval - elapsed)
            }
        }
        ScheduleMode::Daily(tod) => {
            let due_today = now.time() >= tod;
            let ran_today = last_run.is_some_and(|last| {
                last.date() == now.date() && last.time() >= tod
            });
            if due_today && !ran_today {
                return TickDecision::Trigger;
            }
            let next = if due_today {
                (now.date() + chrono::Days::new(1)).and_time(tod)
            } else {
                now.date().and_time(tod)
            };
            let wait = (next - now).to_std().unwrap_or(Duration::ZERO);
            TickDecision::Wait(wait)
        }
    }
}

/// Seconds until the next poll for a decision (used by the CLI loop).
pub fn wait_hint(decision: TickDecision) -> Duration {
    match decision {
        TickDecision::Trigger => Duration::ZERO,
        TickDecision::Wait(d) => d.min(IDLE_WAIT).max(Duration::from_millis(50)),
    }
}
