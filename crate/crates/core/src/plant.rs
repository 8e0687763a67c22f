//! Single-tank process with a PLC running proportional control, hard safety
//! bounds and a supervisory watchdog.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sim::SimTime;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlantError {
    #[error("valve command {0} outside [0, 1]")]
    InvalidCommand(f64),
    #[error("invalid plant parameters: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub level: f64,
    pub capacity: f64,
    /// Units per second at a fully open valve.
    pub inflow_rate: f64,
    /// Units per second, constant draw.
    pub outflow_rate: f64,
    pub valve: f64,
}

impl Default for PlantState {
    fn default() -> Self {
        PlantState {
            level: 5.0,
            capacity: 10.0,
            inflow_rate: 0.2,
            outflow_rate: 0.1,
            valve: 0.0,
        }
    }
}

impl PlantState {
    pub fn validate(&self) -> Result<(), PlantError> {
        let finite = [self.level, self.capacity, self.inflow_rate, self.outflow_rate]
            .iter()
            .all(|x| x.is_finite());
        if !finite || self.capacity <= 0.0 || self.inflow_rate < 0.0 || self.outflow_rate < 0.0 {
            return Err(PlantError::InvalidParams(
                "capacity must be positive and rates non-negative".into(),
            ));
        }
        if !(0.0..=self.capacity).contains(&self.level) {
            return Err(PlantError::InvalidParams(format!(
                "initial level {} outside [0, {}]",
                self.level, self.capacity
            )));
        }
        Ok(())
    }
}

/// Advance the tank by `dt` with the valve held at `valve_cmd`.
pub fn step_plant(s: &PlantState, valve_cmd: f64, dt: SimTime) -> Result<PlantState, PlantError> {
    if !(0.0..=1.0).contains(&valve_cmd) {
        return Err(PlantError::InvalidCommand(valve_cmd));
    }
    let secs = dt.as_secs_f64();
    let level = s.level + (s.inflow_rate * valve_cmd - s.outflow_rate) * secs;
    Ok(PlantState {
        level: level.clamp(0.0, s.capacity),
        valve: valve_cmd,
        ..s.clone()
    })
}

/// Sensor reading of the true level. With `noise` set to a fraction of
/// capacity, adds uniform noise in `±noise × capacity`.
pub fn sense<R: Rng>(s: &PlantState, noise: Option<f64>, rng: &mut R) -> (f64, bool) {
    match noise {
        Some(frac) if frac > 0.0 => {
            let amp = frac * s.capacity;
            (s.level + rng.random_range(-amp..=amp), true)
        }
        _ => (s.level, false),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlcMode {
    Normal,
    FailSafe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailSafeCause {
    Watchdog,
    SafetyBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlcState {
    pub setpoint: f64,
    pub mode: PlcMode,
    pub last_supervisory_at: SimTime,
    pub watchdog_window: u32,
    pub cycle_period: SimTime,
    pub safety_bounds: (f64, f64),
    pub gain: f64,
}

impl Default for PlcState {
    fn default() -> Self {
        PlcState {
            setpoint: 5.0,
            mode: PlcMode::Normal,
            last_supervisory_at: SimTime::ZERO,
            watchdog_window: 5,
            cycle_period: SimTime::from_millis(100),
            safety_bounds: (0.5, 9.5),
            gain: 0.5,
        }
    }
}

impl PlcState {
    /// Longest tolerated supervisory silence.
    pub fn silence_budget(&self) -> SimTime {
        self.cycle_period.mul(self.watchdog_window as u64)
    }
}

/// Supervisory command delivered on the actuation topic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisoryCommand {
    /// Consensus sequence number the command was decided at.
    pub seq: u64,
    pub setpoint: f64,
    #[serde(default)]
    pub watchdog_window: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WatchdogStatus {
    Healthy,
    FailSafeTriggered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PlcEvent {
    FailSafeEngaged {
        cause: FailSafeCause,
        silence: SimTime,
        reading: f64,
    },
    OperatorReset,
    CommandRejected {
        seq: u64,
        reason: String,
    },
}

/// One sample reported by the PLC each cycle; stamped by the gateway.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub level: f64,
    pub valve: f64,
    pub mode: PlcMode,
    pub setpoint: f64,
    pub sensor_noise_applied: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycleOutput {
    pub valve_cmd: f64,
    pub telemetry: Telemetry,
    pub events: Vec<PlcEvent>,
}

/// Check supervisory silence and latch fail-safe when it exceeds the window.
pub fn watchdog_check(p: &mut PlcState, now: SimTime) -> WatchdogStatus {
    if now.saturating_sub(p.last_supervisory_at) > p.silence_budget() {
        p.mode = PlcMode::FailSafe;
        WatchdogStatus::FailSafeTriggered
    } else {
        WatchdogStatus::Healthy
    }
}

/// One PLC scan: accept a fresh command (with its receipt time), enforce
/// watchdog and safety bounds, then compute the valve command. Silence is
/// measured from receipt, not from the scan that picks the command up.
pub fn plc_cycle(
    p: &mut PlcState,
    reading: f64,
    noisy: bool,
    cmd: Option<(&SupervisoryCommand, SimTime)>,
    now: SimTime,
) -> CycleOutput {
    let mut events = Vec::new();
    let (low, high) = p.safety_bounds;
    if let Some((c, received)) = cmd {
        if c.setpoint.is_finite() && (low..=high).contains(&c.setpoint) {
            p.setpoint = c.setpoint;
            p.last_supervisory_at = received.min(now);
            if let Some(w) = c.watchdog_window.filter(|w| *w > 0) {
                p.watchdog_window = w;
            }
        } else {
            events.push(PlcEvent::CommandRejected {
                seq: c.seq,
                reason: format!("setpoint {} outside safety bounds", c.setpoint),
            });
        }
    }
    let was = p.mode;
    let silence = now.saturating_sub(p.last_supervisory_at);
    let cause = if !(low..=high).contains(&reading) {
        p.mode = PlcMode::FailSafe;
        Some(FailSafeCause::SafetyBound)
    } else if watchdog_check(p, now) == WatchdogStatus::FailSafeTriggered {
        Some(FailSafeCause::Watchdog)
    } else {
        None
    };
    if was == PlcMode::Normal && p.mode == PlcMode::FailSafe {
        events.push(PlcEvent::FailSafeEngaged {
            cause: cause.expect("mode only changes with a cause"),
            silence,
            reading,
        });
    }
    let valve_cmd = match p.mode {
        PlcMode::FailSafe => 0.0,
        PlcMode::Normal => (p.gain * (p.setpoint - reading)).clamp(0.0, 1.0),
    };
    CycleOutput {
        valve_cmd,
        telemetry: Telemetry {
            level: reading,
            valve: valve_cmd,
            mode: p.mode,
            setpoint: p.setpoint,
            sensor_noise_applied: noisy,
        },
        events,
    }
}

/// Explicit operator action; the only way out of fail-safe.
pub fn operator_reset(p: &mut PlcState, now: SimTime) -> Option<PlcEvent> {
    if p.mode == PlcMode::FailSafe {
        p.mode = PlcMode::Normal;
        p.last_supervisory_at = now;
        Some(PlcEvent::OperatorReset)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tank(level: f64, inflow: f64, outflow: f64) -> PlantState {
        PlantState {
            level,
            inflow_rate: inflow,
            outflow_rate: outflow,
            ..PlantState::default()
        }
    }

    #[test]
    fn step_examples() {
        let s = step_plant(&tank(5.0, 0.2, 0.1), 1.0, SimTime::from_secs(1)).unwrap();
        assert!((s.level - 5.1).abs() < 1e-12);
        let s = step_plant(&tank(5.0, 0.2, 0.0), 0.0, SimTime::from_secs(1)).unwrap();
        assert_eq!(s.level, 5.0);
        let s = step_plant(&tank(9.99, 50.0, 0.0), 1.0, SimTime::from_secs(1)).unwrap();
        assert_eq!(s.level, s.capacity);
        assert_eq!(
            step_plant(&tank(5.0, 0.2, 0.1), 1.5, SimTime::from_secs(1)),
            Err(PlantError::InvalidCommand(1.5))
        );
    }

    #[test]
    fn zero_error_closes_valve() {
        let mut p = PlcState::default();
        let out = plc_cycle(&mut p, 5.0, false, None, SimTime::from_millis(100));
        assert_eq!(out.valve_cmd, 0.0);
    }

    #[test]
    fn reading_below_bound_fails_safe_immediately() {
        let mut p = PlcState::default();
        let out = plc_cycle(&mut p, 0.1, false, None, SimTime::from_millis(100));
        assert_eq!(p.mode, PlcMode::FailSafe);
        assert_eq!(out.valve_cmd, 0.0);
        assert!(matches!(
            out.events.as_slice(),
            [PlcEvent::FailSafeEngaged { cause: FailSafeCause::SafetyBound, .. }]
        ));
    }

    #[test]
    fn watchdog_window_examples() {
        let mut p = PlcState::default();
        p.last_supervisory_at = SimTime::from_millis(900);
        assert_eq!(watchdog_check(&mut p, SimTime::from_millis(1000)), WatchdogStatus::Healthy);
        assert_eq!(watchdog_check(&mut p, SimTime::from_millis(1400)), WatchdogStatus::Healthy);
        assert_eq!(
            watchdog_check(&mut p, SimTime::from_millis(1400) + SimTime(1)),
            WatchdogStatus::FailSafeTriggered
        );
        assert_eq!(p.mode, PlcMode::FailSafe);
    }

    /// Silence starting at t0 = last command: the first scan strictly past
    /// t0 + W×period engages fail-safe, which is at most t0 + (W+1)×period.
    #[test]
    fn silence_for_w_plus_one_cycles_engages_failsafe() {
        let mut p = PlcState::default();
        let period = p.cycle_period;
        let t0 = SimTime::from_millis(300);
        let cmd = SupervisoryCommand { seq: 1, setpoint: 5.5, watchdog_window: None };
        plc_cycle(&mut p, 5.0, false, Some((&cmd, t0)), t0);
        let mut engaged = None;
        for k in 1..=10u64 {
            let now = t0 + period.mul(k);
            let out = plc_cycle(&mut p, 5.0, false, None, now);
            if p.mode == PlcMode::FailSafe && engaged.is_none() {
                engaged = Some(now);
                assert_eq!(out.valve_cmd, 0.0);
            }
        }
        assert_eq!(engaged, Some(t0 + period.mul(6)));
    }

    #[test]
    fn failsafe_is_sticky_until_operator_reset() {
        let mut p = PlcState::default();
        plc_cycle(&mut p, 0.0, false, None, SimTime::from_millis(100));
        let cmd = SupervisoryCommand { seq: 2, setpoint: 5.0, watchdog_window: None };
        let out = plc_cycle(&mut p, 5.0, false, Some((&cmd, SimTime::from_millis(200))), SimTime::from_millis(200));
        assert_eq!(p.mode, PlcMode::FailSafe);
        assert_eq!(out.valve_cmd, 0.0);
        assert_eq!(operator_reset(&mut p, SimTime::from_millis(250)), Some(PlcEvent::OperatorReset));
        assert_eq!(p.mode, PlcMode::Normal);
    }

    #[test]
    fn out_of_bounds_setpoint_is_rejected() {
        let mut p = PlcState::default();
        let cmd = SupervisoryCommand { seq: 3, setpoint: 50.0, watchdog_window: None };
        let out = plc_cycle(&mut p, 5.0, false, Some((&cmd, SimTime::from_millis(100))), SimTime::from_millis(100));
        assert_eq!(p.setpoint, 5.0);
        assert!(matches!(out.events.as_slice(), [PlcEvent::CommandRejected { seq: 3, .. }]));
    }

    proptest! {
        #[test]
        fn level_stays_in_bounds(
            level in 0.0f64..10.0,
            inflow in 0.0f64..100.0,
            outflow in 0.0f64..100.0,
            cmds in proptest::collection::vec(0.0f64..=1.0, 1..50),
            dt_ms in 1u64..5000,
        ) {
            let mut s = tank(level, inflow, outflow);
            for c in cmds {
                s = step_plant(&s, c, SimTime::from_millis(dt_ms)).unwrap();
                prop_assert!(s.level >= 0.0 && s.level <= s.capacity);
            }
        }

        /// Whatever the supervisory traffic, a scan past the silence budget
        /// emits the fail-safe action.
        #[test]
        fn failsafe_dominates(
            readings in proptest::collection::vec(0.0f64..10.0, 1..40),
            cmd_every in proptest::option::of(1usize..10),
            setpoint in -5.0f64..15.0,
        ) {
            let mut p = PlcState::default();
            for (i, r) in readings.iter().enumerate() {
                let now = p.cycle_period.mul(i as u64 + 1);
                let cmd = cmd_every
                    .filter(|k| i % k == 0)
                    .map(|_| SupervisoryCommand { seq: i as u64, setpoint, watchdog_window: None });
                let out = plc_cycle(&mut p, *r, false, cmd.as_ref().map(|c| (c, now)), now);
                if now.saturating_sub(p.last_supervisory_at) > p.silence_budget() {
                    prop_assert_eq!(out.valve_cmd, 0.0);
                    prop_assert_eq!(p.mode, PlcMode::FailSafe);
                }
                if p.mode == PlcMode::FailSafe {
                    prop_assert_eq!(out.valve_cmd, 0.0);
                }
            }
        }
    }
}
