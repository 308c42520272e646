//! Standalone protocol engine: parses CSV schedules of HOLD/RAMP/OPEN/LOOP
//! steps and executes them tick-by-tick against a device.
//!
//! Schedule timing is exact: step boundaries live on a nominal clock built
//! from the declared durations, and state changes are applied once the
//! sampling clock passes them. A sample therefore always reflects the state
//! that was active over the interval it integrates.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::device::{Device, DeviceError, Sample, TimeMode};

/// CSV column header every protocol file must carry.
pub const PROTOCOL_HEADER: &str = "step,channel,action,v1_mV,v2_mV,duration_s,repeat";
/// Default sampling rate for protocol runs, Hz.
pub const DEFAULT_SAMPLE_HZ: f64 = 15.0;
/// Duration of switch-actuation OPEN steps emitted by the builders, s.
pub const OPEN_GAP_S: f64 = 0.001;

const MV_MIN: i32 = -4000;
const MV_MAX: i32 = 3984;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("step {step}: {reason}")]
    Validation { step: usize, reason: String },
    #[error("{0}")]
    Range(String),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("device is busy with another run")]
    Busy,
    #[error("run aborted")]
    Aborted,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Device(#[from] DeviceError),
}

/// Target of one step: a single channel or the whole bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSel {
    All,
    One(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Hold,
    Ramp,
    Open,
    Loop,
}

impl Action {
    fn as_str(&self) -> &'static str {
        match self {
            Action::Hold => "HOLD",
            Action::Ramp => "RAMP",
            Action::Open => "OPEN",
            Action::Loop => "LOOP",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolStep {
    pub index: usize,
    pub channel: ChannelSel,
    pub action: Action,
    /// HOLD level / RAMP start, mV. For LOOP: target step index.
    pub v1_mv: i32,
    /// RAMP end, mV (unused otherwise).
    pub v2_mv: i32,
    pub duration_s: f64,
    /// HOLD/RAMP/OPEN: sequential repeats. LOOP: how many times to jump back.
    pub repeat: u32,
}

#[derive(Debug, Clone)]
pub struct Protocol {
    pub name: String,
    pub steps: Vec<ProtocolStep>,
    pub sample_rate_hz: f64,
}

impl Protocol {
    /// Structural validation (step order, ranges, loop targets).
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let err = |step: usize, reason: String| Err(ProtocolError::Validation { step, reason });
        for (k, s) in self.steps.iter().enumerate() {
            if s.index != k {
                return err(k, format!("step indices must be dense from 0, found {}", s.index));
            }
            if s.repeat < 1 {
                return err(k, "repeat must be >= 1".into());
            }
            let mv_ok = |mv: i32| (MV_MIN..=MV_MAX).contains(&mv);
            match s.action {
                Action::Hold => {
                    if !mv_ok(s.v1_mv) {
                        return err(k, format!("v1 {} mV outside drive range", s.v1_mv));
                    }
                    if s.duration_s <= 0.0 {
                        return err(k, "duration must be > 0".into());
                    }
                }
                Action::Ramp => {
                    if !mv_ok(s.v1_mv) || !mv_ok(s.v2_mv) {
                        return err(k, "ramp endpoints outside drive range".into());
                    }
                    if s.duration_s <= 0.0 {
                        return err(k, "duration must be > 0".into());
                    }
                }
                Action::Open => {
                    if s.duration_s <= 0.0 {
                        return err(k, "duration must be > 0".into());
                    }
                }
                Action::Loop => {
                    if s.v1_mv < 0 || s.v1_mv as usize >= k {
                        return err(k, format!("loop target {} must precede step {k}", s.v1_mv));
                    }
                }
            }
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(ProtocolError::Range(format!(
                "sample rate {} Hz must be positive",
                self.sample_rate_hz
            )));
        }
        Ok(())
    }

    /// Check channel references against a device size.
    pub fn validate_for(&self, n_channels: usize) -> Result<(), ProtocolError> {
        for (k, s) in self.steps.iter().enumerate() {
            if let ChannelSel::One(ch) = s.channel {
                if ch as usize >= n_channels {
                    return Err(ProtocolError::Validation {
                        step: k,
                        reason: format!("channel {ch} outside 0..{n_channels}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Render back to the CSV schema (inverse of [`parse_protocol`]).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{PROTOCOL_HEADER}");
        for s in &self.steps {
            let ch = match s.channel {
                ChannelSel::All => "ALL".to_string(),
                ChannelSel::One(c) => c.to_string(),
            };
            let v2 = if s.action == Action::Ramp { s.v2_mv.to_string() } else { String::new() };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.index,
                ch,
                s.action.as_str(),
                s.v1_mv,
                v2,
                s.duration_s,
                s.repeat
            );
        }
        out
    }

    /// Total scheduled duration of one pass, loops included, seconds.
    pub fn scheduled_duration_s(&self) -> f64 {
        // Walk the control flow with a bounded budget; validated protocols
        // always terminate (loop counters are finite).
        let mut total = 0.0;
        let mut pc = 0usize;
        let mut loops: Vec<Option<u32>> = vec![None; self.steps.len()];
        let mut reps: Option<u32> = None;
        while pc < self.steps.len() {
            let s = &self.steps[pc];
            if s.action == Action::Loop {
                let left = loops[pc].get_or_insert(s.repeat);
                if *left > 0 {
                    *left -= 1;
                    pc = s.v1_mv as usize;
                } else {
                    loops[pc] = None;
                    pc += 1;
                }
                reps = None;
                continue;
            }
            let r = reps.take().unwrap_or(s.repeat);
            total += s.duration_s * r as f64;
            pc += 1;
        }
        total
    }
}

/// Parse a protocol CSV (LF or CRLF, `#` comment lines allowed).
pub fn parse_protocol(text: &str, name: &str) -> Result<Protocol, ProtocolError> {
    let perr = |line: usize, reason: String| ProtocolError::Parse { line, reason };
    let mut steps = Vec::new();
    let mut saw_header = false;
    for (lineno0, raw) in text.lines().enumerate() {
        let lineno = lineno0 + 1;
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != PROTOCOL_HEADER {
                return Err(perr(lineno, format!("expected header `{PROTOCOL_HEADER}`")));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(perr(lineno, format!("expected 7 fields, found {}", fields.len())));
        }
        let int = |s: &str, what: &str| -> Result<i32, ProtocolError> {
            s.parse::<i32>().map_err(|_| perr(lineno, format!("bad integer {what}: `{s}`")))
        };
        let index = int(fields[0], "step")? as usize;
        let channel = if fields[1].eq_ignore_ascii_case("ALL") {
            ChannelSel::All
        } else {
            let ch = int(fields[1], "channel")?;
            if ch < 0 {
                return Err(perr(lineno, format!("negative channel {ch}")));
            }
            ChannelSel::One(ch as u16)
        };
        let action = match fields[2] {
            "HOLD" => Action::Hold,
            "RAMP" => Action::Ramp,
            "OPEN" => Action::Open,
            "LOOP" => Action::Loop,
            other => return Err(perr(lineno, format!("unknown action `{other}`"))),
        };
        let v1_mv = int(fields[3], "v1_mV")?;
        let v2_mv = if fields[4].is_empty() { 0 } else { int(fields[4], "v2_mV")? };
        let duration_s = if fields[5].is_empty() {
            0.0
        } else {
            fields[5]
                .parse::<f64>()
                .map_err(|_| perr(lineno, format!("bad number duration_s: `{}`", fields[5])))?
        };
        let repeat = if fields[6].is_empty() {
            1
        } else {
            let r = int(fields[6], "repeat")?;
            if r < 0 {
                return Err(perr(lineno, format!("negative repeat {r}")));
            }
            r as u32
        };
        steps.push(ProtocolStep { index, channel, action, v1_mv, v2_mv, duration_s, repeat });
    }
    if !saw_header {
        return Err(perr(1, format!("missing header `{PROTOCOL_HEADER}`")));
    }
    let protocol =
        Protocol { name: name.to_string(), steps, sample_rate_hz: DEFAULT_SAMPLE_HZ };
    protocol.validate()?;
    Ok(protocol)
}

/// Triangular-sweep builder: one cycle ramps `v_lo -> v_hi -> v_lo` at
/// `rate_mv_per_s`; extra cycles loop back over the same pair.
pub fn make_cv(
    channel: u16,
    v_lo_mv: i32,
    v_hi_mv: i32,
    rate_mv_per_s: f64,
    cycles: u32,
) -> Result<Protocol, ProtocolError> {
    if v_lo_mv >= v_hi_mv {
        return Err(ProtocolError::Range(format!(
            "sweep bounds inverted: {v_lo_mv} >= {v_hi_mv}"
        )));
    }
    if !(MV_MIN..=MV_MAX).contains(&v_lo_mv) || !(MV_MIN..=MV_MAX).contains(&v_hi_mv) {
        return Err(ProtocolError::Range("sweep bounds outside drive range".into()));
    }
    if !(rate_mv_per_s > 0.0) {
        return Err(ProtocolError::Range(format!("scan rate {rate_mv_per_s} must be positive")));
    }
    if cycles < 1 {
        return Err(ProtocolError::Range("cycle count must be >= 1".into()));
    }
    let dur = (v_hi_mv - v_lo_mv) as f64 / rate_mv_per_s;
    let mut steps = vec![
        ProtocolStep {
            index: 0,
            channel: ChannelSel::One(channel),
            action: Action::Ramp,
            v1_mv: v_lo_mv,
            v2_mv: v_hi_mv,
            duration_s: dur,
            repeat: 1,
        },
        ProtocolStep {
            index: 1,
            channel: ChannelSel::One(channel),
            action: Action::Ramp,
            v1_mv: v_hi_mv,
            v2_mv: v_lo_mv,
            duration_s: dur,
            repeat: 1,
        },
    ];
    if cycles > 1 {
        steps.push(ProtocolStep {
            index: 2,
            channel: ChannelSel::All,
            action: Action::Loop,
            v1_mv: 0,
            v2_mv: 0,
            duration_s: 0.0,
            repeat: cycles - 1,
        });
    }
    let protocol = Protocol {
        name: format!("cv_{rate_mv_per_s}"),
        steps,
        sample_rate_hz: DEFAULT_SAMPLE_HZ,
    };
    protocol.validate()?;
    Ok(protocol)
}

/// Sequential square-wave electrode cycling: every listed channel (unless
/// skipped) holds `+amp` then `-amp` for half a period each and is then
/// disconnected; everything else stays open-circuit throughout.
pub fn make_electrode_cycle(
    channels: &[u16],
    amp_mv: i32,
    period_s: f64,
    skip: &[u16],
) -> Result<Protocol, ProtocolError> {
    if channels.is_empty() {
        return Err(ProtocolError::Range("electrode list is empty".into()));
    }
    if !(period_s > 0.0) {
        return Err(ProtocolError::Range(format!("period {period_s} must be positive")));
    }
    if !(MV_MIN..=MV_MAX).contains(&amp_mv) || !(MV_MIN..=MV_MAX).contains(&-amp_mv) {
        return Err(ProtocolError::Range(format!("amplitude {amp_mv} mV outside drive range")));
    }
    let active: Vec<u16> =
        channels.iter().copied().filter(|ch| !skip.contains(ch)).collect();
    if active.is_empty() {
        return Err(ProtocolError::Validation {
            step: 0,
            reason: "no active electrode (all skipped)".into(),
        });
    }
    let mut steps = vec![ProtocolStep {
        index: 0,
        channel: ChannelSel::All,
        action: Action::Open,
        v1_mv: 0,
        v2_mv: 0,
        duration_s: OPEN_GAP_S,
        repeat: 1,
    }];
    for ch in active {
        let half = period_s / 2.0;
        for v in [amp_mv, -amp_mv] {
            steps.push(ProtocolStep {
                index: steps.len(),
                channel: ChannelSel::One(ch),
                action: Action::Hold,
                v1_mv: v,
                v2_mv: 0,
                duration_s: half,
                repeat: 1,
            });
        }
        steps.push(ProtocolStep {
            index: steps.len(),
            channel: ChannelSel::One(ch),
            action: Action::Open,
            v1_mv: 0,
            v2_mv: 0,
            duration_s: OPEN_GAP_S,
            repeat: 1,
        });
    }
    let protocol = Protocol {
        name: "electrode_cycle".to_string(),
        steps,
        sample_rate_hz: DEFAULT_SAMPLE_HZ,
    };
    protocol.validate()?;
    Ok(protocol)
}

/// Tick-stepped executor of one protocol. `serve` drives it from its tick
/// thread; [`run_protocol`] wraps it in a plain loop.
pub struct ProtocolRunner {
    protocol: Protocol,
    pc: usize,
    reps_left: u32,
    /// Nominal start time of the current step iteration (exact schedule).
    step_start: f64,
    loops_left: Vec<Option<u32>>,
    finished: bool,
}

impl ProtocolRunner {
    /// Validates the protocol against the device and applies the first
    /// step's state at t = 0.
    pub fn start(protocol: Protocol, device: &mut Device) -> Result<Self, RunError> {
        protocol.validate()?;
        protocol.validate_for(device.n_channels())?;
        let n = protocol.steps.len();
        let mut runner = ProtocolRunner {
            protocol,
            pc: 0,
            reps_left: 1,
            step_start: 0.0,
            loops_left: vec![None; n],
            finished: n == 0,
        };
        if !runner.finished {
            runner.reps_left = runner.protocol.steps[0].repeat;
            runner.enter_current(device);
            // Resolve any leading zero-duration control flow.
            runner.advance_to(device, 0.0);
        }
        Ok(runner)
    }

    pub fn finished(&self) -> bool {
        self.finished
    }

    pub fn protocol(&self) -> &Protocol {
        &self.protocol
    }

    /// Sampling interval the protocol asks for.
    pub fn dt(&self) -> f64 {
        1.0 / self.protocol.sample_rate_hz
    }

    fn channels(&self, sel: ChannelSel, device: &Device) -> Vec<usize> {
        match sel {
            ChannelSel::All => (0..device.n_channels()).collect(),
            ChannelSel::One(ch) => vec![ch as usize],
        }
    }

    fn enter_current(&mut self, device: &mut Device) {
        let step = self.protocol.steps[self.pc].clone();
        match step.action {
            Action::Hold | Action::Ramp => {
                for ch in self.channels(step.channel, device) {
                    device.set_voltage(ch, step.v1_mv).expect("validated step");
                    device.set_switch(ch, true).expect("validated step");
                }
            }
            Action::Open => {
                for ch in self.channels(step.channel, device) {
                    device.set_switch(ch, false).expect("validated step");
                }
            }
            Action::Loop => {}
        }
    }

    fn update_ramp(&mut self, device: &mut Device, t: f64) {
        let step = self.protocol.steps[self.pc].clone();
        let frac = ((t - self.step_start) / step.duration_s).clamp(0.0, 1.0);
        let mv = (step.v1_mv as f64 + (step.v2_mv - step.v1_mv) as f64 * frac).round() as i32;
        for ch in self.channels(step.channel, device) {
            if device.set_mv(ch).expect("validated step") != mv {
                device.set_voltage(ch, mv).expect("validated step");
            }
        }
    }

    /// Apply every state change scheduled at or before `t`. Call after
    /// sampling a tick so readings reflect the state that was active over
    /// the sampled interval.
    pub fn advance_to(&mut self, device: &mut Device, t: f64) {
        while !self.finished {
            let (action, duration, repeat, loop_target) = {
                let s = &self.protocol.steps[self.pc];
                (s.action, s.duration_s, s.repeat, s.v1_mv as usize)
            };
            if action == Action::Loop {
                let left = self.loops_left[self.pc].get_or_insert(repeat);
                if *left > 0 {
                    *left -= 1;
                    self.pc = loop_target;
                    self.reps_left = self.protocol.steps[self.pc].repeat;
                    self.enter_current(device);
                } else {
                    self.loops_left[self.pc] = None;
                    self.step_to(self.pc + 1, device);
                }
                continue;
            }
            let end = self.step_start + duration;
            if end > t {
                if action == Action::Ramp {
                    self.update_ramp(device, t);
                }
                return;
            }
            // Current iteration completed at `end`.
            if action == Action::Ramp {
                self.update_ramp(device, end);
            }
            self.step_start = end;
            if self.reps_left > 1 {
                self.reps_left -= 1;
                self.enter_current(device);
            } else {
                self.step_to(self.pc + 1, device);
            }
        }
    }

    fn step_to(&mut self, pc: usize, device: &mut Device) {
        if pc >= self.protocol.steps.len() {
            self.finished = true;
            return;
        }
        self.pc = pc;
        self.reps_left = self.protocol.steps[pc].repeat;
        if self.protocol.steps[pc].action != Action::Loop {
            self.enter_current(device);
        }
    }
}

/// Wall-clock pacing helper for realtime and throttled-accelerated modes.
pub struct Pacer {
    start: Instant,
    mode: TimeMode,
}

impl Pacer {
    pub fn new(mode: TimeMode) -> Self {
        Pacer { start: Instant::now(), mode }
    }

    /// Sleep until the wall clock catches up with `sim_elapsed` seconds.
    pub fn pace(&self, sim_elapsed: f64) {
        let target = match self.mode {
            TimeMode::Realtime => sim_elapsed,
            TimeMode::Accelerated { factor } => {
                if factor.is_finite() && factor > 0.0 {
                    sim_elapsed / factor
                } else {
                    return;
                }
            }
        };
        let due = self.start + Duration::from_secs_f64(target);
        let now = Instant::now();
        if due > now {
            std::thread::sleep(due - now);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub ticks: u64,
    pub duration_s: f64,
}

/// Execute a protocol to completion on `device`, sampling at the protocol's
/// rate. The caller owns the log (open it before, close it after); an abort
/// flag flips the run into a clean flush-and-return.
///
/// `observer` sees every sampled batch together with the device state it
/// was taken from (fluorescence proxies etc.).
pub fn run_protocol<F>(
    device: &mut Device,
    protocol: &Protocol,
    abort: Option<&AtomicBool>,
    mut observer: F,
) -> Result<RunSummary, RunError>
where
    F: FnMut(&Device, &[Sample]),
{
    if device.is_busy() {
        return Err(RunError::Busy);
    }
    device.log_note(&format!(
        "protocol {} rate_hz={}",
        protocol.name, protocol.sample_rate_hz
    ));
    device.set_busy(true);
    let result = (|| {
        let mut runner = ProtocolRunner::start(protocol.clone(), device)?;
        let dt = runner.dt();
        let pacer = Pacer::new(device.config().time_mode);
        let mut ticks = 0u64;
        while !runner.finished() {
            if abort.map(|f| f.load(Ordering::Relaxed)).unwrap_or(false) {
                device.flush_log()?;
                return Err(RunError::Aborted);
            }
            let batch = device.sample_all(dt);
            observer(device, &batch);
            let t = device.time_s();
            runner.advance_to(device, t);
            ticks += 1;
            pacer.pace(device.time_s());
        }
        device.flush_log()?;
        Ok(RunSummary { ticks, duration_s: device.time_s() })
    })();
    device.set_busy(false);
    result
}
