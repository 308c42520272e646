//! Closed-loop control of the fluorescence proxy.
//!
//! A PI controller (output and integral both clamped to the same band,
//! classic anti-windup) reads an intensity in [0,1] from an
//! [`IntensitySource`] every control period and commands a drive voltage
//! through the wire client. Intensity sources come in two flavors: the
//! in-process twin proxy, and a file tail (one decimal per line) so an
//! external sensor can be piped in.
//!
//! Sign convention: the controller output `u` is in volts of *corrective
//! effort*; the applied electrode drive is `-u`, because a negative drive
//! pumps ions out of the well and raises fluorescence. The trace records
//! the millivolts actually sent, so a trace alone is enough to replay the
//! run.

use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::client::{Client, ClientError};
use crate::device::{Device, DeviceError};
use crate::wire::ServerState;

/// Column header of the trace CSV.
pub const TRACE_HEADER: &str = "t_s,target,measured,u_mV";
/// Default control period, seconds (a 0.5 Hz sensor).
pub const DEFAULT_PERIOD_S: f64 = 2.0;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("control loop timed out")]
    Timeout,
    #[error(transparent)]
    Client(ClientError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("sensor: {0}")]
    Sensor(String),
    #[error("trace: {0}")]
    Trace(String),
}

impl From<ClientError> for LoopError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Timeout => LoopError::Timeout,
            other => LoopError::Client(other),
        }
    }
}

/// PI controller state. Gains default-tuned on the shipped ion-pump bank:
/// proportional pull with a ~30 s closed-loop time constant, slow integral
/// to absorb the steady leak-compensation drive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerState {
    /// Volts per unit intensity error.
    pub kp: f64,
    /// Volts per (unit intensity error · second), accumulated.
    pub ki: f64,
    /// Integral term, volts; clamped to [u_min, u_max].
    pub integral: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for ControllerState {
    fn default() -> Self {
        ControllerState { kp: 20.0, ki: 0.05, integral: 0.0, u_min: -1.4, u_max: 1.4 }
    }
}

/// One PI update: `e = target - measured`, integral and output clamped to
/// the controller band. Returns the output in volts.
pub fn control_step(state: &mut ControllerState, target: f64, measured: f64, dt: f64) -> f64 {
    debug_assert!(dt > 0.0);
    let e = target - measured;
    state.integral = (state.integral + state.ki * e * dt).clamp(state.u_min, state.u_max);
    (state.kp * e + state.integral).clamp(state.u_min, state.u_max)
}

/// Where intensity readings come from. `read` blocks until the next sample
/// is available and returns it with its timestamp in seconds.
pub trait IntensitySource {
    fn read(&mut self) -> Result<(f64, f64), LoopError>;

    /// Called once the corresponding actuation has been applied; sources
    /// that gate simulation time use it to let the clock move again.
    fn actuated(&mut self) {}

    /// Nominal spacing between readings, seconds.
    fn period_s(&self) -> f64 {
        DEFAULT_PERIOD_S
    }
}

/// Samples the fluorescence proxy of a channel on an in-process server.
///
/// Between `read` and `actuated` the server's tick thread is held, so the
/// drive command always lands before the next simulation step — which is
/// what makes traces exactly replayable.
pub struct TwinSensor {
    state: Arc<Mutex<ServerState>>,
    channel: usize,
    period_s: f64,
    next_t: f64,
    wall_timeout: Duration,
}

impl TwinSensor {
    pub fn new(state: Arc<Mutex<ServerState>>, channel: usize, period_s: f64) -> Self {
        assert!(period_s > 0.0, "control period must be positive");
        TwinSensor {
            state,
            channel,
            period_s,
            next_t: 0.0,
            wall_timeout: Duration::from_secs(30),
        }
    }
}

impl IntensitySource for TwinSensor {
    fn period_s(&self) -> f64 {
        self.period_s
    }

    fn read(&mut self) -> Result<(f64, f64), LoopError> {
        let deadline = Instant::now() + self.wall_timeout;
        loop {
            {
                let mut st = self.state.lock().expect("server state poisoned");
                let t = st.device.time_s();
                if t >= self.next_t {
                    let intensity = st
                        .device
                        .fluorescence(self.channel)?
                        .ok_or_else(|| {
                            LoopError::Sensor(format!(
                                "channel {} has no fluorescence proxy",
                                self.channel
                            ))
                        })?;
                    st.hold_ticks = true;
                    self.next_t = t + self.period_s;
                    return Ok((t, intensity));
                }
            }
            if Instant::now() > deadline {
                return Err(LoopError::Timeout);
            }
            std::thread::sleep(Duration::from_micros(100));
        }
    }

    fn actuated(&mut self) {
        let mut st = self.state.lock().expect("server state poisoned");
        st.hold_ticks = false;
    }
}

/// Tails a text file of intensities, one decimal per LF line; sample `n`
/// gets timestamp `n * period_s`. Lets a real microscope (or anything that
/// can append to a file) close the loop.
pub struct FileTailSensor {
    path: PathBuf,
    pos: u64,
    pending: String,
    n: u64,
    period_s: f64,
    poll: Duration,
    wall_timeout: Duration,
}

impl FileTailSensor {
    pub fn new(path: &Path, period_s: f64) -> Self {
        assert!(period_s > 0.0, "control period must be positive");
        FileTailSensor {
            path: path.to_path_buf(),
            pos: 0,
            pending: String::new(),
            n: 0,
            period_s,
            poll: Duration::from_millis(10),
            wall_timeout: Duration::from_secs(10),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.wall_timeout = timeout;
        self
    }

    /// Pull newly appended bytes into the pending buffer.
    fn refill(&mut self) -> Result<(), LoopError> {
        let mut f = match std::fs::File::open(&self.path) {
            Ok(f) => f,
            // Not created yet: treat as "no data yet".
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        f.seek(SeekFrom::Start(self.pos))?;
        let mut chunk = String::new();
        f.read_to_string(&mut chunk)?;
        self.pos += chunk.len() as u64;
        self.pending.push_str(&chunk);
        Ok(())
    }
}

impl IntensitySource for FileTailSensor {
    fn period_s(&self) -> f64 {
        self.period_s
    }

    fn read(&mut self) -> Result<(f64, f64), LoopError> {
        let deadline = Instant::now() + self.wall_timeout;
        loop {
            self.refill()?;
            while let Some(idx) = self.pending.find('\n') {
                let line: String = self.pending.drain(..=idx).collect();
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let intensity: f64 = line
                    .parse()
                    .map_err(|_| LoopError::Sensor(format!("bad intensity line `{line}`")))?;
                let t = self.n as f64 * self.period_s;
                self.n += 1;
                return Ok((t, intensity));
            }
            if Instant::now() > deadline {
                return Err(LoopError::Timeout);
            }
            std::thread::sleep(self.poll);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t_s: f64,
    pub target: f64,
    pub measured: f64,
    pub u_mv: i32,
}

/// Drive the fluorescence of `channel` along `target_fn` for `duration_s`
/// simulated seconds, sending drive updates through `client` every sensor
/// period. Trace rows stream to `trace_out` (flushed per row, so aborts
/// leave a usable partial trace).
pub fn run_closed_loop<F, S, W>(
    client: &Client,
    channel: u16,
    target_fn: F,
    duration_s: f64,
    sensor: &mut S,
    controller: &mut ControllerState,
    trace_out: &mut W,
) -> Result<u64, LoopError>
where
    F: Fn(f64) -> f64,
    S: IntensitySource,
    W: Write,
{
    writeln!(trace_out, "{TRACE_HEADER}")?;
    trace_out.flush()?;
    let mut rows = 0u64;
    let mut prev_t: Option<f64> = None;
    loop {
        let (t, measured) = sensor.read()?;
        if t > duration_s {
            sensor.actuated();
            break;
        }
        let target = target_fn(t).clamp(0.0, 1.0);
        let dt = (t - prev_t.unwrap_or(t - sensor.period_s())).max(1e-9);
        let u = control_step(controller, target, measured, dt);
        // Negative drive raises fluorescence; see module docs.
        let mv = (-u * 1000.0).round() as i32;
        let sent = client
            .set_voltage_mv(channel, mv)
            .and_then(|_| client.set_switch(channel, true));
        sensor.actuated();
        if let Err(e) = sent {
            trace_out.flush()?;
            return Err(e.into());
        }
        // Full-precision floats so the trace round-trips bit-exactly.
        writeln!(trace_out, "{t},{target},{measured},{mv}")?;
        trace_out.flush()?;
        rows += 1;
        prev_t = Some(t);
    }
    trace_out.flush()?;
    Ok(rows)
}

/// Parse a trace CSV back into rows.
pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>, LoopError> {
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (lineno0, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r').trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != TRACE_HEADER {
                return Err(LoopError::Trace(format!("expected header `{TRACE_HEADER}`")));
            }
            saw_header = true;
            continue;
        }
        let lineno = lineno0 + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(LoopError::Trace(format!("line {lineno}: expected 4 fields")));
        }
        let num = |s: &str| -> Result<f64, LoopError> {
            s.parse().map_err(|_| LoopError::Trace(format!("line {lineno}: bad number `{s}`")))
        };
        rows.push(TraceRow {
            t_s: num(fields[0])?,
            target: num(fields[1])?,
            measured: num(fields[2])?,
            u_mv: fields[3]
                .parse()
                .map_err(|_| LoopError::Trace(format!("line {lineno}: bad mV `{}`", fields[3])))?,
        });
    }
    if !saw_header {
        return Err(LoopError::Trace("missing header".into()));
    }
    Ok(rows)
}

/// Re-run the drive sequence of a trace against a fresh device and return
/// the fluorescence series observed at the same tick times. With the same
/// cell bank the result equals the trace's `measured` column exactly —
/// fluorescence dynamics are noise-free, so this holds in any mode.
pub fn replay_trace(
    device: &mut Device,
    channel: usize,
    rows: &[TraceRow],
    sample_hz: f64,
) -> Result<Vec<f64>, LoopError> {
    assert!(sample_hz > 0.0, "sample rate must be positive");
    let dt = 1.0 / sample_hz;
    let mut ticks = 0u64;
    let mut measured = Vec::with_capacity(rows.len());
    for row in rows {
        let due = (row.t_s / dt).round() as u64;
        while ticks < due {
            device.sample_all(dt);
            ticks += 1;
        }
        measured.push(device.fluorescence(channel)?.ok_or_else(|| {
            LoopError::Sensor(format!("channel {channel} has no fluorescence proxy"))
        })?);
        device.set_voltage(channel, row.u_mv)?;
        device.set_switch(channel, true)?;
    }
    Ok(measured)
}
