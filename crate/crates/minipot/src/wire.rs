//! ASCII-over-UDP control plane.
//!
//! One datagram carries one LF-terminated command; the reply is either
//! `OK [payload]` or `ERR <code> <reason>`. Values on the wire are integers
//! only — millivolts and picoamps — so replies never depend on float
//! formatting. The grammar lives in `PROTOCOL.md`.
//!
//! [`handle_datagram`] is the whole server brain and is directly callable
//! (the fuzz tests do); [`serve`] wraps it in a socket loop plus a tick
//! thread that keeps the device sampling while idle and drives protocol
//! runs started over the wire.

use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::device::{Device, DeviceError};
use crate::protocol::{parse_protocol, Pacer, ProtocolRunner, DEFAULT_SAMPLE_HZ};

/// Default UDP port of the control plane.
pub const DEFAULT_PORT: u16 = 9750;
/// Hard ceiling on datagram size, both directions.
pub const MAX_DATAGRAM: usize = 512;

pub const ERR_PARSE: u8 = 1;
pub const ERR_RANGE: u8 = 2;
pub const ERR_STATE: u8 = 3;
pub const ERR_UNSUPPORTED: u8 = 4;

/// A decoded command frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Ping,
    Info,
    Set { ch: u16, mv: i32 },
    Sw { ch: u16, closed: bool },
    GetI { ch: u16 },
    GetV { ch: u16 },
    Cal { n: u32 },
    Run { name: String },
    Stop,
}

/// Error reply: code + one-token-ish reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireError {
    pub code: u8,
    pub reason: String,
}

impl WireError {
    fn new(code: u8, reason: impl Into<String>) -> Self {
        WireError { code, reason: reason.into() }
    }
}

/// Render a command the way a client sends it (LF included).
pub fn encode(cmd: &Command) -> Vec<u8> {
    let line = match cmd {
        Command::Ping => "PING".to_string(),
        Command::Info => "INFO".to_string(),
        Command::Set { ch, mv } => format!("SET {ch} {mv}"),
        Command::Sw { ch, closed } => format!("SW {ch} {}", *closed as u8),
        Command::GetI { ch } => format!("GETI {ch}"),
        Command::GetV { ch } => format!("GETV {ch}"),
        Command::Cal { n } => format!("CAL {n}"),
        Command::Run { name } => format!("RUN {name}"),
        Command::Stop => "STOP".to_string(),
    };
    format!("{line}\n").into_bytes()
}

pub fn encode_ok(payload: Option<&str>) -> Vec<u8> {
    match payload {
        Some(p) => format!("OK {p}\n").into_bytes(),
        None => b"OK\n".to_vec(),
    }
}

pub fn encode_err(code: u8, reason: &str) -> Vec<u8> {
    format!("ERR {code} {reason}\n").into_bytes()
}

/// Decode one datagram. Total: any byte sequence maps to a command or a
/// [`WireError`], never a panic.
pub fn decode(datagram: &[u8]) -> Result<Command, WireError> {
    if datagram.len() > MAX_DATAGRAM {
        return Err(WireError::new(ERR_PARSE, "too-long"));
    }
    if !datagram.is_ascii() {
        return Err(WireError::new(ERR_PARSE, "not-ascii"));
    }
    let text = std::str::from_utf8(datagram).map_err(|_| WireError::new(ERR_PARSE, "not-ascii"))?;
    let Some(line) = text.strip_suffix('\n') else {
        return Err(WireError::new(ERR_PARSE, "missing-newline"));
    };
    let line = line.trim_end_matches('\r');
    let mut tokens = line.split_ascii_whitespace();
    let verb = tokens.next().ok_or_else(|| WireError::new(ERR_PARSE, "empty"))?;
    let mut args: Vec<&str> = tokens.collect();

    let arity = |args: &[&str], n: usize| -> Result<(), WireError> {
        if args.len() == n {
            Ok(())
        } else {
            Err(WireError::new(ERR_PARSE, "bad-arity"))
        }
    };
    let int = |s: &str| -> Result<i64, WireError> {
        s.parse::<i64>().map_err(|_| WireError::new(ERR_PARSE, "bad-int"))
    };
    let chan = |s: &str| -> Result<u16, WireError> {
        let v = int(s)?;
        if !(0..=u16::MAX as i64).contains(&v) {
            return Err(WireError::new(ERR_RANGE, "channel"));
        }
        Ok(v as u16)
    };

    let cmd = match verb {
        "PING" => {
            arity(&args, 0)?;
            Command::Ping
        }
        "INFO" => {
            arity(&args, 0)?;
            Command::Info
        }
        "SET" => {
            arity(&args, 2)?;
            let ch = chan(args[0])?;
            let mv = int(args[1])?;
            if !(i32::MIN as i64..=i32::MAX as i64).contains(&mv) {
                return Err(WireError::new(ERR_RANGE, "voltage"));
            }
            Command::Set { ch, mv: mv as i32 }
        }
        "SW" => {
            arity(&args, 2)?;
            let ch = chan(args[0])?;
            let closed = match args[1] {
                "0" => false,
                "1" => true,
                _ => return Err(WireError::new(ERR_PARSE, "bad-int")),
            };
            Command::Sw { ch, closed }
        }
        "GETI" => {
            arity(&args, 1)?;
            Command::GetI { ch: chan(args[0])? }
        }
        "GETV" => {
            arity(&args, 1)?;
            Command::GetV { ch: chan(args[0])? }
        }
        "CAL" => {
            arity(&args, 1)?;
            let n = int(args[0])?;
            if !(1..=100_000).contains(&n) {
                return Err(WireError::new(ERR_RANGE, "count"));
            }
            Command::Cal { n: n as u32 }
        }
        "RUN" => {
            arity(&args, 1)?;
            let name = args.pop().unwrap().to_string();
            if name.is_empty()
                || !name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || b == b'.')
            {
                return Err(WireError::new(ERR_PARSE, "bad-name"));
            }
            Command::Run { name }
        }
        "STOP" => {
            arity(&args, 0)?;
            Command::Stop
        }
        _ => return Err(WireError::new(ERR_UNSUPPORTED, "unsupported")),
    };
    Ok(cmd)
}

/// Everything the server owns: the device, an in-flight protocol run, and
/// where RUN looks for protocol files / writes logs.
pub struct ServerState {
    pub device: Device,
    pub runner: Option<ProtocolRunner>,
    pub protocol_dir: Option<PathBuf>,
    pub log_dir: PathBuf,
    /// When set, the tick thread pauses; lets a closed-loop harness pin the
    /// device between reading a sensor value and applying the actuation.
    pub hold_ticks: bool,
}

impl ServerState {
    pub fn new(device: Device) -> Self {
        ServerState {
            device,
            runner: None,
            protocol_dir: None,
            log_dir: std::env::temp_dir(),
            hold_ticks: false,
        }
    }

    fn busy(&self) -> bool {
        self.runner.is_some() || self.device.is_busy()
    }

    /// Close out a finished or stopped run.
    fn finish_run(&mut self) {
        self.runner = None;
        self.device.set_busy(false);
        let _ = self.device.close_log();
    }
}

fn device_err_reply(err: DeviceError) -> Vec<u8> {
    match err {
        DeviceError::Channel(_) => encode_err(ERR_RANGE, "channel"),
        DeviceError::Voltage(_) => encode_err(ERR_RANGE, "voltage"),
        DeviceError::Busy => encode_err(ERR_STATE, "busy"),
        DeviceError::Config(_) => encode_err(ERR_RANGE, "config"),
        DeviceError::Io(_) => encode_err(ERR_STATE, "io"),
    }
}

/// Apply one datagram to the server state and produce the reply bytes.
pub fn handle_datagram(state: &mut ServerState, datagram: &[u8]) -> Vec<u8> {
    let cmd = match decode(datagram) {
        Ok(cmd) => cmd,
        Err(e) => return encode_err(e.code, &e.reason),
    };
    match cmd {
        Command::Ping => encode_ok(Some("PONG")),
        Command::Info => encode_ok(Some(&state.device.info_string())),
        Command::Set { ch, mv } => {
            if state.busy() {
                return encode_err(ERR_STATE, "busy");
            }
            match state.device.set_voltage(ch as usize, mv) {
                Ok(()) => encode_ok(None),
                Err(e) => device_err_reply(e),
            }
        }
        Command::Sw { ch, closed } => {
            if state.busy() {
                return encode_err(ERR_STATE, "busy");
            }
            match state.device.set_switch(ch as usize, closed) {
                Ok(()) => encode_ok(None),
                Err(e) => device_err_reply(e),
            }
        }
        Command::GetI { ch } => match state.device.last_current_pa(ch as usize) {
            Ok(pa) => encode_ok(Some(&pa.to_string())),
            Err(e) => device_err_reply(e),
        },
        Command::GetV { ch } => match state.device.get_voltage_mv(ch as usize) {
            Ok(mv) => encode_ok(Some(&(mv.round() as i64).to_string())),
            Err(e) => device_err_reply(e),
        },
        Command::Cal { n } => {
            if state.busy() {
                return encode_err(ERR_STATE, "busy");
            }
            match state.device.calibrate(n as usize) {
                Ok(_) => encode_ok(None),
                Err(e) => device_err_reply(e),
            }
        }
        Command::Run { name } => {
            if state.busy() {
                return encode_err(ERR_STATE, "busy");
            }
            let Some(dir) = state.protocol_dir.clone() else {
                return encode_err(ERR_UNSUPPORTED, "no-protocol-dir");
            };
            let file = if name.ends_with(".csv") { name.clone() } else { format!("{name}.csv") };
            let path = dir.join(&file);
            let text = match std::fs::read_to_string(&path) {
                Ok(t) => t,
                Err(_) => return encode_err(ERR_RANGE, "unknown-protocol"),
            };
            let stem = file.trim_end_matches(".csv");
            let protocol = match parse_protocol(&text, stem) {
                Ok(p) => p,
                Err(_) => return encode_err(ERR_RANGE, "bad-protocol"),
            };
            let log_path = state.log_dir.join(format!("run_{stem}.csv"));
            if state.device.open_log(&log_path).is_err() {
                return encode_err(ERR_STATE, "io");
            }
            state.device.log_note(&format!(
                "protocol {} rate_hz={}",
                protocol.name, protocol.sample_rate_hz
            ));
            match ProtocolRunner::start(protocol, &mut state.device) {
                Ok(runner) => {
                    state.device.set_busy(true);
                    state.runner = Some(runner);
                    encode_ok(None)
                }
                Err(_) => {
                    let _ = state.device.close_log();
                    encode_err(ERR_RANGE, "bad-protocol")
                }
            }
        }
        Command::Stop => {
            if state.runner.is_some() {
                state.finish_run();
            }
            encode_ok(None)
        }
    }
}

/// A running server; dropping it does not stop the threads — call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    addr: SocketAddr,
    state: Arc<Mutex<ServerState>>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    /// Actual bound address (useful with port 0).
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Shared state, for in-process sensors and tests.
    pub fn state(&self) -> Arc<Mutex<ServerState>> {
        Arc::clone(&self.state)
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads {
            let _ = t.join();
        }
    }
}

/// Bind `addr` and serve the device until shutdown. The tick thread keeps
/// sampling while idle (so GETI stays live) and paces by the device's time
/// mode; wire commands are applied between ticks.
pub fn serve<A: ToSocketAddrs>(
    device: Device,
    addr: A,
    protocol_dir: Option<PathBuf>,
    log_dir: Option<PathBuf>,
) -> io::Result<ServerHandle> {
    let sock = UdpSocket::bind(addr)?;
    sock.set_read_timeout(Some(Duration::from_millis(20)))?;
    let bound = sock.local_addr()?;
    let time_mode = device.config().time_mode;
    let mut state = ServerState::new(device);
    state.protocol_dir = protocol_dir;
    if let Some(dir) = log_dir {
        state.log_dir = dir;
    }
    let state = Arc::new(Mutex::new(state));
    let stop = Arc::new(AtomicBool::new(false));

    let rx_state = Arc::clone(&state);
    let rx_stop = Arc::clone(&stop);
    let rx = std::thread::spawn(move || {
        let mut buf = [0u8; 2 * MAX_DATAGRAM];
        while !rx_stop.load(Ordering::Relaxed) {
            match sock.recv_from(&mut buf) {
                Ok((n, peer)) => {
                    let reply = {
                        let mut st = rx_state.lock().expect("server state poisoned");
                        handle_datagram(&mut st, &buf[..n])
                    };
                    let _ = sock.send_to(&reply, peer);
                }
                Err(e)
                    if e.kind() == io::ErrorKind::WouldBlock
                        || e.kind() == io::ErrorKind::TimedOut => {}
                Err(_) => break,
            }
        }
    });

    let tick_state = Arc::clone(&state);
    let tick_stop = Arc::clone(&stop);
    let tick = std::thread::spawn(move || {
        let mut pacer = Pacer::new(time_mode);
        let mut run_active = false;
        while !tick_stop.load(Ordering::Relaxed) {
            let (paced_t, idle) = {
                let mut st = tick_state.lock().expect("server state poisoned");
                if st.hold_ticks {
                    (None, true)
                } else if let Some(mut runner) = st.runner.take() {
                    if !run_active {
                        // Fresh run: re-anchor pacing at its t = 0.
                        pacer = Pacer::new(time_mode);
                        run_active = true;
                    }
                    let dt = runner.dt();
                    st.device.sample_all(dt);
                    let t = st.device.time_s();
                    runner.advance_to(&mut st.device, t);
                    if runner.finished() {
                        st.runner = Some(runner);
                        st.finish_run();
                        run_active = false;
                    } else {
                        st.runner = Some(runner);
                    }
                    (Some(t), false)
                } else {
                    run_active = false;
                    let dt = 1.0 / DEFAULT_SAMPLE_HZ;
                    st.device.sample_all(dt);
                    (Some(st.device.time_s()), true)
                }
            };
            match (paced_t, idle) {
                (Some(t), false) => pacer.pace(t),
                _ => {
                    // Idle and held ticks burn no CPU; sim time still
                    // advances 15 Hz-per-wall-ms when unpaced.
                    std::thread::sleep(Duration::from_micros(200));
                }
            }
        }
    });

    Ok(ServerHandle { addr: bound, state, stop, threads: vec![rx, tick] })
}
