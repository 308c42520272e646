//! The virtual instrument: stacked channel banks, calibration, the sampling
//! scheduler and the CSV run log.
//!
//! One `Device` owns up to 8 boards of 8 channels. A board shares one
//! sampling budget (860 S/s), so a full-bank scan tick advances every
//! channel by `channels_per_board / sample_rate` seconds.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::cell::Cell;
use crate::signal_chain::{chain_step, FilterState, SignalChainParams};

/// Channels on one stackable board.
pub const CHANNELS_PER_BOARD: u32 = 8;
/// Version string reported by INFO and stamped into log headers.
pub const FIRMWARE: &str = "minipot-fw/0.3.0";
/// Advertised safe drive rating, uA (the measurement window is +/-1650 nA).
pub const MAX_DRIVE_UA: f64 = 1.5;

#[derive(Debug, Error)]
pub enum DeviceError {
    #[error("invalid device config: {0}")]
    Config(String),
    #[error("channel {0} out of range")]
    Channel(usize),
    #[error("voltage {0} mV outside -4000..=3984 mV")]
    Voltage(i32),
    #[error("device is busy running a protocol")]
    Busy,
    #[error("log i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Measurement fidelity of the twin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// No noise, no offsets beyond what tests inject.
    Ideal,
    /// Gaussian amplifier noise at the configured sigma.
    Noisy,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Ideal => "ideal",
            Mode::Noisy => "noisy",
        }
    }
}

/// How simulated time relates to wall-clock time during runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TimeMode {
    /// Pace ticks against the wall clock.
    Realtime,
    /// Run `factor` times faster than the wall clock; infinity = free-run.
    Accelerated { factor: f64 },
}

impl TimeMode {
    /// Free-running accelerated mode (as fast as the host allows).
    pub fn unpaced() -> Self {
        TimeMode::Accelerated { factor: f64::INFINITY }
    }
}

#[derive(Debug, Clone)]
pub struct DeviceConfig {
    /// Stacked boards, 1..=8 (8 channels each).
    pub n_boards: u32,
    /// Aggregate sampling budget per board, S/s.
    pub sample_rate_hz: f64,
    pub mode: Mode,
    pub time_mode: TimeMode,
    /// Noise/seed source; `None` seeds from entropy (logged for replay).
    pub seed: Option<u64>,
    pub chain: SignalChainParams,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            n_boards: 1,
            sample_rate_hz: 860.0,
            mode: Mode::Noisy,
            time_mode: TimeMode::unpaced(),
            seed: None,
            chain: SignalChainParams::default(),
        }
    }
}

/// One reading of one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    /// Seconds since run start (log open).
    pub t_s: f64,
    pub channel: u16,
    /// Drive request at sampling time, mV.
    pub set_mv: i32,
    pub switch_closed: bool,
    /// Baseline-subtracted reading; always a multiple of 125 pA.
    pub current_pa: i64,
}

struct Channel {
    set_mv: i32,
    drive_v: f64,
    switch_closed: bool,
    baseline_pa: i64,
    filter: FilterState,
    cell: Cell,
    /// Injected input-referred offset current (models amp offset), amps.
    offset_a: f64,
    rng: ChaCha8Rng,
    last_pa: i64,
}

pub struct Device {
    cfg: DeviceConfig,
    channels: Vec<Channel>,
    time_s: f64,
    effective_seed: u64,
    noise: Option<Normal<f64>>,
    log: Option<BufWriter<File>>,
    log_path: Option<PathBuf>,
    busy: bool,
}

impl Device {
    pub fn new(cfg: DeviceConfig) -> Result<Self, DeviceError> {
        if !(1..=8).contains(&cfg.n_boards) {
            return Err(DeviceError::Config(format!(
                "board count {} outside 1..=8",
                cfg.n_boards
            )));
        }
        if !(cfg.sample_rate_hz > 0.0 && cfg.sample_rate_hz <= cfg.chain.max_sample_rate_hz) {
            return Err(DeviceError::Config(format!(
                "sample rate {} Hz outside (0, {}] per board",
                cfg.sample_rate_hz, cfg.chain.max_sample_rate_hz
            )));
        }
        let effective_seed = cfg.seed.unwrap_or_else(rand::random);
        let n = (cfg.n_boards * CHANNELS_PER_BOARD) as usize;
        let drive0 = cfg.chain.quantized_drive_v(0);
        let channels = (0..n)
            .map(|idx| {
                // Independent noise stream per channel: mutating or reading
                // one channel can never perturb another's draw sequence.
                let mut rng = ChaCha8Rng::seed_from_u64(effective_seed);
                rng.set_stream(idx as u64 + 1);
                Channel {
                    set_mv: 0,
                    drive_v: drive0,
                    switch_closed: false,
                    baseline_pa: 0,
                    filter: FilterState::new(),
                    cell: Cell::resistor(1e6),
                    offset_a: 0.0,
                    rng,
                    last_pa: 0,
                }
            })
            .collect();
        let noise = match cfg.mode {
            Mode::Ideal => None,
            Mode::Noisy => {
                let sigma_v = cfg.chain.noise_sigma_a * cfg.chain.transimpedance();
                Some(Normal::new(0.0, sigma_v).expect("noise sigma is finite and non-negative"))
            }
        };
        Ok(Device {
            cfg,
            channels,
            time_s: 0.0,
            effective_seed,
            noise,
            log: None,
            log_path: None,
            busy: false,
        })
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.cfg
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Simulated seconds since the current log was opened.
    pub fn time_s(&self) -> f64 {
        self.time_s
    }

    /// Seed actually in use (equals the configured seed when one was given).
    pub fn effective_seed(&self) -> u64 {
        self.effective_seed
    }

    /// Interval of one full-bank scan tick at the configured rate.
    pub fn tick_dt(&self) -> f64 {
        CHANNELS_PER_BOARD as f64 / self.cfg.sample_rate_hz
    }

    pub fn is_busy(&self) -> bool {
        self.busy
    }

    /// Mark a protocol run in progress (wire commands are then refused).
    pub fn set_busy(&mut self, busy: bool) {
        self.busy = busy;
    }

    fn channel(&self, ch: usize) -> Result<&Channel, DeviceError> {
        self.channels.get(ch).ok_or(DeviceError::Channel(ch))
    }

    fn channel_mut(&mut self, ch: usize) -> Result<&mut Channel, DeviceError> {
        self.channels.get_mut(ch).ok_or(DeviceError::Channel(ch))
    }

    /// Request a drive voltage; the request is quantized through the DAC and
    /// level shifter and retained across switch changes.
    pub fn set_voltage(&mut self, ch: usize, mv: i32) -> Result<(), DeviceError> {
        if !(-4000..=3984).contains(&mv) {
            return Err(DeviceError::Voltage(mv));
        }
        let drive = self.cfg.chain.quantized_drive_v(mv);
        let c = self.channel_mut(ch)?;
        c.set_mv = mv;
        c.drive_v = drive;
        self.log_command(&format!("set ch={ch} mv={mv}"));
        Ok(())
    }

    /// Quantized drive voltage the channel actually produces, in mV.
    pub fn get_voltage_mv(&self, ch: usize) -> Result<f64, DeviceError> {
        Ok(self.channel(ch)?.drive_v * 1000.0)
    }

    pub fn set_switch(&mut self, ch: usize, closed: bool) -> Result<(), DeviceError> {
        self.channel_mut(ch)?.switch_closed = closed;
        self.log_command(&format!("sw ch={ch} closed={}", closed as u8));
        Ok(())
    }

    pub fn switch_closed(&self, ch: usize) -> Result<bool, DeviceError> {
        Ok(self.channel(ch)?.switch_closed)
    }

    pub fn set_mv(&self, ch: usize) -> Result<i32, DeviceError> {
        Ok(self.channel(ch)?.set_mv)
    }

    /// Attach a load model to a channel.
    pub fn bind_cell(&mut self, ch: usize, cell: Cell) -> Result<(), DeviceError> {
        self.channel_mut(ch)?.cell = cell;
        Ok(())
    }

    pub fn cell(&self, ch: usize) -> Result<&Cell, DeviceError> {
        Ok(&self.channel(ch)?.cell)
    }

    /// Inject an input-referred offset current (amps) on one channel; what
    /// calibration is there to null.
    pub fn set_offset_a(&mut self, ch: usize, offset_a: f64) -> Result<(), DeviceError> {
        self.channel_mut(ch)?.offset_a = offset_a;
        Ok(())
    }

    pub fn baseline_pa(&self, ch: usize) -> Result<i64, DeviceError> {
        Ok(self.channel(ch)?.baseline_pa)
    }

    /// Last baseline-subtracted reading of the channel, pA.
    pub fn last_current_pa(&self, ch: usize) -> Result<i64, DeviceError> {
        Ok(self.channel(ch)?.last_pa)
    }

    /// Fluorescence proxy of the channel's well, if its cell has one.
    pub fn fluorescence(&self, ch: usize) -> Result<Option<f64>, DeviceError> {
        Ok(self.channel(ch)?.cell.fluorescence())
    }

    fn step_channel(
        chain: &SignalChainParams,
        noise: &Option<Normal<f64>>,
        ch: &mut Channel,
        dt: f64,
    ) -> i64 {
        let noise_v = match noise {
            Some(dist) => dist.sample(&mut ch.rng),
            None => 0.0,
        };
        chain_step(
            chain,
            ch.drive_v,
            ch.switch_closed,
            ch.offset_a,
            &mut ch.cell,
            &mut ch.filter,
            dt,
            noise_v,
        )
    }

    /// Advance every channel by `dt` and return one reading per channel,
    /// all sharing the same timestamp. Appends to the open log, if any.
    pub fn sample_all(&mut self, dt: f64) -> Vec<Sample> {
        assert!(dt > 0.0, "sampling interval must be positive");
        self.time_s += dt;
        let t = self.time_s;
        let mut out = Vec::with_capacity(self.channels.len());
        for (idx, ch) in self.channels.iter_mut().enumerate() {
            let raw = Self::step_channel(&self.cfg.chain, &self.noise, ch, dt);
            let pa = raw - ch.baseline_pa;
            ch.last_pa = pa;
            out.push(Sample {
                t_s: t,
                channel: idx as u16,
                set_mv: ch.set_mv,
                switch_closed: ch.switch_closed,
                current_pa: pa,
            });
        }
        if let Some(log) = &mut self.log {
            for s in &out {
                // Write errors surface at close (flush); samples must not
                // silently diverge from the returned batch.
                let _ = writeln!(
                    log,
                    "{:.6},{},{},{},{}",
                    s.t_s, s.channel, s.set_mv, s.switch_closed as u8, s.current_pa
                );
            }
        }
        out
    }

    /// No-load baseline acquisition: opens every switch, averages
    /// `n_samples` raw readings per channel and stores them (rounded to the
    /// ADC step) as the baselines subtracted from later readings.
    pub fn calibrate(&mut self, n_samples: usize) -> Result<Vec<i64>, DeviceError> {
        if self.busy {
            return Err(DeviceError::Busy);
        }
        assert!(n_samples > 0, "calibration needs at least one sample");
        for ch in &mut self.channels {
            ch.switch_closed = false;
            ch.baseline_pa = 0;
        }
        self.log_command(&format!("cal n={n_samples}"));
        let dt = self.tick_dt();
        let mut acc = vec![0i64; self.channels.len()];
        for _ in 0..n_samples {
            self.time_s += dt;
            for (idx, ch) in self.channels.iter_mut().enumerate() {
                acc[idx] += Self::step_channel(&self.cfg.chain, &self.noise, ch, dt);
            }
        }
        let lsb = self.cfg.chain.adc_lsb_pa() as f64;
        let baselines: Vec<i64> = acc
            .iter()
            .map(|&sum| {
                let mean = sum as f64 / n_samples as f64;
                ((mean / lsb).round() * lsb) as i64
            })
            .collect();
        for (ch, &b) in self.channels.iter_mut().zip(&baselines) {
            ch.baseline_pa = b;
            ch.last_pa = 0;
        }
        Ok(baselines)
    }

    /// One-line identity/capability string (INFO reply, log header).
    pub fn info_string(&self) -> String {
        format!(
            "{FIRMWARE} channels={} rate_hz={} mode={} range_na=1650 max_drive_ua={}",
            self.n_channels(),
            self.cfg.sample_rate_hz,
            self.cfg.mode.as_str(),
            MAX_DRIVE_UA
        )
    }

    /// Open a run log; resets the run clock to zero and writes the metadata
    /// header. Any previously open log is flushed and closed.
    pub fn open_log(&mut self, path: &Path) -> Result<(), DeviceError> {
        self.close_log()?;
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "# minipot log v1")?;
        match self.cfg.seed {
            Some(_) => writeln!(w, "# started deterministic")?,
            None => {
                let now = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .unwrap_or_default();
                writeln!(w, "# started unix:{}.{:03}", now.as_secs(), now.subsec_millis())?;
            }
        }
        writeln!(
            w,
            "# config boards={} channels={} rate_hz={} mode={}",
            self.cfg.n_boards,
            self.n_channels(),
            self.cfg.sample_rate_hz,
            self.cfg.mode.as_str()
        )?;
        writeln!(w, "# seed {}", self.effective_seed)?;
        writeln!(w, "# firmware {FIRMWARE}")?;
        for (idx, ch) in self.channels.iter().enumerate() {
            if ch.baseline_pa != 0 {
                writeln!(w, "# baseline ch={idx} pa={}", ch.baseline_pa)?;
            }
        }
        writeln!(w, "t_s,channel,set_mV,switch,current_pA")?;
        self.log = Some(w);
        self.log_path = Some(path.to_path_buf());
        self.time_s = 0.0;
        Ok(())
    }

    /// Append a `#`-prefixed note (protocol name, run metadata) to the log.
    pub fn log_note(&mut self, note: &str) {
        if let Some(log) = &mut self.log {
            let _ = writeln!(log, "# {note}");
        }
    }

    fn log_command(&mut self, cmd: &str) {
        let t = self.time_s;
        if let Some(log) = &mut self.log {
            let _ = writeln!(log, "# cmd t={t:.6} {cmd}");
        }
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    /// Push buffered log rows to disk without closing the file.
    pub fn flush_log(&mut self) -> Result<(), DeviceError> {
        if let Some(log) = &mut self.log {
            log.flush()?;
        }
        Ok(())
    }

    /// Flush and close the open log, if any.
    pub fn close_log(&mut self) -> Result<(), DeviceError> {
        if let Some(mut log) = self.log.take() {
            log.flush()?;
        }
        self.log_path = None;
        Ok(())
    }
}

impl Drop for Device {
    fn drop(&mut self) {
        let _ = self.close_log();
    }
}
