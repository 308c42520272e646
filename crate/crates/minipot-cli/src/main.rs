//! `minipot` — operator CLI for the potentiostat device twin.
//!
//! Subcommands mirror bench workflows: `characterize` sweeps and fits the
//! analog chains, `cv` runs cyclic voltammetry, `ionpump` runs the
//! sequential electrode cycle, `run` executes a protocol CSV, `serve`
//! exposes the twin over UDP, and `closedloop` closes a PI intensity loop
//! against it.

// Validation guards are written `!(x > 0.0)` on purpose: the negated form is
// true for NaN, which `x <= 0.0` would silently accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod analysis;
mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use minipot::device::Mode;

#[derive(Parser)]
#[command(name = "minipot", version, about = "Multichannel potentiostat device twin")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct CommonArgs {
    /// Device configuration file (TOML key = value)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Noise seed; rerunning with the same seed and flags reproduces every
    /// output byte for byte
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Directory for logs, reports, and the run manifest
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Override the configured simulation mode
    #[arg(long, global = true, value_enum, value_name = "MODE")]
    pub mode: Option<ModeArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ideal,
    Noisy,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Ideal => Mode::Ideal,
            ModeArg::Noisy => Mode::Noisy,
        }
    }
}

#[derive(Subcommand)]
pub enum Command {
    /// Sweep the drive and measurement chains, fit transfer lines, and
    /// report worst-case errors as % of full scale
    Characterize {
        /// Known load resistance bound to channel 0 for the input sweep
        #[arg(long, value_name = "OHM", default_value_t = 1.0e6)]
        load_ohm: f64,
    },
    /// Cyclic voltammetry on one channel; writes the raw log, an I–V
    /// table, and a detected-peaks sidecar
    Cv {
        #[arg(long, value_name = "CH", default_value_t = 0)]
        channel: u16,
        /// Lower vertex, mV
        #[arg(long, value_name = "MV", default_value_t = -900, allow_hyphen_values = true)]
        v_lo: i32,
        /// Upper vertex, mV
        #[arg(long, value_name = "MV", default_value_t = 500, allow_hyphen_values = true)]
        v_hi: i32,
        /// Scan rate, mV/s
        #[arg(long, value_name = "MV_S", default_value_t = 100.0)]
        rate: f64,
        #[arg(long, value_name = "N", default_value_t = 1)]
        cycles: u32,
        /// Reference-electrode offset: shifts every surface feature by
        /// this much on the drive axis
        #[arg(long, value_name = "MV", default_value_t = 0, allow_hyphen_values = true)]
        offset_mv: i32,
        /// Cell description TOML (default: the palladium surface model)
        #[arg(long, value_name = "PATH")]
        cell: Option<PathBuf>,
    },
    /// Sequential electrode cycle: each active electrode gets a +/- drive
    /// phase while fluorescence is logged for every electrode
    Ionpump {
        #[arg(long, value_name = "N", default_value_t = 9)]
        electrodes: u16,
        /// Drive amplitude per phase, mV
        #[arg(long, value_name = "MV", default_value_t = 1400)]
        amplitude_mv: i32,
        /// Seconds per polarity phase
        #[arg(long, value_name = "S", default_value_t = 30.0)]
        period_s: f64,
        /// Electrodes to leave open (zero-based channel numbers)
        #[arg(long, value_name = "CH,CH", value_delimiter = ',', default_value = "3,5")]
        skip: Vec<u16>,
        /// Cell description TOML (default: the ion-pump model)
        #[arg(long, value_name = "PATH")]
        cell: Option<PathBuf>,
    },
    /// Execute a protocol CSV against the twin
    Run {
        /// Protocol file (step,channel,action,v1_mV,v2_mV,duration_s,repeat)
        protocol: PathBuf,
        /// Cell description TOML bound to every channel
        #[arg(long, value_name = "PATH")]
        cell: Option<PathBuf>,
        /// Run this many times faster than the wall clock ("inf" =
        /// free-run); default is real time
        #[arg(long, value_name = "FACTOR")]
        accel: Option<f64>,
    },
    /// Serve the twin over the UDP line protocol and block
    Serve {
        #[arg(long, value_name = "PORT", default_value_t = minipot::wire::DEFAULT_PORT)]
        port: u16,
        #[arg(long, value_name = "ADDR", default_value = "0.0.0.0")]
        bind: String,
        /// Directory RUN looks up protocol files in
        #[arg(long, value_name = "DIR")]
        protocol_dir: Option<PathBuf>,
        /// Run this many times faster than the wall clock ("inf" =
        /// free-run); default is real time
        #[arg(long, value_name = "FACTOR")]
        accel: Option<f64>,
        /// Cell description TOML bound to every channel
        #[arg(long, value_name = "PATH")]
        cell: Option<PathBuf>,
    },
    /// Close a PI loop on fluorescence intensity and record the trace
    Closedloop {
        #[arg(long, value_name = "CH", default_value_t = 0)]
        channel: u16,
        /// Intensity setpoint before the step
        #[arg(long, value_name = "FRAC", default_value_t = 0.5)]
        start_target: f64,
        /// Intensity setpoint after the step
        #[arg(long, value_name = "FRAC", default_value_t = 0.55)]
        target: f64,
        /// Simulated time of the setpoint step
        #[arg(long, value_name = "S", default_value_t = 10.0)]
        step_at_s: f64,
        #[arg(long, value_name = "S", default_value_t = 300.0)]
        duration_s: f64,
        /// Controller sampling period
        #[arg(long, value_name = "S", default_value_t = 2.0)]
        period_s: f64,
        #[arg(long, value_name = "GAIN")]
        kp: Option<f64>,
        #[arg(long, value_name = "GAIN")]
        ki: Option<f64>,
        /// Tail intensity readings from this file instead of the built-in
        /// twin sensor (one reading per line; requires --server)
        #[arg(long, value_name = "PATH", requires = "server")]
        sensor_file: Option<PathBuf>,
        /// Control an already-running server at host:port instead of an
        /// in-process twin (requires --sensor-file)
        #[arg(long, value_name = "ADDR", requires = "sensor_file")]
        server: Option<String>,
        /// Cell description TOML for the in-process twin
        #[arg(long, value_name = "PATH")]
        cell: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
