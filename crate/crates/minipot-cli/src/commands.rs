//! Subcommand implementations. Each command builds a device from the
//! common flags, does its work, writes plot-ready CSVs plus a manifest
//! into the output directory, and prints a short human summary.

use std::fmt;
use std::fmt::Write as FmtWrite;
use std::fs;
use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use minipot::client::{Client, ClientError};
use minipot::config::{self, CellSpec, ConfigError};
use minipot::control::{
    run_closed_loop, ControllerState, FileTailSensor, LoopError, TwinSensor,
};
use minipot::device::{Device, DeviceConfig, DeviceError, Sample, TimeMode, CHANNELS_PER_BOARD};
use minipot::protocol::{self, run_protocol, ProtocolError, RunError};
use minipot::wire;

use crate::analysis;
use crate::manifest::RunManifest;
use crate::{Cli, Command, CommonArgs};

/// Measurement full scale, nA (the +/-1650 nA window).
const FS_SPAN_NA: f64 = 3300.0;
/// Drive full scale, mV (-4000..+3984).
const DRIVE_SPAN_MV: f64 = 7984.0;

// ---------------------------------------------------------------- errors --

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration, or input files.
    Config(String),
    /// Failure while executing an otherwise valid request.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DeviceError> for CliError {
    fn from(e: DeviceError) -> Self {
        match e {
            DeviceError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Protocol(p) => p.into(),
            RunError::Device(d) => d.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<LoopError> for CliError {
    fn from(e: LoopError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

// -------------------------------------------------------------- dispatch --

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let Cli { common, command } = cli;
    match command {
        Command::Characterize { load_ohm } => cmd_characterize(&common, load_ohm),
        Command::Cv { channel, v_lo, v_hi, rate, cycles, offset_mv, cell } => {
            cmd_cv(&common, channel, v_lo, v_hi, rate, cycles, offset_mv, cell.as_deref())
        }
        Command::Ionpump { electrodes, amplitude_mv, period_s, skip, cell } => {
            cmd_ionpump(&common, electrodes, amplitude_mv, period_s, &skip, cell.as_deref())
        }
        Command::Run { protocol, cell, accel } => {
            cmd_run(&common, &protocol, cell.as_deref(), accel)
        }
        Command::Serve { port, bind, protocol_dir, accel, cell } => {
            cmd_serve(&common, port, &bind, protocol_dir, accel, cell.as_deref())
        }
        Command::Closedloop {
            channel,
            start_target,
            target,
            step_at_s,
            duration_s,
            period_s,
            kp,
            ki,
            sensor_file,
            server,
            cell,
        } => cmd_closedloop(
            &common,
            channel,
            start_target,
            target,
            step_at_s,
            duration_s,
            period_s,
            kp,
            ki,
            sensor_file.as_deref(),
            server.as_deref(),
            cell.as_deref(),
        ),
    }
}

// --------------------------------------------------------------- helpers --

/// Build a device from the common flags. Without `--config`, provision
/// `min_boards`; with one, require it to cover the requested channels.
fn build_device(
    common: &CommonArgs,
    min_boards: u32,
    time_mode: TimeMode,
) -> Result<Device, CliError> {
    let mut cfg = match &common.config {
        Some(p) => config::load_device_config(p)?,
        None => DeviceConfig::default(),
    };
    if common.config.is_none() {
        cfg.n_boards = min_boards;
    } else if cfg.n_boards < min_boards {
        return Err(CliError::Config(format!(
            "config provides {} channels but the command needs {}",
            cfg.n_boards * CHANNELS_PER_BOARD,
            min_boards * CHANNELS_PER_BOARD
        )));
    }
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(mode) = common.mode {
        cfg.mode = mode.into();
    }
    cfg.time_mode = time_mode;
    Device::new(cfg).map_err(|e| CliError::Config(e.to_string()))
}

fn boards_for_channel(channel: u16) -> u32 {
    channel as u32 / CHANNELS_PER_BOARD + 1
}

fn cell_spec_or(path: Option<&Path>, default: CellSpec) -> Result<CellSpec, CliError> {
    match path {
        Some(p) => Ok(config::load_cell_spec(p)?),
        None => Ok(default),
    }
}

fn base_manifest(name: &str, common: &CommonArgs, device: &Device) -> RunManifest {
    let mut m = RunManifest::new(name);
    m.setting(
        "config",
        common
            .config
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "-".into()),
    );
    m.setting("seed", device.effective_seed());
    m.setting("mode", device.config().mode.as_str());
    m.setting("channels", device.n_channels());
    m
}

fn create_csv(out_dir: &Path, name: &str, header: &str) -> Result<(PathBuf, BufWriter<File>), CliError> {
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", out_dir.display())))?;
    let path = out_dir.join(name);
    let f = File::create(&path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{header}")?;
    Ok((path, w))
}

fn time_mode_from_accel(accel: Option<f64>) -> Result<TimeMode, CliError> {
    match accel {
        None => Ok(TimeMode::Realtime),
        Some(f) if f > 0.0 => Ok(TimeMode::Accelerated { factor: f }),
        Some(f) => Err(CliError::Config(format!("--accel {f} must be positive"))),
    }
}

/// File-name tag for a numeric parameter: `100` -> "100", `12.5` -> "12p5".
fn num_tag(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e9 {
        format!("{}", x as i64)
    } else {
        format!("{x}").replace('.', "p").replace('-', "m")
    }
}

// ---------------------------------------------------------- characterize --

fn cmd_characterize(common: &CommonArgs, load_ohm: f64) -> Result<(), CliError> {
    if !(load_ohm > 0.0) {
        return Err(CliError::Config(format!("--load-ohm {load_ohm} must be positive")));
    }
    let mut device = build_device(common, 1, TimeMode::unpaced())?;
    let mut manifest = base_manifest("characterize", common, &device);
    manifest.setting("load_ohm", load_ohm);

    // Drive chain: request every 16th code across the full span and compare
    // the produced output against a straight-line fit.
    let (out_path, mut out_csv) =
        create_csv(&common.out, "characterize_output.csv", "set_mV,dac_code,v_out_mV,residual_mV")?;
    let mut set_pts = Vec::new();
    let mut out_pts = Vec::new();
    let mut codes = Vec::new();
    for set in (-4000..=3984).step_by(16) {
        device.set_voltage(0, set)?;
        set_pts.push(set as f64);
        out_pts.push(device.get_voltage_mv(0)?);
        codes.push(device.config().chain.drive_code_for_mv(set));
    }
    let (o_slope, o_icept) = analysis::ols(&set_pts, &out_pts);
    let mut out_max_resid: f64 = 0.0;
    for ((set, v), code) in set_pts.iter().zip(&out_pts).zip(&codes) {
        let resid = v - (o_slope * set + o_icept);
        out_max_resid = out_max_resid.max(resid.abs());
        writeln!(out_csv, "{},{},{:.6},{:.6}", *set as i64, code, v, resid)?;
    }
    out_csv.flush()?;
    let out_pct_fs = out_max_resid / DRIVE_SPAN_MV * 100.0;

    // Measurement chain: drive a known resistor, stay inside the +/-1650 nA
    // window, and fit measured current against the true load current.
    let fs_mv = FS_SPAN_NA / 2.0 * load_ohm / 1e6; // drive that hits the rail
    let lim = ((fs_mv * 0.99) as i32).min(1640) / 10 * 10;
    device.bind_cell(0, minipot::cell::Cell::resistor(load_ohm))?;
    device.calibrate(100)?;
    device.set_switch(0, true)?;
    let dt = device.tick_dt();
    device.set_voltage(0, -lim)?;
    for _ in 0..50 {
        device.sample_all(dt); // settle the filter onto the first point
    }
    let (tr_path, mut tr_csv) =
        create_csv(&common.out, "characterize_transfer.csv", "drive_mV,true_nA,measured_nA,error_nA")?;
    let mut drive_v = Vec::new();
    let mut true_na = Vec::new();
    let mut meas_na = Vec::new();
    let mut set = -lim;
    while set <= lim {
        device.set_voltage(0, set)?;
        for _ in 0..15 {
            device.sample_all(dt);
        }
        let mut acc = 0.0;
        for _ in 0..5 {
            acc += device.sample_all(dt)[0].current_pa as f64;
        }
        let mv = device.get_voltage_mv(0)?;
        drive_v.push(mv / 1000.0);
        true_na.push(mv / 1000.0 / load_ohm * 1e9);
        meas_na.push(acc / 5.0 / 1000.0);
        set += 10;
    }
    let (t_slope, t_icept) = analysis::ols(&true_na, &meas_na);
    let mut in_max_resid: f64 = 0.0;
    for ((v, t), m) in drive_v.iter().zip(&true_na).zip(&meas_na) {
        let resid = m - (t_slope * t + t_icept);
        in_max_resid = in_max_resid.max(resid.abs());
        writeln!(tr_csv, "{:.6},{:.6},{:.6},{:.6}", v * 1000.0, t, m, m - t)?;
    }
    tr_csv.flush()?;
    let in_pct_fs = in_max_resid / FS_SPAN_NA * 100.0;

    // Load fit: slope of I(V) is the load conductance.
    let meas_a: Vec<f64> = meas_na.iter().map(|na| na * 1e-9).collect();
    let (g_fit, _) = analysis::ols(&drive_v, &meas_a);
    let r_fit = 1.0 / g_fit;
    let r_err_pct = (r_fit - load_ohm) / load_ohm * 100.0;

    let (sum_path, mut sum_csv) = create_csv(&common.out, "characterize_summary.csv", "quantity,value")?;
    writeln!(sum_csv, "output_slope,{o_slope}")?;
    writeln!(sum_csv, "output_intercept_mV,{o_icept}")?;
    writeln!(sum_csv, "output_max_residual_mV,{out_max_resid}")?;
    writeln!(sum_csv, "output_error_pct_fs,{out_pct_fs}")?;
    writeln!(sum_csv, "transfer_slope,{t_slope}")?;
    writeln!(sum_csv, "transfer_intercept_nA,{t_icept}")?;
    writeln!(sum_csv, "input_max_residual_nA,{in_max_resid}")?;
    writeln!(sum_csv, "input_error_pct_fs,{in_pct_fs}")?;
    writeln!(sum_csv, "load_ohm,{load_ohm}")?;
    writeln!(sum_csv, "fitted_load_ohm,{r_fit}")?;
    writeln!(sum_csv, "fitted_load_error_pct,{r_err_pct}")?;
    sum_csv.flush()?;

    println!("output chain: max residual {out_max_resid:.4} mV ({out_pct_fs:.4}% FS)");
    println!("input chain:  max residual {in_max_resid:.4} nA ({in_pct_fs:.4}% FS)");
    println!("fitted load:  {r_fit:.1} ohm ({r_err_pct:+.4}% vs {load_ohm:.1})");

    manifest.output(&out_path);
    manifest.output(&tr_path);
    manifest.output(&sum_path);
    manifest.write(&common.out)?;
    Ok(())
}

// ------------------------------------------------------------------- cv --

/// Shift every surface feature of a palladium-surface cell along the drive
/// axis (models a reference-electrode offset).
fn shift_surface(spec: &mut CellSpec, dv: f64) {
    if let CellSpec::PdSurface { peaks, .. } = spec {
        for p in peaks {
            p.v_center += dv;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_cv(
    common: &CommonArgs,
    channel: u16,
    v_lo: i32,
    v_hi: i32,
    rate: f64,
    cycles: u32,
    offset_mv: i32,
    cell_path: Option<&Path>,
) -> Result<(), CliError> {
    let mut device = build_device(common, boards_for_channel(channel), TimeMode::unpaced())?;
    let mut spec = cell_spec_or(cell_path, config::default_pd_surface())?;
    if offset_mv != 0 {
        shift_surface(&mut spec, offset_mv as f64 / 1000.0);
    }
    device.bind_cell(channel as usize, spec.build(channel as usize))?;
    let proto = protocol::make_cv(channel, v_lo, v_hi, rate, cycles)?;

    let tag = num_tag(rate);
    fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", common.out.display())))?;
    let log_path = common.out.join(format!("cv_{tag}_log.csv"));
    device.open_log(&log_path)?;

    let mut vs: Vec<f64> = Vec::new();
    let mut is_na: Vec<f64> = Vec::new();
    run_protocol(&mut device, &proto, None, |_, batch| {
        for s in batch {
            if s.channel == channel {
                vs.push(s.set_mv as f64);
                is_na.push(s.current_pa as f64 / 1000.0);
            }
        }
    })?;
    device.close_log()?;

    let (iv_path, mut iv_csv) = create_csv(&common.out, &format!("cv_{tag}_iv.csv"), "v_mV,i_nA")?;
    for (v, i) in vs.iter().zip(&is_na) {
        writeln!(iv_csv, "{},{}", *v as i64, i)?;
    }
    iv_csv.flush()?;

    // Peak detection: smooth, split into sweep legs, and pick prominent
    // extrema per leg (maxima on the up sweep, minima on the down sweep).
    let smooth = analysis::moving_average(&is_na, 5);
    let prom = 0.05 * smooth.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let leg_dur = (v_hi - v_lo) as f64 / rate;
    let dt = 1.0 / proto.sample_rate_hz;
    let n_legs = 2 * cycles as usize;
    let mut legs: Vec<(usize, usize)> = Vec::new(); // [start, end) sample index
    {
        let mut start = 0usize;
        for leg in 0..n_legs {
            let t_end = (leg + 1) as f64 * leg_dur;
            let mut end = start;
            while end < vs.len() && (end as f64) * dt < t_end - dt / 2.0 {
                end += 1;
            }
            if leg + 1 == n_legs {
                end = vs.len();
            }
            legs.push((start, end));
            start = end;
        }
    }
    struct CvPeak {
        cycle: usize,
        anodic: bool,
        v_mv: f64,
        i_na: f64,
    }
    let mut peaks: Vec<CvPeak> = Vec::new();
    for (leg, &(a, b)) in legs.iter().enumerate() {
        if b - a < 3 {
            continue;
        }
        let xs = &vs[a..b];
        let anodic = leg % 2 == 0;
        if anodic {
            for p in analysis::find_peaks(xs, &smooth[a..b], prom) {
                peaks.push(CvPeak { cycle: leg / 2, anodic, v_mv: p.x, i_na: p.y });
            }
        } else {
            let neg: Vec<f64> = smooth[a..b].iter().map(|y| -y).collect();
            for p in analysis::find_peaks(xs, &neg, prom) {
                peaks.push(CvPeak { cycle: leg / 2, anodic, v_mv: p.x, i_na: -p.y });
            }
        }
    }
    peaks.sort_by(|p, q| {
        p.cycle.cmp(&q.cycle).then(p.v_mv.partial_cmp(&q.v_mv).expect("finite peak positions"))
    });

    let (pk_path, mut pk_csv) =
        create_csv(&common.out, &format!("cv_{tag}_peaks.csv"), "cycle,branch,v_peak_mV,i_peak_nA")?;
    for p in &peaks {
        let branch = if p.anodic { "anodic" } else { "cathodic" };
        writeln!(pk_csv, "{},{},{:.3},{:.3}", p.cycle, branch, p.v_mv, p.i_na)?;
    }
    pk_csv.flush()?;

    println!("cv: {} mV/s, {} sample(s), {} peak(s)", rate, vs.len(), peaks.len());
    for p in &peaks {
        let branch = if p.anodic { "anodic  " } else { "cathodic" };
        println!("  {branch} {:+9.3} mV {:+10.3} nA", p.v_mv, p.i_na);
    }

    let mut manifest = base_manifest("cv", common, &device);
    manifest.setting("channel", channel);
    manifest.setting("v_lo_mV", v_lo);
    manifest.setting("v_hi_mV", v_hi);
    manifest.setting("rate_mV_s", rate);
    manifest.setting("cycles", cycles);
    manifest.setting("offset_mV", offset_mv);
    manifest.output(&log_path);
    manifest.output(&iv_path);
    manifest.output(&pk_path);
    manifest.write(&common.out)?;
    Ok(())
}

// -------------------------------------------------------------- ionpump --

fn cmd_ionpump(
    common: &CommonArgs,
    electrodes: u16,
    amplitude_mv: i32,
    period_s: f64,
    skip: &[u16],
    cell_path: Option<&Path>,
) -> Result<(), CliError> {
    if electrodes == 0 {
        return Err(CliError::Config("--electrodes must be at least 1".into()));
    }
    let boards = (electrodes as u32).div_ceil(CHANNELS_PER_BOARD).max(1);
    let mut device = build_device(common, boards, TimeMode::unpaced())?;
    let spec = cell_spec_or(cell_path, config::default_ion_pump())?;
    for ch in 0..electrodes as usize {
        device.bind_cell(ch, spec.build(ch))?;
    }
    let chans: Vec<u16> = (0..electrodes).collect();
    let proto = protocol::make_electrode_cycle(&chans, amplitude_mv, period_s, skip)?;

    fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", common.out.display())))?;
    let log_path = common.out.join("ionpump_log.csv");
    device.open_log(&log_path)?;

    // Per-tick capture: fluorescence of every electrode plus the rows of
    // whichever switch is closed.
    let mut fluor_text = String::from("t_s,channel,fluorescence\n");
    let mut fluor_series: Vec<Vec<f64>> = vec![Vec::new(); electrodes as usize];
    let mut closed: Vec<(usize, u16, i32, i64)> = Vec::new(); // (tick, ch, set_mv, pa)
    let mut tick = 0usize;
    run_protocol(&mut device, &proto, None, |dev, batch: &[Sample]| {
        let t = batch[0].t_s;
        for (ch, series) in fluor_series.iter_mut().enumerate() {
            let f = dev
                .fluorescence(ch)
                .expect("bound channel")
                .expect("ion-pump cells report fluorescence");
            let _ = writeln!(fluor_text, "{t},{ch},{f}");
            series.push(f);
        }
        for s in batch {
            if s.switch_closed {
                closed.push((tick, s.channel, s.set_mv, s.current_pa));
            }
        }
        tick += 1;
    })?;
    device.close_log()?;

    let fluor_path = common.out.join("ionpump_fluor.csv");
    fs::write(&fluor_path, fluor_text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", fluor_path.display())))?;

    // Phase table: consecutive closed-switch rows with the same channel and
    // drive form one phase.
    struct Phase {
        channel: u16,
        set_mv: i32,
        first_tick: usize,
        last_tick: usize,
        sum_pa: f64,
        n: usize,
    }
    let mut phases: Vec<Phase> = Vec::new();
    for &(tk, ch, mv, pa) in &closed {
        match phases.last_mut() {
            Some(p) if p.channel == ch && p.set_mv == mv && tk == p.last_tick + 1 => {
                p.last_tick = tk;
                p.sum_pa += pa as f64;
                p.n += 1;
            }
            _ => phases.push(Phase {
                channel: ch,
                set_mv: mv,
                first_tick: tk,
                last_tick: tk,
                sum_pa: pa as f64,
                n: 1,
            }),
        }
    }

    let (ph_path, mut ph_csv) = create_csv(
        &common.out,
        "ionpump_phases.csv",
        "phase,channel,drive_mV,samples,mean_nA,delta_f",
    )?;
    let mut mean_nas = Vec::new();
    let mut delta_fs = Vec::new();
    for (k, p) in phases.iter().enumerate() {
        let series = &fluor_series[p.channel as usize];
        let f0 = if p.first_tick > 0 { series[p.first_tick - 1] } else { series[0] };
        let f1 = series[p.last_tick];
        let mean_na = p.sum_pa / p.n as f64 / 1000.0;
        mean_nas.push(mean_na);
        delta_fs.push(f1 - f0);
        writeln!(
            ph_csv,
            "{},{},{},{},{:.6},{}",
            k,
            p.channel,
            p.set_mv,
            p.n,
            mean_na,
            f1 - f0
        )?;
    }
    ph_csv.flush()?;

    let rho = if phases.len() >= 2 { analysis::spearman(&mean_nas, &delta_fs) } else { f64::NAN };

    // Electrode view: both polarity half-phases of one electrode form its
    // active window.
    let mut electrodes_seen: Vec<u16> = Vec::new();
    let mut per_electrode: Vec<usize> = Vec::new();
    for p in &phases {
        match electrodes_seen.last() {
            Some(&ch) if ch == p.channel => *per_electrode.last_mut().expect("nonempty") += p.n,
            _ => {
                electrodes_seen.push(p.channel);
                per_electrode.push(p.n);
            }
        }
    }

    let (sum_path, mut sum_csv) = create_csv(&common.out, "ionpump_summary.csv", "quantity,value")?;
    writeln!(sum_csv, "n_phases,{}", phases.len())?;
    writeln!(sum_csv, "samples_per_phase_min,{}", phases.iter().map(|p| p.n).min().unwrap_or(0))?;
    writeln!(sum_csv, "samples_per_phase_max,{}", phases.iter().map(|p| p.n).max().unwrap_or(0))?;
    writeln!(sum_csv, "active_electrodes,{}", electrodes_seen.len())?;
    writeln!(
        sum_csv,
        "electrode_order,{}",
        electrodes_seen.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
    )?;
    writeln!(sum_csv, "samples_per_electrode_min,{}", per_electrode.iter().min().unwrap_or(&0))?;
    writeln!(sum_csv, "samples_per_electrode_max,{}", per_electrode.iter().max().unwrap_or(&0))?;
    writeln!(sum_csv, "spearman_rho,{rho}")?;
    sum_csv.flush()?;

    println!(
        "ionpump: {} electrode(s), {} skipped, {} phase(s), spearman(mean current, delta f) = {:.4}",
        electrodes,
        skip.len(),
        phases.len(),
        rho
    );

    let mut manifest = base_manifest("ionpump", common, &device);
    manifest.setting("electrodes", electrodes);
    manifest.setting("amplitude_mV", amplitude_mv);
    manifest.setting("period_s", period_s);
    manifest.setting("skip", skip.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
    manifest.output(&log_path);
    manifest.output(&fluor_path);
    manifest.output(&ph_path);
    manifest.output(&sum_path);
    manifest.write(&common.out)?;
    Ok(())
}

// ------------------------------------------------------------------ run --

fn cmd_run(
    common: &CommonArgs,
    protocol_path: &Path,
    cell_path: Option<&Path>,
    accel: Option<f64>,
) -> Result<(), CliError> {
    let time_mode = time_mode_from_accel(accel)?;
    let text = fs::read_to_string(protocol_path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", protocol_path.display())))?;
    let stem = protocol_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("protocol")
        .to_string();
    let proto = protocol::parse_protocol(&text, &stem)?;
    let max_ch = proto
        .steps
        .iter()
        .filter_map(|s| match s.channel {
            protocol::ChannelSel::One(c) => Some(c),
            protocol::ChannelSel::All => None,
        })
        .max()
        .unwrap_or(0);
    let mut device = build_device(common, boards_for_channel(max_ch), time_mode)?;
    if let Some(p) = cell_path {
        let spec = config::load_cell_spec(p)?;
        for ch in 0..device.n_channels() {
            device.bind_cell(ch, spec.build(ch))?;
        }
    }

    fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", common.out.display())))?;
    let log_path = common.out.join(format!("run_{stem}_log.csv"));
    device.open_log(&log_path)?;
    let summary = run_protocol(&mut device, &proto, None, |_, _| {})?;
    device.close_log()?;

    println!(
        "run: {stem}: {} tick(s) over {:.3} s -> {}",
        summary.ticks,
        summary.duration_s,
        log_path.display()
    );

    let mut manifest = base_manifest("run", common, &device);
    manifest.setting("protocol", protocol_path.display().to_string());
    manifest.output(&log_path);
    manifest.write(&common.out)?;
    Ok(())
}

// ---------------------------------------------------------------- serve --

fn cmd_serve(
    common: &CommonArgs,
    port: u16,
    bind: &str,
    protocol_dir: Option<PathBuf>,
    accel: Option<f64>,
    cell_path: Option<&Path>,
) -> Result<(), CliError> {
    let time_mode = time_mode_from_accel(accel)?;
    let mut device = build_device(common, 1, time_mode)?;
    if let Some(p) = cell_path {
        let spec = config::load_cell_spec(p)?;
        for ch in 0..device.n_channels() {
            device.bind_cell(ch, spec.build(ch))?;
        }
    }
    let mut manifest = base_manifest("serve", common, &device);

    fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", common.out.display())))?;
    let handle = wire::serve(device, (bind, port), protocol_dir.clone(), Some(common.out.clone()))
        .map_err(|e| CliError::Runtime(format!("cannot bind {bind}:{port}: {e}")))?;
    println!("listening on {}", handle.addr());
    if let Some(d) = &protocol_dir {
        println!("protocols from {}", d.display());
    }
    std::io::stdout().flush()?;

    manifest.setting("listen", handle.addr());
    manifest.write(&common.out)?;
    loop {
        std::thread::sleep(std::time::Duration::from_secs(1));
    }
}

// ----------------------------------------------------------- closedloop --

#[allow(clippy::too_many_arguments)]
fn cmd_closedloop(
    common: &CommonArgs,
    channel: u16,
    start_target: f64,
    target: f64,
    step_at_s: f64,
    duration_s: f64,
    period_s: f64,
    kp: Option<f64>,
    ki: Option<f64>,
    sensor_file: Option<&Path>,
    server: Option<&str>,
    cell_path: Option<&Path>,
) -> Result<(), CliError> {
    if !(duration_s > 0.0) {
        return Err(CliError::Config(format!("--duration-s {duration_s} must be positive")));
    }
    if !(period_s > 0.0) {
        return Err(CliError::Config(format!("--period-s {period_s} must be positive")));
    }
    for (name, v) in [("--start-target", start_target), ("--target", target)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CliError::Config(format!("{name} {v} must lie in 0..=1")));
        }
    }

    let mut controller = ControllerState::default();
    if let Some(kp) = kp {
        controller.kp = kp;
    }
    if let Some(ki) = ki {
        controller.ki = ki;
    }
    let target_fn = move |t: f64| if t < step_at_s { start_target } else { target };

    fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", common.out.display())))?;
    let trace_path = common.out.join("closedloop_trace.csv");
    let mut trace = BufWriter::new(
        File::create(&trace_path)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", trace_path.display())))?,
    );

    let mut manifest = RunManifest::new("closedloop");
    let updates = match server {
        Some(addr) => {
            // Remote device: intensities arrive through a sensor file.
            let path = sensor_file.expect("clap enforces --sensor-file with --server");
            manifest.setting("config", "-");
            manifest.setting("server", addr);
            manifest.setting("sensor_file", path.display().to_string());
            let client = Client::connect(addr)?;
            let mut sensor = FileTailSensor::new(path, period_s);
            run_closed_loop(
                &client,
                channel,
                target_fn,
                duration_s,
                &mut sensor,
                &mut controller,
                &mut trace,
            )?
        }
        None => {
            // In-process twin serving on a loopback port.
            let mut device =
                build_device(common, boards_for_channel(channel), TimeMode::unpaced())?;
            let spec = cell_spec_or(cell_path, config::default_ion_pump())?;
            for ch in 0..device.n_channels() {
                device.bind_cell(ch, spec.build(ch))?;
            }
            manifest = base_manifest("closedloop", common, &device);
            let handle = wire::serve(device, ("127.0.0.1", 0), None, None)
                .map_err(|e| CliError::Runtime(format!("cannot bind loopback: {e}")))?;
            let client = Client::connect(handle.addr())?;
            let mut sensor = TwinSensor::new(handle.state(), channel as usize, period_s);
            let n = run_closed_loop(
                &client,
                channel,
                target_fn,
                duration_s,
                &mut sensor,
                &mut controller,
                &mut trace,
            );
            handle.shutdown();
            n?
        }
    };
    trace.flush()?;

    // Final tracking error, from the rows just written.
    let text = fs::read_to_string(&trace_path)?;
    let rows = minipot::control::parse_trace(&text)?;
    if let Some(last) = rows.last() {
        println!(
            "closedloop: {updates} update(s), final target {} measured {} (|e| = {:.5})",
            last.target,
            last.measured,
            (last.measured - last.target).abs()
        );
    } else {
        println!("closedloop: {updates} update(s), no rows recorded");
    }

    manifest.setting("channel", channel);
    manifest.setting("start_target", start_target);
    manifest.setting("target", target);
    manifest.setting("step_at_s", step_at_s);
    manifest.setting("duration_s", duration_s);
    manifest.setting("period_s", period_s);
    manifest.setting("kp", controller.kp);
    manifest.setting("ki", controller.ki);
    manifest.output(&trace_path);
    manifest.write(&common.out)?;
    Ok(())
}
