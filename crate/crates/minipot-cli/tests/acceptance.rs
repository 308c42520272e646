//! End-to-end acceptance scorecard. One test per numbered requirement;
//! each prints `ACCEPTANCE n (<label>): PASS|FAIL` (visible with
//! `--nocapture`) and fails loudly if its tolerance is violated.

use std::collections::BTreeMap;
use std::fs;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use minipot::device::{Device, DeviceConfig, Mode, TimeMode};
use minipot::signal_chain::SignalChainParams;
use minipot::wire::{handle_datagram, ServerState};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn scorecard<F: FnOnce()>(n: u32, label: &str, f: F) {
    let result = std::panic::catch_unwind(AssertUnwindSafe(f));
    match &result {
        Ok(()) => println!("ACCEPTANCE {n} ({label}): PASS"),
        Err(_) => println!("ACCEPTANCE {n} ({label}): FAIL"),
    }
    if let Err(e) = result {
        std::panic::resume_unwind(e);
    }
}

/// Run the CLI binary; panics (with stderr attached) unless it exits 0.
fn run_cli(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_minipot"))
        .args(args)
        .output()
        .expect("failed to spawn the CLI");
    assert!(
        out.status.success(),
        "CLI {:?} exited {:?}\nstderr:\n{}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Read a two-column `quantity,value` summary file.
fn read_kv(path: &Path) -> BTreeMap<String, String> {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (k, v) = l.split_once(',').unwrap_or_else(|| panic!("bad row `{l}`"));
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn num(kv: &BTreeMap<String, String>, key: &str) -> f64 {
    kv.get(key)
        .unwrap_or_else(|| panic!("missing `{key}`"))
        .parse()
        .unwrap_or_else(|e| panic!("`{key}`: {e}"))
}

fn out_dir(stem: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("minipot-accept-{stem}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

// ---------------------------------------------------------------------- 1 --

#[test]
fn acceptance_1_signal_chain_resolution_and_range() {
    scorecard(1, "signal chain resolution and range", || {
        let t0 = Instant::now();
        let p = SignalChainParams::default();

        let lsb_mv = p.composite_lsb_v() * 1000.0;
        assert!((lsb_mv - 1.95).abs() <= 0.01, "composite LSB {lsb_mv} mV");

        assert!((p.drive_min_v() - (-4.000)).abs() < 1e-9, "low rail {}", p.drive_min_v());
        assert!(
            p.drive_max_v() >= 3.984 && p.drive_max_v() < 3.985,
            "high rail {}",
            p.drive_max_v()
        );

        assert_eq!(p.adc_lsb_pa(), 125, "ADC step must be exactly 0.125 nA");
        assert!((p.adc_lsb_a() - 0.125e-9).abs() < 1e-24);
        assert_eq!(p.transimpedance(), 1e6, "1 mV per nA");

        // Every drive request lands within half a composite LSB.
        let mut dev = Device::new(DeviceConfig {
            mode: Mode::Ideal,
            seed: Some(0),
            ..Default::default()
        })
        .unwrap();
        let half_lsb = p.composite_lsb_v() * 1000.0 / 2.0;
        for mv in (-4000..=3984).step_by(8) {
            dev.set_voltage(0, mv).unwrap();
            let got = dev.get_voltage_mv(0).unwrap();
            assert!(
                (got - mv as f64).abs() <= half_lsb + 1e-9,
                "request {mv} mV produced {got} mV"
            );
        }

        assert!(t0.elapsed() < Duration::from_secs(1), "took {:?}", t0.elapsed());
    });
}

// ---------------------------------------------------------------------- 2 --

#[test]
fn acceptance_2_characterization_accuracy() {
    scorecard(2, "characterization accuracy", || {
        // Noisy, fixed seed: integral nonlinearity under 0.5% FS on the
        // output sweep and 1% FS on the input sweep.
        let d_noisy = out_dir("char-noisy");
        let t0 = Instant::now();
        run_cli(&[
            "--out", d_noisy.to_str().unwrap(),
            "--seed", "7",
            "--mode", "noisy",
            "characterize",
        ]);
        assert!(t0.elapsed() < Duration::from_secs(10), "noisy run {:?}", t0.elapsed());
        let kv = read_kv(&d_noisy.join("characterize_summary.csv"));
        let out_pct = num(&kv, "output_error_pct_fs");
        let in_pct = num(&kv, "input_error_pct_fs");
        assert!(out_pct < 0.5, "output sweep error {out_pct}% FS");
        assert!(in_pct < 1.0, "input sweep error {in_pct}% FS");

        // Ideal mode recovers the 1 MOhm reference within 0.05%.
        let d_ideal = out_dir("char-ideal");
        let t0 = Instant::now();
        run_cli(&["--out", d_ideal.to_str().unwrap(), "--mode", "ideal", "characterize"]);
        assert!(t0.elapsed() < Duration::from_secs(10), "ideal run {:?}", t0.elapsed());
        let kv = read_kv(&d_ideal.join("characterize_summary.csv"));
        let err_pct = num(&kv, "fitted_load_error_pct");
        assert!(err_pct.abs() <= 0.05, "ideal 1 MOhm fit off by {err_pct}%");

        // A 0.997 MOhm load, measured noisy, still fits inside
        // [0.99, 1.02] MOhm.
        let d_997 = out_dir("char-997k");
        let t0 = Instant::now();
        run_cli(&[
            "--out", d_997.to_str().unwrap(),
            "--seed", "7",
            "--mode", "noisy",
            "characterize",
            "--load-ohm", "997000",
        ]);
        assert!(t0.elapsed() < Duration::from_secs(10), "997k run {:?}", t0.elapsed());
        let kv = read_kv(&d_997.join("characterize_summary.csv"));
        let fitted = num(&kv, "fitted_load_ohm");
        assert!(
            (0.99e6..=1.02e6).contains(&fitted),
            "997 kOhm load fitted as {fitted} Ohm"
        );
    });
}

// ---------------------------------------------------------------------- 3 --

fn read_peaks(path: &Path) -> Vec<(String, f64)> {
    let text = fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f.len(), 4, "bad peak row `{l}`");
            assert_eq!(f[0], "0", "single sweep must report cycle 0: `{l}`");
            (f[1].to_string(), f[2].parse::<f64>().unwrap())
        })
        .collect()
}

#[test]
fn acceptance_3_voltammogram_peak_recovery() {
    scorecard(3, "voltammogram peak recovery", || {
        let d_base = out_dir("cv-base");
        run_cli(&[
            "--out", d_base.to_str().unwrap(),
            "--seed", "11",
            "--mode", "noisy",
            "cv",
            "--rate", "100",
        ]);
        let base = read_peaks(&d_base.join("cv_100_peaks.csv"));
        assert_eq!(base.len(), 4, "expected 4 peaks, got {base:?}");

        // Sorted by position: cathodic -750 is a reduction valley flanked by
        // the anodic pair; branch labels must match the electrode process.
        let expect = [(-750.0, "anodic"), (-650.0, "cathodic"), (-200.0, "cathodic"), (150.0, "anodic")];
        for (k, ((branch, v_mv), (v_ref, b_ref))) in base.iter().zip(expect).enumerate() {
            assert!(
                (v_mv - v_ref).abs() <= 10.0,
                "peak {k} at {v_mv} mV, expected {v_ref} +/- 10 mV"
            );
            assert_eq!(branch, b_ref, "peak {k} branch");
        }

        // A +50 mV reference-electrode offset moves every peak by 50 +/- 5.
        let d_off = out_dir("cv-offset");
        run_cli(&[
            "--out", d_off.to_str().unwrap(),
            "--seed", "11",
            "--mode", "noisy",
            "cv",
            "--rate", "100",
            "--offset-mv", "50",
        ]);
        let shifted = read_peaks(&d_off.join("cv_100_peaks.csv"));
        assert_eq!(shifted.len(), 4, "expected 4 shifted peaks, got {shifted:?}");
        for (k, ((_, v_base), (branch, v_shift))) in base.iter().zip(&shifted).enumerate() {
            let shift = v_shift - v_base;
            assert!(
                (shift - 50.0).abs() <= 5.0,
                "peak {k} ({branch}) shifted {shift} mV, expected 50 +/- 5"
            );
        }
    });
}

// ---------------------------------------------------------------------- 4 --

#[test]
fn acceptance_4_electrode_cycling_exclusivity() {
    scorecard(4, "electrode cycling exclusivity and anticorrelation", || {
        let d = out_dir("ionpump");
        let t0 = Instant::now();
        run_cli(&["--out", d.to_str().unwrap(), "--seed", "3", "ionpump"]);
        assert!(t0.elapsed() < Duration::from_secs(30), "took {:?}", t0.elapsed());

        let kv = read_kv(&d.join("ionpump_summary.csv"));
        assert_eq!(num(&kv, "active_electrodes") as u32, 7);
        assert_eq!(kv["electrode_order"], "0 1 2 4 6 7 8");
        // Each electrode is driven for one 30 s window (450 samples at
        // 15 Hz), split into two 15 s polarity half-phases of 225.
        assert_eq!(num(&kv, "samples_per_electrode_min") as u32, 450);
        assert_eq!(num(&kv, "samples_per_electrode_max") as u32, 450);
        assert_eq!(num(&kv, "n_phases") as u32, 14);
        assert_eq!(num(&kv, "samples_per_phase_min") as u32, 225);
        assert_eq!(num(&kv, "samples_per_phase_max") as u32, 225);

        let rho = num(&kv, "spearman_rho");
        assert!(rho < -0.9, "drive/fluorescence-delta rank correlation {rho}");

        // Hardware constraint: never two closed switches in one scan tick.
        let log = fs::read_to_string(d.join("ionpump_log.csv")).unwrap();
        let mut cur_t = "";
        let mut closed_here = 0u32;
        let mut checked = 0u64;
        for line in log.lines() {
            if line.starts_with('#') || line.starts_with("t_s") {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f[0] != cur_t {
                assert!(closed_here <= 1, "t={cur_t}: {closed_here} switches closed");
                cur_t = f[0];
                closed_here = 0;
                checked += 1;
            }
            if f[3] == "1" {
                closed_here += 1;
            }
        }
        assert!(closed_here <= 1);
        assert!(checked > 3000, "log looks truncated: {checked} ticks");
    });
}

// ---------------------------------------------------------------------- 5 --

#[test]
fn acceptance_5_closed_loop_tracking() {
    scorecard(5, "closed-loop tracking", || {
        let d = out_dir("closedloop");
        run_cli(&["--out", d.to_str().unwrap(), "--seed", "1", "--mode", "ideal", "closedloop"]);

        let text = fs::read_to_string(d.join("closedloop_trace.csv")).unwrap();
        let rows = minipot::control::parse_trace(&text).unwrap();
        assert!(rows.len() >= 140, "300 s at a 2 s period, got {} rows", rows.len());
        assert!(rows.last().unwrap().t_s <= 300.0 + 1e-6);

        for r in &rows {
            assert!(
                r.u_mv.abs() <= 1400,
                "t={}: actuation {} mV outside +/-1.4 V",
                r.t_s,
                r.u_mv
            );
        }
        // The 0.50 -> 0.55 setpoint step at t = 10 s settles inside 2%
        // relative error well before the 300 s budget and stays there.
        let target_at = |t: f64| if t < 10.0 { 0.5 } else { 0.55 };
        let tail: Vec<_> = rows.iter().filter(|r| r.t_s >= 150.0).collect();
        assert!(!tail.is_empty());
        for r in &tail {
            let rel = (r.measured - target_at(r.t_s)).abs() / target_at(r.t_s);
            assert!(rel < 0.02, "t={}: {:.4} is {:.2}% off target", r.t_s, r.measured, rel * 100.0);
        }
    });
}

// ---------------------------------------------------------------------- 6 --

#[test]
fn acceptance_6_offset_calibration() {
    scorecard(6, "offset calibration", || {
        // Ideal mode: +/-1 nA injected offsets null exactly.
        let mut dev = Device::new(DeviceConfig {
            mode: Mode::Ideal,
            seed: Some(4),
            time_mode: TimeMode::unpaced(),
            ..Default::default()
        })
        .unwrap();
        dev.set_offset_a(2, 1e-9).unwrap();
        dev.set_offset_a(6, -1e-9).unwrap();

        // Calibrate through the wire verb, as an operator would.
        let mut state = ServerState::new(dev);
        assert_eq!(handle_datagram(&mut state, b"CAL 200\n"), b"OK\n");
        assert_eq!(state.device.baseline_pa(2).unwrap(), 1000);
        assert_eq!(state.device.baseline_pa(6).unwrap(), -1000);
        let dt = state.device.tick_dt();
        for _ in 0..50 {
            for s in state.device.sample_all(dt) {
                assert_eq!(s.current_pa, 0, "ch{} reads {} pA after CAL", s.channel, s.current_pa);
            }
        }

        // Noisy mode: the post-calibration mean lands within one ADC step.
        let mut dev = Device::new(DeviceConfig {
            mode: Mode::Noisy,
            seed: Some(5),
            time_mode: TimeMode::unpaced(),
            ..Default::default()
        })
        .unwrap();
        dev.set_offset_a(2, 1e-9).unwrap();
        dev.set_offset_a(6, -1e-9).unwrap();
        dev.calibrate(2000).unwrap();
        assert!((dev.baseline_pa(2).unwrap() - 1000).abs() <= 125);
        assert!((dev.baseline_pa(6).unwrap() + 1000).abs() <= 125);

        let dt = dev.tick_dt();
        let n = 2000;
        let mut sums = [0i64; 8];
        for _ in 0..n {
            for s in dev.sample_all(dt) {
                sums[s.channel as usize] += s.current_pa;
            }
        }
        for (ch, sum) in sums.iter().enumerate() {
            let mean = *sum as f64 / n as f64;
            assert!(mean.abs() <= 125.0, "ch{ch}: residual offset {mean} pA");
        }
    });
}

// ---------------------------------------------------------------------- 7 --

fn random_valid(rng: &mut StdRng) -> Vec<u8> {
    use minipot::wire::{encode, Command};
    let name_chars =
        b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.-";
    let cmd = match rng.random_range(0..9u32) {
        0 => Command::Ping,
        1 => Command::Info,
        2 => Command::Set { ch: rng.random_range(0..16), mv: rng.random_range(-4500..4500) },
        3 => Command::Sw { ch: rng.random_range(0..16), closed: rng.random_bool(0.5) },
        4 => Command::GetI { ch: rng.random_range(0..16) },
        5 => Command::GetV { ch: rng.random_range(0..16) },
        6 => Command::Cal { n: rng.random_range(1..=50) },
        7 => {
            let len = rng.random_range(1..12usize);
            let name: String = (0..len)
                .map(|_| name_chars[rng.random_range(0..name_chars.len())] as char)
                .collect();
            Command::Run { name }
        }
        _ => Command::Stop,
    };
    encode(&cmd)
}

fn random_malformed(rng: &mut StdRng) -> Vec<u8> {
    match rng.random_range(0..4u32) {
        // Arbitrary bytes, newline not guaranteed.
        0 => {
            let len = rng.random_range(0..80usize);
            (0..len).map(|_| rng.random::<u8>()).collect()
        }
        // ASCII junk line.
        1 => {
            let len = rng.random_range(0..40usize);
            let mut v: Vec<u8> =
                (0..len).map(|_| rng.random_range(0x20..0x7fu8)).collect();
            v.push(b'\n');
            v
        }
        // A valid frame with its terminator chopped off.
        2 => {
            let mut v = random_valid(rng);
            v.pop();
            v
        }
        // Oversized datagram.
        _ => vec![b'A'; 600],
    }
}

#[test]
fn acceptance_7_wire_robustness() {
    scorecard(7, "wire robustness", || {
        let dev = Device::new(DeviceConfig {
            mode: Mode::Ideal,
            seed: Some(6),
            time_mode: TimeMode::unpaced(),
            ..Default::default()
        })
        .unwrap();
        let mut state = ServerState::new(dev);
        let mut rng = StdRng::seed_from_u64(42);

        let mut err_codes = [0u64; 5];
        for k in 0..100_000u32 {
            let datagram =
                if k % 2 == 0 { random_malformed(&mut rng) } else { random_valid(&mut rng) };
            let reply = handle_datagram(&mut state, &datagram);
            // Exactly one well-formed reply per datagram, no matter what
            // came in.
            assert!(!reply.is_empty(), "datagram {k}: empty reply");
            assert_eq!(reply.last(), Some(&b'\n'), "datagram {k}: unterminated reply");
            let text = String::from_utf8(reply).expect("replies are ASCII");
            assert_eq!(text.lines().count(), 1, "datagram {k}: one reply line");
            if let Some(rest) = text.strip_prefix("ERR ") {
                let code: u8 = rest
                    .split_whitespace()
                    .next()
                    .and_then(|c| c.parse().ok())
                    .unwrap_or_else(|| panic!("datagram {k}: bad error frame `{text}`"));
                assert!(matches!(code, 1..=4), "datagram {k}: error code {code}");
                err_codes[code as usize] += 1;
            } else {
                assert!(
                    text == "OK\n" || text.starts_with("OK "),
                    "datagram {k}: unrecognized reply `{text}`"
                );
            }
        }
        // The barrage must actually have exercised the parse/range/state
        // error space.
        assert!(err_codes[1] > 10_000, "parse errors {err_codes:?}");
        assert!(err_codes[2] > 100, "range errors {err_codes:?}");
        assert!(err_codes[4] > 100, "unsupported errors {err_codes:?}");

        // Codec round-trips: whatever encode produces, decode returns.
        use minipot::wire::decode;
        for k in 0..10_000u32 {
            let frame = random_valid(&mut rng);
            let cmd = decode(&frame)
                .unwrap_or_else(|e| panic!("round-trip {k}: {frame:?} rejected: {e:?}"));
            assert_eq!(minipot::wire::encode(&cmd), frame, "round-trip {k}");
        }

        // And the server is still coherent afterwards.
        assert_eq!(handle_datagram(&mut state, b"PING\n"), b"OK PONG\n");
    });
}

// ---------------------------------------------------------------------- 8 --

#[test]
fn acceptance_8_full_array_realtime_throughput() {
    scorecard(8, "64-channel realtime throughput", || {
        let run = |path: &Path| -> Duration {
            let mut dev = Device::new(DeviceConfig {
                n_boards: 8,
                mode: Mode::Noisy,
                seed: Some(99),
                time_mode: TimeMode::unpaced(),
                ..Default::default()
            })
            .unwrap();
            assert_eq!(dev.n_channels(), 64);
            dev.open_log(path).unwrap();
            let dt = dev.tick_dt(); // 64 channels per scan at 860 S/s/board
            let ticks = (60.0 / dt).round() as u64;
            let t0 = Instant::now();
            for k in 0..ticks {
                // Deterministic mid-run activity across the bank.
                if k == 500 {
                    for ch in (0..64).step_by(7) {
                        dev.set_voltage(ch, 1000 + ch as i32).unwrap();
                        dev.set_switch(ch, true).unwrap();
                    }
                }
                if k == 4000 {
                    for ch in (0..64).step_by(7) {
                        dev.set_switch(ch, false).unwrap();
                    }
                }
                dev.sample_all(dt);
            }
            let elapsed = t0.elapsed();
            dev.close_log().unwrap();
            assert!((dev.time_s() - 60.0).abs() < 1e-6, "sim clock {}", dev.time_s());
            elapsed
        };

        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("r1.csv"), dir.path().join("r2.csv"));
        let e1 = run(&p1);
        let e2 = run(&p2);

        // Real-time factor >= 1: 60 simulated seconds inside 60 wall
        // seconds (with a wide margin in practice).
        assert!(e1 < Duration::from_secs(60), "run 1 RTF < 1: {e1:?}");
        assert!(e2 < Duration::from_secs(60), "run 2 RTF < 1: {e2:?}");

        let (b1, b2) = (fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(b1, b2, "same-seed logs must be byte-identical");

        let text = String::from_utf8(b1).unwrap();
        let rows = text.lines().filter(|l| !l.starts_with('#') && !l.starts_with("t_s")).count();
        assert_eq!(rows, 6450 * 64, "60 s x 860 S/s/board x 8 boards");
    });
}
