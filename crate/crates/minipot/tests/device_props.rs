//! Device-level behaviour: per-channel noise stream independence, log file
//! completeness, calibration statistics, and command validation.

use std::fs;

use minipot::device::{Device, DeviceConfig, DeviceError, Mode, TimeMode};
use proptest::prelude::*;

fn noisy(seed: u64, n_boards: u32) -> Device {
    Device::new(DeviceConfig {
        n_boards,
        mode: Mode::Noisy,
        seed: Some(seed),
        time_mode: TimeMode::unpaced(),
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn channel_noise_streams_are_independent_of_neighbours() {
    // Same seed, two devices; on one of them channel 0 is driven hard and
    // sampled identically. Channel 3 must read exactly the same either way:
    // activity elsewhere cannot disturb a channel's noise stream.
    let mut quiet = noisy(42, 1);
    let mut busy = noisy(42, 1);
    busy.set_voltage(0, 3000).unwrap();
    busy.set_switch(0, true).unwrap();

    let dt = 1.0 / 860.0;
    let mut a = Vec::new();
    let mut b = Vec::new();
    for k in 0..500 {
        if k == 250 {
            busy.set_voltage(0, -2500).unwrap();
        }
        a.push(quiet.sample_all(dt)[3].current_pa);
        b.push(busy.sample_all(dt)[3].current_pa);
    }
    assert_eq!(a, b, "channel 3 must not feel channel 0 activity");
}

#[test]
fn same_seed_same_readings_different_seed_different() {
    let mut d1 = noisy(7, 1);
    let mut d2 = noisy(7, 1);
    let mut d3 = noisy(8, 1);
    let dt = 1.0 / 860.0;
    let r1: Vec<i64> = (0..200).map(|_| d1.sample_all(dt)[0].current_pa).collect();
    let r2: Vec<i64> = (0..200).map(|_| d2.sample_all(dt)[0].current_pa).collect();
    let r3: Vec<i64> = (0..200).map(|_| d3.sample_all(dt)[0].current_pa).collect();
    assert_eq!(r1, r2);
    assert_ne!(r1, r3, "different seeds should not replay the same noise");
}

#[test]
fn log_records_every_sample_and_command_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dev.csv");
    let mut dev = noisy(3, 1);
    dev.open_log(&path).unwrap();

    let dt = 1.0 / 15.0;
    dev.set_voltage(2, 1200).unwrap();
    dev.set_switch(2, true).unwrap();
    for _ in 0..10 {
        dev.sample_all(dt);
    }
    dev.set_voltage(2, -800).unwrap();
    for _ in 0..10 {
        dev.sample_all(dt);
    }
    dev.set_switch(2, false).unwrap();
    dev.close_log().unwrap();

    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# minipot log v1");
    assert_eq!(lines[1], "# started deterministic", "seeded runs must not leak wall-clock time");
    assert!(lines.iter().any(|l| l.starts_with("# seed 3")));
    assert!(lines.contains(&"t_s,channel,set_mV,switch,current_pA"));

    let data_rows: Vec<&str> = lines.iter().filter(|l| !l.starts_with('#') && l.contains(',') && !l.starts_with("t_s")).copied().collect();
    assert_eq!(data_rows.len(), 20 * 8, "ticks x channels data rows");

    // Commands appear as annotated markers with nondecreasing timestamps.
    let cmds: Vec<&str> = lines.iter().filter(|l| l.starts_with("# cmd t=")).copied().collect();
    assert_eq!(cmds.len(), 4, "set, sw, set, sw: {cmds:?}");
    let times: Vec<f64> = cmds
        .iter()
        .map(|l| l.split("t=").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap())
        .collect();
    assert!(times.windows(2).all(|w| w[0] <= w[1]), "command times must be ordered: {times:?}");
    assert!(cmds[0].contains("set ch=2 mv=1200"));
    assert!(cmds[1].contains("sw ch=2 closed=1"));

    // Every data row's timestamp is also nondecreasing and the channel
    // column cycles 0..8.
    let mut prev_t = 0.0;
    for (k, row) in data_rows.iter().enumerate() {
        let mut it = row.split(',');
        let t: f64 = it.next().unwrap().parse().unwrap();
        let ch: usize = it.next().unwrap().parse().unwrap();
        assert!(t >= prev_t);
        prev_t = t;
        assert_eq!(ch, k % 8);
    }
}

#[test]
fn calibration_nulls_injected_offsets() {
    let mut dev = noisy(17, 1);
    // +500 pA and -800 pA input-referred offsets on two channels.
    dev.set_offset_a(1, 500e-12).unwrap();
    dev.set_offset_a(5, -800e-12).unwrap();

    let baselines = dev.calibrate(500).unwrap();
    // Filter-settled noisy average should land close to the injected
    // offsets (sigma_filtered ~ 0.41 nA, 500-sample mean well inside 150 pA)
    // and exactly on the ADC lattice.
    assert!((baselines[1] - 500).abs() <= 300, "ch1 baseline {}", baselines[1]);
    assert!((baselines[5] + 800).abs() <= 300, "ch5 baseline {}", baselines[5]);
    for b in &baselines {
        assert_eq!(b.rem_euclid(125), 0, "baselines sit on the 125 pA lattice");
    }

    // Post-calibration, open-switch readings scatter around zero.
    let dt = 1.0 / 860.0;
    let mut sums = [0i64; 8];
    for _ in 0..400 {
        for s in dev.sample_all(dt) {
            sums[s.channel as usize] += s.current_pa;
        }
    }
    for (ch, sum) in sums.iter().enumerate() {
        let mean = *sum as f64 / 400.0;
        assert!(mean.abs() < 150.0, "ch{ch} post-cal mean {mean} pA");
    }
}

#[test]
fn ideal_mode_calibration_is_exactly_zero_without_offsets() {
    let mut dev = Device::new(DeviceConfig {
        mode: Mode::Ideal,
        seed: Some(1),
        ..Default::default()
    })
    .unwrap();
    let baselines = dev.calibrate(10).unwrap();
    assert!(baselines.iter().all(|&b| b == 0), "{baselines:?}");
    let s = dev.sample_all(1.0 / 860.0);
    assert!(s.iter().all(|x| x.current_pa == 0));
}

#[test]
fn invalid_commands_leave_state_untouched() {
    let mut dev = noisy(9, 1);
    dev.set_voltage(4, 1500).unwrap();
    dev.set_switch(4, true).unwrap();

    assert!(matches!(dev.set_voltage(8, 100), Err(DeviceError::Channel(8))));
    assert!(matches!(dev.set_voltage(4, 4000), Err(DeviceError::Voltage(4000))));
    assert!(matches!(dev.set_voltage(4, -4001), Err(DeviceError::Voltage(-4001))));
    assert!(matches!(dev.set_switch(12, false), Err(DeviceError::Channel(12))));

    assert_eq!(dev.set_mv(4).unwrap(), 1500, "rejected commands must not alter drive");
    assert!(dev.switch_closed(4).unwrap());
    assert!((dev.get_voltage_mv(4).unwrap() - 1500.0).abs() < 1.0);
}

#[test]
fn boards_scale_channel_count_and_reject_out_of_range() {
    for boards in 1..=8u32 {
        let dev = noisy(1, boards);
        assert_eq!(dev.n_channels(), boards as usize * 8);
    }
    assert!(Device::new(DeviceConfig { n_boards: 0, ..Default::default() }).is_err());
    assert!(Device::new(DeviceConfig { n_boards: 9, ..Default::default() }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn drive_round_trips_within_one_lsb(mv in -4000i32..=3984) {
        let mut dev = Device::new(DeviceConfig {
            mode: Mode::Ideal,
            seed: Some(0),
            ..Default::default()
        }).unwrap();
        dev.set_voltage(0, mv).unwrap();
        let got = dev.get_voltage_mv(0).unwrap();
        // Composite DAC LSB is ~1.95 mV; quantization error stays below
        // half of it.
        prop_assert!((got - mv as f64).abs() <= 0.97485 + 1e-9,
            "set {mv} read back {got}");
    }

    #[test]
    fn out_of_range_drives_are_rejected(mv in prop_oneof![-100_000i32..-4000, 3985i32..100_000]) {
        let mut dev = Device::new(DeviceConfig {
            mode: Mode::Ideal,
            seed: Some(0),
            ..Default::default()
        }).unwrap();
        prop_assert!(dev.set_voltage(0, mv).is_err());
        prop_assert_eq!(dev.set_mv(0).unwrap(), 0);
    }
}
