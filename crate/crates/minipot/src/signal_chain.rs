//! Analog signal chain of one potentiostat channel.
//!
//! Models the full path from a drive request to a current reading:
//! 12-bit DAC -> level shifter (Vo = 2.42*Vin - 4) -> analog switch ->
//! shunt ammeter (10 kOhm * 100 = 1 mV/nA) -> mid-rail shift + RC low-pass
//! -> 125 uV ADC. All stages are pure state transitions; the only mutable
//! state is the one-pole filter.

use crate::cell::Cell;

/// Analog constants of the channel signal chain.
///
/// Defaults mirror the production board; fields are public so tests and
/// what-if runs can build variants.
#[derive(Debug, Clone)]
pub struct SignalChainParams {
    /// DAC resolution in bits.
    pub dac_bits: u32,
    /// DAC full-scale output, volts.
    pub dac_fullscale_v: f64,
    /// Level-shifter gain (dimensionless).
    pub shift_gain: f64,
    /// Level-shifter offset, volts.
    pub shift_offset_v: f64,
    /// Shunt resistor, ohms.
    pub shunt_ohm: f64,
    /// Instrumentation amplifier gain (dimensionless).
    pub amp_gain: f64,
    /// ADC step size, volts.
    pub adc_lsb_v: f64,
    /// ADC input window upper rail, volts (lower rail is 0).
    pub adc_range_v: f64,
    /// Mid-rail shift applied before the ADC, volts.
    pub input_shift_v: f64,
    /// Low-pass cut-off frequency, Hz.
    pub lpf_cutoff_hz: f64,
    /// Worst-case open-switch leak, amps.
    pub switch_leak_a: f64,
    /// Amplifier output noise sigma, amps (referred to input current).
    pub noise_sigma_a: f64,
    /// Aggregate sampling budget per board, samples/s.
    pub max_sample_rate_hz: f64,
}

impl Default for SignalChainParams {
    fn default() -> Self {
        SignalChainParams {
            dac_bits: 12,
            dac_fullscale_v: 3.3,
            shift_gain: 2.42,
            shift_offset_v: -4.0,
            shunt_ohm: 10_000.0,
            amp_gain: 100.0,
            adc_lsb_v: 125e-6,
            adc_range_v: 3.3,
            input_shift_v: 1.65,
            lpf_cutoff_hz: 72.0,
            switch_leak_a: 10e-12,
            noise_sigma_a: 0.8e-9,
            max_sample_rate_hz: 860.0,
        }
    }
}

impl SignalChainParams {
    /// Number of DAC codes (2^bits).
    pub fn dac_steps(&self) -> u32 {
        1 << self.dac_bits
    }

    /// Transimpedance of the ammeter, V/A.
    pub fn transimpedance(&self) -> f64 {
        self.shunt_ohm * self.amp_gain
    }

    /// Drive resolution after the level shifter, volts.
    pub fn composite_lsb_v(&self) -> f64 {
        self.dac_fullscale_v / self.dac_steps() as f64 * self.shift_gain
    }

    /// Current represented by one ADC step, amps.
    pub fn adc_lsb_a(&self) -> f64 {
        self.adc_lsb_v / self.transimpedance()
    }

    /// Current represented by one ADC step, integer picoamps.
    pub fn adc_lsb_pa(&self) -> i64 {
        (self.adc_lsb_a() * 1e12).round() as i64
    }

    /// Full-scale current reading, amps (positive rail).
    pub fn current_fullscale_a(&self) -> f64 {
        self.input_shift_v / self.transimpedance()
    }

    /// Lowest reachable drive voltage (code 0), volts.
    pub fn drive_min_v(&self) -> f64 {
        self.level_shift(0.0)
    }

    /// Highest reachable drive voltage (max code), volts.
    pub fn drive_max_v(&self) -> f64 {
        let max_code = self.dac_steps() - 1;
        self.level_shift(self.dac_voltage(max_code as u16))
    }

    /// Quantize a requested DAC voltage to the nearest code.
    ///
    /// Requests outside [0, full-scale] saturate; never errors.
    pub fn dac_quantize(&self, v_request: f64) -> (u16, f64) {
        let steps = self.dac_steps() as f64;
        let v = v_request.clamp(0.0, self.dac_fullscale_v);
        let code = ((v / self.dac_fullscale_v * steps).round() as u32).min(self.dac_steps() - 1);
        (code as u16, self.dac_voltage(code as u16))
    }

    /// Ideal DAC output for a code.
    pub fn dac_voltage(&self, code: u16) -> f64 {
        code as f64 * self.dac_fullscale_v / self.dac_steps() as f64
    }

    /// Level shifter: maps the DAC span onto the bipolar drive range.
    pub fn level_shift(&self, v_dac: f64) -> f64 {
        self.shift_gain * v_dac + self.shift_offset_v
    }

    /// Inverse of [`level_shift`](Self::level_shift): DAC voltage needed for
    /// a wanted drive voltage.
    pub fn level_unshift(&self, v_out: f64) -> f64 {
        (v_out - self.shift_offset_v) / self.shift_gain
    }

    /// DAC code whose shifted output lands nearest to `mv` millivolts.
    pub fn drive_code_for_mv(&self, mv: i32) -> u16 {
        self.dac_quantize(self.level_unshift(mv as f64 / 1000.0)).0
    }

    /// Quantized drive voltage actually produced for a request in mV.
    pub fn quantized_drive_v(&self, mv: i32) -> f64 {
        self.level_shift(self.dac_voltage(self.drive_code_for_mv(mv)))
    }

    /// Analog switch: closed passes the cell current, open leaks at most
    /// `switch_leak_a` (sign-preserving clamp).
    pub fn switch_current(&self, closed: bool, i_cell: f64) -> f64 {
        if closed {
            i_cell
        } else {
            i_cell.clamp(-self.switch_leak_a, self.switch_leak_a)
        }
    }

    /// Shunt ammeter: channel current to amplifier output voltage,
    /// clamped at the measurement rails.
    pub fn sense_current(&self, i_channel: f64) -> f64 {
        (i_channel * self.transimpedance()).clamp(-self.input_shift_v, self.input_shift_v)
    }

    /// Mid-rail shift plus one-pole low-pass, advanced by `dt`.
    ///
    /// `noise_v` is an already-drawn noise sample in volts (0.0 in ideal
    /// mode); it enters before the filter like the physical amplifier noise.
    pub fn shift_and_filter(
        &self,
        v_amp: f64,
        state: &mut FilterState,
        dt: f64,
        noise_v: f64,
    ) -> f64 {
        debug_assert!(dt > 0.0, "filter step needs positive dt");
        let u = v_amp + self.input_shift_v + noise_v;
        if !state.initialized {
            state.y = u;
            state.initialized = true;
        } else {
            let alpha = 1.0 - (-2.0 * std::f64::consts::PI * self.lpf_cutoff_hz * dt).exp();
            state.y += alpha * (u - state.y);
        }
        state.y
    }

    /// ADC conversion: shifted voltage to a signed reading in picoamps.
    ///
    /// Clamps at the input window, rounds to the nearest step; the result is
    /// always a multiple of [`adc_lsb_pa`](Self::adc_lsb_pa).
    pub fn adc_read_pa(&self, v_adc_in: f64) -> i64 {
        let v = v_adc_in.clamp(0.0, self.adc_range_v);
        let half_span = (self.input_shift_v / self.adc_lsb_v).round() as i64;
        let lsb = ((v - self.input_shift_v) / self.adc_lsb_v).round() as i64;
        lsb.clamp(-half_span, half_span) * self.adc_lsb_pa()
    }

    /// Same conversion reported in nanoamps.
    pub fn adc_read_na(&self, v_adc_in: f64) -> f64 {
        self.adc_read_pa(v_adc_in) as f64 / 1000.0
    }
}

/// State of the channel's anti-aliasing low-pass.
#[derive(Debug, Clone, Default)]
pub struct FilterState {
    /// Last filter output, volts.
    pub y: f64,
    /// Whether the filter has seen its first sample.
    pub initialized: bool,
}

impl FilterState {
    pub fn new() -> Self {
        FilterState::default()
    }

    /// Forget the preset; the next sample re-initializes.
    pub fn reset(&mut self) {
        self.initialized = false;
        self.y = 0.0;
    }
}

/// One full measurement tick of a channel: drive the cell (or leak when the
/// switch is open), sense, filter and digitize. Returns the raw reading in
/// picoamps (baseline subtraction happens in the device layer).
#[allow(clippy::too_many_arguments)]
pub fn chain_step(
    params: &SignalChainParams,
    drive_v: f64,
    switch_closed: bool,
    offset_a: f64,
    cell: &mut Cell,
    filter: &mut FilterState,
    dt: f64,
    noise_v: f64,
) -> i64 {
    let i_switch = if switch_closed {
        let i_cell = cell
            .current(drive_v, dt)
            .expect("quantized drive voltage is always finite");
        params.switch_current(true, i_cell)
    } else {
        // The open switch still sees the drive on one side; whatever the cell
        // would sink is throttled to the leak spec. The cell itself is not
        // driven and only relaxes.
        let i_would = cell.peek_current(drive_v);
        cell.relax(dt);
        params.switch_current(false, i_would)
    };
    let v_amp = params.sense_current(i_switch + offset_a);
    let v_filt = params.shift_and_filter(v_amp, filter, dt, noise_v);
    params.adc_read_pa(v_filt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::Cell;

    fn p() -> SignalChainParams {
        SignalChainParams::default()
    }

    #[test]
    fn dac_quantize_endpoints_and_midpoint() {
        let p = p();
        assert_eq!(p.dac_quantize(0.0), (0, 0.0));
        let (code, v) = p.dac_quantize(3.3);
        assert_eq!(code, 4095);
        assert!((v - 3.29919).abs() < 5e-6, "full-scale clamps to top code, got {v}");
        let (code, v) = p.dac_quantize(1.65);
        assert_eq!(code, 2048);
        assert!((v - 1.65).abs() < 1e-12);
    }

    #[test]
    fn dac_quantize_saturates_outside_range() {
        let p = p();
        assert_eq!(p.dac_quantize(-1.0).0, 0);
        assert_eq!(p.dac_quantize(5.0).0, 4095);
    }

    #[test]
    fn level_shift_matches_board_transfer() {
        let p = p();
        assert!((p.level_shift(0.0) - (-4.0)).abs() < 1e-12);
        assert!((p.level_shift(3.3) - 3.986).abs() < 1e-3);
        // Vin for a 0 V output.
        assert!(p.level_shift(1.652893).abs() < 1e-5);
        // Inverse really inverts.
        for v in [-4.0, -1.0, 0.0, 2.5, 3.984] {
            assert!((p.level_shift(p.level_unshift(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_resolution_is_about_1_95_mv() {
        let p = p();
        let lsb_mv = p.composite_lsb_v() * 1000.0;
        assert!(
            (lsb_mv - 1.95).abs() < 0.01,
            "composite LSB {lsb_mv} mV should be 1.95 +/- 0.01 mV"
        );
    }

    #[test]
    fn drive_range_is_minus_4_to_plus_3_984() {
        let p = p();
        assert!((p.drive_min_v() - (-4.0)).abs() < 1e-12);
        assert!(p.drive_max_v() >= 3.984 && p.drive_max_v() < 3.985);
    }

    #[test]
    fn switch_clamps_to_leak_spec() {
        let p = p();
        assert_eq!(p.switch_current(true, 500e-9), 500e-9);
        assert_eq!(p.switch_current(false, 500e-9), 10e-12);
        assert_eq!(p.switch_current(false, -500e-9), -10e-12);
        assert_eq!(p.switch_current(false, 0.0), 0.0);
        assert_eq!(p.switch_current(false, 4e-12), 4e-12);
    }

    #[test]
    fn sense_is_1_mv_per_na_with_rails() {
        let p = p();
        assert!((p.sense_current(1e-9) - 1e-3).abs() < 1e-15);
        assert!((p.sense_current(-1650e-9) - (-1.65)).abs() < 1e-12);
        assert_eq!(p.sense_current(2000e-9), 1.65);
    }

    #[test]
    fn shift_and_filter_presets_on_first_sample() {
        let p = p();
        let mut st = FilterState::new();
        let y = p.shift_and_filter(0.0, &mut st, 1.0 / 860.0, 0.0);
        assert!((y - 1.65).abs() < 1e-12, "zero current maps to mid-rail");
    }

    #[test]
    fn filter_settles_to_constant_input() {
        let p = p();
        let mut st = FilterState::new();
        let mut y = 0.0;
        for _ in 0..100 {
            y = p.shift_and_filter(1.0, &mut st, 1.0 / 860.0, 0.0);
        }
        assert!((y - 2.65).abs() / 2.65 < 0.001, "settled output {y} should be 2.65 +/- 0.1%");
    }

    #[test]
    fn filter_first_step_after_zero_is_alpha_sized() {
        let p = p();
        let dt = 1.0 / 860.0;
        let mut st = FilterState::new();
        p.shift_and_filter(0.0, &mut st, dt, 0.0); // preset at 1.65
        let y = p.shift_and_filter(1.0, &mut st, dt, 0.0);
        let alpha = 1.0 - (-2.0 * std::f64::consts::PI * 72.0 * dt).exp();
        assert!((y - (1.65 + alpha)).abs() < 1e-12);
    }

    #[test]
    fn filter_reaches_within_1pct_in_5_time_constants() {
        let p = p();
        let dt = 1.0 / 860.0;
        let mut st = FilterState::new();
        p.shift_and_filter(0.0, &mut st, dt, 0.0);
        // 5 time constants of the 72 Hz pole.
        let steps = (5.0 / (2.0 * std::f64::consts::PI * 72.0) / dt).ceil() as usize;
        let mut y = 0.0;
        for _ in 0..steps {
            y = p.shift_and_filter(1.0, &mut st, dt, 0.0);
        }
        assert!((y - 2.65).abs() < 0.01 * 2.65);
    }

    #[test]
    fn adc_read_oracle_points() {
        let p = p();
        assert_eq!(p.adc_read_pa(1.65), 0);
        assert_eq!(p.adc_read_pa(1.651), 1000);
        // 62.6 uV above mid-rail is 0.5008 LSB and rounds up to one step.
        assert_eq!(p.adc_read_pa(1.6500626), 125);
        // Just under half an LSB rounds down to zero.
        assert_eq!(p.adc_read_pa(1.6500624), 0);
        assert!((p.adc_read_na(1.651) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adc_clamps_at_rails() {
        let p = p();
        assert_eq!(p.adc_read_pa(3.3), 1_650_000);
        assert_eq!(p.adc_read_pa(9.9), 1_650_000);
        assert_eq!(p.adc_read_pa(0.0), -1_650_000);
        assert_eq!(p.adc_read_pa(-2.0), -1_650_000);
    }

    #[test]
    fn adc_lsb_is_exactly_125_pa() {
        let p = p();
        assert_eq!(p.adc_lsb_pa(), 125);
        assert!((p.adc_lsb_a() - 0.125e-9).abs() < 1e-24);
        assert_eq!(p.transimpedance(), 1e6);
    }

    #[test]
    fn chain_step_full_scale_on_1_meg_load() {
        let p = p();
        let mut cell = Cell::resistor(1e6);
        let mut filter = FilterState::new();
        let drive = p.quantized_drive_v(1650);
        let pa = chain_step(&p, drive, true, 0.0, &mut cell, &mut filter, 1.0 / 860.0, 0.0);
        assert!(
            (pa - 1_650_000).abs() <= 125,
            "full-scale reading {pa} pA should be 1650 nA +/- 1 LSB"
        );
    }

    #[test]
    fn chain_step_open_switch_reads_zero() {
        let p = p();
        let mut cell = Cell::resistor(1e6);
        let mut filter = FilterState::new();
        let drive = p.quantized_drive_v(1000);
        let pa = chain_step(&p, drive, false, 0.0, &mut cell, &mut filter, 1.0 / 860.0, 0.0);
        assert!(pa.abs() <= 125, "leakage reads below one LSB, got {pa} pA");
    }

    #[test]
    fn set_zero_readback_within_one_lsb() {
        let p = p();
        let v = p.quantized_drive_v(0);
        assert!(v.abs() * 1000.0 < 1.95, "0 mV request lands within one composite LSB, got {v} V");
    }

    #[test]
    fn set_minus_4000_is_exact_code_zero() {
        let p = p();
        assert_eq!(p.drive_code_for_mv(-4000), 0);
        assert!((p.quantized_drive_v(-4000) - (-4.0)).abs() < 1e-12);
    }
}
