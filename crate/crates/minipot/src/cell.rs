//! Electrochemical load models.
//!
//! Each channel drives one `Cell`: a plain resistor, a Randles equivalent
//! circuit, a surface-redox cell that reproduces CV peak signatures, or a
//! two-compartment ion pump with a fluorescence proxy. Models are
//! value-semantic: cloning captures the full state for what-if runs.

use thiserror::Error;

/// Faraday constant, C/mol.
pub const FARADAY_C_PER_MOL: f64 = 96_485.0;

#[derive(Debug, Error, PartialEq)]
pub enum CellError {
    #[error("applied voltage is not finite")]
    NonFiniteInput,
}

/// Which scan direction a surface peak responds to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanDirection {
    /// Active while the applied voltage is rising.
    Anodic,
    /// Active while the applied voltage is falling.
    Cathodic,
}

/// One Gaussian current peak of the surface-redox model.
#[derive(Debug, Clone)]
pub struct PeakSpec {
    /// Peak center, volts.
    pub v_center: f64,
    /// Peak height, amps (positive for anodic, negative for cathodic).
    pub height: f64,
    /// Gaussian width parameter, volts.
    pub width: f64,
    pub direction: ScanDirection,
}

impl PeakSpec {
    pub fn new(v_center: f64, height: f64, width: f64, direction: ScanDirection) -> Self {
        assert!(width > 0.0, "peak width must be positive");
        match direction {
            ScanDirection::Anodic => assert!(height > 0.0, "anodic peaks are positive"),
            ScanDirection::Cathodic => assert!(height < 0.0, "cathodic peaks are negative"),
        }
        PeakSpec { v_center, height, width, direction }
    }

    fn current(&self, v: f64, direction: ScanDirection) -> f64 {
        if direction != self.direction {
            return 0.0;
        }
        let x = (v - self.v_center) / self.width;
        self.height * (-x * x).exp()
    }
}

/// Two-compartment ion-pump state: a target well coupled to a reservoir
/// through the pumping electrode, with a passive leak back to equilibrium.
#[derive(Debug, Clone)]
pub struct IonPumpState {
    /// Ion concentration in the target well, mol/m^3.
    pub c_target: f64,
    /// Reservoir (equilibrium) concentration, mol/m^3.
    pub c_reservoir: f64,
    /// Target well volume, m^3.
    pub volume: f64,
    /// Fraction of electronic charge that moves an ion (transference).
    pub transfer_eff: f64,
    /// Passive leak rate back toward the reservoir concentration, 1/s.
    pub leak_rate: f64,
    /// Concentration at which the fluorescence proxy reads 0.5.
    pub c_half: f64,
}

impl IonPumpState {
    pub fn new(
        c_target: f64,
        c_reservoir: f64,
        volume: f64,
        transfer_eff: f64,
        leak_rate: f64,
        c_half: f64,
    ) -> Self {
        assert!(c_target >= 0.0 && c_reservoir >= 0.0, "concentrations must be non-negative");
        assert!(volume > 0.0, "target volume must be positive");
        assert!((0.0..=1.0).contains(&transfer_eff), "transference in 0..1");
        assert!(leak_rate >= 0.0, "leak rate must be non-negative");
        assert!(c_half > 0.0, "c_half must be positive");
        IonPumpState { c_target, c_reservoir, volume, transfer_eff, leak_rate, c_half }
    }

    /// Faradaic bookkeeping: integrate the channel current over `dt` into
    /// moles moved, then apply the passive leak. Positive current adds ions
    /// to the target well.
    pub fn step(&mut self, i_channel: f64, dt: f64) {
        debug_assert!(dt > 0.0);
        let dn = self.transfer_eff * i_channel * dt / FARADAY_C_PER_MOL;
        let leak = self.leak_rate * (self.c_target - self.c_reservoir) * dt;
        self.c_target = (self.c_target + dn / self.volume - leak).max(0.0);
    }

    /// Dye-intensity proxy: 1 at zero concentration, 0.5 at `c_half`,
    /// strictly decreasing.
    pub fn fluorescence(&self) -> f64 {
        1.0 / (1.0 + self.c_target / self.c_half)
    }
}

/// Polymorphic electrochemical load.
#[derive(Debug, Clone)]
pub enum Cell {
    Resistor {
        r_ohm: f64,
    },
    Randles {
        rs_ohm: f64,
        rct_ohm: f64,
        cdl_farad: f64,
        /// Voltage across the double layer.
        v_c: f64,
    },
    PdSurface {
        c_farad: f64,
        peaks: Vec<PeakSpec>,
        /// Applied voltage at the previous step; None before first contact.
        v_prev: Option<f64>,
        /// Sweep branch the electrode is on. A step too small to move the
        /// quantized drive keeps the branch (the scan has not reversed).
        branch: Option<ScanDirection>,
    },
    IonPump {
        /// Interface conductance, siemens.
        g_siemens: f64,
        state: IonPumpState,
    },
}

impl Cell {
    pub fn resistor(r_ohm: f64) -> Self {
        assert!(r_ohm > 0.0, "resistance must be positive");
        Cell::Resistor { r_ohm }
    }

    pub fn randles(rs_ohm: f64, rct_ohm: f64, cdl_farad: f64) -> Self {
        assert!(rs_ohm > 0.0 && rct_ohm > 0.0, "resistances must be positive");
        assert!(cdl_farad > 0.0, "capacitance must be positive");
        Cell::Randles { rs_ohm, rct_ohm, cdl_farad, v_c: 0.0 }
    }

    pub fn pd_surface(c_farad: f64, peaks: Vec<PeakSpec>) -> Self {
        assert!(c_farad > 0.0, "capacitance must be positive");
        Cell::PdSurface { c_farad, peaks, v_prev: None, branch: None }
    }

    pub fn ion_pump(g_siemens: f64, state: IonPumpState) -> Self {
        assert!(g_siemens > 0.0, "conductance must be positive");
        Cell::IonPump { g_siemens, state }
    }

    /// Current drawn when `v` is applied for `dt` seconds; advances the
    /// model state and returns the current at the end of the interval.
    pub fn current(&mut self, v: f64, dt: f64) -> Result<f64, CellError> {
        if !v.is_finite() {
            return Err(CellError::NonFiniteInput);
        }
        Ok(match self {
            Cell::Resistor { r_ohm } => v / *r_ohm,
            Cell::Randles { rs_ohm, rct_ohm, cdl_farad, v_c } => {
                assert!(dt > 0.0, "stateful cells need positive dt");
                // Explicit Euler with sub-stepping an order below the
                // network time constant.
                let r_par = *rs_ohm * *rct_ohm / (*rs_ohm + *rct_ohm);
                let tau = r_par * *cdl_farad;
                let n_sub = ((dt / (tau / 10.0)).ceil() as usize).clamp(1, 100_000);
                let dt_sub = dt / n_sub as f64;
                for _ in 0..n_sub {
                    let i = (v - *v_c) / *rs_ohm;
                    *v_c += dt_sub * (i - *v_c / *rct_ohm) / *cdl_farad;
                }
                (v - *v_c) / *rs_ohm
            }
            Cell::PdSurface { c_farad, peaks, v_prev, branch } => {
                assert!(dt > 0.0, "stateful cells need positive dt");
                let i = match *v_prev {
                    None => 0.0,
                    Some(vp) => {
                        let dv = v - vp;
                        let i_cap = *c_farad * dv / dt;
                        if dv > 0.0 {
                            *branch = Some(ScanDirection::Anodic);
                        } else if dv < 0.0 {
                            *branch = Some(ScanDirection::Cathodic);
                        }
                        let i_peaks: f64 = match *branch {
                            Some(d) => peaks.iter().map(|pk| pk.current(v, d)).sum(),
                            None => 0.0,
                        };
                        i_cap + i_peaks
                    }
                };
                *v_prev = Some(v);
                i
            }
            Cell::IonPump { g_siemens, state } => {
                assert!(dt > 0.0, "stateful cells need positive dt");
                let i = *g_siemens * v;
                state.step(i, dt);
                i
            }
        })
    }

    /// Instantaneous current the cell would draw at `v` without advancing
    /// any state (used for open-switch leakage).
    pub fn peek_current(&self, v: f64) -> f64 {
        match self {
            Cell::Resistor { r_ohm } => v / r_ohm,
            Cell::Randles { rs_ohm, v_c, .. } => (v - v_c) / rs_ohm,
            // No scan happens while disconnected: the capacitive surrogate
            // draws nothing.
            Cell::PdSurface { .. } => 0.0,
            Cell::IonPump { g_siemens, .. } => g_siemens * v,
        }
    }

    /// Advance internal dynamics over `dt` with the cell disconnected.
    pub fn relax(&mut self, dt: f64) {
        debug_assert!(dt > 0.0);
        match self {
            Cell::Resistor { .. } | Cell::PdSurface { .. } => {}
            Cell::Randles { rct_ohm, cdl_farad, v_c, .. } => {
                // Double layer discharges through the charge-transfer branch.
                let tau = *rct_ohm * *cdl_farad;
                let n_sub = ((dt / (tau / 10.0)).ceil() as usize).clamp(1, 100_000);
                let dt_sub = dt / n_sub as f64;
                for _ in 0..n_sub {
                    *v_c -= dt_sub * *v_c / tau;
                }
            }
            Cell::IonPump { state, .. } => {
                let leak = state.leak_rate * (state.c_target - state.c_reservoir) * dt;
                state.c_target = (state.c_target - leak).max(0.0);
            }
        }
    }

    /// Fluorescence proxy of the attached well, if this cell has one.
    pub fn fluorescence(&self) -> Option<f64> {
        match self {
            Cell::IonPump { state, .. } => Some(state.fluorescence()),
            _ => None,
        }
    }
}
