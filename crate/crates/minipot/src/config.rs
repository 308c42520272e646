//! TOML descriptions of devices and cell banks.
//!
//! Two file shapes are supported. A device file sets board count, sampling
//! and noise mode, with an optional `[chain]` table overriding analog-path
//! constants. A cell file describes what the electrodes are dipped into and
//! is keyed by `kind = "resistor" | "randles" | "pd_surface" | "ion_pump"`;
//! per-channel parameter lists (e.g. electrode conductances) are indexed by
//! channel, wrapping when shorter than the bank.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::cell::{Cell, IonPumpState, PeakSpec, ScanDirection};
use crate::device::{DeviceConfig, Mode};
use crate::signal_chain::SignalChainParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse {origin}: {source}")]
    Toml {
        origin: String,
        #[source]
        source: toml::de::Error,
    },
    #[error("{origin}: {reason}")]
    Invalid { origin: String, reason: String },
}

fn invalid(origin: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { origin: origin.to_string(), reason: reason.into() }
}

// ---------------------------------------------------------------- device --

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeviceFile {
    #[serde(default = "default_boards")]
    n_boards: u32,
    #[serde(default = "default_rate")]
    sample_rate_hz: f64,
    #[serde(default)]
    mode: ModeName,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    chain: ChainOverrides,
}

fn default_boards() -> u32 {
    1
}

fn default_rate() -> f64 {
    860.0
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModeName {
    Ideal,
    #[default]
    Noisy,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainOverrides {
    noise_sigma_a: Option<f64>,
    lpf_cutoff_hz: Option<f64>,
    switch_leak_a: Option<f64>,
    shunt_ohm: Option<f64>,
    amp_gain: Option<f64>,
}

/// Parse a device TOML; `origin` names the source in errors.
pub fn parse_device_config(text: &str, origin: &str) -> Result<DeviceConfig, ConfigError> {
    let file: DeviceFile = toml::from_str(text)
        .map_err(|source| ConfigError::Toml { origin: origin.to_string(), source })?;
    let mut chain = SignalChainParams::default();
    let o = &file.chain;
    if let Some(v) = o.noise_sigma_a {
        if !(v >= 0.0) {
            return Err(invalid(origin, format!("noise_sigma_a {v} must be >= 0")));
        }
        chain.noise_sigma_a = v;
    }
    if let Some(v) = o.lpf_cutoff_hz {
        if !(v > 0.0) {
            return Err(invalid(origin, format!("lpf_cutoff_hz {v} must be > 0")));
        }
        chain.lpf_cutoff_hz = v;
    }
    if let Some(v) = o.switch_leak_a {
        if !(v >= 0.0) {
            return Err(invalid(origin, format!("switch_leak_a {v} must be >= 0")));
        }
        chain.switch_leak_a = v;
    }
    if let Some(v) = o.shunt_ohm {
        if !(v > 0.0) {
            return Err(invalid(origin, format!("shunt_ohm {v} must be > 0")));
        }
        chain.shunt_ohm = v;
    }
    if let Some(v) = o.amp_gain {
        if !(v > 0.0) {
            return Err(invalid(origin, format!("amp_gain {v} must be > 0")));
        }
        chain.amp_gain = v;
    }
    Ok(DeviceConfig {
        n_boards: file.n_boards,
        sample_rate_hz: file.sample_rate_hz,
        mode: match file.mode {
            ModeName::Ideal => Mode::Ideal,
            ModeName::Noisy => Mode::Noisy,
        },
        seed: file.seed,
        chain,
        ..DeviceConfig::default()
    })
}

pub fn load_device_config(path: &Path) -> Result<DeviceConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_device_config(&text, &path.display().to_string())
}

// ----------------------------------------------------------------- cells --

/// A parsed cell description; [`CellSpec::build`] instantiates it for a
/// concrete channel.
#[derive(Debug, Clone)]
pub enum CellSpec {
    Resistor {
        r_ohm: f64,
    },
    Randles {
        rs_ohm: f64,
        rct_ohm: f64,
        cdl_farad: f64,
    },
    PdSurface {
        c_farad: f64,
        peaks: Vec<PeakSpec>,
    },
    IonPump {
        g_siemens: Vec<f64>,
        volume_m3: f64,
        transfer_eff: f64,
        leak_rate_per_s: f64,
        c0_mol_m3: f64,
        c_reservoir: f64,
        c_half: f64,
    },
}

impl CellSpec {
    /// Instantiate the cell bound to `channel`. Per-channel lists wrap.
    pub fn build(&self, channel: usize) -> Cell {
        match self {
            CellSpec::Resistor { r_ohm } => Cell::resistor(*r_ohm),
            CellSpec::Randles { rs_ohm, rct_ohm, cdl_farad } => {
                Cell::randles(*rs_ohm, *rct_ohm, *cdl_farad)
            }
            CellSpec::PdSurface { c_farad, peaks } => {
                Cell::pd_surface(*c_farad, peaks.clone())
            }
            CellSpec::IonPump {
                g_siemens,
                volume_m3,
                transfer_eff,
                leak_rate_per_s,
                c0_mol_m3,
                c_reservoir,
                c_half,
            } => {
                let g = g_siemens[channel % g_siemens.len()];
                let state = IonPumpState::new(
                    *c0_mol_m3,
                    *c_reservoir,
                    *volume_m3,
                    *transfer_eff,
                    *leak_rate_per_s,
                    *c_half,
                );
                Cell::ion_pump(g, state)
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<f64> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum CellFile {
    Resistor {
        r_ohm: f64,
    },
    Randles {
        rs_ohm: f64,
        rct_ohm: f64,
        cdl_farad: f64,
    },
    PdSurface {
        c_farad: f64,
        #[serde(rename = "peak")]
        peaks: Vec<PeakFile>,
    },
    IonPump {
        g_siemens: OneOrMany,
        #[serde(default = "default_volume")]
        volume_m3: f64,
        #[serde(default = "default_eff")]
        transfer_eff: f64,
        #[serde(default = "default_leak")]
        leak_rate_per_s: f64,
        #[serde(default = "default_c0")]
        c0_mol_m3: f64,
        #[serde(default = "default_c0")]
        c_reservoir: f64,
        #[serde(default = "default_c0")]
        c_half: f64,
    },
}

fn default_volume() -> f64 {
    1e-9
}

fn default_eff() -> f64 {
    1.0
}

fn default_leak() -> f64 {
    0.002
}

fn default_c0() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PeakFile {
    v_center: f64,
    height: f64,
    width: f64,
    direction: DirectionName,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DirectionName {
    Anodic,
    Cathodic,
}

/// Parse a cell TOML; `origin` names the source in errors.
pub fn parse_cell_spec(text: &str, origin: &str) -> Result<CellSpec, ConfigError> {
    let file: CellFile = toml::from_str(text)
        .map_err(|source| ConfigError::Toml { origin: origin.to_string(), source })?;
    let spec = match file {
        CellFile::Resistor { r_ohm } => {
            if !(r_ohm > 0.0) {
                return Err(invalid(origin, format!("r_ohm {r_ohm} must be > 0")));
            }
            CellSpec::Resistor { r_ohm }
        }
        CellFile::Randles { rs_ohm, rct_ohm, cdl_farad } => {
            if !(rs_ohm > 0.0 && rct_ohm > 0.0 && cdl_farad > 0.0) {
                return Err(invalid(origin, "randles parameters must be > 0"));
            }
            CellSpec::Randles { rs_ohm, rct_ohm, cdl_farad }
        }
        CellFile::PdSurface { c_farad, peaks } => {
            if !(c_farad > 0.0) {
                return Err(invalid(origin, format!("c_farad {c_farad} must be > 0")));
            }
            if peaks.is_empty() {
                return Err(invalid(origin, "pd_surface needs at least one [[peak]]"));
            }
            let mut built = Vec::with_capacity(peaks.len());
            for (i, p) in peaks.iter().enumerate() {
                if !(p.width > 0.0) {
                    return Err(invalid(origin, format!("peak {i}: width must be > 0")));
                }
                let direction = match p.direction {
                    DirectionName::Anodic => ScanDirection::Anodic,
                    DirectionName::Cathodic => ScanDirection::Cathodic,
                };
                let sign_ok = match direction {
                    ScanDirection::Anodic => p.height > 0.0,
                    ScanDirection::Cathodic => p.height < 0.0,
                };
                if !sign_ok {
                    return Err(invalid(
                        origin,
                        format!("peak {i}: height sign must match scan direction"),
                    ));
                }
                built.push(PeakSpec::new(p.v_center, p.height, p.width, direction));
            }
            CellSpec::PdSurface { c_farad, peaks: built }
        }
        CellFile::IonPump {
            g_siemens,
            volume_m3,
            transfer_eff,
            leak_rate_per_s,
            c0_mol_m3,
            c_reservoir,
            c_half,
        } => {
            let g = g_siemens.into_vec();
            if g.is_empty() {
                return Err(invalid(origin, "g_siemens list is empty"));
            }
            if g.iter().any(|v| !(*v > 0.0)) {
                return Err(invalid(origin, "g_siemens entries must be > 0"));
            }
            if !(volume_m3 > 0.0) {
                return Err(invalid(origin, format!("volume_m3 {volume_m3} must be > 0")));
            }
            if !(0.0..=1.0).contains(&transfer_eff) {
                return Err(invalid(origin, format!("transfer_eff {transfer_eff} must be in 0..1")));
            }
            if !(leak_rate_per_s >= 0.0) {
                return Err(invalid(origin, "leak_rate_per_s must be >= 0"));
            }
            if !(c0_mol_m3 >= 0.0 && c_reservoir >= 0.0) {
                return Err(invalid(origin, "concentrations must be >= 0"));
            }
            if !(c_half > 0.0) {
                return Err(invalid(origin, "c_half must be > 0"));
            }
            CellSpec::IonPump {
                g_siemens: g,
                volume_m3,
                transfer_eff,
                leak_rate_per_s,
                c0_mol_m3,
                c_reservoir,
                c_half,
            }
        }
    };
    Ok(spec)
}

pub fn load_cell_spec(path: &Path) -> Result<CellSpec, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_cell_spec(&text, &path.display().to_string())
}

/// Built-in palladium-like surface: two redox couples plus an adsorption
/// pair, on a 5 uF double layer. Matches `configs/pd_surface.toml`.
pub fn default_pd_surface() -> CellSpec {
    CellSpec::PdSurface {
        c_farad: 0.2e-6,
        peaks: vec![
            PeakSpec::new(0.15, 0.35e-6, 0.06, ScanDirection::Anodic),
            PeakSpec::new(-0.20, -0.40e-6, 0.06, ScanDirection::Cathodic),
            PeakSpec::new(-0.65, -0.45e-6, 0.07, ScanDirection::Cathodic),
            PeakSpec::new(-0.75, 0.50e-6, 0.05, ScanDirection::Anodic),
        ],
    }
}

/// Built-in ion-pump bank with per-electrode conductance spread. Matches
/// `configs/ionpump.toml`.
pub fn default_ion_pump() -> CellSpec {
    CellSpec::IonPump {
        g_siemens: vec![
            5.2e-7, 4.6e-7, 5.0e-7, 4.4e-7, 5.4e-7, 4.8e-7, 5.6e-7, 4.2e-7, 5.8e-7,
        ],
        volume_m3: 1e-9,
        transfer_eff: 1.0,
        leak_rate_per_s: 0.002,
        c0_mol_m3: 1.0,
        c_reservoir: 1.0,
        c_half: 1.0,
    }
}
