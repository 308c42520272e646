//! Software twin of a multi-channel potentiostat array.
//!
//! The crate models the full measurement path of an 8–64 channel
//! galvanostat/potentiostat stack — DAC drive, level shifting, analog
//! switching, shunt ammeter, anti-alias filter and ADC — against pluggable
//! electrochemical cell models, and exposes the same control surfaces the
//! bench hardware has: a CSV protocol engine, a UDP line protocol, and a
//! client handle suitable for closed-loop experiments.
//!
//! Layering, bottom up:
//! - [`signal_chain`]: the per-channel analog/digital conversion path.
//! - [`cell`]: what the electrode is plugged into (resistors, Randles
//!   networks, surface redox, ion pumping into a compartment).
//! - [`device`]: channels + calibration + sampling + CSV run logs.
//! - [`protocol`]: HOLD/RAMP/OPEN/LOOP schedules and their executor.
//! - [`wire`]/[`client`]: UDP control plane, server and client sides.
//! - [`control`]: discrete PI controller and closed-loop harness.
//! - [`config`]: TOML device / cell-bank descriptions.

// Validation guards are written `!(x > 0.0)` on purpose: the negated form is
// true for NaN, which `x <= 0.0` would silently accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cell;
pub mod client;
pub mod config;
pub mod control;
pub mod device;
pub mod protocol;
pub mod signal_chain;
pub mod wire;
