//! Memoryless solid-state power amplifier (SSPA) model with zero AM/PM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{db_to_linear, dbm_to_watts};
use crate::waveform::{synthesize, ComplexWaveform, SignalConfig, TimeGrid, ToneWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HpaParams {
    /// Small-signal voltage gain `g`.
    pub gain_v: f64,
    /// Input saturation amplitude; `a_sat^2` is the saturation input power.
    pub a_sat: f64,
    /// AM/AM knee sharpness, `>= 1`.
    pub beta: f64,
}

impl Default for HpaParams {
    /// `g^2 = 25 dB`, `A_sat^2 = 10 dBm`, `beta = 2`.
    fn default() -> Self {
        HpaParams {
            gain_v: db_to_linear(25.0).sqrt(),
            a_sat: dbm_to_watts(10.0).sqrt(),
            beta: 2.0,
        }
    }
}

impl HpaParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gain_v > 0.0) || !(self.a_sat > 0.0) {
            return Err(Error::param("HPA gain and saturation level must be positive"));
        }
        if !(self.beta >= 1.0) {
            return Err(Error::param(format!("HPA beta = {} must be >= 1", self.beta)));
        }
        Ok(())
    }

    /// Output saturation amplitude `g * a_sat`.
    pub fn output_ceiling(&self) -> f64 {
        self.gain_v * self.a_sat
    }

    fn gain(&self, a: f64) -> f64 {
        let x = a / self.a_sat;
        let two_beta = 2.0 * self.beta;
        // Factor out the larger term so x^(2 beta) cannot overflow.
        if x <= 1.0 {
            self.gain_v * a * (-(x.powf(two_beta)).ln_1p() / two_beta).exp()
        } else {
            self.gain_v * self.a_sat * (-(x.powf(-two_beta)).ln_1p() / two_beta).exp()
        }
    }
}

/// AM/AM characteristic `G(a) = g a / [1 + (a/A_sat)^(2 beta)]^(1/(2 beta))`.
pub fn amam(a: f64, p: &HpaParams) -> Result<f64> {
    if !(a >= 0.0) {
        return Err(Error::param(format!("negative input amplitude {a}")));
    }
    if a == 0.0 {
        return Ok(0.0);
    }
    Ok(p.gain(a))
}

/// Map every sample magnitude through the AM/AM curve, keeping its phase.
pub fn amplify(w: &ComplexWaveform, p: &HpaParams) -> ComplexWaveform {
    let samples = w
        .samples
        .iter()
        .map(|s| {
            let a = s.norm();
            if a == 0.0 {
                *s
            } else {
                s * (p.gain(a) / a)
            }
        })
        .collect();
    ComplexWaveform { samples, grid: w.grid }
}

/// Passband average output power of the amplified unified symbol, i.e. half
/// the mean-square of the amplified complex envelope.
pub fn average_output_power(cfg: &SignalConfig, weights: &ToneWeights, p: &HpaParams, grid: &TimeGrid) -> Result<f64> {
    p.validate()?;
    let w = synthesize(cfg, weights, grid)?;
    Ok(amplify(&w, p).mean_power() / 2.0)
}
