//! Unified single-tone / multi-tone complex-envelope synthesis.
//!
//! The unified symbol is a carrier (DC in the complex envelope) carrying a
//! fraction `rho` of the drive power plus an `N`-tone multisine carrying the
//! rest. Amplitudes use a 1-ohm normalization, so `|s|^2` is a power and the
//! complex-envelope mean-square equals twice the passband power.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalConfig {
    /// Power allocation ratio between carrier and multisine.
    pub rho: f64,
    /// Number of active tones `N` (the transmitted symbol).
    pub n_active: usize,
    /// Modulation index `Q`, the largest tone count.
    pub q_total: usize,
    /// HPA drive power in watts.
    pub p_dr: f64,
    pub delta_f: f64,
    /// Baseband frequency of the first tone.
    pub f1_offset: f64,
    /// Allocation ratio used in single-tone mode.
    pub rho_fs: f64,
    /// Receiver static power-split ratio.
    pub rho_r: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        SignalConfig {
            rho: 0.0,
            n_active: 1,
            q_total: 16,
            p_dr: 1e-4,
            delta_f: 10e3,
            f1_offset: 10e3,
            rho_fs: 1.0 - 1e-4,
            rho_r: 1e-3,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::param(format!("rho = {} outside [0, 1]", self.rho)));
        }
        if self.n_active < 1 || self.n_active > self.q_total {
            return Err(Error::param(format!(
                "n_active = {} outside 1..={}",
                self.n_active, self.q_total
            )));
        }
        if !(self.p_dr > 0.0) || !self.p_dr.is_finite() {
            return Err(Error::param("p_dr must be positive"));
        }
        if !(self.delta_f > 0.0) {
            return Err(Error::param("delta_f must be positive"));
        }
        if !(0.0..=1.0).contains(&self.rho_fs) {
            return Err(Error::param("rho_fs outside [0, 1]"));
        }
        if !(self.rho_r > 0.0 && self.rho_r < 1.0) {
            return Err(Error::param("rho_r must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Baseband frequency of tone `n` (1-based).
    pub fn tone_frequency(&self, n: usize) -> f64 {
        self.f1_offset + (n as f64 - 1.0) * self.delta_f
    }

    pub fn with_symbol(&self, rho: f64, n_active: usize) -> Self {
        SignalConfig {
            rho,
            n_active,
            ..self.clone()
        }
    }

    /// One symbol period, `T = 1 / delta_f`.
    pub fn symbol_period(&self) -> f64 {
        1.0 / self.delta_f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    /// Symbol period `T` in seconds.
    pub duration: f64,
    pub samples_per_symbol: usize,
}

impl TimeGrid {
    pub fn new(duration: f64, samples_per_symbol: usize) -> Result<Self> {
        if !(duration > 0.0) || samples_per_symbol == 0 {
            return Err(Error::param("time grid needs positive duration and samples"));
        }
        Ok(TimeGrid {
            duration,
            samples_per_symbol,
        })
    }

    /// `T = 1/delta_f` with 16 samples per available tone.
    pub fn for_config(cfg: &SignalConfig) -> Self {
        TimeGrid {
            duration: cfg.symbol_period(),
            samples_per_symbol: 16 * cfg.q_total,
        }
    }

    pub fn sample_time(&self, k: usize) -> f64 {
        k as f64 * self.duration / self.samples_per_symbol as f64
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.samples_per_symbol).map(move |k| self.sample_time(k))
    }

    pub fn sample_rate(&self) -> f64 {
        self.samples_per_symbol as f64 / self.duration
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexWaveform {
    pub samples: Vec<Complex64>,
    pub grid: TimeGrid,
}

impl ComplexWaveform {
    pub fn new(samples: Vec<Complex64>, grid: TimeGrid) -> Result<Self> {
        if samples.len() != grid.samples_per_symbol {
            return Err(Error::param(format!(
                "waveform has {} samples, grid expects {}",
                samples.len(),
                grid.samples_per_symbol
            )));
        }
        Ok(ComplexWaveform { samples, grid })
    }

    pub fn mean_power(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.samples.len() as f64
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.norm()).collect()
    }
}

/// Per-tone amplitudes and phases plus the carrier term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneWeights {
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
    pub carrier_amplitude: f64,
    pub carrier_phase: f64,
}

impl ToneWeights {
    /// Maximum-PAPR weights: `s_c = 1`, `s_n = 1/sqrt(N)`, all phases zero.
    pub fn equal(n: usize) -> Self {
        let a = 1.0 / (n as f64).sqrt();
        ToneWeights {
            amplitudes: vec![a; n],
            phases: vec![0.0; n],
            carrier_amplitude: 1.0,
            carrier_phase: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amplitudes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.amplitudes.len() != self.phases.len() {
            return Err(Error::param("amplitude and phase counts differ"));
        }
        if self.amplitudes.iter().any(|a| *a < 0.0) || self.carrier_amplitude < 0.0 {
            return Err(Error::param("tone amplitudes must be nonnegative"));
        }
        let norm: f64 = self.amplitudes.iter().map(|a| a * a).sum();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!(
                "multi-tone weights must have unit norm, got {norm}"
            )));
        }
        Ok(())
    }
}

/// Number of baseband DFT bins spanned from DC up to the highest tone.
fn occupied_bins(cfg: &SignalConfig, grid: &TimeGrid) -> usize {
    let f_max = (1..=cfg.n_active)
        .map(|n| cfg.tone_frequency(n).abs())
        .fold(0.0, f64::max);
    (f_max * grid.duration - 1e-9).ceil() as usize + 1
}

pub fn synthesize(cfg: &SignalConfig, weights: &ToneWeights, grid: &TimeGrid) -> Result<ComplexWaveform> {
    cfg.validate()?;
    weights.validate()?;
    if weights.len() != cfg.n_active {
        return Err(Error::param(format!(
            "{} tone weights for {} active tones",
            weights.len(),
            cfg.n_active
        )));
    }
    let bins = occupied_bins(cfg, grid);
    if grid.samples_per_symbol < 2 * bins {
        return Err(Error::param(format!(
            "grid of {} samples under-samples {} occupied bins",
            grid.samples_per_symbol, bins
        )));
    }

    let carrier = Complex64::from_polar(
        (2.0 * cfg.rho * cfg.p_dr).sqrt() * weights.carrier_amplitude,
        weights.carrier_phase,
    );
    let multi_amp = (2.0 * (1.0 - cfg.rho) * cfg.p_dr).sqrt();
    let samples = grid
        .times()
        .map(|t| {
            let tones: Complex64 = (1..=cfg.n_active)
                .map(|n| {
                    // Reduce the phase to one cycle before scaling by 2*pi.
                    let cycles = (cfg.tone_frequency(n) * t).fract();
                    Complex64::from_polar(weights.amplitudes[n - 1], 2.0 * PI * cycles + weights.phases[n - 1])
                })
                .sum();
            carrier + multi_amp * tones
        })
        .collect();
    ComplexWaveform::new(samples, *grid)
}

/// Per-tone conjugate precoding (matched filtering) from estimated channel gains.
pub fn precode(tone_gains: &[Complex64], carrier_gain: Complex64) -> Result<ToneWeights> {
    if tone_gains.is_empty() {
        return Err(Error::param("no tone gains"));
    }
    if carrier_gain.norm() == 0.0 || tone_gains.iter().any(|g| g.norm() == 0.0) {
        return Err(Error::Degenerate("zero channel gain has no phase".into()));
    }
    let norm = tone_gains.iter().map(|g| g.norm_sqr()).sum::<f64>().sqrt();
    let (amplitudes, phases) = tone_gains
        .iter()
        .map(|g| {
            let w = g.conj() / norm;
            (w.norm(), w.arg())
        })
        .unzip();
    let c = carrier_gain.conj() / carrier_gain.norm();
    Ok(ToneWeights {
        amplitudes,
        phases,
        carrier_amplitude: c.norm(),
        carrier_phase: c.arg(),
    })
}

/// Peak-to-average power ratio of a sampled complex envelope.
pub fn papr(w: &ComplexWaveform) -> Result<f64> {
    let mean = w.mean_power();
    if !(mean > 0.0) {
        return Err(Error::Degenerate("PAPR of an all-zero waveform".into()));
    }
    let peak = w.samples.iter().map(|s| s.norm_sqr()).fold(0.0, f64::max);
    Ok(peak / mean)
}
