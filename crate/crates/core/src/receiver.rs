//! Unified receiver: envelope detection, static power split, DC-blocked
//! frequency-splitting branch, and PAPR-based symbol decisions.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::dbm_to_watts;
use crate::waveform::{ComplexWaveform, TimeGrid};

/// How the FS branch removes the DC component of the detected envelope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DcRemoval {
    /// Subtract the exact time-mean over one symbol.
    #[default]
    MeanSubtraction,
    /// `[j(f/fc) / (1 + j f/fc)]^order` applied to the periodic envelope.
    HighPass,
    /// `1 / [1 - j (f/fc)^2]` taken literally, extended Hermitian so the output stays real.
    LiteralLc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReceiverParams {
    pub rho_r: f64,
    pub sigma_ps_sq: f64,
    pub sigma_fs_sq: f64,
    pub cutoff_hz: f64,
    pub filter_order: u32,
    pub dc_removal: DcRemoval,
    /// An estimator whose measured mean power is below `squelch_ratio` times its
    /// own noise power reports a PAPR of zero.
    pub squelch_ratio: f64,
}

impl Default for ReceiverParams {
    fn default() -> Self {
        ReceiverParams {
            rho_r: 1e-3,
            sigma_ps_sq: dbm_to_watts(-100.0),
            sigma_fs_sq: dbm_to_watts(-100.0),
            cutoff_hz: 1e3,
            filter_order: 1,
            dc_removal: DcRemoval::MeanSubtraction,
            squelch_ratio: 2.0,
        }
    }
}

impl ReceiverParams {
    pub fn validate(&self, delta_f: f64) -> Result<()> {
        if !(self.rho_r > 0.0 && self.rho_r < 1.0) {
            return Err(Error::param("rho_r must lie in (0, 1)"));
        }
        if !(self.sigma_ps_sq > 0.0) || !(self.sigma_fs_sq > 0.0) {
            return Err(Error::param("estimator noise powers must be positive"));
        }
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz < delta_f) {
            return Err(Error::param(format!(
                "cutoff {} Hz must lie in (0, delta_f = {delta_f})",
                self.cutoff_hz
            )));
        }
        if self.filter_order == 0 {
            return Err(Error::param("filter order must be >= 1"));
        }
        if !(self.squelch_ratio >= 0.0) {
            return Err(Error::param("squelch ratio must be nonnegative"));
        }
        Ok(())
    }

    pub fn squelch_ps(&self) -> f64 {
        self.squelch_ratio * self.sigma_ps_sq
    }

    pub fn squelch_fs(&self) -> f64 {
        self.squelch_ratio * self.sigma_fs_sq
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchSignals {
    pub y_env: Vec<f64>,
    pub y_ps: Vec<f64>,
    pub y_fs: Vec<f64>,
}

/// Linear-region envelope detector output for an amplified transmit envelope
/// seen through flat fading `h` and path gain `pg`. Antenna noise is omitted.
pub fn envelope_detect(tx_envelope: &ComplexWaveform, h: Complex64, pg: f64) -> Vec<f64> {
    let scale = h.norm() * pg.sqrt();
    tx_envelope.samples.iter().map(|s| scale * s.norm()).collect()
}

/// Noiseless PS-branch signal `sqrt(rho_r) y_env`.
pub fn ps_signal(y_env: &[f64], params: &ReceiverParams) -> Vec<f64> {
    let a = params.rho_r.sqrt();
    y_env.iter().map(|y| a * y).collect()
}

/// Noiseless FS-branch signal `sqrt(1 - rho_r) [y_env - DC]`.
pub fn fs_signal(y_env: &[f64], params: &ReceiverParams, grid: &TimeGrid) -> Vec<f64> {
    let a = (1.0 - params.rho_r).sqrt();
    let ac = match params.dc_removal {
        DcRemoval::MeanSubtraction => {
            let mean = y_env.iter().sum::<f64>() / y_env.len() as f64;
            y_env.iter().map(|y| y - mean).collect()
        }
        DcRemoval::HighPass => {
            let ratio = |f: f64| Complex64::new(0.0, f / params.cutoff_hz);
            filter_periodic(y_env, grid, |f| {
                let r = ratio(f);
                (r / (1.0 + r)).powu(params.filter_order)
            })
        }
        DcRemoval::LiteralLc => filter_periodic(y_env, grid, |f| {
            let x = (f / params.cutoff_hz).powi(2);
            let h = 1.0 / Complex64::new(1.0, -x);
            if f < 0.0 {
                h.conj()
            } else {
                h
            }
        }),
    };
    ac.into_iter().map(|y| a * y).collect()
}

/// Apply a frequency response to one period of a periodic real signal.
fn filter_periodic(x: &[f64], grid: &TimeGrid, response: impl Fn(f64) -> Complex64) -> Vec<f64> {
    let m = x.len();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let mut buf: Vec<Complex64> = x.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    fwd.process(&mut buf);
    let df = grid.sample_rate() / m as f64;
    for (k, b) in buf.iter_mut().enumerate() {
        let f = if k <= m / 2 {
            k as f64 * df
        } else {
            (k as f64 - m as f64) * df
        };
        *b *= response(f);
    }
    inv.process(&mut buf);
    buf.iter().map(|c| c.re / m as f64).collect()
}

fn add_noise<R: Rng + ?Sized>(signal: Vec<f64>, variance: f64, rng: &mut R) -> Vec<f64> {
    let sd = variance.sqrt();
    signal
        .into_iter()
        .map(|y| {
            let n: f64 = StandardNormal.sample(rng);
            y + sd * n
        })
        .collect()
}

pub fn split_ps<R: Rng + ?Sized>(y_env: &[f64], params: &ReceiverParams, rng: &mut R) -> Vec<f64> {
    add_noise(ps_signal(y_env, params), params.sigma_ps_sq, rng)
}

pub fn split_fs<R: Rng + ?Sized>(y_env: &[f64], params: &ReceiverParams, grid: &TimeGrid, rng: &mut R) -> Vec<f64> {
    add_noise(fs_signal(y_env, params, grid), params.sigma_fs_sq, rng)
}

fn peak_and_mean(y: &[f64]) -> (f64, f64) {
    let (peak, sum) = y.iter().fold((0.0f64, 0.0f64), |(p, s), v| {
        let e = v * v;
        (p.max(e), s + e)
    });
    (peak, sum / y.len() as f64)
}

/// PS-branch PAPR estimate, `2 max|y|^2 / mean|y|^2`. Returns zero when the
/// measured mean power is below `squelch`.
pub fn estimate_papr_ps(y_ps: &[f64], squelch: f64) -> f64 {
    let (peak, mean) = peak_and_mean(y_ps);
    if !(mean > 0.0) || mean < squelch {
        return 0.0;
    }
    2.0 * peak / mean
}

/// FS-branch PAPR estimate, `max|y|^2 / mean|y|^2`, with the same squelch rule.
pub fn estimate_papr_fs(y_fs: &[f64], squelch: f64) -> f64 {
    let (peak, mean) = peak_and_mean(y_fs);
    if !(mean > 0.0) || mean < squelch {
        return 0.0;
    }
    peak / mean
}

/// Nearest constellation point on the PAPR axis: boundaries at `2N +/- 1`.
pub fn decide_symbol(papr_ps: f64, papr_fs: f64, q_total: usize) -> usize {
    let q = q_total.max(1);
    let papr_id = papr_ps.max(papr_fs);
    let n = (papr_id / 2.0).round();
    if n < 1.0 {
        1
    } else if n > q as f64 {
        q
    } else {
        n as usize
    }
}

/// Receive one symbol: detect, split with estimator noise, estimate, decide.
pub fn receive<R: Rng + ?Sized>(
    tx_envelope: &ComplexWaveform,
    h: Complex64,
    pg: f64,
    params: &ReceiverParams,
    q_total: usize,
    rng: &mut R,
) -> (BranchSignals, usize) {
    let y_env = envelope_detect(tx_envelope, h, pg);
    let y_ps = split_ps(&y_env, params, rng);
    let y_fs = split_fs(&y_env, params, &tx_envelope.grid, rng);
    let n_hat = decide_symbol(
        estimate_papr_ps(&y_ps, params.squelch_ps()),
        estimate_papr_fs(&y_fs, params.squelch_fs()),
        q_total,
    );
    (BranchSignals { y_env, y_ps, y_fs }, n_hat)
}
