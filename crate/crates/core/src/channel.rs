//! Gauss-Markov (AR(1)) Rayleigh block fading with log-distance path loss.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{db_to_linear, dbm_to_watts};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Free-space reference distance of the log-distance model.
const REFERENCE_DISTANCE_M: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Block-to-block correlation coefficient.
    pub zeta: f64,
    pub sigma_h_sq: f64,
    pub path_exponent: f64,
    pub distance_m: f64,
    pub antenna_gain_dbi_tx: f64,
    pub antenna_gain_dbi_rx: f64,
    pub carrier_hz: f64,
    /// Pilot power used for received-power feedback, watts.
    pub p_ref_w: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            zeta: 0.99,
            sigma_h_sq: 1.0,
            path_exponent: 2.5,
            distance_m: 3.0,
            antenna_gain_dbi_tx: 5.0,
            antenna_gain_dbi_rx: 5.0,
            carrier_hz: 2.4e9,
            p_ref_w: dbm_to_watts(29.0),
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.zeta) {
            return Err(Error::param(format!("zeta = {} outside [0, 1]", self.zeta)));
        }
        if !(self.distance_m > 0.0) {
            return Err(Error::param("distance must be positive"));
        }
        if !(self.path_exponent >= 2.0) {
            return Err(Error::param("path-loss exponent must be >= 2"));
        }
        if !(self.sigma_h_sq > 0.0) || !(self.carrier_hz > 0.0) || !(self.p_ref_w > 0.0) {
            return Err(Error::param(
                "fading variance, carrier and pilot power must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelBlock {
    pub index: u64,
    pub h: Complex64,
    /// Received pilot power reported back to the transmitter, watts.
    pub p_r: f64,
}

/// Circularly-symmetric complex Gaussian sample with the given variance.
pub fn cscg<R: Rng + ?Sized>(variance: f64, rng: &mut R) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Log-distance path gain with a 1 m free-space reference, antenna gains included.
pub fn path_gain(params: &ChannelParams) -> f64 {
    let lambda = SPEED_OF_LIGHT / params.carrier_hz;
    let free_space = (lambda / (4.0 * PI * REFERENCE_DISTANCE_M)).powi(2);
    db_to_linear(params.antenna_gain_dbi_tx + params.antenna_gain_dbi_rx)
        * free_space
        * (REFERENCE_DISTANCE_M / params.distance_m).powf(params.path_exponent)
}

/// Error-free received-power feedback `|h|^2 * pg * p_ref`.
pub fn feedback_power(h: Complex64, p_ref: f64, pg: f64) -> f64 {
    h.norm_sqr() * pg * p_ref
}

impl ChannelBlock {
    /// First block drawn from the stationary distribution.
    pub fn stationary<R: Rng + ?Sized>(params: &ChannelParams, rng: &mut R) -> Self {
        let h = cscg(params.sigma_h_sq, rng);
        ChannelBlock {
            index: 0,
            h,
            p_r: feedback_power(h, params.p_ref_w, path_gain(params)),
        }
    }
}

/// `h_v = zeta h_{v-1} + u_v`, `u_v ~ CN(0, (1 - zeta^2) sigma_h^2)`.
pub fn advance<R: Rng + ?Sized>(prev: &ChannelBlock, params: &ChannelParams, rng: &mut R) -> ChannelBlock {
    let innovation_var = (1.0 - params.zeta * params.zeta) * params.sigma_h_sq;
    let u = if innovation_var > 0.0 {
        cscg(innovation_var, rng)
    } else {
        Complex64::new(0.0, 0.0)
    };
    let h = params.zeta * prev.h + u;
    ChannelBlock {
        index: prev.index + 1,
        h,
        p_r: feedback_power(h, params.p_ref_w, path_gain(params)),
    }
}
