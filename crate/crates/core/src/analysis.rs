//! Analytical PAPR CDFs and SER built on the order-½ Marcum Q function, plus
//! the Monte-Carlo estimators they are checked against.

use libm::erfc;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{advance, cscg, path_gain, ChannelBlock, ChannelParams};
use crate::error::{Error, Result};
use crate::hpa::{amplify, HpaParams};
use crate::quadrature::integrate;
use crate::receiver::{
    envelope_detect, estimate_papr_fs, estimate_papr_ps, fs_signal, ps_signal, receive, split_fs, split_ps,
    ReceiverParams,
};
use crate::waveform::{synthesize, ComplexWaveform, SignalConfig, TimeGrid, ToneWeights};

/// Absolute tolerance of every fading-average quadrature.
pub const QUAD_TOL: f64 = 1e-6;
/// Upper integration limit in units of `sigma_h`; the Rayleigh mass beyond it is `e^-36`.
const RAYLEIGH_SPAN: f64 = 6.0;

/// Every parameter bundle needed to simulate one link.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scenario {
    pub signal: SignalConfig,
    pub hpa: HpaParams,
    pub receiver: ReceiverParams,
    pub channel: ChannelParams,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        self.hpa.validate()?;
        self.receiver.validate(self.signal.delta_f)?;
        self.channel.validate()?;
        if self.signal.rho_r != self.receiver.rho_r {
            return Err(Error::param("signal and receiver disagree on rho_r"));
        }
        Ok(())
    }

    pub fn path_gain(&self) -> f64 {
        path_gain(&self.channel)
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::for_config(&self.signal)
    }

    /// Amplified transmit envelope of symbol `(rho, n)` with flat-channel weights.
    pub fn transmit(&self, rho: f64, n: usize) -> Result<ComplexWaveform> {
        let cfg = self.signal.with_symbol(rho, n);
        let w = synthesize(&cfg, &ToneWeights::equal(n), &self.grid())?;
        Ok(amplify(&w, &self.hpa))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SingleTone,
    MultiTone,
}

impl Mode {
    pub fn rho(self, rho_fs: f64) -> f64 {
        match self {
            Mode::SingleTone => rho_fs,
            Mode::MultiTone => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::SingleTone => "single",
            Mode::MultiTone => "multi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Ps,
    Fs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdfQuery {
    pub gamma: f64,
    pub n_active: usize,
    pub branch: Branch,
    /// `scenario.signal.rho` selects the transmission mode.
    pub scenario: Scenario,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FadingDensity {
    Rayleigh {
        sigma_h_sq: f64,
    },
    /// Every block has the same `|h|`.
    PointMass(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fading {
    Rayleigh,
    Fixed(Complex64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateResult {
    pub p_out: f64,
    pub rate: f64,
    pub q: usize,
}

/// Monte-Carlo proportion with its 95% normal-approximation half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub p: f64,
    pub half_width: f64,
    pub trials: usize,
}

impl McEstimate {
    pub fn from_counts(hits: usize, trials: usize) -> Self {
        let p = hits as f64 / trials.max(1) as f64;
        McEstimate {
            p,
            half_width: 1.96 * (p * (1.0 - p) / trials.max(1) as f64).sqrt(),
            trials,
        }
    }
}

fn check_marcum_args(a: f64, b: f64) -> Result<()> {
    if !(a >= 0.0) || !(b >= 0.0) {
        return Err(Error::param(format!(
            "Marcum Q arguments must be nonnegative, got ({a}, {b})"
        )));
    }
    Ok(())
}

/// `Q_{1/2}(a, b) = P[(Z + a)^2 > b^2]` for standard normal `Z`.
pub fn marcum_q_half(a: f64, b: f64) -> Result<f64> {
    check_marcum_args(a, b)?;
    Ok(q_half(a, b))
}

/// `1 - Q_{1/2}(a, b)`, accurate when `Q` is close to one.
pub fn marcum_q_half_complement(a: f64, b: f64) -> Result<f64> {
    check_marcum_args(a, b)?;
    Ok(q_half_complement(a, b))
}

fn q_half(a: f64, b: f64) -> f64 {
    0.5 * erfc((b - a) / std::f64::consts::SQRT_2) + 0.5 * erfc((b + a) / std::f64::consts::SQRT_2)
}

fn q_half_complement(a: f64, b: f64) -> f64 {
    let v = 0.5 * erfc((a - b) / std::f64::consts::SQRT_2) - 0.5 * erfc((a + b) / std::f64::consts::SQRT_2);
    v.max(0.0)
}

/// `ln(1 - Q_{1/2}(a, b))` without cancellation at either end.
fn ln_one_minus_q(a: f64, b: f64) -> f64 {
    let q = q_half(a, b);
    if q < 0.5 {
        (-q).ln_1p()
    } else {
        q_half_complement(a, b).ln()
    }
}

/// Noiseless branch signals of one symbol at `|h| = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchProfile {
    pub ps: Vec<f64>,
    pub fs: Vec<f64>,
    pub ps_mean_sq: f64,
    pub fs_mean_sq: f64,
}

fn mean_sq(y: &[f64]) -> f64 {
    y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64
}

impl BranchProfile {
    pub fn new(scenario: &Scenario, rho: f64, n: usize) -> Result<Self> {
        let tx = scenario.transmit(rho, n)?;
        let env = envelope_detect(&tx, Complex64::new(1.0, 0.0), scenario.path_gain());
        let ps = ps_signal(&env, &scenario.receiver);
        let fs = fs_signal(&env, &scenario.receiver, &tx.grid);
        Ok(BranchProfile {
            ps_mean_sq: mean_sq(&ps),
            fs_mean_sq: mean_sq(&fs),
            ps,
            fs,
        })
    }

    /// `ln P[PAPR_branch <= gamma | |h|]` under the independent-sample model.
    pub fn ln_cdf(&self, branch: Branch, params: &ReceiverParams, h_mag: f64, gamma: f64) -> f64 {
        let (y, m, sigma_sq, squelch, scale) = match branch {
            Branch::Ps => (&self.ps, self.ps_mean_sq, params.sigma_ps_sq, params.squelch_ps(), 0.5),
            Branch::Fs => (&self.fs, self.fs_mean_sq, params.sigma_fs_sq, params.squelch_fs(), 1.0),
        };
        let h2 = h_mag * h_mag;
        let expected_power = h2 * m + sigma_sq;
        if expected_power < squelch {
            // The estimator is gated and reports zero.
            return 0.0;
        }
        if !(gamma > 0.0) {
            return f64::NEG_INFINITY;
        }
        let sigma = sigma_sq.sqrt();
        let b = (scale * gamma * expected_power / sigma_sq).sqrt();
        y.iter().map(|v| ln_one_minus_q(h_mag * v.abs() / sigma, b)).sum()
    }

    /// `F_ID = F_PS * F_FS` at `gamma`.
    pub fn cdf_id(&self, params: &ReceiverParams, h_mag: f64, gamma: f64) -> f64 {
        (self.ln_cdf(Branch::Ps, params, h_mag, gamma) + self.ln_cdf(Branch::Fs, params, h_mag, gamma)).exp()
    }
}

fn rayleigh_pdf(z: f64, sigma_h_sq: f64) -> f64 {
    2.0 * z / sigma_h_sq * (-z * z / sigma_h_sq).exp()
}

/// `E_{|h|}[g(|h|)]` for Rayleigh `|h|` with `E|h|^2 = sigma_h_sq`.
pub fn rayleigh_average<G: Fn(f64) -> f64>(g: G, sigma_h_sq: f64) -> Result<f64> {
    if !(sigma_h_sq > 0.0) {
        return Err(Error::param("fading variance must be positive"));
    }
    let top = RAYLEIGH_SPAN * sigma_h_sq.sqrt();
    let body = integrate(
        |z| {
            let v = g(z);
            if v.is_finite() {
                Ok(rayleigh_pdf(z, sigma_h_sq) * v)
            } else {
                Err(Error::Numerical(format!("non-finite integrand at |h| = {z}")))
            }
        },
        0.0,
        top,
        QUAD_TOL,
    )?;
    let tail_mass = (-RAYLEIGH_SPAN * RAYLEIGH_SPAN).exp();
    Ok(body + tail_mass * g(top))
}

fn query_profile(q: &CdfQuery) -> Result<BranchProfile> {
    if !(q.gamma > 0.0) {
        return Err(Error::param("gamma must be positive"));
    }
    q.scenario.validate()?;
    BranchProfile::new(&q.scenario, q.scenario.signal.rho, q.n_active)
}

/// Branch PAPR CDF conditioned on the fading magnitude.
pub fn papr_cdf_conditional(q: &CdfQuery, h_mag: f64) -> Result<f64> {
    let profile = query_profile(q)?;
    Ok(profile.ln_cdf(q.branch, &q.scenario.receiver, h_mag, q.gamma).exp())
}

/// Branch PAPR CDF averaged over the given fading density. The whole
/// conditional product is averaged, not its individual factors.
pub fn papr_cdf_with_density(q: &CdfQuery, density: FadingDensity) -> Result<f64> {
    let profile = query_profile(q)?;
    let params = q.scenario.receiver;
    let cdf = |z: f64| profile.ln_cdf(q.branch, &params, z, q.gamma).exp();
    match density {
        FadingDensity::PointMass(h) => Ok(cdf(h)),
        FadingDensity::Rayleigh { sigma_h_sq } => Ok(rayleigh_average(cdf, sigma_h_sq)?.clamp(0.0, 1.0)),
    }
}

pub fn papr_cdf_rayleigh(q: &CdfQuery) -> Result<f64> {
    papr_cdf_with_density(
        q,
        FadingDensity::Rayleigh {
            sigma_h_sq: q.scenario.channel.sigma_h_sq,
        },
    )
}

/// Per-symbol profiles of one `(rho, Q)` constellation.
#[derive(Debug, Clone)]
pub struct SerModel {
    profiles: Vec<BranchProfile>,
    receiver: ReceiverParams,
    sigma_h_sq: f64,
}

impl SerModel {
    pub fn new(scenario: &Scenario, rho: f64, q_total: usize) -> Result<Self> {
        if q_total < 2 {
            return Err(Error::param("SER needs Q >= 2"));
        }
        let mut s = scenario.clone();
        s.signal.q_total = q_total;
        s.validate()?;
        let profiles = (1..=q_total)
            .map(|n| BranchProfile::new(&s, rho, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(SerModel {
            profiles,
            receiver: s.receiver,
            sigma_h_sq: s.channel.sigma_h_sq,
        })
    }

    pub fn q_total(&self) -> usize {
        self.profiles.len()
    }

    /// Symbol error probability of a uniformly drawn symbol at fixed `|h|`.
    pub fn conditional(&self, h_mag: f64) -> f64 {
        let q = self.q_total();
        let f = |n: usize, gamma: f64| self.profiles[n - 1].cdf_id(&self.receiver, h_mag, gamma);
        let total: f64 = (1..=q)
            .map(|n| {
                let g = 2.0 * n as f64;
                let p = if n == 1 {
                    1.0 - f(1, 3.0)
                } else if n == q {
                    f(q, g - 1.0)
                } else {
                    1.0 - f(n, g + 1.0) + f(n, g - 1.0)
                };
                p.clamp(0.0, 1.0)
            })
            .sum();
        total / q as f64
    }

    pub fn rayleigh(&self) -> Result<f64> {
        Ok(rayleigh_average(|z| self.conditional(z), self.sigma_h_sq)?.clamp(0.0, 1.0))
    }
}

pub fn ser_conditional(rho: f64, q_total: usize, scenario: &Scenario, h_mag: f64) -> Result<f64> {
    Ok(SerModel::new(scenario, rho, q_total)?.conditional(h_mag))
}

/// SER over Rayleigh fading.
pub fn ser_analytical(rho: f64, q_total: usize, scenario: &Scenario) -> Result<f64> {
    SerModel::new(scenario, rho, q_total)?.rayleigh()
}

fn draw_h<R: Rng + ?Sized>(fading: Fading, sigma_h_sq: f64, rng: &mut R) -> Complex64 {
    match fading {
        Fading::Rayleigh => cscg(sigma_h_sq, rng),
        Fading::Fixed(h) => h,
    }
}

/// Full-chain symbol error rate with uniformly drawn symbols.
pub fn ser_monte_carlo<R: Rng + ?Sized>(
    rho: f64,
    q_total: usize,
    scenario: &Scenario,
    trials: usize,
    fading: Fading,
    rng: &mut R,
) -> Result<McEstimate> {
    if q_total < 1 || trials == 0 {
        return Err(Error::param("need Q >= 1 and at least one trial"));
    }
    let mut s = scenario.clone();
    s.signal.q_total = q_total;
    s.validate()?;
    let tx = (1..=q_total).map(|n| s.transmit(rho, n)).collect::<Result<Vec<_>>>()?;
    let pg = s.path_gain();
    let mut errors = 0;
    for _ in 0..trials {
        let n = rng.random_range(1..=q_total);
        let h = draw_h(fading, s.channel.sigma_h_sq, rng);
        let (_, n_hat) = receive(&tx[n - 1], h, pg, &s.receiver, q_total, rng);
        if n_hat != n {
            errors += 1;
        }
    }
    Ok(McEstimate::from_counts(errors, trials))
}

/// Empirical branch PAPR estimates of a fixed symbol.
pub fn papr_samples<R: Rng + ?Sized>(
    scenario: &Scenario,
    n_active: usize,
    branch: Branch,
    fading: Fading,
    trials: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    scenario.validate()?;
    let tx = scenario.transmit(scenario.signal.rho, n_active)?;
    let pg = scenario.path_gain();
    let p = &scenario.receiver;
    Ok((0..trials)
        .map(|_| {
            let h = draw_h(fading, scenario.channel.sigma_h_sq, rng);
            let env = envelope_detect(&tx, h, pg);
            match branch {
                Branch::Ps => estimate_papr_ps(&split_ps(&env, p, rng), p.squelch_ps()),
                Branch::Fs => estimate_papr_fs(&split_fs(&env, p, &tx.grid, rng), p.squelch_fs()),
            }
        })
        .collect())
}

/// Largest gap between an empirical CDF and a model CDF evaluated at the sample points.
pub fn sup_distance<F: FnMut(f64) -> Result<f64>>(samples: &[f64], mut model: F) -> Result<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    let mut worst: f64 = 0.0;
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j + 1 < s.len() && s[j + 1] == s[i] {
            j += 1;
        }
        let f = model(s[i])?;
        worst = worst.max((f - i as f64 / m).abs()).max((f - (j + 1) as f64 / m).abs());
        i = j + 1;
    }
    Ok(worst)
}

/// Bounds on the sup-distance between an empirical CDF and a monotone model
/// CDF that is evaluated only at about `evals` order statistics.
///
/// The lower bound is the exact gap at the evaluated points. Between two
/// evaluated order statistics both CDFs are non-decreasing, which bounds the
/// gap at every skipped sample from above.
pub fn sup_distance_bounds<F: FnMut(f64) -> Result<f64>>(
    samples: &[f64],
    mut model: F,
    evals: usize,
) -> Result<(f64, f64)> {
    if samples.is_empty() || evals < 2 {
        return Err(Error::param("need samples and at least two evaluation points"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len();
    let mf = m as f64;
    let stride = m.div_ceil(evals).max(1);
    let mut idx: Vec<usize> = (0..m).step_by(stride).collect();
    if *idx.last().unwrap_or(&0) != m - 1 {
        idx.push(m - 1);
    }
    // Empirical CDF just below and at each evaluated sample, honouring ties.
    let below = |i: usize| s.partition_point(|x| *x < s[i]) as f64 / mf;
    let at = |i: usize| s.partition_point(|x| *x <= s[i]) as f64 / mf;
    let f: Vec<f64> = idx.iter().map(|i| model(s[*i])).collect::<Result<_>>()?;
    let mut lower: f64 = 0.0;
    let mut upper: f64 = 0.0;
    for (k, i) in idx.iter().enumerate() {
        let gap = (f[k] - below(*i)).abs().max((f[k] - at(*i)).abs());
        lower = lower.max(gap);
        upper = upper.max(gap);
        if k + 1 < idx.len() {
            let j = idx[k + 1];
            upper = upper.max(f[k + 1] - at(*i)).max(below(j) - f[k]);
        }
    }
    // Below the first and above the last sample the empirical CDF is 0 and 1.
    upper = upper.max(f[0]).max(1.0 - f[f.len() - 1]);
    Ok((lower, upper))
}

/// Fraction of AR(1) fading blocks whose conditional SER exceeds `ser_tag`.
pub fn outage_probability<R: Rng + ?Sized>(
    rho: f64,
    q_total: usize,
    scenario: &Scenario,
    ser_tag: f64,
    blocks: usize,
    rng: &mut R,
) -> Result<f64> {
    if blocks == 0 || !(0.0..=1.0).contains(&ser_tag) {
        return Err(Error::param("need blocks >= 1 and ser_tag in [0, 1]"));
    }
    let model = SerModel::new(scenario, rho, q_total)?;
    let h = channel_magnitudes(&scenario.channel, blocks, rng);
    // With noise every conditional SER is positive even where it underflows to zero.
    let out = h
        .par_iter()
        .filter(|z| ser_tag == 0.0 || model.conditional(**z) > ser_tag)
        .count();
    Ok(out as f64 / blocks as f64)
}

fn channel_magnitudes<R: Rng + ?Sized>(params: &ChannelParams, blocks: usize, rng: &mut R) -> Vec<f64> {
    let mut b = ChannelBlock::stationary(params, rng);
    let mut out = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        out.push(b.h.norm());
        b = advance(&b, params, rng);
    }
    out
}

/// `R = (1 - p_out) log2(Q) / T`.
pub fn achievable_rate(p_out: f64, q_total: usize, symbol_period: f64) -> f64 {
    (1.0 - p_out) * (q_total as f64).log2() / symbol_period
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::dbm_to_watts;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn scenario(rho: f64, p_dbm: f64) -> Scenario {
        let mut s = Scenario::default();
        s.signal.rho = rho;
        s.signal.p_dr = dbm_to_watts(p_dbm);
        s
    }

    /// Gaussian upper tail by Simpson integration of the density, independent of erfc.
    fn gauss_tail(x: f64) -> f64 {
        let n = 20_000;
        let hi = 12.0;
        let h = (hi - x) / n as f64;
        let phi = |t: f64| (-t * t / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = phi(x) + phi(hi);
        for k in 1..n {
            s += phi(x + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn marcum_reference_points() {
        assert_eq!(marcum_q_half(1.3, 0.0).unwrap(), 1.0);
        let v = marcum_q_half(0.0, 1.0).unwrap();
        assert!((v - 2.0 * gauss_tail(1.0)).abs() < 1e-10);
        assert!((v - 0.317_310_507_862_914).abs() < 1e-12);
        let a = 3.0;
        let b = 3.0;
        let oracle = gauss_tail(b - a) + gauss_tail(b + a);
        assert!((marcum_q_half(a, b).unwrap() - oracle).abs() < 1e-10);
        assert!(marcum_q_half(-1.0, 1.0).is_err());
        assert!(marcum_q_half_complement(1.0, -1.0).is_err());
    }

    #[test]
    fn marcum_against_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: Vec<f64> = (0..400_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        for a in [0.0, 0.5, 2.0] {
            for b in [0.3, 1.0, 2.5] {
                let p = marcum_q_half(a, b).unwrap();
                let hits = z.iter().filter(|x| (*x + a).powi(2) > b * b).count() as f64 / z.len() as f64;
                let se = (p * (1.0 - p) / z.len() as f64).sqrt();
                assert!((hits - p).abs() < 4.0 * se, "({a},{b}): {hits} vs {p}");
            }
        }
    }

    #[test]
    fn complement_keeps_precision() {
        let (a, b) = (0.0, 1e-6);
        let c = marcum_q_half_complement(a, b).unwrap();
        // P(|Z| <= b) ~ 2 b phi(0).
        assert!((c / (2.0 * b / (2.0 * std::f64::consts::PI).sqrt()) - 1.0).abs() < 1e-6);
        assert!((ln_one_minus_q(a, b) - c.ln()).abs() < 1e-9);
    }

    proptest::proptest! {
        #[test]
        fn marcum_monotone(a in 0.0f64..6.0, b in 0.0f64..8.0, d in 1e-3f64..1.0) {
            let q = marcum_q_half(a, b).unwrap();
            proptest::prop_assert!((0.0..=1.0).contains(&q));
            proptest::prop_assert!(marcum_q_half(a, b + d).unwrap() <= q + 1e-15);
            proptest::prop_assert!(marcum_q_half(a + d, b).unwrap() >= q - 1e-15);
            let c = marcum_q_half_complement(a, b).unwrap();
            proptest::prop_assert!((q + c - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cdf_limits_and_monotonicity() {
        for (rho, branch) in [(0.0, Branch::Ps), (1.0 - 1e-3, Branch::Fs)] {
            let s = scenario(rho, -10.0);
            let mut prev = 0.0;
            for k in 1..=60 {
                let gamma = 0.75 * k as f64;
                let q = CdfQuery {
                    gamma,
                    n_active: 8,
                    branch,
                    scenario: s.clone(),
                };
                let f = papr_cdf_conditional(&q, 1.0).unwrap();
                assert!((0.0..=1.0).contains(&f));
                assert!(f >= prev - 1e-12);
                prev = f;
            }
            let q = CdfQuery {
                gamma: 1e-3,
                n_active: 8,
                branch,
                scenario: s.clone(),
            };
            assert!(papr_cdf_conditional(&q, 1.0).unwrap() < 1e-12);
            let q = CdfQuery {
                gamma: 1e4,
                n_active: 8,
                branch,
                scenario: s.clone(),
            };
            assert!((papr_cdf_conditional(&q, 1.0).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn point_mass_hook_matches_conditional() {
        let q = CdfQuery {
            gamma: 15.5,
            n_active: 8,
            branch: Branch::Ps,
            scenario: scenario(0.0, -10.0),
        };
        for h in [0.1, 0.5, 1.3] {
            let a = papr_cdf_with_density(&q, FadingDensity::PointMass(h)).unwrap();
            let b = papr_cdf_conditional(&q, h).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rayleigh_average_integrates_known_moments() {
        let m2 = rayleigh_average(|z| z * z, 1.7).unwrap();
        assert!((m2 - 1.7).abs() < 1e-6);
        let p = rayleigh_average(|z| if z * z < 0.5 { 1.0 } else { 0.0 }, 1.0).unwrap();
        assert!((p - (1.0 - (-0.5f64).exp())).abs() < 1e-5);
    }

    #[test]
    fn conditional_cdf_matches_monte_carlo() {
        let s = scenario(0.0, -10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = Complex64::new(1.0, 0.0);
        let samples = papr_samples(&s, 4, Branch::Ps, Fading::Fixed(h), 4000, &mut rng).unwrap();
        let profile = BranchProfile::new(&s, 0.0, 4).unwrap();
        let d = sup_distance(&samples, |g| Ok(profile.ln_cdf(Branch::Ps, &s.receiver, 1.0, g).exp())).unwrap();
        assert!(d < 0.03, "sup distance {d}");
    }

    #[test]
    fn noiseless_linear_ser_vanishes() {
        let mut s = scenario(0.0, -40.0);
        s.receiver.sigma_ps_sq = 1e-30;
        s.receiver.sigma_fs_sq = 1e-30;
        for rho in [0.0, s.signal.rho_fs] {
            let m = SerModel::new(&s, rho, 8).unwrap();
            assert!(m.conditional(1.0) < 1e-12);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mc = ser_monte_carlo(rho, 8, &s, 1000, Fading::Fixed(Complex64::new(1.0, 0.0)), &mut rng).unwrap();
            assert_eq!(mc.p, 0.0);
        }
    }

    #[test]
    fn ser_monte_carlo_is_deterministic() {
        let s = scenario(0.0, -10.0);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            ser_monte_carlo(0.0, 4, &s, 300, Fading::Rayleigh, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn outage_extremes() {
        let s = scenario(0.0, -10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(outage_probability(0.0, 4, &s, 1.0, 200, &mut rng).unwrap(), 0.0);
        assert_eq!(outage_probability(0.0, 4, &s, 0.0, 200, &mut rng).unwrap(), 1.0);
    }

    #[test]
    fn rate_formula() {
        assert!((achievable_rate(0.0, 16, 100e-6) - 40e3).abs() < 1e-9);
        assert_eq!(achievable_rate(1.0, 16, 100e-6), 0.0);
        assert!((achievable_rate(0.5, 4, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sparse_sup_bounds_bracket_exact_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<f64> = (0..5000).map(|_| rng.random::<f64>().powf(1.1)).collect();
        let model = |x: f64| Ok(x.clamp(0.0, 1.0));
        let exact = sup_distance(&samples, model).unwrap();
        let (lo, hi) = sup_distance_bounds(&samples, model, 100).unwrap();
        assert!(lo <= exact + 1e-15 && exact <= hi + 1e-15, "{lo} {exact} {hi}");
        assert!(hi - lo < 0.03, "{lo} {hi}");
        let (lo, hi) = sup_distance_bounds(&samples, model, 5000).unwrap();
        assert!((lo - exact).abs() < 1e-12 && hi >= exact);
    }
}
