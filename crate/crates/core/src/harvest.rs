//! Piecewise-linear nonlinear energy-harvesting model fitted per tone count.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::analysis::Mode;
use crate::error::{Error, Result};
use crate::units::{dbm_to_watts, watts_to_dbm};

/// Synthetic rectifier curves shipped with the crate, `q,p_in_dbm,p_eh_dbm`.
pub const BUNDLED_DATASET: &str = include_str!("../data/eh_dataset.csv");
/// Default number of linear segments when fitting measured data.
pub const DEFAULT_SEGMENTS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EhCurve {
    pub q: usize,
    /// Strictly increasing supporting inputs; `x[0]` is turn-on, `x[K]` saturation.
    pub x_points: Vec<f64>,
    /// Non-decreasing harvested powers with `y[k] <= x[k]`.
    pub y_points: Vec<f64>,
}

impl EhCurve {
    pub fn new(q: usize, x_points: Vec<f64>, y_points: Vec<f64>) -> Result<Self> {
        if x_points.len() < 2 || x_points.len() != y_points.len() {
            return Err(Error::param("EH curve needs K >= 1 segments and matching point counts"));
        }
        if x_points.iter().chain(&y_points).any(|v| !v.is_finite()) || x_points[0] < 0.0 {
            return Err(Error::param("EH curve points must be finite with x >= 0"));
        }
        if x_points.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("EH curve inputs must be strictly increasing"));
        }
        if y_points.windows(2).any(|w| w[1] < w[0]) || y_points[0] < 0.0 {
            return Err(Error::param("EH curve outputs must be nonnegative and non-decreasing"));
        }
        if x_points.iter().zip(&y_points).any(|(x, y)| y > x) {
            return Err(Error::param("EH curve harvests more than its input"));
        }
        Ok(EhCurve { q, x_points, y_points })
    }

    pub fn segments(&self) -> usize {
        self.x_points.len() - 1
    }

    pub fn turn_on(&self) -> f64 {
        self.x_points[0]
    }

    pub fn saturation(&self) -> f64 {
        self.x_points[self.segments()]
    }

    pub fn max_output(&self) -> f64 {
        self.y_points[self.segments()]
    }

    /// Segment slopes `eta_k`.
    pub fn slopes(&self) -> Vec<f64> {
        self.x_points
            .windows(2)
            .zip(self.y_points.windows(2))
            .map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0]))
            .collect()
    }

    /// Smallest input that harvests at least `p_c`, if any.
    pub fn self_powering_threshold(&self, p_c: f64) -> Option<f64> {
        if p_c <= 0.0 {
            return Some(0.0);
        }
        if p_c > self.max_output() {
            return None;
        }
        if p_c <= self.y_points[0] {
            return Some(self.x_points[0]);
        }
        let k = self.y_points.iter().position(|y| *y >= p_c)?;
        let (x0, x1, y0, y1) = (
            self.x_points[k - 1],
            self.x_points[k],
            self.y_points[k - 1],
            self.y_points[k],
        );
        Some(x0 + (p_c - y0) * (x1 - x0) / (y1 - y0))
    }
}

/// Harvested DC power for RF input `p_in` watts.
pub fn harvested_power(c: &EhCurve, p_in: f64) -> f64 {
    let x = &c.x_points;
    let y = &c.y_points;
    if !(p_in >= x[0]) {
        return 0.0;
    }
    let k = c.segments();
    if p_in >= x[k] {
        return y[k];
    }
    let i = x.partition_point(|v| *v <= p_in);
    y[i - 1] + (y[i] - y[i - 1]) * (p_in - x[i - 1]) / (x[i] - x[i - 1])
}

/// Power conversion efficiency `P_EH / P_in`.
pub fn pce(c: &EhCurve, p_in: f64) -> f64 {
    if !(p_in > 0.0) {
        return 0.0;
    }
    harvested_power(c, p_in) / p_in
}

/// Continuous piecewise-linear least-squares fit with `k_segments` segments.
///
/// Turn-on is the first input with positive output, moved back to the last
/// zero-output sample before it when one exists. Saturation is the first
/// input whose output is within 2% of the data maximum. Interior knots sit on
/// the input quantiles between the two.
pub fn fit_piecewise(q: usize, data: &[(f64, f64)], k_segments: usize) -> Result<EhCurve> {
    if k_segments == 0 {
        return Err(Error::param("need at least one segment"));
    }
    let mut pts: Vec<(f64, f64)> = data.to_vec();
    if pts
        .iter()
        .any(|(x, y)| !x.is_finite() || !y.is_finite() || *x < 0.0 || *y < 0.0)
    {
        return Err(Error::Data("EH data must be finite and nonnegative".into()));
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::Data("duplicate input powers in EH data".into()));
    }
    let first_pos = pts
        .iter()
        .position(|p| p.1 > 0.0)
        .ok_or_else(|| Error::Data(format!("q = {q}: no positive harvested power")))?;
    let start = if first_pos > 0 { first_pos - 1 } else { 0 };
    let y_max = pts.iter().map(|p| p.1).fold(0.0, f64::max);
    let sat = start
        + pts[start..]
            .iter()
            .position(|p| p.1 >= 0.98 * y_max)
            .unwrap_or(pts.len() - 1 - start);
    let span = &pts[start..=sat];
    if span.len() < k_segments + 1 {
        return Err(Error::Data(format!(
            "q = {q}: {} points between turn-on and saturation, need {}",
            span.len(),
            k_segments + 1
        )));
    }

    let m = span.len() - 1;
    let knots: Vec<f64> = (0..=k_segments)
        .map(|j| span[(j * m + k_segments / 2) / k_segments].0)
        .collect();
    if knots.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data(format!("q = {q}: degenerate knot grid")));
    }

    // Every point from turn-on upward enters the fit; beyond saturation only the last basis is active.
    let fit_pts = &pts[start..];
    let mut a = DMatrix::<f64>::zeros(fit_pts.len(), k_segments + 1);
    let scale = y_max.max(f64::MIN_POSITIVE);
    let b = DVector::from_iterator(fit_pts.len(), fit_pts.iter().map(|p| p.1 / scale));
    for (r, (x, _)) in fit_pts.iter().enumerate() {
        if *x >= knots[k_segments] {
            a[(r, k_segments)] = 1.0;
            continue;
        }
        let i = knots.partition_point(|v| v <= x).max(1);
        let t = (x - knots[i - 1]) / (knots[i] - knots[i - 1]);
        a[(r, i - 1)] = 1.0 - t;
        a[(r, i)] = t;
    }
    // A measured zero at turn-on pins y0 = 0 so the curve is continuous there.
    let pinned = usize::from(first_pos > 0);
    let solved = a
        .columns(pinned, k_segments + 1 - pinned)
        .into_owned()
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::Numerical(format!("EH least squares: {e}")))?;
    let coef: Vec<f64> = std::iter::repeat_n(0.0, pinned).chain(solved.iter().copied()).collect();

    let mut y = Vec::with_capacity(k_segments + 1);
    let mut floor: f64 = 0.0;
    for (j, c) in coef.iter().enumerate() {
        let v = (c * scale).max(floor).min(knots[j]);
        floor = floor.max(v);
        y.push(v);
    }
    EhCurve::new(q, knots, y)
}

/// Smallest input where multi-tone PCE stops beating single-tone PCE, found
/// by a 0.5 dB scan and refined by bisection.
pub fn pce_crossover(single: &EhCurve, multi: &EhCurve) -> Result<f64> {
    const STEP_DB: f64 = 0.5;
    let diff = |dbm: f64| {
        let p = dbm_to_watts(dbm);
        pce(multi, p) - pce(single, p)
    };
    let lo = watts_to_dbm(single.turn_on().min(multi.turn_on()).max(1e-15));
    let hi = watts_to_dbm(10.0 * single.saturation().max(multi.saturation()));
    let mut seen_positive = None;
    let mut x = lo;
    while x <= hi {
        let d = diff(x);
        if d > 0.0 {
            seen_positive = Some(x);
        } else if d < 0.0 {
            if let Some(pos) = seen_positive {
                let (mut a, mut b) = (pos, x);
                while b - a > 1e-3 {
                    let mid = 0.5 * (a + b);
                    if diff(mid) > 0.0 {
                        a = mid;
                    } else {
                        b = mid;
                    }
                }
                return Ok(dbm_to_watts(0.5 * (a + b)));
            }
        }
        x += STEP_DB;
    }
    Err(Error::Degenerate(
        "PCE curves never cross from multi-tone to single-tone advantage".into(),
    ))
}

/// Parse `q,p_in_dbm,p_eh_dbm` rows into watts, grouped by `q`.
pub fn load_eh_dataset<R: Read>(reader: R) -> Result<BTreeMap<usize, Vec<(f64, f64)>>> {
    #[derive(Deserialize)]
    struct Row {
        q: usize,
        p_in_dbm: f64,
        p_eh_dbm: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["q", "p_in_dbm", "p_eh_dbm"] {
        return Err(Error::Data(format!("unexpected EH dataset header {headers:?}")));
    }
    let mut out: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: Row = row?;
        if row.q == 0 || row.p_in_dbm.is_nan() || row.p_eh_dbm.is_nan() {
            return Err(Error::Data("EH dataset row with q = 0 or NaN power".into()));
        }
        out.entry(row.q)
            .or_default()
            .push((dbm_to_watts(row.p_in_dbm), dbm_to_watts(row.p_eh_dbm)));
    }
    if out.is_empty() {
        return Err(Error::Data("empty EH dataset".into()));
    }
    Ok(out)
}

pub fn load_eh_dataset_path(path: &Path) -> Result<BTreeMap<usize, Vec<(f64, f64)>>> {
    load_eh_dataset(std::fs::File::open(path)?)
}

/// One fitted curve per tone count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EhCurveSet {
    pub curves: BTreeMap<usize, EhCurve>,
}

impl EhCurveSet {
    pub fn fit(data: &BTreeMap<usize, Vec<(f64, f64)>>, k_segments: usize) -> Result<Self> {
        let curves = data
            .iter()
            .map(|(q, pts)| Ok((*q, fit_piecewise(*q, pts, k_segments)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(EhCurveSet { curves })
    }

    pub fn bundled() -> Result<Self> {
        Self::fit(&load_eh_dataset(BUNDLED_DATASET.as_bytes())?, DEFAULT_SEGMENTS)
    }

    /// Single-tone mode uses the `q = 1` curve, multi-tone mode the `q = Q` curve.
    pub fn for_mode(&self, mode: Mode, q_total: usize) -> Result<&EhCurve> {
        let q = match mode {
            Mode::SingleTone => 1,
            Mode::MultiTone => q_total,
        };
        self.curves
            .get(&q)
            .ok_or_else(|| Error::param(format!("no EH curve for q = {q}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_point() -> EhCurve {
        EhCurve::new(1, vec![1.0, 3.0], vec![0.0, 1.0]).unwrap()
    }

    fn linear(x0: f64, slope: f64, xk: f64) -> EhCurve {
        EhCurve::new(1, vec![x0, xk], vec![0.0, slope * (xk - x0)]).unwrap()
    }

    #[test]
    fn piecewise_evaluation() {
        let c = two_point();
        assert_eq!(harvested_power(&c, 0.5), 0.0);
        assert_eq!(harvested_power(&c, 2.0), 0.5);
        assert_eq!(harvested_power(&c, 3.0), 1.0);
        assert_eq!(harvested_power(&c, 1e9), 1.0);
        assert_eq!(pce(&c, 0.5), 0.0);
        assert!((pce(&c, 3.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!(pce(&c, 1e12) < 1e-11);
        assert_eq!(c.slopes(), vec![0.5]);
    }

    #[test]
    fn constructor_rejects_bad_curves() {
        assert!(EhCurve::new(1, vec![1.0], vec![0.0]).is_err());
        assert!(EhCurve::new(1, vec![1.0, 1.0], vec![0.0, 0.5]).is_err());
        assert!(EhCurve::new(1, vec![1.0, 2.0], vec![0.5, 0.4]).is_err());
        assert!(EhCurve::new(1, vec![1.0, 2.0], vec![0.0, 2.5]).is_err());
    }

    #[test]
    fn self_powering_threshold_inverts_curve() {
        let c = EhCurve::new(1, vec![1.0, 2.0, 4.0], vec![0.0, 0.5, 1.0]).unwrap();
        let x = c.self_powering_threshold(0.75).unwrap();
        assert!((x - 3.0).abs() < 1e-15);
        assert!(harvested_power(&c, x) >= 0.75 - 1e-15);
        assert!(c.self_powering_threshold(1.5).is_none());
    }

    #[test]
    fn fit_recovers_piecewise_linear_data() {
        let truth = EhCurve::new(4, vec![1.0, 3.0, 5.0, 7.0], vec![0.0, 1.0, 1.5, 2.0]).unwrap();
        let data: Vec<(f64, f64)> = (0..=12)
            .map(|i| {
                let x = 0.5 * i as f64 + 1.0;
                (x, harvested_power(&truth, x))
            })
            .chain([(0.2, 0.0), (9.0, 2.0), (12.0, 2.0)])
            .collect();
        let fit = fit_piecewise(4, &data, 3).unwrap();
        assert_eq!(fit.x_points, truth.x_points);
        for (a, b) in fit.y_points.iter().zip(&truth.y_points) {
            assert!((a - b).abs() < 1e-12, "{:?}", fit.y_points);
        }
    }

    #[test]
    fn fit_is_continuous_at_turn_on() {
        for c in EhCurveSet::bundled().unwrap().curves.values() {
            assert_eq!(c.y_points[0], 0.0);
            let x0 = c.turn_on();
            assert_eq!(harvested_power(c, x0 * (1.0 - 1e-12)), harvested_power(c, x0));
        }
    }

    #[test]
    fn fit_recovers_single_slope() {
        let data: Vec<(f64, f64)> = (1..=11).map(|i| (i as f64, 0.3 * i as f64)).collect();
        let fit = fit_piecewise(1, &data, 1).unwrap();
        assert!((fit.slopes()[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn fit_rejects_degenerate_data() {
        assert!(fit_piecewise(1, &[(1.0, 0.0), (2.0, 0.0)], 1).is_err());
        assert!(fit_piecewise(1, &[(1.0, 0.1), (2.0, 0.2)], 4).is_err());
        assert!(fit_piecewise(1, &[(1.0, 0.1), (1.0, 0.2), (2.0, 0.3)], 1).is_err());
    }

    #[test]
    fn crossover_of_constructed_curves() {
        let single = linear(1.75e-5, 0.6, 1e-2);
        let multi = linear(1e-6, 0.5, 1e-2);
        let x = pce_crossover(&single, &multi).unwrap();
        assert!((watts_to_dbm(x) + 10.0).abs() < 0.1, "{}", watts_to_dbm(x));
        assert!(pce_crossover(&single, &single).is_err());
    }

    #[test]
    fn dataset_loader_converts_units() {
        let text = "q,p_in_dbm,p_eh_dbm\n1,0,-10\n1,10,-inf\n4,-3,-20\n";
        let d = load_eh_dataset(text.as_bytes()).unwrap();
        assert_eq!(d[&1][0], (1e-3, 1e-4));
        assert_eq!(d[&1][1].1, 0.0);
        assert_eq!(d[&4].len(), 1);
        assert!(load_eh_dataset("a,b,c\n1,2,3\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn harvested_power_monotone_and_efficient(
            xs in proptest::collection::vec(1e-6f64..1.0, 2..8),
            fracs in proptest::collection::vec(0.0f64..1.0, 8),
            p in 0.0f64..20.0,
            dp in 0.0f64..1.0,
        ) {
            let mut x = xs.clone();
            x.sort_by(f64::total_cmp);
            x.dedup();
            prop_assume!(x.len() >= 2);
            let mut y = Vec::new();
            let mut floor: f64 = 0.0;
            for (i, xi) in x.iter().enumerate() {
                let v = (fracs[i] * xi).max(floor).min(*xi);
                floor = v;
                y.push(v);
            }
            prop_assume!(y.windows(2).all(|w| w[1] >= w[0]));
            let c = EhCurve::new(2, x, y).unwrap();
            let a = harvested_power(&c, p);
            let b = harvested_power(&c, p + dp);
            prop_assert!(b >= a);
            prop_assert!((0.0..=1.0).contains(&pce(&c, p + 1e-9)));
        }
    }
}
