//! Mixed-timescale mode switching: per-block `(rho, Q)` selection under
//! energy causality, threshold labelling, and episode simulation.

use std::collections::BTreeMap;
use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{Mode, Scenario, SerModel};
use crate::channel::{advance, ChannelBlock};
use crate::error::{Error, Result};
use crate::harvest::{harvested_power, EhCurveSet};
use crate::hpa::average_output_power;
use crate::neuralnet::{train, SampleBatch, TcnConfig, TcnModel, TrainReport};
use crate::units::{dbm_to_watts, watts_to_dbm};
use crate::waveform::{SignalConfig, ToneWeights};

/// Features per window entry: rho, Q, p_r (dBm), p_th (dBm).
pub const FEATURES: usize = 4;
/// Blocks per batch for the batch-means standard error.
const SE_BATCH: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlParams {
    pub allowed_q: Vec<usize>,
    pub ser_tag: f64,
    /// Receiver circuit consumption, watts.
    pub p_c: f64,
    pub grid_min_dbm: f64,
    pub grid_max_dbm: f64,
    pub grid_points: usize,
    /// Trailing blocks behind each training label.
    pub label_window: usize,
    /// Received-power quantization of the outage table.
    pub bin_db: f64,
    pub table_min_dbm: f64,
    pub table_max_dbm: f64,
    /// Blocks between learned-threshold refreshes.
    pub update_period: usize,
}

impl Default for ControlParams {
    fn default() -> Self {
        ControlParams {
            allowed_q: vec![4, 8, 16],
            ser_tag: 0.01,
            p_c: 10e-6,
            grid_min_dbm: -40.0,
            grid_max_dbm: 0.0,
            grid_points: 41,
            label_window: 1000,
            bin_db: 0.5,
            table_min_dbm: -70.0,
            table_max_dbm: 10.0,
            update_period: 1,
        }
    }
}

impl ControlParams {
    pub fn validate(&self) -> Result<()> {
        if self.allowed_q.is_empty() || self.allowed_q.iter().any(|q| *q < 2) {
            return Err(Error::param("allowed Q set must be non-empty with every Q >= 2"));
        }
        if !(0.0..=1.0).contains(&self.ser_tag) {
            return Err(Error::param("ser_tag must lie in [0, 1]"));
        }
        if !(self.p_c > 0.0) {
            return Err(Error::param("circuit power p_c must be positive"));
        }
        if self.grid_points < 2 || !(self.grid_max_dbm > self.grid_min_dbm) {
            return Err(Error::param("threshold grid needs >= 2 points over a non-empty range"));
        }
        if !(self.bin_db > 0.0) || !(self.table_max_dbm > self.table_min_dbm) {
            return Err(Error::param(
                "outage table needs a positive bin width over a non-empty range",
            ));
        }
        if self.label_window == 0 || self.update_period == 0 {
            return Err(Error::param("label window and update period must be >= 1"));
        }
        Ok(())
    }

    /// Candidate thresholds in watts, ascending.
    pub fn threshold_grid(&self) -> Vec<f64> {
        let step = (self.grid_max_dbm - self.grid_min_dbm) / (self.grid_points - 1) as f64;
        (0..self.grid_points)
            .map(|i| dbm_to_watts(self.grid_min_dbm + step * i as f64))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeDecision {
    pub mode: Mode,
    /// `0` or `rho_FS`.
    pub rho: f64,
    pub q: usize,
    pub feasible: bool,
    /// Harvested DC power at the chosen `(mode, Q)`, watts.
    pub p_eh: f64,
    pub ser: f64,
    /// Achievable rate in bit/s; zero when infeasible.
    pub rate: f64,
}

/// Circuit consumption plus the per-block harvested power of an episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnergyLedger {
    pub p_c: f64,
    pub harvested: Vec<f64>,
}

impl EnergyLedger {
    pub fn new(p_c: f64) -> Result<Self> {
        if !(p_c > 0.0) {
            return Err(Error::param("circuit power p_c must be positive"));
        }
        Ok(EnergyLedger {
            p_c,
            harvested: Vec::new(),
        })
    }
}

/// Sliding window of the last `w` control records, zero-filled until warm.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlState {
    pub window: Vec<[f64; FEATURES]>,
    pub w: usize,
    filled: usize,
}

impl ControlState {
    pub fn new(w: usize) -> Self {
        ControlState {
            window: vec![[0.0; FEATURES]; w],
            w,
            filled: 0,
        }
    }

    pub fn push(&mut self, rec: [f64; FEATURES]) {
        self.window.remove(0);
        self.window.push(rec);
        self.filled = (self.filled + 1).min(self.w);
    }

    pub fn is_warm(&self) -> bool {
        self.filled == self.w
    }

    /// Time-major flat copy, oldest first.
    pub fn flat(&self) -> Vec<f64> {
        self.window.iter().flatten().copied().collect()
    }
}

/// One window entry: the fed-back power of a block alongside the decision in force when it arrived.
pub fn feature_record(rho: f64, q: usize, p_r: f64, p_th: f64) -> [f64; FEATURES] {
    [rho, q as f64, watts_to_dbm(p_r), watts_to_dbm(p_th)]
}

/// Conditional SER of every `(mode, Q)` on a grid of received feedback power,
/// plus the transmit power each symbol set draws from the HPA.
#[derive(Debug, Clone, PartialEq)]
pub struct OutageTable {
    pub min_dbm: f64,
    pub bin_db: f64,
    pub ser_tag: f64,
    pub rho_fs: f64,
    pub rho_r: f64,
    pub p_ref: f64,
    /// SER per bin, keyed by `(mode, Q)`.
    pub ser: BTreeMap<(Mode, usize), Vec<f64>>,
    /// Symbol-averaged HPA output power, watts.
    pub tx_power: BTreeMap<(Mode, usize), f64>,
}

impl OutageTable {
    /// Evaluate the table at bin centres for the scenario's drive power.
    pub fn build(scenario: &Scenario, params: &ControlParams) -> Result<Self> {
        params.validate()?;
        scenario.validate()?;
        let bins = ((params.table_max_dbm - params.table_min_dbm) / params.bin_db).round() as usize + 1;
        let pg = scenario.path_gain();
        let p_ref = scenario.channel.p_ref_w;
        let keys: Vec<(Mode, usize)> = [Mode::SingleTone, Mode::MultiTone]
            .iter()
            .flat_map(|m| params.allowed_q.iter().map(move |q| (*m, *q)))
            .collect();
        let rows = keys
            .par_iter()
            .map(|&(mode, q)| {
                let rho = mode.rho(scenario.signal.rho_fs);
                let model = SerModel::new(scenario, rho, q)?;
                let ser = (0..bins)
                    .map(|i| {
                        let p_r = dbm_to_watts(params.table_min_dbm + params.bin_db * i as f64);
                        model.conditional((p_r / (pg * p_ref)).sqrt())
                    })
                    .collect::<Vec<_>>();
                Ok((
                    (mode, q),
                    ser,
                    symbol_averaged_power(&scenario.signal, scenario, rho, q)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ser = BTreeMap::new();
        let mut tx_power = BTreeMap::new();
        for (k, s, p) in rows {
            ser.insert(k, s);
            tx_power.insert(k, p);
        }
        Ok(OutageTable {
            min_dbm: params.table_min_dbm,
            bin_db: params.bin_db,
            ser_tag: params.ser_tag,
            rho_fs: scenario.signal.rho_fs,
            rho_r: scenario.signal.rho_r,
            p_ref,
            ser,
            tx_power,
        })
    }

    /// Table from a caller-supplied SER function of `(mode, Q, p_r dBm)` with a flat transmit power.
    #[allow(clippy::too_many_arguments)]
    pub fn from_fn<F: Fn(Mode, usize, f64) -> f64>(
        allowed_q: &[usize],
        min_dbm: f64,
        max_dbm: f64,
        bin_db: f64,
        ser_tag: f64,
        tx_power: f64,
        p_ref: f64,
        ser_fn: F,
    ) -> Result<Self> {
        if !(bin_db > 0.0) || !(max_dbm > min_dbm) || !(p_ref > 0.0) || !(tx_power >= 0.0) {
            return Err(Error::param("bad synthetic outage table bounds"));
        }
        let bins = ((max_dbm - min_dbm) / bin_db).round() as usize + 1;
        let mut ser = BTreeMap::new();
        let mut tx = BTreeMap::new();
        for mode in [Mode::SingleTone, Mode::MultiTone] {
            for &q in allowed_q {
                let v = (0..bins)
                    .map(|i| ser_fn(mode, q, min_dbm + bin_db * i as f64).clamp(0.0, 1.0))
                    .collect();
                ser.insert((mode, q), v);
                tx.insert((mode, q), tx_power);
            }
        }
        Ok(OutageTable {
            min_dbm,
            bin_db,
            ser_tag,
            rho_fs: SignalConfig::default().rho_fs,
            rho_r: 0.0,
            p_ref,
            ser,
            tx_power: tx,
        })
    }

    pub fn allowed_q(&self) -> Vec<usize> {
        let mut q: Vec<usize> = self.ser.keys().map(|(_, q)| *q).collect();
        q.sort_unstable();
        q.dedup();
        q
    }

    fn bin(&self, len: usize, p_r: f64) -> usize {
        let x = ((watts_to_dbm(p_r) - self.min_dbm) / self.bin_db).round();
        if x.is_nan() || x < 0.0 {
            0
        } else {
            (x as usize).min(len - 1)
        }
    }

    /// SER at the bin nearest `p_r`, clamped to the table edges.
    pub fn ser_at(&self, mode: Mode, q: usize, p_r: f64) -> Option<f64> {
        let row = self.ser.get(&(mode, q))?;
        Some(row[self.bin(row.len(), p_r)])
    }

    /// Block outage indicator: 1 when the conditional SER exceeds the target.
    pub fn p_out(&self, mode: Mode, q: usize, p_r: f64) -> Option<f64> {
        let s = self.ser_at(mode, q, p_r)?;
        Some(if self.ser_tag == 0.0 || s > self.ser_tag {
            1.0
        } else {
            0.0
        })
    }

    /// Rectifier input power of `(mode, Q)` when the pilot was received at `p_r`.
    pub fn eh_input(&self, mode: Mode, q: usize, p_r: f64) -> Option<f64> {
        let p_tx = self.tx_power.get(&(mode, q))?;
        Some(p_r / self.p_ref * p_tx * (1.0 - self.rho_r))
    }
}

fn symbol_averaged_power(cfg: &SignalConfig, scenario: &Scenario, rho: f64, q: usize) -> Result<f64> {
    let grid = scenario.grid();
    let mut total = 0.0;
    for n in 1..=q {
        total += average_output_power(&cfg.with_symbol(rho, n), &ToneWeights::equal(n), &scenario.hpa, &grid)?;
    }
    Ok(total / q as f64)
}

/// Pick `rho` by comparing `p_r` against `p_th`, then the rate-maximizing
/// self-powered `Q`. Ties go to the smaller `Q`.
pub fn short_term_decide(
    p_r: f64,
    p_th: f64,
    table: &OutageTable,
    curves: &EhCurveSet,
    ledger: &EnergyLedger,
    symbol_period: f64,
) -> Result<ModeDecision> {
    let mode = if p_r >= p_th { Mode::SingleTone } else { Mode::MultiTone };
    decide_in_mode(mode, p_r, table, curves, ledger.p_c, symbol_period)
}

fn decide_in_mode(
    mode: Mode,
    p_r: f64,
    table: &OutageTable,
    curves: &EhCurveSet,
    p_c: f64,
    symbol_period: f64,
) -> Result<ModeDecision> {
    let missing = || Error::param(format!("outage table lacks an entry for {} mode", mode.name()));
    let mut best: Option<ModeDecision> = None;
    let mut fallback: Option<ModeDecision> = None;
    for q in table.allowed_q() {
        let p_in = table.eh_input(mode, q, p_r).ok_or_else(missing)?;
        let p_eh = harvested_power(curves.for_mode(mode, q)?, p_in);
        let ser = table.ser_at(mode, q, p_r).ok_or_else(missing)?;
        let p_out = table.p_out(mode, q, p_r).ok_or_else(missing)?;
        let d = ModeDecision {
            mode,
            rho: mode.rho(table.rho_fs),
            q,
            feasible: p_eh >= p_c,
            p_eh,
            ser,
            rate: (1.0 - p_out) * (q as f64).log2() / symbol_period,
        };
        if d.feasible {
            if best.is_none_or(|b| d.rate > b.rate) {
                best = Some(d);
            }
        } else if fallback.is_none_or(|b| d.p_eh > b.p_eh) {
            fallback = Some(ModeDecision { rate: 0.0, ..d });
        }
    }
    best.or(fallback)
        .ok_or_else(|| Error::param("outage table has no Q entries"))
}

/// Both per-mode decisions of one block; any threshold selects one of them.
#[derive(Debug, Clone, Copy)]
struct ModePair {
    p_r: f64,
    single: ModeDecision,
    multi: ModeDecision,
}

impl ModePair {
    fn new(p_r: f64, table: &OutageTable, curves: &EhCurveSet, p_c: f64, t: f64) -> Result<Self> {
        Ok(ModePair {
            p_r,
            single: decide_in_mode(Mode::SingleTone, p_r, table, curves, p_c, t)?,
            multi: decide_in_mode(Mode::MultiTone, p_r, table, curves, p_c, t)?,
        })
    }

    fn pick(&self, p_th: f64) -> &ModeDecision {
        if self.p_r >= p_th {
            &self.single
        } else {
            &self.multi
        }
    }
}

fn best_threshold(pairs: &[ModePair], grid: &[f64]) -> f64 {
    let mut best = (f64::NEG_INFINITY, grid[0]);
    for &t in grid {
        let r: f64 = pairs.iter().map(|p| p.pick(t).rate).sum();
        if r > best.0 {
            best = (r, t);
        }
    }
    best.1
}

/// Grid threshold maximizing the summed rate over the history of fed-back
/// powers; the smallest candidate wins ties.
pub fn label_threshold(
    history_p_r: &[f64],
    grid: &[f64],
    table: &OutageTable,
    curves: &EhCurveSet,
    ledger: &EnergyLedger,
    symbol_period: f64,
) -> Result<f64> {
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::param("threshold grid must be non-empty and strictly ascending"));
    }
    let pairs = history_p_r
        .iter()
        .map(|p| ModePair::new(*p, table, curves, ledger.p_c, symbol_period))
        .collect::<Result<Vec<_>>>()?;
    Ok(best_threshold(&pairs, grid))
}

#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    /// Constant threshold in watts.
    Fixed(f64),
    /// Per-block search over the threshold grid; an upper bound on any threshold policy.
    Exhaustive,
    /// TCN estimate from the control window, starting from `initial` watts until warm.
    Learned { model: &'a TcnModel, initial: f64 },
}

impl Controller<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::Fixed(_) => "fixed",
            Controller::Exhaustive => "exhaustive",
            Controller::Learned { .. } => "tcn",
        }
    }
}

/// Everything a controller needs at one drive power.
#[derive(Debug, Clone)]
pub struct ControlContext {
    pub scenario: Scenario,
    pub params: ControlParams,
    pub table: OutageTable,
    pub curves: EhCurveSet,
}

impl ControlContext {
    pub fn new(scenario: &Scenario, params: &ControlParams, curves: EhCurveSet) -> Result<Self> {
        for q in &params.allowed_q {
            curves.for_mode(Mode::MultiTone, *q)?;
        }
        curves.for_mode(Mode::SingleTone, 2)?;
        Ok(ControlContext {
            scenario: scenario.clone(),
            params: params.clone(),
            table: OutageTable::build(scenario, params)?,
            curves,
        })
    }

    pub fn symbol_period(&self) -> f64 {
        self.scenario.signal.symbol_period()
    }

    fn pair(&self, p_r: f64) -> Result<ModePair> {
        ModePair::new(p_r, &self.table, &self.curves, self.params.p_c, self.symbol_period())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub v: u64,
    pub h: Complex64,
    pub p_r: f64,
    pub p_th: f64,
    pub decision: ModeDecision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub rows: Vec<TrajectoryRow>,
    pub mean_rate: f64,
    /// Batch-means standard error of `mean_rate`.
    pub std_error: f64,
    pub ledger: EnergyLedger,
}

impl Episode {
    pub fn thresholds_dbm(&self) -> Vec<f64> {
        self.rows.iter().map(|r| watts_to_dbm(r.p_th)).collect()
    }

    /// Write the trajectory log as CSV with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "v", "re_h", "im_h", "p_r_dbm", "p_th_dbm", "rho", "q", "feasible", "ser_cond", "rate",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.v.to_string(),
                r.h.re.to_string(),
                r.h.im.to_string(),
                watts_to_dbm(r.p_r).to_string(),
                watts_to_dbm(r.p_th).to_string(),
                r.decision.rho.to_string(),
                r.decision.q.to_string(),
                u8::from(r.decision.feasible).to_string(),
                r.decision.ser.to_string(),
                r.decision.rate.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean and batch-means standard error of a per-block series.
pub fn batch_means(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let batches: Vec<f64> = x
        .chunks_exact(SE_BATCH)
        .map(|c| c.iter().sum::<f64>() / SE_BATCH as f64)
        .collect();
    if batches.len() < 2 {
        return (mean, f64::NAN);
    }
    let bm = batches.iter().sum::<f64>() / batches.len() as f64;
    let var = batches.iter().map(|b| (b - bm).powi(2)).sum::<f64>() / (batches.len() - 1) as f64;
    (mean, (var / batches.len() as f64).sqrt())
}

/// Channel advance, feedback, threshold refresh, short-term decision and
/// rate accumulation over `blocks` fading blocks.
pub fn run_episode<R: Rng + ?Sized>(
    ctx: &ControlContext,
    controller: Controller<'_>,
    blocks: usize,
    rng: &mut R,
) -> Result<Episode> {
    if blocks == 0 {
        return Err(Error::param("an episode needs at least one block"));
    }
    let ch = &ctx.scenario.channel;
    let grid = ctx.params.threshold_grid();
    let mut ledger = EnergyLedger::new(ctx.params.p_c)?;
    let mut state = match controller {
        Controller::Learned { model, .. } => Some(ControlState::new(model.config.window)),
        _ => None,
    };
    let mut p_th = match controller {
        Controller::Fixed(t) => t,
        Controller::Learned { initial, .. } => initial,
        Controller::Exhaustive => grid[0],
    };
    let mut last = (0.0, 0usize);
    let mut rows = Vec::with_capacity(blocks);
    let mut block = ChannelBlock::stationary(ch, rng);
    for v in 0..blocks {
        if v > 0 {
            block = advance(&block, ch, rng);
        }
        let pair = ctx.pair(block.p_r)?;
        match controller {
            Controller::Fixed(_) => {}
            Controller::Exhaustive => p_th = best_threshold(std::slice::from_ref(&pair), &grid),
            Controller::Learned { model, .. } => {
                let st = state.as_mut().expect("learned controller keeps a window");
                st.push(feature_record(last.0, last.1, block.p_r, p_th));
                if st.is_warm() && v % ctx.params.update_period == 0 {
                    let est = model.predict(&st.flat());
                    if est.is_finite() {
                        p_th = dbm_to_watts(est);
                    }
                }
            }
        }
        let d = *pair.pick(p_th);
        last = (d.rho, d.q);
        ledger.harvested.push(d.p_eh);
        rows.push(TrajectoryRow {
            v: v as u64,
            h: block.h,
            p_r: block.p_r,
            p_th,
            decision: d,
        });
    }
    let rates: Vec<f64> = rows.iter().map(|r| r.decision.rate).collect();
    let (mean_rate, std_error) = batch_means(&rates);
    Ok(Episode {
        rows,
        mean_rate,
        std_error,
        ledger,
    })
}

/// Re-derive harvested power from each logged `(p_r, rho, Q)` and return the
/// blocks flagged feasible that do not actually cover `p_c`.
pub fn audit_energy(rows: &[TrajectoryRow], table: &OutageTable, curves: &EhCurveSet, p_c: f64) -> Result<Vec<u64>> {
    let mut bad = Vec::new();
    for r in rows {
        let mode = if r.decision.rho > 0.0 {
            Mode::SingleTone
        } else {
            Mode::MultiTone
        };
        let p_in = table
            .eh_input(mode, r.decision.q, r.p_r)
            .ok_or_else(|| Error::param(format!("block {} uses Q = {} outside the table", r.v, r.decision.q)))?;
        if r.decision.feasible && harvested_power(curves.for_mode(mode, r.decision.q)?, p_in) < p_c {
            bad.push(r.v);
        }
    }
    Ok(bad)
}

/// Best grid threshold over every full trailing window of `lw` blocks; entry
/// `i` covers blocks `i..i + lw`.
fn trailing_labels(pairs: &[ModePair], lw: usize, grid: &[f64]) -> Vec<f64> {
    if pairs.len() < lw {
        return Vec::new();
    }
    (lw - 1..pairs.len())
        .into_par_iter()
        .map(|v| best_threshold(&pairs[(v + 1 - lw)..=v], grid))
        .collect()
}

/// Mean label (dBm) over the full trailing windows of a `blocks`-long channel
/// trajectory; infinite when the trajectory is shorter than `label_window`.
pub fn mean_label_dbm<R: Rng + ?Sized>(ctx: &ControlContext, blocks: usize, rng: &mut R) -> Result<f64> {
    let ep = run_episode(ctx, Controller::Exhaustive, blocks, rng)?;
    let pairs = ep.rows.iter().map(|r| ctx.pair(r.p_r)).collect::<Result<Vec<_>>>()?;
    let labels = trailing_labels(&pairs, ctx.params.label_window, &ctx.params.threshold_grid());
    if labels.is_empty() {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(labels.iter().map(|t| watts_to_dbm(*t)).sum::<f64>() / labels.len() as f64)
}

/// Sliding windows labelled with the best threshold (dBm) over the trailing
/// `label_window` blocks. Labels depend only on the fed-back powers; the
/// decision features come from an exploration policy that holds a uniformly
/// drawn grid threshold for `window` blocks at a time, so the network sees
/// the whole threshold range as input rather than a single teacher's choices.
pub fn training_set<R: Rng + ?Sized>(
    ctx: &ControlContext,
    window: usize,
    samples: usize,
    rng: &mut R,
) -> Result<SampleBatch> {
    if window == 0 || samples == 0 {
        return Err(Error::param("training set needs a positive window and sample count"));
    }
    let lw = ctx.params.label_window;
    let warm = window.max(lw);
    let blocks = warm + samples - 1;
    let grid = ctx.params.threshold_grid();
    let ch = &ctx.scenario.channel;
    let mut block = ChannelBlock::stationary(ch, rng);
    let mut pairs = Vec::with_capacity(blocks);
    let mut records = Vec::with_capacity(blocks);
    let mut p_th = grid[rng.random_range(0..grid.len())];
    let mut last = (0.0, 0usize);
    for v in 0..blocks {
        if v > 0 {
            block = advance(&block, ch, rng);
        }
        let pair = ctx.pair(block.p_r)?;
        records.push(feature_record(last.0, last.1, block.p_r, p_th));
        if v % window == 0 {
            p_th = grid[rng.random_range(0..grid.len())];
        }
        let d = pair.pick(p_th);
        last = (d.rho, d.q);
        pairs.push(pair);
    }
    let inputs = ((warm - 1)..blocks)
        .map(|v| records[(v + 1 - window)..=v].iter().flatten().copied().collect())
        .collect();
    let targets = trailing_labels(&pairs, lw, &grid)[(warm - lw)..]
        .iter()
        .map(|t| watts_to_dbm(*t))
        .collect();
    Ok(SampleBatch {
        inputs,
        targets,
        window,
        features: FEATURES,
    })
}

/// Generate a labelled set at this drive power and fit a fresh TCN to it.
pub fn train_controller<R: Rng + ?Sized>(
    ctx: &ControlContext,
    config: &TcnConfig,
    samples: usize,
    rng: &mut R,
) -> Result<(TcnModel, TrainReport)> {
    if config.input_features != FEATURES {
        return Err(Error::param(format!("controller TCN needs {FEATURES} input features")));
    }
    let data = training_set(ctx, config.window, samples, rng)?;
    let mut model = TcnModel::random(config, rng)?;
    let report = train(&mut model, &data, rng)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harvest::EhCurve;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const T: f64 = 1e-4;

    /// Lossless rectifier for every tone count used below.
    fn ideal_curves() -> EhCurveSet {
        let curves = [1, 4, 8, 16]
            .iter()
            .map(|q| (*q, EhCurve::new(*q, vec![0.0, 1.0], vec![0.0, 1.0]).unwrap()))
            .collect();
        EhCurveSet { curves }
    }

    fn table<F: Fn(Mode, usize, f64) -> f64>(f: F) -> OutageTable {
        OutageTable::from_fn(&[4, 8, 16], -70.0, 10.0, 0.5, 0.01, 1.0, 1.0, f).unwrap()
    }

    fn ledger(p_c: f64) -> EnergyLedger {
        EnergyLedger::new(p_c).unwrap()
    }

    fn synthetic_ctx(t: OutageTable) -> ControlContext {
        ControlContext {
            scenario: Scenario::default(),
            params: ControlParams {
                p_c: 1e-30,
                ..ControlParams::default()
            },
            table: t,
            curves: ideal_curves(),
        }
    }

    #[test]
    fn threshold_selects_mode() {
        let t = table(|_, _, _| 0.0);
        let c = ideal_curves();
        let d = short_term_decide(1e-3, 1e-3, &t, &c, &ledger(1e-9), T).unwrap();
        assert_eq!(d.mode, Mode::SingleTone);
        assert_eq!(d.rho, t.rho_fs);
        let d = short_term_decide(1e-3, 2e-3, &t, &c, &ledger(1e-9), T).unwrap();
        assert_eq!(d.mode, Mode::MultiTone);
        assert_eq!(d.rho, 0.0);
    }

    #[test]
    fn zero_outage_picks_largest_q() {
        let d = short_term_decide(1e-3, 0.0, &table(|_, _, _| 0.0), &ideal_curves(), &ledger(1e-9), T).unwrap();
        assert!(d.feasible);
        assert_eq!(d.q, 16);
        assert!((d.rate - 4.0 / T).abs() < 1e-9);
    }

    #[test]
    fn ties_go_to_smaller_q() {
        // Q = 8 and 16 in outage, Q = 4 clean: log2(4) wins; all-outage ties resolve to Q = 4.
        let t = table(|_, q, _| if q == 4 { 0.0 } else { 1.0 });
        let d = short_term_decide(1e-3, 0.0, &t, &ideal_curves(), &ledger(1e-9), T).unwrap();
        assert_eq!((d.q, d.rate), (4, 2.0 / T));
        let d = short_term_decide(1e-3, 0.0, &table(|_, _, _| 1.0), &ideal_curves(), &ledger(1e-9), T).unwrap();
        assert_eq!((d.q, d.rate), (4, 0.0));
        assert!(d.feasible);
    }

    #[test]
    fn below_every_self_powering_threshold_is_infeasible() {
        let t = table(|_, _, _| 0.0);
        let c = ideal_curves();
        // Lossless rectifier: harvested = p_r, so anything below p_c fails in both modes.
        for p_th in [0.0, 1.0] {
            let d = short_term_decide(1e-6, p_th, &t, &c, &ledger(1e-5), T).unwrap();
            assert!(!d.feasible);
            assert_eq!(d.rate, 0.0);
        }
    }

    #[test]
    fn bundled_table_is_bounded_and_orders_q() {
        let mut s = Scenario::default();
        s.signal.p_dr = dbm_to_watts(-10.0);
        let params = ControlParams {
            table_min_dbm: -30.0,
            table_max_dbm: 0.0,
            bin_db: 2.0,
            ..ControlParams::default()
        };
        let t = OutageTable::build(&s, &params).unwrap();
        for row in t.ser.values() {
            assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
        // Higher feedback power means a stronger channel: SER must not rise.
        for mode in [Mode::SingleTone, Mode::MultiTone] {
            let row = &t.ser[&(mode, 4)];
            assert!(row.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{mode:?}: {row:?}");
            for i in 0..row.len() {
                assert!(t.ser[&(mode, 4)][i] <= t.ser[&(mode, 16)][i] + 1e-12);
            }
        }
        let p = t.tx_power[&(Mode::SingleTone, 4)];
        assert!((watts_to_dbm(p) - 15.0).abs() < 0.5, "{}", watts_to_dbm(p));
    }

    #[test]
    fn label_grid_extremes() {
        let params = ControlParams::default();
        let grid = params.threshold_grid();
        let c = ideal_curves();
        let l = ledger(1e-30);
        let history: Vec<f64> = (0..50).map(|i| dbm_to_watts(-35.0 + 0.6 * i as f64)).collect();
        let single_wins = table(|m, _, _| if m == Mode::SingleTone { 0.0 } else { 1.0 });
        let th = label_threshold(&history, &grid, &single_wins, &c, &l, T).unwrap();
        assert_eq!(th, grid[0]);
        let multi_wins = table(|m, _, _| if m == Mode::MultiTone { 0.0 } else { 1.0 });
        let near_top: Vec<f64> = (0..20).map(|i| dbm_to_watts(-0.9 + 0.04 * i as f64)).collect();
        let th = label_threshold(&near_top, &grid, &multi_wins, &c, &l, T).unwrap();
        assert_eq!(th, *grid.last().unwrap());
    }

    #[test]
    fn label_recovers_planted_switch_point() {
        let params = ControlParams::default();
        let grid = params.threshold_grid();
        let t = table(|m, _, dbm| match (m, dbm < -20.0) {
            (Mode::MultiTone, true) | (Mode::SingleTone, false) => 0.0,
            _ => 1.0,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let history: Vec<f64> = (0..400).map(|_| dbm_to_watts(rng.random_range(-38.0..-2.0))).collect();
        let th = label_threshold(&history, &grid, &t, &ideal_curves(), &ledger(1e-30), T).unwrap();
        assert!((watts_to_dbm(th) + 20.0).abs() <= 1.0 + 1e-9, "{}", watts_to_dbm(th));
    }

    #[test]
    fn label_rejects_bad_grid() {
        let t = table(|_, _, _| 0.0);
        assert!(label_threshold(&[1e-3], &[], &t, &ideal_curves(), &ledger(1e-9), T).is_err());
        assert!(label_threshold(&[1e-3], &[2.0, 1.0], &t, &ideal_curves(), &ledger(1e-9), T).is_err());
    }

    #[test]
    fn fixed_zero_threshold_reaches_full_rate() {
        let ctx = synthetic_ctx(table(|_, _, _| 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = run_episode(&ctx, Controller::Fixed(0.0), 500, &mut rng).unwrap();
        let expect = 16f64.log2() / ctx.symbol_period();
        assert!((ep.mean_rate - expect).abs() < 1e-9 * expect);
        assert!(ep
            .rows
            .iter()
            .all(|r| r.decision.mode == Mode::SingleTone && r.decision.q == 16));
        assert_eq!(ep.std_error, 0.0);
    }

    #[test]
    fn exhaustive_dominates_fixed_on_matched_seed() {
        let ctx = synthetic_ctx(table(|m, _, dbm| match (m, dbm < -13.0) {
            (Mode::MultiTone, true) | (Mode::SingleTone, false) => 0.0,
            _ => 1.0,
        }));
        for th in [-30.0, -13.0, -5.0] {
            let mut a = ChaCha8Rng::seed_from_u64(9);
            let mut b = ChaCha8Rng::seed_from_u64(9);
            let ex = run_episode(&ctx, Controller::Exhaustive, 2000, &mut a).unwrap();
            let fx = run_episode(&ctx, Controller::Fixed(dbm_to_watts(th)), 2000, &mut b).unwrap();
            assert!(ex.mean_rate >= fx.mean_rate, "threshold {th}");
            for (e, f) in ex.rows.iter().zip(&fx.rows) {
                assert_eq!(e.h, f.h);
                assert!(e.decision.rate >= f.decision.rate);
            }
        }
    }

    #[test]
    fn energy_audit_passes_and_catches_tampering() {
        let mut s = Scenario::default();
        s.signal.p_dr = dbm_to_watts(0.0);
        let params = ControlParams {
            table_min_dbm: -40.0,
            table_max_dbm: 5.0,
            ..ControlParams::default()
        };
        let ctx = ControlContext::new(&s, &params, EhCurveSet::bundled().unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ep = run_episode(&ctx, Controller::Exhaustive, 3000, &mut rng).unwrap();
        let feasible = ep.rows.iter().filter(|r| r.decision.feasible).count();
        assert!(feasible > 0 && feasible < ep.rows.len());
        assert!(audit_energy(&ep.rows, &ctx.table, &ctx.curves, params.p_c)
            .unwrap()
            .is_empty());
        assert_eq!(ep.ledger.harvested.len(), ep.rows.len());
        let mut rows = ep.rows.clone();
        let victim = rows.iter().position(|r| !r.decision.feasible).unwrap();
        rows[victim].decision.feasible = true;
        assert_eq!(
            audit_energy(&rows, &ctx.table, &ctx.curves, params.p_c).unwrap(),
            vec![victim as u64]
        );
    }

    #[test]
    fn control_state_pads_then_slides() {
        let mut st = ControlState::new(3);
        assert!(!st.is_warm());
        assert_eq!(st.flat(), vec![0.0; 12]);
        for i in 0..4 {
            st.push([i as f64; FEATURES]);
        }
        assert!(st.is_warm());
        assert_eq!(st.window.len(), 3);
        assert_eq!(st.window[0], [1.0; FEATURES]);
        assert_eq!(st.window[2], [3.0; FEATURES]);
    }

    #[test]
    fn batch_means_of_constant_and_alternating_series() {
        let (m, se) = batch_means(&[2.0; 1000]);
        assert_eq!((m, se), (2.0, 0.0));
        let x: Vec<f64> = (0..1000).map(|i| if (i / 100) % 2 == 0 { 0.0 } else { 1.0 }).collect();
        let (m, se) = batch_means(&x);
        assert!((m - 0.5).abs() < 1e-12);
        // Ten batch means alternating 0/1: sample sd sqrt(10/36), divided by sqrt(10).
        assert!((se - (10.0f64 / 36.0).sqrt() / 10f64.sqrt()).abs() < 1e-12);
        assert!(batch_means(&[1.0; 50]).1.is_nan());
    }

    #[test]
    fn trajectory_csv_has_log_columns() {
        let ctx = synthetic_ctx(table(|_, _, _| 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ep = run_episode(&ctx, Controller::Fixed(1e-3), 5, &mut rng).unwrap();
        let mut buf = Vec::new();
        ep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "v,re_h,im_h,p_r_dbm,p_th_dbm,rho,q,feasible,ser_cond,rate"
        );
        assert_eq!(lines.count(), 5);
    }

    #[test]
    fn training_windows_have_model_shape() {
        let ctx = synthetic_ctx(table(|m, _, dbm| match (m, dbm < -13.0) {
            (Mode::MultiTone, true) | (Mode::SingleTone, false) => 0.0,
            _ => 1.0,
        }));
        let mut ctx = ctx;
        ctx.params.label_window = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = training_set(&ctx, 8, 50, &mut rng).unwrap();
        data.validate().unwrap();
        assert_eq!((data.len(), data.window, data.features), (50, 8, FEATURES));
        let grid: Vec<f64> = ctx.params.threshold_grid().iter().map(|w| watts_to_dbm(*w)).collect();
        for y in &data.targets {
            assert!(grid.iter().any(|g| (g - y).abs() < 1e-9));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn raising_threshold_never_switches_to_single(p_r_dbm in -60.0f64..5.0, a in -60.0f64..5.0, b in -60.0f64..5.0) {
            let t = table(|m, q, dbm| if m == Mode::MultiTone { ((dbm + 40.0) / 40.0 * q as f64 / 16.0).clamp(0.0, 1.0) } else { 0.0 });
            let c = ideal_curves();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p_r = dbm_to_watts(p_r_dbm);
            let d_lo = short_term_decide(p_r, dbm_to_watts(lo), &t, &c, &ledger(1e-9), T).unwrap();
            let d_hi = short_term_decide(p_r, dbm_to_watts(hi), &t, &c, &ledger(1e-9), T).unwrap();
            prop_assert!(!(d_lo.mode == Mode::MultiTone && d_hi.mode == Mode::SingleTone));
        }
    }
}
