//! Experiment driver: flat sectioned configuration, built-in presets, seeded
//! parallel sweeps and CSV emission.
//!
//! Every power in a config file is in dBm; everything handed to the library
//! is in watts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use toml::{Spanned, Value};

use crate::analysis::{
    outage_probability, papr_cdf_rayleigh, papr_samples, ser_analytical, ser_monte_carlo, sup_distance_bounds, Branch,
    CdfQuery, Fading, Mode, Scenario,
};
use crate::control::{mean_label_dbm, run_episode, train_controller, ControlContext, ControlParams, Controller};
use crate::error::{Error, Result};
use crate::harvest::{fit_piecewise, load_eh_dataset, pce_crossover, EhCurveSet, DEFAULT_SEGMENTS};
use crate::neuralnet::{gradient_check, SampleBatch, TcnConfig, TcnModel};
use crate::receiver::DcRemoval;
use crate::units::{db_to_linear, dbm_to_watts, watts_to_dbm};

/// Model evaluations per sup-distance bound.
const SUP_EVALS: usize = 500;

/// Built-in presets: name, one-line description, config text.
pub const PRESETS: &[(&str, &str, &str)] = &[
    (
        "fig8_cdf_ps",
        "PS-branch PAPR CDF of multi-tone symbols, analysis vs Monte-Carlo, Q=16",
        include_str!("../presets/fig8_cdf_ps.cfg"),
    ),
    (
        "fig9_cdf_fs",
        "FS-branch PAPR CDF of single-tone symbols, analysis vs Monte-Carlo, Q=16",
        include_str!("../presets/fig9_cdf_fs.cfg"),
    ),
    (
        "fig10_ser_single",
        "single-tone SER vs drive power for Q in {4,8,16} and two rho_FS values",
        include_str!("../presets/fig10_ser_single.cfg"),
    ),
    (
        "fig11_ser_modes",
        "single-tone and multi-tone SER vs drive power for Q in {4,8,16}",
        include_str!("../presets/fig11_ser_modes.cfg"),
    ),
    (
        "fig12_outage",
        "outage probability of both modes vs drive power at SER target 0.01",
        include_str!("../presets/fig12_outage.cfg"),
    ),
    (
        "fig13_training",
        "TCN training loss per epoch and mean labelled/estimated threshold vs drive power",
        include_str!("../presets/fig13_training.cfg"),
    ),
    (
        "fig14_rate",
        "mean achievable rate of exhaustive, TCN, fixed and single-mode controllers",
        include_str!("../presets/fig14_rate.cfg"),
    ),
    (
        "unit_scale",
        "seconds-long smoke run of the full control pipeline",
        include_str!("../presets/unit_scale.cfg"),
    ),
];

pub fn list_presets() -> Vec<(&'static str, &'static str)> {
    PRESETS.iter().map(|(n, d, _)| (*n, *d)).collect()
}

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _, _)| *n == name).map(|(_, _, t)| *t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Cdf,
    Ser,
    Outage,
    Training,
    Rate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub kind: Kind,
    pub seed: u64,
    pub trials: usize,
    pub blocks: usize,
    pub train_samples: usize,
    /// File stem of every CSV this experiment writes.
    pub output: String,
    pub p_dr_dbm: Vec<f64>,
    pub scenario: Scenario,
    pub control: ControlParams,
    pub tcn: TcnConfig,
    pub modes: Vec<Mode>,
    pub q_values: Vec<usize>,
    pub n_values: Vec<usize>,
    pub branch: Branch,
    pub cdf_mode: Mode,
    pub rho_fs_values: Vec<f64>,
    pub gamma_points: usize,
}

type Sections = BTreeMap<String, BTreeMap<String, Spanned<Value>>>;

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Typed, line-anchored access to a parsed config; remembers which keys were read.
struct Reader<'a> {
    text: &'a str,
    sections: Sections,
    used: Vec<(String, String)>,
}

impl<'a> Reader<'a> {
    fn parse(text: &'a str) -> Result<Self> {
        let sections: Sections = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map_or(1, |s| line_at(text, s.start)),
            message: e.message().trim().to_string(),
        })?;
        Ok(Reader {
            text,
            sections,
            used: Vec::new(),
        })
    }

    fn err(&self, v: &Spanned<Value>, message: String) -> Error {
        Error::Config {
            line: line_at(self.text, v.span().start),
            message,
        }
    }

    fn get(&mut self, section: &str, key: &str) -> Option<&Spanned<Value>> {
        self.used.push((section.to_string(), key.to_string()));
        self.sections.get(section)?.get(key)
    }

    fn f64(&mut self, section: &str, key: &str) -> Result<Option<f64>> {
        let Some(v) = self.get(section, key).cloned() else {
            return Ok(None);
        };
        match v.get_ref() {
            Value::Float(x) => Ok(Some(*x)),
            Value::Integer(i) => Ok(Some(*i as f64)),
            _ => Err(self.err(&v, format!("{section}.{key} must be a number"))),
        }
    }

    fn usize(&mut self, section: &str, key: &str) -> Result<Option<usize>> {
        let Some(v) = self.get(section, key).cloned() else {
            return Ok(None);
        };
        match v.get_ref() {
            Value::Integer(i) if *i >= 0 => Ok(Some(*i as usize)),
            _ => Err(self.err(&v, format!("{section}.{key} must be a nonnegative integer"))),
        }
    }

    fn string(&mut self, section: &str, key: &str) -> Result<Option<String>> {
        let Some(v) = self.get(section, key).cloned() else {
            return Ok(None);
        };
        match v.get_ref() {
            Value::String(s) => Ok(Some(s.clone())),
            _ => Err(self.err(&v, format!("{section}.{key} must be a string"))),
        }
    }

    fn list<T>(
        &mut self,
        section: &str,
        key: &str,
        what: &str,
        item: impl Fn(&Value) -> Option<T>,
    ) -> Result<Option<Vec<T>>> {
        let Some(v) = self.get(section, key).cloned() else {
            return Ok(None);
        };
        let bad = || format!("{section}.{key} must be a non-empty list of {what}");
        let Value::Array(a) = v.get_ref() else {
            return Err(self.err(&v, bad()));
        };
        let out: Option<Vec<T>> = a.iter().map(&item).collect();
        match out {
            Some(o) if !o.is_empty() => Ok(Some(o)),
            _ => Err(self.err(&v, bad())),
        }
    }

    fn f64_list(&mut self, section: &str, key: &str) -> Result<Option<Vec<f64>>> {
        self.list(section, key, "numbers", |x| match x {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            _ => None,
        })
    }

    fn usize_list(&mut self, section: &str, key: &str) -> Result<Option<Vec<usize>>> {
        self.list(section, key, "nonnegative integers", |x| match x {
            Value::Integer(i) if *i >= 0 => Some(*i as usize),
            _ => None,
        })
    }

    fn string_list(&mut self, section: &str, key: &str) -> Result<Option<Vec<String>>> {
        self.list(section, key, "strings", |x| x.as_str().map(str::to_string))
    }

    /// Line of `key` in `section`, or of the section header, or 1.
    fn line_of(&self, section: &str, key: &str) -> usize {
        if let Some(v) = self.sections.get(section).and_then(|s| s.get(key)) {
            return line_at(self.text, v.span().start);
        }
        let header = format!("[{section}]");
        self.text.lines().position(|l| l.trim() == header).map_or(1, |i| i + 1)
    }

    fn unknown_keys(&self) -> Result<()> {
        for (sec, entries) in &self.sections {
            for (key, v) in entries {
                if !self.used.iter().any(|(s, k)| s == sec && k == key) {
                    return Err(self.err(v, format!("unknown key {sec}.{key}")));
                }
            }
        }
        Ok(())
    }
}

fn parse_mode(s: &str) -> Option<Mode> {
    match s {
        "single" => Some(Mode::SingleTone),
        "multi" => Some(Mode::MultiTone),
        _ => None,
    }
}

const SECTIONS: &[&str] = &[
    "experiment",
    "sweep",
    "signal",
    "hpa",
    "receiver",
    "channel",
    "control",
    "tcn",
    "cdf",
    "ser",
];

impl ExperimentConfig {
    /// Parse a config file's text. Every error names the offending line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Reader::parse(text)?;
        for name in r.sections.keys() {
            if !SECTIONS.contains(&name.as_str()) {
                return Err(Error::Config {
                    line: r.line_of(name, ""),
                    message: format!("unknown section [{name}]"),
                });
            }
        }
        let cfg_err = |r: &Reader, sec: &str, key: &str, msg: String| Error::Config {
            line: r.line_of(sec, key),
            message: msg,
        };

        let name = r.string("experiment", "name")?.unwrap_or_else(|| "experiment".into());
        let kind = match r.string("experiment", "kind")?.as_deref() {
            Some("cdf") => Kind::Cdf,
            Some("ser") => Kind::Ser,
            Some("outage") => Kind::Outage,
            Some("training") => Kind::Training,
            Some("rate") => Kind::Rate,
            Some(other) => {
                return Err(cfg_err(
                    &r,
                    "experiment",
                    "kind",
                    format!("unknown experiment kind {other:?}"),
                ))
            }
            None => return Err(cfg_err(&r, "experiment", "kind", "experiment.kind is required".into())),
        };
        let seed = match r.get("experiment", "seed").cloned() {
            None => return Err(cfg_err(&r, "experiment", "seed", "experiment.seed is required".into())),
            Some(v) => match v.get_ref() {
                Value::Integer(i) if *i >= 0 => *i as u64,
                _ => return Err(r.err(&v, "experiment.seed must be a nonnegative integer".into())),
            },
        };
        let trials = r.usize("experiment", "trials")?.unwrap_or(10_000);
        let blocks = r.usize("experiment", "blocks")?.unwrap_or(10_000);
        let train_samples = r.usize("experiment", "train_samples")?.unwrap_or(4_000);
        let output = r.string("experiment", "output")?.unwrap_or_else(|| name.clone());
        if output.is_empty() || output.contains(['/', '\\']) {
            return Err(cfg_err(
                &r,
                "experiment",
                "output",
                "experiment.output must be a bare file stem".into(),
            ));
        }
        let p_dr_dbm = r
            .f64_list("sweep", "p_dr_dbm")?
            .ok_or_else(|| cfg_err(&r, "sweep", "p_dr_dbm", "sweep.p_dr_dbm is required".into()))?;

        let mut s = Scenario::default();
        if let Some(v) = r.f64("signal", "delta_f_hz")? {
            s.signal.delta_f = v;
        }
        if let Some(v) = r.f64("signal", "f1_offset_hz")? {
            s.signal.f1_offset = v;
        }
        if let Some(v) = r.f64("signal", "rho_fs")? {
            s.signal.rho_fs = v;
        }
        if let Some(v) = r.usize("signal", "q_total")? {
            s.signal.q_total = v;
        }

        if let Some(v) = r.f64("hpa", "gain_db")? {
            s.hpa.gain_v = db_to_linear(v).sqrt();
        }
        if let Some(v) = r.f64("hpa", "a_sat_dbm")? {
            s.hpa.a_sat = dbm_to_watts(v).sqrt();
        }
        if let Some(v) = r.f64("hpa", "beta")? {
            s.hpa.beta = v;
        }

        if let Some(v) = r.f64("receiver", "rho_r")? {
            s.receiver.rho_r = v;
            s.signal.rho_r = v;
        }
        if let Some(v) = r.f64("receiver", "sigma_ps_dbm")? {
            s.receiver.sigma_ps_sq = dbm_to_watts(v);
        }
        if let Some(v) = r.f64("receiver", "sigma_fs_dbm")? {
            s.receiver.sigma_fs_sq = dbm_to_watts(v);
        }
        if let Some(v) = r.f64("receiver", "cutoff_hz")? {
            s.receiver.cutoff_hz = v;
        }
        if let Some(v) = r.usize("receiver", "filter_order")? {
            s.receiver.filter_order = v as u32;
        }
        if let Some(v) = r.f64("receiver", "squelch_ratio")? {
            s.receiver.squelch_ratio = v;
        }
        if let Some(v) = r.string("receiver", "dc_removal")? {
            s.receiver.dc_removal = match v.as_str() {
                "mean" => DcRemoval::MeanSubtraction,
                "high_pass" => DcRemoval::HighPass,
                "literal_lc" => DcRemoval::LiteralLc,
                other => {
                    return Err(cfg_err(
                        &r,
                        "receiver",
                        "dc_removal",
                        format!("unknown DC removal {other:?}"),
                    ))
                }
            };
        }

        if let Some(v) = r.f64("channel", "zeta")? {
            s.channel.zeta = v;
        }
        if let Some(v) = r.f64("channel", "sigma_h_sq")? {
            s.channel.sigma_h_sq = v;
        }
        if let Some(v) = r.f64("channel", "path_exponent")? {
            s.channel.path_exponent = v;
        }
        if let Some(v) = r.f64("channel", "distance_m")? {
            s.channel.distance_m = v;
        }
        if let Some(v) = r.f64("channel", "antenna_gain_dbi")? {
            s.channel.antenna_gain_dbi_tx = v;
            s.channel.antenna_gain_dbi_rx = v;
        }
        if let Some(v) = r.f64("channel", "carrier_hz")? {
            s.channel.carrier_hz = v;
        }
        if let Some(v) = r.f64("channel", "p_ref_dbm")? {
            s.channel.p_ref_w = dbm_to_watts(v);
        }

        let mut c = ControlParams::default();
        if let Some(v) = r.usize_list("control", "allowed_q")? {
            c.allowed_q = v;
        }
        if let Some(v) = r.f64("control", "ser_tag")? {
            c.ser_tag = v;
        }
        if let Some(v) = r.f64("control", "p_c_dbm")? {
            c.p_c = dbm_to_watts(v);
        }
        if let Some(v) = r.f64("control", "grid_min_dbm")? {
            c.grid_min_dbm = v;
        }
        if let Some(v) = r.f64("control", "grid_max_dbm")? {
            c.grid_max_dbm = v;
        }
        if let Some(v) = r.usize("control", "grid_points")? {
            c.grid_points = v;
        }
        if let Some(v) = r.usize("control", "label_window")? {
            c.label_window = v;
        }
        if let Some(v) = r.f64("control", "bin_db")? {
            c.bin_db = v;
        }
        if let Some(v) = r.f64("control", "table_min_dbm")? {
            c.table_min_dbm = v;
        }
        if let Some(v) = r.f64("control", "table_max_dbm")? {
            c.table_max_dbm = v;
        }
        if let Some(v) = r.usize("control", "update_period")? {
            c.update_period = v;
        }

        let mut t = TcnConfig::default();
        if let Some(v) = r.usize("tcn", "filter_size")? {
            t.filter_size = v;
        }
        if let Some(v) = r.usize_list("tcn", "dilations")? {
            t.dilations = v;
        }
        if let Some(v) = r.usize("tcn", "channels")? {
            t.channels = v;
        }
        if let Some(v) = r.usize("tcn", "window")? {
            t.window = v;
        }
        if let Some(v) = r.f64("tcn", "learning_rate")? {
            t.learning_rate = v;
        }
        if let Some(v) = r.f64("tcn", "momentum")? {
            t.momentum = v;
        }
        if let Some(v) = r.usize("tcn", "epochs")? {
            t.epochs = v;
        }
        if let Some(v) = r.usize("tcn", "batch_size")? {
            t.batch_size = v;
        }

        let branch = match r.string("cdf", "branch")?.as_deref() {
            None | Some("ps") => Branch::Ps,
            Some("fs") => Branch::Fs,
            Some(other) => return Err(cfg_err(&r, "cdf", "branch", format!("unknown branch {other:?}"))),
        };
        let cdf_mode = match r.string("cdf", "mode")? {
            None => Mode::MultiTone,
            Some(m) => parse_mode(&m).ok_or_else(|| cfg_err(&r, "cdf", "mode", format!("unknown mode {m:?}")))?,
        };
        let n_values = r.usize_list("cdf", "n")?.unwrap_or_else(|| vec![1, 4, 8, 16]);
        let gamma_points = r.usize("cdf", "gamma_points")?.unwrap_or(65);
        let modes = match r.string_list("ser", "modes")? {
            None => vec![Mode::SingleTone, Mode::MultiTone],
            Some(v) => v
                .iter()
                .map(|m| parse_mode(m).ok_or_else(|| cfg_err(&r, "ser", "modes", format!("unknown mode {m:?}"))))
                .collect::<Result<_>>()?,
        };
        let q_values = r.usize_list("ser", "q")?.unwrap_or_else(|| vec![4, 8, 16]);
        let rho_fs_values = r.f64_list("ser", "rho_fs")?.unwrap_or_else(|| vec![s.signal.rho_fs]);
        r.unknown_keys()?;

        let cfg = ExperimentConfig {
            name,
            kind,
            seed,
            trials,
            blocks,
            train_samples,
            output,
            p_dr_dbm,
            scenario: s,
            control: c,
            tcn: t,
            modes,
            q_values,
            n_values,
            branch,
            cdf_mode,
            rho_fs_values,
            gamma_points,
        };
        cfg.validate().map_err(|e| match e {
            Error::InvalidParameter(m) => cfg_err(&r, "experiment", "kind", format!("infeasible parameters: {m}")),
            other => other,
        })?;
        Ok(cfg)
    }

    /// Parse a file. A missing path whose file stem names a preset loads that
    /// preset, so both `fig14_rate` and `presets/fig14_rate.cfg` work.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            if let Some(t) = path.file_stem().and_then(|s| s.to_str()).and_then(preset_text) {
                return Self::parse(t);
            }
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_dr_dbm.iter().any(|p| !p.is_finite()) {
            return Err(Error::param("drive powers must be finite"));
        }
        if self.trials == 0 || self.blocks == 0 || self.train_samples == 0 {
            return Err(Error::param("trials, blocks and train_samples must be >= 1"));
        }
        for p in &self.p_dr_dbm {
            self.scenario_at(*p, self.scenario.signal.rho_fs).validate()?;
        }
        for r in &self.rho_fs_values {
            if !(0.0..=1.0).contains(r) {
                return Err(Error::param(format!("rho_fs = {r} outside [0, 1]")));
            }
        }
        match self.kind {
            Kind::Cdf => {
                let q = self.scenario.signal.q_total;
                if self.n_values.iter().any(|n| *n < 1 || *n > q) {
                    return Err(Error::param(format!("cdf.n values must lie in 1..={q}")));
                }
                if self.gamma_points < 2 {
                    return Err(Error::param("cdf.gamma_points must be >= 2"));
                }
            }
            Kind::Ser | Kind::Outage => {
                if self.q_values.iter().any(|q| *q < 2) || self.modes.is_empty() {
                    return Err(Error::param("ser.q values must be >= 2 and ser.modes non-empty"));
                }
            }
            Kind::Training | Kind::Rate => {
                self.control.validate()?;
                self.tcn.validate()?;
                if self.tcn.input_features != crate::control::FEATURES {
                    return Err(Error::param("controller TCN takes four input features"));
                }
            }
        }
        Ok(())
    }

    fn scenario_at(&self, p_dr_dbm: f64, rho_fs: f64) -> Scenario {
        let mut s = self.scenario.clone();
        s.signal.p_dr = dbm_to_watts(p_dr_dbm);
        s.signal.rho_fs = rho_fs;
        s
    }
}

/// Independent stream for sweep point `index`.
fn point_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64 + 1);
    r
}

/// One CSV artifact held in memory until the sweep finishes.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub file: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(file: String, header: &[&str]) -> Self {
        Table {
            file,
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// The exact bytes written to disk: header row, comma-separated, LF endings.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(&self.file);
        std::fs::write(&path, self.to_bytes()?)?;
        Ok(path)
    }
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub tables: Vec<Table>,
    /// One line per sweep point, in sweep order.
    pub digests: Vec<String>,
}

impl RunOutput {
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        self.tables.iter().map(|t| t.write(dir)).collect()
    }
}

struct PointResult {
    rows: Vec<Vec<Vec<String>>>,
    digest: String,
}

fn sweep<F>(cfg: &ExperimentConfig, tables: Vec<Table>, point: F) -> Result<RunOutput>
where
    F: Fn(usize, f64, &mut ChaCha8Rng) -> Result<PointResult> + Sync,
{
    let results = cfg
        .p_dr_dbm
        .par_iter()
        .enumerate()
        .map(|(i, p)| point(i, *p, &mut point_rng(cfg.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let mut tables = tables;
    let mut digests = Vec::with_capacity(results.len());
    for r in results {
        for (t, rows) in tables.iter_mut().zip(r.rows) {
            t.rows.extend(rows);
        }
        digests.push(r.digest);
    }
    Ok(RunOutput { tables, digests })
}

/// Execute an experiment entirely in memory.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match cfg.kind {
        Kind::Cdf => run_cdf(cfg),
        Kind::Ser => run_ser(cfg),
        Kind::Outage => run_outage(cfg),
        Kind::Training => run_training(cfg),
        Kind::Rate => run_rate(cfg),
    }
}

/// Execute, write every CSV into `out_dir`, and return the paths and digest lines.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<(Vec<PathBuf>, Vec<String>)> {
    let out = execute(cfg)?;
    let paths = out.write(out_dir)?;
    Ok((paths, out.digests))
}

fn run_cdf(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let table = Table::new(
        format!("{}.csv", cfg.output),
        &["p_dr_dbm", "n", "gamma", "cdf_empirical", "cdf_analytic"],
    );
    let rho = cfg.cdf_mode.rho(cfg.scenario.signal.rho_fs);
    let q = cfg.scenario.signal.q_total;
    let gamma_max = 2.0 * q as f64 + 4.0;
    sweep(cfg, vec![table], |_, p_dr, rng| {
        let mut s = cfg.scenario_at(p_dr, cfg.scenario.signal.rho_fs);
        s.signal.rho = rho;
        let mut rows = Vec::new();
        let mut digest = format!("p_dr_dbm={p_dr}");
        for &n in &cfg.n_values {
            s.signal.n_active = n;
            let samples = papr_samples(&s, n, cfg.branch, Fading::Rayleigh, cfg.trials, rng)?;
            let (lo, hi) = sup_distance_bounds(&samples, |g| model_cdf(&s, n, cfg.branch, g), SUP_EVALS)?;
            let mut sorted = samples.clone();
            sorted.sort_by(f64::total_cmp);
            for k in 0..cfg.gamma_points {
                let g = gamma_max * (k + 1) as f64 / cfg.gamma_points as f64;
                let emp = sorted.partition_point(|x| *x < g) as f64 / sorted.len() as f64;
                rows.push(vec![
                    num(p_dr),
                    n.to_string(),
                    num(g),
                    num(emp),
                    num(model_cdf(&s, n, cfg.branch, g)?),
                ]);
            }
            digest.push_str(&format!(" n{n}_sup=[{lo:.4},{hi:.4}]"));
        }
        Ok(PointResult {
            rows: vec![rows],
            digest,
        })
    })
}

/// Rayleigh-averaged PAPR CDF that also accepts the squelched reading 0.
///
/// An unsquelched estimate is a peak-to-mean ratio and so at least 1, which
/// makes the CDF flat on `(0, 1)`.
pub fn model_cdf(scenario: &Scenario, n_active: usize, branch: Branch, gamma: f64) -> Result<f64> {
    papr_cdf_rayleigh(&CdfQuery {
        gamma: gamma.max(0.5),
        n_active,
        branch,
        scenario: scenario.clone(),
    })
}

fn rho_tag(rho_fs: f64) -> String {
    format!("{:.0}", -(1.0 - rho_fs).log10() * 10.0)
}

fn run_ser(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let header = ["p_dr_dbm", "mode", "q", "ser_mc", "ser_analytic", "ci_halfwidth"];
    let tables = if cfg.rho_fs_values.len() == 1 {
        vec![Table::new(format!("{}.csv", cfg.output), &header)]
    } else {
        // File suffix is 10*log10(1/(1-rho_fs)), e.g. `_rhofs30` for 1-1e-3.
        cfg.rho_fs_values
            .iter()
            .map(|r| Table::new(format!("{}_rhofs{}.csv", cfg.output, rho_tag(*r)), &header))
            .collect()
    };
    sweep(cfg, tables, |_, p_dr, rng| {
        let mut per_series = Vec::new();
        let mut digest = format!("p_dr_dbm={p_dr}");
        for &rho_fs in &cfg.rho_fs_values {
            let s = cfg.scenario_at(p_dr, rho_fs);
            let mut rows = Vec::new();
            for &mode in &cfg.modes {
                for &q in &cfg.q_values {
                    let rho = mode.rho(rho_fs);
                    let mc = ser_monte_carlo(rho, q, &s, cfg.trials, Fading::Rayleigh, rng)?;
                    let an = ser_analytical(rho, q, &s)?;
                    rows.push(vec![
                        num(p_dr),
                        mode.name().to_string(),
                        q.to_string(),
                        num(mc.p),
                        num(an),
                        num(mc.half_width),
                    ]);
                    digest.push_str(&format!(" {}{q}={:.3e}/{:.3e}", mode.name(), mc.p, an));
                }
            }
            per_series.push(rows);
        }
        Ok(PointResult {
            rows: per_series,
            digest,
        })
    })
}

fn run_outage(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let table = Table::new(format!("{}.csv", cfg.output), &["p_dr_dbm", "mode", "q", "p_out"]);
    sweep(cfg, vec![table], |_, p_dr, rng| {
        let s = cfg.scenario_at(p_dr, cfg.scenario.signal.rho_fs);
        let mut rows = Vec::new();
        let mut digest = format!("p_dr_dbm={p_dr}");
        for &mode in &cfg.modes {
            for &q in &cfg.q_values {
                let p = outage_probability(mode.rho(s.signal.rho_fs), q, &s, cfg.control.ser_tag, cfg.blocks, rng)?;
                rows.push(vec![num(p_dr), mode.name().to_string(), q.to_string(), num(p)]);
                digest.push_str(&format!(" {}{q}={p:.4}", mode.name()));
            }
        }
        Ok(PointResult {
            rows: vec![rows],
            digest,
        })
    })
}

/// Fixed-threshold baseline: the PCE crossover of the single-tone curve and
/// the largest allowed multi-tone curve, read as a received-power threshold.
pub fn crossover_threshold(curves: &EhCurveSet, control: &ControlParams) -> Result<f64> {
    let q = *control
        .allowed_q
        .iter()
        .max()
        .ok_or_else(|| Error::param("empty allowed Q set"))?;
    pce_crossover(
        curves.for_mode(Mode::SingleTone, q)?,
        curves.for_mode(Mode::MultiTone, q)?,
    )
}

/// Per drive point: trained controller plus a matched-seed episode of each baseline.
pub struct RatePoint {
    pub p_dr_dbm: f64,
    pub model: TcnModel,
    pub epoch_loss: Vec<f64>,
    /// `(name, mean rate, standard error, mean threshold dBm)` per controller.
    pub results: Vec<(&'static str, f64, f64, f64)>,
}

pub const CONTROLLERS: [&str; 5] = ["exhaustive", "tcn", "fixed", "single_only", "multi_only"];

pub fn rate_point(cfg: &ExperimentConfig, p_dr: f64, curves: &EhCurveSet, rng: &mut ChaCha8Rng) -> Result<RatePoint> {
    let s = cfg.scenario_at(p_dr, cfg.scenario.signal.rho_fs);
    let ctx = ControlContext::new(&s, &cfg.control, curves.clone())?;
    let (model, report) = train_controller(&ctx, &cfg.tcn, cfg.train_samples, rng)?;
    let fixed = crossover_threshold(curves, &cfg.control)?;
    let episode_seed: u64 = rng.random();
    let controllers = [
        Controller::Exhaustive,
        Controller::Learned {
            model: &model,
            initial: fixed,
        },
        Controller::Fixed(fixed),
        Controller::Fixed(0.0),
        Controller::Fixed(f64::INFINITY),
    ];
    let mut results = Vec::with_capacity(controllers.len());
    for (name, c) in CONTROLLERS.iter().zip(controllers) {
        let ep = run_episode(&ctx, c, cfg.blocks, &mut ChaCha8Rng::seed_from_u64(episode_seed))?;
        let th = ep.thresholds_dbm();
        let mean_th = th.iter().sum::<f64>() / th.len() as f64;
        results.push((*name, ep.mean_rate, ep.std_error, mean_th));
    }
    Ok(RatePoint {
        p_dr_dbm: p_dr,
        model,
        epoch_loss: report.epoch_loss,
        results,
    })
}

fn run_rate(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let curves = EhCurveSet::bundled()?;
    let mut header = vec!["p_dr_dbm".to_string()];
    header.extend(CONTROLLERS.iter().map(|c| c.to_string()));
    header.extend(CONTROLLERS.iter().map(|c| format!("{c}_se")));
    let table = Table {
        file: format!("{}.csv", cfg.output),
        header,
        rows: Vec::new(),
    };
    sweep(cfg, vec![table], |_, p_dr, rng| {
        let pt = rate_point(cfg, p_dr, &curves, rng)?;
        let mut row = vec![num(p_dr)];
        row.extend(pt.results.iter().map(|r| num(r.1)));
        row.extend(pt.results.iter().map(|r| num(r.2)));
        let mut digest = format!("p_dr_dbm={p_dr}");
        for (name, rate, se, _) in &pt.results {
            digest.push_str(&format!(" {name}={rate:.1}+-{se:.1}"));
        }
        Ok(PointResult {
            rows: vec![vec![row]],
            digest,
        })
    })
}

fn run_training(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let curves = EhCurveSet::bundled()?;
    let loss = Table::new(format!("{}_loss.csv", cfg.output), &["p_dr_dbm", "epoch", "loss"]);
    let threshold = Table::new(
        format!("{}_threshold.csv", cfg.output),
        &["p_dr_dbm", "mean_label_dbm", "mean_tcn_threshold_dbm"],
    );
    sweep(cfg, vec![loss, threshold], |_, p_dr, rng| {
        let s = cfg.scenario_at(p_dr, cfg.scenario.signal.rho_fs);
        let ctx = ControlContext::new(&s, &cfg.control, curves.clone())?;
        let (model, report) = train_controller(&ctx, &cfg.tcn, cfg.train_samples, rng)?;
        let episode_seed: u64 = rng.random();
        let label = mean_label_dbm(&ctx, cfg.blocks, &mut ChaCha8Rng::seed_from_u64(episode_seed))?;
        let ep = run_episode(
            &ctx,
            Controller::Learned {
                model: &model,
                initial: crossover_threshold(&curves, &cfg.control)?,
            },
            cfg.blocks,
            &mut ChaCha8Rng::seed_from_u64(episode_seed),
        )?;
        let th = ep.thresholds_dbm();
        let mean_th = th.iter().sum::<f64>() / th.len() as f64;
        let loss_rows = report
            .epoch_loss
            .iter()
            .enumerate()
            .map(|(e, l)| vec![num(p_dr), (e + 1).to_string(), num(*l)])
            .collect();
        let last = report.epoch_loss.last().copied().unwrap_or(f64::NAN);
        Ok(PointResult {
            rows: vec![loss_rows, vec![vec![num(p_dr), num(label), num(mean_th)]]],
            digest: format!("p_dr_dbm={p_dr} final_loss={last:.4} mean_label_dbm={label:.2} mean_tcn_dbm={mean_th:.2}"),
        })
    })
}

/// Train one controller per drive point and save each checkpoint as
/// `<output>_tcn_<index>.json` in `out_dir`.
pub fn train_tcn(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<(PathBuf, String)>> {
    if !matches!(cfg.kind, Kind::Training | Kind::Rate) {
        return Err(Error::param("train-tcn needs a training or rate experiment"));
    }
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let curves = EhCurveSet::bundled()?;
    let trained = cfg
        .p_dr_dbm
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let s = cfg.scenario_at(*p, cfg.scenario.signal.rho_fs);
            let ctx = ControlContext::new(&s, &cfg.control, curves.clone())?;
            let (model, report) = train_controller(&ctx, &cfg.tcn, cfg.train_samples, &mut point_rng(cfg.seed, i))?;
            Ok((i, *p, model, report))
        })
        .collect::<Result<Vec<_>>>()?;
    trained
        .into_iter()
        .map(|(i, p, model, report)| {
            let path = out_dir.join(format!("{}_tcn_{i}.json", cfg.output));
            model.save_json(&path)?;
            let last = report.epoch_loss.last().copied().unwrap_or(f64::NAN);
            Ok((path, format!("p_dr_dbm={p} final_loss={last:.4}")))
        })
        .collect()
}

/// Fit every tone count in an EH dataset and report knots plus the PCE crossover.
pub fn fit_eh_report(text: &str, segments: Option<usize>) -> Result<String> {
    let data = load_eh_dataset(text.as_bytes())?;
    let k = segments.unwrap_or(DEFAULT_SEGMENTS);
    let mut out = String::from("q,knot,p_in_dbm,p_eh_dbm\n");
    let mut curves = BTreeMap::new();
    for (q, pts) in &data {
        let c = fit_piecewise(*q, pts, k)?;
        for (j, (x, y)) in c.x_points.iter().zip(&c.y_points).enumerate() {
            out.push_str(&format!(
                "{q},{j},{},{}\n",
                num(watts_to_dbm(*x)),
                num(watts_to_dbm(*y))
            ));
        }
        curves.insert(*q, c);
    }
    let single = curves.get(&1);
    let multi = curves.iter().next_back().filter(|(q, _)| **q > 1).map(|(_, c)| c);
    if let (Some(s), Some(m)) = (single, multi) {
        let x = pce_crossover(s, m)?;
        out.push_str(&format!(
            "# pce crossover q=1 vs q={}: {:.3} dBm\n",
            m.q,
            watts_to_dbm(x)
        ));
    }
    Ok(out)
}

/// Gradient check of a fresh default-shaped TCN on a small random batch.
pub fn gradcheck_report(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = TcnConfig {
        window: 12,
        channels: 6,
        ..TcnConfig::default()
    };
    let model = TcnModel::random(&cfg, &mut rng)?;
    let batch = SampleBatch {
        inputs: (0..4)
            .map(|_| {
                (0..cfg.window * cfg.input_features)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect(),
        targets: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        window: cfg.window,
        features: cfg.input_features,
    };
    gradient_check(&model, &batch, &mut rng)
}
