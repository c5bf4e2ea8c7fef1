//! Acceptance checks. Prints one PASS/FAIL line per criterion and a summary.
//!
//! A failed criterion is reported, not hidden: the binary exits 0 once every
//! check has run, and nonzero only when a check cannot be evaluated at all.

use std::collections::BTreeMap;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use uswipt::analysis::{
    marcum_q_half, papr_samples, sup_distance, sup_distance_bounds, Branch, Fading, Mode, Scenario,
};
use uswipt::harvest::{harvested_power, pce, pce_crossover, EhCurveSet};
use uswipt::neuralnet::{gradient_check, mse_loss, train, SampleBatch, TcnConfig, TcnModel};
use uswipt::receiver::{envelope_detect, estimate_papr_fs, estimate_papr_ps, fs_signal, ps_signal, ReceiverParams};
use uswipt::runner::{execute, model_cdf, preset_text, ExperimentConfig, RunOutput, PRESETS};
use uswipt::units::{dbm_to_watts, watts_to_dbm};
use uswipt::waveform::{synthesize, SignalConfig, TimeGrid, ToneWeights};

type Check = anyhow::Result<(bool, String)>;

/// Preset runs shared between criteria; criterion 11 re-runs each one.
#[derive(Default)]
struct Runs(BTreeMap<&'static str, RunOutput>);

impl Runs {
    fn get(&mut self, name: &'static str) -> anyhow::Result<&RunOutput> {
        if !self.0.contains_key(name) {
            let cfg = ExperimentConfig::parse(preset_text(name).expect("preset exists"))?;
            self.0.insert(name, execute(&cfg)?);
        }
        Ok(&self.0[name])
    }
}

fn column(out: &RunOutput, table: usize, name: &str) -> Vec<String> {
    let t = &out.tables[table];
    let i = t.header.iter().position(|h| h == name).expect("column exists");
    t.rows.iter().map(|r| r[i].clone()).collect()
}

fn floats(v: Vec<String>) -> Vec<f64> {
    v.iter().map(|x| x.parse().expect("numeric cell")).collect()
}

fn preset(name: &str) -> ExperimentConfig {
    ExperimentConfig::parse(preset_text(name).expect("preset exists")).expect("preset parses")
}

fn cdf_agreement() -> Check {
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (name, branch, mode) in [
        ("fig8_cdf_ps", Branch::Ps, Mode::MultiTone),
        ("fig9_cdf_fs", Branch::Fs, Mode::SingleTone),
    ] {
        let cfg = preset(name);
        let mut s = cfg.scenario.clone();
        s.signal.p_dr = dbm_to_watts(-10.0);
        s.signal.q_total = 16;
        s.signal.rho = mode.rho(s.signal.rho_fs);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for n in [1, 4, 8, 16] {
            s.signal.n_active = n;
            let samples = papr_samples(&s, n, branch, Fading::Rayleigh, 10_000, &mut rng)?;
            let model = |g: f64| model_cdf(&s, n, branch, g);
            let (lo, hi) = sup_distance_bounds(&samples, model, 1000)?;
            // Evaluate at every sample only when the bracket straddles the bound.
            let d = if hi < 0.02 || lo >= 0.02 {
                hi
            } else {
                sup_distance(&samples, model)?
            };
            worst = worst.max(d);
            detail.push(format!("{}/N{n}<={d:.4}", mode.name()));
        }
    }
    Ok((
        worst < 0.02,
        format!("worst sup-distance {worst:.4} (bound 0.02); {}", detail.join(" ")),
    ))
}

fn noiseless_branch(rho: f64, n: usize) -> (f64, f64) {
    let cfg = SignalConfig {
        rho,
        n_active: n,
        q_total: 16,
        p_dr: 1e-4,
        ..SignalConfig::default()
    };
    let grid = TimeGrid::for_config(&cfg);
    let w = synthesize(&cfg, &ToneWeights::equal(n), &grid).expect("valid symbol");
    let env = envelope_detect(&w, Complex64::new(1.0, 0.0), 1.0);
    let p = ReceiverParams::default();
    (
        estimate_papr_ps(&ps_signal(&env, &p), 0.0),
        estimate_papr_fs(&fs_signal(&env, &p, &grid), 0.0),
    )
}

fn constellation_exactness() -> Check {
    let mut ps_err: f64 = 0.0;
    let mut fs_err: f64 = 0.0;
    let mut fs_worst_n = 0;
    for n in 1..=16 {
        let target = 2.0 * n as f64;
        ps_err = ps_err.max((noiseless_branch(0.0, n).0 / target - 1.0).abs());
        let e = (noiseless_branch(1.0 - 1e-3, n).1 / target - 1.0).abs();
        if e > fs_err {
            fs_err = e;
            fs_worst_n = n;
        }
    }
    Ok((
        ps_err < 1e-9 && fs_err < 0.01,
        format!(
            "PS at rho=0: max rel error {ps_err:.1e}; FS at rho=1-1e-3: max rel error {:.2}% at N={fs_worst_n} (bound 1%)",
            100.0 * fs_err
        ),
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn hpa_distortion() -> Check {
    let mut s = Scenario::default();
    s.signal.p_dr = dbm_to_watts(0.0);
    s.signal.q_total = 16;
    s.signal.n_active = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    s.signal.rho = 0.0;
    let ps = median(papr_samples(&s, 16, Branch::Ps, Fading::Rayleigh, 2001, &mut rng)?);
    s.signal.rho = s.signal.rho_fs;
    let fs = median(papr_samples(&s, 16, Branch::Fs, Fading::Rayleigh, 2001, &mut rng)?);
    let ok = ps < 0.7 * 32.0 && (fs / 32.0 - 1.0).abs() < 0.1;
    Ok((
        ok,
        format!("median PAPR_PS multi N=16 {ps:.2} (< 22.4); median PAPR_FS single N=16 {fs:.2} (32 +- 10%)"),
    ))
}

fn marcum_oracle() -> Check {
    const SAMPLES: usize = 10_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for a in [0.0, 0.5, 1.0, 2.0, 3.0] {
        for b in [0.5, 1.0, 1.5, 2.5, 4.0] {
            // Q_{1/2}(a, b) = P(|a + Z| > b) for a standard normal Z.
            let hits = (0..SAMPLES)
                .filter(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    (a + z).abs() > b
                })
                .count();
            let p_mc = hits as f64 / SAMPLES as f64;
            let q = marcum_q_half(a, b)?;
            let se = (q * (1.0 - q) / SAMPLES as f64).sqrt();
            worst = worst.max((p_mc - q).abs() / se);
        }
    }
    Ok((
        worst < 3.0,
        format!("worst |MC - closed form| = {worst:.2} standard errors over 25 points, 1e7 samples each"),
    ))
}

/// First sweep index after the SER minimum where SER exceeds `level`.
fn knee(ser: &[f64], level: f64) -> Option<usize> {
    let min = (0..ser.len()).min_by(|a, b| ser[*a].total_cmp(&ser[*b]))?;
    (min..ser.len()).find(|i| ser[*i] > level)
}

fn ser_structure() -> Check {
    let text = r#"
[experiment]
name = "ser_structure"
kind = "ser"
seed = 5
trials = 10000

[sweep]
p_dr_dbm = [-20.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0]

[ser]
modes = ["single", "multi"]
q = [4, 8, 16]
"#;
    let cfg = ExperimentConfig::parse(text)?;
    let out = execute(&cfg)?;
    let p = floats(column(&out, 0, "p_dr_dbm"));
    let mode = column(&out, 0, "mode");
    let q: Vec<usize> = column(&out, 0, "q").iter().map(|x| x.parse().unwrap()).collect();
    let ser = floats(column(&out, 0, "ser_mc"));
    let hw = floats(column(&out, 0, "ci_halfwidth"));
    let slack = 3.0 / cfg.trials as f64;
    let mut order_violations = Vec::new();
    // Rows at one drive power run mode-major then Q ascending.
    for i in 0..ser.len() - 1 {
        if mode[i] == mode[i + 1] && p[i] == p[i + 1] && ser[i + 1] < ser[i] - hw[i] - hw[i + 1] - slack {
            order_violations.push(format!("{}@{}dBm Q{}>Q{}", mode[i], p[i], q[i], q[i + 1]));
        }
    }
    let series = |m: &str, qq: usize| -> Vec<f64> {
        (0..ser.len())
            .filter(|i| mode[*i] == m && q[*i] == qq)
            .map(|i| ser[i])
            .collect()
    };
    let drives: Vec<f64> = cfg.p_dr_dbm.clone();
    let mut knees_ok = true;
    let mut detail = Vec::new();
    for qq in [4, 8, 16] {
        let multi = series("multi", qq);
        let single = series("single", qq);
        let km = knee(&multi, 0.1);
        let ks = knee(&single, 0.1);
        // Rapid: at least tenfold jump into the knee; graceful: single tone still below 0.1 there.
        let ok = match km {
            Some(k) if k > 0 => multi[k] >= 10.0 * multi[k - 1] && single[k] < 0.1 && ks.is_none_or(|s| s > k),
            _ => false,
        };
        knees_ok &= ok;
        let at = |k: Option<usize>| k.map_or("none".to_string(), |i| format!("{} dBm", drives[i]));
        detail.push(format!("Q{qq}: multi knee {} single knee {}", at(km), at(ks)));
    }
    Ok((
        order_violations.is_empty() && knees_ok,
        format!("Q-order violations {:?}; {}", order_violations, detail.join(", ")),
    ))
}

fn outage_crossover(runs: &mut Runs) -> Check {
    let out = runs.get("fig12_outage")?;
    let p = floats(column(out, 0, "p_dr_dbm"));
    let mode = column(out, 0, "mode");
    let q = column(out, 0, "q");
    let po = floats(column(out, 0, "p_out"));
    let mut ok = true;
    let mut detail = Vec::new();
    for qq in ["4", "8", "16"] {
        let mut diffs = Vec::new();
        let mut drive = Vec::new();
        for i in 0..po.len() {
            if mode[i] == "multi" && q[i] == qq {
                let j = (0..po.len())
                    .find(|j| mode[*j] == "single" && q[*j] == qq && p[*j] == p[i])
                    .unwrap();
                diffs.push(po[i] - po[j]);
                drive.push(p[i]);
            }
        }
        let signs: Vec<(f64, f64)> = drive
            .iter()
            .zip(&diffs)
            .filter(|(_, d)| **d != 0.0)
            .map(|(a, b)| (*a, b.signum()))
            .collect();
        let changes: Vec<f64> = signs.windows(2).filter(|w| w[0].1 != w[1].1).map(|w| w[1].0).collect();
        let this =
            signs.first().is_some_and(|s| s.1 < 0.0) && signs.last().is_some_and(|s| s.1 > 0.0) && changes.len() == 1;
        ok &= this;
        detail.push(format!("Q{qq}: order reverses at {:?} dBm", changes));
    }
    Ok((ok, detail.join(", ")))
}

fn eh_properties() -> Check {
    let set = EhCurveSet::bundled()?;
    let grid: Vec<f64> = (0..=1300).map(|i| dbm_to_watts(-40.0 + 0.05 * i as f64)).collect();
    let mut ok = true;
    let mut notes = Vec::new();
    for (q, c) in &set.curves {
        let y: Vec<f64> = grid.iter().map(|x| harvested_power(c, *x)).collect();
        let monotone = y.windows(2).all(|w| w[1] >= w[0]);
        let pce_ok = grid.iter().all(|x| (0.0..=1.0).contains(&pce(c, *x)));
        let continuous = c.x_points.iter().all(|x| {
            let (a, b) = (
                harvested_power(c, x * (1.0 - 1e-9)),
                harvested_power(c, x * (1.0 + 1e-9)),
            );
            (a - b).abs() <= 1e-6 * c.max_output().max(1e-30)
        });
        if !(monotone && pce_ok && continuous) {
            ok = false;
            notes.push(format!(
                "q={q}: monotone {monotone} pce {pce_ok} continuous {continuous}"
            ));
        }
    }
    let single = set.for_mode(Mode::SingleTone, 2)?;
    for q in [2, 4, 8, 16] {
        let multi = set.for_mode(Mode::MultiTone, q)?;
        let x = pce_crossover(single, multi)?;
        let below: Vec<f64> = grid.iter().copied().filter(|g| *g < x * 0.99).collect();
        let superior = below.iter().all(|g| pce(multi, *g) >= pce(single, *g))
            && below.iter().any(|g| pce(multi, *g) > pce(single, *g));
        ok &= superior;
        notes.push(format!(
            "q={q} crossover {:.2} dBm (multi superior below: {superior})",
            watts_to_dbm(x)
        ));
    }
    Ok((ok, notes.join(", ")))
}

fn tcn_correctness() -> Check {
    let cfg = TcnConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let random_inputs = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..cfg.window * cfg.input_features)
                    .map(|_| rng.sample(StandardNormal))
                    .collect()
            })
            .collect()
    };

    let m = TcnModel::random(&cfg, &mut rng)?;
    let inputs = random_inputs(4, &mut rng);
    let batch = SampleBatch {
        targets: (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
        inputs,
        window: cfg.window,
        features: cfg.input_features,
    };
    let grad_err = gradient_check(&m, &batch, &mut rng)?;

    let mut causal = true;
    for _ in 0..100 {
        let m = TcnModel::random(&cfg, &mut rng)?;
        let x = random_inputs(1, &mut rng).remove(0);
        let s = rng.random_range(0..cfg.window);
        let mut masked = x.clone();
        masked[(s + 1) * cfg.input_features..].iter_mut().for_each(|v| *v = 0.0);
        causal &= m.forward_sequence(&x)[..=s] == m.forward_sequence(&masked)[..=s];
    }

    // Planted teacher: a fixed linear map of the last two feature vectors.
    let f = cfg.input_features;
    let coef: Vec<f64> = (0..2 * f).map(|_| rng.random_range(-1.0..1.0)).collect();
    let teacher = |x: &[f64]| -> f64 { x[x.len() - 2 * f..].iter().zip(&coef).map(|(a, b)| a * b).sum() };
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        let inputs = random_inputs(n, rng);
        SampleBatch {
            targets: inputs.iter().map(|x| teacher(x)).collect(),
            inputs,
            window: cfg.window,
            features: f,
        }
    };
    let train_set = make(4000, &mut rng);
    let test_set = make(1000, &mut rng);
    let mut model = TcnModel::random(&cfg, &mut rng)?;
    train(&mut model, &train_set, &mut rng)?;
    let pred: Vec<f64> = test_set.inputs.iter().map(|x| model.predict(x)).collect();
    let mean = test_set.targets.iter().sum::<f64>() / test_set.len() as f64;
    let var = test_set.targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / test_set.len() as f64;
    let rel = mse_loss(&test_set.targets, &pred) / var;

    Ok((
        grad_err < 1e-4 && causal && rel < 0.1,
        format!(
            "gradient check {grad_err:.1e} (< 1e-4); causal over 100 models: {causal}; teacher held-out MSE {:.1}% of variance after {} epochs (< 10%)",
            100.0 * rel,
            cfg.epochs
        ),
    ))
}

fn control_dominance(runs: &mut Runs) -> Check {
    let out = runs.get("fig14_rate")?;
    let p = floats(column(out, 0, "p_dr_dbm"));
    let ex = floats(column(out, 0, "exhaustive"));
    let tcn = floats(column(out, 0, "tcn"));
    let fixed = floats(column(out, 0, "fixed"));
    let fixed_se = floats(column(out, 0, "fixed_se"));
    let mut ok = true;
    let mut detail = Vec::new();
    for i in 0..p.len() {
        let here = ex[i] >= tcn[i] && tcn[i] >= fixed[i] - fixed_se[i];
        ok &= here;
        detail.push(format!("{}dBm {:.0}/{:.0}/{:.0}", p[i], ex[i], tcn[i], fixed[i]));
    }
    let top = p.len() - 1;
    let strict = tcn[top] > fixed[top];
    Ok((
        ok && strict && p.len() == 5,
        format!(
            "exhaustive/tcn/fixed bit/s: {}; tcn > fixed at {} dBm: {strict}",
            detail.join(", "),
            p[top]
        ),
    ))
}

fn threshold_trend(runs: &mut Runs) -> Check {
    let out = runs.get("fig13_training")?;
    let p = floats(column(out, 1, "p_dr_dbm"));
    let label = floats(column(out, 1, "mean_label_dbm"));
    // The two highest drive powers form the drop; everything below is the mid range.
    let split = label.len() - 2;
    let mid = &label[..split];
    let rising = mid.windows(2).all(|w| w[1] - w[0] >= -0.5);
    let peak = mid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let drop = label[split..].iter().all(|v| *v <= peak - 10.0);
    let pairs: Vec<String> = p.iter().zip(&label).map(|(a, b)| format!("{a}:{b:.1}")).collect();
    Ok((
        rising && drop,
        format!(
            "mean label dBm by drive {}; mid steps >= -0.5 dB: {rising}; top two >= 10 dB below mid peak: {drop}",
            pairs.join(" ")
        ),
    ))
}

fn determinism(runs: &mut Runs) -> Check {
    let mut differing = Vec::new();
    let mut files = 0;
    for (name, _, _) in PRESETS {
        let again = execute(&preset(name))?;
        let first = runs.get(name)?;
        for (a, b) in first.tables.iter().zip(&again.tables) {
            files += 1;
            if a.file != b.file || a.to_bytes()? != b.to_bytes()? {
                differing.push(a.file.clone());
            }
        }
        if first.tables.len() != again.tables.len() {
            differing.push(name.to_string());
        }
    }
    Ok((
        differing.is_empty(),
        format!(
            "{files} CSVs from {} presets re-run; differing: {differing:?}",
            PRESETS.len()
        ),
    ))
}

type Criterion = (&'static str, Box<dyn FnOnce(&mut Runs) -> Check>);

fn main() {
    let mut runs = Runs::default();
    let criteria: Vec<Criterion> = vec![
        ("analytical vs Monte-Carlo PAPR CDF", Box::new(|_| cdf_agreement())),
        ("noiseless PAPR constellation", Box::new(|_| constellation_exactness())),
        ("HPA distortion ordering", Box::new(|_| hpa_distortion())),
        ("Marcum Q oracle", Box::new(|_| marcum_oracle())),
        ("SER structure", Box::new(|_| ser_structure())),
        ("outage crossover", Box::new(outage_crossover)),
        ("EH model properties", Box::new(|_| eh_properties())),
        ("TCN correctness", Box::new(|_| tcn_correctness())),
        ("control-loop dominance", Box::new(control_dominance)),
        ("threshold trend", Box::new(threshold_trend)),
        ("end-to-end determinism", Box::new(determinism)),
    ];
    let total = criteria.len();
    let mut passed = 0;
    let mut broken = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let secs = || start.elapsed().as_secs_f64();
        match check(&mut runs) {
            Ok((ok, detail)) => {
                passed += ok as usize;
                let verdict = if ok { "PASS" } else { "FAIL" };
                println!("criterion {:>2} {verdict} {name} [{:.1}s]: {detail}", i + 1, secs());
            }
            Err(e) => {
                broken += 1;
                println!(
                    "criterion {:>2} FAIL {name} [{:.1}s]: could not evaluate: {e:#}",
                    i + 1,
                    secs()
                );
            }
        }
    }
    println!("acceptance: {passed}/{total} criteria pass");
    if broken > 0 {
        std::process::exit(1);
    }
}
