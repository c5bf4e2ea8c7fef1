//! Temporal convolutional network built from dilated causal convolutions,
//! with hand-written backpropagation and minibatch SGD.
//!
//! Sequences are stored time-major: element `t * channels + c`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnConfig {
    pub filter_size: usize,
    pub dilations: Vec<usize>,
    pub channels: usize,
    pub input_features: usize,
    pub window: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            filter_size: 2,
            dilations: vec![1, 2, 4, 8],
            channels: 16,
            input_features: 4,
            window: 20,
            learning_rate: 1e-2,
            momentum: 0.0,
            epochs: 15,
            batch_size: 64,
        }
    }
}

impl TcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filter_size < 2 {
            return Err(Error::param("TCN filter size must be >= 2"));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::param(
                "TCN dilations must be a nonempty list of positive integers",
            ));
        }
        if self.channels == 0 || self.input_features == 0 || self.window == 0 || self.batch_size == 0 {
            return Err(Error::param("TCN sizes must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("learning rate must be positive and momentum in [0, 1)"));
        }
        Ok(())
    }

    /// Each residual block stacks two convolutions with the same dilation.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * (self.filter_size - 1) * self.dilations.iter().sum::<usize>()
    }

    pub fn covers_window(&self) -> bool {
        self.receptive_field() >= self.window
    }
}

/// One dilated causal convolution layer; weight index `(o * c_in + i) * k + kappa`
/// multiplies input `t - d * kappa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub d: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Conv {
    pub fn zeros(c_in: usize, c_out: usize, k: usize, d: usize) -> Self {
        Conv {
            c_in,
            c_out,
            k,
            d,
            w: vec![0.0; c_out * c_in * k],
            b: vec![0.0; c_out],
        }
    }

    fn random<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, d: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((c_in * k) as f64).sqrt();
        let mut c = Conv::zeros(c_in, c_out, k, d);
        c.w.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        c.b.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
        c
    }

    fn widx(&self, o: usize, i: usize, kappa: usize) -> usize {
        (o * self.c_in + i) * self.k + kappa
    }

    pub fn forward(&self, x: &[f64], t_len: usize) -> Vec<f64> {
        let mut y = vec![0.0; t_len * self.c_out];
        for t in 0..t_len {
            for o in 0..self.c_out {
                let mut acc = self.b[o];
                for kappa in 0..self.k {
                    let lag = self.d * kappa;
                    if lag > t {
                        break;
                    }
                    let src = &x[(t - lag) * self.c_in..(t - lag + 1) * self.c_in];
                    for (i, xv) in src.iter().enumerate() {
                        acc += self.w[self.widx(o, i, kappa)] * xv;
                    }
                }
                y[t * self.c_out + o] = acc;
            }
        }
        y
    }

    /// Accumulate parameter gradients into `grad` and return the input gradient.
    fn backward(&self, x: &[f64], dy: &[f64], t_len: usize, grad: &mut Conv) -> Vec<f64> {
        let mut dx = vec![0.0; t_len * self.c_in];
        for t in 0..t_len {
            for o in 0..self.c_out {
                let g = dy[t * self.c_out + o];
                if g == 0.0 {
                    continue;
                }
                grad.b[o] += g;
                for kappa in 0..self.k {
                    let lag = self.d * kappa;
                    if lag > t {
                        break;
                    }
                    let base = (t - lag) * self.c_in;
                    for i in 0..self.c_in {
                        let wi = self.widx(o, i, kappa);
                        grad.w[wi] += g * x[base + i];
                        dx[base + i] += g * self.w[wi];
                    }
                }
            }
        }
        dx
    }

    fn zeroed(&self) -> Self {
        Conv::zeros(self.c_in, self.c_out, self.k, self.d)
    }
}

/// Single-channel dilated causal convolution `D(s) = sum_kappa f(kappa) x(s - d kappa)`
/// with zero left padding.
pub fn dilated_causal_conv(x: &[f64], filter: &[f64], d: usize) -> Vec<f64> {
    (0..x.len())
        .map(|s| {
            filter
                .iter()
                .enumerate()
                .take_while(|(kappa, _)| d * kappa <= s)
                .map(|(kappa, f)| f * x[s - d * kappa])
                .sum()
        })
        .collect()
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

/// `psi(x + G(x))` where `G` is conv, ReLU, conv; `proj` is a 1x1 convolution
/// applied to the skip path when channel counts differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub proj: Option<Conv>,
}

struct BlockCache {
    x: Vec<f64>,
    h1: Vec<f64>,
    a1: Vec<f64>,
    z: Vec<f64>,
}

impl ResidualBlock {
    fn forward_cached(&self, x: &[f64], t_len: usize) -> (Vec<f64>, BlockCache) {
        let h1 = self.conv1.forward(x, t_len);
        let a1 = relu(&h1);
        let h2 = self.conv2.forward(&a1, t_len);
        let skip = match &self.proj {
            Some(p) => p.forward(x, t_len),
            None => x.to_vec(),
        };
        let z: Vec<f64> = skip.iter().zip(&h2).map(|(s, h)| s + h).collect();
        let out = relu(&z);
        (
            out,
            BlockCache {
                x: x.to_vec(),
                h1,
                a1,
                z,
            },
        )
    }

    fn backward(&self, cache: &BlockCache, dout: &[f64], t_len: usize, grad: &mut ResidualBlock) -> Vec<f64> {
        let dz: Vec<f64> = dout
            .iter()
            .zip(&cache.z)
            .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
            .collect();
        let da1 = self.conv2.backward(&cache.a1, &dz, t_len, &mut grad.conv2);
        let dh1: Vec<f64> = da1
            .iter()
            .zip(&cache.h1)
            .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
            .collect();
        let mut dx = self.conv1.backward(&cache.x, &dh1, t_len, &mut grad.conv1);
        let dskip = match (&self.proj, &mut grad.proj) {
            (Some(p), Some(gp)) => p.backward(&cache.x, &dz, t_len, gp),
            _ => dz,
        };
        dx.iter_mut().zip(&dskip).for_each(|(a, b)| *a += b);
        dx
    }

    fn zeroed(&self) -> Self {
        ResidualBlock {
            conv1: self.conv1.zeroed(),
            conv2: self.conv2.zeroed(),
            proj: self.proj.as_ref().map(Conv::zeroed),
        }
    }
}

pub fn residual_block(x: &[f64], t_len: usize, block: &ResidualBlock) -> Vec<f64> {
    block.forward_cached(x, t_len).0
}

/// Feature and target z-scoring frozen from a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Standardizer {
    pub fn identity(features: usize) -> Self {
        Standardizer {
            feature_mean: vec![0.0; features],
            feature_std: vec![1.0; features],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    pub fn fit(data: &SampleBatch) -> Result<Self> {
        data.validate()?;
        let f = data.features;
        let mut sum = vec![0.0; f];
        let mut sq = vec![0.0; f];
        let mut count = 0.0;
        for seq in &data.inputs {
            for row in seq.chunks(f) {
                for (c, v) in row.iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
                count += 1.0;
            }
        }
        let spread = |s: f64, q: f64, n: f64| {
            let m = s / n;
            let var = (q / n - m * m).max(0.0);
            // Constant features keep unit scale.
            if var > 1e-18 {
                var.sqrt()
            } else {
                1.0
            }
        };
        let feature_mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let feature_std: Vec<f64> = sum.iter().zip(&sq).map(|(s, q)| spread(*s, *q, count)).collect();
        let n = data.targets.len() as f64;
        let ts: f64 = data.targets.iter().sum();
        let tq: f64 = data.targets.iter().map(|v| v * v).sum();
        Ok(Standardizer {
            feature_mean,
            feature_std,
            target_mean: ts / n,
            target_std: spread(ts, tq, n),
        })
    }

    pub fn inputs(&self, seq: &[f64]) -> Vec<f64> {
        let f = self.feature_mean.len();
        seq.iter()
            .enumerate()
            .map(|(j, v)| (v - self.feature_mean[j % f]) / self.feature_std[j % f])
            .collect()
    }

    pub fn target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn untarget(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }
}

/// Windows of feature vectors with one target per window (the last position).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SampleBatch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
    pub window: usize,
    pub features: usize,
}

impl SampleBatch {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() || self.inputs.len() != self.targets.len() {
            return Err(Error::param("batch needs equal, nonzero numbers of inputs and targets"));
        }
        let len = self.window * self.features;
        if len == 0 || self.inputs.iter().any(|s| s.len() != len) {
            return Err(Error::param(format!(
                "every input must hold window * features = {len} values"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> SampleBatch {
        SampleBatch {
            inputs: idx.iter().map(|i| self.inputs[*i].clone()).collect(),
            targets: idx.iter().map(|i| self.targets[*i]).collect(),
            window: self.window,
            features: self.features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcnModel {
    pub config: TcnConfig,
    pub blocks: Vec<ResidualBlock>,
    pub head: Conv,
    pub scaler: Standardizer,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: TcnConfig,
    scaler: Standardizer,
    params: Vec<f64>,
}

impl TcnModel {
    fn build(config: &TcnConfig, mut conv: impl FnMut(usize, usize, usize, usize) -> Conv) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(config.dilations.len());
        let mut c_in = config.input_features;
        for d in &config.dilations {
            let c = config.channels;
            blocks.push(ResidualBlock {
                conv1: conv(c_in, c, config.filter_size, *d),
                conv2: conv(c, c, config.filter_size, *d),
                proj: (c_in != c).then(|| conv(c_in, c, 1, 1)),
            });
            c_in = c;
        }
        Ok(TcnModel {
            config: config.clone(),
            blocks,
            head: conv(c_in, 1, 1, 1),
            scaler: Standardizer::identity(config.input_features),
        })
    }

    pub fn zeros(config: &TcnConfig) -> Result<Self> {
        Self::build(config, Conv::zeros)
    }

    /// Weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(config: &TcnConfig, rng: &mut R) -> Result<Self> {
        Self::build(config, |a, b, k, d| Conv::random(a, b, k, d, rng))
    }

    fn convs(&self) -> Vec<&Conv> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.push(&b.conv1);
            v.push(&b.conv2);
            if let Some(p) = &b.proj {
                v.push(p);
            }
        }
        v.push(&self.head);
        v
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.conv1);
            v.push(&mut b.conv2);
            if let Some(p) = &mut b.proj {
                v.push(p);
            }
        }
        v.push(&mut self.head);
        v
    }

    pub fn num_params(&self) -> usize {
        self.convs().iter().map(|c| c.w.len() + c.b.len()).sum()
    }

    /// All parameters `theta_F` in a fixed order.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for c in self.convs() {
            out.extend_from_slice(&c.w);
            out.extend_from_slice(&c.b);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.num_params() {
            return Err(Error::param(format!(
                "{} parameters for a model with {}",
                p.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for c in self.convs_mut() {
            let nw = c.w.len();
            c.w.copy_from_slice(&p[off..off + nw]);
            off += nw;
            let nb = c.b.len();
            c.b.copy_from_slice(&p[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn zeroed(&self) -> Self {
        TcnModel {
            config: self.config.clone(),
            blocks: self.blocks.iter().map(ResidualBlock::zeroed).collect(),
            head: self.head.zeroed(),
            scaler: self.scaler.clone(),
        }
    }

    /// Network output for one standardized sequence, one value per position.
    pub fn forward_sequence(&self, x: &[f64]) -> Vec<f64> {
        let t_len = x.len() / self.config.input_features;
        let mut h = x.to_vec();
        for b in &self.blocks {
            h = residual_block(&h, t_len, b);
        }
        self.head.forward(&h, t_len)
    }

    /// Threshold estimate in target units from a raw (unstandardized) window.
    pub fn predict(&self, raw_window: &[f64]) -> f64 {
        let out = self.forward_sequence(&self.scaler.inputs(raw_window));
        self.scaler.untarget(out[out.len() - 1])
    }

    /// Loss and parameter gradient on the last position of one standardized sequence.
    fn sample_grad(&self, x: &[f64], y: f64) -> (f64, TcnModel) {
        let t_len = x.len() / self.config.input_features;
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x.to_vec();
        for b in &self.blocks {
            let (out, cache) = b.forward_cached(&h, t_len);
            caches.push(cache);
            h = out;
        }
        let out = self.head.forward(&h, t_len);
        let err = out[t_len - 1] - y;
        let mut grad = self.zeroed();
        let mut dout = vec![0.0; t_len];
        dout[t_len - 1] = 2.0 * err;
        let mut dh = self.head.backward(&h, &dout, t_len, &mut grad.head);
        for (i, b) in self.blocks.iter().enumerate().rev() {
            dh = b.backward(&caches[i], &dh, t_len, &mut grad.blocks[i]);
        }
        (err * err, grad)
    }

    /// Mean loss and flat mean gradient over a standardized batch.
    fn batch_grad(&self, batch: &SampleBatch) -> (f64, Vec<f64>) {
        let parts: Vec<(f64, Vec<f64>)> = batch
            .inputs
            .par_iter()
            .zip(batch.targets.par_iter())
            .map(|(x, y)| {
                let (l, g) = self.sample_grad(x, *y);
                (l, g.params())
            })
            .collect();
        let n = parts.len() as f64;
        let mut grad = vec![0.0; self.num_params()];
        let mut loss = 0.0;
        for (l, g) in &parts {
            loss += l;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        grad.iter_mut().for_each(|v| *v /= n);
        (loss / n, grad)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            scaler: self.scaler.clone(),
            params: self.params(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&ck)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", ck.version)));
        }
        if ck.scaler.feature_mean.len() != ck.config.input_features {
            return Err(Error::Data("checkpoint scaler does not match feature count".into()));
        }
        let mut m = TcnModel::zeros(&ck.config)?;
        m.set_params(&ck.params)
            .map_err(|e| Error::Data(format!("checkpoint shape mismatch: {e}")))?;
        m.scaler = ck.scaler;
        Ok(m)
    }
}

/// Outputs for a batch of standardized sequences.
pub fn forward(model: &TcnModel, inputs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    inputs.iter().map(|x| model.forward_sequence(x)).collect()
}

pub fn mse_loss(targets: &[f64], predictions: &[f64]) -> f64 {
    let n = targets.len().max(1) as f64;
    targets
        .iter()
        .zip(predictions)
        .map(|(y, p)| (y - p).powi(2))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean standardized training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Fit the scaler to `data`, then run minibatch SGD on the last-position MSE.
pub fn train<R: Rng + ?Sized>(model: &mut TcnModel, data: &SampleBatch, rng: &mut R) -> Result<TrainReport> {
    data.validate()?;
    let cfg = model.config.clone();
    if data.features != cfg.input_features || data.window == 0 {
        return Err(Error::param("training data does not match the model's feature count"));
    }
    model.scaler = Standardizer::fit(data)?;
    let std_data = SampleBatch {
        inputs: data.inputs.iter().map(|s| model.scaler.inputs(s)).collect(),
        targets: data.targets.iter().map(|y| model.scaler.target(*y)).collect(),
        window: data.window,
        features: data.features,
    };
    let mut order: Vec<usize> = (0..std_data.len()).collect();
    let mut velocity = vec![0.0; model.num_params()];
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = std_data.subset(chunk);
            let (loss, grad) = model.batch_grad(&batch);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss in epoch {epoch} (learning rate {})",
                    cfg.learning_rate
                )));
            }
            total += loss * chunk.len() as f64;
            let mut p = model.params();
            for ((pv, v), g) in p.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *pv += *v;
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite parameters in epoch {epoch}")));
            }
            model.set_params(&p)?;
        }
        history.push(total / std_data.len() as f64);
    }
    Ok(TrainReport { epoch_loss: history })
}

/// Mean last-position loss and flat gradient on standardized data.
pub fn loss_and_gradient(model: &TcnModel, batch: &SampleBatch) -> Result<(f64, Vec<f64>)> {
    batch.validate()?;
    Ok(model.batch_grad(batch))
}

/// Largest relative error between `analytic` and central finite differences
/// on up to 100 randomly chosen parameters.
pub fn gradient_check_against<R: Rng + ?Sized>(
    model: &TcnModel,
    batch: &SampleBatch,
    analytic: &[f64],
    rng: &mut R,
) -> Result<f64> {
    const STEP: f64 = 1e-5;
    const FLOOR: f64 = 1e-8;
    batch.validate()?;
    let base = model.params();
    if analytic.len() != base.len() {
        return Err(Error::param("gradient length does not match parameter count"));
    }
    let mut idx: Vec<usize> = (0..base.len()).collect();
    idx.shuffle(rng);
    idx.truncate(100);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in idx {
        let mut p = base.clone();
        p[i] = base[i] + STEP;
        probe.set_params(&p)?;
        let up = probe.batch_grad(batch).0;
        p[i] = base[i] - STEP;
        probe.set_params(&p)?;
        let down = probe.batch_grad(batch).0;
        let numeric = (up - down) / (2.0 * STEP);
        let err = (numeric - analytic[i]).abs() / (numeric.abs() + analytic[i].abs()).max(FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn gradient_check<R: Rng + ?Sized>(model: &TcnModel, batch: &SampleBatch, rng: &mut R) -> Result<f64> {
    let (_, g) = loss_and_gradient(model, batch)?;
    gradient_check_against(model, batch, &g, rng)
}
