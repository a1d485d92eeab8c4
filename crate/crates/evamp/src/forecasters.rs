//! Per-ticker multivariate-input, univariate-output forecasters:
//! a moving-average decomposition linear model and a patch transformer,
//! each with per-channel outputs concatenated and projected by a final
//! matrix to a single stock-price horizon.

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ndcore::{linear_forward, AdamState, MultiHeadAttention, ParamStore, Session, TensorId};

use crate::market::{AlignedSeries, WindowSample, CH_CLOSE};
use crate::{PipelineError, Result};

const SCALE_FLOOR: f64 = 1e-8;

/// Per-window, per-channel affine normalization fitted on the lookback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub shift: [f64; 3],
    pub scale: [f64; 3],
}

impl NormStats {
    pub fn fit(source: &[[f64; 3]]) -> Self {
        let n = source.len() as f64;
        let mut shift = [0.0; 3];
        let mut scale = [0.0; 3];
        for c in 0..3 {
            let mean = source.iter().map(|r| r[c]).sum::<f64>() / n;
            let var = source.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
            shift[c] = mean;
            scale[c] = var.sqrt().max(SCALE_FLOOR);
        }
        Self { shift, scale }
    }

    pub fn normalize_channel(&self, c: usize, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|x| (x - self.shift[c]) / self.scale[c]).collect()
    }

    /// Stock-channel de-normalization for predictions and targets.
    pub fn denorm_stock(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|x| x * self.scale[CH_CLOSE] + self.shift[CH_CLOSE]).collect()
    }

    pub fn norm_stock(&self, xs: &[f64]) -> Vec<f64> {
        self.normalize_channel(CH_CLOSE, xs)
    }
}

/// A window with normalization and decomposition precomputed.
#[derive(Debug, Clone)]
pub struct PreparedWindow {
    /// normalized source per channel, each [lookback]
    pub channels: [Vec<f64>; 3],
    /// moving-average trend per channel
    pub trend: [Vec<f64>; 3],
    /// remainder per channel (channel - trend)
    pub remainder: [Vec<f64>; 3],
    /// normalized target, [horizon]
    pub target: Vec<f64>,
    pub stats: NormStats,
}

/// Centered moving average with edge replication; kernel length odd.
pub fn moving_average(xs: &[f64], kernel: usize) -> Vec<f64> {
    debug_assert!(kernel % 2 == 1 && kernel >= 1);
    let half = kernel / 2;
    let n = xs.len();
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let mut acc = 0.0;
        for k in 0..kernel {
            let idx = (t + k).saturating_sub(half).min(n - 1);
            acc += xs[idx];
        }
        out.push(acc / kernel as f64);
    }
    out
}

fn effective_kernel(kernel: usize, lookback: usize) -> usize {
    let mut k = kernel.min(lookback);
    if k.is_multiple_of(2) {
        k -= 1;
    }
    k.max(1)
}

pub fn prepare_window(w: &WindowSample, kernel: usize) -> PreparedWindow {
    let stats = NormStats::fit(&w.source);
    let lookback = w.source.len();
    let k = effective_kernel(kernel, lookback);
    let mut channels: [Vec<f64>; 3] = Default::default();
    let mut trend: [Vec<f64>; 3] = Default::default();
    let mut remainder: [Vec<f64>; 3] = Default::default();
    for c in 0..3 {
        let raw: Vec<f64> = w.source.iter().map(|r| r[c]).collect();
        let normed = stats.normalize_channel(c, &raw);
        let tr = moving_average(&normed, k);
        let rem: Vec<f64> = normed.iter().zip(&tr).map(|(x, t)| x - t).collect();
        channels[c] = normed;
        trend[c] = tr;
        remainder[c] = rem;
    }
    let target = stats.norm_stock(&w.target);
    PreparedWindow {
        channels,
        trend,
        remainder,
        target,
        stats,
    }
}

/// Hyperparameters shared by both forecaster families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForecasterConfig {
    pub lookback: usize,
    pub horizon: usize,
    /// moving-average kernel for the decomposition model
    pub kernel: usize,
    /// patch settings for the transformer model
    pub patch: usize,
    pub stride: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub ff_dim: usize,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            lookback: 30,
            horizon: 20,
            kernel: 25,
            patch: 5,
            stride: 5,
            dim: 32,
            heads: 4,
            depth: 2,
            ff_dim: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecasterKind {
    DLinear,
    PatchTst,
}

impl ForecasterKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dlinear" => Ok(Self::DLinear),
            "patchtst" => Ok(Self::PatchTst),
            other => Err(PipelineError::Config(format!("unknown model '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::DLinear => "dlinear",
            Self::PatchTst => "patchtst",
        }
    }
}

/// DLinear+W: per-channel trend/remainder linear maps plus the final
/// 3-channel projection W.
#[derive(Debug, Clone)]
pub struct DLinearW {
    pub cfg: ForecasterConfig,
}

impl DLinearW {
    pub fn init<R: Rng>(cfg: ForecasterConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        for c in 0..3 {
            store.init_uniform(&format!("dl.trend{c}"), &[cfg.horizon, cfg.lookback], rng)?;
            store.init_uniform(&format!("dl.rem{c}"), &[cfg.horizon, cfg.lookback], rng)?;
        }
        store.init_uniform("dl.w", &[cfg.horizon, 3 * cfg.horizon], rng)?;
        store.init_zeros("dl.b", &[cfg.horizon])?;
        Ok(Self { cfg })
    }

    /// Batched forward over prepared windows -> [batch, horizon].
    pub fn forward_batch(&self, s: &mut Session, windows: &[PreparedWindow]) -> Result<TensorId> {
        let b = windows.len();
        let lb = self.cfg.lookback;
        let mut channel_outs = Vec::with_capacity(3);
        for c in 0..3 {
            let trend_data: Vec<f64> = windows.iter().flat_map(|w| w.trend[c].iter().copied()).collect();
            let rem_data: Vec<f64> = windows.iter().flat_map(|w| w.remainder[c].iter().copied()).collect();
            let trend = s.input(&[b, lb], trend_data)?;
            let rem = s.input(&[b, lb], rem_data)?;
            let wt = s.param(&format!("dl.trend{c}"))?;
            let wr = s.param(&format!("dl.rem{c}"))?;
            let yt = s.tape.matmul_tb(trend, wt)?;
            let yr = s.tape.matmul_tb(rem, wr)?;
            channel_outs.push(s.tape.add(yt, yr)?);
        }
        let cat = s.tape.concat_last(&channel_outs)?;
        let w = s.param("dl.w")?;
        let bias = s.param("dl.b")?;
        Ok(linear_forward(&mut s.tape, cat, w, bias)?)
    }
}

/// PatchTST+W: per-channel patch embedding and flatten head around a
/// weight-shared transformer encoder, then the final projection W.
#[derive(Debug, Clone)]
pub struct PatchTstW {
    pub cfg: ForecasterConfig,
    attention: Vec<MultiHeadAttention>,
}

impl PatchTstW {
    pub fn num_patches(cfg: &ForecasterConfig) -> Result<usize> {
        if cfg.patch == 0 || cfg.stride == 0 || cfg.lookback < cfg.patch {
            return Err(PipelineError::Config(format!(
                "invalid patch grid: lookback {} patch {} stride {}",
                cfg.lookback, cfg.patch, cfg.stride
            )));
        }
        if !(cfg.lookback - cfg.patch).is_multiple_of(cfg.stride) {
            return Err(PipelineError::Config(format!(
                "lookback {} minus patch {} not divisible by stride {}",
                cfg.lookback, cfg.patch, cfg.stride
            )));
        }
        Ok((cfg.lookback - cfg.patch) / cfg.stride + 1)
    }

    pub fn init<R: Rng>(cfg: ForecasterConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let np = Self::num_patches(&cfg)?;
        for c in 0..3 {
            store.init_uniform(&format!("pt.embed{c}.w"), &[cfg.dim, cfg.patch], rng)?;
            store.init_zeros(&format!("pt.embed{c}.b"), &[cfg.dim])?;
        }
        store.init_uniform("pt.pos", &[np, cfg.dim], rng)?;
        let mut attention = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            attention.push(MultiHeadAttention::init(
                store,
                &format!("pt.l{l}.att"),
                cfg.dim,
                cfg.heads,
                rng,
            )?);
            store.init_uniform(&format!("pt.l{l}.ff1.w"), &[cfg.ff_dim, cfg.dim], rng)?;
            store.init_zeros(&format!("pt.l{l}.ff1.b"), &[cfg.ff_dim])?;
            store.init_uniform(&format!("pt.l{l}.ff2.w"), &[cfg.dim, cfg.ff_dim], rng)?;
            store.init_zeros(&format!("pt.l{l}.ff2.b"), &[cfg.dim])?;
        }
        for c in 0..3 {
            store.init_uniform(&format!("pt.head{c}.w"), &[cfg.horizon, np * cfg.dim], rng)?;
            store.init_zeros(&format!("pt.head{c}.b"), &[cfg.horizon])?;
        }
        store.init_uniform("pt.w", &[cfg.horizon, 3 * cfg.horizon], rng)?;
        store.init_zeros("pt.b", &[cfg.horizon])?;
        Ok(Self { cfg, attention })
    }

    pub fn attach(cfg: ForecasterConfig, store: &ParamStore) -> Result<Self> {
        let mut attention = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            attention.push(MultiHeadAttention::attach(store, &format!("pt.l{l}.att"), cfg.heads)?);
        }
        Ok(Self { cfg, attention })
    }

    fn patchify(&self, channel: &[f64]) -> Vec<f64> {
        let np = (self.cfg.lookback - self.cfg.patch) / self.cfg.stride + 1;
        let mut out = Vec::with_capacity(np * self.cfg.patch);
        for p in 0..np {
            let start = p * self.cfg.stride;
            out.extend_from_slice(&channel[start..start + self.cfg.patch]);
        }
        out
    }

    fn encode_channel(&self, s: &mut Session, c: usize, channel: &[f64]) -> Result<TensorId> {
        let np = (self.cfg.lookback - self.cfg.patch) / self.cfg.stride + 1;
        let patches = s.input(&[np, self.cfg.patch], self.patchify(channel))?;
        let we = s.param(&format!("pt.embed{c}.w"))?;
        let be = s.param(&format!("pt.embed{c}.b"))?;
        let emb = linear_forward(&mut s.tape, patches, we, be)?;
        let pos = s.param("pt.pos")?;
        let mut x = s.tape.add(emb, pos)?;
        for l in 0..self.cfg.depth {
            let a = s.tape.layer_norm(x);
            let att = self.attention[l].forward(s, a, a)?;
            x = s.tape.add(x, att)?;
            let f = s.tape.layer_norm(x);
            let w1 = s.param(&format!("pt.l{l}.ff1.w"))?;
            let b1 = s.param(&format!("pt.l{l}.ff1.b"))?;
            let w2 = s.param(&format!("pt.l{l}.ff2.w"))?;
            let b2 = s.param(&format!("pt.l{l}.ff2.b"))?;
            let h = linear_forward(&mut s.tape, f, w1, b1)?;
            let h = s.tape.relu(h);
            let ff = linear_forward(&mut s.tape, h, w2, b2)?;
            x = s.tape.add(x, ff)?;
        }
        let flat = s.tape.reshape(x, &[1, np * self.cfg.dim])?;
        let wh = s.param(&format!("pt.head{c}.w"))?;
        let bh = s.param(&format!("pt.head{c}.b"))?;
        Ok(linear_forward(&mut s.tape, flat, wh, bh)?)
    }

    fn forward_one(&self, s: &mut Session, w: &PreparedWindow) -> Result<TensorId> {
        let mut outs = Vec::with_capacity(3);
        for c in 0..3 {
            outs.push(self.encode_channel(s, c, &w.channels[c])?);
        }
        let cat = s.tape.concat_last(&outs)?;
        let wp = s.param("pt.w")?;
        let bp = s.param("pt.b")?;
        Ok(linear_forward(&mut s.tape, cat, wp, bp)?)
    }

    pub fn forward_batch(&self, s: &mut Session, windows: &[PreparedWindow]) -> Result<TensorId> {
        let rows: Vec<TensorId> = windows
            .iter()
            .map(|w| self.forward_one(s, w))
            .collect::<Result<_>>()?;
        let flat = s.tape.concat_last(&rows)?;
        Ok(s.tape.reshape(flat, &[windows.len(), self.cfg.horizon])?)
    }
}

/// A trained (or trainable) forecaster plus its hyperparameters.
pub enum Forecaster {
    DLinear(DLinearW),
    PatchTst(PatchTstW),
}

// hyperparameters are persisted alongside the weights as a pseudo-parameter
const META_NAME: &str = "meta.forecaster";

impl Forecaster {
    pub fn init<R: Rng>(
        kind: ForecasterKind,
        cfg: ForecasterConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let kind_code = match kind {
            ForecasterKind::DLinear => 0.0,
            ForecasterKind::PatchTst => 1.0,
        };
        let meta = vec![
            kind_code,
            cfg.lookback as f64,
            cfg.horizon as f64,
            cfg.kernel as f64,
            cfg.patch as f64,
            cfg.stride as f64,
            cfg.dim as f64,
            cfg.heads as f64,
            cfg.depth as f64,
            cfg.ff_dim as f64,
        ];
        store.insert(META_NAME, &[meta.len()], meta)?;
        match kind {
            ForecasterKind::DLinear => Ok(Self::DLinear(DLinearW::init(cfg, store, rng)?)),
            ForecasterKind::PatchTst => Ok(Self::PatchTst(PatchTstW::init(cfg, store, rng)?)),
        }
    }

    /// Rebuild from a loaded store using the embedded hyperparameters.
    pub fn attach(store: &ParamStore) -> Result<Self> {
        let meta = &store.get(META_NAME)?.data;
        if meta.len() != 10 {
            return Err(PipelineError::Config("bad forecaster metadata".into()));
        }
        let cfg = ForecasterConfig {
            lookback: meta[1] as usize,
            horizon: meta[2] as usize,
            kernel: meta[3] as usize,
            patch: meta[4] as usize,
            stride: meta[5] as usize,
            dim: meta[6] as usize,
            heads: meta[7] as usize,
            depth: meta[8] as usize,
            ff_dim: meta[9] as usize,
        };
        match meta[0] as i64 {
            0 => Ok(Self::DLinear(DLinearW { cfg })),
            1 => Ok(Self::PatchTst(PatchTstW::attach(cfg, store)?)),
            k => Err(PipelineError::Config(format!("unknown forecaster kind {k}"))),
        }
    }

    pub fn cfg(&self) -> &ForecasterConfig {
        match self {
            Self::DLinear(m) => &m.cfg,
            Self::PatchTst(m) => &m.cfg,
        }
    }

    pub fn forward_batch(&self, s: &mut Session, windows: &[PreparedWindow]) -> Result<TensorId> {
        match self {
            Self::DLinear(m) => m.forward_batch(s, windows),
            Self::PatchTst(m) => m.forward_batch(s, windows),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 200,
            batch: 16,
            seed: 0,
        }
    }
}

/// Minimize MSE between prediction and normalized target over shuffled
/// minibatches. Returns the per-epoch mean training loss.
pub fn train_forecaster(
    model: &Forecaster,
    store: &mut ParamStore,
    windows: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(PipelineError::Data("no training windows".into()));
    }
    let prepared: Vec<PreparedWindow> = windows
        .iter()
        .map(|w| prepare_window(w, model.cfg().kernel))
        .collect();
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<PreparedWindow> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            let mut s = Session::new(store);
            let pred = model.forward_batch(&mut s, &batch)?;
            let target_data: Vec<f64> = batch.iter().flat_map(|w| w.target.iter().copied()).collect();
            let target = s.input(&[batch.len(), model.cfg().horizon], target_data)?;
            let loss = s.tape.mse(pred, target)?;
            let loss_val = s.tape.value(loss)[0];
            if !loss_val.is_finite() {
                return Err(PipelineError::Numerical(format!(
                    "non-finite loss {loss_val} at epoch {epoch}"
                )));
            }
            s.backward(loss)?;
            let grads = s.grads();
            adam.apply(store, &grads)?;
            epoch_loss += loss_val;
            batches += 1;
        }
        curve.push(epoch_loss / batches as f64);
    }
    Ok(curve)
}

/// Baseline n-step event prediction in both normalized and currency units.
#[derive(Debug, Clone)]
pub struct BaselinePrediction {
    pub normalized: Vec<f64>,
    pub currency: Vec<f64>,
    pub stats: NormStats,
}

/// Run the forecaster on the lookback window ending at the event date and
/// keep the first `n` of the horizon outputs.
pub fn predict_event_baseline(
    model: &Forecaster,
    store: &ParamStore,
    series: &AlignedSeries,
    event_date: NaiveDate,
    n: usize,
) -> Result<BaselinePrediction> {
    let cfg = model.cfg();
    if n > cfg.horizon {
        return Err(PipelineError::Config(format!(
            "n {n} exceeds forecaster horizon {}",
            cfg.horizon
        )));
    }
    let idx = series
        .date_index(event_date)
        .ok_or_else(|| PipelineError::Data(format!("{event_date} not in series for {}", series.ticker)))?;
    if idx + 1 < cfg.lookback {
        return Err(PipelineError::Data(format!(
            "insufficient history before {event_date}: have {}, need {}",
            idx + 1,
            cfg.lookback
        )));
    }
    let source = series.channels[idx + 1 - cfg.lookback..=idx].to_vec();
    let window = WindowSample {
        source,
        target: vec![0.0; cfg.horizon],
        ticker: series.ticker.clone(),
        end_date: event_date,
    };
    let prepared = prepare_window(&window, cfg.kernel);
    let stats = prepared.stats;
    let mut s = Session::new(store);
    let pred = model.forward_batch(&mut s, &[prepared])?;
    let full = s.tape.value(pred).to_vec();
    let normalized = full[..n].to_vec();
    let currency = stats.denorm_stock(&normalized);
    Ok(BaselinePrediction {
        normalized,
        currency,
        stats,
    })
}
