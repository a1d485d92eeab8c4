//! The label-driven amplifier head: a stock-state GRU over label
//! embeddings, a direction-probability readout, expected-direction
//! amplification, and a linear update of the frozen forecaster's
//! baseline prediction.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use ndcore::{linear_forward, AdamState, GruCell, ParamStore, Session, TensorId};

use crate::forecasters::{predict_event_baseline, Forecaster, NormStats};
use crate::indicators::LabelProvider;
use crate::labels::{ChangeLabel, Direction, QuantConfig};
use crate::market::{AlignedSeries, EventRecord};
use crate::{PipelineError, Result};

/// Hash buckets shared by unknown tickers at inference time.
pub const FALLBACK_BUCKETS: usize = 8;

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// GRU hidden width (stock-state dimension)
    pub hidden: usize,
    /// label-embedding width
    pub embed: usize,
    /// amplification weight in the update input
    pub alpha: f64,
    /// event prediction length
    pub n: usize,
    pub magnitude_cap: u32,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            embed: 16,
            alpha: 1.0,
            n: 9,
            magnitude_cap: 100,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embed == 0 || self.n == 0 {
            return Err(PipelineError::Config("head dimensions must be positive".into()));
        }
        if self.alpha <= 0.0 {
            return Err(PipelineError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Everything the four-vector event forward pass produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastBundle {
    /// frozen forecaster prediction, normalized units
    pub baseline: Vec<f64>,
    /// dimensionless per-step amplification
    pub amplification: Vec<f64>,
    /// updated prediction, normalized units
    pub updated: Vec<f64>,
    /// realized prices, normalized units
    pub truth: Vec<f64>,
    /// per-event normalization for currency reporting
    pub shift: f64,
    pub scale: f64,
}

impl ForecastBundle {
    pub fn to_currency(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|x| x * self.scale + self.shift).collect()
    }
}

pub struct TimesHead {
    pub cfg: HeadConfig,
    vocab: IndexMap<String, usize>,
    gru: GruCell,
}

impl TimesHead {
    pub fn init<R: Rng>(
        cfg: HeadConfig,
        tickers: &[String],
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let vocab = build_vocab(tickers);
        let rows = vocab.len() + FALLBACK_BUCKETS;
        store.init_uniform("ts.stock", &[rows, cfg.hidden], rng)?;
        let label_rows = 2 * cfg.magnitude_cap as usize + 1;
        store.init_uniform("ts.label", &[label_rows, cfg.embed], rng)?;
        // seed the first embedding coordinate with the signed normalized
        // magnitude so the rollout starts from an informative ordering of
        // the label vocabulary instead of having to rediscover it
        {
            let cap = cfg.magnitude_cap as f64;
            let table = store.get_mut("ts.label")?;
            for k in 0..=cfg.magnitude_cap as usize {
                table.data[k * cfg.embed] = k as f64 / cap;
            }
            for k in 1..=cfg.magnitude_cap as usize {
                table.data[(cfg.magnitude_cap as usize + k) * cfg.embed] = -(k as f64) / cap;
            }
        }
        let gru = GruCell::init(store, "ts.gru", cfg.embed, cfg.hidden, rng)?;
        store.init_uniform("ts.wa", &[3, cfg.hidden], rng)?;
        store.init_uniform("ts.wu", &[cfg.n, 2 * cfg.n], rng)?;
        store.init_zeros("ts.wb", &[cfg.n])?;
        Ok(Self { cfg, vocab, gru })
    }

    pub fn attach(cfg: HeadConfig, tickers: &[String], store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let vocab = build_vocab(tickers);
        let stock = store.get("ts.stock")?;
        if stock.shape[0] != vocab.len() + FALLBACK_BUCKETS {
            return Err(PipelineError::Config(format!(
                "stock table has {} rows, vocab wants {}",
                stock.shape[0],
                vocab.len() + FALLBACK_BUCKETS
            )));
        }
        let gru = GruCell::attach(store, "ts.gru")?;
        Ok(Self { cfg, vocab, gru })
    }

    pub fn vocab(&self) -> Vec<String> {
        self.vocab.keys().cloned().collect()
    }

    pub fn stock_index(&self, ticker: &str) -> usize {
        match self.vocab.get(ticker) {
            Some(&i) => i,
            None => self.vocab.len() + (fnv1a64(ticker.as_bytes()) as usize % FALLBACK_BUCKETS),
        }
    }

    pub fn label_index(&self, l: &ChangeLabel) -> usize {
        let k = l.magnitude.min(self.cfg.magnitude_cap) as usize;
        match l.direction {
            Direction::Inc => k,
            Direction::Dec => self.cfg.magnitude_cap as usize + k,
        }
    }

    /// GRU rollout: h_0 is the stock embedding row, one step per expanded
    /// label. Returns the n states, each [batch, hidden].
    pub fn roll_states(
        &self,
        s: &mut Session,
        tickers: &[&str],
        labels: &[&[ChangeLabel]],
    ) -> Result<Vec<TensorId>> {
        if tickers.len() != labels.len() || tickers.is_empty() {
            return Err(PipelineError::Config("batch of tickers and labels must match".into()));
        }
        for ls in labels {
            if ls.len() != self.cfg.n {
                return Err(PipelineError::Label(format!(
                    "expected {} expanded labels, got {}",
                    self.cfg.n,
                    ls.len()
                )));
            }
        }
        let stock = s.param("ts.stock")?;
        let table = s.param("ts.label")?;
        let idxs: Vec<usize> = tickers.iter().map(|t| self.stock_index(t)).collect();
        let mut h = s.tape.gather(stock, &idxs)?;
        let mut states = Vec::with_capacity(self.cfg.n);
        for t in 0..self.cfg.n {
            let step_idx: Vec<usize> = labels.iter().map(|ls| self.label_index(&ls[t])).collect();
            let x = s.tape.gather(table, &step_idx)?;
            h = self.gru.step(s, h, x)?;
            states.push(h);
        }
        Ok(states)
    }
}

fn build_vocab(tickers: &[String]) -> IndexMap<String, usize> {
    let mut sorted: Vec<&String> = tickers.iter().collect();
    sorted.sort();
    sorted.dedup();
    sorted.iter().enumerate().map(|(i, t)| ((*t).clone(), i)).collect()
}

/// Per-step direction probabilities and their expected-direction collapse:
/// softmax over (increase, neutral, decrease) logits, then p_inc - p_dec.
/// Returns the amplification series [batch, n].
pub fn direction_amplification(
    s: &mut Session,
    states: &[TensorId],
    wa_name: &str,
) -> Result<TensorId> {
    let wa = s.param(wa_name)?;
    let mut cols = Vec::with_capacity(states.len());
    for &h in states {
        let logits = s.tape.matmul_tb(h, wa)?;
        let probs = s.tape.softmax(logits);
        let inc = s.tape.slice_last(probs, 0, 1)?;
        let dec = s.tape.slice_last(probs, 2, 1)?;
        cols.push(s.tape.sub(inc, dec)?);
    }
    Ok(s.tape.concat_last(&cols)?)
}

/// The shared linear update: P' = W_u . concat(alpha*A, P) + bias.
pub fn apply_update(
    s: &mut Session,
    amp: TensorId,
    baseline: TensorId,
    alpha: f64,
    wu_name: &str,
    wb_name: &str,
) -> Result<TensorId> {
    let scaled = s.tape.scale(amp, alpha);
    let cat = s.tape.concat_last(&[scaled, baseline])?;
    let wu = s.param(wu_name)?;
    let wb = s.param(wb_name)?;
    Ok(linear_forward(&mut s.tape, cat, wu, wb)?)
}

/// One event prepared for head training or inference: resolved labels,
/// baseline prediction and realized prices, all in normalized units.
#[derive(Debug, Clone)]
pub struct EventSample {
    pub ticker: String,
    pub date: chrono::NaiveDate,
    pub text: String,
    /// expanded per-step labels; empty when prepared without a provider
    pub labels: Vec<ChangeLabel>,
    pub baseline_norm: Vec<f64>,
    pub target_norm: Vec<f64>,
    pub stats: NormStats,
}

/// Run a frozen baseline predictor once per event and resolve labels.
/// Events without enough lookback history or realized prices are skipped
/// with a warning; provider failures abort.
pub fn prepare_event_samples_with(
    baseline_of: impl Fn(&EventRecord) -> Result<crate::forecasters::BaselinePrediction>,
    events: &[EventRecord],
    provider: Option<&LabelProvider>,
    qcfg: &QuantConfig,
) -> Result<Vec<EventSample>> {
    let n = qcfg.horizon;
    let mut out = Vec::with_capacity(events.len());
    for ev in events {
        let Some(realized) = ev.realized_prices.as_ref().filter(|r| r.len() >= n) else {
            eprintln!("warning: skipping event {} {}: no realized horizon", ev.ticker, ev.date);
            continue;
        };
        let baseline = match baseline_of(ev) {
            Ok(b) => b,
            Err(e) => {
                eprintln!("warning: skipping event {} {}: {e}", ev.ticker, ev.date);
                continue;
            }
        };
        let labels = match provider {
            Some(p) => p.labels_for(ev, qcfg)?.expanded,
            None => Vec::new(),
        };
        let target_norm = baseline.stats.norm_stock(&realized[..n]);
        out.push(EventSample {
            ticker: ev.ticker.clone(),
            date: ev.date,
            text: ev.text.clone(),
            labels,
            baseline_norm: baseline.normalized,
            target_norm,
            stats: baseline.stats,
        });
    }
    if out.is_empty() {
        return Err(PipelineError::Data("no usable events".into()));
    }
    Ok(out)
}

/// Single shared-forecaster convenience wrapper around
/// [`prepare_event_samples_with`].
pub fn prepare_event_samples(
    forecaster: &Forecaster,
    fstore: &ParamStore,
    series: &BTreeMap<String, AlignedSeries>,
    events: &[EventRecord],
    provider: Option<&LabelProvider>,
    qcfg: &QuantConfig,
) -> Result<Vec<EventSample>> {
    prepare_event_samples_with(
        |ev| {
            let sr = series.get(&ev.ticker).ok_or_else(|| {
                PipelineError::Data(format!("no price series for {}", ev.ticker))
            })?;
            predict_event_baseline(forecaster, fstore, sr, ev.date, qcfg.horizon)
        },
        events,
        provider,
        qcfg,
    )
}

#[derive(Debug, Clone, Copy)]
pub struct HeadTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 60,
            batch: 16,
            seed: 0,
        }
    }
}

fn batch_inputs(s: &mut Session, samples: &[&EventSample], n: usize) -> Result<(TensorId, TensorId)> {
    let b = samples.len();
    let base: Vec<f64> = samples.iter().flat_map(|e| e.baseline_norm.iter().copied()).collect();
    let tgt: Vec<f64> = samples.iter().flat_map(|e| e.target_norm.iter().copied()).collect();
    let baseline = s.input(&[b, n], base)?;
    let target = s.input(&[b, n], tgt)?;
    Ok((baseline, target))
}

/// Interface shared by the three head variants: each produces a per-step
/// amplification series for a batch of prepared events, and names the
/// parameters of its linear update.
pub trait AmplifierModel {
    fn n(&self) -> usize;
    fn alpha(&self) -> f64;
    /// (update matrix, update bias) parameter names
    fn update_names(&self) -> (&'static str, &'static str);
    fn amplification_of(&self, s: &mut Session, batch: &[&EventSample]) -> Result<TensorId>;
}

impl AmplifierModel for TimesHead {
    fn n(&self) -> usize {
        self.cfg.n
    }

    fn alpha(&self) -> f64 {
        self.cfg.alpha
    }

    fn update_names(&self) -> (&'static str, &'static str) {
        ("ts.wu", "ts.wb")
    }

    fn amplification_of(&self, s: &mut Session, batch: &[&EventSample]) -> Result<TensorId> {
        let tickers: Vec<&str> = batch.iter().map(|e| e.ticker.as_str()).collect();
        let labels: Vec<&[ChangeLabel]> = batch.iter().map(|e| e.labels.as_slice()).collect();
        let states = self.roll_states(s, &tickers, &labels)?;
        direction_amplification(s, &states, "ts.wa")
    }
}

fn forward_updated(
    model: &(impl AmplifierModel + ?Sized),
    s: &mut Session,
    batch: &[&EventSample],
) -> Result<(TensorId, TensorId, TensorId)> {
    let amp = model.amplification_of(s, batch)?;
    let (baseline, target) = batch_inputs(s, batch, model.n())?;
    let (wu, wb) = model.update_names();
    let updated = apply_update(s, amp, baseline, model.alpha(), wu, wb)?;
    Ok((amp, updated, target))
}

/// Mean MSE(P', truth) over a sample set without touching parameters.
pub fn amplifier_mse(
    model: &(impl AmplifierModel + ?Sized),
    store: &ParamStore,
    samples: &[EventSample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(PipelineError::Data("no events to evaluate".into()));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(32) {
        let batch: Vec<&EventSample> = chunk.iter().collect();
        let mut s = Session::new(store);
        let (_, updated, target) = forward_updated(model, &mut s, &batch)?;
        let loss = s.tape.mse(updated, target)?;
        total += s.tape.value(loss)[0] * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// mean training loss per epoch
    pub curve: Vec<f64>,
    /// validation MSE per epoch (empty without a validation set)
    pub val_curve: Vec<f64>,
    /// epoch whose parameters were kept (last epoch without validation)
    pub best_epoch: usize,
}

/// Minimize MSE(P', truth) in normalized units with the forecaster frozen
/// (its parameters live in a separate store the head never touches). With
/// a validation set, the parameters from the best validation epoch are
/// kept instead of the last.
pub fn train_amplifier(
    model: &(impl AmplifierModel + ?Sized),
    store: &mut ParamStore,
    samples: &[EventSample],
    val: Option<&[EventSample]>,
    cfg: &HeadTrainConfig,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(PipelineError::Data("no training events".into()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut val_curve = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<&EventSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut s = Session::new(store);
            let (_, updated, target) = forward_updated(model, &mut s, &batch)?;
            let loss = s.tape.mse(updated, target)?;
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
        if let Some(val_samples) = val {
            let v = amplifier_mse(model, store, val_samples)?;
            val_curve.push(v);
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, store.clone()));
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            *store = params;
            epoch
        }
        None => cfg.epochs.saturating_sub(1),
    };
    Ok(TrainOutcome {
        curve,
        val_curve,
        best_epoch,
    })
}

pub fn infer_amplifier(
    model: &(impl AmplifierModel + ?Sized),
    store: &ParamStore,
    sample: &EventSample,
) -> Result<ForecastBundle> {
    let mut s = Session::new(store);
    let (amp, updated, _) = forward_updated(model, &mut s, &[sample])?;
    Ok(ForecastBundle {
        baseline: sample.baseline_norm.clone(),
        amplification: s.tape.value(amp).to_vec(),
        updated: s.tape.value(updated).to_vec(),
        truth: sample.target_norm.clone(),
        shift: sample.stats.shift[crate::market::CH_CLOSE],
        scale: sample.stats.scale[crate::market::CH_CLOSE],
    })
}

pub fn train_times(
    head: &TimesHead,
    store: &mut ParamStore,
    samples: &[EventSample],
    cfg: &HeadTrainConfig,
) -> Result<Vec<f64>> {
    train_amplifier(head, store, samples, None, cfg).map(|o| o.curve)
}

pub fn infer_times(head: &TimesHead, store: &ParamStore, sample: &EventSample) -> Result<ForecastBundle> {
    infer_amplifier(head, store, sample)
}

/// Head artifact: weights in the shared binary format plus a JSON sidecar
/// holding the configuration and ticker vocabulary.
#[derive(Serialize, Deserialize)]
struct HeadMeta {
    kind: String,
    cfg: HeadConfig,
    vocab: Vec<String>,
}

pub(crate) fn meta_path(path: &std::path::Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.json");
    std::path::PathBuf::from(os)
}

pub(crate) fn save_head_meta(path: &std::path::Path, kind: &str, cfg_json: serde_json::Value) -> Result<()> {
    let meta = serde_json::json!({ "kind": kind, "meta": cfg_json });
    std::fs::write(meta_path(path), serde_json::to_vec_pretty(&meta).expect("json"))?;
    Ok(())
}

/// Read just the `kind` tag from a head's metadata sidecar.
pub(crate) fn peek_head_kind(path: &std::path::Path) -> Result<String> {
    let raw = std::fs::read(meta_path(path))?;
    let v: serde_json::Value = serde_json::from_slice(&raw)
        .map_err(|e| PipelineError::Config(format!("bad head metadata: {e}")))?;
    v["kind"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| PipelineError::Config(format!("head metadata at {} has no kind", path.display())))
}

pub(crate) fn load_head_meta(path: &std::path::Path, kind: &str) -> Result<serde_json::Value> {
    let raw = std::fs::read(meta_path(path))?;
    let v: serde_json::Value = serde_json::from_slice(&raw)
        .map_err(|e| PipelineError::Config(format!("bad head metadata: {e}")))?;
    if v["kind"] != kind {
        return Err(PipelineError::Config(format!(
            "head at {} is '{}', expected '{kind}'",
            path.display(),
            v["kind"]
        )));
    }
    Ok(v["meta"].clone())
}

pub fn save_times_head(head: &TimesHead, store: &ParamStore, path: &std::path::Path) -> Result<()> {
    ndcore::save_params(store, path)?;
    let meta = HeadMeta {
        kind: "times".into(),
        cfg: head.cfg,
        vocab: head.vocab(),
    };
    save_head_meta(path, "times", serde_json::to_value(&meta).expect("json"))
}

pub fn load_times_head(path: &std::path::Path) -> Result<(TimesHead, ParamStore)> {
    let store = ndcore::load_params(path)?;
    let meta: HeadMeta = serde_json::from_value(load_head_meta(path, "times")?)
        .map_err(|e| PipelineError::Config(format!("bad head metadata: {e}")))?;
    let head = TimesHead::attach(meta.cfg, &meta.vocab, &store)?;
    Ok((head, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::Direction;

    fn mk_head(cfg: HeadConfig, seed: u64) -> (TimesHead, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tickers: Vec<String> = ["AAA", "BBB", "CCC"].iter().map(|s| s.to_string()).collect();
        let head = TimesHead::init(cfg, &tickers, &mut store, &mut rng).unwrap();
        (head, store)
    }

    fn inc(k: u32) -> ChangeLabel {
        ChangeLabel::new(Direction::Inc, k)
    }

    #[test]
    fn label_indices_cover_vocabulary() {
        let (head, _) = mk_head(HeadConfig::default(), 1);
        assert_eq!(head.label_index(&inc(0)), 0);
        assert_eq!(head.label_index(&inc(100)), 100);
        assert_eq!(head.label_index(&ChangeLabel::new(Direction::Dec, 1)), 101);
        assert_eq!(head.label_index(&ChangeLabel::new(Direction::Dec, 100)), 200);
    }

    #[test]
    fn unknown_ticker_hashes_into_fallback_bucket() {
        let (head, _) = mk_head(HeadConfig::default(), 1);
        assert_eq!(head.stock_index("AAA"), 0);
        let i = head.stock_index("ZZZZ");
        assert!((3..3 + FALLBACK_BUCKETS).contains(&i));
        assert_eq!(i, head.stock_index("ZZZZ"));
    }

    #[test]
    fn zero_gru_weights_halve_stock_embedding() {
        // single step with zeroed GRU: z = 0.5, candidate = 0,
        // so h1 = h0 + 0.5 * (0 - h0) = 0.5 * h0
        let cfg = HeadConfig { n: 1, ..Default::default() };
        let (head, mut store) = mk_head(cfg, 3);
        for g in ["wz", "wr", "wh"] {
            store.get_mut(&format!("ts.gru.{g}")).unwrap().data.fill(0.0);
        }
        let emb = store.get("ts.stock").unwrap().data[..cfg.hidden].to_vec();
        let mut s = Session::new(&store);
        let labels = vec![inc(3)];
        let states = head.roll_states(&mut s, &["AAA"], &[&labels]).unwrap();
        let got = s.tape.value(states[0]);
        for (g, e) in got.iter().zip(&emb) {
            assert!((g - 0.5 * e).abs() < 1e-12);
        }
    }

    #[test]
    fn distinct_tickers_give_distinct_first_states() {
        let (head, store) = mk_head(HeadConfig::default(), 5);
        let labels: Vec<ChangeLabel> = vec![inc(2); 9];
        let mut s = Session::new(&store);
        let states = head
            .roll_states(&mut s, &["AAA", "BBB"], &[&labels, &labels])
            .unwrap();
        let v = s.tape.value(states[0]);
        let (a, b) = v.split_at(head.cfg.hidden);
        assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn repeated_label_contracts_states() {
        // same label at every step: the state sequence approaches a fixed
        // point, so successive distances shrink after burn-in
        let mut converged = 0;
        for seed in 0..20 {
            let (head, store) = mk_head(HeadConfig::default(), 100 + seed);
            let labels: Vec<ChangeLabel> = vec![inc(7); 9];
            let mut s = Session::new(&store);
            let states = head.roll_states(&mut s, &["AAA"], &[&labels]).unwrap();
            let dist = |a: TensorId, b: TensorId, s: &Session| -> f64 {
                s.tape
                    .value(a)
                    .iter()
                    .zip(s.tape.value(b))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let early = dist(states[2], states[3], &s);
            let late = dist(states[7], states[8], &s);
            if late < early {
                converged += 1;
            }
        }
        assert!(converged >= 18, "only {converged}/20 seeds contracted");
    }

    #[test]
    fn zero_direction_matrix_gives_uniform_probs_and_zero_amp() {
        let (head, mut store) = mk_head(HeadConfig::default(), 2);
        store.get_mut("ts.wa").unwrap().data.fill(0.0);
        let labels: Vec<ChangeLabel> = vec![inc(4); 9];
        let mut s = Session::new(&store);
        let states = head.roll_states(&mut s, &["AAA"], &[&labels]).unwrap();
        let amp = direction_amplification(&mut s, &states, "ts.wa").unwrap();
        for a in s.tape.value(amp) {
            assert!(a.abs() < 1e-12);
        }
    }

    #[test]
    fn amplification_matches_brute_force_softmax() {
        let (head, store) = mk_head(HeadConfig::default(), 6);
        let labels: Vec<ChangeLabel> = (0..9).map(|k| inc(k as u32)).collect();
        let mut s = Session::new(&store);
        let states = head.roll_states(&mut s, &["BBB"], &[&labels]).unwrap();
        let amp = direction_amplification(&mut s, &states, "ts.wa").unwrap();
        let amp_v = s.tape.value(amp).to_vec();
        let wa = &store.get("ts.wa").unwrap().data;
        let h = head.cfg.hidden;
        for (t, &st) in states.iter().enumerate() {
            let sv = s.tape.value(st);
            let logits: Vec<f64> = (0..3)
                .map(|r| (0..h).map(|c| wa[r * h + c] * sv[c]).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            let expect = exps[0] / z - exps[2] / z;
            assert!((amp_v[t] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn amplification_bounded() {
        for seed in 0..10 {
            let (head, store) = mk_head(HeadConfig::default(), 200 + seed);
            let labels: Vec<ChangeLabel> =
                (0..9).map(|k| ChangeLabel::new(if k % 2 == 0 { Direction::Inc } else { Direction::Dec }, k * 11)).collect();
            let mut s = Session::new(&store);
            let states = head.roll_states(&mut s, &["CCC"], &[&labels]).unwrap();
            let amp = direction_amplification(&mut s, &states, "ts.wa").unwrap();
            for a in s.tape.value(amp) {
                assert!((-1.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn identity_update_passes_baseline_through() {
        // W_u = [0 | I], zero bias: P' == P regardless of amplification
        let (head, mut store) = mk_head(HeadConfig::default(), 4);
        let n = head.cfg.n;
        let wu = store.get_mut("ts.wu").unwrap();
        wu.data.fill(0.0);
        for i in 0..n {
            wu.data[i * 2 * n + n + i] = 1.0;
        }
        store.get_mut("ts.wb").unwrap().data.fill(0.0);
        let labels: Vec<ChangeLabel> = vec![inc(9); 9];
        let mut s = Session::new(&store);
        let states = head.roll_states(&mut s, &["AAA"], &[&labels]).unwrap();
        let amp = direction_amplification(&mut s, &states, "ts.wa").unwrap();
        let base: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 0.3).collect();
        let baseline = s.input(&[1, n], base.clone()).unwrap();
        let upd = apply_update(&mut s, amp, baseline, head.cfg.alpha, "ts.wu", "ts.wb").unwrap();
        for (u, b) in s.tape.value(upd).iter().zip(&base) {
            assert!((u - b).abs() < 1e-12);
        }
    }

    #[test]
    fn update_matches_brute_force() {
        let (head, store) = mk_head(HeadConfig::default(), 8);
        let n = head.cfg.n;
        let alpha = 0.7;
        let labels: Vec<ChangeLabel> = vec![inc(13); 9];
        let mut s = Session::new(&store);
        let states = head.roll_states(&mut s, &["BBB"], &[&labels]).unwrap();
        let amp = direction_amplification(&mut s, &states, "ts.wa").unwrap();
        let amp_v = s.tape.value(amp).to_vec();
        let base: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let baseline = s.input(&[1, n], base.clone()).unwrap();
        let upd = apply_update(&mut s, amp, baseline, alpha, "ts.wu", "ts.wb").unwrap();
        let got = s.tape.value(upd).to_vec();
        let wu = &store.get("ts.wu").unwrap().data;
        let wb = &store.get("ts.wb").unwrap().data;
        let mut cat: Vec<f64> = amp_v.iter().map(|a| alpha * a).collect();
        cat.extend_from_slice(&base);
        for r in 0..n {
            let expect: f64 = (0..2 * n).map(|c| wu[r * 2 * n + c] * cat[c]).sum::<f64>() + wb[r];
            assert!((got[r] - expect).abs() < 1e-10);
        }
    }

    fn mk_samples(head: &TimesHead) -> Vec<EventSample> {
        let n = head.cfg.n;
        (0..12)
            .map(|i| {
                let up = i % 2 == 0;
                let mag = if up { 10 } else { 8 };
                let dir = if up { Direction::Inc } else { Direction::Dec };
                EventSample {
                    ticker: ["AAA", "BBB", "CCC"][i % 3].to_string(),
                    date: chrono::NaiveDate::from_ymd_opt(2021, 2, 1 + i as u32).unwrap(),
                    text: String::new(),
                    labels: vec![ChangeLabel::new(dir, mag); n],
                    baseline_norm: vec![0.0; n],
                    target_norm: vec![if up { 0.5 } else { -0.5 }; n],
                    stats: NormStats { shift: [0.0; 3], scale: [1.0; 3] },
                }
            })
            .collect()
    }

    #[test]
    fn training_learns_label_direction() {
        // baseline carries no signal; only labels separate up from down
        let (head, mut store) = mk_head(HeadConfig::default(), 11);
        let samples = mk_samples(&head);
        let curve = train_times(
            &head,
            &mut store,
            &samples,
            &HeadTrainConfig { lr: 1e-2, epochs: 80, batch: 4, seed: 2 },
        )
        .unwrap();
        assert!(curve.last().unwrap() < &(curve[0] * 0.2), "curve {curve:?}");
    }

    #[test]
    fn zero_epochs_leave_head_unchanged_and_training_is_deterministic() {
        let (head, mut store) = mk_head(HeadConfig::default(), 12);
        let samples = mk_samples(&head);
        let before = store.clone();
        train_times(&head, &mut store, &samples, &HeadTrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(before, store);

        let cfg = HeadTrainConfig { epochs: 3, ..Default::default() };
        let mut s1 = before.clone();
        let mut s2 = before.clone();
        train_times(&head, &mut s1, &samples, &cfg).unwrap();
        train_times(&head, &mut s2, &samples, &cfg).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn infer_is_deterministic_and_bundle_consistent() {
        let (head, store) = mk_head(HeadConfig::default(), 13);
        let samples = mk_samples(&head);
        let a = infer_times(&head, &store, &samples[0]).unwrap();
        let b = infer_times(&head, &store, &samples[0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.baseline.len(), head.cfg.n);
        assert_eq!(a.updated.len(), head.cfg.n);
        assert!(a.amplification.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn save_load_round_trip() {
        let (head, store) = mk_head(HeadConfig::default(), 14);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.bin");
        save_times_head(&head, &store, &path).unwrap();
        let (loaded, lstore) = load_times_head(&path).unwrap();
        assert_eq!(store, lstore);
        assert_eq!(loaded.cfg, head.cfg);
        assert_eq!(loaded.vocab(), head.vocab());
        let samples = mk_samples(&head);
        assert_eq!(
            infer_times(&head, &store, &samples[3]).unwrap(),
            infer_times(&loaded, &lstore, &samples[3]).unwrap()
        );
    }

    #[test]
    fn wrong_label_count_rejected() {
        let (head, store) = mk_head(HeadConfig::default(), 15);
        let labels = vec![inc(1); 4];
        let mut s = Session::new(&store);
        assert!(head.roll_states(&mut s, &["AAA"], &[&labels]).is_err());
    }
}
