//! Market data: CSV/JSONL ingestion, calendar alignment, ticker-wise
//! splitting, training windows, and the synthetic scenario generator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::labels::{encode_labels, parse_tokens, LabelSequence, QuantConfig};
use crate::{PipelineError, Result};

/// Date-indexed multivariate series for one ticker: stock close, NASDAQ
/// index, and dollar index channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSeries {
    pub ticker: String,
    pub dates: Vec<NaiveDate>,
    /// [t][channel] with channel order (close, nasdaq, usd_index)
    pub channels: Vec<[f64; 3]>,
}

pub const CH_CLOSE: usize = 0;
pub const CH_NASDAQ: usize = 1;
pub const CH_USD: usize = 2;

impl AlignedSeries {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    pub fn closes(&self) -> impl Iterator<Item = f64> + '_ {
        self.channels.iter().map(|c| c[CH_CLOSE])
    }
}

/// One news event with the prices realized over the following horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub ticker: String,
    pub date: NaiveDate,
    pub text: String,
    pub gold_labels: Option<LabelSequence>,
    pub realized_prices: Option<Vec<f64>>,
}

/// A rejected event line with the reason, collected rather than fatal.
#[derive(Debug, Clone)]
pub struct Rejection {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CapBucket {
    SmallCap,
    MidCap,
    LargeCap,
}

impl CapBucket {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SmallCap => "small-cap",
            Self::MidCap => "mid-cap",
            Self::LargeCap => "large-cap",
        }
    }
}

/// Market-cap thresholds in currency units; buckets partition the universe.
#[derive(Debug, Clone, Copy)]
pub struct CapThresholds {
    pub small_max: f64,
    pub mid_max: f64,
}

impl Default for CapThresholds {
    fn default() -> Self {
        Self {
            small_max: 2e9,
            mid_max: 10e9,
        }
    }
}

impl CapThresholds {
    pub fn bucket(&self, market_cap: f64) -> CapBucket {
        if market_cap <= self.small_max {
            CapBucket::SmallCap
        } else if market_cap <= self.mid_max {
            CapBucket::MidCap
        } else {
            CapBucket::LargeCap
        }
    }
}

/// Optional ticker metadata CSV (`ticker,market_cap`). Tickers absent
/// from the map all land in one bucket.
pub fn load_cap_buckets(path: &Path, thresholds: &CapThresholds) -> Result<BTreeMap<String, CapBucket>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| PipelineError::Data(format!("metadata row {}: {e}", i + 2)))?;
        let ticker = rec
            .get(0)
            .ok_or_else(|| PipelineError::Data(format!("metadata row {}: missing ticker", i + 2)))?;
        let cap: f64 = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PipelineError::Data(format!("metadata row {}: bad market cap", i + 2)))?;
        out.insert(ticker.to_string(), thresholds.bucket(cap));
    }
    Ok(out)
}

const PRICE_COLUMNS: [&str; 5] = ["date", "ticker", "close", "nasdaq", "usd_index"];

/// Ingest the prices CSV (`date,ticker,close,nasdaq,usd_index`) into
/// per-ticker aligned series. Empty channel cells are forward-filled;
/// leading rows with any still-missing channel are dropped.
pub fn ingest_prices(path: &Path) -> Result<BTreeMap<String, AlignedSeries>> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| PipelineError::Data(format!("header: {e}")))?
        .clone();
    if headers.len() != PRICE_COLUMNS.len() {
        return Err(PipelineError::Data(format!(
            "expected columns {:?}, got {:?}",
            PRICE_COLUMNS, headers
        )));
    }
    for (h, want) in headers.iter().zip(PRICE_COLUMNS) {
        if h != want {
            return Err(PipelineError::Data(format!(
                "unknown column '{h}' (expected '{want}')"
            )));
        }
    }

    // (ticker -> date -> raw row), rows may have gaps
    let mut raw: BTreeMap<String, BTreeMap<NaiveDate, [Option<f64>; 3]>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2; // header is line 1
        let rec = rec.map_err(|e| PipelineError::Data(format!("row {line}: {e}")))?;
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|e| PipelineError::Data(format!("row {line}: bad date '{}': {e}", &rec[0])))?;
        let ticker = rec[1].to_string();
        if ticker.is_empty() {
            return Err(PipelineError::Data(format!("row {line}: empty ticker")));
        }
        let mut vals = [None; 3];
        for (c, field) in rec.iter().skip(2).enumerate() {
            if field.is_empty() {
                continue;
            }
            let v: f64 = field
                .parse()
                .map_err(|e| PipelineError::Data(format!("row {line}: bad value '{field}': {e}")))?;
            if v <= 0.0 {
                return Err(PipelineError::Data(format!(
                    "row {line}: nonpositive price {v}"
                )));
            }
            vals[c] = Some(v);
        }
        raw.entry(ticker).or_default().insert(date, vals);
    }

    let mut out = BTreeMap::new();
    for (ticker, rows) in raw {
        let mut dates = Vec::new();
        let mut channels = Vec::new();
        let mut last: [Option<f64>; 3] = [None; 3];
        for (date, vals) in rows {
            for c in 0..3 {
                if vals[c].is_some() {
                    last[c] = vals[c];
                }
            }
            // leading rows with any missing channel are dropped
            if last.iter().any(|v| v.is_none()) {
                continue;
            }
            dates.push(date);
            channels.push([last[0].unwrap(), last[1].unwrap(), last[2].unwrap()]);
        }
        if !dates.is_empty() {
            out.insert(
                ticker.clone(),
                AlignedSeries {
                    ticker,
                    dates,
                    channels,
                },
            );
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct EventLine {
    ticker: String,
    date: String,
    text: String,
    #[serde(default)]
    labels: Option<String>,
}

/// Ingest events JSONL, validating each against the loaded series and
/// filling realized prices from the following `n` closes.
pub fn ingest_events(
    path: &Path,
    series: &BTreeMap<String, AlignedSeries>,
    cfg: &QuantConfig,
) -> Result<(Vec<EventRecord>, Vec<Rejection>)> {
    let content = std::fs::read_to_string(path)?;
    let mut events = Vec::new();
    let mut rejections = Vec::new();
    for (i, raw_line) in content.lines().enumerate() {
        let line = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let parsed: EventLine = serde_json::from_str(raw_line)
            .map_err(|e| PipelineError::Data(format!("events line {line}: {e}")))?;
        let date = NaiveDate::parse_from_str(&parsed.date, "%Y-%m-%d")
            .map_err(|e| PipelineError::Data(format!("events line {line}: bad date: {e}")))?;
        let Some(s) = series.get(&parsed.ticker) else {
            rejections.push(Rejection {
                line,
                reason: format!("unknown ticker '{}'", parsed.ticker),
            });
            continue;
        };
        let Some(idx) = s.date_index(date) else {
            rejections.push(Rejection {
                line,
                reason: format!("{} is not a trading day for {}", date, parsed.ticker),
            });
            continue;
        };
        let realized = if idx + cfg.horizon < s.len() {
            Some(
                s.channels[idx + 1..idx + 1 + cfg.horizon]
                    .iter()
                    .map(|c| c[CH_CLOSE])
                    .collect::<Vec<f64>>(),
            )
        } else {
            None
        };
        let gold_labels = match &parsed.labels {
            Some(text) => Some(
                parse_tokens(text, cfg)
                    .map_err(|e| PipelineError::Data(format!("events line {line}: {e}")))?,
            ),
            None => None,
        };
        events.push(EventRecord {
            ticker: parsed.ticker,
            date,
            text: parsed.text,
            gold_labels,
            realized_prices: realized,
        });
    }
    Ok((events, rejections))
}

/// Ticker-wise event split: every ticker's events land wholly in one of
/// train/val/test, deterministically under the seed.
pub fn split_by_ticker(
    events: &[EventRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<EventRecord>, Vec<EventRecord>, Vec<EventRecord>)> {
    let (a, b, c) = ratios;
    if (a + b + c - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(PipelineError::Config(format!(
            "split ratios must be nonnegative and sum to 1, got {ratios:?}"
        )));
    }
    let mut tickers: Vec<&str> = events.iter().map(|e| e.ticker.as_str()).collect();
    tickers.sort_unstable();
    tickers.dedup();
    if tickers.len() < 3 {
        return Err(PipelineError::Data(format!(
            "need at least 3 tickers to split, got {}",
            tickers.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tickers.shuffle(&mut rng);

    // largest-remainder apportionment over ticker counts
    let n = tickers.len() as f64;
    let targets = [a * n, b * n, c * n];
    let mut counts: [usize; 3] = [0; 3];
    let mut floors_sum = 0;
    for k in 0..3 {
        counts[k] = targets[k].floor() as usize;
        floors_sum += counts[k];
    }
    let mut remainders: Vec<(usize, f64)> = (0..3)
        .map(|k| (k, targets[k] - targets[k].floor()))
        .collect();
    remainders.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    for r in remainders.iter().take(tickers.len() - floors_sum) {
        counts[r.0] += 1;
    }

    let mut assignment: BTreeMap<&str, usize> = BTreeMap::new();
    let mut at = 0;
    for (k, &cnt) in counts.iter().enumerate() {
        for t in &tickers[at..at + cnt] {
            assignment.insert(t, k);
        }
        at += cnt;
    }

    let mut splits: [Vec<EventRecord>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for e in events {
        splits[assignment[e.ticker.as_str()]].push(e.clone());
    }
    let [train, val, test] = splits;
    Ok((train, val, test))
}

/// Source/target training window over one ticker's aligned series.
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// [lookback][channel]
    pub source: Vec<[f64; 3]>,
    /// stock closes over the prediction horizon
    pub target: Vec<f64>,
    pub ticker: String,
    /// date of the last source step
    pub end_date: NaiveDate,
}

/// Contiguous, non-wrapping windows. Returns an empty list (with a
/// warning on stderr) when the series is too short.
pub fn make_windows(
    series: &AlignedSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Vec<WindowSample> {
    assert!(stride >= 1, "stride must be >= 1");
    let t = series.len();
    if t < lookback + horizon {
        eprintln!(
            "warning: series for {} has {t} points, need {} for one window",
            series.ticker,
            lookback + horizon
        );
        return Vec::new();
    }
    let count = (t - lookback - horizon) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        out.push(WindowSample {
            source: series.channels[start..start + lookback].to_vec(),
            target: series.channels[start + lookback..start + lookback + horizon]
                .iter()
                .map(|c| c[CH_CLOSE])
                .collect(),
            ticker: series.ticker.clone(),
            end_date: series.dates[start + lookback - 1],
        });
    }
    out
}

/// Post-event amplification profile: ramp to `peak_pct` over `rise` days,
/// decay to half the peak over `decay` days, hold thereafter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventProfile {
    /// signed peak percent change, e.g. +6.0 or -4.0
    pub peak_pct: f64,
    pub rise_days: usize,
    pub decay_days: usize,
}

impl EventProfile {
    const RETENTION: f64 = 0.5;

    pub fn validate(&self) -> Result<()> {
        if self.rise_days == 0 || self.decay_days == 0 {
            return Err(PipelineError::Config(format!(
                "profile rise/decay days must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Multiplicative factor applied `k` days (1-based) after the event.
    pub fn factor(&self, k: usize) -> f64 {
        let peak = self.peak_pct / 100.0;
        let frac = if k == 0 {
            0.0
        } else if k <= self.rise_days {
            k as f64 / self.rise_days as f64
        } else if k <= self.rise_days + self.decay_days {
            let d = (k - self.rise_days) as f64 / self.decay_days as f64;
            1.0 - (1.0 - Self::RETENTION) * d
        } else {
            Self::RETENTION
        };
        1.0 + peak * frac
    }
}

/// Synthetic scenario: geometric random walks with deterministic
/// event-induced amplification profiles and self-labeling events.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub tickers: usize,
    pub days: usize,
    /// per-day log drift of the stock walks
    pub drift: f64,
    /// per-day volatility of the stock walks (geometric median)
    pub volatility: f64,
    /// ratio between the largest and smallest per-ticker volatility
    /// multiplier; 1.0 makes every ticker equally volatile
    pub vol_spread: f64,
    pub events: usize,
    pub profiles: Vec<EventProfile>,
    pub lookback: usize,
    pub quant: QuantConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            tickers: 20,
            days: 260,
            drift: 0.0,
            volatility: 0.004,
            vol_spread: 2.0,
            events: 100,
            profiles: vec![
                EventProfile { peak_pct: 6.0, rise_days: 3, decay_days: 4 },
                EventProfile { peak_pct: 3.0, rise_days: 2, decay_days: 5 },
                EventProfile { peak_pct: 1.5, rise_days: 4, decay_days: 3 },
                EventProfile { peak_pct: -6.0, rise_days: 2, decay_days: 4 },
                EventProfile { peak_pct: -3.5, rise_days: 3, decay_days: 3 },
                EventProfile { peak_pct: -1.5, rise_days: 4, decay_days: 4 },
            ],
            lookback: 30,
            quant: QuantConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        for p in &self.profiles {
            p.validate()?;
        }
        if self.tickers == 0 || self.days == 0 {
            return Err(PipelineError::Config("tickers and days must be positive".into()));
        }
        if self.vol_spread < 1.0 {
            return Err(PipelineError::Config(format!(
                "vol_spread must be >= 1, got {}",
                self.vol_spread
            )));
        }
        if self.profiles.is_empty() && self.events > 0 {
            return Err(PipelineError::Config("events requested but no profiles given".into()));
        }
        Ok(())
    }

    /// Parse the key-value scenario file. Unknown keys are an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("scenario line {}: expected key=value", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| PipelineError::Config(format!("scenario line {}: {e}", i + 1));
            match key {
                "tickers" => cfg.tickers = value.parse().map_err(|e| bad(format!("{e}")))?,
                "days" => cfg.days = value.parse().map_err(|e| bad(format!("{e}")))?,
                "drift" => cfg.drift = value.parse().map_err(|e| bad(format!("{e}")))?,
                "volatility" => cfg.volatility = value.parse().map_err(|e| bad(format!("{e}")))?,
                "vol_spread" => cfg.vol_spread = value.parse().map_err(|e| bad(format!("{e}")))?,
                "events" => cfg.events = value.parse().map_err(|e| bad(format!("{e}")))?,
                "lookback" => cfg.lookback = value.parse().map_err(|e| bad(format!("{e}")))?,
                "n" => cfg.quant.horizon = value.parse().map_err(|e| bad(format!("{e}")))?,
                "bucket_pct" => cfg.quant.bucket_pct = value.parse().map_err(|e| bad(format!("{e}")))?,
                "magnitude_cap" => cfg.quant.magnitude_cap = value.parse().map_err(|e| bad(format!("{e}")))?,
                "profiles" => {
                    cfg.profiles = value
                        .split(',')
                        .map(|p| {
                            let parts: Vec<&str> = p.trim().split('/').collect();
                            if parts.len() != 3 {
                                return Err(bad(format!("profile '{p}' must be peak/rise/decay")));
                            }
                            Ok(EventProfile {
                                peak_pct: parts[0].parse().map_err(|e| bad(format!("{e}")))?,
                                rise_days: parts[1].parse().map_err(|e| bad(format!("{e}")))?,
                                decay_days: parts[2].parse().map_err(|e| bad(format!("{e}")))?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                }
                other => {
                    return Err(PipelineError::Config(format!(
                        "scenario line {}: unknown key '{other}'",
                        i + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn profile_text(ticker: &str, profile: &EventProfile) -> String {
    let direction = if profile.peak_pct >= 0.0 { "up" } else { "down" };
    let strength = match profile.peak_pct.abs() {
        x if x >= 5.0 => "large",
        x if x >= 2.5 => "medium",
        _ => "small",
    };
    let mut s = String::new();
    write!(
        s,
        "{ticker} reports results direction_{direction} strength_{strength} rise_{} decay_{}",
        profile.rise_days, profile.decay_days
    )
    .unwrap();
    s
}

/// Generate the synthetic market: per-ticker geometric walks correlated
/// with a shared market factor, event-induced amplification profiles, and
/// events whose gold labels are encoded from their own realized prices.
pub fn synth_market(
    cfg: &ScenarioConfig,
    seed: u64,
) -> Result<(BTreeMap<String, AlignedSeries>, Vec<EventRecord>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let start = NaiveDate::from_ymd_opt(2020, 1, 2).unwrap();
    let dates: Vec<NaiveDate> = (0..cfg.days)
        .map(|d| start.checked_add_days(Days::new(d as u64)).unwrap())
        .collect();

    // shared market factor drives the NASDAQ channel and part of each stock
    let market: Vec<f64> = (0..cfg.days).map(|_| normal.sample(&mut rng)).collect();
    let usd_shocks: Vec<f64> = (0..cfg.days).map(|_| normal.sample(&mut rng)).collect();

    let n = cfg.quant.horizon;
    let ticker_names: Vec<String> = (0..cfg.tickers).map(|i| format!("T{i:03}")).collect();

    // base walks without events
    let mut base: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for name in &ticker_names {
        let start_price = rng.random_range(20.0..200.0);
        // log-uniform per-ticker volatility inside the configured spread
        let vol = cfg.volatility * cfg.vol_spread.powf(rng.random_range(-0.5..0.5));
        let corr: f64 = 0.4;
        let mut prices = Vec::with_capacity(cfg.days);
        let mut p = start_price;
        for t in 0..cfg.days {
            if t > 0 {
                let own = normal.sample(&mut rng);
                let shock = corr * market[t] + (1.0 - corr * corr).sqrt() * own;
                p *= (cfg.drift + vol * shock).exp();
            }
            prices.push(p);
        }
        base.insert(name.clone(), prices);
    }

    // event placement: per ticker, non-overlapping horizons
    let mut events_meta: Vec<(String, usize, EventProfile)> = Vec::new();
    if cfg.events > 0 {
        let lo = cfg.lookback.max(1);
        let hi = cfg.days.checked_sub(n + 1).ok_or_else(|| {
            PipelineError::Config(format!("scenario too short: {} days, horizon {n}", cfg.days))
        })?;
        if hi <= lo {
            return Err(PipelineError::Config(format!(
                "scenario too short for events: days {} lookback {} horizon {n}",
                cfg.days, cfg.lookback
            )));
        }
        let mut used: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut attempts = 0;
        while events_meta.len() < cfg.events && attempts < cfg.events * 200 {
            attempts += 1;
            let ticker = ticker_names[rng.random_range(0..ticker_names.len())].clone();
            let idx = rng.random_range(lo..hi);
            let slots = used.entry(ticker.clone()).or_default();
            if slots.iter().any(|&s| idx.abs_diff(s) <= n) {
                continue;
            }
            slots.push(idx);
            let profile = cfg.profiles[rng.random_range(0..cfg.profiles.len())];
            events_meta.push((ticker, idx, profile));
        }
        if events_meta.len() < cfg.events {
            return Err(PipelineError::Config(format!(
                "could not place {} non-overlapping events (placed {})",
                cfg.events,
                events_meta.len()
            )));
        }
    }
    events_meta.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));

    // apply event profiles multiplicatively
    let mut final_prices = base.clone();
    for (ticker, idx, profile) in &events_meta {
        let prices = final_prices.get_mut(ticker).unwrap();
        for t in idx + 1..cfg.days {
            prices[t] *= profile.factor(t - idx);
        }
    }

    // assemble series with correlated index channels
    let mut series = BTreeMap::new();
    for name in &ticker_names {
        let prices = &final_prices[name];
        let mut nasdaq = Vec::with_capacity(cfg.days);
        let mut usd = Vec::with_capacity(cfg.days);
        let (mut nq, mut ux) = (10_000.0, 100.0);
        for t in 0..cfg.days {
            if t > 0 {
                nq *= (cfg.volatility * 0.8 * market[t]).exp();
                ux *= (cfg.volatility * 0.3 * usd_shocks[t]).exp();
            }
            nasdaq.push(nq);
            usd.push(ux);
        }
        let channels: Vec<[f64; 3]> = (0..cfg.days).map(|t| [prices[t], nasdaq[t], usd[t]]).collect();
        series.insert(
            name.clone(),
            AlignedSeries {
                ticker: name.clone(),
                dates: dates.clone(),
                channels,
            },
        );
    }

    // events carry realized prices and self-consistent gold labels
    let mut events = Vec::with_capacity(events_meta.len());
    for (ticker, idx, profile) in &events_meta {
        let s = &series[ticker];
        let realized: Vec<f64> = (1..=n).map(|k| s.channels[idx + k][CH_CLOSE]).collect();
        let gold = encode_labels(&realized, &cfg.quant)?;
        events.push(EventRecord {
            ticker: ticker.clone(),
            date: dates[*idx],
            text: profile_text(ticker, profile),
            gold_labels: Some(gold),
            realized_prices: Some(realized),
        });
    }
    Ok((series, events))
}

/// Write series back out in the prices CSV schema.
pub fn write_prices_csv(series: &BTreeMap<String, AlignedSeries>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))?;
    w.write_record(PRICE_COLUMNS)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    for s in series.values() {
        for (date, ch) in s.dates.iter().zip(&s.channels) {
            w.write_record([
                date.format("%Y-%m-%d").to_string(),
                s.ticker.clone(),
                format!("{}", ch[CH_CLOSE]),
                format!("{}", ch[CH_NASDAQ]),
                format!("{}", ch[CH_USD]),
            ])
            .map_err(|e| PipelineError::Data(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Write events in the JSONL schema (labels rendered as window tokens).
pub fn write_events_jsonl(events: &[EventRecord], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in events {
        let labels = e.gold_labels.as_ref().map(crate::labels::render_tokens);
        let obj = serde_json::json!({
            "ticker": e.ticker,
            "date": e.date.format("%Y-%m-%d").to_string(),
            "text": e.text,
            "labels": labels,
        });
        writeln!(f, "{obj}")?;
    }
    Ok(())
}
