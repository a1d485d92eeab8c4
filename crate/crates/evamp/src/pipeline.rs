//! Orchestration shared by the command-line front end and the integration
//! tests: training one forecaster per ticker, preparing event samples
//! against the frozen bank, and running head experiments end to end.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ndcore::ParamStore;

use crate::forecasters::{
    predict_event_baseline, train_forecaster, BaselinePrediction, Forecaster, ForecasterConfig,
    ForecasterKind, TrainConfig,
};
use crate::indicators::LabelProvider;
use crate::labels::QuantConfig;
use crate::market::{make_windows, AlignedSeries, EventRecord};
use crate::sentievent::{save_senti_head, SentiConfig, SentiHead};
use crate::timel::{save_timel_head, TimelConfig, TimelHead};
use crate::times::{
    fnv1a64, prepare_event_samples_with, save_times_head, AmplifierModel, EventSample, HeadConfig,
    HeadTrainConfig, TimesHead,
};
use crate::{PipelineError, Result};

/// One trained forecaster per ticker, each with its own parameter store.
/// `curves` holds per-ticker training loss by epoch; it is populated by
/// training and left empty when a bank is loaded from disk.
pub struct ForecasterBank {
    pub models: BTreeMap<String, (Forecaster, ParamStore)>,
    pub curves: BTreeMap<String, Vec<f64>>,
}

impl ForecasterBank {
    pub fn baseline_of(
        &self,
        series: &BTreeMap<String, AlignedSeries>,
        ev: &EventRecord,
        n: usize,
    ) -> Result<BaselinePrediction> {
        let (model, store) = self
            .models
            .get(&ev.ticker)
            .ok_or_else(|| PipelineError::Data(format!("no trained model for {}", ev.ticker)))?;
        let sr = series
            .get(&ev.ticker)
            .ok_or_else(|| PipelineError::Data(format!("no price series for {}", ev.ticker)))?;
        predict_event_baseline(model, store, sr, ev.date, n)
    }

    /// One `<ticker>.fc` file per model.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (ticker, (_, store)) in &self.models {
            ndcore::save_params(store, &dir.join(format!("{ticker}.fc")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut models = BTreeMap::new();
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "fc"))
            .collect();
        paths.sort();
        for path in paths {
            let ticker = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| PipelineError::Data(format!("bad model filename {}", path.display())))?
                .to_string();
            let store = ndcore::load_params(&path)?;
            let model = Forecaster::attach(&store)?;
            models.insert(ticker, (model, store));
        }
        if models.is_empty() {
            return Err(PipelineError::Data(format!("no forecaster files in {}", dir.display())));
        }
        Ok(Self { models, curves: BTreeMap::new() })
    }
}

/// Train one forecaster per ticker on all its sliding windows. Each
/// ticker's run is seeded from the base seed and the ticker name, so the
/// bank is independent of ticker iteration order.
pub fn train_forecaster_bank(
    kind: ForecasterKind,
    fcfg: ForecasterConfig,
    series: &BTreeMap<String, AlignedSeries>,
    tcfg: &TrainConfig,
) -> Result<ForecasterBank> {
    let mut models = BTreeMap::new();
    let mut curves = BTreeMap::new();
    for (ticker, sr) in series {
        let windows = make_windows(sr, fcfg.lookback, fcfg.horizon, 1);
        if windows.is_empty() {
            return Err(PipelineError::Data(format!(
                "series for {ticker} too short to train on"
            )));
        }
        let ticker_seed = tcfg.seed ^ fnv1a64(ticker.as_bytes());
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(ticker_seed);
        let model = Forecaster::init(kind, fcfg, &mut store, &mut rng)?;
        let curve =
            train_forecaster(&model, &mut store, &windows, &TrainConfig { seed: ticker_seed, ..*tcfg })?;
        models.insert(ticker.clone(), (model, store));
        curves.insert(ticker.clone(), curve);
    }
    Ok(ForecasterBank { models, curves })
}

/// Prepare event samples against the frozen bank.
pub fn prepare_samples(
    bank: &ForecasterBank,
    series: &BTreeMap<String, AlignedSeries>,
    events: &[EventRecord],
    provider: Option<&LabelProvider>,
    qcfg: &QuantConfig,
) -> Result<Vec<EventSample>> {
    prepare_event_samples_with(
        |ev| bank.baseline_of(series, ev, qcfg.horizon),
        events,
        provider,
        qcfg,
    )
}

/// Train/validation/test partition of the event list.
pub struct EventSplit {
    pub train: Vec<EventRecord>,
    pub val: Vec<EventRecord>,
    pub test: Vec<EventRecord>,
}

/// Shuffle events with a seed-derived generator and carve off 25% for
/// test, then 25% of the remainder for validation. Event-level (rather
/// than ticker-level) splitting keeps every stock embedding in training.
pub fn split_events(events: &[EventRecord], seed: u64) -> EventSplit {
    use rand::seq::SliceRandom;
    let mut ev = events.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    ev.shuffle(&mut rng);
    let test = ev.split_off((ev.len() as f64 * 0.75).round() as usize);
    let val = ev.split_off((ev.len() as f64 * 0.75).round() as usize);
    EventSplit { train: ev, val, test }
}

/// Which amplifier head an experiment uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Times,
    Timel,
    Sentievent,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "times" => Ok(Self::Times),
            "timel" => Ok(Self::Timel),
            "sentievent" => Ok(Self::Sentievent),
            other => Err(PipelineError::Config(format!(
                "unknown head '{other}' (expected times, timel, or sentievent)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Times => "times",
            Self::Timel => "timel",
            Self::Sentievent => "sentievent",
        }
    }

    /// Training settings that were tuned per head on the standard
    /// scenario: the stateful head prefers a smaller step with more
    /// epochs, the decode-only head a larger one, the text head the
    /// smallest.
    pub fn default_train_cfg(&self, seed: u64) -> HeadTrainConfig {
        match self {
            Self::Times => HeadTrainConfig { lr: 3e-3, epochs: 300, batch: 16, seed },
            Self::Timel => HeadTrainConfig { lr: 1e-2, epochs: 200, batch: 16, seed },
            Self::Sentievent => HeadTrainConfig { lr: 1e-3, epochs: 120, batch: 16, seed },
        }
    }
}

/// A head of any kind together with the dispatch needed to train, run,
/// and persist it uniformly.
pub enum AnyHead {
    Times(TimesHead),
    Timel(TimelHead),
    Sentievent(SentiHead),
}

impl AnyHead {
    pub fn init<R: rand::Rng>(
        kind: HeadKind,
        tickers: &[String],
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match kind {
            HeadKind::Times => Self::Times(TimesHead::init(HeadConfig::default(), tickers, store, rng)?),
            HeadKind::Timel => Self::Timel(TimelHead::init(TimelConfig::default(), store, rng)?),
            HeadKind::Sentievent => {
                Self::Sentievent(SentiHead::init(SentiConfig::default(), tickers, store, rng)?)
            }
        })
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Self::Times(_) => HeadKind::Times,
            Self::Timel(_) => HeadKind::Timel,
            Self::Sentievent(_) => HeadKind::Sentievent,
        }
    }

    pub fn model(&self) -> &dyn AmplifierModel {
        match self {
            Self::Times(h) => h,
            Self::Timel(h) => h,
            Self::Sentievent(h) => h,
        }
    }

    pub fn save(&self, store: &ParamStore, path: &Path) -> Result<()> {
        match self {
            Self::Times(h) => save_times_head(h, store, path),
            Self::Timel(h) => save_timel_head(h, store, path),
            Self::Sentievent(h) => save_senti_head(h, store, path),
        }
    }

    /// Load a head of whichever kind the metadata sidecar declares.
    pub fn load(path: &Path) -> Result<(Self, ParamStore)> {
        let kind = crate::times::peek_head_kind(path)?;
        match HeadKind::parse(&kind)? {
            HeadKind::Times => {
                let (h, s) = crate::times::load_times_head(path)?;
                Ok((Self::Times(h), s))
            }
            HeadKind::Timel => {
                let (h, s) = crate::timel::load_timel_head(path)?;
                Ok((Self::Timel(h), s))
            }
            HeadKind::Sentievent => {
                let (h, s) = crate::sentievent::load_senti_head(path)?;
                Ok((Self::Sentievent(h), s))
            }
        }
    }
}
