//! The reverse-decoding variant: no stock states — expanded labels are
//! decoded back into approximate fractional changes, and that sequence
//! feeds the same linear update as the amplifier head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use ndcore::{ParamStore, Session, TensorId};

use crate::labels::{decode_label, ChangeLabel, QuantConfig};
use crate::times::{
    infer_amplifier, load_head_meta, save_head_meta, train_amplifier, AmplifierModel, EventSample,
    ForecastBundle, HeadTrainConfig,
};
use crate::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelConfig {
    pub alpha: f64,
    pub n: usize,
    pub quant: QuantConfig,
}

impl Default for TimelConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            n: 9,
            quant: QuantConfig::default(),
        }
    }
}

pub struct TimelHead {
    pub cfg: TimelConfig,
}

impl TimelHead {
    pub fn init<R: Rng>(cfg: TimelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if cfg.alpha <= 0.0 {
            return Err(PipelineError::Config(format!("alpha must be positive, got {}", cfg.alpha)));
        }
        cfg.quant.validate()?;
        store.init_uniform("tl.wu", &[cfg.n, 2 * cfg.n], rng)?;
        store.init_zeros("tl.wb", &[cfg.n])?;
        Ok(Self { cfg })
    }
}

/// Bucket-midpoint decode of each expanded label: a pure function of the
/// labels with nothing learned upstream of the update matrix.
pub fn labels_to_amplification(labels: &[ChangeLabel], cfg: &QuantConfig) -> Vec<f64> {
    labels.iter().map(|l| decode_label(l, cfg)).collect()
}

impl AmplifierModel for TimelHead {
    fn n(&self) -> usize {
        self.cfg.n
    }

    fn alpha(&self) -> f64 {
        self.cfg.alpha
    }

    fn update_names(&self) -> (&'static str, &'static str) {
        ("tl.wu", "tl.wb")
    }

    fn amplification_of(&self, s: &mut Session, batch: &[&EventSample]) -> Result<TensorId> {
        let n = self.cfg.n;
        let mut data = Vec::with_capacity(batch.len() * n);
        for e in batch {
            if e.labels.len() != n {
                return Err(PipelineError::Label(format!(
                    "expected {} expanded labels, got {}",
                    n,
                    e.labels.len()
                )));
            }
            data.extend(labels_to_amplification(&e.labels, &self.cfg.quant));
        }
        Ok(s.input(&[batch.len(), n], data)?)
    }
}

pub fn train_timel(
    head: &TimelHead,
    store: &mut ParamStore,
    samples: &[EventSample],
    cfg: &HeadTrainConfig,
) -> Result<Vec<f64>> {
    train_amplifier(head, store, samples, None, cfg).map(|o| o.curve)
}

pub fn infer_timel(head: &TimelHead, store: &ParamStore, sample: &EventSample) -> Result<ForecastBundle> {
    infer_amplifier(head, store, sample)
}

pub fn save_timel_head(head: &TimelHead, store: &ParamStore, path: &std::path::Path) -> Result<()> {
    ndcore::save_params(store, path)?;
    save_head_meta(path, "timel", serde_json::to_value(head.cfg).expect("json"))
}

pub fn load_timel_head(path: &std::path::Path) -> Result<(TimelHead, ParamStore)> {
    let store = ndcore::load_params(path)?;
    let cfg: TimelConfig = serde_json::from_value(load_head_meta(path, "timel")?)
        .map_err(|e| PipelineError::Config(format!("bad head metadata: {e}")))?;
    Ok((TimelHead { cfg }, store))
}
