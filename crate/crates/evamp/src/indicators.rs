//! Price-change label providers. The pipeline treats the label source as
//! pluggable: a gold oracle, a file of externally produced labels, or the
//! oracle corrupted with calibrated noise to imitate an imperfect text model.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::labels::{parse_tokens, ChangeLabel, Direction, LabelSequence, QuantConfig};
use crate::market::EventRecord;
use crate::{PipelineError, Result};

/// Noise preset imitating the held-out accuracy of a fine-tuned text model:
/// direction flips at the rate matching its direction score, magnitude
/// jitter sized so value-match-within-5 lands near its value score.
pub const T5_BASE_LIKE_FLIP: f64 = 0.35;
pub const T5_BASE_LIKE_SIGMA: f64 = 3.73;

pub enum LabelProvider {
    /// Gold labels carried on the event record.
    Oracle,
    /// Labels read from a predictions file keyed by (ticker, date).
    File(HashMap<(String, NaiveDate), LabelSequence>),
    /// Gold labels corrupted per event: each window label's direction flips
    /// with probability `flip` and its magnitude gets rounded gaussian
    /// jitter of width `sigma`. Deterministic per (event, seed).
    NoisyOracle { flip: f64, sigma: f64, seed: u64 },
}

impl LabelProvider {
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        match s {
            "oracle" => Ok(Self::Oracle),
            "noisy-t5-like" => Ok(Self::NoisyOracle {
                flip: T5_BASE_LIKE_FLIP,
                sigma: T5_BASE_LIKE_SIGMA,
                seed,
            }),
            other => {
                if let Some(rest) = other.strip_prefix("noisy:") {
                    let parts: Vec<&str> = rest.split(',').collect();
                    if parts.len() != 2 {
                        return Err(PipelineError::Config(format!(
                            "noisy provider wants 'noisy:<flip>,<sigma>', got '{other}'"
                        )));
                    }
                    let flip: f64 = parts[0]
                        .parse()
                        .map_err(|_| PipelineError::Config(format!("bad flip rate '{}'", parts[0])))?;
                    let sigma: f64 = parts[1]
                        .parse()
                        .map_err(|_| PipelineError::Config(format!("bad sigma '{}'", parts[1])))?;
                    if !(0.0..=1.0).contains(&flip) || sigma < 0.0 {
                        return Err(PipelineError::Config(format!(
                            "flip must be in [0,1] and sigma nonnegative, got {flip}, {sigma}"
                        )));
                    }
                    Ok(Self::NoisyOracle { flip, sigma, seed })
                } else {
                    Err(PipelineError::Config(format!("unknown label provider '{other}'")))
                }
            }
        }
    }

    pub fn labels_for(&self, event: &EventRecord, cfg: &QuantConfig) -> Result<LabelSequence> {
        match self {
            Self::Oracle => gold_of(event).cloned(),
            Self::File(map) => map
                .get(&(event.ticker.clone(), event.date))
                .cloned()
                .ok_or_else(|| {
                    PipelineError::Label(format!(
                        "no labels in file for {} {}",
                        event.ticker, event.date
                    ))
                }),
            Self::NoisyOracle { flip, sigma, seed } => {
                let gold = gold_of(event)?;
                let mut rng = event_rng(*seed, &event.ticker, event.date);
                let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).map_err(|e| {
                    PipelineError::Config(format!("bad noise width {sigma}: {e}"))
                })?;
                let noisy: Vec<ChangeLabel> = gold
                    .window_labels
                    .iter()
                    .map(|l| {
                        let direction = if rng.random_range(0.0..1.0) < *flip {
                            match l.direction {
                                Direction::Inc => Direction::Dec,
                                Direction::Dec => Direction::Inc,
                            }
                        } else {
                            l.direction
                        };
                        let jitter = if *sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                        let mag = (l.magnitude as f64 + jitter)
                            .round()
                            .clamp(0.0, cfg.magnitude_cap as f64) as u32;
                        ChangeLabel::new(direction, mag)
                    })
                    .collect();
                LabelSequence::from_window_labels(noisy, cfg)
            }
        }
    }
}

fn gold_of(event: &EventRecord) -> Result<&LabelSequence> {
    event.gold_labels.as_ref().ok_or_else(|| {
        PipelineError::Label(format!(
            "event {} {} has no gold labels",
            event.ticker, event.date
        ))
    })
}

/// Stable per-event stream: FNV-1a over the seed, ticker and date, used to
/// seed the generator so results never depend on event iteration order.
fn event_rng(seed: u64, ticker: &str, date: NaiveDate) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    eat(&seed.to_le_bytes());
    eat(ticker.as_bytes());
    eat(date.to_string().as_bytes());
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Deserialize)]
struct FileRow {
    ticker: String,
    date: NaiveDate,
    labels: String,
}

/// Load a predictions file: one JSON object per line with `ticker`, `date`
/// and space-separated window label tokens in `labels`.
pub fn load_label_file(path: &Path, cfg: &QuantConfig) -> Result<LabelProvider> {
    let file = std::fs::File::open(path)?;
    let mut map = HashMap::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: FileRow = serde_json::from_str(&line).map_err(|e| {
            PipelineError::Label(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        let seq = parse_tokens(&row.labels, cfg)
            .map_err(|e| PipelineError::Label(format!("{}:{}: {e}", path.display(), i + 1)))?;
        map.insert((row.ticker, row.date), seq);
    }
    Ok(LabelProvider::File(map))
}
