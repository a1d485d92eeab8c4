//! Metrics over label sequences and forecast bundles, and deterministic
//! report emission (JSON plus plot-ready CSV).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::labels::{ChangeLabel, Direction};
use crate::times::ForecastBundle;
use crate::{PipelineError, Result};

/// Gold-magnitude bucket boundaries: 0..=15 Low, 16..=31 Medium, 32+ Large.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MagBucket {
    Low,
    Medium,
    Large,
}

impl MagBucket {
    pub fn of(magnitude: u32) -> Self {
        match magnitude {
            0..=15 => Self::Low,
            16..=31 => Self::Medium,
            _ => Self::Large,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Low => "Low",
            Self::Medium => "Medium",
            Self::Large => "Large",
        }
    }
}

/// Restricts scoring to positions whose GOLD label matches the filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoldFilter {
    Direction(Direction),
    Bucket(MagBucket),
}

impl GoldFilter {
    fn selects(&self, gold: &ChangeLabel) -> bool {
        match self {
            Self::Direction(d) => gold.direction == *d,
            Self::Bucket(b) => MagBucket::of(gold.magnitude) == *b,
        }
    }
}

/// A score over some subset of positions; `score` is None when the subset
/// is empty (reported as "NA").
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub count: usize,
    pub score: Option<f64>,
}

fn check_aligned(pred: &[ChangeLabel], gold: &[ChangeLabel]) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(PipelineError::Config(format!(
            "pred has {} labels, gold has {}",
            pred.len(),
            gold.len()
        )));
    }
    Ok(())
}

/// Micro-averaged F1 on the direction task. With exactly one label per
/// position this equals pooled accuracy; the name mirrors the reporting
/// convention of the comparison tables.
pub fn micro_f1(
    pred: &[ChangeLabel],
    gold: &[ChangeLabel],
    restrict: Option<GoldFilter>,
) -> Result<MetricCell> {
    check_aligned(pred, gold)?;
    let mut count = 0usize;
    let mut hits = 0usize;
    for (p, g) in pred.iter().zip(gold) {
        if restrict.is_none_or(|f| f.selects(g)) {
            count += 1;
            if p.direction == g.direction {
                hits += 1;
            }
        }
    }
    Ok(MetricCell {
        count,
        score: (count > 0).then(|| hits as f64 / count as f64),
    })
}

/// Windowed value matching: a position counts as correct iff the directions
/// agree AND the magnitudes differ by at most `w` buckets. A "window of
/// length 5" means the range v-5..v+5.
pub fn value_match_f1(pred: &[ChangeLabel], gold: &[ChangeLabel], w: u32) -> Result<MetricCell> {
    check_aligned(pred, gold)?;
    let count = pred.len();
    let hits = pred
        .iter()
        .zip(gold)
        .filter(|(p, g)| {
            p.direction == g.direction && p.magnitude.abs_diff(g.magnitude) <= w
        })
        .count();
    Ok(MetricCell {
        count,
        score: (count > 0).then(|| hits as f64 / count as f64),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriceSeries {
    Baseline,
    Updated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceMetrics {
    pub count: usize,
    pub rmse: f64,
    pub mae: f64,
}

/// Pooled RMSE/MAE of the chosen series against realized prices, in the
/// bundles' (normalized) units.
pub fn price_metrics(bundles: &[ForecastBundle], which: PriceSeries) -> Result<PriceMetrics> {
    if bundles.is_empty() {
        return Err(PipelineError::Data("no bundles to evaluate".into()));
    }
    let mut n = 0usize;
    let mut sq = 0.0;
    let mut abs = 0.0;
    for b in bundles {
        let xs = match which {
            PriceSeries::Baseline => &b.baseline,
            PriceSeries::Updated => &b.updated,
        };
        for (x, t) in xs.iter().zip(&b.truth) {
            let e = x - t;
            sq += e * e;
            abs += e.abs();
            n += 1;
        }
    }
    Ok(PriceMetrics {
        count: n,
        rmse: (sq / n as f64).sqrt(),
        mae: abs / n as f64,
    })
}

/// One row of the flat report: section x setting x metric x filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub section: String,
    pub setting: String,
    pub metric: String,
    pub filter: String,
    pub count: usize,
    pub value: Option<f64>,
}

/// Full label-quality breakdown for one provider setting.
pub fn label_eval_rows(
    setting: &str,
    pred: &[ChangeLabel],
    gold: &[ChangeLabel],
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    let mut push = |metric: &str, filter: &str, cell: MetricCell| {
        rows.push(ReportRow {
            section: "labels".into(),
            setting: setting.into(),
            metric: metric.into(),
            filter: filter.into(),
            count: cell.count,
            value: cell.score,
        });
    };
    push("micro_f1", "all", micro_f1(pred, gold, None)?);
    for d in [Direction::Inc, Direction::Dec] {
        let name = format!("dir={}", if d == Direction::Inc { "INC" } else { "DEC" });
        push("micro_f1", &name, micro_f1(pred, gold, Some(GoldFilter::Direction(d)))?);
    }
    for b in [MagBucket::Low, MagBucket::Medium, MagBucket::Large] {
        let name = format!("bucket={}", b.name());
        push("micro_f1", &name, micro_f1(pred, gold, Some(GoldFilter::Bucket(b)))?);
    }
    for w in [5, 10, 15] {
        push(&format!("value_f1_w{w}"), "all", value_match_f1(pred, gold, w)?);
    }
    Ok(rows)
}

/// RMSE/MAE rows for one model setting over one bundle group.
pub fn price_eval_rows(
    setting: &str,
    filter: &str,
    bundles: &[ForecastBundle],
    which: PriceSeries,
) -> Vec<ReportRow> {
    let mk = |metric: &str, count: usize, value: Option<f64>| ReportRow {
        section: "prices".into(),
        setting: setting.into(),
        metric: metric.into(),
        filter: filter.into(),
        count,
        value,
    };
    match price_metrics(bundles, which) {
        Ok(m) => vec![
            mk("rmse", m.count, Some(m.rmse)),
            mk("mae", m.count, Some(m.mae)),
        ],
        Err(_) => vec![mk("rmse", 0, None), mk("mae", 0, None)],
    }
}

/// Write `report.json` and `report.csv` with stable row and column order;
/// identical inputs produce byte-identical files.
pub fn emit_report(rows: &[ReportRow], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_vec_pretty(rows).expect("report serializes");
    std::fs::write(dir.join("report.json"), json)?;
    let mut csv = String::from("section,setting,metric,filter,count,value\n");
    for r in rows {
        let value = match r.value {
            Some(v) => format!("{v}"),
            None => "NA".into(),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.section, r.setting, r.metric, r.filter, r.count, value
        ));
    }
    std::fs::write(dir.join("report.csv"), csv)?;
    Ok(())
}
