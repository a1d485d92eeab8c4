//! Discrete price-change labels: floor quantization of percent changes,
//! the three-window expansion over the event horizon, and the
//! `(INC|DEC)_<uint>` token grammar.

use serde::{Deserialize, Serialize};

use crate::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Inc,
    Dec,
}

/// A quantized price-change token. Magnitude zero is always rendered as
/// `INC_0`; `DEC_0` and the `Neutral` alias canonicalize to it on input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChangeLabel {
    pub direction: Direction,
    pub magnitude: u32,
}

impl ChangeLabel {
    pub fn new(direction: Direction, magnitude: u32) -> Self {
        if magnitude == 0 {
            Self {
                direction: Direction::Inc,
                magnitude: 0,
            }
        } else {
            Self {
                direction,
                magnitude,
            }
        }
    }

    pub fn inc(magnitude: u32) -> Self {
        Self::new(Direction::Inc, magnitude)
    }

    pub fn dec(magnitude: u32) -> Self {
        Self::new(Direction::Dec, magnitude)
    }

    pub fn render(&self) -> String {
        match self.direction {
            Direction::Inc => format!("INC_{}", self.magnitude),
            Direction::Dec => format!("DEC_{}", self.magnitude),
        }
    }

    pub fn parse(token: &str) -> Result<Self> {
        if token == "Neutral" {
            return Ok(Self::inc(0));
        }
        let (dir, rest) = if let Some(r) = token.strip_prefix("INC_") {
            (Direction::Inc, r)
        } else if let Some(r) = token.strip_prefix("DEC_") {
            (Direction::Dec, r)
        } else {
            return Err(PipelineError::Label(format!("malformed token '{token}'")));
        };
        let magnitude: u32 = rest
            .parse()
            .map_err(|_| PipelineError::Label(format!("malformed token '{token}'")))?;
        Ok(Self::new(dir, magnitude))
    }

    /// Signed bucket index: INC_k -> +k, DEC_k -> -k.
    pub fn signed(&self) -> i64 {
        match self.direction {
            Direction::Inc => self.magnitude as i64,
            Direction::Dec => -(self.magnitude as i64),
        }
    }
}

/// Quantization settings: bucket width `I` in percent, horizon `n`,
/// window count `K`, and the vocabulary magnitude cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bucket_pct: f64,
    pub horizon: usize,
    pub windows: usize,
    pub magnitude_cap: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bucket_pct: 0.3,
            horizon: 9,
            windows: 3,
            magnitude_cap: 100,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bucket_pct <= 0.0 {
            return Err(PipelineError::Config("bucket width I must be > 0".into()));
        }
        if self.horizon < self.windows || self.windows == 0 {
            return Err(PipelineError::Config(format!(
                "horizon {} must be >= window count {} (>0)",
                self.horizon, self.windows
            )));
        }
        if self.magnitude_cap < 1 {
            return Err(PipelineError::Config("magnitude cap must be >= 1".into()));
        }
        Ok(())
    }

    /// Contiguous window sizes partitioning the horizon; the remainder
    /// goes to the last window.
    pub fn window_sizes(&self) -> Vec<usize> {
        let base = self.horizon / self.windows;
        let mut sizes = vec![base; self.windows];
        *sizes.last_mut().unwrap() += self.horizon % self.windows;
        sizes
    }
}

/// K window labels plus their n-step expansion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSequence {
    pub window_labels: Vec<ChangeLabel>,
    pub expanded: Vec<ChangeLabel>,
}

impl LabelSequence {
    pub fn from_window_labels(window_labels: Vec<ChangeLabel>, cfg: &QuantConfig) -> Result<Self> {
        if window_labels.len() != cfg.windows {
            return Err(PipelineError::Label(format!(
                "expected {} window labels, got {}",
                cfg.windows,
                window_labels.len()
            )));
        }
        let mut expanded = Vec::with_capacity(cfg.horizon);
        for (label, size) in window_labels.iter().zip(cfg.window_sizes()) {
            expanded.extend(std::iter::repeat_n(*label, size));
        }
        Ok(Self {
            window_labels,
            expanded,
        })
    }
}

/// Floor-quantized bucket index of the percent change from `p_1` to `p_t`.
pub fn quantize_change(p_t: f64, p_1: f64, cfg: &QuantConfig) -> Result<i64> {
    if p_1 <= 0.0 {
        return Err(PipelineError::Data(format!(
            "reference price must be positive, got {p_1}"
        )));
    }
    let pct = (p_t - p_1) / p_1 * 100.0;
    Ok((pct / cfg.bucket_pct).floor() as i64)
}

/// Bucket index to token, clamping magnitude to the vocabulary cap.
pub fn label_of(c: i64, cfg: &QuantConfig) -> ChangeLabel {
    let mag = c.unsigned_abs();
    let clamped = if mag > cfg.magnitude_cap as u64 {
        log_clamp_warning(c, cfg.magnitude_cap);
        cfg.magnitude_cap
    } else {
        mag as u32
    };
    if c < 0 {
        ChangeLabel::dec(clamped)
    } else {
        ChangeLabel::inc(clamped)
    }
}

fn log_clamp_warning(c: i64, cap: u32) {
    eprintln!("warning: change bucket {c} exceeds magnitude cap {cap}, clamping");
}

/// Encode realized prices `P[1..n]` into the three-window label sequence.
///
/// Each window keeps the step with the largest absolute percent change
/// versus `P[1]` (earliest step on ties) and stamps its label on every
/// step of the window.
pub fn encode_labels(realized: &[f64], cfg: &QuantConfig) -> Result<LabelSequence> {
    cfg.validate()?;
    if realized.len() != cfg.horizon {
        return Err(PipelineError::Label(format!(
            "expected {} realized prices, got {}",
            cfg.horizon,
            realized.len()
        )));
    }
    let p1 = realized[0];
    if p1 <= 0.0 {
        return Err(PipelineError::Data(format!(
            "first realized price must be positive, got {p1}"
        )));
    }
    let mut window_labels = Vec::with_capacity(cfg.windows);
    let mut at = 0;
    for size in cfg.window_sizes() {
        let window = &realized[at..at + size];
        let mut best_idx = 0;
        let mut best_abs = f64::NEG_INFINITY;
        for (i, &p) in window.iter().enumerate() {
            let abs_pct = ((p - p1) / p1 * 100.0).abs();
            if abs_pct > best_abs {
                best_abs = abs_pct;
                best_idx = i;
            }
        }
        let c = quantize_change(window[best_idx], p1, cfg)?;
        window_labels.push(label_of(c, cfg));
        at += size;
    }
    LabelSequence::from_window_labels(window_labels, cfg)
}

/// Approximate fractional change represented by a label: the midpoint of
/// its floor bucket. `INC_0` decodes to exactly zero.
pub fn decode_label(l: &ChangeLabel, cfg: &QuantConfig) -> f64 {
    let c = l.signed();
    if c == 0 {
        return 0.0;
    }
    // bucket [c*I, (c+1)*I) percent, midpoint (c + 0.5) * I
    (c as f64 + 0.5) * cfg.bucket_pct / 100.0
}

/// Parse a space-separated sequence of K window tokens.
pub fn parse_tokens(text: &str, cfg: &QuantConfig) -> Result<LabelSequence> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() != cfg.windows {
        return Err(PipelineError::Label(format!(
            "expected {} tokens, got {}",
            cfg.windows,
            tokens.len()
        )));
    }
    let mut labels = Vec::with_capacity(tokens.len());
    for (pos, tok) in tokens.iter().enumerate() {
        let l = ChangeLabel::parse(tok)
            .map_err(|e| PipelineError::Label(format!("token {pos}: {e}")))?;
        labels.push(l);
    }
    LabelSequence::from_window_labels(labels, cfg)
}

/// Render the K window labels back into token text.
pub fn render_tokens(seq: &LabelSequence) -> String {
    seq.window_labels
        .iter()
        .map(|l| l.render())
        .collect::<Vec<_>>()
        .join(" ")
}
