//! Target-duration estimation and conversion to a token count.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Codec frame rate in tokens per second.
pub const DEFAULT_FRAME_RATE: u32 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateSource {
    ReferenceRatio,
    DefaultRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationEstimate {
    pub seconds: f64,
    pub source: EstimateSource,
}

/// Seconds per counting unit, keyed by upper-case language tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    rates: BTreeMap<String, f64>,
}

impl Default for RateTable {
    fn default() -> Self {
        let rates = [("EN", 0.085), ("JA", 0.10), ("ZH", 0.27)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        RateTable { rates }
    }
}

impl RateTable {
    pub fn new(rates: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let rates: BTreeMap<String, f64> = rates.into_iter().map(|(k, v)| (k.to_uppercase(), v)).collect();
        if let Some((tag, rate)) = rates.iter().find(|(_, &r)| !(r > 0.0 && r.is_finite())) {
            return Err(Error::invalid(format!("rate for {tag} must be positive, got {rate}")));
        }
        Ok(RateTable { rates })
    }

    pub fn rate(&self, language: &str) -> Result<f64> {
        self.rates
            .get(&language.to_uppercase())
            .copied()
            .ok_or_else(|| Error::UnknownLanguage {
                tag: language.to_string(),
                known: self.languages(),
            })
    }

    pub fn languages(&self) -> Vec<String> {
        self.rates.keys().cloned().collect()
    }
}

/// Counts duration units (phonemes, morae, characters, symbols) in a text.
pub trait UnitCounter<T: ?Sized> {
    fn count_units(&self, text: &T) -> usize;
}

/// One unit per symbol of a synthetic text.
#[derive(Debug, Clone, Copy, Default)]
pub struct SymbolCounter;

impl UnitCounter<[usize]> for SymbolCounter {
    fn count_units(&self, text: &[usize]) -> usize {
        text.len()
    }
}

/// One unit per non-whitespace Unicode scalar.
#[derive(Debug, Clone, Copy, Default)]
pub struct CharCounter;

impl UnitCounter<str> for CharCounter {
    fn count_units(&self, text: &str) -> usize {
        text.chars().filter(|c| !c.is_whitespace()).count()
    }
}

/// Scales the reference's per-unit duration to the target's unit count.
pub fn estimate_from_reference(ref_duration_s: f64, n_ref: usize, n_tgt: usize) -> Result<DurationEstimate> {
    if !(ref_duration_s > 0.0 && ref_duration_s.is_finite()) {
        return Err(Error::invalid(format!(
            "reference duration must be positive, got {ref_duration_s}"
        )));
    }
    if n_ref == 0 || n_tgt == 0 {
        return Err(Error::invalid("unit counts must be at least 1"));
    }
    Ok(DurationEstimate {
        seconds: ref_duration_s / n_ref as f64 * n_tgt as f64,
        source: EstimateSource::ReferenceRatio,
    })
}

pub fn estimate_from_rate(n_tgt: usize, language: &str, rates: &RateTable) -> Result<DurationEstimate> {
    let rate = rates.rate(language)?;
    if n_tgt == 0 {
        return Err(Error::invalid("target unit count must be at least 1"));
    }
    Ok(DurationEstimate {
        seconds: rate * n_tgt as f64,
        source: EstimateSource::DefaultRate,
    })
}

/// `floor(seconds * frame_rate)`, never below one token.
pub fn target_token_count(estimate: &DurationEstimate, frame_rate: u32) -> usize {
    let frames = (estimate.seconds * frame_rate as f64).floor();
    if frames.is_finite() && frames >= 1.0 {
        frames as usize
    } else {
        1
    }
}
