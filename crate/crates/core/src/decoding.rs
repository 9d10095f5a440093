//! Sampling and duration-conditioned autoregressive generation.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::positional::ProgressSchedule;

/// Slack on the cumulative-probability comparison, so a prefix whose mass
/// equals `top_p` up to rounding still closes the nucleus.
const NUCLEUS_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_k: 30,
            top_p: 0.9,
            temperature: 0.8,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || !(self.top_p > 0.0 && self.top_p <= 1.0) || !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "sampler needs top_k >= 1, top_p in (0, 1], temperature > 0; got {}, {}, {}",
                self.top_k, self.top_p, self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    LengthCap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated tokens, without prompt, separator or eos.
    pub tokens: Vec<usize>,
    pub stop_reason: StopReason,
    pub generated_len: usize,
    pub target_len: usize,
}

/// Tokens that survive temperature, top-k and top-p filtering, with their
/// renormalized probabilities, in descending order. Logits of `-inf` never
/// enter the support.
pub fn sampling_support(logits: &[f64], cfg: &SamplerConfig) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..logits.len()).filter(|&i| logits[i] > f64::NEG_INFINITY).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k);
    let Some(&top) = order.first() else {
        return Vec::new();
    };
    let max = logits[top] / cfg.temperature;
    let weights: Vec<f64> = order.iter().map(|&i| (logits[i] / cfg.temperature - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut support = Vec::with_capacity(order.len());
    let mut cum = 0.0;
    for (&i, w) in order.iter().zip(&weights) {
        let p = w / total;
        support.push((i, p));
        cum += p;
        if cum >= cfg.top_p - NUCLEUS_SLACK {
            break;
        }
    }
    let kept: f64 = support.iter().map(|&(_, p)| p).sum();
    support.iter_mut().for_each(|(_, p)| *p /= kept);
    support
}

/// Draws one token from the filtered distribution.
pub fn filter_and_sample(logits: &[f64], cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<usize> {
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NonFinite("sampling logits".into()));
    }
    let support = sampling_support(logits, cfg);
    if support.is_empty() {
        return Err(Error::Empty("sampling support"));
    }
    let dist = WeightedIndex::new(support.iter().map(|&(_, p)| p))
        .map_err(|e| Error::invalid(format!("sampling weights: {e}")))?;
    Ok(support[dist.sample(rng)].0)
}

/// `ceil(1.2 * target_len)` in integer arithmetic.
pub fn length_cap(target_len: usize) -> usize {
    (6 * target_len).div_ceil(5)
}

/// Generates audio tokens for `text` after a voice prompt, steering length
/// through a decoder progress schedule that spans
/// `bos + prompt + separator + target_len` positions. Positions past the
/// planned end keep extrapolating the same affine progress.
pub fn generate(
    model: &ModelParams<f32>,
    text: &[usize],
    prompt: &[usize],
    target_len: usize,
    cfg: &SamplerConfig,
) -> Result<GenerationResult> {
    cfg.validate()?;
    if target_len == 0 {
        return Err(Error::invalid("target length must be at least 1"));
    }
    let mc = model.config();
    let special = mc.special_tokens();
    let enc = model.encode(text)?;
    let enc_ids = ProgressSchedule::new(enc.len(), mc.progress_scale)?.ids(enc.len());
    let schedule = ProgressSchedule::new(prompt.len() + 2 + target_len, mc.progress_scale)?;
    let cap = length_cap(target_len);

    let mut stream = Vec::with_capacity(prompt.len() + 2 + cap);
    stream.push(special.bos);
    stream.extend_from_slice(prompt);
    stream.push(special.separator);
    let prefix = stream.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dec_ids: Vec<f64> = (0..prefix).map(|i| schedule.extrapolated(i)).collect();
    let mut stop_reason = StopReason::LengthCap;

    while stream.len() - prefix < cap {
        let logits = model.decoder_forward_with_progress(&stream, &enc, &dec_ids, &enc_ids, Some(1))?;
        let mut row: Vec<f64> = logits.row(0).iter().map(|&x| x as f64).collect();
        for banned in [special.pad, special.separator, special.bos] {
            row[banned] = f64::NEG_INFINITY;
        }
        let token = filter_and_sample(&row, cfg, &mut rng)?;
        if token == special.eos {
            stop_reason = StopReason::Eos;
            break;
        }
        dec_ids.push(schedule.extrapolated(stream.len()));
        stream.push(token);
    }
    let tokens = stream.split_off(prefix);
    Ok(GenerationResult {
        generated_len: tokens.len(),
        tokens,
        stop_reason,
        target_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use proptest::prelude::*;

    fn cfg(top_k: usize, top_p: f64, temperature: f64) -> SamplerConfig {
        SamplerConfig {
            top_k,
            top_p,
            temperature,
            seed: 0,
        }
    }

    fn ln(ps: &[f64]) -> Vec<f64> {
        ps.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn top_k_one_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [0.1, 2.0, 1.9, -3.0];
        for _ in 0..50 {
            assert_eq!(filter_and_sample(&logits, &cfg(1, 0.1, 5.0), &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn nucleus_boundary_included() {
        let support = sampling_support(&ln(&[0.5, 0.3, 0.15, 0.05]), &cfg(30, 0.8, 1.0));
        let ids: Vec<usize> = support.iter().map(|&(i, _)| i).collect();
        assert_eq!(ids, [0, 1]);
        assert!((support[0].1 - 0.625).abs() < 1e-12);
        let support = sampling_support(&ln(&[0.5, 0.3, 0.15, 0.05]), &cfg(30, 0.81, 1.0));
        assert_eq!(support.len(), 3);
    }

    #[test]
    fn unfiltered_sampling_matches_softmax() {
        let probs = [0.1, 0.2, 0.3, 0.4];
        let c = cfg(4, 1.0, 1.0);
        let support = sampling_support(&ln(&probs), &c);
        for (i, p) in support {
            assert!((p - probs[i]).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 4];
        let n = 40_000;
        for _ in 0..n {
            counts[filter_and_sample(&ln(&probs), &c, &mut rng).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            // Four binomial standard deviations at n = 40000.
            assert!((*c as f64 / n as f64 - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt());
        }
    }

    #[test]
    fn cold_temperature_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = [1.0, 1.01, 0.5];
        for _ in 0..200 {
            assert_eq!(filter_and_sample(&logits, &cfg(3, 1.0, 1e-4), &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn masked_tokens_never_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = [f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY, 0.0];
        for _ in 0..200 {
            let t = filter_and_sample(&logits, &cfg(4, 1.0, 1.0), &mut rng).unwrap();
            assert!(t == 1 || t == 3);
        }
        assert!(filter_and_sample(&[f64::NAN, 0.0], &cfg(2, 1.0, 1.0), &mut rng).is_err());
    }

    #[test]
    fn cap_arithmetic() {
        assert_eq!(length_cap(1), 2);
        assert_eq!(length_cap(5), 6);
        assert_eq!(length_cap(10), 12);
        assert_eq!(length_cap(11), 14);
        assert_eq!(length_cap(100), 120);
    }

    fn tiny() -> ModelParams<f32> {
        let mc = ModelConfig {
            d_model: 16,
            n_heads: 2,
            head_dim: 8,
            ffn_dim: 32,
            text_vocab: 8,
            audio_vocab: 8,
            ..ModelConfig::default()
        };
        ModelParams::init(&mc, 0).unwrap()
    }

    #[test]
    fn generation_respects_cap_and_is_reproducible() {
        let m = tiny();
        let c = SamplerConfig {
            top_k: 13,
            top_p: 1.0,
            temperature: 1.0,
            seed: 5,
        };
        let r = generate(&m, &[1, 2], &[3, 4], 1, &c).unwrap();
        assert!(r.generated_len <= 2);
        assert_eq!(r.generated_len, r.tokens.len());
        if r.stop_reason == StopReason::LengthCap {
            assert_eq!(r.generated_len, 2);
        }
        let a = generate(&m, &[1, 2, 3], &[], 9, &c).unwrap();
        let b = generate(&m, &[1, 2, 3], &[], 9, &c).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.iter().all(|&t| t != 10 && t != 12 && t != 8 && t != 9));
    }

    proptest! {
        #[test]
        fn samples_stay_in_support(logits in prop::collection::vec(-5.0f64..5.0, 2..7), k in 1usize..7, p in 0.05f64..=1.0, t in 0.1f64..3.0, seed in 0u64..50) {
            let c = cfg(k, p, t);
            let support: Vec<usize> = sampling_support(&logits, &c).iter().map(|&(i, _)| i).collect();
            prop_assert!(!support.is_empty() && support.len() <= k);
            let total: f64 = sampling_support(&logits, &c).iter().map(|&(_, q)| q).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                let tok = filter_and_sample(&logits, &c, &mut rng).unwrap();
                prop_assert!(support.contains(&tok));
            }
        }
    }
}
