use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::decoding::{generate, SamplerConfig, StopReason};
use crate::error::{Error, Result};
use crate::metrics::{bootstrap_ci, error_rate, pearson_r, style_similarity, within_margin, wilson_interval, EvalReport};
use crate::model::ModelParams;
use crate::synthcorpus::{prompt_for, Codebook, Utterance};

/// Outcome of one oracle-length generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: usize,
    pub target_len: usize,
    pub generated_len: usize,
    pub stop_reason: StopReason,
    pub error_rate: f64,
    pub style_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub pm_rope: bool,
    pub reports: Vec<EvalReport>,
    /// Correlation of target and generated durations; absent when either
    /// side has no variance.
    pub pearson_r: Option<f64>,
    #[serde(skip)]
    pub rows: Vec<UtteranceResult>,
}

impl EvalRun {
    pub fn report(&self, metric: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.metric == metric)
    }

    pub fn duration_accuracy(&self) -> f64 {
        self.report("duration_accuracy").map_or(f64::NAN, |r| r.mean)
    }

    pub fn error_rate(&self) -> f64 {
        self.report("error_rate").map_or(f64::NAN, |r| r.mean)
    }

    pub fn style_similarity(&self) -> f64 {
        self.report("style_similarity").map_or(f64::NAN, |r| r.mean)
    }
}

/// Generates every utterance at its oracle length and scores the outputs.
/// Utterance `i` samples with seed `sampler.seed + i`, so runs that differ
/// only in the cross-attention mode are paired.
pub fn evaluate(
    model: &ModelParams<f32>,
    utterances: &[Utterance],
    codebook: &Codebook,
    run: &RunConfig,
    pm_rope: bool,
    mut progress: impl FnMut(usize, &UtteranceResult),
) -> Result<EvalRun> {
    let mut model = model.clone();
    model.set_pm_rope(pm_rope);
    let limit = run.eval.limit.unwrap_or(utterances.len()).min(utterances.len());
    if limit == 0 {
        return Err(Error::Empty("evaluation utterances"));
    }
    let alphabets = codebook.style_alphabets();
    let mut rows = Vec::with_capacity(limit);
    for (id, utt) in utterances[..limit].iter().enumerate() {
        let prompt = prompt_for(utt, codebook, run.train.prompt_symbols)?;
        let sampler = SamplerConfig {
            seed: run.sampler.seed.wrapping_add(id as u64),
            ..run.sampler.clone()
        };
        let out = generate(&model, &utt.text, &prompt, utt.duration_tokens, &sampler)?;
        let sim = if out.tokens.is_empty() {
            0.0
        } else {
            style_similarity(&prompt, &out.tokens, &alphabets)?
        };
        let row = UtteranceResult {
            id,
            target_len: out.target_len,
            generated_len: out.generated_len,
            stop_reason: out.stop_reason,
            error_rate: error_rate(&utt.audio, &out.tokens)?,
            style_similarity: sim,
        };
        progress(id, &row);
        rows.push(row);
    }
    summarize(rows, run, pm_rope)
}

fn summarize(rows: Vec<UtteranceResult>, run: &RunConfig, pm_rope: bool) -> Result<EvalRun> {
    let ev = &run.eval;
    let fr = ev.frame_rate as f64;
    let target: Vec<f64> = rows.iter().map(|r| r.target_len as f64 / fr).collect();
    let generated: Vec<f64> = rows.iter().map(|r| r.generated_len as f64 / fr).collect();
    let hits = target
        .iter()
        .zip(&generated)
        .filter(|&(&t, &g)| within_margin(g, t, ev.margin))
        .count();
    let errs: Vec<f64> = rows.iter().map(|r| r.error_rate).collect();
    let sims: Vec<f64> = rows.iter().map(|r| r.style_similarity).collect();
    let reports = vec![
        bootstrap_ci(&errs, ev.resamples, ev.level, ev.bootstrap_seed)?.named("error_rate"),
        bootstrap_ci(&sims, ev.resamples, ev.level, ev.bootstrap_seed)?.named("style_similarity"),
        wilson_interval(hits, rows.len(), ev.level)?.named("duration_accuracy"),
    ];
    Ok(EvalRun {
        pm_rope,
        reports,
        pearson_r: pearson_r(&target, &generated).ok(),
        rows,
    })
}

pub fn write_scatter(path: &Path, rows: &[UtteranceResult], frame_rate: u32) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        id: usize,
        target_duration: f64,
        generated_duration: f64,
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(Row {
            id: r.id,
            target_duration: r.target_len as f64 / frame_rate as f64,
            generated_duration: r.generated_len as f64 / frame_rate as f64,
        })?;
    }
    w.flush().map_err(Error::file(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    /// PM-on minus PM-off.
    pub duration_accuracy: f64,
    pub error_rate: f64,
}

/// Side-by-side evaluation of one checkpoint with rotation on and off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ablation {
    pub configurations: Vec<EvalRun>,
    pub delta: Deltas,
}

pub fn ablate(
    model: &ModelParams<f32>,
    utterances: &[Utterance],
    codebook: &Codebook,
    run: &RunConfig,
    mut progress: impl FnMut(bool, usize, &UtteranceResult),
) -> Result<Ablation> {
    let on = evaluate(model, utterances, codebook, run, true, |i, r| progress(true, i, r))?;
    let off = evaluate(model, utterances, codebook, run, false, |i, r| progress(false, i, r))?;
    let delta = Deltas {
        duration_accuracy: on.duration_accuracy() - off.duration_accuracy(),
        error_rate: on.error_rate() - off.error_rate(),
    };
    Ok(Ablation {
        configurations: vec![on, off],
        delta,
    })
}
