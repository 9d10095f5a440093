//! Teacher-forced training: AdamW with warmup and linear decay, global-norm
//! clipping, token-budget batching and best-validation checkpointing.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint;
use crate::model::{ModelConfig, ModelParams, SeqPair, SpecialTokens};
use crate::numerics::Tensor;
use crate::synthcorpus::{prompt_for, Codebook, Utterance};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    /// Upper bound on real decoder tokens per batch.
    pub token_budget: usize,
    pub seed: u64,
    pub validation_interval: usize,
    /// Symbols rendered into each utterance's voice prompt.
    pub prompt_symbols: usize,
    /// Drop the prompt and separator targets from the loss.
    pub exclude_prompt_from_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-4,
            weight_decay: 1e-2,
            total_steps: 20_000,
            warmup_fraction: 0.02,
            clip_norm: 1.0,
            token_budget: 4096,
            seed: 0,
            validation_interval: 500,
            prompt_symbols: 2,
            exclude_prompt_from_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad(format!("warmup_fraction {} must lie in (0, 1)", self.warmup_fraction));
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("peak_lr and weight_decay must be nonnegative".into());
        }
        if self.total_steps == 0 || self.token_budget == 0 || self.validation_interval == 0 {
            return bad("total_steps, token_budget and validation_interval must be positive".into());
        }
        if self.warmup_steps() >= self.total_steps {
            return bad(format!(
                "warmup of {} steps leaves no decay phase in {} total steps",
                self.warmup_steps(),
                self.total_steps
            ));
        }
        Ok(())
    }

    /// `ceil(warmup_fraction * total_steps)`, at least one step.
    pub fn warmup_steps(&self) -> usize {
        let raw = self.warmup_fraction * self.total_steps as f64;
        // Guard against products like 0.02 * 50 = 1.0000000000000002.
        ((raw - 1e-9).ceil() as usize).max(1)
    }
}

/// Learning rate after `step` updates: linear warmup to the peak, then linear
/// decay to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::OutOfRange {
            what: "schedule step",
            index: step,
            bound: cfg.total_steps + 1,
        });
    }
    let warm = cfg.warmup_steps();
    if step <= warm {
        Ok(cfg.peak_lr * (step as f64 / warm as f64))
    } else {
        Ok(cfg.peak_lr * ((cfg.total_steps - step) as f64 / (cfg.total_steps - warm) as f64))
    }
}

/// Global L2 norm over every gradient buffer, accumulated in 64-bit.
pub fn global_grad_norm(tensors: &[Tensor<f32>]) -> f64 {
    tensors
        .iter()
        .filter_map(Tensor::grad)
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(tensors: &mut [Tensor<f32>], clip_norm: f64) -> f64 {
    let norm = global_grad_norm(tensors);
    if norm > clip_norm {
        // Shrink by one extra ulp so 32-bit rounding cannot overshoot.
        let factor = (clip_norm / norm * (1.0 - f32::EPSILON as f64)) as f32;
        for t in tensors.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= factor);
            }
        }
    }
    norm
}

/// AdamW moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(tensors: &[Tensor<f32>]) -> Self {
        OptimState {
            first: tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            second: tensors.iter().map(|t| vec![0.0; t.numel()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected AdamW update with decoupled weight decay on the
/// tensors whose `decay` flag is set. Missing gradients count as zero.
pub fn adamw_step(
    tensors: &mut [Tensor<f32>],
    decay: &[bool],
    state: &mut OptimState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if decay.len() != tensors.len() || state.first.len() != tensors.len() {
        return Err(Error::invalid("optimizer state does not match the parameter list"));
    }
    for (i, t) in tensors.iter().enumerate() {
        if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - BETA1.powi(state.step as i32);
    let bc2 = 1.0 - BETA2.powi(state.step as i32);
    for (i, t) in tensors.iter_mut().enumerate() {
        let grad = t.grad().map(<[f32]>::to_vec);
        let shrink = if decay[i] { 1.0 - lr * weight_decay } else { 1.0 };
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (k, p) in t.data_mut().iter_mut().enumerate() {
            let g = grad.as_ref().map_or(0.0, |g| g[k] as f64);
            let mk = BETA1 * m[k] as f64 + (1.0 - BETA1) * g;
            let vk = BETA2 * v[k] as f64 + (1.0 - BETA2) * g * g;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let update = (mk / bc1) / ((vk / bc2).sqrt() + ADAM_EPS);
            *p = ((*p as f64) * shrink - lr * update) as f32;
        }
    }
    Ok(())
}

/// One utterance laid out as a decoder stream:
/// input `bos, prompt, sep, audio` and targets `prompt, sep, audio, eos`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub text: Vec<usize>,
    pub input: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Example {
    pub fn new(text: &[usize], prompt: &[usize], audio: &[usize], special: &SpecialTokens, exclude_prompt: bool) -> Self {
        let mut input = Vec::with_capacity(prompt.len() + audio.len() + 2);
        input.push(special.bos);
        input.extend_from_slice(prompt);
        input.push(special.separator);
        input.extend_from_slice(audio);
        let mut targets = input[1..].to_vec();
        targets.push(special.eos);
        let skip = if exclude_prompt { prompt.len() + 1 } else { 0 };
        let mask = (0..targets.len()).map(|i| i >= skip).collect();
        Example {
            text: text.to_vec(),
            input,
            targets,
            mask,
        }
    }

    pub fn from_utterance(utt: &Utterance, codebook: &Codebook, special: &SpecialTokens, cfg: &TrainConfig) -> Result<Self> {
        let prompt = prompt_for(utt, codebook, cfg.prompt_symbols)?;
        Ok(Example::new(&utt.text, &prompt, &utt.audio, special, cfg.exclude_prompt_from_loss))
    }

    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

/// Rows padded to a common length; `lengths` holds each row's real length and
/// pad positions are masked out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub lengths: Vec<usize>,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn real_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }

    fn assemble(examples: &[Example], indices: Vec<usize>, pad: usize) -> Batch {
        let width = indices.iter().map(|&i| examples[i].len()).max().unwrap_or(0);
        let mut batch = Batch {
            lengths: indices.iter().map(|&i| examples[i].len()).collect(),
            indices,
            inputs: Vec::new(),
            targets: Vec::new(),
            mask: Vec::new(),
        };
        for &i in &batch.indices {
            let ex = &examples[i];
            let padding = width - ex.len();
            let padded = |v: &[usize]| v.iter().copied().chain(std::iter::repeat_n(pad, padding)).collect();
            batch.inputs.push(padded(&ex.input));
            batch.targets.push(padded(&ex.targets));
            batch.mask.push(ex.mask.iter().copied().chain(std::iter::repeat_n(false, padding)).collect());
        }
        batch
    }

    /// Packed loss inputs over the unpadded part of every row.
    fn packed<'a>(&'a self, examples: &'a [Example]) -> (Vec<SeqPair<'a>>, Vec<usize>, Vec<bool>) {
        let mut pairs = Vec::with_capacity(self.indices.len());
        let mut targets = Vec::with_capacity(self.real_tokens());
        let mut mask = Vec::with_capacity(self.real_tokens());
        for (r, &i) in self.indices.iter().enumerate() {
            let len = self.lengths[r];
            pairs.push(SeqPair {
                text: &examples[i].text,
                audio: &self.inputs[r][..len],
            });
            targets.extend_from_slice(&self.targets[r][..len]);
            mask.extend_from_slice(&self.mask[r][..len]);
        }
        (pairs, targets, mask)
    }
}

/// Seeded shuffle, then greedy packing under the token budget.
pub fn make_batches(examples: &[Example], token_budget: usize, seed: u64, pad: usize) -> Result<Vec<Batch>> {
    if let Some((index, ex)) = examples.iter().enumerate().find(|(_, e)| e.len() > token_budget) {
        return Err(Error::Oversized {
            index,
            tokens: ex.len(),
            budget: token_budget,
        });
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        let n = examples[i].len();
        if used + n > token_budget && !current.is_empty() {
            batches.push(Batch::assemble(examples, std::mem::take(&mut current), pad));
            used = 0;
        }
        current.push(i);
        used += n;
    }
    if !current.is_empty() {
        batches.push(Batch::assemble(examples, current, pad));
    }
    Ok(batches)
}

/// Index of the lowest finite validation loss, earliest on ties.
pub fn select_best(val_losses: &[f64]) -> Option<usize> {
    val_losses
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b <= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn write_loss_curve(path: &Path, curve: &[LossPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush().map_err(Error::file(path))
}

pub struct TrainOutcome {
    pub best: ModelParams<f32>,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub curve: Vec<LossPoint>,
}

/// Where `train` persists artifacts; either may be absent.
#[derive(Debug, Clone, Default)]
pub struct TrainPaths {
    pub checkpoint: Option<PathBuf>,
    pub loss_curve: Option<PathBuf>,
}

fn mean_loss(params: &ModelParams<f32>, examples: &[Example], batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches {
        let (pairs, targets, mask) = b.packed(examples);
        let n = mask.iter().filter(|&&m| m).count();
        total += params.loss(&pairs, &targets, &mask)? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Empty("validation targets"));
    }
    Ok(total / count as f64)
}

/// Trains from a fresh initialization.
pub fn train(
    train_set: &[Utterance],
    val_set: &[Utterance],
    codebook: &Codebook,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    paths: &TrainPaths,
    observer: impl FnMut(&LossPoint),
) -> Result<TrainOutcome> {
    let params = ModelParams::init(model_cfg, cfg.seed)?;
    train_from(params, train_set, val_set, codebook, cfg, paths, observer)
}

/// Runs `total_steps` updates, validating at step 0 and every
/// `validation_interval` steps, and keeps the parameters with the lowest
/// validation loss. A non-finite loss aborts with [`Error::Diverged`]; the
/// best checkpoint written so far stays on disk.
pub fn train_from(
    mut params: ModelParams<f32>,
    train_set: &[Utterance],
    val_set: &[Utterance],
    codebook: &Codebook,
    cfg: &TrainConfig,
    paths: &TrainPaths,
    mut observer: impl FnMut(&LossPoint),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Empty("training and validation splits"));
    }
    let special = params.config().special_tokens();
    let build = |set: &[Utterance]| -> Result<Vec<Example>> {
        set.iter()
            .map(|u| Example::from_utterance(u, codebook, &special, cfg))
            .collect()
    };
    let train_ex = build(train_set)?;
    let val_ex = build(val_set)?;
    let val_batches = make_batches(&val_ex, cfg.token_budget, cfg.seed, special.pad)?;
    let decay: Vec<bool> = (0..params.tensors().len()).map(|i| params.decays(i)).collect();
    let mut state = OptimState::new(params.tensors());

    let mut epoch = 0u64;
    let mut queue = make_batches(&train_ex, cfg.token_budget, cfg.seed, special.pad)?;
    queue.reverse();
    let mut next_batch = |epoch: &mut u64| -> Result<Batch> {
        if queue.is_empty() {
            *epoch += 1;
            queue = make_batches(&train_ex, cfg.token_budget, cfg.seed.wrapping_add(*epoch), special.pad)?;
            queue.reverse();
        }
        Ok(queue.pop().expect("nonempty training set yields batches"))
    };

    let mut curve = Vec::new();
    let mut best = params.clone();
    let mut best_step = 0;
    let mut best_val = f64::INFINITY;
    let mut window = (0.0, 0usize);

    for step in 0..=cfg.total_steps {
        if step % cfg.validation_interval == 0 || step == cfg.total_steps {
            let val_loss = mean_loss(&params, &val_ex, &val_batches)?;
            if !val_loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            let train_loss = if window.1 == 0 {
                mean_loss(&params, &train_ex, &[next_batch(&mut epoch)?])?
            } else {
                window.0 / window.1 as f64
            };
            window = (0.0, 0);
            let point = LossPoint {
                step,
                train_loss,
                val_loss,
            };
            observer(&point);
            curve.push(point);
            if val_loss < best_val {
                best_val = val_loss;
                best_step = step;
                best = params.clone();
                if let Some(path) = &paths.checkpoint {
                    checkpoint::save(&best, path)?;
                }
            }
            if let Some(path) = &paths.loss_curve {
                write_loss_curve(path, &curve)?;
            }
        }
        if step == cfg.total_steps {
            break;
        }

        let batch = next_batch(&mut epoch)?;
        let (pairs, targets, mask) = batch.packed(&train_ex);
        params.zero_grad();
        let loss = params.loss_and_grad(&pairs, &targets, &mask)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        window.0 += loss;
        window.1 += 1;
        clip_gradients(params.tensors_mut(), cfg.clip_norm);
        let lr = lr_at(step + 1, cfg)?;
        adamw_step(params.tensors_mut(), &decay, &mut state, lr, cfg.weight_decay)?;
    }
    best.zero_grad();
    Ok(TrainOutcome {
        best,
        best_step,
        best_val_loss: best_val,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn sched(total: usize) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = sched(20_000);
        assert_eq!(cfg.warmup_steps(), 400);
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(400, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(20_000, &cfg).unwrap(), 0.0);
        assert!((lr_at(200, &cfg).unwrap() - 0.5e-4).abs() < 1e-18);
        assert!(lr_at(20_001, &cfg).is_err());
        assert_eq!(sched(50).warmup_steps(), 1);
        assert_eq!(sched(51).warmup_steps(), 2);
    }

    #[test]
    fn lr_peak_is_maximum() {
        let cfg = sched(777);
        let w = cfg.warmup_steps();
        let lrs: Vec<f64> = (0..=777).map(|s| lr_at(s, &cfg).unwrap()).collect();
        let (argmax, &max) = lrs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!((argmax, max), (w, 1e-4));
        for pair in lrs.windows(2) {
            assert!((pair[1] - pair[0]).abs() <= 1e-4 / w.min(777 - w) as f64 + 1e-18);
        }
    }

    fn grads(values: &[&[f32]]) -> Vec<Tensor<f32>> {
        values
            .iter()
            .map(|v| {
                let mut t = Tensor::zeros(vec![v.len()]).with_grad();
                t.accumulate_grad(v);
                t
            })
            .collect()
    }

    #[test]
    fn clipping_examples() {
        let mut small = grads(&[&[0.3, 0.4]]);
        assert!((clip_gradients(&mut small, 1.0) - 0.5).abs() < 1e-7);
        assert_eq!(small[0].grad().unwrap(), &[0.3, 0.4]);

        let mut big = grads(&[&[2.0, 2.0], &[2.0, 2.0]]);
        assert!((clip_gradients(&mut big, 1.0) - 4.0).abs() < 1e-12);
        for t in &big {
            for &g in t.grad().unwrap() {
                assert!((g - 0.5).abs() < 1e-6);
            }
        }
        let n = global_grad_norm(&big);
        assert!(n <= 1.0 + 1e-9 && n > 1.0 - 1e-6);
    }

    #[test]
    fn adamw_single_steps() {
        let mut p = vec![Tensor::new(vec![1], vec![0.7f32]).unwrap().with_grad()];
        let mut st = OptimState::new(&p);
        adamw_step(&mut p, &[true], &mut st, 0.1, 0.0).unwrap();
        assert!((p[0].data()[0] - 0.7).abs() < 1e-7);

        p[0].accumulate_grad(&[1.0]);
        let mut st = OptimState::new(&p);
        let before = p[0].data()[0] as f64;
        adamw_step(&mut p, &[true], &mut st, 0.1, 0.0).unwrap();
        let step = before - p[0].data()[0] as f64;
        assert!((step - 0.1).abs() < 1e-6, "{step}");

        let mut p = vec![Tensor::new(vec![1], vec![2.0f32]).unwrap()];
        let mut st = OptimState::new(&p);
        adamw_step(&mut p, &[true], &mut st, 0.1, 0.01).unwrap();
        assert!((p[0].data()[0] as f64 - 2.0 * (1.0 - 0.001)).abs() < 1e-6);
        let mut q = vec![Tensor::new(vec![1], vec![2.0f32]).unwrap()];
        let mut st = OptimState::new(&q);
        adamw_step(&mut q, &[false], &mut st, 0.1, 0.01).unwrap();
        assert_eq!(q[0].data()[0], 2.0);
    }

    #[test]
    fn adamw_rejects_non_finite() {
        let mut p = grads(&[&[f32::NAN]]);
        let mut st = OptimState::new(&p);
        assert!(matches!(adamw_step(&mut p, &[true], &mut st, 0.1, 0.0), Err(Error::NonFinite(_))));
        assert_eq!(st.step, 0);
    }

    fn sized(lens: &[usize]) -> Vec<Example> {
        lens.iter()
            .map(|&n| Example {
                text: vec![0],
                input: vec![1; n],
                targets: vec![1; n],
                mask: vec![true; n],
            })
            .collect()
    }

    #[test]
    fn batching_examples() {
        let ex = sized(&[10, 10, 10]);
        let b = make_batches(&ex, 25, 3, 99).unwrap();
        assert_eq!(b.iter().map(|b| b.indices.len()).collect::<Vec<_>>(), [2, 1]);
        assert_eq!(b, make_batches(&ex, 25, 3, 99).unwrap());
        match make_batches(&sized(&[5, 30]), 25, 0, 99) {
            Err(Error::Oversized { index, tokens, .. }) => assert_eq!((index, tokens), (1, 30)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn padding_is_masked() {
        let ex = sized(&[3, 5]);
        let b = make_batches(&ex, 100, 0, 99).unwrap();
        assert_eq!(b.len(), 1);
        for (r, &i) in b[0].indices.iter().enumerate() {
            assert_eq!(b[0].inputs[r].len(), 5);
            let len = ex[i].len();
            assert!(b[0].inputs[r][len..].iter().all(|&t| t == 99));
            assert!(b[0].mask[r][len..].iter().all(|&m| !m));
        }
    }

    #[test]
    fn decoder_stream_layout() {
        let sp = SpecialTokens::new(64);
        let ex = Example::new(&[1, 2], &[5, 6], &[7, 8, 9], &sp, false);
        assert_eq!(ex.input, [64, 5, 6, 68, 7, 8, 9]);
        assert_eq!(ex.targets, [5, 6, 68, 7, 8, 9, 65]);
        assert!(ex.mask.iter().all(|&m| m));
        let ex = Example::new(&[1, 2], &[5, 6], &[7, 8, 9], &sp, true);
        assert_eq!(ex.mask, [false, false, false, true, true, true, true]);
    }

    #[test]
    fn best_selection() {
        assert_eq!(select_best(&[3.0, 2.0, 2.5]), Some(1));
        assert_eq!(select_best(&[2.0, 2.0]), Some(0));
        assert_eq!(select_best(&[f64::NAN, 4.0]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    proptest! {
        #[test]
        fn batching_conserves_tokens(lens in prop::collection::vec(1usize..40, 1..60), budget in 40usize..200, seed in 0u64..100) {
            let ex = sized(&lens);
            let batches = make_batches(&ex, budget, seed, 0).unwrap();
            let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..lens.len()).collect::<Vec<_>>());
            prop_assert_eq!(batches.iter().map(Batch::real_tokens).sum::<usize>(), lens.iter().sum::<usize>());
            prop_assert!(batches.iter().all(|b| b.real_tokens() <= budget));
        }

        #[test]
        fn clipped_norm_bounded(seed in 0u64..1000, scale in 0.01f32..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<Vec<f32>> = (0..3).map(|_| (0..17).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect()).collect();
            let mut ts = grads(&raw.iter().map(Vec::as_slice).collect::<Vec<_>>());
            clip_gradients(&mut ts, 1.0);
            prop_assert!(global_grad_norm(&ts) <= 1.0 + 1e-9);
            let before: Vec<f64> = raw.concat().iter().map(|&x| x as f64).collect();
            let after: Vec<f64> = ts.iter().flat_map(|t| t.grad().unwrap().iter().map(|&x| x as f64)).collect();
            let dot: f64 = before.iter().zip(&after).map(|(a, b)| a * b).sum();
            let na = before.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nb = after.iter().map(|b| b * b).sum::<f64>().sqrt();
            prop_assert!((dot / (na * nb) - 1.0).abs() < 1e-9);
        }
    }
}
