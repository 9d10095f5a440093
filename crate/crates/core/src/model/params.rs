use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Float, Gradients, Tape, Tensor, Var};

const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnIdx {
    pub norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FfnIdx {
    pub norm: usize,
    pub up: usize,
    pub down: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderLayerIdx {
    pub attn: AttnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderLayerIdx {
    pub self_attn: AttnIdx,
    pub cross_attn: AttnIdx,
    pub ffn: FfnIdx,
}

/// Where each named weight lives in [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub text_embed: usize,
    pub audio_embed: usize,
    pub encoder: Vec<EncoderLayerIdx>,
    pub encoder_norm: usize,
    pub decoder: Vec<DecoderLayerIdx>,
    pub decoder_norm: usize,
    pub head_hidden: usize,
    pub head_out: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Kind {
    Embedding,
    Projection,
    Gain,
}

/// Parameter specs in canonical order: name, shape, kind.
pub(crate) fn param_specs(cfg: &ModelConfig) -> (Vec<(String, Vec<usize>, Kind)>, Layout) {
    let d = cfg.d_model;
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind: Kind| {
        specs.push((name, shape, kind));
        specs.len() - 1
    };
    let text_embed = push("text_embed".into(), vec![cfg.text_vocab, d], Kind::Embedding);
    let audio_embed = push("audio_embed".into(), vec![cfg.total_vocab(), d], Kind::Embedding);

    let attn = |push: &mut dyn FnMut(String, Vec<usize>, Kind) -> usize, prefix: &str| AttnIdx {
        norm: push(format!("{prefix}.norm"), vec![d], Kind::Gain),
        wq: push(format!("{prefix}.wq"), vec![d, d], Kind::Projection),
        wk: push(format!("{prefix}.wk"), vec![d, d], Kind::Projection),
        wv: push(format!("{prefix}.wv"), vec![d, d], Kind::Projection),
        wo: push(format!("{prefix}.wo"), vec![d, d], Kind::Projection),
    };
    let ffn = |push: &mut dyn FnMut(String, Vec<usize>, Kind) -> usize, prefix: &str| FfnIdx {
        norm: push(format!("{prefix}.norm"), vec![d], Kind::Gain),
        up: push(format!("{prefix}.up"), vec![d, cfg.ffn_dim], Kind::Projection),
        down: push(format!("{prefix}.down"), vec![cfg.ffn_dim, d], Kind::Projection),
    };

    let encoder = (0..cfg.n_enc_layers)
        .map(|l| EncoderLayerIdx {
            attn: attn(&mut push, &format!("enc.{l}.attn")),
            ffn: ffn(&mut push, &format!("enc.{l}.ffn")),
        })
        .collect();
    let encoder_norm = push("enc.norm".into(), vec![d], Kind::Gain);
    let decoder = (0..cfg.n_dec_layers)
        .map(|l| DecoderLayerIdx {
            self_attn: attn(&mut push, &format!("dec.{l}.self")),
            cross_attn: attn(&mut push, &format!("dec.{l}.cross")),
            ffn: ffn(&mut push, &format!("dec.{l}.ffn")),
        })
        .collect();
    let decoder_norm = push("dec.norm".into(), vec![d], Kind::Gain);
    let head_hidden = push("head.hidden".into(), vec![d, d], Kind::Projection);
    let head_out = push("head.out".into(), vec![d, cfg.total_vocab()], Kind::Projection);

    let layout = Layout {
        text_embed,
        audio_embed,
        encoder,
        encoder_norm,
        decoder,
        decoder_norm,
        head_hidden,
        head_out,
    };
    (specs, layout)
}

/// All learnable weights of the codec language model, in a fixed named order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub(crate) config: ModelConfig,
    pub(crate) tensors: Vec<Tensor<F>>,
    pub(crate) names: Vec<String>,
    pub(crate) kinds: Vec<Kind>,
    pub(crate) layout: Layout,
}

impl<F: Float> ModelParams<F> {
    /// Scaled normal initialization, deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = param_specs(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt()).expect("positive std");
        let embed = Normal::new(0.0, EMBED_STD).expect("positive std");
        let mut tensors = Vec::with_capacity(specs.len());
        let mut names = Vec::with_capacity(specs.len());
        let mut kinds = Vec::with_capacity(specs.len());
        for (name, shape, kind) in specs {
            let numel: usize = shape.iter().product();
            let data: Vec<F> = match kind {
                Kind::Gain => vec![F::one(); numel],
                Kind::Embedding => (0..numel).map(|_| F::cast_from(embed.sample(&mut rng))).collect(),
                Kind::Projection => (0..numel).map(|_| F::cast_from(proj.sample(&mut rng))).collect(),
            };
            tensors.push(Tensor::new(shape, data)?.with_grad());
            names.push(name);
            kinds.push(kind);
        }
        Ok(ModelParams {
            config: config.clone(),
            tensors,
            names,
            kinds,
            layout,
        })
    }

    /// Rebuilds a parameter set from named tensors in canonical order.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor<F>)>) -> Result<Self> {
        config.validate()?;
        let (specs, layout) = param_specs(config);
        if specs.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        let mut names = Vec::with_capacity(specs.len());
        let mut kinds = Vec::with_capacity(specs.len());
        for ((name, shape, kind), (got_name, t)) in specs.into_iter().zip(named) {
            if name != got_name || shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected tensor {name} {shape:?}, found {got_name} {:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(name));
            }
            tensors.push(t.with_grad());
            names.push(name);
            kinds.push(kind);
        }
        Ok(ModelParams {
            config: config.clone(),
            tensors,
            names,
            kinds,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Switches cross-attention between progress-rotated and plain mode
    /// without touching any weight.
    pub fn set_pm_rope(&mut self, enabled: bool) {
        self.config.pm_rope_enabled = enabled;
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    /// Whether decoupled weight decay applies (projections only).
    pub fn decays(&self, index: usize) -> bool {
        self.kinds[index] == Kind::Projection
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a leaf on `tape`, in canonical order.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    /// Accumulates the gradients of the bound leaves into each tensor.
    pub fn accumulate_grads(&mut self, grads: &Gradients<F>, vars: &[Var]) {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            grads.accumulate_into(v, t);
        }
    }

    pub fn cast<G: Float>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            names: self.names.clone(),
            kinds: self.kinds.clone(),
            layout: self.layout.clone(),
        }
    }
}
