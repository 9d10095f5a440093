//! Encoder-decoder codec language model.
//!
//! The encoder reads text bidirectionally. The decoder is causal over audio
//! tokens and cross-attends to the encoder in every layer; with progress
//! monitoring enabled, cross-attention queries are rotated by decoder progress
//! IDs and keys by encoder progress IDs, so their dot products see only the
//! difference in relative progress. Both stacks use pre-norm RMS
//! normalization, and self-attention uses ordinary integer-position rotary
//! embeddings.

pub mod checkpoint;
mod params;

use serde::{Deserialize, Serialize};

pub use params::{AttnIdx, DecoderLayerIdx, EncoderLayerIdx, FfnIdx, Layout, ModelParams};

use crate::error::{Error, Result};
use crate::numerics::{AttnSegment, Float, Tape, Tensor, Var};
use crate::positional::{ProgressSchedule, RopeParams, DEFAULT_PROGRESS_SCALE, DEFAULT_ROPE_BASE};

/// Number of special tokens appended after the audio codebook.
pub const NUM_SPECIAL_TOKENS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub text_vocab: usize,
    pub audio_vocab: usize,
    pub pm_rope_enabled: bool,
    pub progress_scale: f64,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_model: 64,
            n_heads: 4,
            head_dim: 16,
            ffn_dim: 256,
            text_vocab: 32,
            audio_vocab: 64,
            pm_rope_enabled: true,
            progress_scale: DEFAULT_PROGRESS_SCALE,
            rope_base: DEFAULT_ROPE_BASE,
        }
    }
}

impl ModelConfig {
    /// Audio codebook plus the five special tokens.
    pub fn total_vocab(&self) -> usize {
        self.audio_vocab + NUM_SPECIAL_TOKENS
    }

    pub fn special_tokens(&self) -> SpecialTokens {
        SpecialTokens::new(self.audio_vocab)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("text_vocab", self.text_vocab),
            ("audio_vocab", self.audio_vocab),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model ({}) must equal n_heads ({}) x head_dim ({})",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Config("head_dim must be even".into()));
        }
        if !(self.progress_scale > 0.0 && self.progress_scale.is_finite()) {
            return Err(Error::Config("progress_scale must be positive".into()));
        }
        if !(self.rope_base > 1.0 && self.rope_base.is_finite()) {
            return Err(Error::Config("rope_base must exceed 1".into()));
        }
        Ok(())
    }

    fn rope(&self) -> RopeParams {
        RopeParams::new(self.head_dim, self.rope_base).expect("validated config")
    }
}

/// Special token ids, placed directly after the `V` codebook entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bos: usize,
    pub eos: usize,
    pub pad: usize,
    pub silence: usize,
    pub separator: usize,
}

impl SpecialTokens {
    pub fn new(audio_vocab: usize) -> Self {
        SpecialTokens {
            bos: audio_vocab,
            eos: audio_vocab + 1,
            pad: audio_vocab + 2,
            silence: audio_vocab + 3,
            separator: audio_vocab + 4,
        }
    }

    pub fn all(&self) -> [usize; NUM_SPECIAL_TOKENS] {
        [self.bos, self.eos, self.pad, self.silence, self.separator]
    }
}

/// Contextualized text states.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<F> {
    pub states: Tensor<F>,
}

impl<F: Float> EncoderOutput<F> {
    /// Source length `T`.
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How the decoder schedule relates to the token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Forcing {
    /// Training: the schedule covers exactly the input tokens.
    Teacher,
    /// Generation: the schedule covers the planned length; the stream may be
    /// shorter, or longer when the model over-runs (IDs then extrapolate).
    Free,
}

/// One packed sequence pair for a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SeqPair<'a> {
    pub text: &'a [usize],
    pub audio: &'a [usize],
}

fn segments_for(lens: &[usize]) -> Vec<(usize, usize)> {
    let mut start = 0;
    lens.iter()
        .map(|&len| {
            let s = (start, len);
            start += len;
            s
        })
        .collect()
}

fn self_segments(spans: &[(usize, usize)]) -> Vec<AttnSegment> {
    spans
        .iter()
        .map(|&(start, len)| AttnSegment {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
        })
        .collect()
}

fn integer_positions(spans: &[(usize, usize)]) -> Vec<f64> {
    spans.iter().flat_map(|&(_, len)| (0..len).map(|i| i as f64)).collect()
}

/// Graph-building helpers shared by training, evaluation and generation.
pub(crate) struct Net<'p, F> {
    params: &'p ModelParams<F>,
    vars: Vec<Var>,
    self_rope: RopeParams,
    dec_rope: RopeParams,
    enc_rope: RopeParams,
}

impl<'p, F: Float> Net<'p, F> {
    pub(crate) fn bind(params: &'p ModelParams<F>, tape: &mut Tape<F>) -> Self {
        let rope = params.config.rope();
        Net {
            params,
            vars: params.bind(tape),
            self_rope: rope.clone(),
            dec_rope: rope.clone(),
            enc_rope: rope,
        }
    }

    pub(crate) fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    fn rotate(&self, tape: &mut Tape<F>, x: Var, rope: &RopeParams, positions: &[f64]) -> Result<Var> {
        let (cos, sin) = rope.tables::<F>(positions);
        tape.rotate_pairs(x, rope.head_dim(), cos, sin)
    }

    fn ffn(&self, tape: &mut Tape<F>, x: Var, idx: &FfnIdx) -> Result<Var> {
        let h = tape.rms_norm(x, self.var(idx.norm))?;
        let up = tape.matmul(h, self.var(idx.up))?;
        let act = tape.gelu(up);
        let down = tape.matmul(act, self.var(idx.down))?;
        tape.add(x, down)
    }

    fn self_attention(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        idx: &AttnIdx,
        positions: &[f64],
        segments: &[AttnSegment],
        causal: bool,
    ) -> Result<Var> {
        let h = tape.rms_norm(x, self.var(idx.norm))?;
        let q = tape.matmul(h, self.var(idx.wq))?;
        let k = tape.matmul(h, self.var(idx.wk))?;
        let v = tape.matmul(h, self.var(idx.wv))?;
        let q = self.rotate(tape, q, &self.self_rope, positions)?;
        let k = self.rotate(tape, k, &self.self_rope, positions)?;
        let a = tape.attention(q, k, v, self.params.config.n_heads, segments, causal)?;
        let o = tape.matmul(a, self.var(idx.wo))?;
        tape.add(x, o)
    }

    /// Encodes packed texts; returns states and `(start, len)` spans.
    pub(crate) fn encode(&self, tape: &mut Tape<F>, texts: &[&[usize]]) -> Result<(Var, Vec<(usize, usize)>)> {
        let cfg = &self.params.config;
        if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
            return Err(Error::Empty("text tokens"));
        }
        let ids: Vec<usize> = texts.concat();
        if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.text_vocab) {
            return Err(Error::OutOfRange {
                what: "text token",
                index: bad,
                bound: cfg.text_vocab,
            });
        }
        let spans = segments_for(&texts.iter().map(|t| t.len()).collect::<Vec<_>>());
        let positions = integer_positions(&spans);
        let segments = self_segments(&spans);
        let layout = &self.params.layout;
        let mut x = tape.gather(self.var(layout.text_embed), &ids)?;
        for layer in &layout.encoder {
            x = self.self_attention(tape, x, &layer.attn, &positions, &segments, false)?;
            x = self.ffn(tape, x, &layer.ffn)?;
        }
        let x = tape.rms_norm(x, self.var(layout.encoder_norm))?;
        Ok((x, spans))
    }

    /// Decoder trunk over packed audio streams. `dec_progress` and
    /// `enc_progress` hold one progress ID per decoder / encoder row and are
    /// only used when cross-attention rotation is enabled.
    pub(crate) fn decode_hidden(
        &self,
        tape: &mut Tape<F>,
        audio: &[&[usize]],
        enc: Var,
        enc_spans: &[(usize, usize)],
        dec_progress: &[f64],
        enc_progress: &[f64],
    ) -> Result<Var> {
        let cfg = &self.params.config;
        if audio.is_empty() || audio.iter().any(|a| a.is_empty()) {
            return Err(Error::Empty("audio tokens"));
        }
        if audio.len() != enc_spans.len() {
            return Err(Error::invalid("one encoder span per audio stream required"));
        }
        let ids: Vec<usize> = audio.concat();
        if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.total_vocab()) {
            return Err(Error::OutOfRange {
                what: "audio token",
                index: bad,
                bound: cfg.total_vocab(),
            });
        }
        if dec_progress.len() != ids.len() || enc_progress.len() != tape.shape(enc)[0] {
            return Err(Error::Shape {
                op: "progress ids",
                lhs: vec![ids.len(), tape.shape(enc)[0]],
                rhs: vec![dec_progress.len(), enc_progress.len()],
            });
        }
        let spans = segments_for(&audio.iter().map(|a| a.len()).collect::<Vec<_>>());
        let positions = integer_positions(&spans);
        let self_segs = self_segments(&spans);
        let cross_segs: Vec<AttnSegment> = spans
            .iter()
            .zip(enc_spans)
            .map(|(&(qs, ql), &(ks, kl))| AttnSegment {
                q_start: qs,
                q_len: ql,
                k_start: ks,
                k_len: kl,
            })
            .collect();

        let layout = &self.params.layout;
        let mut x = tape.gather(self.var(layout.audio_embed), &ids)?;
        for layer in &layout.decoder {
            x = self.self_attention(tape, x, &layer.self_attn, &positions, &self_segs, true)?;

            let idx = &layer.cross_attn;
            let h = tape.rms_norm(x, self.var(idx.norm))?;
            let mut q = tape.matmul(h, self.var(idx.wq))?;
            let mut k = tape.matmul(enc, self.var(idx.wk))?;
            let v = tape.matmul(enc, self.var(idx.wv))?;
            if cfg.pm_rope_enabled {
                q = self.rotate(tape, q, &self.dec_rope, dec_progress)?;
                k = self.rotate(tape, k, &self.enc_rope, enc_progress)?;
            }
            let a = tape.attention(q, k, v, cfg.n_heads, &cross_segs, false)?;
            let o = tape.matmul(a, self.var(idx.wo))?;
            x = tape.add(x, o)?;

            x = self.ffn(tape, x, &layer.ffn)?;
        }
        tape.rms_norm(x, self.var(layout.decoder_norm))
    }

    /// Projection head: linear, GELU, linear to `V + 5` logits.
    pub(crate) fn head(&self, tape: &mut Tape<F>, hidden: Var) -> Result<Var> {
        let layout = &self.params.layout;
        let h = tape.matmul(hidden, self.var(layout.head_hidden))?;
        let h = tape.gelu(h);
        tape.matmul(h, self.var(layout.head_out))
    }

    /// Teacher-forced logits for packed pairs: every decoder schedule spans
    /// its own stream, every encoder schedule its own text.
    pub(crate) fn teacher_forced_logits(&self, tape: &mut Tape<F>, pairs: &[SeqPair<'_>]) -> Result<Var> {
        let scale = self.params.config.progress_scale;
        let texts: Vec<&[usize]> = pairs.iter().map(|p| p.text).collect();
        let audio: Vec<&[usize]> = pairs.iter().map(|p| p.audio).collect();
        let (enc, enc_spans) = self.encode(tape, &texts)?;
        let mut dec_progress = Vec::new();
        let mut enc_progress = Vec::new();
        for p in pairs {
            dec_progress.extend(ProgressSchedule::new(p.audio.len().max(1), scale)?.ids(p.audio.len()));
            enc_progress.extend(ProgressSchedule::new(p.text.len().max(1), scale)?.ids(p.text.len()));
        }
        let hidden = self.decode_hidden(tape, &audio, enc, &enc_spans, &dec_progress, &enc_progress)?;
        self.head(tape, hidden)
    }
}

impl<F: Float> ModelParams<F> {
    /// Runs the text encoder on one sequence.
    pub fn encode(&self, text: &[usize]) -> Result<EncoderOutput<F>> {
        let mut tape = Tape::inference();
        let net = Net::bind(self, &mut tape);
        let (states, _) = net.encode(&mut tape, &[text])?;
        Ok(EncoderOutput {
            states: tape.tensor(states),
        })
    }

    /// Decoder logits `[S x (V + 5)]` for one audio stream.
    pub fn decoder_forward(
        &self,
        audio: &[usize],
        enc: &EncoderOutput<F>,
        schedule_dec: &ProgressSchedule,
        schedule_enc: &ProgressSchedule,
        forcing: Forcing,
    ) -> Result<Tensor<F>> {
        if schedule_enc.total_len() != enc.len() {
            return Err(Error::invalid(format!(
                "encoder schedule covers {} tokens but the source has {}",
                schedule_enc.total_len(),
                enc.len()
            )));
        }
        if forcing == Forcing::Teacher && schedule_dec.total_len() != audio.len() {
            return Err(Error::invalid(format!(
                "teacher forcing needs a decoder schedule of length {}, got {}",
                audio.len(),
                schedule_dec.total_len()
            )));
        }
        self.decoder_forward_with_progress(
            audio,
            enc,
            &schedule_dec.ids(audio.len()),
            &schedule_enc.ids(enc.len()),
            None,
        )
    }

    /// Decoder logits with explicit progress IDs. When `last_rows` is set only
    /// that many trailing rows go through the head.
    pub fn decoder_forward_with_progress(
        &self,
        audio: &[usize],
        enc: &EncoderOutput<F>,
        dec_progress: &[f64],
        enc_progress: &[f64],
        last_rows: Option<usize>,
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::inference();
        let net = Net::bind(self, &mut tape);
        let enc_var = tape.leaf(&enc.states);
        let hidden = net.decode_hidden(
            &mut tape,
            &[audio],
            enc_var,
            &[(0, enc.len())],
            dec_progress,
            enc_progress,
        )?;
        let hidden = match last_rows {
            Some(n) if n < audio.len() => tape.slice_rows(hidden, audio.len() - n, n)?,
            _ => hidden,
        };
        let logits = net.head(&mut tape, hidden)?;
        Ok(tape.tensor(logits))
    }

    /// Mean next-token cross-entropy of packed pairs under teacher forcing.
    pub fn loss(&self, pairs: &[SeqPair<'_>], targets: &[usize], mask: &[bool]) -> Result<f64> {
        let mut tape = Tape::inference();
        let net = Net::bind(self, &mut tape);
        let logits = net.teacher_forced_logits(&mut tape, pairs)?;
        let loss = tape.cross_entropy(logits, targets, mask)?;
        Ok(tape.scalar(loss).as_f64())
    }

    /// Loss plus gradients accumulated into every parameter tensor.
    pub fn loss_and_grad(&mut self, pairs: &[SeqPair<'_>], targets: &[usize], mask: &[bool]) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, vars) = {
            let net = Net::bind(self, &mut tape);
            let logits = net.teacher_forced_logits(&mut tape, pairs)?;
            (tape.cross_entropy(logits, targets, mask)?, net.vars().to_vec())
        };
        let value = tape.scalar(loss).as_f64();
        let grads = tape.backward(loss)?;
        self.accumulate_grads(&grads, &vars);
        Ok(value)
    }
}
