//! Deterministic pseudo-codec corpus.
//!
//! Every text symbol owns a fixed motif of `motif_len` local token ids. A
//! style maps those ids into its own disjoint slice of the audio codebook, and
//! a stretch factor repeats each motif token in place. The same text is
//! emitted at every configured stretch, so its audio length cannot be read off
//! the text.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SpecialTokens;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_symbols: usize,
    pub n_styles: usize,
    pub motif_len: usize,
    pub stretch_factors: Vec<usize>,
    pub min_text_len: usize,
    pub max_text_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub audio_vocab: usize,
    /// Probability that a rendered token is replaced by the silence token.
    pub silence_prob: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_symbols: 16,
            n_styles: 4,
            motif_len: 4,
            stretch_factors: vec![1, 2, 3],
            min_text_len: 3,
            max_text_len: 8,
            train_size: 4000,
            val_size: 200,
            test_size: 200,
            audio_vocab: 64,
            silence_prob: 0.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// Tokens available to each style.
    pub fn alphabet_size(&self) -> usize {
        self.audio_vocab / self.n_styles.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_symbols == 0 || self.n_styles == 0 || self.motif_len == 0 {
            return bad("n_symbols, n_styles and motif_len must be positive".into());
        }
        if self.motif_len > self.alphabet_size() {
            return bad(format!(
                "motif_len {} exceeds the per-style alphabet of {} tokens",
                self.motif_len,
                self.alphabet_size()
            ));
        }
        if self.stretch_factors.is_empty() || self.stretch_factors.contains(&0) {
            return bad("stretch_factors must be a nonempty list of positive integers".into());
        }
        if self.min_text_len == 0 || self.min_text_len > self.max_text_len {
            return bad(format!(
                "text length range {}..={} is empty",
                self.min_text_len, self.max_text_len
            ));
        }
        if !(0.0..=1.0).contains(&self.silence_prob) {
            return bad(format!("silence_prob {} outside [0, 1]", self.silence_prob));
        }
        Ok(())
    }
}

/// One text symbol and its motif.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolSpec {
    pub symbol: usize,
    /// Local ids in `[0, alphabet_size)`.
    pub base_motif: Vec<usize>,
    /// `style_offsets[s]` maps local ids into style `s`'s slice of the codebook.
    pub style_offsets: Vec<usize>,
}

/// The full symbol-to-motif mapping of a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Codebook {
    pub symbols: Vec<SymbolSpec>,
    pub alphabet_size: usize,
    pub audio_vocab: usize,
}

impl Codebook {
    /// Draws one distinct motif per symbol from the config's seed.
    pub fn new(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let alphabet_size = cfg.alphabet_size();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let offsets: Vec<usize> = (0..cfg.n_styles).map(|s| s * alphabet_size).collect();
        let mut seen = HashSet::new();
        let mut symbols = Vec::with_capacity(cfg.n_symbols);
        let mut attempts = 0usize;
        while symbols.len() < cfg.n_symbols {
            let motif = index::sample(&mut rng, alphabet_size, cfg.motif_len).into_vec();
            attempts += 1;
            if seen.insert(motif.clone()) || attempts > 1000 * cfg.n_symbols {
                symbols.push(SymbolSpec {
                    symbol: symbols.len(),
                    base_motif: motif,
                    style_offsets: offsets.clone(),
                });
            }
        }
        Ok(Codebook {
            symbols,
            alphabet_size,
            audio_vocab: cfg.audio_vocab,
        })
    }

    pub fn n_styles(&self) -> usize {
        self.symbols.first().map_or(0, |s| s.style_offsets.len())
    }

    pub fn motif_len(&self) -> usize {
        self.symbols.first().map_or(0, |s| s.base_motif.len())
    }

    /// Token ids belonging to each style, for the similarity proxy.
    pub fn style_alphabets(&self) -> Vec<Vec<usize>> {
        (0..self.n_styles())
            .map(|s| (s * self.alphabet_size..(s + 1) * self.alphabet_size).collect())
            .collect()
    }

    /// Style owning an audio token id, if any.
    pub fn style_of(&self, token: usize) -> Option<usize> {
        let s = token / self.alphabet_size;
        (token < self.audio_vocab && s < self.n_styles()).then_some(s)
    }
}

/// One synthetic example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub text: Vec<usize>,
    pub style_id: usize,
    pub stretch: usize,
    pub audio: Vec<usize>,
    pub duration_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<Utterance>,
    pub val: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Concatenated style-mapped motifs, each token repeated `stretch` times.
pub fn render_audio(text: &[usize], style_id: usize, stretch: usize, codebook: &Codebook) -> Result<Vec<usize>> {
    if style_id >= codebook.n_styles() {
        return Err(Error::OutOfRange {
            what: "style",
            index: style_id,
            bound: codebook.n_styles(),
        });
    }
    if stretch == 0 {
        return Err(Error::invalid("stretch must be at least 1"));
    }
    let mut audio = Vec::with_capacity(text.len() * codebook.motif_len() * stretch);
    for &sym in text {
        let spec = codebook.symbols.get(sym).ok_or(Error::OutOfRange {
            what: "symbol",
            index: sym,
            bound: codebook.symbols.len(),
        })?;
        for &local in &spec.base_motif {
            let token = spec.style_offsets[style_id] + local;
            audio.extend(std::iter::repeat_n(token, stretch));
        }
    }
    Ok(audio)
}

/// Samples distinct texts and renders each at every stretch factor. Splits
/// are filled in order and truncated to their exact sizes, so no text appears
/// in two splits.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<(Codebook, Splits)> {
    let codebook = Codebook::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let silence = SpecialTokens::new(cfg.audio_vocab).silence;
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut splits = Splits::default();
    let sizes = [cfg.train_size, cfg.val_size, cfg.test_size];
    let mut capacity: f64 = (cfg.min_text_len..=cfg.max_text_len)
        .map(|len| (cfg.n_symbols as f64).powi(len as i32))
        .sum();
    for (split, &size) in sizes.iter().enumerate() {
        let out = match split {
            0 => &mut splits.train,
            1 => &mut splits.val,
            _ => &mut splits.test,
        };
        while out.len() < size {
            if capacity < 1.0 {
                return Err(Error::Config("text space exhausted before filling the splits".into()));
            }
            let len = rng.random_range(cfg.min_text_len..=cfg.max_text_len);
            let text: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.n_symbols)).collect();
            if !seen.insert(text.clone()) {
                continue;
            }
            capacity -= 1.0;
            let style_id = rng.random_range(0..cfg.n_styles);
            for &stretch in &cfg.stretch_factors {
                if out.len() == size {
                    break;
                }
                let mut audio = render_audio(&text, style_id, stretch, &codebook)?;
                if cfg.silence_prob > 0.0 {
                    for tok in audio.iter_mut() {
                        if rng.random_bool(cfg.silence_prob) {
                            *tok = silence;
                        }
                    }
                }
                out.push(Utterance {
                    text: text.clone(),
                    style_id,
                    stretch,
                    duration_tokens: audio.len(),
                    audio,
                });
            }
        }
    }
    Ok((codebook, splits))
}

/// A stretch-1 rendering of `prompt_symbols` symbols absent from the
/// utterance's text, in the utterance's style. Deterministic in the text and
/// style.
pub fn prompt_for(utt: &Utterance, codebook: &Codebook, prompt_symbols: usize) -> Result<Vec<usize>> {
    if prompt_symbols == 0 {
        return Err(Error::invalid("prompt_symbols must be at least 1"));
    }
    let seed = utt
        .text
        .iter()
        .chain(std::iter::once(&utt.style_id))
        .fold(0xcbf2_9ce4_8422_2325u64, |h, &x| (h ^ x as u64).wrapping_mul(0x100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fresh: Vec<usize> = (0..codebook.symbols.len()).filter(|s| !utt.text.contains(s)).collect();
    if fresh.is_empty() {
        fresh = (0..codebook.symbols.len()).collect();
    }
    let symbols: Vec<usize> = (0..prompt_symbols).map(|_| fresh[rng.random_range(0..fresh.len())]).collect();
    render_audio(&symbols, utt.style_id, 1, codebook)
}

pub fn write_jsonl(path: &Path, utterances: &[Utterance]) -> Result<()> {
    let file = File::create(path).map_err(Error::file(path))?;
    let mut w = BufWriter::new(file);
    for u in utterances {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n").map_err(Error::file(path))?;
    }
    w.flush().map_err(Error::file(path))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Utterance>> {
    let file = File::open(path).map_err(Error::file(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(Error::file(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance = serde_json::from_str(&line)?;
        if u.duration_tokens != u.audio.len() {
            return Err(Error::invalid(format!(
                "{}: duration_tokens {} does not match audio length {}",
                path.display(),
                u.duration_tokens,
                u.audio.len()
            )));
        }
        out.push(u);
    }
    Ok(out)
}
