//! Minimal trainable encoder-decoder transformer with the four time-prompt
//! injection variants.
//!
//! Architecture: tied input/output embeddings, learned positional
//! embeddings, pre-layer-norm blocks, ReLU feed-forward, no embedding
//! rescaling. Parameters live in one flat vector addressed through a named
//! layout so the optimizer, checkpoints, and finite-difference checks all
//! see the same coordinates.

mod checkpoint;
mod decode;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use decode::{decode_beam, decode_greedy, sequence_log_prob};
pub use train::{grad_check, train, GradCheckReport, TrainError, TrainHyper, TrainLog};

use std::collections::HashMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;
use crate::prompts::{
    linear_prompt_vectors, normalize_date_scalars, render_textual_prompt, LinearPromptParams,
    TextualTemplate, DEFAULT_DAY_SCALE, DEFAULT_MONTH_SCALE, DEFAULT_YEAR_CENTER,
    DEFAULT_YEAR_SCALE,
};
use crate::temporal::CalendarDate;
use crate::tokenizer::{encode, TokenId, Vocabulary, BOS, EOS, PAD, SEP};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("d_model {0} not divisible by n_heads {1}")]
    HeadMismatch(usize, usize),
    #[error("assembled {stream} stream length {len} exceeds max_len {max}")]
    TooLong { stream: &'static str, len: usize, max: usize },
    #[error("sample has an empty {0} sequence")]
    EmptySequence(&'static str),
    #[error("variant requires linear prompt parameters but none are present")]
    MissingPromptParams,
    #[error("loss mask selects no positions")]
    AllMasked,
    #[error(transparent)]
    Prompt(#[from] crate::prompts::PromptError),
}

/// Which prompt mechanism is injected, and where. Exactly one per model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PromptVariant {
    None,
    EncText { template: u8 },
    EncLinear,
    DecText { template: u8 },
    DecLinear,
}

impl PromptVariant {
    pub const ALL_DEFAULT: [PromptVariant; 5] = [
        PromptVariant::None,
        PromptVariant::EncText { template: crate::prompts::DEFAULT_TEMPLATE_ID },
        PromptVariant::EncLinear,
        PromptVariant::DecText { template: crate::prompts::DEFAULT_TEMPLATE_ID },
        PromptVariant::DecLinear,
    ];

    pub fn uses_linear_prompt(self) -> bool {
        matches!(self, PromptVariant::EncLinear | PromptVariant::DecLinear)
    }

    pub fn label(self) -> String {
        match self {
            PromptVariant::None => "none".into(),
            PromptVariant::EncText { template } => format!("enc-text:{template}"),
            PromptVariant::EncLinear => "enc-linear".into(),
            PromptVariant::DecText { template } => format!("dec-text:{template}"),
            PromptVariant::DecLinear => "dec-linear".into(),
        }
    }

    /// Parses "none", "enc-text", "enc-text:1", "enc-linear", "dec-text",
    /// "dec-linear".
    pub fn parse(text: &str) -> Result<Self, String> {
        let (name, template) = match text.split_once(':') {
            Some((n, t)) => {
                let id: u8 = t.parse().map_err(|_| format!("bad template id {t:?}"))?;
                TextualTemplate::new(id).map_err(|e| e.to_string())?;
                (n, id)
            }
            None => (text, crate::prompts::DEFAULT_TEMPLATE_ID),
        };
        match name {
            "none" => Ok(PromptVariant::None),
            "enc-text" => Ok(PromptVariant::EncText { template }),
            "enc-linear" => Ok(PromptVariant::EncLinear),
            "dec-text" => Ok(PromptVariant::DecText { template }),
            "dec-linear" => Ok(PromptVariant::DecLinear),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// The desk-scale reference configuration.
    pub fn reference(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            max_len: 64,
            dropout_rate: 0.1,
            seed,
        }
    }

    /// A tiny configuration for finite-difference checks.
    pub fn tiny(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 16,
            max_len: 32,
            dropout_rate: 0.0,
            seed,
        }
    }
}

/// One training/evaluation record after tokenization.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedSample {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub timestamp: CalendarDate,
}

impl TimedSample {
    pub fn from_record(
        record: &crate::data::CorpusRecord,
        vocab: &Vocabulary,
    ) -> Result<Self, ModelError> {
        let source = encode(vocab, &record.source);
        let target = encode(vocab, &record.target);
        if source.is_empty() {
            return Err(ModelError::EmptySequence("source"));
        }
        if target.is_empty() {
            return Err(ModelError::EmptySequence("target"));
        }
        Ok(Self { source, target, timestamp: record.timestamp })
    }
}

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// Names, shapes, and flat offsets of every parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    entries: Vec<(String, Vec<usize>, usize)>, // name, shape, offset
    by_name: HashMap<String, usize>,
    total: usize,
}

impl ParamLayout {
    fn build(config: &ModelConfig, variant: PromptVariant) -> Self {
        let d = config.d_model;
        let ff = config.d_ff;
        let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
        entries.push(("embed".into(), vec![config.vocab_size, d]));
        entries.push(("pos".into(), vec![config.max_len, d]));
        let ln = |name: String, entries: &mut Vec<(String, Vec<usize>)>| {
            entries.push((format!("{name}.g"), vec![d]));
            entries.push((format!("{name}.b"), vec![d]));
        };
        let attn = |name: String, entries: &mut Vec<(String, Vec<usize>)>| {
            for w in ["wq", "wk", "wv", "wo"] {
                entries.push((format!("{name}.{w}"), vec![d, d]));
            }
        };
        let ffn = |name: String, entries: &mut Vec<(String, Vec<usize>)>| {
            entries.push((format!("{name}.w1"), vec![d, ff]));
            entries.push((format!("{name}.b1"), vec![ff]));
            entries.push((format!("{name}.w2"), vec![ff, d]));
            entries.push((format!("{name}.b2"), vec![d]));
        };
        for i in 0..config.n_enc_layers {
            ln(format!("enc.{i}.ln1"), &mut entries);
            attn(format!("enc.{i}.attn"), &mut entries);
            ln(format!("enc.{i}.ln2"), &mut entries);
            ffn(format!("enc.{i}.ff"), &mut entries);
        }
        ln("enc.ln_f".into(), &mut entries);
        for i in 0..config.n_dec_layers {
            ln(format!("dec.{i}.ln1"), &mut entries);
            attn(format!("dec.{i}.self"), &mut entries);
            ln(format!("dec.{i}.ln2"), &mut entries);
            attn(format!("dec.{i}.cross"), &mut entries);
            ln(format!("dec.{i}.ln3"), &mut entries);
            ffn(format!("dec.{i}.ff"), &mut entries);
        }
        ln("dec.ln_f".into(), &mut entries);
        if variant.uses_linear_prompt() {
            entries.push(("prompt.w_year".into(), vec![d]));
            entries.push(("prompt.w_month".into(), vec![d]));
            entries.push(("prompt.w_day".into(), vec![d]));
        }
        let mut offset = 0;
        let mut placed = Vec::with_capacity(entries.len());
        let mut by_name = HashMap::new();
        for (i, (name, shape)) in entries.into_iter().enumerate() {
            let len: usize = shape.iter().product();
            by_name.insert(name.clone(), i);
            placed.push((name, shape, offset));
            offset += len;
        }
        Self { entries: placed, by_name, total: offset }
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, ..)| n.as_str())
    }

    pub fn shape(&self, name: &str) -> &[usize] {
        let i = self.by_name[name];
        &self.entries[i].1
    }

    pub fn range(&self, name: &str) -> std::ops::Range<usize> {
        let i = *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let (_, shape, offset) = &self.entries[i];
        *offset..*offset + shape.iter().product::<usize>()
    }
}

/// All learnable arrays of the model, flat, plus their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<F> {
    pub config: ModelConfig,
    pub variant: PromptVariant,
    pub layout: Arc<ParamLayout>,
    pub data: Vec<F>,
}

impl<F: Scalar> ModelParameters<F> {
    /// Gaussian(0, 0.02^2) init for weights and embeddings, identity for
    /// layer norms, seeded from `config.seed`.
    pub fn init(config: &ModelConfig, variant: PromptVariant) -> Result<Self, ModelError> {
        if config.d_model % config.n_heads != 0 {
            return Err(ModelError::HeadMismatch(config.d_model, config.n_heads));
        }
        let layout = Arc::new(ParamLayout::build(config, variant));
        let mut data = vec![F::zero(); layout.total_len()];
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f64, 0.02).expect("valid stddev");
        for (name, _, _) in &layout.entries {
            let slice = &mut data[layout.range(name)];
            if name.ends_with(".g") {
                slice.fill(F::one());
            } else if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                slice.fill(F::zero());
            } else {
                for x in slice {
                    *x = F::from_f64_lossy(normal.sample(&mut rng));
                }
            }
        }
        let mut params = Self { config: *config, variant, layout, data };
        if variant.uses_linear_prompt() {
            // Match the documented prompt initialization exactly.
            let prompt = crate::prompts::init_linear_prompt_params::<F>(
                config.d_model,
                crate::seeds::derive_seed(config.seed, "prompt-init"),
            )?;
            params.get_mut("prompt.w_year").copy_from_slice(&prompt.w_year);
            params.get_mut("prompt.w_month").copy_from_slice(&prompt.w_month);
            params.get_mut("prompt.w_day").copy_from_slice(&prompt.w_day);
        }
        Ok(params)
    }

    pub fn get(&self, name: &str) -> &[F] {
        &self.data[self.layout.range(name)]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [F] {
        let range = self.layout.range(name);
        &mut self.data[range]
    }

    /// The linear prompt parameters, when the variant carries them.
    pub fn linear_prompt_params(&self) -> Option<LinearPromptParams<F>> {
        if !self.variant.uses_linear_prompt() {
            return None;
        }
        Some(LinearPromptParams {
            w_year: self.get("prompt.w_year").to_vec(),
            w_month: self.get("prompt.w_month").to_vec(),
            w_day: self.get("prompt.w_day").to_vec(),
            year_center: DEFAULT_YEAR_CENTER,
            year_scale: DEFAULT_YEAR_SCALE,
            month_scale: DEFAULT_MONTH_SCALE,
            day_scale: DEFAULT_DAY_SCALE,
        })
    }

    /// Flat coordinate ranges of the prompt direction vectors.
    pub fn prompt_coordinate_ranges(&self) -> Vec<std::ops::Range<usize>> {
        if !self.variant.uses_linear_prompt() {
            return Vec::new();
        }
        ["prompt.w_year", "prompt.w_month", "prompt.w_day"]
            .iter()
            .map(|n| self.layout.range(n))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Input assembly
// ---------------------------------------------------------------------------

/// One position of an assembled stream: either a vocabulary token or a
/// pre-embedded vector injected at the embedding layer.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamItem<F> {
    Token(TokenId),
    Vector(Vec<F>),
}

/// Which prompt direction vector produced an injected position, with the
/// scalar it was scaled by; lets gradients flow back into the projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptInjection<F> {
    pub scalars: [F; 3],
    pub site_is_encoder: bool,
}

/// Fully assembled model input for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Assembled<F> {
    pub enc: Vec<StreamItem<F>>,
    pub dec: Vec<StreamItem<F>>,
    /// Next-token targets aligned with `dec`; `targets[t]` is what the
    /// position reading `dec[t]` must predict.
    pub targets: Vec<TokenId>,
    /// Loss mask aligned with `targets`; PAD targets are always masked.
    pub mask: Vec<bool>,
    pub injection: Option<PromptInjection<F>>,
}

fn tokens<F>(ids: impl IntoIterator<Item = TokenId>) -> Vec<StreamItem<F>> {
    ids.into_iter().map(StreamItem::Token).collect()
}

/// Builds encoder/decoder streams, next-token targets, and the loss mask for
/// the given variant. Textual prompts are prepended as tokens; linear
/// prompts as three vectors at the embedding layer. Decoder prompt positions
/// carry no loss.
pub fn assemble_inputs<F: Scalar>(
    sample: &TimedSample,
    variant: PromptVariant,
    vocab: &Vocabulary,
    params: &ModelParameters<F>,
) -> Result<Assembled<F>, ModelError> {
    if sample.source.is_empty() {
        return Err(ModelError::EmptySequence("source"));
    }
    if sample.target.is_empty() {
        return Err(ModelError::EmptySequence("target"));
    }
    let rendered = |template: u8| -> Result<Vec<TokenId>, ModelError> {
        let template = TextualTemplate::new(template)?;
        Ok(encode(vocab, &render_textual_prompt(sample.timestamp, template)))
    };
    let prompt_vectors = || -> Result<(Vec<StreamItem<F>>, PromptInjection<F>), ModelError> {
        let prompt = params.linear_prompt_params().ok_or(ModelError::MissingPromptParams)?;
        let (s_y, s_m, s_d) = normalize_date_scalars(sample.timestamp, &prompt);
        let vectors = linear_prompt_vectors(sample.timestamp, &prompt);
        Ok((
            vectors.into_iter().map(StreamItem::Vector).collect(),
            PromptInjection { scalars: [s_y, s_m, s_d], site_is_encoder: true },
        ))
    };

    let mut enc: Vec<StreamItem<F>>;
    let mut dec: Vec<StreamItem<F>>;
    let mut targets: Vec<TokenId>;
    let mut mask: Vec<bool>;
    let mut injection = None;

    // Encoder stream.
    match variant {
        PromptVariant::EncText { template } => {
            let mut ids = rendered(template)?;
            ids.push(SEP);
            ids.extend(&sample.source);
            ids.push(EOS);
            enc = tokens(ids);
        }
        PromptVariant::EncLinear => {
            let (vectors, inj) = prompt_vectors()?;
            injection = Some(inj);
            enc = vectors;
            enc.extend(tokens::<F>(sample.source.iter().copied()));
            enc.push(StreamItem::Token(EOS));
        }
        _ => {
            let mut ids = sample.source.clone();
            ids.push(EOS);
            enc = tokens(ids);
        }
    }

    // Decoder stream, next-token targets, and mask.
    match variant {
        PromptVariant::DecText { template } => {
            let prompt_ids = rendered(template)?;
            let mut ids = prompt_ids.clone();
            ids.push(BOS);
            ids.extend(&sample.target);
            dec = tokens(ids);
            // Predictions of the remaining prompt tokens and of BOS are
            // unmasked conditioning context, not training targets.
            targets = prompt_ids[1..].to_vec();
            targets.push(BOS);
            targets.extend(&sample.target);
            targets.push(EOS);
            mask = vec![false; prompt_ids.len()];
            mask.extend(std::iter::repeat(true).take(sample.target.len() + 1));
        }
        PromptVariant::DecLinear => {
            let (vectors, mut inj) = prompt_vectors()?;
            inj.site_is_encoder = false;
            injection = Some(inj);
            dec = vectors;
            dec.push(StreamItem::Token(BOS));
            dec.extend(tokens::<F>(sample.target.iter().copied()));
            targets = vec![PAD; 3];
            targets.extend(&sample.target);
            targets.push(EOS);
            mask = vec![false; 3];
            mask.extend(std::iter::repeat(true).take(sample.target.len() + 1));
        }
        _ => {
            let mut ids = vec![BOS];
            ids.extend(&sample.target);
            dec = tokens(ids);
            targets = sample.target.clone();
            targets.push(EOS);
            mask = vec![true; targets.len()];
        }
    }

    // PAD is never a loss target.
    for (m, &t) in mask.iter_mut().zip(&targets) {
        if t == PAD {
            *m = false;
        }
    }

    let max = params.config.max_len;
    if enc.len() > max {
        return Err(ModelError::TooLong { stream: "encoder", len: enc.len(), max });
    }
    if dec.len() > max {
        return Err(ModelError::TooLong { stream: "decoder", len: dec.len(), max });
    }
    debug_assert_eq!(dec.len(), targets.len());
    debug_assert_eq!(dec.len(), mask.len());
    Ok(Assembled { enc, dec, targets, mask, injection })
}

/// Evaluation-mode forward pass: logits, one row per decoder position.
pub fn forward<F: Scalar>(params: &ModelParameters<F>, assembled: &Assembled<F>) -> Vec<Vec<F>> {
    let pass = net::run_forward(params, assembled, None);
    let v = params.config.vocab_size;
    pass.logits.chunks(v).map(|row| row.to_vec()).collect()
}

/// Mean token cross-entropy over positions with mask = 1.
pub fn loss<F: Scalar>(
    logits: &[Vec<F>],
    targets: &[TokenId],
    mask: &[bool],
) -> Result<F, ModelError> {
    assert_eq!(logits.len(), targets.len());
    assert_eq!(logits.len(), mask.len());
    let mut total = F::zero();
    let mut count = 0usize;
    for ((row, &target), &m) in logits.iter().zip(targets).zip(mask) {
        if !m || target == PAD {
            continue;
        }
        total += net::cross_entropy(row, target as usize);
        count += 1;
    }
    if count == 0 {
        return Err(ModelError::AllMasked);
    }
    Ok(total / F::from_f64_lossy(count as f64))
}
