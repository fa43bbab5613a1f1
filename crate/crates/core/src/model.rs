//! The text encoder and denoiser bundled with their vocabulary.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioner::{ConditioningEmbedding, EncoderCache, EncoderConfig, TextEncoder, Vocabulary, ENCODER_ROOT};
use crate::diffusion::{Denoiser, DenoiserConfig, DENOISER_ROOT};
use crate::error::{Error, Result};
use crate::lora::{self, AdapterSet, LoraHost};
use crate::nn::{Module, Scalar};
use crate::seed::derive_labeled;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
}

impl ModelConfig {
    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        let encoder = EncoderConfig::with_vocab(vocab.len());
        Self {
            encoder,
            denoiser: DenoiserConfig {
                image_size: 32,
                widths: [8, 16, 32],
                cond_dim: encoder.embed_dim,
                time_dim: 32,
            },
        }
    }
}

impl ModelConfig {
    /// A very small configuration (4×4 images) for gradient checks and smoke tests.
    pub fn toy(vocab: &Vocabulary) -> Self {
        let encoder = EncoderConfig {
            embed_dim: 8,
            heads: 2,
            blocks: 1,
            ff_dim: 16,
            ..EncoderConfig::with_vocab(vocab.len())
        };
        Self {
            encoder,
            denoiser: DenoiserConfig {
                image_size: 4,
                widths: [3, 4, 5],
                cond_dim: encoder.embed_dim,
                time_dim: 4,
            },
        }
    }
}

/// Which model's adapters a policy update trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyTarget {
    TextEncoder,
    Denoiser,
    Both,
}

impl PolicyTarget {
    pub fn name(self) -> &'static str {
        match self {
            Self::TextEncoder => "text_encoder",
            Self::Denoiser => "denoiser",
            Self::Both => "both",
        }
    }

    pub fn includes_encoder(self) -> bool {
        matches!(self, Self::TextEncoder | Self::Both)
    }

    pub fn includes_denoiser(self) -> bool {
        matches!(self, Self::Denoiser | Self::Both)
    }
}

impl fmt::Display for PolicyTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_encoder" | "encoder" => Ok(Self::TextEncoder),
            "denoiser" => Ok(Self::Denoiser),
            "both" => Ok(Self::Both),
            _ => Err(Error::invalid(format!("unknown policy `{s}` (text_encoder, denoiser, both)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Models<S> {
    pub vocab: Vocabulary,
    pub encoder: TextEncoder<S>,
    pub denoiser: Denoiser<S>,
}

impl<S: Scalar> Models<S> {
    /// Freshly initialised models; encoder and denoiser draw from separate streams of `seed`.
    pub fn new(cfg: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if cfg.encoder.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder expects {} tokens, vocabulary has {}",
                cfg.encoder.vocab_size,
                vocab.len()
            )));
        }
        if cfg.denoiser.cond_dim != cfg.encoder.embed_dim {
            return Err(Error::Config("denoiser cond_dim must equal encoder embed_dim".into()));
        }
        let encoder = TextEncoder::new(cfg.encoder, &mut ChaCha8Rng::seed_from_u64(derive_labeled(seed, "encoder", 0)));
        let denoiser = Denoiser::new(cfg.denoiser, &mut ChaCha8Rng::seed_from_u64(derive_labeled(seed, "denoiser", 0)));
        Ok(Self {
            vocab,
            encoder,
            denoiser,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.cfg,
            denoiser: self.denoiser.cfg,
        }
    }

    pub fn tokens(&self, prompt: &str) -> Vec<u32> {
        let t = self.vocab.tokenize(prompt, self.encoder.cfg.max_tokens);
        if t.truncated {
            warn!("prompt truncated to {} tokens: {prompt:?}", self.encoder.cfg.max_tokens);
        }
        t.ids
    }

    pub fn encode(&self, prompt: &str) -> Result<ConditioningEmbedding<S>> {
        self.encoder.encode(&self.tokens(prompt))
    }

    pub fn encode_with_cache(&self, prompt: &str) -> Result<(ConditioningEmbedding<S>, EncoderCache<S>)> {
        self.encoder.forward(&self.tokens(prompt))
    }

    /// Attach adapters, routing each to the encoder or denoiser by layer-name prefix.
    pub fn attach(&mut self, set: &AdapterSet) -> Result<()> {
        check_routable(set)?;
        lora::attach(&mut self.encoder, &set.restricted_to(ENCODER_ROOT))?;
        lora::attach(&mut self.denoiser, &set.restricted_to(DENOISER_ROOT))
    }

    /// Fold adapters into the stored weights.
    pub fn merge(&mut self, set: &AdapterSet) -> Result<()> {
        check_routable(set)?;
        lora::merge_into(&mut self.encoder, &set.restricted_to(ENCODER_ROOT))?;
        lora::merge_into(&mut self.denoiser, &set.restricted_to(DENOISER_ROOT))
    }

    /// Adapters currently attached to the models selected by `target`.
    pub fn adapters(&self, target: PolicyTarget) -> AdapterSet {
        let mut set = AdapterSet::default();
        if target.includes_encoder() {
            set.adapters.extend(AdapterSet::extract(&self.encoder).adapters);
        }
        if target.includes_denoiser() {
            set.adapters.extend(AdapterSet::extract(&self.denoiser).adapters);
        }
        set
    }

    /// Freeze everything, then make only the adapter matrices of `target` trainable.
    pub fn train_only_lora(&mut self, target: PolicyTarget) {
        self.encoder.set_frozen(true);
        self.denoiser.set_frozen(true);
        let unfreeze = |name: &str, p: &mut crate::nn::Param<S>| {
            if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
                p.frozen = false;
            }
        };
        if target.includes_encoder() {
            self.encoder.params_mut(&mut |n, p| unfreeze(n, p));
        }
        if target.includes_denoiser() {
            self.denoiser.params_mut(&mut |n, p| unfreeze(n, p));
        }
    }

    pub fn zero_grad(&mut self) {
        self.encoder.zero_grad();
        self.denoiser.zero_grad();
    }

    pub fn modules_mut(&mut self) -> [&mut dyn Module<S>; 2] {
        [&mut self.encoder, &mut self.denoiser]
    }

    pub fn modules(&self) -> [&dyn Module<S>; 2] {
        [&self.encoder, &self.denoiser]
    }

    /// Default adapter targets for a policy.
    pub fn lora_targets(&self, target: PolicyTarget) -> Vec<String> {
        let mut t = Vec::new();
        if target.includes_encoder() {
            t.extend(self.encoder.default_lora_targets());
        }
        if target.includes_denoiser() {
            t.extend(self.denoiser.default_lora_targets());
        }
        t
    }

    /// Fresh adapters for `target` (`B = 0`).
    pub fn init_adapters(&self, target: PolicyTarget, rank: usize, alpha: f32, seed: u64) -> Result<AdapterSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_labeled(seed, "lora", 0));
        let mut set = AdapterSet::default();
        if target.includes_encoder() {
            let t = self.encoder.default_lora_targets();
            set.adapters.extend(AdapterSet::init(&self.encoder, &t, rank, alpha, &mut rng)?.adapters);
        }
        if target.includes_denoiser() {
            let t = self.denoiser.default_lora_targets();
            set.adapters.extend(AdapterSet::init(&self.denoiser, &t, rank, alpha, &mut rng)?.adapters);
        }
        Ok(set)
    }
}

fn check_routable(set: &AdapterSet) -> Result<()> {
    let (e, d) = (format!("{ENCODER_ROOT}."), format!("{DENOISER_ROOT}."));
    match set.adapters.keys().find(|k| !k.starts_with(&e) && !k.starts_with(&d)) {
        Some(k) => Err(Error::UnknownLayer(k.clone())),
        None => Ok(()),
    }
}

/// Which models an adapter set touches, from its layer names.
pub fn adapter_target(set: &AdapterSet) -> Option<PolicyTarget> {
    let enc = set.adapters.keys().any(|k| k.starts_with(&format!("{ENCODER_ROOT}.")));
    let den = set.adapters.keys().any(|k| k.starts_with(&format!("{DENOISER_ROOT}.")));
    match (enc, den) {
        (true, true) => Some(PolicyTarget::Both),
        (true, false) => Some(PolicyTarget::TextEncoder),
        (false, true) => Some(PolicyTarget::Denoiser),
        (false, false) => None,
    }
}
