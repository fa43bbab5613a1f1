//! Flat `key = value` run configuration.
//!
//! `#` starts a comment. Unknown and repeated keys are errors. Every key has a
//! default; [`RunConfig::to_text`] renders the fully resolved configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::conditioner::{EncoderConfig, Vocabulary};
use crate::diffusion::{build_schedule, DenoiserConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PolicyTarget};
use crate::rewards::{OracleConfig, RewardConfig};
use crate::toy_world::{Task, WorldConfig};
use crate::trainer::{Baseline, PpoConfig, TrainSettings};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub vocab_path: Option<PathBuf>,
    pub base_checkpoint: Option<PathBuf>,

    pub dataset_size: usize,
    pub dataset_seed: u64,
    pub image_size: usize,
    pub single_fraction: f64,

    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ff_dim: usize,
    pub max_tokens: usize,
    pub widths: [usize; 3],
    pub time_dim: usize,

    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub guidance: f64,

    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub empty_prompt_prob: f64,

    pub policy: PolicyTarget,
    pub reward: String,
    pub task: Task,
    pub clip: f64,
    pub epochs_per_buffer: usize,
    pub rollouts_per_buffer: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub total_buffers: usize,
    pub advantage_baseline: Baseline,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    pub checkpoint_every: usize,

    pub fg_threshold: f32,
    pub min_component_area: usize,
    pub jpeg_quality: u8,
    pub external_timeout_secs: f64,

    pub sample_count: usize,
    pub prompts: Vec<String>,
    pub grid_cols: usize,
    pub eval_samples: usize,
    pub eval_reward: String,
    pub fuse_weights: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            vocab_path: None,
            base_checkpoint: None,
            dataset_size: 2000,
            dataset_seed: 1,
            image_size: 32,
            single_fraction: 0.6,
            embed_dim: 64,
            heads: 4,
            blocks: 2,
            ff_dim: 128,
            max_tokens: 12,
            widths: [8, 16, 32],
            time_dim: 32,
            steps: 50,
            beta_min: 0.002,
            beta_max: 0.4,
            guidance: 3.0,
            pretrain_epochs: 20,
            batch_size: 32,
            pretrain_lr: 2e-3,
            empty_prompt_prob: 0.1,
            policy: PolicyTarget::TextEncoder,
            reward: "incompressibility".into(),
            task: Task::Color,
            clip: 0.1,
            epochs_per_buffer: 2,
            rollouts_per_buffer: 64,
            minibatch_size: 128,
            learning_rate: 1e-4,
            grad_clip_norm: 1.0,
            total_buffers: 30,
            advantage_baseline: Baseline::Buffer,
            lora_rank: 4,
            lora_alpha: 1.0,
            checkpoint_every: 5,
            fg_threshold: 0.15,
            min_component_area: 8,
            jpeg_quality: 95,
            external_timeout_secs: 30.0,
            sample_count: 16,
            prompts: Vec::new(),
            grid_cols: 8,
            eval_samples: 50,
            eval_reward: String::new(),
            fuse_weights: Vec::new(),
        }
    }
}

/// Every key with its documentation, in rendering order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for initialisation, rollouts and sampling"),
    ("out_dir", "output directory (overridden by --out)"),
    ("vocab_path", "vocabulary file; empty means the built-in caption grammar"),
    ("base_checkpoint", "pretrained TFCKPT01 checkpoint used by rl-finetune, sample and eval"),
    ("dataset_size", "number of toy-world training images"),
    ("dataset_seed", "seed of the training dataset"),
    ("image_size", "image side length in pixels"),
    ("single_fraction", "fraction of single-object scenes in the dataset"),
    ("embed_dim", "text encoder width"),
    ("heads", "attention heads"),
    ("blocks", "transformer blocks"),
    ("ff_dim", "feed-forward hidden width"),
    ("max_tokens", "token positions including BOS/EOS"),
    ("widths", "denoiser channel widths at full, half and quarter resolution"),
    ("time_dim", "timestep embedding width"),
    ("steps", "diffusion steps T"),
    ("beta_min", "first beta of the linear schedule"),
    ("beta_max", "last beta of the linear schedule"),
    ("guidance", "classifier-free guidance scale"),
    ("pretrain_epochs", "denoiser pretraining epochs"),
    ("batch_size", "pretraining batch size"),
    ("pretrain_lr", "pretraining Adam learning rate"),
    ("empty_prompt_prob", "probability of training on the empty prompt"),
    ("policy", "text_encoder | denoiser | both"),
    ("reward", "reward name, or external:<command>"),
    ("task", "prompt task: color | composition | count | location"),
    ("clip", "PPO clip range"),
    ("epochs_per_buffer", "PPO passes over each buffer"),
    ("rollouts_per_buffer", "trajectories per buffer"),
    ("minibatch_size", "PPO minibatch size in timestep samples"),
    ("learning_rate", "adapter Adam learning rate"),
    ("grad_clip_norm", "global gradient norm limit"),
    ("total_buffers", "number of buffers to train"),
    ("advantage_baseline", "buffer | prompt: reward baseline when forming advantages"),
    ("lora_rank", "adapter rank"),
    ("lora_alpha", "adapter scale"),
    ("checkpoint_every", "buffers between resumable checkpoints"),
    ("fg_threshold", "oracle foreground threshold"),
    ("min_component_area", "smallest counted component in pixels"),
    ("jpeg_quality", "JPEG quality for the compression rewards"),
    ("external_timeout_secs", "timeout for external scorers"),
    ("sample_count", "images per prompt for the sample command"),
    ("prompts", "prompts separated by `|`; empty means the task's seen prompts"),
    ("grid_cols", "columns of sample grids"),
    ("eval_samples", "images per prompt for the eval command"),
    ("eval_reward", "reward scored by eval; empty means the task's reward"),
    ("fuse_weights", "comma-separated weights for fuse"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse {v:?}")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn join<T: ToString>(v: &[T], sep: &str) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "vocab_path" => self.vocab_path = opt_path(v),
            "base_checkpoint" => self.base_checkpoint = opt_path(v),
            "dataset_size" => self.dataset_size = parse(key, v)?,
            "dataset_seed" => self.dataset_seed = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "single_fraction" => self.single_fraction = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "blocks" => self.blocks = parse(key, v)?,
            "ff_dim" => self.ff_dim = parse(key, v)?,
            "max_tokens" => self.max_tokens = parse(key, v)?,
            "widths" => {
                let w: Vec<usize> = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
                self.widths = w
                    .try_into()
                    .map_err(|_| Error::Config("`widths` needs exactly three values".into()))?;
            }
            "time_dim" => self.time_dim = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "beta_min" => self.beta_min = parse(key, v)?,
            "beta_max" => self.beta_max = parse(key, v)?,
            "guidance" => self.guidance = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "empty_prompt_prob" => self.empty_prompt_prob = parse(key, v)?,
            "policy" => self.policy = v.parse()?,
            "reward" => self.reward = v.to_string(),
            "task" => self.task = v.parse()?,
            "clip" => self.clip = parse(key, v)?,
            "epochs_per_buffer" => self.epochs_per_buffer = parse(key, v)?,
            "rollouts_per_buffer" => self.rollouts_per_buffer = parse(key, v)?,
            "minibatch_size" => self.minibatch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "grad_clip_norm" => self.grad_clip_norm = parse(key, v)?,
            "total_buffers" => self.total_buffers = parse(key, v)?,
            "advantage_baseline" => self.advantage_baseline = v.parse()?,
            "lora_rank" => self.lora_rank = parse(key, v)?,
            "lora_alpha" => self.lora_alpha = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "fg_threshold" => self.fg_threshold = parse(key, v)?,
            "min_component_area" => self.min_component_area = parse(key, v)?,
            "jpeg_quality" => self.jpeg_quality = parse(key, v)?,
            "external_timeout_secs" => self.external_timeout_secs = parse(key, v)?,
            "sample_count" => self.sample_count = parse(key, v)?,
            "prompts" => {
                self.prompts = v.split('|').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
            }
            "grid_cols" => self.grid_cols = parse(key, v)?,
            "eval_samples" => self.eval_samples = parse(key, v)?,
            "eval_reward" => self.eval_reward = v.to_string(),
            "fuse_weights" => {
                self.fuse_weights = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
                }
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "vocab_path" => show_path(&self.vocab_path),
            "base_checkpoint" => show_path(&self.base_checkpoint),
            "dataset_size" => self.dataset_size.to_string(),
            "dataset_seed" => self.dataset_seed.to_string(),
            "image_size" => self.image_size.to_string(),
            "single_fraction" => self.single_fraction.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "heads" => self.heads.to_string(),
            "blocks" => self.blocks.to_string(),
            "ff_dim" => self.ff_dim.to_string(),
            "max_tokens" => self.max_tokens.to_string(),
            "widths" => join(&self.widths, ","),
            "time_dim" => self.time_dim.to_string(),
            "steps" => self.steps.to_string(),
            "beta_min" => self.beta_min.to_string(),
            "beta_max" => self.beta_max.to_string(),
            "guidance" => self.guidance.to_string(),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "empty_prompt_prob" => self.empty_prompt_prob.to_string(),
            "policy" => self.policy.to_string(),
            "reward" => self.reward.clone(),
            "task" => self.task.to_string(),
            "clip" => self.clip.to_string(),
            "epochs_per_buffer" => self.epochs_per_buffer.to_string(),
            "rollouts_per_buffer" => self.rollouts_per_buffer.to_string(),
            "minibatch_size" => self.minibatch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "grad_clip_norm" => self.grad_clip_norm.to_string(),
            "total_buffers" => self.total_buffers.to_string(),
            "advantage_baseline" => self.advantage_baseline.to_string(),
            "lora_rank" => self.lora_rank.to_string(),
            "lora_alpha" => self.lora_alpha.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "fg_threshold" => self.fg_threshold.to_string(),
            "min_component_area" => self.min_component_area.to_string(),
            "jpeg_quality" => self.jpeg_quality.to_string(),
            "external_timeout_secs" => self.external_timeout_secs.to_string(),
            "sample_count" => self.sample_count.to_string(),
            "prompts" => join(&self.prompts, "|"),
            "grid_cols" => self.grid_cols.to_string(),
            "eval_samples" => self.eval_samples.to_string(),
            "eval_reward" => self.eval_reward.clone(),
            "fuse_weights" => join(&self.fuse_weights, ","),
            _ => return None,
        })
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: `{k}` given twice", no + 1)));
            }
            cfg.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&fs::read_to_string(path)?)
    }

    /// Resolved configuration with every key, one per line, documented.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.ppo().validate()?;
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::Config("image_size must be a positive multiple of 4".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config("embed_dim must be divisible by heads".into()));
        }
        if self.widths.iter().any(|&w| w == 0 || w > 64) {
            return Err(Error::Config("denoiser widths must lie in 1..=64".into()));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        if self.max_tokens < 2 {
            return Err(Error::Config("max_tokens must leave room for BOS and EOS".into()));
        }
        if self.batch_size == 0 || self.grid_cols == 0 {
            return Err(Error::Config("batch_size and grid_cols must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.empty_prompt_prob) || !(0.0..=1.0).contains(&self.single_fraction) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(Error::Config("jpeg_quality must lie in 1..=100".into()));
        }
        if !(self.external_timeout_secs > 0.0) {
            return Err(Error::Config("external_timeout_secs must be positive".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        match &self.vocab_path {
            Some(p) => Vocabulary::load(p),
            None => Ok(Vocabulary::grammar()),
        }
    }

    pub fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        let encoder = EncoderConfig {
            vocab_size: vocab.len(),
            max_tokens: self.max_tokens,
            embed_dim: self.embed_dim,
            heads: self.heads,
            blocks: self.blocks,
            ff_dim: self.ff_dim,
        };
        ModelConfig {
            encoder,
            denoiser: DenoiserConfig {
                image_size: self.image_size,
                widths: self.widths,
                cond_dim: self.embed_dim,
                time_dim: self.time_dim,
            },
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        build_schedule(self.steps, self.beta_min, self.beta_max).map_err(|e| Error::Config(e.to_string()))
    }

    /// World geometry; object sizes and gaps scale with `image_size / 32`.
    pub fn world(&self) -> WorldConfig {
        let d = WorldConfig::default();
        let k = self.image_size as f64 / d.image_size as f64;
        WorldConfig {
            image_size: self.image_size,
            single_fraction: self.single_fraction,
            single_radius: d.single_radius * k,
            count_radius: d.count_radius * k,
            pair_radius: d.pair_radius * k,
            gap: d.gap * k,
            ..d
        }
    }

    pub fn rewards(&self) -> RewardConfig {
        RewardConfig {
            oracle: OracleConfig {
                fg_threshold: self.fg_threshold,
                min_component_area: self.min_component_area,
                ..OracleConfig::default()
            },
            jpeg_quality: self.jpeg_quality,
            external_timeout: Duration::from_secs_f64(self.external_timeout_secs),
        }
    }

    pub fn ppo(&self) -> PpoConfig {
        PpoConfig {
            clip: self.clip,
            epochs_per_buffer: self.epochs_per_buffer,
            rollouts_per_buffer: self.rollouts_per_buffer,
            minibatch_size: self.minibatch_size,
            learning_rate: self.learning_rate,
            policy_target: self.policy,
            grad_clip_norm: self.grad_clip_norm,
            total_buffers: self.total_buffers,
            baseline: self.advantage_baseline,
        }
    }

    pub fn train_settings(&self, workers: usize) -> TrainSettings {
        let mut metadata = std::collections::BTreeMap::new();
        metadata.insert("task".to_string(), self.task.to_string());
        TrainSettings {
            ppo: self.ppo(),
            guidance: self.guidance,
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            checkpoint_every: self.checkpoint_every,
            seed: self.seed,
            workers,
            metadata,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_render_and_reparse() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        assert_eq!(RunConfig::parse_str(&text).unwrap(), cfg);
        for (k, _) in KEYS {
            assert!(text.contains(&format!("\n{k} = ")) || text.contains(&format!("{k} = ")));
        }
    }

    #[test]
    fn every_field_has_a_key() {
        let mut cfg = RunConfig::default();
        for (k, _) in KEYS {
            let v = cfg.get(k).unwrap();
            cfg.set(k, &v).unwrap();
        }
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn comments_overrides_and_errors() {
        let cfg = RunConfig::parse_str("# c\nsteps = 20 # fewer\nwidths = 4, 8, 16\nprompts = a red circle | two blue squares\n").unwrap();
        assert_eq!(cfg.steps, 20);
        assert_eq!(cfg.widths, [4, 8, 16]);
        assert_eq!(cfg.prompts, vec!["a red circle", "two blue squares"]);
        assert!(RunConfig::parse_str("stepz = 3").is_err());
        assert!(RunConfig::parse_str("steps = 3\nsteps = 4").is_err());
        assert!(RunConfig::parse_str("steps").is_err());
        assert!(RunConfig::parse_str("clip = 1.5").is_err());
        assert!(RunConfig::parse_str("widths = 8,16").is_err());
        assert!(RunConfig::parse_str("policy = critic").is_err());
    }
}
