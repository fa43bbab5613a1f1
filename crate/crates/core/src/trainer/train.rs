use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ppo::{ppo_update, PpoConfig};
use super::rollout::{collect_rollouts, mean_std};
use crate::checkpoint::{load_tensors, optimizer_tensors, restore_optimizer, save_tensors};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::lora::{load_adapters, save_adapters, AdapterSet};
use crate::model::{Models, PolicyTarget};
use crate::nn::{Adam, Scalar};
use crate::rewards::RewardSpec;
use crate::seed::derive_labeled;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
const CKPT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub ppo: PpoConfig,
    pub guidance: f64,
    pub lora_rank: usize,
    pub lora_alpha: f32,
    /// Save a resumable checkpoint every this many buffers.
    pub checkpoint_every: usize,
    pub seed: u64,
    pub workers: usize,
    /// Extra key/value pairs written into the adapter files.
    pub metadata: BTreeMap<String, String>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            ppo: PpoConfig::default(),
            guidance: 3.0,
            lora_rank: 4,
            lora_alpha: 1.0,
            checkpoint_every: 5,
            seed: 0,
            workers: 1,
            metadata: BTreeMap::new(),
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferMetrics {
    pub buffer: usize,
    pub mean_reward: f64,
    pub std_reward: f64,
    pub min_reward: f64,
    pub max_reward: f64,
    pub invalid: usize,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub first_minibatch_clip_fraction: f64,
    pub first_minibatch_max_ratio_deviation: f64,
    pub policy_loss: f64,
    pub grad_norm: f64,
    pub skipped: usize,
}

#[derive(Serialize, Deserialize)]
struct Progress {
    next_buffer: usize,
}

pub struct TrainOutcome<S> {
    pub adapters: AdapterSet,
    pub metrics: Vec<BufferMetrics>,
    pub models: Models<S>,
    /// Adapter files written, one per trained model.
    pub adapter_files: Vec<PathBuf>,
}

/// File name of the final adapters for one model.
pub fn adapter_file_name(target: PolicyTarget) -> String {
    format!("adapters_{}.tflora", target.name())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn keep_lines(path: &Path, n: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = fs::read_to_string(path)?;
    let kept: String = text.lines().take(n).map(|l| format!("{l}\n")).collect();
    fs::write(path, kept)?;
    Ok(())
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

/// DDPO training of LoRA adapters on a copy of `base`.
///
/// Each buffer collects `rollouts_per_buffer` trajectories and runs
/// [`ppo_update`]. Metrics go to `metrics.jsonl` (deterministic) and wall-clock
/// times to `timing.jsonl`. If `out_dir` holds a checkpoint from an earlier,
/// interrupted run with the same settings, training resumes from it.
pub fn train<S: Scalar>(
    base: &Models<S>,
    sched: &NoiseSchedule,
    reward: &RewardSpec,
    prompts: &[String],
    settings: &TrainSettings,
    out_dir: &Path,
) -> Result<TrainOutcome<S>> {
    let cfg = &settings.ppo;
    cfg.validate()?;
    if settings.checkpoint_every == 0 {
        return Err(Error::Config("checkpoint_every must be at least 1".into()));
    }
    let target = cfg.policy_target;
    fs::create_dir_all(out_dir.join(CKPT_DIR))?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let timing_path = out_dir.join(TIMING_FILE);
    let ckpt = out_dir.join(CKPT_DIR);
    let progress_path = ckpt.join("progress.json");

    let mut models = base.clone();
    let mut opt = Adam::new(cfg.learning_rate);
    let mut start = 0;
    let mut metrics = Vec::new();
    if progress_path.exists() {
        let progress: Progress = serde_json::from_str(&fs::read_to_string(&progress_path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", progress_path.display())))?;
        start = progress.next_buffer;
        models.attach(&load_adapters(&ckpt.join("adapters.tflora"))?)?;
        restore_optimizer(&mut opt, &load_tensors(&ckpt.join("optimizer.tfckpt"))?)?;
        keep_lines(&metrics_path, start)?;
        keep_lines(&timing_path, start)?;
        for line in fs::read_to_string(&metrics_path).unwrap_or_default().lines() {
            metrics.push(serde_json::from_str(line).map_err(|e| Error::Config(format!("metrics log: {e}")))?);
        }
        info!("resuming at buffer {start}");
    } else {
        let fresh = models.init_adapters(target, settings.lora_rank, settings.lora_alpha, settings.seed)?;
        models.attach(&fresh)?;
        fs::write(&metrics_path, "")?;
        fs::write(&timing_path, "")?;
    }
    models.train_only_lora(target);

    for b in start..cfg.total_buffers {
        let t0 = Instant::now();
        let mut buffer = collect_rollouts(
            prompts,
            &models,
            sched,
            cfg.rollouts_per_buffer,
            reward,
            settings.guidance,
            settings.seed,
            b as u64,
            settings.workers,
        )?;
        buffer.set_baseline(cfg.baseline);
        let rewards = buffer.rewards();
        let (mean, std) = mean_std(&rewards);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_labeled(settings.seed, "shuffle", b as u64));
        let stats = match ppo_update(&buffer, &mut models, sched, cfg, &mut opt, &mut rng) {
            Ok(s) => s,
            Err(e) => {
                let diag = serde_json::json!({
                    "buffer": b,
                    "error": e.to_string(),
                    "rewards": rewards,
                    "prompts": buffer.trajectories.iter().map(|t| &t.prompt).collect::<Vec<_>>(),
                });
                fs::write(out_dir.join(format!("diagnostics_buffer_{b}.json")), diag.to_string())?;
                return Err(e);
            }
        };
        let n = stats.len() as f64;
        let row = BufferMetrics {
            buffer: b,
            mean_reward: mean,
            std_reward: std,
            min_reward: rewards.iter().cloned().fold(f64::INFINITY, f64::min),
            max_reward: rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            invalid: buffer.invalid,
            mean_ratio: stats.iter().map(|s| s.mean_ratio).sum::<f64>() / n,
            clip_fraction: stats.iter().map(|s| s.clip_fraction).sum::<f64>() / n,
            first_minibatch_clip_fraction: stats[0].first_minibatch_clip_fraction,
            first_minibatch_max_ratio_deviation: stats[0].first_minibatch_max_ratio_deviation,
            policy_loss: stats.iter().map(|s| s.policy_loss).sum::<f64>() / n,
            grad_norm: stats.iter().map(|s| s.grad_norm).sum::<f64>() / n,
            skipped: stats.iter().map(|s| s.skipped).sum(),
        };
        info!(
            "buffer {b}: reward {mean:.4} ± {std:.4}, clip {:.3}, grad norm {:.4}",
            row.clip_fraction, row.grad_norm
        );
        append_line(&metrics_path, &serde_json::to_string(&row).expect("metrics serialise"))?;
        append_line(
            &timing_path,
            &serde_json::json!({"buffer": b, "wall_seconds": t0.elapsed().as_secs_f64()}).to_string(),
        )?;
        metrics.push(row);
        if (b + 1) % settings.checkpoint_every == 0 || b + 1 == cfg.total_buffers {
            save_adapters(&models.adapters(target), &ckpt.join("adapters.tflora"))?;
            save_tensors(&ckpt.join("optimizer.tfckpt"), &optimizer_tensors(&opt))?;
            write_atomic(
                &progress_path,
                serde_json::to_string(&Progress { next_buffer: b + 1 }).unwrap().as_bytes(),
            )?;
        }
    }

    let mut adapters = models.adapters(target);
    adapters.metadata = settings.metadata.clone();
    adapters.metadata.insert("reward".into(), reward.name.clone());
    adapters.metadata.insert("seed".into(), settings.seed.to_string());
    adapters.metadata.insert("target".into(), target.name().into());
    adapters.metadata.insert("buffers".into(), cfg.total_buffers.to_string());
    let mut adapter_files = Vec::new();
    let parts: Vec<PolicyTarget> = match target {
        PolicyTarget::Both => vec![PolicyTarget::TextEncoder, PolicyTarget::Denoiser],
        t => vec![t],
    };
    for part in parts {
        let root = if part == PolicyTarget::TextEncoder {
            crate::conditioner::ENCODER_ROOT
        } else {
            crate::diffusion::DENOISER_ROOT
        };
        let mut set = adapters.restricted_to(root);
        set.metadata.insert("target".into(), part.name().into());
        let path = out_dir.join(adapter_file_name(part));
        save_adapters(&set, &path)?;
        adapter_files.push(path);
    }
    Ok(TrainOutcome {
        adapters,
        metrics,
        models,
        adapter_files,
    })
}
