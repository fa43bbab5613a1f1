//! Multi-step workflows shared by the command line and the test harness:
//! epoch-based pretraining, batched sampling and paired-seed evaluation.

use std::fs;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_models, load_tensors, optimizer_tensors, restore_optimizer, save_models, save_tensors};
use crate::diffusion::{denoising_loss, noise_batch, pretrain_step, sample_trajectories, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::Models;
use crate::nn::{Adam, Module, Scalar};
use crate::rewards::RewardSpec;
use crate::seed::derive_labeled;
use crate::toy_world::CaptionedImage;
use crate::trainer::mean_std;

pub const PRETRAIN_LOG: &str = "pretrain_loss.jsonl";
const EVAL_ITEMS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub empty_prob: f64,
    pub seed: u64,
}

/// One row of the pretraining log. Row 0 holds the held-fixed evaluation loss
/// before any update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
}

/// Denoising loss on the first items of `data` with noise fixed by `seed`, so
/// values are comparable across epochs.
pub fn fixed_eval_loss<S: Scalar>(models: &Models<S>, data: &[CaptionedImage], sched: &NoiseSchedule, seed: u64) -> Result<f64> {
    let items = &data[..data.len().min(EVAL_ITEMS)];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_labeled(seed, "pretrain-eval", 0));
    let mut total = 0.0;
    for chunk in items.chunks(64) {
        let nb = noise_batch::<S, _>(chunk, sched, &mut rng, 0.0)?;
        let mut cond = Vec::new();
        for p in &nb.prompts {
            cond.extend(models.encode(p)?.pooled());
        }
        total += denoising_loss(&models.denoiser, &nb, &cond) * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct PretrainProgress {
    next_epoch: usize,
}

/// Train the denoiser for `settings.epochs` epochs.
///
/// Every epoch reshuffles with its own derived RNG, so an interrupted run that
/// resumes from the per-epoch checkpoint in `out_dir` continues exactly as if
/// it had not stopped. Returns the full log, including resumed rows.
pub fn pretrain<S: Scalar>(
    models: &mut Models<S>,
    data: &[CaptionedImage],
    sched: &NoiseSchedule,
    settings: &PretrainSettings,
    out_dir: &Path,
) -> Result<Vec<PretrainEpoch>> {
    if data.is_empty() {
        return Err(Error::invalid("pretraining dataset is empty"));
    }
    if settings.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let ckpt = out_dir.join("pretrain_checkpoint");
    fs::create_dir_all(&ckpt)?;
    let log_path = out_dir.join(PRETRAIN_LOG);
    let progress_path = ckpt.join("progress.json");
    let mut opt = Adam::<S>::new(settings.learning_rate);
    let mut log = Vec::new();
    let mut start = 1;
    if progress_path.exists() {
        let p: PretrainProgress = serde_json::from_str(&fs::read_to_string(&progress_path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", progress_path.display())))?;
        load_models(models, &ckpt.join("model.tfckpt"))?;
        restore_optimizer(&mut opt, &load_tensors(&ckpt.join("optimizer.tfckpt"))?)?;
        start = p.next_epoch;
        for line in fs::read_to_string(&log_path)?.lines().take(start) {
            log.push(serde_json::from_str(line).map_err(|e| Error::Config(format!("pretrain log: {e}")))?);
        }
        info!("resuming pretraining at epoch {start}");
    } else {
        let row = PretrainEpoch {
            epoch: 0,
            train_loss: None,
            eval_loss: fixed_eval_loss(models, data, sched, settings.seed)?,
        };
        info!("initial eval loss {:.2}", row.eval_loss);
        log.push(row);
    }
    write_log(&log_path, &log)?;
    models.encoder.set_frozen(true);
    models.denoiser.set_frozen(false);

    for epoch in start..=settings.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_labeled(settings.seed, "pretrain-shuffle", epoch as u64)));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_labeled(settings.seed, "pretrain-noise", epoch as u64));
        let mut sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(settings.batch_size) {
            let batch: Vec<CaptionedImage> = idx.iter().map(|&i| data[i].clone()).collect();
            models.zero_grad();
            sum += pretrain_step(&batch, models, sched, &mut rng, settings.empty_prob)?;
            opt.step(&mut models.modules_mut());
            batches += 1;
        }
        let row = PretrainEpoch {
            epoch,
            train_loss: Some(sum / batches as f64),
            eval_loss: fixed_eval_loss(models, data, sched, settings.seed)?,
        };
        info!("epoch {epoch}: train {:.2}, eval {:.2}", row.train_loss.unwrap(), row.eval_loss);
        log.push(row);
        save_models(models, &ckpt.join("model.tfckpt"))?;
        save_tensors(&ckpt.join("optimizer.tfckpt"), &optimizer_tensors(&opt))?;
        write_log(&log_path, &log)?;
        let tmp = progress_path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_string(&PretrainProgress { next_epoch: epoch + 1 }).unwrap())?;
        fs::rename(&tmp, &progress_path)?;
    }
    models.zero_grad();
    Ok(log)
}

fn write_log(path: &Path, log: &[PretrainEpoch]) -> Result<()> {
    let text: String = log.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    fs::write(path, text)?;
    Ok(())
}

/// Seed for sample `index` of `prompt`; independent of which other prompts or
/// models are evaluated, which makes comparisons paired.
pub fn paired_seed(seed: u64, prompt: &str, index: u64) -> u64 {
    derive_labeled(seed, prompt, index)
}

const SAMPLE_CHUNK: usize = 32;

/// Final clamped images for each `(prompt, seed)`, split over `workers` threads.
/// Output does not depend on `workers`.
pub fn sample_images<S: Scalar>(
    models: &Models<S>,
    sched: &NoiseSchedule,
    prompts: &[String],
    seeds: &[u64],
    guidance: f64,
    workers: usize,
) -> Result<Vec<Image>> {
    if prompts.len() != seeds.len() {
        return Err(Error::invalid("one seed per prompt required"));
    }
    let n = prompts.len();
    let size = models.denoiser.cfg.image_size;
    let run = |lo: usize, hi: usize| -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(hi - lo);
        for start in (lo..hi).step_by(SAMPLE_CHUNK) {
            let end = (start + SAMPLE_CHUNK).min(hi);
            for t in sample_trajectories(&prompts[start..end], &seeds[start..end], models, sched, guidance)? {
                out.push(t.image(size));
            }
        }
        Ok(out)
    };
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return run(0, n);
    }
    let chunk = n.div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|lo| {
                let run = &run;
                s.spawn(move || run(lo, (lo + chunk).min(n)))
            })
            .collect();
        let mut all = Vec::with_capacity(n);
        for h in handles {
            all.extend(h.join().map_err(|_| Error::Numerical("sampling worker panicked".into()))??);
        }
        Ok(all)
    })
}

/// Mean and spread of one model variant on one prompt split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: String,
    pub split: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// Mean paired difference to the first variant (the baseline).
    pub delta_vs_base: f64,
}

/// Per-image rewards of one variant on one split, ordered prompt-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalScores {
    pub variant: String,
    pub split: String,
    pub scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalSettings {
    pub samples_per_prompt: usize,
    pub guidance: f64,
    pub seed: u64,
    pub workers: usize,
}

/// Score every variant on every split with `samples_per_prompt` paired seeds
/// per prompt. The first variant is the reference for `delta_vs_base`.
pub fn evaluate<S: Scalar>(
    variants: &[(String, Models<S>)],
    splits: &[(String, Vec<String>)],
    sched: &NoiseSchedule,
    reward: &RewardSpec,
    settings: &EvalSettings,
) -> Result<(Vec<EvalRow>, Vec<EvalScores>)> {
    if variants.is_empty() || settings.samples_per_prompt == 0 {
        return Err(Error::invalid("evaluation needs at least one variant and one sample"));
    }
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for (split, prompts) in splits {
        if prompts.is_empty() {
            continue;
        }
        let mut ps = Vec::new();
        let mut seeds = Vec::new();
        for p in prompts {
            for j in 0..settings.samples_per_prompt {
                ps.push(p.clone());
                seeds.push(paired_seed(settings.seed, p, j as u64));
            }
        }
        let mut base: Option<Vec<f64>> = None;
        for (name, models) in variants {
            let images = sample_images(models, sched, &ps, &seeds, settings.guidance, settings.workers)?;
            let scores = images
                .iter()
                .zip(&ps)
                .map(|(img, p)| reward.evaluate(img, p))
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&scores);
            let base_scores = base.get_or_insert_with(|| scores.clone());
            let delta = scores.iter().zip(base_scores.iter()).map(|(a, b)| a - b).sum::<f64>() / scores.len() as f64;
            info!("{name} on {split}: {mean:.4} ± {std:.4}");
            rows.push(EvalRow {
                variant: name.clone(),
                split: split.clone(),
                n: scores.len(),
                mean,
                std,
                delta_vs_base: delta,
            });
            all.push(EvalScores {
                variant: name.clone(),
                split: split.clone(),
                scores,
            });
        }
    }
    Ok((rows, all))
}

/// Markdown comparison table of evaluation rows.
pub fn eval_table(rows: &[EvalRow], reward: &str) -> String {
    let mut out = format!("| variant | split | n | mean {reward} | std | Δ vs base |\n|---|---|---|---|---|---|\n");
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {:.4} | {:.4} | {:+.4} |\n",
            r.variant, r.split, r.n, r.mean, r.std, r.delta_vs_base
        ));
    }
    out
}
