//! `texforce` command-line interface.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_models, save_models};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::lora::{fuse, load_adapters, save_adapters, AdapterSet};
use crate::model::{adapter_target, Models, PolicyTarget};
use crate::pipeline::{self, EvalSettings, PretrainSettings};
use crate::rewards::{by_name, reward_for_task, RewardSpec};
use crate::toy_world::{make_dataset, prompt_splits, write_dataset};
use crate::trainer::train;

pub const WORKERS_ENV: &str = "TEXFORCE_WORKERS";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_ECHO: &str = "config.resolved";
pub const BASE_CHECKPOINT: &str = "base.tfckpt";

#[derive(Debug, Parser)]
#[command(name = "texforce", version, about = "Text-encoder reinforcement finetuning for a toy diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the denoiser on the synthetic dataset and save the base checkpoint.
    Pretrain(CommonArgs),
    /// PPO finetuning of LoRA adapters against a reward.
    RlFinetune(CommonArgs),
    /// Sample an image grid with optional adapters attached.
    Sample(CommonArgs),
    /// Paired-seed comparison of the base model and adapter variants.
    Eval(CommonArgs),
    /// Weighted fusion of adapter files (weights from `fuse_weights`).
    Fuse(CommonArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub policy: Option<PolicyTarget>,
    #[arg(long)]
    pub reward: Option<String>,
    #[arg(long, num_args = 1..)]
    pub adapters: Vec<PathBuf>,
}

/// Worker count from the environment; 1 when unset.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(1),
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    workers: usize,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn new(args: &CommonArgs) -> Result<Self> {
        let mut cfg = RunConfig::load(&args.config)?;
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(p) = args.policy {
            cfg.policy = p;
        }
        if let Some(r) = &args.reward {
            cfg.reward = r.clone();
        }
        if let Some(o) = &args.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        let out = cfg.out_dir.clone();
        fs::create_dir_all(&out)?;
        fs::write(out.join(CONFIG_ECHO), cfg.to_text())?;
        let mut inputs = vec![args.config.clone()];
        inputs.extend(cfg.vocab_path.clone());
        inputs.extend(args.adapters.iter().cloned());
        Ok(Self {
            cfg,
            out,
            workers: workers_from_env()?,
            inputs,
        })
    }

    fn base_models(&mut self) -> Result<Models<f32>> {
        let path = self
            .cfg
            .base_checkpoint
            .clone()
            .ok_or_else(|| Error::Config("`base_checkpoint` must name a pretrained checkpoint".into()))?;
        let vocab = self.cfg.vocabulary()?;
        let mut models = Models::new(self.cfg.model_config(&vocab), vocab, self.cfg.seed)?;
        load_models(&mut models, &path)?;
        self.inputs.push(path);
        Ok(models)
    }

    fn reward(&self, name: &str) -> Result<RewardSpec> {
        by_name(name, &self.cfg.rewards())
    }

    /// Hashes every input and every file under the output directory.
    fn write_manifest(&self, command: &str) -> Result<()> {
        let mut inputs = BTreeMap::new();
        for p in &self.inputs {
            inputs.insert(p.display().to_string(), sha256_file(p)?);
        }
        let mut artifacts = BTreeMap::new();
        let mut stack = vec![self.out.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                } else if path.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                    let rel = path.strip_prefix(&self.out).unwrap_or(&path).display().to_string();
                    artifacts.insert(rel, sha256_file(&path)?);
                }
            }
        }
        let manifest = serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.cfg.seed,
            "workers": self.workers,
            "config": self.cfg.to_text(),
            "inputs": inputs,
            "artifacts": artifacts,
        });
        fs::write(self.out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest).unwrap() + "\n")?;
        Ok(())
    }

    fn prompts(&self) -> Vec<String> {
        if self.cfg.prompts.is_empty() {
            prompt_splits(self.cfg.task).0
        } else {
            self.cfg.prompts.clone()
        }
    }
}

fn variant_name(set: &AdapterSet) -> String {
    match adapter_target(set) {
        Some(PolicyTarget::TextEncoder) => "encoder_lora".into(),
        Some(PolicyTarget::Denoiser) => "denoiser_lora".into(),
        Some(PolicyTarget::Both) => "both_lora".into(),
        None => "empty_lora".into(),
    }
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<AdapterSet>> {
    paths.iter().map(|p| load_adapters(p)).collect()
}

fn attach_logged(models: &mut Models<f32>, path: &Path, set: &AdapterSet) -> Result<()> {
    models.attach(set)?;
    info!(
        "attached {} ({} layers, target {})",
        path.display(),
        set.adapters.len(),
        adapter_target(set).map_or("none", |t| t.name())
    );
    Ok(())
}

pub fn cmd_pretrain(args: &CommonArgs) -> Result<PathBuf> {
    let run = Run::new(args)?;
    let cfg = &run.cfg;
    let vocab = cfg.vocabulary()?;
    fs::write(run.out.join("vocab.txt"), vocab.to_text())?;
    let data = make_dataset(cfg.dataset_size as i64, cfg.dataset_seed, &cfg.world())?;
    write_dataset(&data, &run.out.join("dataset"))?;
    let mut models = Models::<f32>::new(cfg.model_config(&vocab), vocab, cfg.seed)?;
    let settings = PretrainSettings {
        epochs: cfg.pretrain_epochs,
        batch_size: cfg.batch_size,
        learning_rate: cfg.pretrain_lr,
        empty_prob: cfg.empty_prompt_prob,
        seed: cfg.seed,
    };
    let log = pipeline::pretrain(&mut models, &data, &cfg.schedule()?, &settings, &run.out)?;
    let path = run.out.join(BASE_CHECKPOINT);
    save_models(&models, &path)?;
    if let (Some(first), Some(last)) = (log.first(), log.last()) {
        info!("eval loss {:.2} -> {:.2}", first.eval_loss, last.eval_loss);
    }
    run.write_manifest("pretrain")?;
    Ok(path)
}

pub fn cmd_rl_finetune(args: &CommonArgs) -> Result<Vec<PathBuf>> {
    let mut run = Run::new(args)?;
    let base = run.base_models()?;
    let reward = run.reward(&run.cfg.reward)?;
    let prompts = run.prompts();
    let outcome = train(
        &base,
        &run.cfg.schedule()?,
        &reward,
        &prompts,
        &run.cfg.train_settings(run.workers),
        &run.out,
    )?;
    run.write_manifest("rl-finetune")?;
    Ok(outcome.adapter_files)
}

pub fn cmd_sample(args: &CommonArgs) -> Result<PathBuf> {
    let mut run = Run::new(args)?;
    let mut models = run.base_models()?;
    for (path, set) in args.adapters.iter().zip(load_all(&args.adapters)?) {
        attach_logged(&mut models, path, &set)?;
    }
    let cfg = &run.cfg;
    let reward = run.reward(&cfg.reward)?;
    let mut prompts = Vec::new();
    let mut seeds = Vec::new();
    for p in run.prompts() {
        for j in 0..cfg.sample_count {
            seeds.push(pipeline::paired_seed(cfg.seed, &p, j as u64));
            prompts.push(p.clone());
        }
    }
    if prompts.is_empty() {
        return Err(Error::Config("nothing to sample: no prompts or sample_count = 0".into()));
    }
    let images = pipeline::sample_images(&models, &cfg.schedule()?, &prompts, &seeds, cfg.guidance, run.workers)?;
    let mut sidecar = format!("index\tprompt\tseed\t{}\n", reward.name);
    for (i, ((img, p), s)) in images.iter().zip(&prompts).zip(&seeds).enumerate() {
        let r = reward.evaluate(img, p)?;
        sidecar.push_str(&format!("{i}\t{p}\t{s}\t{r:.6}\n"));
    }
    let grid = run.out.join("grid.png");
    Image::grid(&images, cfg.grid_cols, [1.0; 3]).save_png(&grid)?;
    fs::write(run.out.join("rewards.tsv"), sidecar)?;
    run.write_manifest("sample")?;
    Ok(grid)
}

pub fn cmd_eval(args: &CommonArgs) -> Result<PathBuf> {
    let mut run = Run::new(args)?;
    let base = run.base_models()?;
    let sets = load_all(&args.adapters)?;
    let mut variants = vec![("base".to_string(), base.clone())];
    for (path, set) in args.adapters.iter().zip(&sets) {
        let mut m = base.clone();
        attach_logged(&mut m, path, set)?;
        let mut name = variant_name(set);
        if variants.iter().any(|(n, _)| *n == name) {
            // disambiguate by the run directory, since adapter file names repeat across runs
            let run = path.parent().and_then(|d| d.file_name()).and_then(|s| s.to_str());
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("adapter");
            name = format!("{name}:{}", run.map_or(stem.to_string(), |r| format!("{r}/{stem}")));
        }
        variants.push((name, m));
    }
    if sets.len() > 1 {
        let mut m = base.clone();
        for set in &sets {
            m.attach(set)?;
        }
        variants.push(("combined".into(), m));
    }
    let cfg = &run.cfg;
    let reward_name = match (&args.reward, cfg.eval_reward.is_empty()) {
        (Some(r), _) => r.clone(),
        (None, false) => cfg.eval_reward.clone(),
        (None, true) => reward_for_task(cfg.task).to_string(),
    };
    let reward = run.reward(&reward_name)?;
    let splits = if cfg.prompts.is_empty() {
        let (seen, unseen) = prompt_splits(cfg.task);
        vec![("seen".to_string(), seen), ("unseen".to_string(), unseen)]
    } else {
        vec![("custom".to_string(), cfg.prompts.clone())]
    };
    let settings = EvalSettings {
        samples_per_prompt: cfg.eval_samples,
        guidance: cfg.guidance,
        seed: cfg.seed,
        workers: run.workers,
    };
    let (rows, _) = pipeline::evaluate(&variants, &splits, &cfg.schedule()?, &reward, &settings)?;
    let report = run.out.join("eval_report.json");
    fs::write(&report, serde_json::to_string_pretty(&rows).unwrap() + "\n")?;
    fs::write(run.out.join("eval_report.md"), pipeline::eval_table(&rows, &reward.name))?;
    run.write_manifest("eval")?;
    Ok(report)
}

pub fn cmd_fuse(args: &CommonArgs) -> Result<PathBuf> {
    let run = Run::new(args)?;
    if args.adapters.is_empty() {
        return Err(Error::Config("fuse needs --adapters".into()));
    }
    let weights = if run.cfg.fuse_weights.is_empty() {
        vec![1.0 / args.adapters.len() as f64; args.adapters.len()]
    } else {
        run.cfg.fuse_weights.clone()
    };
    if weights.len() != args.adapters.len() {
        return Err(Error::Config(format!(
            "{} adapter files but {} fuse weights",
            args.adapters.len(),
            weights.len()
        )));
    }
    let fused = fuse(&load_all(&args.adapters)?, &weights)?;
    let path = run.out.join("fused.tflora");
    save_adapters(&fused, &path)?;
    run.write_manifest("fuse")?;
    Ok(path)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Pretrain(a) => cmd_pretrain(a).map(|p| info!("wrote {}", p.display())),
        Command::RlFinetune(a) => cmd_rl_finetune(a).map(|ps| ps.iter().for_each(|p| info!("wrote {}", p.display()))),
        Command::Sample(a) => cmd_sample(a).map(|p| info!("wrote {}", p.display())),
        Command::Eval(a) => cmd_eval(a).map(|p| info!("wrote {}", p.display())),
        Command::Fuse(a) => cmd_fuse(a).map(|p| info!("wrote {}", p.display())),
    }
}
