//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! The empirical criteria (4–7) pretrain and finetune at full size with
//! `configs/acceptance.conf` and take tens of minutes on one core. Set
//! `TEXFORCE_ACCEPTANCE_DIR` to keep the runs; finished runs found there are
//! resumed (and therefore skipped) on the next invocation.
//! `TEXFORCE_ACCEPTANCE_CONFIG` substitutes another config, e.g. a small one
//! for checking the plumbing; the thresholds then mean little.
//!
//! The process exits non-zero only when an exact criterion (1–3, 8) fails;
//! 4–7 measure training outcomes and are reported either way.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use texforce::checkpoint::load_models;
use texforce::cli::{cmd_eval, cmd_fuse, cmd_pretrain, cmd_rl_finetune, workers_from_env, CommonArgs, BASE_CHECKPOINT, WORKERS_ENV};
use texforce::config::RunConfig;
use texforce::diffusion::gaussian_log_prob;
use texforce::lora::{from_bytes, fuse, to_bytes};
use texforce::model::{Models, PolicyTarget};
use texforce::pipeline::{evaluate, EvalRow, EvalSettings, PretrainEpoch, PRETRAIN_LOG};
use texforce::rewards::by_name;
use texforce::toy_world::{prompt_splits, Task};
use texforce::trainer::{mean_std, normalize_advantages, ppo_objective, ppo_objective_grad, ppo_ratio, METRICS_FILE};

use common::*;

type Outcome = (bool, String);

/// Criteria that hold exactly, independent of how training turns out.
const EXACT: [&str; 4] = ["C1", "C2", "C3", "C8"];

struct Report {
    failed: Vec<&'static str>,
}

impl Report {
    fn run(&mut self, id: &'static str, title: &str, f: impl FnOnce() -> Outcome) {
        let t = Instant::now();
        let (pass, detail) = f();
        println!(
            "[{}] {id} {title}: {detail} ({:.0}s)",
            if pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        if !pass {
            self.failed.push(id);
        }
    }
}

fn c1_unit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut lp_err: f64 = 0.0;
    for _ in 0..300 {
        let n = rng.random_range(1..64);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mean: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let std = rng.random_range(0.01..2.0);
        let oracle: f64 = x
            .iter()
            .zip(&mean)
            .map(|(a, m)| {
                let z = (a - m) / std;
                -0.5 * z * z - f64::ln(std) - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .sum();
        lp_err = lp_err.max((gaussian_log_prob(&x, &mean, std).unwrap() - oracle).abs() / oracle.abs().max(1.0));
    }

    let r = ppo_ratio(-1.0, -1.0);
    let clip_ok = ppo_objective(1.0, 1.0, 0.2) == 1.0
        && ppo_objective(1.5, 1.0, 0.2) == 1.2
        && ppo_objective(0.5, 1.0, 0.2) == 0.5
        && ppo_objective(0.5, -1.0, 0.2) == -0.8
        && ppo_objective(1.5, -1.0, 0.2) == -1.5
        && ppo_objective_grad(1.5, 1.0, 0.2) == 0.0
        && ppo_objective_grad(0.5, -1.0, 0.2) == 0.0
        && ppo_objective_grad(0.5, 1.0, 0.2) == 0.5
        && r == 1.0;

    let (mut adv_mean, mut adv_std): (f64, f64) = (0.0, 0.0);
    for _ in 0..300 {
        let n = rng.random_range(2..200);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale + 5.0).collect();
        let (m, s) = mean_std(&normalize_advantages(&rewards));
        adv_mean = adv_mean.max(m.abs());
        adv_std = adv_std.max((s - 1.0).abs());
    }

    let (mut zero, mut merge, mut fusion) = (0.0f64, 0.0f64, 0.0f64);
    let mut bytes_ok = true;
    let prompts = ["a red circle", "", "two blue squares and a green triangle"];
    for seed in 0..6 {
        let base = toy_models(seed);
        let mut adapted = base.clone();
        adapted.attach(&base.init_adapters(PolicyTarget::Both, 3, 2.0, seed + 1).unwrap()).unwrap();
        let s1 = random_adapters(&base, seed + 10, 0.3);
        let s2 = random_adapters(&base, seed + 20, 0.3);
        let mut attached = base.clone();
        attached.attach(&s1).unwrap();
        let mut merged = base.clone();
        merged.merge(&s1).unwrap();
        for p in prompts {
            zero = zero.max(max_abs_diff(&outputs(&base, p), &outputs(&adapted, p)));
            merge = merge.max(max_abs_diff(&outputs(&attached, p), &outputs(&merged, p)));
        }
        let (w1, w2) = (0.5 + seed as f64 * 0.3, -0.7 + seed as f64 * 0.2);
        let fused = fuse(&[s1.clone(), s2.clone()], &[w1, w2]).unwrap();
        let ident = fuse(std::slice::from_ref(&s1), &[1.0]).unwrap();
        for (name, f) in &fused.adapters {
            let (d1, d2) = (s1.adapters[name].delta(), s2.adapters[name].delta());
            let want: Vec<f64> = d1.iter().zip(&d2).map(|(a, b)| w1 * a + w2 * b).collect();
            fusion = fusion.max(max_abs_diff(&f.delta(), &want)).max(max_abs_diff(&ident.adapters[name].delta(), &d1));
        }
        let set = s2.with_meta("reward", "color");
        let b = to_bytes(&set).unwrap();
        let back = from_bytes(&b, Path::new("mem")).unwrap();
        bytes_ok &= back == set && to_bytes(&back).unwrap() == b;
    }
    let pass = lp_err <= 1e-9
        && clip_ok
        && adv_mean < 1e-8
        && adv_std < 1e-6
        && zero <= 1e-6
        && merge <= 1e-5
        && fusion <= 1e-6
        && bytes_ok;
    (
        pass,
        format!(
            "log-prob err {lp_err:.1e}, clip examples {}, advantage |mean| {adv_mean:.1e} |std-1| {adv_std:.1e}, \
             lora zero-init {zero:.1e} attach/merge {merge:.1e} fuse {fusion:.1e}, bytes {}",
            if clip_ok { "exact" } else { "WRONG" },
            if bytes_ok { "bitwise" } else { "DIFFER" }
        ),
    )
}

fn c2_finite_differences() -> Outcome {
    let (pt, n1) = pretrain_fd_check(20);
    let (lp, n2) = logprob_fd_check(20);
    let (db, n3) = direct_fd_check(20, (2, 2));
    let pass = pt < 1e-3 && lp < 1e-3 && db < 1e-3;
    (
        pass,
        format!("max rel err pretrain_step {pt:.1e} ({n1}), encode→log-prob {lp:.1e} ({n2}), direct_backprop_step {db:.1e} ({n3})"),
    )
}

fn c3_reinforce() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for target in [PolicyTarget::TextEncoder, PolicyTarget::Denoiser] {
        let c = reinforce_check(target);
        pass &= c.max_rel_err < 1e-5 && c.max_ratio_deviation < 1e-4 && c.clip_fraction == 0.0;
        parts.push(format!(
            "{}: rel err {:.1e}, max |ratio-1| {:.1e}, clip fraction {}",
            target.name(),
            c.max_rel_err,
            c.max_ratio_deviation,
            c.clip_fraction
        ));
    }
    (pass, parts.join("; "))
}

/// Paths and configs of the full-size runs.
struct Runs {
    dir: PathBuf,
    base_conf: RunConfig,
}

impl Runs {
    fn config(&self, name: &str, overrides: &[(&str, String)]) -> PathBuf {
        let mut cfg = self.base_conf.clone();
        for (k, v) in overrides {
            cfg.set(k, v).unwrap();
        }
        let path = self.dir.join(format!("{name}.conf"));
        fs::write(&path, cfg.to_text()).unwrap();
        path
    }

    fn base_checkpoint(&self) -> PathBuf {
        self.dir.join("base").join(BASE_CHECKPOINT)
    }

    fn with_base(&self, name: &str, overrides: &[(&str, String)]) -> PathBuf {
        let mut o = vec![("base_checkpoint", self.base_checkpoint().display().to_string())];
        o.extend(overrides.iter().cloned());
        self.config(name, &o)
    }

    fn finetune(&self, name: &str, policy: PolicyTarget, reward: &str, overrides: &[(&str, String)]) -> PathBuf {
        let conf = self.with_base(name, overrides);
        let files = cmd_rl_finetune(&CommonArgs {
            config: conf,
            seed: None,
            out: Some(self.dir.join(name)),
            policy: Some(policy),
            reward: Some(reward.to_string()),
            adapters: Vec::new(),
        })
        .unwrap();
        files[0].clone()
    }

    fn eval(&self, name: &str, reward: &str, adapters: Vec<PathBuf>) -> Vec<EvalRow> {
        let conf = self.with_base(name, &[]);
        let report = cmd_eval(&CommonArgs {
            config: conf,
            seed: None,
            out: Some(self.dir.join(name)),
            policy: None,
            reward: Some(reward.to_string()),
            adapters,
        })
        .unwrap();
        serde_json::from_str(&fs::read_to_string(report).unwrap()).unwrap()
    }
}

fn row<'a>(rows: &'a [EvalRow], variant: &str, split: &str) -> &'a EvalRow {
    rows.iter()
        .find(|r| r.variant == variant && r.split == split)
        .unwrap_or_else(|| panic!("no eval row {variant}/{split}"))
}

/// Mean over all splits, weighted by sample count.
fn pooled(rows: &[EvalRow], variant: &str) -> f64 {
    let (sum, n) = rows
        .iter()
        .filter(|r| r.variant == variant)
        .fold((0.0, 0), |(s, n), r| (s + r.mean * r.n as f64, n + r.n));
    sum / n as f64
}

const SAMPLES_PER_SINGLE_PROMPT: usize = 20;

fn c4_pretrain(runs: &Runs) -> Outcome {
    let conf = runs.config("pretrain", &[]);
    cmd_pretrain(&CommonArgs {
        config: conf,
        seed: None,
        out: Some(runs.dir.join("base")),
        policy: None,
        reward: None,
        adapters: Vec::new(),
    })
    .unwrap();
    let log: Vec<PretrainEpoch> = fs::read_to_string(runs.dir.join("base").join(PRETRAIN_LOG))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let initial = log[0].eval_loss;
    let halved = log.iter().find(|r| r.epoch <= 20 && r.eval_loss < 0.5 * initial).map(|r| r.epoch);
    let last = log.last().unwrap();

    let cfg = &runs.base_conf;
    let vocab = cfg.vocabulary().unwrap();
    let mut models = Models::<f32>::new(cfg.model_config(&vocab), vocab, cfg.seed).unwrap();
    load_models(&mut models, &runs.base_checkpoint()).unwrap();
    let (seen, unseen) = prompt_splits(Task::Color);
    let prompts: Vec<String> = seen.into_iter().chain(unseen).collect();
    let color = by_name("color", &cfg.rewards()).unwrap();
    let settings = EvalSettings {
        samples_per_prompt: SAMPLES_PER_SINGLE_PROMPT,
        guidance: 3.0,
        seed: cfg.seed,
        workers: workers_from_env().unwrap(),
    };
    let (_, scores) = evaluate(
        &[("base".to_string(), models)],
        &[("single".to_string(), prompts)],
        &cfg.schedule().unwrap(),
        &color,
        &settings,
    )
    .unwrap();
    let s = &scores[0].scores;
    let frac = s.iter().filter(|&&v| v >= 0.5).count() as f64 / s.len() as f64;
    let pass = halved.is_some() && frac >= 0.6;
    (
        pass,
        format!(
            "eval loss {initial:.1} -> {:.1} after {} epochs, below half at epoch {}; {:.1}% of {} single-object samples at g=3 score >= 0.5 on color",
            last.eval_loss,
            last.epoch,
            halved.map_or("never".to_string(), |e| e.to_string()),
            100.0 * frac,
            s.len()
        ),
    )
}

/// RL settings per reward, layered over the acceptance config. Below a learning
/// rate of about 2e-3 incompressibility creeps up by only a few percent in 30
/// buffers; at 2e-3 and above it jumps within a buffer or two. The color
/// task collapses at 3e-3 and trains steadily at 1e-3.
fn rl_overrides(reward: &str) -> Vec<(&'static str, String)> {
    let (lr, clip) = match reward {
        "incompressibility" => ("0.002", "0.2"),
        _ => ("0.001", "0.2"),
    };
    vec![("learning_rate", lr.into()), ("clip", clip.into())]
}

fn c5_incompressibility(runs: &Runs) -> (Outcome, PathBuf) {
    let o = rl_overrides("incompressibility");
    let enc = runs.finetune("incompressibility_encoder", PolicyTarget::TextEncoder, "incompressibility", &o);
    let den = runs.finetune("incompressibility_denoiser", PolicyTarget::Denoiser, "incompressibility", &o);
    let rows = runs.eval("eval_incompressibility", "incompressibility", vec![enc.clone(), den]);
    let base = pooled(&rows, "base");
    let (e, d, c) = (pooled(&rows, "encoder_lora"), pooled(&rows, "denoiser_lora"), pooled(&rows, "combined"));
    let pass = e >= 1.2 * base && d > base && c >= 0.95 * e.max(d);
    (
        (
            pass,
            format!(
                "held-out seeds: base {base:.4}, encoder {e:.4} ({:+.1}%), denoiser {d:.4} ({:+.1}%), combined {c:.4} ({:.3} of best)",
                100.0 * (e / base - 1.0),
                100.0 * (d / base - 1.0),
                c / e.max(d)
            ),
        ),
        enc,
    )
}

fn c6_color(runs: &Runs) -> (Outcome, PathBuf) {
    let enc = runs.finetune("color_encoder", PolicyTarget::TextEncoder, "color", &rl_overrides("color"));
    let rows = runs.eval("eval_color", "color", vec![enc.clone()]);
    let seen = row(&rows, "encoder_lora", "seen");
    let (ub, ue) = (row(&rows, "base", "unseen").mean, row(&rows, "encoder_lora", "unseen").mean);
    let pass = seen.delta_vs_base >= 0.15 && ue >= ub - 0.02;
    (
        (
            pass,
            format!(
                "seen {:.4} -> {:.4} (paired Δ {:+.4}), unseen {ub:.4} -> {ue:.4} (Δ {:+.4})",
                row(&rows, "base", "seen").mean,
                seen.mean,
                seen.delta_vs_base,
                ue - ub
            ),
        ),
        enc,
    )
}

fn c7_fusion(runs: &Runs, color: PathBuf, incompressibility: PathBuf) -> Outcome {
    let conf = runs.config("fuse", &[("fuse_weights", "0.5, 0.5".into())]);
    let fused = cmd_fuse(&CommonArgs {
        config: conf,
        seed: None,
        out: Some(runs.dir.join("fused")),
        policy: None,
        reward: None,
        adapters: vec![color, incompressibility],
    })
    .unwrap();
    let c = runs.eval("eval_fused_color", "color", vec![fused.clone()]);
    let j = runs.eval("eval_fused_incompressibility", "incompressibility", vec![fused]);
    let (cb, cf) = (pooled(&c, "base"), pooled(&c, "encoder_lora"));
    let (jb, jf) = (pooled(&j, "base"), pooled(&j, "encoder_lora"));
    let pass = cf >= cb && jf >= jb;
    (pass, format!("on color prompts: color {cb:.4} -> {cf:.4}, jpeg kB {jb:.4} -> {jf:.4}"))
}

const TINY: &str = "
image_size = 16
embed_dim = 8
heads = 2
blocks = 1
ff_dim = 16
widths = 3,4,5
time_dim = 4
steps = 3
dataset_size = 24
batch_size = 8
pretrain_epochs = 2
rollouts_per_buffer = 6
minibatch_size = 4
total_buffers = 3
checkpoint_every = 1
prompts = a red circle | two blue squares | a green triangle
learning_rate = 0.001
seed = 11
";

fn c8_determinism(dir: &Path) -> Outcome {
    let prev = std::env::var(WORKERS_ENV).ok();
    std::env::set_var(WORKERS_ENV, "1");
    fs::create_dir_all(dir).unwrap();
    let conf = dir.join("tiny.conf");
    fs::write(&conf, TINY).unwrap();
    let files = |tag: &str| -> (Vec<u8>, Vec<u8>) {
        let run = dir.join(tag);
        let args = |out: PathBuf, cfg: PathBuf| CommonArgs {
            config: cfg,
            seed: None,
            out: Some(out),
            policy: None,
            reward: None,
            adapters: Vec::new(),
        };
        cmd_pretrain(&args(run.join("base"), conf.clone())).unwrap();
        let rl = run.join("rl.conf");
        let base = run.join("base").join(BASE_CHECKPOINT);
        fs::write(&rl, format!("{TINY}base_checkpoint = {}\n", base.display())).unwrap();
        cmd_rl_finetune(&args(run.join("rl"), rl)).unwrap();
        (
            fs::read(run.join("base").join(PRETRAIN_LOG)).unwrap(),
            fs::read(run.join("rl").join(METRICS_FILE)).unwrap(),
        )
    };
    let _ = fs::remove_dir_all(dir.join("a"));
    let _ = fs::remove_dir_all(dir.join("b"));
    let a = files("a");
    let b = files("b");
    match prev {
        Some(v) => std::env::set_var(WORKERS_ENV, v),
        None => std::env::remove_var(WORKERS_ENV),
    }
    let pass = a == b && !a.1.is_empty();
    (
        pass,
        format!(
            "{} + {} ({} + {} bytes) identical on rerun: {}",
            PRETRAIN_LOG,
            METRICS_FILE,
            a.0.len(),
            a.1.len(),
            if a == b { "yes" } else { "no" }
        ),
    )
}

fn main() {
    let mut report = Report { failed: Vec::new() };
    report.run("C1", "unit correctness", c1_unit);
    report.run("C2", "finite differences (f64, 2-step 4x4 toy)", c2_finite_differences);
    report.run("C3", "PPO on a fresh buffer equals REINFORCE", c3_reinforce);

    let keep = std::env::var_os("TEXFORCE_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let dir = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    fs::create_dir_all(&dir).unwrap();
    let conf_path = std::env::var_os("TEXFORCE_ACCEPTANCE_CONFIG")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.conf"));
    let runs = Runs {
        dir: dir.clone(),
        base_conf: RunConfig::load(&conf_path).unwrap(),
    };
    report.run("C4", "pretraining", || c4_pretrain(&runs));
    let mut incompressibility = None;
    report.run("C5", "incompressibility finetuning", || {
        let (o, p) = c5_incompressibility(&runs);
        incompressibility = Some(p);
        o
    });
    let mut color = None;
    report.run("C6", "color finetuning and generalisation", || {
        let (o, p) = c6_color(&runs);
        color = Some(p);
        o
    });
    report.run("C7", "fused color + incompressibility adapters", || {
        c7_fusion(&runs, color.unwrap(), incompressibility.unwrap())
    });
    report.run("C8", "single-worker determinism", || c8_determinism(&dir.join("determinism")));

    // Correctness and determinism failures are bugs and fail the target; the
    // training-outcome criteria are reported as measured.
    let hard: Vec<&str> = report.failed.iter().copied().filter(|id| EXACT.contains(id)).collect();
    if report.failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failed {}", report.failed.join(", "));
    }
    if !hard.is_empty() {
        std::process::exit(1);
    }
}
