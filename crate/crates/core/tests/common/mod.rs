//! Toy fixtures and gradient checks shared by the integration tests and the
//! acceptance report.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use texforce::conditioner::Vocabulary;
use texforce::diffusion::{build_schedule, pretrain_step, NoisePredictor, NoiseSchedule};
use texforce::lora::AdapterSet;
use texforce::image::Image;
use texforce::model::{ModelConfig, Models, PolicyTarget};
use texforce::nn::Module;
use texforce::rewards::{by_name, RewardConfig, RewardSpec};
use texforce::toy_world::{CaptionedImage, SceneSpec};
use texforce::trainer::{collect_rollouts, direct_backprop_step, log_probs_backward, ppo_gradient};

/// 4×4 toy models with random non-zero adapters on both networks and a
/// two-step schedule; only `target`'s adapters are trainable.
pub fn toy(target: PolicyTarget) -> (Models<f64>, NoiseSchedule) {
    let vocab = Vocabulary::grammar();
    let mut m = Models::<f64>::new(ModelConfig::toy(&vocab), vocab, 5).unwrap();
    let mut set = m.init_adapters(PolicyTarget::Both, 2, 1.0, 6).unwrap();
    // non-zero B so that gradients reach every adapter matrix
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for ad in set.adapters.values_mut() {
        for b in ad.b.iter_mut() {
            *b = rng.random::<f32>() * 0.4 - 0.2;
        }
    }
    m.attach(&set).unwrap();
    m.train_only_lora(target);
    (m, build_schedule(2, 0.1, 0.3).unwrap())
}

pub fn mean_pixel() -> RewardSpec {
    RewardSpec::new(
        "mean_pixel",
        (0.0, 1.0),
        Arc::new(|img, _| Ok(img.data.iter().map(|&v| v as f64).sum::<f64>() / img.data.len() as f64)),
    )
}

pub fn prompts() -> Vec<String> {
    vec!["a red circle".into(), "two blue squares".into(), "a green triangle on the left".into()]
}

pub fn trainable_grads(m: &Models<f64>) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for module in m.modules() {
        module.params(&mut |n, p| {
            if !p.frozen {
                out.push((n.to_string(), p.grad.clone()));
            }
        });
    }
    out
}

pub fn perturbed(m: &Models<f64>, name: &str, idx: usize, d: f64) -> Models<f64> {
    let mut e = m.clone();
    for module in e.modules_mut() {
        module.params_mut(&mut |n, p| {
            if n == name {
                p.value[idx] += d;
            }
        });
    }
    e
}

/// Largest relative error between analytic gradients and central differences
/// of `f` over `picks` parameters, and how many were checked.
pub fn fd_error(
    m: &Models<f64>,
    grads: &[(String, Vec<f64>)],
    picks: &[(usize, usize)],
    h: f64,
    floor: f64,
    f: impl Fn(&Models<f64>) -> f64,
) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    for &(gi, idx) in picks {
        let (name, g) = &grads[gi];
        let fd = (f(&perturbed(m, name, idx, h)) - f(&perturbed(m, name, idx, -h))) / (2.0 * h);
        let err = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(floor);
        worst = worst.max(err);
    }
    (worst, picks.len())
}

/// `n` random parameter coordinates among `grads`.
pub fn random_picks(grads: &[(String, Vec<f64>)], n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let gi = rng.random_range(0..grads.len());
            (gi, rng.random_range(0..grads[gi].1.len()))
        })
        .collect()
}

/// Random 4×4 captioned images.
pub fn toy_batch(n: usize, seed: u64) -> Vec<CaptionedImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let captions = prompts();
    (0..n)
        .map(|i| CaptionedImage {
            image: Image {
                width: 4,
                height: 4,
                data: (0..48).map(|_| rng.random::<f32>()).collect(),
            },
            caption: captions[i % captions.len()].clone(),
            spec: SceneSpec {
                shapes: Vec::new(),
                image_size: 4,
                background: 0.5,
            },
        })
        .collect()
}

/// Central differences of the pretraining loss against its backpropagated
/// gradient, over random denoiser parameters.
pub fn pretrain_fd_check(samples: usize) -> (f64, usize) {
    let vocab = Vocabulary::grammar();
    let mut m = Models::<f64>::new(ModelConfig::toy(&vocab), vocab, 2).unwrap();
    m.encoder.set_frozen(true);
    let sched = build_schedule(2, 0.1, 0.3).unwrap();
    let batch = toy_batch(4, 1);
    let step = |models: &mut Models<f64>| pretrain_step(&batch, models, &sched, &mut ChaCha8Rng::seed_from_u64(9), 0.5).unwrap();
    m.zero_grad();
    step(&mut m);
    let grads = trainable_grads(&m);
    assert!(grads.iter().all(|(n, _)| n.starts_with("denoiser.")));
    let picks = random_picks(&grads, samples, 4);
    fd_error(&m, &grads, &picks, 1e-4, 1e-6, |e| step(&mut e.clone()))
}

/// Total trajectory log-probability as a function of the encoder adapters:
/// backpropagated gradient versus central differences.
pub fn logprob_fd_check(samples: usize) -> (f64, usize) {
    let (mut m, sched) = toy(PolicyTarget::TextEncoder);
    let buffer = collect_rollouts(&prompts(), &m, &sched, 4, &mean_pixel(), 2.5, 7, 0, 1).unwrap();
    let all = buffer.samples();
    m.zero_grad();
    log_probs_backward(&mut m, &buffer, &all, &sched, |l| vec![1.0; l.len()]).unwrap();
    let grads = trainable_grads(&m);
    assert!(grads.iter().all(|(n, _)| n.starts_with("encoder.")));
    let picks = random_picks(&grads, samples, 5);
    fd_error(&m, &grads, &picks, 1e-5, 1e-6, |e| {
        let mut probe = e.clone();
        log_probs_backward(&mut probe, &buffer, &all, &sched, |l| vec![0.0; l.len()])
            .unwrap()
            .iter()
            .sum()
    })
}

/// Direct reward backpropagation through a denoising window versus central
/// differences of the returned loss.
pub fn direct_fd_check(samples: usize, window: (usize, usize)) -> (f64, usize) {
    let (mut m, sched) = toy(PolicyTarget::Both);
    let reward = by_name("gray_target", &RewardConfig::default()).unwrap();
    let ps = prompts();
    m.zero_grad();
    direct_backprop_step(&ps, &mut m, &sched, &reward, window, 2.0, 11).unwrap();
    let grads = trainable_grads(&m);
    let picks = random_picks(&grads, samples, 6);
    fd_error(&m, &grads, &picks, 1e-4, 1e-6, |e| {
        direct_backprop_step(&ps, &mut e.clone(), &sched, &reward, window, 2.0, 11).unwrap()
    })
}

/// Result of comparing the first PPO gradient on a fresh buffer to REINFORCE.
pub struct ReinforceCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    pub clip_fraction: f64,
    pub max_ratio_deviation: f64,
}

/// On a fresh buffer the clipped objective has ratio 1 everywhere, so its
/// gradient must equal the score-function estimator −(1/M) Σ A_i ∇log p,
/// whose ∇log p is taken here by central differences.
pub fn reinforce_check(target: PolicyTarget) -> ReinforceCheck {
    let (mut m, sched) = toy(target);
    let buffer = collect_rollouts(&prompts(), &m, &sched, 6, &mean_pixel(), 2.0, 1, 0, 1).unwrap();
    let samples = buffer.samples();
    m.zero_grad();
    let st = ppo_gradient(&mut m, &buffer, &samples, &sched, 0.1).unwrap();
    let grads = trainable_grads(&m);
    let mdim = samples.len() as f64;
    let objective = |models: &Models<f64>| -> f64 {
        let mut probe = models.clone();
        let lps = log_probs_backward(&mut probe, &buffer, &samples, &sched, |l| vec![0.0; l.len()]).unwrap();
        -lps.iter().zip(&samples).map(|(lp, &(i, _))| buffer.advantages[i] * lp).sum::<f64>() / mdim
    };
    let picks: Vec<(usize, usize)> = (0..grads.len()).flat_map(|gi| [(gi, 0), (gi, grads[gi].1.len() - 1)]).collect();
    let (max_rel_err, checked) = fd_error(&m, &grads, &picks, 1e-5, 1e-4, objective);
    ReinforceCheck {
        max_rel_err,
        checked,
        clip_fraction: st.clip_fraction,
        max_ratio_deviation: st.ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max),
    }
}

pub fn toy_models(seed: u64) -> Models<f64> {
    let vocab = Vocabulary::grammar();
    Models::new(ModelConfig::toy(&vocab), vocab, seed).unwrap()
}

pub fn random_adapters(m: &Models<f64>, seed: u64, scale: f32) -> AdapterSet {
    let mut set = m.init_adapters(PolicyTarget::Both, 2, 0.7, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for ad in set.adapters.values_mut() {
        for b in ad.b.iter_mut() {
            *b = (rng.random::<f32>() * 2.0 - 1.0) * scale;
        }
    }
    set
}

/// Pooled embedding of a prompt followed by a noise prediction on a fixed input.
pub fn outputs(m: &Models<f64>, prompt: &str) -> Vec<f64> {
    let z = m.encode(prompt).unwrap().pooled();
    let len = m.denoiser.image_len();
    let x: Vec<f64> = (0..len).map(|i| ((i * 37 % 17) as f64 / 8.0) - 1.0).collect();
    let mut out = z.clone();
    out.extend(m.denoiser.predict(&x, &[2], &z));
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
