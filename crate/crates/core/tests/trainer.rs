mod common;

use texforce::conditioner::Vocabulary;
use texforce::diffusion::{build_schedule, gaussian_log_prob};
use texforce::lora::AdapterSet;
use texforce::model::{ModelConfig, Models, PolicyTarget};
use texforce::nn::{Adam, Module};
use texforce::rewards::{by_name, RewardConfig, RewardSpec};
use texforce::trainer::*;

use common::*;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn lora_values(m: &Models<f64>) -> Vec<(String, Vec<f64>)> {
    let mut out = Vec::new();
    for module in m.modules() {
        module.params(&mut |n, p| {
            if !p.frozen {
                out.push((n.to_string(), p.value.clone()));
            }
        });
    }
    out
}

#[test]
fn advantage_examples() {
    let a = normalize_advantages(&[1.0, 2.0, 3.0]);
    let k = (1.5f64).sqrt();
    for (x, want) in a.iter().zip([-k, 0.0, k]) {
        assert!((x - want).abs() < 1e-12);
    }
    assert_eq!(normalize_advantages(&[2.5; 7]), vec![0.0; 7]);
}

#[test]
fn ppo_formula_examples() {
    assert_eq!(ppo_objective(1.0, 1.0, 0.2), 1.0);
    assert_eq!(ppo_objective(1.5, 1.0, 0.2), 1.2);
    assert_eq!(ppo_objective(0.5, -1.0, 0.2), -0.8);
    let r = ppo_ratio(gaussian_log_prob(&[0.0f64], &[0.1], 1.0).unwrap(), gaussian_log_prob(&[0.0f64], &[0.0], 1.0).unwrap());
    assert!((r - (-0.005f64).exp()).abs() < 1e-12);
    // clipped branch has zero slope
    assert_eq!(ppo_objective_grad(1.5, 1.0, 0.2), 0.0);
    assert_eq!(ppo_objective_grad(0.5, 1.0, 0.2), 0.5);
    assert_eq!(ppo_objective_grad(0.5, -1.0, 0.2), 0.0);
}

#[test]
fn fresh_buffer_gradient_matches_reinforce() {
    for target in [PolicyTarget::TextEncoder, PolicyTarget::Denoiser] {
        let c = reinforce_check(target);
        assert!(c.checked >= 10);
        assert!(c.max_rel_err < 1e-5, "{target:?}: {}", c.max_rel_err);
        assert_eq!(c.clip_fraction, 0.0);
        assert!(c.max_ratio_deviation < 1e-9);
    }
}

#[test]
fn encode_to_log_prob_gradient_matches_finite_differences() {
    let (err, n) = logprob_fd_check(20);
    assert!(n == 20 && err < 1e-3, "{err}");
}

#[test]
fn zero_advantages_leave_parameters_unchanged() {
    let (mut m, sched) = toy(PolicyTarget::Both);
    let constant = RewardSpec::new("constant", (1.0, 1.0), std::sync::Arc::new(|_, _| Ok(1.0)));
    let buffer = collect_rollouts(&prompts(), &m, &sched, 4, &constant, 3.0, 2, 0, 1).unwrap();
    assert!(buffer.advantages.iter().all(|&a| a == 0.0));
    let before = m.clone();
    let cfg = PpoConfig {
        minibatch_size: 3,
        policy_target: PolicyTarget::Both,
        ..PpoConfig::default()
    };
    let mut opt = Adam::new(1e-2);
    ppo_update(&buffer, &mut m, &sched, &cfg, &mut opt, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(lora_values(&before), lora_values(&m));
}

#[test]
fn encoder_policy_leaves_denoiser_and_base_weights_untouched() {
    let (mut m, sched) = toy(PolicyTarget::TextEncoder);
    let before = m.clone();
    let buffer = collect_rollouts(&prompts(), &m, &sched, 6, &mean_pixel(), 3.0, 3, 0, 1).unwrap();
    let cfg = PpoConfig {
        minibatch_size: 4,
        learning_rate: 1e-2,
        ..PpoConfig::default()
    };
    let mut opt = Adam::new(cfg.learning_rate);
    ppo_update(&buffer, &mut m, &sched, &cfg, &mut opt, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(before.denoiser, m.denoiser);
    let mut changed = 0;
    let mut base_same = true;
    let mut b_vals = Vec::new();
    before.encoder.params(&mut |n, p| b_vals.push((n.to_string(), p.value.clone())));
    let mut i = 0;
    m.encoder.params(&mut |n, p| {
        let (bn, bv) = &b_vals[i];
        assert_eq!(bn, n);
        if n.ends_with("lora_a") || n.ends_with("lora_b") {
            changed += (bv != &p.value) as usize;
        } else {
            base_same &= bv == &p.value;
        }
        i += 1;
    });
    assert!(base_same);
    assert!(changed > 0);
}

#[test]
fn invalid_rewards_abort_only_below_half() {
    let (m, sched) = toy(PolicyTarget::TextEncoder);
    let picky = RewardSpec::new(
        "picky",
        (0.0, 1.0),
        std::sync::Arc::new(|_, p: &str| {
            if p.contains("red") {
                Err(texforce::Error::reward("picky", "no red"))
            } else {
                Ok(0.5)
            }
        }),
    );
    let b = collect_rollouts(&prompts(), &m, &sched, 6, &picky, 1.0, 0, 0, 1).unwrap();
    assert_eq!((b.trajectories.len(), b.invalid), (4, 2));
    let failing = RewardSpec::new("failing", (0.0, 1.0), std::sync::Arc::new(|_, _| Err(texforce::Error::reward("failing", "x"))));
    assert!(collect_rollouts(&prompts(), &m, &sched, 6, &failing, 1.0, 0, 0, 1).is_err());
}

#[test]
fn rollouts_do_not_depend_on_worker_count() {
    let (m, sched) = toy(PolicyTarget::TextEncoder);
    let a = collect_rollouts(&prompts(), &m, &sched, 5, &mean_pixel(), 3.0, 4, 1, 1).unwrap();
    let b = collect_rollouts(&prompts(), &m, &sched, 5, &mean_pixel(), 3.0, 4, 1, 3).unwrap();
    assert_eq!(a.trajectories, b.trajectories);
}

#[test]
fn direct_backprop_matches_finite_differences() {
    let (err, n) = direct_fd_check(20, (2, 2));
    assert!(n == 20 && err < 1e-3, "{err}");
}

#[test]
fn direct_backprop_multi_step_window_matches_finite_differences() {
    // window covering the whole chain: every parameter dependence is unrolled
    let vocab = Vocabulary::grammar();
    let mut m = Models::<f64>::new(ModelConfig::toy(&vocab), vocab, 3).unwrap();
    m.encoder.set_frozen(true);
    let sched = build_schedule(3, 0.1, 0.3).unwrap();
    let reward = by_name("gray_target", &RewardConfig::default()).unwrap();
    let ps = prompts();
    m.zero_grad();
    direct_backprop_step(&ps, &mut m, &sched, &reward, (1, 3), 1.5, 4).unwrap();
    let mut grads = Vec::new();
    m.denoiser.params(&mut |n, p| grads.push((n.to_string(), p.grad.clone())));
    for (name, g) in grads.iter().step_by(4) {
        let idx = 0;
        let bump = |d: f64| {
            let mut e = m.clone();
            e.denoiser.params_mut(&mut |n, p| {
                if n == name {
                    p.value[idx] += d;
                }
            });
            direct_backprop_step(&ps, &mut e, &sched, &reward, (1, 3), 1.5, 4).unwrap()
        };
        let h = 1e-5;
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        let err = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-6);
        assert!(err < 1e-3, "{name}: fd {fd} vs {}", g[idx]);
    }
}

#[test]
fn direct_backprop_contracts() {
    let (mut m, sched) = toy(PolicyTarget::Both);
    let jpeg = by_name("incompressibility", &RewardConfig::default()).unwrap();
    let err = direct_backprop_step(&prompts(), &mut m, &sched, &jpeg, (2, 2), 1.0, 0).unwrap_err();
    assert!(err.to_string().contains("not differentiable"));
    let gray = by_name("gray_target", &RewardConfig::default()).unwrap();
    m.zero_grad();
    direct_backprop_step(&prompts(), &mut m, &sched, &gray, (2, 1), 1.0, 0).unwrap();
    let mut total = 0.0;
    for module in m.modules() {
        module.params(&mut |_, p| total += p.grad.iter().map(|g| g.abs()).sum::<f64>());
    }
    assert_eq!(total, 0.0);
    assert!(direct_backprop_step(&prompts(), &mut m, &sched, &gray, (0, 1), 1.0, 0).is_err());
    assert!(direct_backprop_step(&prompts(), &mut m, &sched, &gray, (1, 3), 1.0, 0).is_err());
}

#[test]
fn adapters_round_trip_through_training_outputs() {
    let (m, _) = toy(PolicyTarget::Denoiser);
    let set: AdapterSet = m.adapters(PolicyTarget::Denoiser);
    assert!(set.adapters.keys().all(|k| k.starts_with("denoiser.")));
}
