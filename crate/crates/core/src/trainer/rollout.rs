use log::warn;

use crate::diffusion::{sample_trajectories, NoiseSchedule, Trajectory};
use crate::error::{Error, Result};
use crate::model::Models;
use crate::nn::Scalar;
use crate::rewards::RewardSpec;
use crate::seed::derive_labeled;

/// Scored trajectories of one collection round.
#[derive(Clone, Debug)]
pub struct RolloutBuffer<S> {
    /// Valid trajectories only; rewards are filled in.
    pub trajectories: Vec<Trajectory<S>>,
    /// One per trajectory, shared by all of its steps.
    pub advantages: Vec<f64>,
    /// Trajectories dropped because their reward could not be computed.
    pub invalid: usize,
}

impl<S: Scalar> RolloutBuffer<S> {
    pub fn new(trajectories: Vec<Trajectory<S>>, invalid: usize) -> Result<Self> {
        let rewards: Vec<f64> = trajectories
            .iter()
            .map(|t| t.reward.ok_or_else(|| Error::invalid("trajectory without reward in buffer")))
            .collect::<Result<_>>()?;
        Ok(Self {
            advantages: normalize_advantages(&rewards),
            trajectories,
            invalid,
        })
    }

    /// Recompute advantages with the given baseline.
    pub fn set_baseline(&mut self, baseline: Baseline) {
        let rewards = self.rewards();
        self.advantages = match baseline {
            Baseline::Buffer => normalize_advantages(&rewards),
            Baseline::Prompt => {
                let prompts: Vec<&str> = self.trajectories.iter().map(|t| t.prompt.as_str()).collect();
                prompt_centered_advantages(&rewards, &prompts)
            }
        };
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.reward.unwrap_or(f64::NAN)).collect()
    }

    /// Every `(trajectory, step)` pair.
    pub fn samples(&self) -> Vec<(usize, usize)> {
        self.trajectories
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.steps.len()).map(move |k| (i, k)))
            .collect()
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(r − mean)/std` with the population std; all zeros when std < 1e-8.
pub fn normalize_advantages(rewards: &[f64]) -> Vec<f64> {
    let (mean, std) = mean_std(rewards);
    if std < 1e-8 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// What rewards are compared against when forming advantages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Baseline {
    /// Buffer mean and std.
    #[default]
    Buffer,
    /// Each prompt's own mean, then one buffer-wide std.
    Prompt,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::Buffer => "buffer",
            Baseline::Prompt => "prompt",
        }
    }
}

impl std::fmt::Display for Baseline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "buffer" => Ok(Baseline::Buffer),
            "prompt" => Ok(Baseline::Prompt),
            _ => Err(Error::invalid(format!("unknown advantage baseline `{s}`"))),
        }
    }
}

/// Rewards minus their prompt's mean, scaled by the std of all centred values.
///
/// The result still has mean 0 and population std 1 over the buffer, but
/// reward differences between prompts no longer count as signal.
pub fn prompt_centered_advantages(rewards: &[f64], prompts: &[&str]) -> Vec<f64> {
    assert_eq!(rewards.len(), prompts.len());
    let mut groups: std::collections::BTreeMap<&str, (f64, usize)> = std::collections::BTreeMap::new();
    for (&r, &p) in rewards.iter().zip(prompts) {
        let g = groups.entry(p).or_insert((0.0, 0));
        g.0 += r;
        g.1 += 1;
    }
    let centred: Vec<f64> = rewards
        .iter()
        .zip(prompts)
        .map(|(&r, p)| {
            let (sum, n) = groups[p];
            r - sum / n as f64
        })
        .collect();
    normalize_advantages(&centred)
}

/// Seed of rollout `index` in buffer `buffer` of a run seeded with `seed`.
pub fn rollout_seed(seed: u64, buffer: u64, index: u64) -> u64 {
    derive_labeled(seed ^ buffer.wrapping_mul(0x9E37_79B9), "rollout", index)
}

/// Sample `n` trajectories with prompts taken round-robin and score them.
///
/// Trajectory `i` uses seed `rollout_seed(seed, buffer, i)` no matter how the
/// work is split, so results do not depend on `workers`. A failing reward
/// invalidates its trajectory; the buffer is kept only if at least half of the
/// trajectories are valid.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts<S: Scalar>(
    prompts: &[String],
    models: &Models<S>,
    sched: &NoiseSchedule,
    n: usize,
    reward: &RewardSpec,
    guidance: f64,
    seed: u64,
    buffer: u64,
    workers: usize,
) -> Result<RolloutBuffer<S>> {
    if n == 0 {
        return Err(Error::invalid("need at least one rollout"));
    }
    if prompts.is_empty() {
        return Err(Error::invalid("no prompts to roll out"));
    }
    let ps: Vec<String> = (0..n).map(|i| prompts[i % prompts.len()].clone()).collect();
    let seeds: Vec<u64> = (0..n as u64).map(|i| rollout_seed(seed, buffer, i)).collect();
    let size = models.denoiser.cfg.image_size;
    let score = |mut t: Trajectory<S>| -> Result<Option<Trajectory<S>>> {
        match reward.evaluate(&t.image(size), &t.prompt) {
            Ok(r) => {
                t.reward = Some(r);
                Ok(Some(t))
            }
            Err(e) => {
                warn!("reward failed for {:?} (seed {}): {e}", t.prompt, t.seed);
                Ok(None)
            }
        }
    };
    let run = |lo: usize, hi: usize| -> Result<Vec<Option<Trajectory<S>>>> {
        sample_trajectories(&ps[lo..hi], &seeds[lo..hi], models, sched, guidance)?
            .into_iter()
            .map(score)
            .collect()
    };
    let workers = workers.clamp(1, n);
    let results: Vec<Option<Trajectory<S>>> = if workers == 1 {
        run(0, n)?
    } else {
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
                all.extend(h.join().map_err(|_| Error::Numerical("rollout worker panicked".into()))??);
            }
            Ok::<_, Error>(all)
        })?
    };
    let valid: Vec<Trajectory<S>> = results.into_iter().flatten().collect();
    let invalid = n - valid.len();
    if 2 * valid.len() < n {
        return Err(Error::reward(
            &reward.name,
            format!("only {} of {n} rollouts could be scored; aborting buffer", valid.len()),
        ));
    }
    RolloutBuffer::new(valid, invalid)
}
