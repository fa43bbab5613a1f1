//! DDPO: rollout collection, clipped-PPO updates of LoRA adapters and a
//! truncated direct-backpropagation baseline.

mod direct;
mod ppo;
mod rollout;
mod train;

pub use crate::model::PolicyTarget;
pub use direct::direct_backprop_step;
pub use ppo::{
    log_probs_backward, ppo_gradient, ppo_objective, ppo_objective_grad, ppo_ratio, ppo_update, MinibatchStats,
    PpoConfig, UpdateStats,
};
pub use rollout::{
    collect_rollouts, mean_std, normalize_advantages, prompt_centered_advantages, rollout_seed, Baseline, RolloutBuffer,
};
pub use train::{adapter_file_name, train, BufferMetrics, TrainOutcome, TrainSettings, METRICS_FILE, TIMING_FILE};
