//! Reward functions scoring a generated image against its prompt.
//!
//! Everything here is deterministic. Only [`RewardSpec::target_distance`] is
//! differentiable; it exists for the direct-backpropagation baseline.

mod external;
mod jpeg;
pub mod oracles;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

pub use external::{external_score, DEFAULT_TIMEOUT};
pub use jpeg::{compressibility, incompressibility, jpeg_size, CODEC_ID};
pub use oracles::{color_consistency, composition, location, object_count, OracleConfig};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::toy_world::Task;

pub type ScoreFn = dyn Fn(&Image, &str) -> Result<f64> + Send + Sync;
/// Value and gradient with respect to HWC image values given as `(data, width, height)`.
pub type DiffFn = dyn Fn(&[f64], usize, usize, &str) -> Result<(f64, Vec<f64>)> + Send + Sync;

/// Settings shared by the built-in rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardConfig {
    pub oracle: OracleConfig,
    pub jpeg_quality: u8,
    pub external_timeout: Duration,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            oracle: OracleConfig::default(),
            jpeg_quality: 95,
            external_timeout: DEFAULT_TIMEOUT,
        }
    }
}

/// A named scorer `(image, prompt) → scalar`.
#[derive(Clone)]
pub struct RewardSpec {
    pub name: String,
    pub differentiable: bool,
    pub nominal_range: (f64, f64),
    score: Arc<ScoreFn>,
    diff: Option<Arc<DiffFn>>,
}

impl fmt::Debug for RewardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RewardSpec")
            .field("name", &self.name)
            .field("differentiable", &self.differentiable)
            .field("nominal_range", &self.nominal_range)
            .finish()
    }
}

impl RewardSpec {
    pub fn new(name: &str, nominal_range: (f64, f64), score: Arc<ScoreFn>) -> Self {
        Self {
            name: name.to_string(),
            differentiable: false,
            nominal_range,
            score,
            diff: None,
        }
    }

    /// Attach an exact value-and-gradient implementation, making the reward differentiable.
    pub fn with_gradient(mut self, diff: Arc<DiffFn>) -> Self {
        self.differentiable = true;
        self.diff = Some(diff);
        self
    }

    /// Score an image; non-finite values are reported as errors.
    pub fn evaluate(&self, image: &Image, prompt: &str) -> Result<f64> {
        let v = (self.score)(image, prompt)?;
        if !v.is_finite() {
            return Err(Error::reward(&self.name, format!("non-finite value {v}")));
        }
        Ok(v)
    }

    pub fn gradient(&self, image: &Image, prompt: &str) -> Result<Vec<f64>> {
        let data: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
        self.value_and_grad(&data, image.width, image.height, prompt).map(|(_, g)| g)
    }

    /// Reward and its gradient at full precision, for HWC values in `[0, 1]`.
    pub fn value_and_grad(&self, data: &[f64], width: usize, height: usize, prompt: &str) -> Result<(f64, Vec<f64>)> {
        match &self.diff {
            Some(d) => {
                if data.len() != width * height * 3 {
                    return Err(Error::shape(format!("{} values for a {width}x{height} image", data.len())));
                }
                d(data, width, height, prompt)
            }
            None => Err(Error::reward(
                &self.name,
                "reward is not differentiable; direct backpropagation needs a differentiable reward",
            )),
        }
    }

    /// `−‖image − target‖²`, differentiable in the image.
    pub fn target_distance(target: Image) -> Self {
        let target: Arc<Vec<f64>> = Arc::new(target.data.iter().map(|&v| v as f64).collect());
        let t1 = target.clone();
        let spec = Self::new(
            "target_distance",
            (f64::NEG_INFINITY, 0.0),
            Arc::new(move |img: &Image, _: &str| {
                let data: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
                squared_distance(&data, &t1).map(|(v, _)| v)
            }),
        );
        spec.with_gradient(Arc::new(move |data: &[f64], _, _, _: &str| squared_distance(data, &target)))
    }
}

fn squared_distance(data: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if data.len() != target.len() {
        return Err(Error::shape(format!("image has {} values, target {}", data.len(), target.len())));
    }
    let v = -data.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    Ok((v, data.iter().zip(target).map(|(a, b)| -2.0 * (a - b)).collect()))
}

/// Names accepted by [`by_name`] besides `external:<command>`.
pub const BUILTIN: [&str; 7] = [
    "incompressibility",
    "compressibility",
    "color",
    "count",
    "composition",
    "location",
    "gray_target",
];

/// Look a reward up by name.
pub fn by_name(name: &str, cfg: &RewardConfig) -> Result<RewardSpec> {
    if let Some(cmd) = name.strip_prefix("external:") {
        return external_score(cmd, cfg.external_timeout);
    }
    let q = cfg.jpeg_quality;
    let o = cfg.oracle.clone();
    let spec = match name {
        "incompressibility" => RewardSpec::new(name, (0.0, f64::INFINITY), Arc::new(move |img, _| incompressibility(img, q))),
        "compressibility" => RewardSpec::new(name, (f64::NEG_INFINITY, 0.0), Arc::new(move |img, _| compressibility(img, q))),
        "color" => RewardSpec::new(name, (0.0, 1.0), Arc::new(move |img, p| color_consistency(img, p, &o))),
        "count" => RewardSpec::new(name, (0.0, 1.0), Arc::new(move |img, p| object_count(img, p, &o))),
        "composition" => RewardSpec::new(name, (0.0, 1.0), Arc::new(move |img, p| composition(img, p, &o))),
        "location" => RewardSpec::new(name, (0.0, 1.0), Arc::new(move |img, p| location(img, p, &o))),
        "gray_target" => {
            let bg = cfg.oracle.background as f64;
            let value = move |data: &[f64]| -> (f64, Vec<f64>) {
                let v = -data.iter().map(|a| (a - bg).powi(2)).sum::<f64>();
                (v, data.iter().map(|a| -2.0 * (a - bg)).collect())
            };
            RewardSpec::new(
                name,
                (f64::NEG_INFINITY, 0.0),
                Arc::new(move |img: &Image, _| Ok(value(&img.data.iter().map(|&v| v as f64).collect::<Vec<_>>()).0)),
            )
            .with_gradient(Arc::new(move |data: &[f64], _, _, _: &str| Ok(value(data))))
        }
        _ => return Err(Error::invalid(format!("unknown reward `{name}`"))),
    };
    Ok(spec)
}

/// The alignment reward that evaluates a task.
pub fn reward_for_task(task: Task) -> &'static str {
    match task {
        Task::Color => "color",
        Task::Composition => "composition",
        Task::Count => "count",
        Task::Location => "location",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_knows_builtins() {
        let cfg = RewardConfig::default();
        for name in BUILTIN {
            assert_eq!(by_name(name, &cfg).unwrap().name, name);
        }
        assert!(by_name("aesthetic", &cfg).is_err());
        assert!(!by_name("incompressibility", &cfg).unwrap().differentiable);
        assert!(by_name("gray_target", &cfg).unwrap().differentiable);
    }

    #[test]
    fn nondifferentiable_gradient_is_rejected() {
        let spec = by_name("incompressibility", &RewardConfig::default()).unwrap();
        let err = spec.gradient(&Image::filled(8, 8, [0.5; 3]), "a red circle").unwrap_err();
        assert!(err.to_string().contains("not differentiable"));
    }

    #[test]
    fn target_distance_gradient_matches_differences() {
        let target = Image::filled(2, 2, [0.2, 0.4, 0.6]);
        let spec = RewardSpec::target_distance(target);
        let img = Image {
            width: 2,
            height: 2,
            data: (0..12).map(|i| i as f32 / 12.0).collect(),
        };
        let g = spec.gradient(&img, "").unwrap();
        for i in 0..12 {
            let h = 1e-2f32;
            let mut p = img.clone();
            p.data[i] += h;
            let mut m = img.clone();
            m.data[i] -= h;
            let fd = (spec.evaluate(&p, "").unwrap() - spec.evaluate(&m, "").unwrap()) / (2.0 * h as f64);
            assert!((fd - g[i]).abs() < 1e-4);
        }
    }
}
