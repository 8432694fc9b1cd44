use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{forward_pass, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Parameters of the synthetic classification task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskConfig {
    pub dims: (usize, usize, usize),
    pub classes: usize,
    pub teacher_channels: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Standard deviation of per-pixel noise around each sample's channel means.
    pub noise: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            dims: (16, 16, 4),
            classes: 4,
            teacher_channels: 8,
            train_samples: 256,
            eval_samples: 256,
            noise: 0.5,
            seed: 0,
        }
    }
}

/// Labels come from a randomly drawn teacher network with the classifier
/// architecture, so a student of the same shape can fit them.
#[derive(Debug, Clone)]
pub struct PlantedTask {
    pub teacher: Network,
    pub train_inputs: Vec<Tensor3>,
    pub train_labels: Vec<usize>,
    pub eval_inputs: Vec<Tensor3>,
    pub eval_labels: Vec<usize>,
}

impl PlantedTask {
    pub fn generate(cfg: &TaskConfig) -> Result<Self> {
        if cfg.classes < 2 || cfg.train_samples == 0 || cfg.eval_samples == 0 {
            return Err(Error::Config("task needs at least two classes and non-empty splits".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let teacher = Network::classifier(cfg.dims, cfg.teacher_channels, cfg.classes, None, &mut rng)?;
        let sample = |rng: &mut ChaCha8Rng| {
            let means: Vec<f64> = (0..cfg.dims.2).map(|_| rng.sample(StandardNormal)).collect();
            Tensor3::from_fn(cfg.dims, |_, _, c| means[c] + cfg.noise * rng.sample::<f64, _>(StandardNormal))
        };
        let train_inputs: Vec<Tensor3> = (0..cfg.train_samples).map(|_| sample(&mut rng)).collect();
        let eval_inputs: Vec<Tensor3> = (0..cfg.eval_samples).map(|_| sample(&mut rng)).collect();

        let train_logits = logits(&teacher, &train_inputs)?;
        // centre each class score on the training split so labels are roughly balanced
        let mut centre = vec![0.0; cfg.classes];
        for z in &train_logits {
            for (c, v) in centre.iter_mut().zip(z) {
                *c += v / train_logits.len() as f64;
            }
        }
        let label = |z: &Vec<f64>| {
            z.iter()
                .zip(&centre)
                .map(|(v, c)| v - c)
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i)
                .unwrap_or(0)
        };
        let train_labels = train_logits.iter().map(label).collect();
        let eval_labels = logits(&teacher, &eval_inputs)?.iter().map(label).collect();
        Ok(Self {
            teacher,
            train_inputs,
            train_labels,
            eval_inputs,
            eval_labels,
        })
    }
}

fn logits(net: &Network, xs: &[Tensor3]) -> Result<Vec<Vec<f64>>> {
    Ok(forward_pass(net, xs)?
        .outputs()
        .iter()
        .map(|a| a.as_slice().to_vec())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_uses_every_class() {
        let cfg = TaskConfig {
            train_samples: 64,
            eval_samples: 16,
            ..TaskConfig::default()
        };
        let a = PlantedTask::generate(&cfg).unwrap();
        let b = PlantedTask::generate(&cfg).unwrap();
        assert_eq!(a.train_labels, b.train_labels);
        assert_eq!(a.eval_inputs, b.eval_inputs);
        for c in 0..cfg.classes {
            assert!(a.train_labels.contains(&c), "class {c} unused");
        }
    }
}
