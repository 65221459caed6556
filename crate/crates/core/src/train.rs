//! Momentum-SGD training loop for the zoo, plus shared evaluation
//! helpers used by the CLI and the attack campaigns.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Graph, Sgd};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_pckh, pckh, MetricRecord};
use crate::models::{labels_for_sample, training_loss, LossSurface, PoseModel, LABEL_SIGMA};
use crate::synthpose::PoseSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Training supervises every stack (intermediate supervision).
    pub loss_surface: LossSurface,
    pub sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            lr: 2.0,
            momentum: 0.9,
            seed: 1,
            loss_surface: LossSurface::All,
            sigma: LABEL_SIGMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_pckh: f64,
}

/// Trains in place; returns one stats row per epoch. Deterministic in
/// (model seed, data, config seed). A non-finite loss aborts with the
/// offending epoch.
pub fn train_model(
    model: &mut PoseModel,
    train: &[PoseSample],
    val: &[PoseSample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    if train.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut optimizer = Sgd::new(cfg.lr, cfg.momentum);
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            model.params_mut().zero_grads();
            for &i in chunk {
                let sample = &train[i];
                let labels = labels_for_sample(model.config(), sample, cfg.sigma);
                let mut graph = Graph::new();
                let pass = model.forward_graph(&mut graph, &sample.image, false, true)?;
                let loss = training_loss(&mut graph, &pass, &labels, cfg.loss_surface)?;
                let value = graph.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                epoch_loss += value;
                graph.backward(loss)?;
                for (idx, node) in pass.param_nodes.iter().enumerate() {
                    let grad = graph.grad(*node);
                    let into = model.params_mut().tensors_mut()[idx].grad_mut();
                    for (dst, g) in into.iter_mut().zip(grad) {
                        *dst += g;
                    }
                }
            }
            optimizer.step_scaled(model.params_mut().tensors_mut(), 1.0 / chunk.len() as f64);
        }
        let val_pckh = aggregate_pckh(&evaluate(model, val)?);
        stats.push(EpochStats {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_pckh,
        });
    }
    Ok(stats)
}

/// Clean predictions scored against ground truth, one record per sample.
pub fn evaluate(model: &PoseModel, samples: &[PoseSample]) -> Result<Vec<MetricRecord>> {
    samples
        .iter()
        .map(|s| {
            let out = model.predict(&s.image)?;
            pckh(&out.joints, s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelConfig};
    use crate::synthpose::{Dataset, SkeletonSpec};

    #[test]
    fn short_training_run_reduces_the_loss() {
        let spec = SkeletonSpec::five_joint();
        let (train, val) = Dataset::generate(&spec, 60, 3, 0.2).split(0.8, 1);
        let mut model = build_model(&ModelConfig::heatmap(5, 4, 1), 7).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let stats = train_model(&mut model, &train.samples, &val.samples, &cfg).unwrap();
        assert_eq!(stats.len(), 3);
        assert!(stats[2].train_loss < stats[0].train_loss);
    }

    #[test]
    fn training_is_deterministic() {
        let spec = SkeletonSpec::five_joint();
        let (train, val) = Dataset::generate(&spec, 40, 3, 0.2).split(0.8, 1);
        let run = || {
            let mut model = build_model(&ModelConfig::direct(5, 4), 7).unwrap();
            let cfg = TrainConfig {
                epochs: 2,
                ..TrainConfig::default()
            };
            train_model(&mut model, &train.samples, &val.samples, &cfg).unwrap();
            model.params().tensors()[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
