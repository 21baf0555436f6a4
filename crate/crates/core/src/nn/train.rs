use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::CnnModel;
use crate::dataset::LabeledImageSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Batches between validation passes.
    pub validation_frequency: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            max_epochs: 1,
            batch_size: 40,
            validation_frequency: 50,
            rng_seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.validation_frequency == 0 {
            return Err(Error::invalid("validation frequency must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub epoch: usize,
    /// Global batch counter, starting at 1.
    pub batch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub batch: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub batches: Vec<BatchRecord>,
    pub validations: Vec<ValidationRecord>,
}

impl TrainHistory {
    pub fn final_validation_accuracy(&self) -> Option<f64> {
        self.validations.last().map(|v| v.accuracy)
    }
}

const EVAL_CHUNK: usize = 250;

/// Fraction of `set` the model's class scores label correctly.
pub fn accuracy(model: &CnnModel, set: &LabeledImageSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let mut correct = 0;
    for start in (0..set.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(set.len());
        let pred = model.predict(&set.batch(start, end))?;
        correct += pred
            .iter()
            .zip(&set.labels()[start..end])
            .filter(|(p, &l)| **p == l as usize)
            .count();
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Mini-batch SGD over seeded shuffles of `train_set`.
pub fn train(
    mut model: CnnModel,
    train_set: &LabeledImageSet,
    val_set: &LabeledImageSet,
    cfg: &TrainConfig,
) -> Result<(CnnModel, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid(
            "training and validation sets must be non-empty",
        ));
    }
    let mut history = TrainHistory::default();
    if cfg.max_epochs == 0 {
        return Ok((model, history));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let labels = train_set.labels();
    let mut step = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_set.images().select_rows(chunk)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i] as usize).collect();
            let (loss, grads) = model.backward(&batch, &batch_labels)?;
            if !loss.is_finite() {
                return Err(Error::invalid(format!(
                    "loss diverged to {loss} at batch {}",
                    step + 1
                )));
            }
            model.sgd_step(&grads, cfg.learning_rate)?;
            step += 1;
            history.batches.push(BatchRecord {
                epoch,
                batch: step,
                loss,
            });
            if step % cfg.validation_frequency == 0 {
                history.validations.push(ValidationRecord {
                    batch: step,
                    accuracy: accuracy(&model, val_set)?,
                });
            }
        }
    }
    if step % cfg.validation_frequency != 0 {
        history.validations.push(ValidationRecord {
            batch: step,
            accuracy: accuracy(&model, val_set)?,
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;
    use crate::Tensor;

    /// Two separable blobs on a 1×2×2 input.
    fn toy_sets() -> (LabeledImageSet, LabeledImageSet) {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let class = i % 2;
            let base = if class == 0 {
                [0.9, 0.8, 0.1, 0.0]
            } else {
                [0.1, 0.0, 0.9, 0.8]
            };
            let jitter = (i as f64 * 0.37).sin() * 0.05;
            data.extend(base.iter().map(|v: &f64| (v + jitter).clamp(0.0, 1.0)));
            labels.push(class as u8);
        }
        let set =
            LabeledImageSet::new(Tensor::new(vec![40, 1, 2, 2], data).unwrap(), labels, "toy")
                .unwrap();
        let val = set.subset(&(0..10).collect::<Vec<_>>(), "toy-val").unwrap();
        (set, val)
    }

    fn toy_model(seed: u64) -> CnnModel {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_dim: 4,
                out_dim: 6,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                in_dim: 6,
                out_dim: 2,
            },
            LayerSpec::Softmax,
        ];
        CnnModel::initialized([1, 2, 2], layers, 1, seed).unwrap()
    }

    fn cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: 0.5,
            max_epochs: 20,
            batch_size: 8,
            validation_frequency: 10,
            rng_seed: seed,
        }
    }

    #[test]
    fn learns_separable_toy() {
        let (tr, va) = toy_sets();
        let (m, h) = train(toy_model(1), &tr, &va, &cfg(1)).unwrap();
        assert_eq!(h.batches.len(), 100);
        assert_eq!(h.validations.len(), 10);
        assert_eq!(h.final_validation_accuracy(), Some(1.0));
        assert!(h.batches.last().unwrap().loss < h.batches[0].loss);
        assert_eq!(accuracy(&m, &tr).unwrap(), 1.0);
    }

    #[test]
    fn same_seed_same_history_and_weights() {
        let (tr, va) = toy_sets();
        let a = train(toy_model(2), &tr, &va, &cfg(4)).unwrap();
        let b = train(toy_model(2), &tr, &va, &cfg(4)).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (tr, va) = toy_sets();
        let m = toy_model(3);
        let (out, h) = train(
            m.clone(),
            &tr,
            &va,
            &TrainConfig {
                max_epochs: 0,
                ..cfg(0)
            },
        )
        .unwrap();
        assert_eq!(out, m);
        assert!(h.batches.is_empty());
    }

    #[test]
    fn bad_config_rejected() {
        let (tr, va) = toy_sets();
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..cfg(0)
        };
        assert!(matches!(
            train(toy_model(0), &tr, &va, &bad),
            Err(Error::Validation(_))
        ));
        let bad = TrainConfig {
            batch_size: 0,
            ..cfg(0)
        };
        assert!(train(toy_model(0), &tr, &va, &bad).is_err());
    }
}
