//! Adam training over per-example tapes. Batches are processed in shuffled
//! but seed-determined order, and gradients are accumulated example by
//! example, so a (seed, data) pair always reproduces the same parameters.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::{EncodedDataset, TrainedModel};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_bow_mlp() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            epochs: 5,
            seed: 42,
        }
    }

    pub fn for_text_cnn() -> Self {
        TrainConfig {
            epochs: 3,
            ..Self::for_bow_mlp()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.epsilon <= 0.0
            || self.batch_size == 0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::InvalidConfig(
                "learning rate, epsilon and batch size must be positive; decay coefficients must lie in (0, 1)"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// What training recorded about a model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetadata {
    pub seed: u64,
    pub epochs: usize,
    /// Mean loss per epoch, in order.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &[Arc<Tensor>]) -> Self {
        Adam {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    fn apply(&mut self, config: &TrainConfig, params: &mut [Arc<Tensor>], grads: &[Tensor]) {
        self.step += 1;
        let bias1 = 1.0 - config.beta1.powi(self.step);
        let bias2 = 1.0 - config.beta2.powi(self.step);
        for (k, grad) in grads.iter().enumerate() {
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            let values = Arc::make_mut(&mut params[k]).data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                values[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
            }
        }
    }
}

/// Train a freshly built model on an encoded dataset. Returns the model with
/// updated parameters and recorded metadata (epoch losses, final training
/// accuracy); with zero epochs the parameters are untouched.
pub fn train(
    mut model: TrainedModel,
    data: &EncodedDataset,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    match data {
        EncodedDataset::Bow(_) => {
            model.bow_config()?;
        }
        EncodedDataset::Sequence(_) => {
            model.cnn_config()?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut grads: Vec<Tensor> = model
                .params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let mut tape = Tape::new();
                let (param_nodes, score) = match data {
                    EncodedDataset::Bow(examples) => {
                        let fwd = model.bow_forward(&mut tape, &examples[i].0, false, true)?;
                        (fwd.params, fwd.score)
                    }
                    EncodedDataset::Sequence(examples) => {
                        let fwd = model.cnn_forward(&mut tape, &examples[i].0, false, true)?;
                        (fwd.params, fwd.score)
                    }
                };
                let label = match data {
                    EncodedDataset::Bow(examples) => examples[i].1,
                    EncodedDataset::Sequence(examples) => examples[i].1,
                };
                let loss = tape.binary_cross_entropy(score, f64::from(label))?;
                let loss_value = tape.scalar_value(loss);
                if !loss_value.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch });
                }
                batch_loss += loss_value;
                let mut map = tape.backward(loss)?;
                for (k, node) in param_nodes.iter().enumerate() {
                    let g = map.take(*node).expect("parameter gradient");
                    for (acc, gi) in grads[k].data_mut().iter_mut().zip(g.data()) {
                        *acc += gi;
                    }
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            loss_sum += batch_loss;
            adam.apply(config, &mut model.params, &grads);
        }
        if !model.params_finite() {
            return Err(Error::NonFiniteParameters { epoch });
        }
        epoch_losses.push(loss_sum / data.len() as f64);
    }

    let train_accuracy = super::evaluate(&model, data)?;
    model.metadata = Some(TrainMetadata {
        seed: config.seed,
        epochs: config.epochs,
        epoch_losses,
        train_accuracy,
        test_accuracy: None,
    });
    Ok(model)
}
