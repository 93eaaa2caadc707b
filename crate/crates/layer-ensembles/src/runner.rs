//! Training loop: shuffled mini-batches, optional augmentation, Adam with
//! plateau learning-rate decay, per-epoch logging and best-validation
//! checkpointing.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, Sample};
use crate::error::Result;
use crate::model::{derive_seed, Mode, Network};
use crate::optim::{AdamConfig, AdamState, PlateauScheduler};
use crate::tensor::Tensor;
use crate::autodiff::Graph;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochLog>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

/// Stacks normalized images into a [B,1,H,W] batch with flat labels.
fn assemble_batch(samples: &[&Sample]) -> Result<(Tensor, Vec<u32>)> {
    let (h, w) = (samples[0].mask.height(), samples[0].mask.width());
    let b = samples.len();
    let mut pixels = Vec::with_capacity(b * h * w);
    let mut labels = Vec::with_capacity(b * h * w);
    for s in samples {
        let norm = data::normalize(&s.image)?;
        pixels.extend_from_slice(norm.data());
        labels.extend_from_slice(s.mask.labels());
    }
    Ok((Tensor::new(vec![b, 1, h, w], pixels)?, labels))
}

/// Mean multi-head loss over a dataset split in eval mode (no grad).
pub fn split_loss(net: &Network, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in samples.chunks(batch_size) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (batch, labels) = assemble_batch(&refs)?;
        let mut g = Graph::new();
        let pass = net.forward_on_graph(&mut g, &batch, Mode::Eval, None)?;
        let loss = net.multi_head_loss(&mut g, &pass.head_nodes, &labels)?;
        total += g.value(loss).item();
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Trains in place. When `checkpoint_path` is given, the parameters with the
/// best validation loss seen so far are saved there (and are left on disk
/// when training ends, regardless of the final epoch's quality).
pub fn train(
    net: &mut Network,
    train_set: &[Sample],
    val_set: &[Sample],
    config: &RunConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    let tc = &config.train;
    let shapes: Vec<Vec<usize>> = (0..net.params().len())
        .map(|i| net.params().value(i).shape().to_vec())
        .collect();
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: tc.learning_rate,
            ..Default::default()
        },
        &shapes,
    );
    let mut scheduler = PlateauScheduler::new(tc.learning_rate, tc.lr_factor, tc.patience, tc.min_delta);
    let mut log = Vec::with_capacity(tc.epochs);
    let mut best_val_loss = f64::INFINITY;
    let mut best_epoch = 0;

    for epoch in 0..tc.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 500 + epoch as u64));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let prepared: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    if tc.augment {
                        data::augment(&train_set[i], &mut rng)
                    } else {
                        Ok(train_set[i].clone())
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Sample> = prepared.iter().collect();
            let (batch, labels) = assemble_batch(&refs)?;

            let mut g = Graph::new();
            let pass = net.forward_on_graph(&mut g, &batch, Mode::Train, None)?;
            let loss = net.multi_head_loss(&mut g, &pass.head_nodes, &labels)?;
            epoch_loss += g.value(loss).item();
            batches += 1;
            let grads = g.backward(loss)?;
            net.update_running_stats(&g, &pass);

            let grad_vec: Vec<Option<Tensor>> = (0..net.params().len())
                .map(|i| grads.param(i).cloned())
                .collect();
            let mut values: Vec<Tensor> = (0..net.params().len())
                .map(|i| net.params().value(i).clone())
                .collect();
            let names: Vec<String> = (0..net.params().len())
                .map(|i| net.params().name(i).to_string())
                .collect();
            adam.step(&mut values, &grad_vec, |i| names[i].clone())?;
            for (i, v) in values.into_iter().enumerate() {
                *net.params_mut().value_mut(i) = v;
            }
        }
        let train_loss = epoch_loss / batches as f64;
        let val_loss = split_loss(net, val_set, tc.batch_size)?;
        let lr = scheduler.observe(val_loss);
        adam.config.learning_rate = lr;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
        });
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_epoch = epoch;
            if let Some(path) = checkpoint_path {
                checkpoint::save_params(path, net.params())?;
            }
        }
    }
    Ok(TrainOutcome {
        log,
        best_val_loss,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LossKind, ModelConfig};

    fn tiny_run_config() -> RunConfig {
        let mut config = RunConfig::desk_default();
        config.model = ModelConfig {
            depth: 2,
            base_channels: 4,
            num_classes: 1,
            height: 32,
            width: 32,
            first_block_downsamples: false,
            loss: LossKind::GeneralizedDice,
            ce_class_weights: None,
        };
        config.data.height = 32;
        config.data.width = 32;
        config.data.train = 8;
        config.data.val = 4;
        config.data.test = 4;
        config.train.epochs = 2;
        config.train.batch_size = 4;
        config.train.learning_rate = 1e-2;
        config.validate().unwrap();
        config
    }

    #[test]
    fn two_epochs_log_and_checkpoint() {
        let config = tiny_run_config();
        let dataset = data::generate(&config.data).unwrap();
        let mut net = Network::build(config.model.clone(), config.seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("best.ckpt");
        let outcome = train(&mut net, &dataset.train, &dataset.val, &config, Some(&ckpt)).unwrap();
        assert_eq!(outcome.log.len(), 2);
        assert!(ckpt.exists());
        assert!(outcome.best_val_loss.is_finite());
        assert!(outcome.log.iter().all(|e| e.train_loss.is_finite() && e.val_loss.is_finite()));
    }

    #[test]
    fn training_is_deterministic_given_seed() {
        let config = tiny_run_config();
        let dataset = data::generate(&config.data).unwrap();
        let run = || {
            let mut net = Network::build(config.model.clone(), config.seed).unwrap();
            train(&mut net, &dataset.train, &dataset.val, &config, None).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log, b.log);
    }
}
