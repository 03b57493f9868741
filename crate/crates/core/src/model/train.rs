use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::input::{EncodedExample, InputEncoder};
use super::network::{Mode, Network};
use super::optim::{AdamW, AdamWConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    /// Stage one: every example.
    pub epochs: usize,
    /// Stage two: final-destination examples only.
    pub finetune_epochs: usize,
    /// Stage-two learning rate relative to `optimizer.lr`.
    pub finetune_lr_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            batch_size: 128,
            epochs: 2,
            finetune_epochs: 1,
            finetune_lr_factor: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean mini-batch loss of every epoch, stage one then stage two.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Two-stage schedule: `epochs` over all examples, then `finetune_epochs`
/// over the final-destination subset at a reduced learning rate. Batches are
/// reshuffled every epoch from a generator seeded by `config.seed`; a
/// trailing batch of one sample is dropped (batch norm needs two).
pub fn train_two_stage(
    network: &mut Network,
    optimizer: &mut AdamW,
    encoder: &InputEncoder<'_>,
    examples: &[EncodedExample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    if config.batch_size < 2 {
        return Err(Error::invalid("batch_size", "must be at least 2"));
    }
    if examples.is_empty() {
        return Err(Error::NoData("no training examples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();

    let all: Vec<&EncodedExample> = examples.iter().collect();
    let lr = config.optimizer.lr;
    for _ in 0..config.epochs {
        let loss = run_epoch(
            network,
            optimizer,
            encoder,
            &all,
            config.batch_size,
            lr,
            &mut rng,
        )?;
        report.epoch_losses.push(loss);
    }

    let finals: Vec<&EncodedExample> = examples.iter().filter(|e| e.is_final).collect();
    if config.finetune_epochs > 0 && finals.len() < 2 {
        log::warn!("no final-destination examples to fine-tune on; skipping stage two");
    } else {
        let lr = lr * config.finetune_lr_factor;
        for _ in 0..config.finetune_epochs {
            let loss = run_epoch(
                network,
                optimizer,
                encoder,
                &finals,
                config.batch_size,
                lr,
                &mut rng,
            )?;
            report.epoch_losses.push(loss);
        }
    }
    report.steps = optimizer.step;
    Ok(report)
}

fn run_epoch(
    network: &mut Network,
    optimizer: &mut AdamW,
    encoder: &InputEncoder<'_>,
    examples: &[&EncodedExample],
    batch_size: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut order: Vec<&EncodedExample> = examples.to_vec();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut seen = 0usize;
    for chunk in order.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let batch = encoder.batch(&network.config, chunk, true)?;
        let (loss, grads, stats) = network.loss_and_gradients(&batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss,
                step: optimizer.step as usize,
            });
        }
        optimizer.step(&mut network.weights, &grads, lr);
        network.update_running_stats(&stats);
        total += loss * chunk.len() as f64;
        seen += chunk.len();
    }
    Ok(if seen == 0 {
        f64::NAN
    } else {
        total / seen as f64
    })
}

/// Mean per-row cross-entropy over `examples` in the given mode.
pub fn mean_loss(
    network: &Network,
    encoder: &InputEncoder<'_>,
    examples: &[EncodedExample],
    mode: Mode,
    batch_size: usize,
) -> Result<f64> {
    let refs: Vec<&EncodedExample> = examples.iter().collect();
    let mut total = 0.0;
    for chunk in refs.chunks(batch_size.max(2)) {
        let batch = encoder.batch(&network.config, chunk, true)?;
        let logits = network.logits(&batch, mode)?;
        let (loss, _) = network.loss_from_logits(&logits, batch.targets.as_ref().unwrap());
        total += loss * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Fresh optimizer for `network` using the schedule's AdamW settings.
pub fn optimizer_for(network: &Network, config: &TrainConfig) -> AdamW {
    AdamW::new(config.optimizer, &network.weights)
}
