//! The sketch-to-sketch predictor and its training.

mod config;
mod input;
mod network;
mod optim;
mod train;

#[cfg(test)]
mod tests;

use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

pub use config::{default_categorical_dims, ModelConfig};
pub use input::{EncodedExample, InputEncoder, ModelInput};
pub use network::{Batch, BatchStats, Block, Linear, Mode, Network, RunningStats, Weights};
pub use optim::{AdamW, AdamWConfig};
pub use train::{mean_loss, optimizer_for, train_two_stage, TrainConfig, TrainReport};

use crate::artifact::{ArtifactReader, ArtifactWriter};
use crate::codes::{CodesMatrix, Modality};
use crate::dataset::{CategoricalVocab, FeatureScaler, TripExample};
use crate::error::{Error, Result};
use crate::sketch::{log_scores, Segment};

/// Leading bytes of the artifact file.
pub const MAGIC: &[u8; 8] = b"TSKMODEL";

/// Architecture knobs independent of the data the model is fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOptions {
    pub hidden: usize,
    pub blocks: usize,
    pub use_features: bool,
    pub use_flag: bool,
    pub categorical_dims: Vec<usize>,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub output_init_scale: f64,
    pub decay: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            hidden: 3000,
            blocks: 3,
            use_features: true,
            use_flag: true,
            categorical_dims: default_categorical_dims(),
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            output_init_scale: 0.01,
            decay: 0.9,
        }
    }
}

impl ModelOptions {
    pub fn to_config(
        &self,
        segments: Vec<Segment>,
        categorical_sizes: Vec<usize>,
        seed: u64,
    ) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            blocks: self.blocks,
            use_features: self.use_features,
            use_flag: self.use_flag,
            categorical_dims: self.categorical_dims.clone(),
            leaky_slope: self.leaky_slope,
            bn_momentum: self.bn_momentum,
            output_init_scale: self.output_init_scale,
            decay: self.decay,
            seed,
            ..ModelConfig::new(segments, self.hidden, categorical_sizes)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    scaler: FeatureScaler,
    vocab: CategoricalVocab,
    modalities: Vec<Modality>,
    final_counts: Vec<u64>,
    codes_fingerprint: u64,
    optimizer_step: u64,
}

/// A trained network with everything needed to encode new examples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    pub optimizer: AdamW,
    pub train_config: TrainConfig,
    pub scaler: FeatureScaler,
    pub vocab: CategoricalVocab,
    pub modalities: Vec<Modality>,
    /// Per city index: occurrences as a final destination in training.
    pub final_counts: Vec<u64>,
    /// Fingerprint of the codes the model was trained against.
    pub codes_fingerprint: u64,
    pub report: TrainReport,
}

impl TrainedModel {
    /// Fits feature statistics on `examples`, then trains a fresh network.
    pub fn fit(
        examples: &[TripExample],
        codes: &[&CodesMatrix],
        codes_fingerprint: u64,
        options: &ModelOptions,
        train: &TrainConfig,
    ) -> Result<Self> {
        let scaler = FeatureScaler::fit(examples);
        let vocab = CategoricalVocab::fit(examples);
        let encoder = InputEncoder::new(codes, options.decay, &scaler, &vocab)?;
        let encoded = examples
            .iter()
            .map(|e| encoder.encode(e))
            .collect::<Result<Vec<_>>>()?;
        if encoded.iter().any(|e| e.target.is_none()) {
            return Err(Error::invalid(
                "examples",
                "training target outside the codes' cities",
            ));
        }
        let mut final_counts = vec![0u64; encoder.city_count()];
        for e in encoded.iter().filter(|e| e.is_final) {
            final_counts[e.target.unwrap()] += 1;
        }
        let config = options.to_config(encoder.segments().to_vec(), vocab.sizes(), train.seed);
        let mut network = Network::new(config)?;
        let mut optimizer = optimizer_for(&network, train);
        let report = train_two_stage(&mut network, &mut optimizer, &encoder, &encoded, train)?;
        Ok(TrainedModel {
            network,
            optimizer,
            train_config: train.clone(),
            scaler,
            vocab,
            modalities: codes.iter().map(|c| c.modality()).collect(),
            final_counts,
            codes_fingerprint,
            report,
        })
    }

    pub fn encoder<'a>(&'a self, codes: &[&'a CodesMatrix]) -> Result<InputEncoder<'a>> {
        let modalities: Vec<Modality> = codes.iter().map(|c| c.modality()).collect();
        if modalities != self.modalities {
            return Err(Error::invalid(
                "codes",
                format!(
                    "model expects modalities {:?}, got {modalities:?}",
                    self.modalities
                ),
            ));
        }
        InputEncoder::new(codes, self.network.config.decay, &self.scaler, &self.vocab)
    }

    /// Eval-mode per-city scores (geometric mean of output cells) for each
    /// example.
    pub fn score(&self, codes: &[&CodesMatrix], examples: &[TripExample]) -> Result<Vec<Vec<f64>>> {
        let encoder = self.encoder(codes)?;
        let encoded = examples
            .iter()
            .map(|e| encoder.encode(e))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&EncodedExample> = encoded.iter().collect();
        let mut scores = Vec::with_capacity(examples.len());
        for chunk in refs.chunks(256) {
            let batch = encoder.batch(&self.network.config, chunk, false)?;
            let out = self.network.forward(&batch, Mode::Eval)?;
            for row in out.outer_iter() {
                let logs = log_scores(row.as_slice().unwrap(), codes)?;
                scores.push(logs.into_iter().map(f64::exp).collect());
            }
        }
        Ok(scores)
    }

    pub fn save(&self, path: &Path, fingerprint: u64) -> Result<()> {
        let meta = Meta {
            model: self.network.config.clone(),
            train: self.train_config.clone(),
            scaler: self.scaler.clone(),
            vocab: self.vocab.clone(),
            modalities: self.modalities.clone(),
            final_counts: self.final_counts.clone(),
            codes_fingerprint: self.codes_fingerprint,
            optimizer_step: self.optimizer.step,
        };
        let mut w = ArtifactWriter::create(path, MAGIC, fingerprint)?;
        w.bytes(&serde_json::to_vec(&meta)?)?;
        for weights in [&self.network.weights, &self.optimizer.m, &self.optimizer.v] {
            for t in weights.tensors() {
                w.f64s(t.data)?;
            }
        }
        for r in &self.network.running {
            w.f64s(r.mean.as_slice().unwrap())?;
            w.f64s(r.var.as_slice().unwrap())?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, u64)> {
        let mut r = ArtifactReader::open(path, MAGIC)?;
        let fp = r.header.fingerprint;
        let meta: Meta = serde_json::from_slice(&r.bytes()?)?;
        let mut network = Network::new(meta.model.clone())?;
        let mut optimizer = AdamW::new(meta.train.optimizer, &network.weights);
        optimizer.step = meta.optimizer_step;
        for weights in [&mut network.weights, &mut optimizer.m, &mut optimizer.v] {
            for t in weights.tensors_mut() {
                let data = r.f64s()?;
                if data.len() != t.data.len() {
                    return Err(Error::Format(format!(
                        "tensor {} has {} values, expected {}",
                        t.name,
                        data.len(),
                        t.data.len()
                    )));
                }
                t.data.copy_from_slice(&data);
            }
        }
        for running in &mut network.running {
            running.mean = Array1::from(r.f64s()?);
            running.var = Array1::from(r.f64s()?);
            if running.mean.len() != meta.model.hidden || running.var.len() != meta.model.hidden {
                return Err(Error::Format(
                    "batch-norm statistics have the wrong size".into(),
                ));
            }
        }
        r.expect_eof()?;
        Ok((
            TrainedModel {
                network,
                optimizer,
                train_config: meta.train,
                scaler: meta.scaler,
                vocab: meta.vocab,
                modalities: meta.modalities,
                final_counts: meta.final_counts,
                codes_fingerprint: meta.codes_fingerprint,
                report: TrainReport::default(),
            },
            fp,
        ))
    }
}
