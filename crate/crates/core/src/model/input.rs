use std::collections::HashMap;

use ndarray::Array2;

use super::config::ModelConfig;
use super::network::Batch;
use crate::codes::CodesMatrix;
use crate::dataset::{
    CategoricalVocab, FeatureScaler, TripExample, NUM_CATEGORICAL, NUM_NUMERICAL,
};
use crate::error::{Error, Result};
use crate::sketch::{aggregate, concat, normalize_widthwise, Segment, Sketch};
use crate::CityId;

/// Network input for one example, before flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub first_city_sketch: Sketch,
    pub prev_city_sketch: Sketch,
    /// Decayed sum of every prefix city, L2-normalized per row.
    pub all_cities_sketch: Sketch,
    /// Standardized.
    pub numerical: [f64; NUM_NUMERICAL],
    pub categorical: [usize; NUM_CATEGORICAL],
    pub is_final: bool,
}

impl ModelInput {
    /// Writes the dense part of the input row in network layout.
    pub fn write_dense(&self, config: &ModelConfig, row: &mut [f64]) {
        debug_assert_eq!(row.len(), config.dense_len());
        let s = config.sketch_len();
        row[..s].copy_from_slice(self.first_city_sketch.cells());
        row[s..2 * s].copy_from_slice(self.prev_city_sketch.cells());
        row[2 * s..3 * s].copy_from_slice(self.all_cities_sketch.cells());
        let mut col = 3 * s;
        if config.use_features {
            row[col..col + NUM_NUMERICAL].copy_from_slice(&self.numerical);
            col += NUM_NUMERICAL;
        }
        if config.use_flag {
            row[col] = if self.is_final { 1.0 } else { 0.0 };
        }
    }
}

/// An example with cities resolved to dense indices and features encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub prefix: Vec<usize>,
    pub target: Option<usize>,
    pub numerical: [f64; NUM_NUMERICAL],
    pub categorical: [usize; NUM_CATEGORICAL],
    pub is_final: bool,
}

/// Turns trip examples into network inputs using fitted codes and feature
/// statistics.
pub struct InputEncoder<'a> {
    codes: Vec<&'a CodesMatrix>,
    index: HashMap<CityId, usize>,
    segments: Vec<Segment>,
    decay: f64,
    scaler: &'a FeatureScaler,
    vocab: &'a CategoricalVocab,
}

impl<'a> InputEncoder<'a> {
    pub fn new(
        codes: &[&'a CodesMatrix],
        decay: f64,
        scaler: &'a FeatureScaler,
        vocab: &'a CategoricalVocab,
    ) -> Result<Self> {
        let first = codes.first().ok_or(Error::NoData("no code modalities"))?;
        if codes.iter().any(|c| c.city_ids() != first.city_ids()) {
            return Err(Error::invalid("codes", "modalities cover different cities"));
        }
        Ok(InputEncoder {
            index: first
                .city_ids()
                .iter()
                .enumerate()
                .map(|(i, &c)| (c, i))
                .collect(),
            segments: codes.iter().map(|c| c.segment()).collect(),
            codes: codes.to_vec(),
            decay,
            scaler,
            vocab,
        })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn codes(&self) -> &[&'a CodesMatrix] {
        &self.codes
    }

    pub fn city_count(&self) -> usize {
        self.index.len()
    }

    pub fn city_index(&self, city: CityId) -> Result<usize> {
        self.index
            .get(&city)
            .copied()
            .ok_or(Error::UnknownCity(city))
    }

    /// Item sketch of a city across all modalities.
    pub fn city_sketch(&self, city: usize) -> Sketch {
        let parts: Vec<Sketch> = self.codes.iter().map(|c| c.item_sketch(city)).collect();
        concat(&parts.iter().collect::<Vec<_>>())
    }

    /// Region ids of a city for every sketch row, modality by modality.
    pub fn target_rows(&self, city: usize) -> Vec<u16> {
        self.codes
            .iter()
            .flat_map(|c| c.row(city).iter().copied())
            .collect()
    }

    /// Resolves cities and encodes features. An unknown target is allowed
    /// (it becomes `None`); an unknown prefix city is an error.
    pub fn encode(&self, example: &TripExample) -> Result<EncodedExample> {
        if example.prefix.is_empty() {
            return Err(Error::invalid("prefix", "empty"));
        }
        Ok(EncodedExample {
            prefix: example
                .prefix
                .iter()
                .map(|&c| self.city_index(c))
                .collect::<Result<_>>()?,
            target: self.index.get(&example.target).copied(),
            numerical: self.scaler.transform(&example.numerical),
            categorical: self.vocab.encode(&example.categorical),
            is_final: example.is_final,
        })
    }

    pub fn assemble(&self, example: &EncodedExample) -> ModelInput {
        let sketches: Vec<Sketch> = example
            .prefix
            .iter()
            .map(|&c| self.city_sketch(c))
            .collect();
        let refs: Vec<&Sketch> = sketches.iter().collect();
        let all = aggregate(&self.segments, &refs, self.decay).expect("layouts agree");
        ModelInput {
            first_city_sketch: sketches[0].clone(),
            prev_city_sketch: sketches[sketches.len() - 1].clone(),
            all_cities_sketch: normalize_widthwise(&all),
            numerical: example.numerical,
            categorical: example.categorical,
            is_final: example.is_final,
        }
    }

    pub fn assemble_input(&self, example: &TripExample) -> Result<ModelInput> {
        Ok(self.assemble(&self.encode(example)?))
    }

    /// Flattens examples into a network batch. With `with_targets`, every
    /// example must have a known target.
    pub fn batch(
        &self,
        config: &ModelConfig,
        examples: &[&EncodedExample],
        with_targets: bool,
    ) -> Result<Batch> {
        if config.segments != self.segments {
            return Err(Error::shape(
                format!("{:?}", config.segments),
                format!("{:?}", self.segments),
            ));
        }
        let mut dense = Array2::zeros((examples.len(), config.dense_len()));
        let mut targets = with_targets.then(|| Array2::zeros((examples.len(), config.rows())));
        for (i, ex) in examples.iter().enumerate() {
            let input = self.assemble(ex);
            input.write_dense(config, dense.row_mut(i).as_slice_mut().unwrap());
            if let Some(t) = targets.as_mut() {
                let city = ex
                    .target
                    .ok_or(Error::NoData("example without a known target"))?;
                for (cell, r) in t.row_mut(i).iter_mut().zip(self.target_rows(city)) {
                    *cell = r;
                }
            }
        }
        Ok(Batch {
            dense,
            categorical: examples.iter().map(|e| e.categorical).collect(),
            targets,
        })
    }
}
