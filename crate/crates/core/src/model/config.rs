use serde::{Deserialize, Serialize};

use crate::dataset::{NUM_CATEGORICAL, NUM_NUMERICAL};
use crate::sketch::{layout_len, Segment};

/// Architecture and input layout of a [`Network`](super::Network).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Layout of one city sketch (one segment per modality). The input holds
    /// three such sketches; the output holds one.
    pub segments: Vec<Segment>,
    pub hidden: usize,
    pub blocks: usize,
    /// Feed numerical and categorical features.
    pub use_features: bool,
    /// Feed the is-final flag.
    pub use_flag: bool,
    /// Embedding width per categorical feature.
    pub categorical_dims: Vec<usize>,
    /// Vocabulary size per categorical feature, including the OOV slot.
    pub categorical_sizes: Vec<usize>,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Multiplier on the output projection's init bound; small values start
    /// training from near-uniform row distributions.
    pub output_init_scale: f64,
    /// Recency decay of the all-cities history sketch.
    pub decay: f64,
    pub seed: u64,
}

/// Embedding widths: 120 for previous hotel country and affiliate, 20 otherwise.
pub fn default_categorical_dims() -> Vec<usize> {
    vec![20, 20, 120, 120, 20, 20, 20, 20]
}

impl ModelConfig {
    pub fn new(segments: Vec<Segment>, hidden: usize, categorical_sizes: Vec<usize>) -> Self {
        ModelConfig {
            segments,
            hidden,
            blocks: 3,
            use_features: true,
            use_flag: true,
            categorical_dims: default_categorical_dims(),
            categorical_sizes,
            leaky_slope: 0.01,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            output_init_scale: 0.01,
            decay: 0.9,
            seed: 0,
        }
    }

    pub fn sketch_len(&self) -> usize {
        layout_len(&self.segments)
    }

    /// Rows per sketch across all modalities.
    pub fn rows(&self) -> usize {
        self.segments.iter().map(|s| s.depth).sum()
    }

    pub fn dense_len(&self) -> usize {
        3 * self.sketch_len()
            + if self.use_features { NUM_NUMERICAL } else { 0 }
            + usize::from(self.use_flag)
    }

    pub fn categorical_len(&self) -> usize {
        if self.use_features {
            self.categorical_dims.iter().sum()
        } else {
            0
        }
    }

    pub fn input_len(&self) -> usize {
        self.dense_len() + self.categorical_len()
    }

    pub fn output_len(&self) -> usize {
        self.sketch_len()
    }

    /// Trainable scalars, embedding tables included.
    pub fn parameter_count(&self) -> usize {
        let h = self.hidden;
        let tables: usize = if self.use_features {
            self.categorical_sizes
                .iter()
                .zip(&self.categorical_dims)
                .map(|(n, d)| n * d)
                .sum()
        } else {
            0
        };
        (self.input_len() + 1) * h
            + self.blocks * (h * h + 3 * h)
            + (h + 1) * self.output_len()
            + tables
    }

    /// Hidden width giving this layout about `target` parameters.
    pub fn hidden_for_parameters(&self, target: usize) -> usize {
        let fixed = self.parameter_count() - self.hidden_terms(self.hidden);
        let budget = target.saturating_sub(fixed) as f64;
        let a = self.blocks as f64;
        let b = (self.input_len() + 1 + 3 * self.blocks + self.output_len()) as f64;
        let h = if a == 0.0 {
            budget / b
        } else {
            (-b + (b * b + 4.0 * a * budget).sqrt()) / (2.0 * a)
        };
        (h.round() as usize).max(1)
    }

    fn hidden_terms(&self, h: usize) -> usize {
        (self.input_len() + 1) * h + self.blocks * (h * h + 3 * h) + h * self.output_len()
    }

    pub(crate) fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        if self.segments.is_empty() || self.segments.iter().any(|s| s.is_empty()) {
            return Err(Error::invalid("segments", "empty sketch layout"));
        }
        if self.hidden == 0 {
            return Err(Error::invalid("hidden", "must be positive"));
        }
        if self.categorical_dims.len() != NUM_CATEGORICAL
            || self.categorical_sizes.len() != NUM_CATEGORICAL
        {
            return Err(Error::invalid(
                "categorical",
                "one entry per categorical feature",
            ));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid(
                "decay",
                format!("{} not in (0, 1]", self.decay),
            ));
        }
        Ok(())
    }
}
