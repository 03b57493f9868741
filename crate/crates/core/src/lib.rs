//! Next-destination prediction for multi-city trips.
//!
//! Cities become nodes of a transition graph and are embedded with iterated
//! neighbor averaging ([`cleora`]). Each embedding space is cut into regions
//! by data-dependent hyperplanes ([`codes`]), so every city turns into a
//! one-hot-per-row [`Sketch`]. A trip prefix is summarized by decayed sums of
//! its cities' sketches, a residual feed-forward network ([`model`]) maps it
//! to a sketch of the next city, and candidate cities are scored by the
//! geometric mean of the output cells they occupy ([`eval`]).

pub mod artifact;
pub mod cleora;
pub mod codes;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod pipeline;
pub mod sketch;

pub use cleora::{embed_cities, CleoraOptions, EmbeddingTable};
pub use codes::{
    build_codes, build_random_codes, item_sketch, CodesMatrix, Modality, Partitioning,
};
pub use error::{Error, Result};
pub use graph::{DegreeStats, TransitionGraph};
pub use sketch::{aggregate, concat, normalize_widthwise, score_items, Segment, Sketch};

/// Raw city identifier as it appears in trip data.
pub type CityId = u64;
