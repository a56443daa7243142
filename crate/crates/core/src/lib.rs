//! Energy disaggregation with deep temporal dictionary learning: an LSTM
//! autoencoder maps per-device energy snippets into a feature space where a
//! block-structured dictionary with smoothly varying sparse codes explains
//! them, so an aggregate window can be split by coding its encoding.

pub mod baselines;
pub mod dictionary;
pub mod disaggregate;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod lstm;
pub mod metrics;
pub mod model_io;
pub mod rng;
pub mod signal;
pub mod sparse;
pub mod trainer;

pub use disaggregate::{disaggregate_dataset, disaggregate_signal, DisaggregationOptions, DisaggregationReport};
pub use dictionary::Dictionary;
pub use error::{Error, Result};
pub use experiment::EvalConfig;
pub use metrics::MetricSet;
pub use signal::{synth_household, SyntheticSpec, WindowedDataset};
pub use trainer::{train, DtdlModel, HyperParams};
