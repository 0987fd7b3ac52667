//! Next-action forecasting from short video clips, helped by a learned
//! task grammar.
//!
//! A local stream (stacked LSTM) predicts the next distinct action from a
//! clip of per-frame features, while parallel progress streams classify
//! where in the whole task the clip sits at several granularities. The
//! projected features of every stream are fused into the final forecast.

pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod grammar;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use data::{Dataset, LabeledSequence, SyntheticConfig};
pub use error::{Error, Result};
pub use experiment::{AblationTable, ExperimentConfig};
pub use grammar::TaskGrammar;
pub use losses::{ProgressBin, ProgressLossKind};
pub use metrics::MetricsReport;
pub use model::{CombinedModelParams, ForecastSample, ModelConfig, Prediction};
pub use sampling::SamplerConfig;
pub use tensor::Matrix;
pub use train::{TrainConfig, TrainOutcome};
