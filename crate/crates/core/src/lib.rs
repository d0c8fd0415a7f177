//! Hybrid deep ensembles for binary image classification.
//!
//! Base learners are small convolutional networks trained in two phases
//! (frozen backbone, then fine-tuning). Their probabilities are fused by a
//! simplex-constrained weighted average and by a logistic-regression
//! meta-learner trained on out-of-fold predictions; Grad-CAM explains the
//! base learners' decisions.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`). The aliases at
//! the crate root fix the scalar to `f64`, which is what training and the
//! gradient checks use.

// Negated comparisons are how NaN gets rejected alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod config;
pub mod data;
pub mod error;
pub mod gradcam;
pub mod image;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod stacking;
pub mod weighted_avg;

pub use config::{Aggregation, CombineRule, RunConfig};
pub use data::{assign_folds, split_dataset, DatasetSplit, FoldAssignment, Grouped, Label, SampleKey};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Image = image::Image<f64>;
pub type Tensor = nn::Tensor<f64>;
pub type MicroNet = nn::MicroNet<f64>;
pub type LabeledSample = data::LabeledSample<f64>;
pub type PredictionMatrix = weighted_avg::PredictionMatrix<f64>;
pub type PredictionTable = ingest::PredictionTable<f64>;
pub type WeightVector = weighted_avg::WeightVector<f64>;
pub type WeightFit = weighted_avg::WeightFit<f64>;
pub type MetaLearner = stacking::MetaLearner<f64>;
pub type OofTable = stacking::OofTable<f64>;
pub type RocCurve = metrics::RocCurve<f64>;
pub type Rates = metrics::Rates<f64>;
pub type CamHeatmap = gradcam::CamHeatmap<f64>;

pub type ImageF32 = image::Image<f32>;
pub type MicroNetF32 = nn::MicroNet<f32>;
pub type PredictionMatrixF32 = weighted_avg::PredictionMatrix<f32>;
pub type WeightVectorF32 = weighted_avg::WeightVector<f32>;
pub type MetaLearnerF32 = stacking::MetaLearner<f32>;
