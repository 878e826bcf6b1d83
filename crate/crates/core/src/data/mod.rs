//! Dataset ingestion, splitting, standardization, empirical marginals and batching.

pub mod batch;
pub mod image;
pub mod marginal;
pub mod scale;
pub mod split;
pub mod synthetic;
pub mod tabular;

pub use batch::{batch_iter, eval_batches, stratified_batches};
pub use image::ImageDataset;
pub use marginal::{empirical_marginals, EmpiricalMarginal};
pub use scale::{standardize, Scaler};
pub use split::{split_dataset, SplitIndices, SplitSpec};
pub use synthetic::{SyntheticKind, SyntheticSpec};
pub use tabular::{load_csv, FeatureKind, RawTable, Schema, TabularDataset};
