//! Synthetic domains, episodic sampling, the assembled model, test-time
//! finetuning, and the train/test drivers.

pub mod data;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod train;
pub mod tsf;

pub use data::{
    gen_domain, load_dataset, save_dataset, DataSpec, Dataset, DomainPlan, Sample, ShapeFamily, Style, SyntheticDomain,
};
pub use eval::{
    domain_stats, inspect_transform, meta_test, transform_csv, DomainStats, Report, TestConfig, TransformRow,
};
pub use model::{Combine, Losses, Model, ModelConfig, Prediction, Shot};
pub use sampler::{sample_episode, Episode, EpisodeSpec};
pub use train::{meta_train, FeatureBank, LogRow, TrainConfig, TrainState};
pub use tsf::{tsf_finetune, TsfConfig, TsfGroup, TsfOutcome};
