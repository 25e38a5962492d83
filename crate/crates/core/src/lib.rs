//! Multi-modal prompt tuning for open-world compositional zero-shot
//! learning: a three-branch prompt-tuned transformer (vision, attribute,
//! object), a deterministic synthetic compositional dataset, the open-world
//! evaluation protocol (calibration-bias sweep, seen/unseen/harmonic-mean
//! accuracies, area under the unseen-vs-seen curve), and the experiment
//! orchestration the CLI exposes.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod prompt;
pub mod render;
pub mod scalar;
pub mod space;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, CheckpointManifest};
pub use config::{config_hash, MmptConfig, PromptCoverage, Variant};
pub use dataset::{Dataset, ImageSample, SplitDatasets, SplitTag};
pub use error::{MmptError, Result};
pub use experiment::{
    build_data, evaluate_model, init_threads, run_ablation, run_dataset_gen, run_eval, run_sweep,
    run_train, DataConfig, EvalSettings, EvalSource, ExperimentConfig, RunSummary, SweepAxis,
    TrainSettings,
};
pub use graph::{Graph, Var};
pub use metrics::{
    bias_sweep, predict_open_world, summarize, table_samples, BiasPoint, CompositionScores,
    MetricsCurve, MetricsSummary, ScoredSample,
};
pub use model::{ForwardMode, MmptModel, ScoreTable};
pub use params::ParamStore;
pub use render::RenderSpec;
pub use scalar::{Dtype, Scalar};
pub use space::{Composition, CompositionSpace, EvalSplit, OutputRegime};
pub use tensor::Tensor;
pub use train::{AdamHyper, PartitionPreset, TrainHistory, TrainState};
