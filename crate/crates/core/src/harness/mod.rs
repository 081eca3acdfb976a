//! Experiment driver: configuration, training, evaluation, checkpoints,
//! metrics and plots.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod plot;
pub mod train;

pub use analysis::{
    disentanglement_stats, load_agent_as, load_observation, saliency_for_observation, store_observation, DisentanglementStats,
};
pub use checkpoint::Checkpoint;
pub use config::{apply_preset, load_config, resolve, EvalPairs, RunConfig, PRESETS};
pub use eval::{evaluate, evaluate_all_conditions, Condition};
pub use metrics::{header as metrics_header, EvalRecord, EvalScore, MetricsRow, MetricsTable, LOSS_COLUMNS};
pub use plot::{aggregate, plot_export, Aggregate, AggregatePoint};
pub use train::{build_agent, load_agent, train_run, RunOutcome, Trainer, ACTION_DIM};
