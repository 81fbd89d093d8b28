//! Two-phase training, evaluation, cross-validation and ablations.

pub mod config;
pub mod cv;
pub mod gradsuite;
pub mod train;

pub use config::{parse_kv, ConfigFile, RunConfig};
pub use cv::{
    ablate, cross_validate, mode_comparison, pretrain_on_pool, train_and_evaluate, write_ablation_csv, AblationRow,
    CvResult, SplitReports, INDEPENDENT, INTERNAL,
};
pub use gradsuite::{gradient_suite, GradCheckEntry, GRAD_TOLERANCE};
pub use train::{
    build_model, evaluate, index_records, load_model, lookup, pretrain_cggm, stem_features, train, write_curve_csv,
    write_predictions_csv, BatchSampler, Evaluation, PretrainResult, TrainOutcome,
};
