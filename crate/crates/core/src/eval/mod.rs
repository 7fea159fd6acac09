//! Metrics and experiment protocols.

mod experiment;
mod metrics;

pub use experiment::{
    confidence_curves, run_ablation, run_cv_experiment, sequence_identification_eval,
    write_ablation_csv, write_confidence_csv, write_json, write_roc_csv, AblationCell,
    AblationRow, AblationTable, ConfidencePoint, CvOptions, CvRun, EvalReport, FoldReport,
    FoldRun, SequenceEval, Summary,
};
pub use metrics::{
    f1_accuracy, hit_frequency, mean_std, roc_auc, roc_points, select_threshold, RocPoint,
};
