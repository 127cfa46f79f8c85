//! Evaluation, diagnostics, gradient checking and experiment orchestration.

mod eval;
mod experiment;
mod gradcheck;
mod report;

pub use eval::{domain_probe, evaluate, fsum, summarize, two_decimals, Accuracy, ClassPredictor, EvalReport};
pub use experiment::{
    method_label, reevaluate, run_experiment, run_single, write_artifacts, DataSpec, ExperimentConfig,
    RunArtifact, TOOL_VERSION,
};
pub use gradcheck::{
    central_difference, gradcheck, EntryError, Fault, GradcheckOptions, GradcheckReport, Suite, SuiteReport,
    GRADCHECK_THRESHOLD,
};
pub use report::{build_report, write_csv, MethodSummary, Report, ReportRow};
