//! Evaluation of distilled students: reconstruction fidelity, sliced
//! Wasserstein distance to teacher samples, class accuracy, teacher-call
//! accounting and sampling throughput.

mod metrics;
mod report;

pub use metrics::{
    class_accuracy, class_accuracy_with, generate_batched, l1_fidelity, projections,
    sliced_wasserstein, wasserstein_1d, DEFAULT_PROJECTIONS, EVAL_BATCH,
};
pub use report::{
    consistency_distillation_nfe, encode_grid, nfe_report, offline_nfe,
    progressive_distillation_nfe, throughput, throughput_with, write_grid, EvalReport, NfeTable,
    Throughput,
};
