//! Cross-validated training, ROC-AUC evaluation on full / adversarial /
//! manipulated test sets, Histogram of Correlations and summary tables.

mod auc;
mod hoc;
mod kfold;
mod summary;
mod train;

pub use auc::roc_auc;
pub use hoc::{histogram_of_correlations, hoc_to_csv, HocData, HocInput};
pub use kfold::kfold_split;
pub use summary::{summarize, SummaryRow, SummaryTable};
pub use train::{
    records_to_csv, train_run, train_run_with_snapshots, EvalReport, FoldRecord, FoldResult, Snapshot, TestAucs,
    TestSet, TrainConfig, TrainingCondition,
};
