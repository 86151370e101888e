//! Cross-validated training, evaluation, checkpoints and the ablation sweep.

pub mod checkpoint;
pub mod config;
pub mod folds;
pub mod model;
pub mod report;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{ClassifierPreset, Mode, ModeWiring, Precision, RunConfig};
pub use folds::{make_folds, FoldSplit};
pub use model::Model;
pub use report::{render_run_dir, render_table, table_row, AblationTable, Cell, TableRow};
pub use train::{ablate, evaluate, train, train_fold, FoldReport, FoldRun, RunReport, StepRecord};
