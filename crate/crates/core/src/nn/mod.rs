//! Small classifiers with pluggable normalization, the test-time parameter
//! partition, momentum SGD and checkpoint I/O.

mod checkpoint;
mod model;
mod norm;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{argmax, ForwardPass, Head, Model, ModelConfig, Param, ParamId};
pub use norm::{standardize_columns, standardize_rows, NormKind, RunningStats, StatsMode, NORM_EPS};
pub use optim::{adaptable_params, sgd_step, ParamPartition, SgdState};
