//! Online adaptation algorithms: no adaptation, Tent (optionally with
//! gradient clipping), SAR, SAR² and standalone redundancy minimization.

mod adapter;
mod primitives;

pub use adapter::{needs_batch_of_two, Adapter, Algorithm, PassCounters, TtaConfig};
pub use primitives::{
    assemble_centroid_matrix, batch_centroids, clip_grads, filter_reliable, sam_perturbation, BatchRecord,
    CentroidPlan, CentroidSource, Clip, FeatureBank, FilterConfig, RecoveryMonitor, SamConfig, FLAT_GRAD_NORM,
};
