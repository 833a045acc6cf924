//! Graph neural network machinery for the learned schedulers.

mod graph;
mod model;
mod partition;
mod train;

pub use graph::{build_state_graph, normalize_adjacency, DenseMatrix, NodeKind, StateGraph, FEATURE_DIM};
pub use model::{
    Checkpoint, CheckpointDims, CheckpointTensor, GatedModel, GcnLayer, GcnModel, GnnModel, Readout,
    CHECKPOINT_SCHEMA_VERSION,
};
pub use partition::{partition_graph, ClusterPartition};
pub use train::{gated_forward, gcn_forward, gradient_check, score_placements, train, TrainConfig, TrainSample};
