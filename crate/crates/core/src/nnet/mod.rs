//! Network construction, parameter counting, checkpoints and training.

mod arch;
mod checkpoint;
mod network;
mod train;

pub use arch::{
    build_baseline_cnn, build_network, count_parameters, ArchConfig, ArchRegistry, Architecture,
    DenseNet, HeadKind, HeadPooling, HeadRole, LayerSpec, MapShape, NetworkSpec, PlainCnn,
    REFERENCE_BASELINE_PARAMETERS, REFERENCE_FRACTURE_PARAMETERS,
};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, BlobEntry, BlobKind, Checkpoint, CheckpointHeader,
    TrainingMetadata, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
pub use network::{batch_tensor, ConcatMode, HeadNodes, HeadOutputs, Network, BN_EPS};
pub use train::{
    combined_loss, evaluate, head_loss, train, EpochRecord, Sample, SampleTransform, Target,
    TrainOptions, TrainReport, TrainingConfig,
};
