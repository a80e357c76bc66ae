pub mod checkpoint;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod train;

pub use checkpoint::ModelCheckpoint;
pub use fusion::{CrossConnection, FusionKind};
pub use model::{
    accuracy, mean_iou, ArchitectureDescriptor, ChannelScales, Head, LayerActivations, Model,
    Output, StreamKind, Targets,
};
pub use train::{train, DropoutKind, TrainConfig, TrainRun};
