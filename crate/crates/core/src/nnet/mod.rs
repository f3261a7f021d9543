//! Miniature convolutional classifier.
//!
//! A stack of 3x3 conv / ReLU / 2x2 max-pool blocks feeds two dense ReLU
//! layers (512 and 128 units, dropout in training) and a single sigmoid
//! output, trained with mean binary cross-entropy and Adam. Checkpoints keep
//! the epoch with the lowest validation loss; [`transfer_conv_weights`]
//! carries only the convolutional tensors into a new model.

mod adam;
mod checkpoint;
mod model;
mod params;
mod spec;
mod tensor;
mod train;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{transfer_conv_weights, Checkpoint, Provenance};
pub use model::{backward, backward_from_trace, bce_loss, conv_features, forward, forward_trace, sigmoid, Mode, Trace};
pub use params::{init_params, layout, ParamTensor, Parameters, Section};
pub use spec::{ModelSpec, DENSE_UNITS};
pub use tensor::{Scalar, Tensor};
pub use train::{
    evaluate_dataset, predict, predict_dataset, select_best_epoch, train, EpochRecord, Selection, TileDataset,
    TrainConfig, TrainOutcome,
};
