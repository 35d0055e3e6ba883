//! A small segmentation model with a frozen random encoder and a trainable
//! per-pixel linear decoder, plus the class-incremental training procedure.

mod checkpoint;
mod loss;
mod model;
mod optim;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};
pub use loss::{
    batch_loss, batch_loss_and_grad, class_weights, distill_loss, total_loss, weighted_ce, BatchItem,
    LossParts, PROB_FLOOR,
};
pub use model::{extend_model, Decoder, Encoder, FeatureMap, ToySegmenter};
pub use optim::{poly_lr, Adam};
pub use train::{train, EpochLoss, TrainConfig, TrainOutcome, TrainSample};
