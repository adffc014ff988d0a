//! The tiny encoder-decoder: parameters, exact backprop, greedy decoding
//! and training.

mod decode;
mod layers;
mod network;
mod params;
mod train;

pub use decode::{
    greedy_decode, input_gradients, input_gradients_many, span_logit_sum, ForwardTrace, NoiseSample, DEFAULT_MAX_DECODE_LEN,
};
pub use layers::{Attention, FeedForward, RmsNorm};
pub use params::{DecoderLayer, EncoderLayer, ModelConfig, ModelParams};
pub use train::{
    dev_accuracy, examples_for, loss_gradient, train, EpochRecord, Example, TrainConfig, TrainReport, TrainedModel,
};
