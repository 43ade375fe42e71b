//! The wide residual encoder-decoder, its losses and hand-written backward
//! pass.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use gradcheck::{check_gradients, GradCheckReport, GroupCheck};
pub use loss::{loss_bce, loss_cce};
pub use model::{
    forward, forward_with_stats, gradients, init_model, update_running_stats, BatchStat, Gradients, Head, Mode,
    ModelConfig, ModelParams, ParamKind, ParamTensor, PixelPrediction,
    relu_pattern,
};
pub use tensor::{Real, Tensor};
