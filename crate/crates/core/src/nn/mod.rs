//! Layers with explicit forward and backward passes.

mod checkpoint;
mod conv;
mod layers;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use conv::{conv2d_backward, conv2d_forward, maxpool2x2_backward, maxpool2x2_forward, pooled_len};
pub use layers::{
    batch_norm_backward, batch_norm_backward_tensor, batch_norm_forward, batch_norm_forward_tensor,
    check_one_hot, fully_connected_backward, fully_connected_forward, graph_conv_backward,
    graph_conv_forward, one_hot, relu_backward, relu_forward, softmax, softmax_cross_entropy,
    softmax_cross_entropy_backward, TapeEntry,
};
pub use params::{LayerGrads, LayerKind, LayerParams, Mode, BN_EPS, DEFAULT_BN_MOMENTUM};
