//! Dense tensors, a reverse-mode tape, Adam, a finite-difference oracle and
//! the checkpoint format. Every trainable network builds on this module.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use layers::{glorot, Conv1dLayer, Dense, LayerNormParams};
pub use optim::{Adam, AdamConfig};
pub use tape::{scaled_dot_attention, sigmoid, softmax_tensor, Gradients, ParamId, ParamStore, Tape, Var};
pub use tensor::{cosine, dot, l2_norm, normalize_in_place, Tensor};
