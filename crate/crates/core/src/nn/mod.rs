//! Numeric core: layer stacks with manual backpropagation, loss, and SGD.

pub mod gradcheck;
pub mod layer;
pub mod loss;
pub mod optim;
pub mod stack;

pub use gradcheck::{central_diff, finite_diff_grad, finite_diff_input_grad};
pub use layer::{infer_shapes, init_params, output_shape, stack_param_count, LayerSpec};
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use optim::{clip_by_global_norm, sgd_step, LrSchedule};
pub use stack::{backward, forward, predict, ForwardTrace};
