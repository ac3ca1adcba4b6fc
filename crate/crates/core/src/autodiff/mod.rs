//! Reverse-mode automatic differentiation over small dense tensors, plus the
//! optimizers used to train every model in the crate.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, Parameterized};
pub use optim::{clip_grad_norm, Adadelta, AdadeltaSlot, Sgd};
pub use tape::{Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};

pub(crate) use tape::log_softmax_in_place;
