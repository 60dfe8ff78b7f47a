//! Dense reverse-mode autodiff with the layers and optimizer the agent
//! models and actor-critic need.

mod layers;
mod optim;
mod params;
mod tape;
mod tensor;

pub use layers::{linear_forward, lstm_step, Activation, Linear, LstmCell, Mlp};
pub use optim::{adam_update, clip_global_norm, global_grad_norm, AdamConfig};
pub use params::{ParamEntry, ParamId, ParameterStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;

/// Softmax of a single row of logits, computed with max subtraction.
pub fn softmax_row(logits: &[f64]) -> crate::Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(crate::Error::Usage("softmax over zero classes".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(crate::Error::Numeric("softmax: non-finite logits".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}
