//! Neural decoder: token layout and the SoftMoE transformer.

mod layout;
mod net;

pub use layout::{SyndromeGrid, TokenLayout, MASK_OFF};
pub use net::{
    init_params, slot_orthogonality, ForwardTrace, LossValues, LossVars, SmoeConfig, SmoeModel,
};
