//! Minimal dense network toolkit with explicit backward passes.

pub mod adam;
pub mod attention;
pub mod layers;
pub mod ops;
pub mod param;

pub use adam::{Adam, AdamConfig};
pub use attention::{BlockCache, EncoderBlock};
pub use layers::{Init, LayerNorm, LayerNormCache, Linear};
pub use param::{Grads, Param, ParamId, ParamScope, ParamStore};
