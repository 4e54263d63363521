//! Neural building blocks on top of the autograd tape, plus Adam.

mod adam;
mod layers;
mod params;

pub use adam::{Adam, AdamConfig};
pub use layers::{AffineMap, EmbeddingTable, LstmCell, Mlp};
pub use params::{glorot, Grads, Graph, Param, ParamId, ParamStore};
