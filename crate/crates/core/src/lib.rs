pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod loss;
pub mod mask;
pub mod network;
pub mod ops;
pub mod params;
pub mod rng;
pub mod sagem;
pub mod salrm;
pub mod superpixel;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mask::{IndexMatrix, SparseMask};
pub use params::{Adam, ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{LocalAttentionVar, Tape, Var};
pub use tensor::Tensor;
