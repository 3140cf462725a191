//! Brute-force reference implementations of the superpixel-token modules.
//!
//! Nothing here calls into the production kernels: every result is rebuilt
//! from parameters looked up by name, with dense loops, `-inf` masking and
//! full sorts. Costs are quadratic or worse, so instances stay at desk scale
//! (at most 256 pixels per map).

pub mod attention;
pub mod forward;
pub mod loss;
pub mod mat;
pub mod modules;
pub mod superpixel;
pub mod suites;

pub use attention::dense_masked_attention;
pub use forward::straightline_forward;
pub use suites::{run_case, run_suite, OracleReport, Suite};
