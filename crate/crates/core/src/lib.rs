//! Distributed subgradient optimization over a synchronous network whose
//! links carry only a fixed number of bits per coordinate.
//!
//! Nodes exchange uniformly quantized iterates over intervals that shrink
//! with the step size, and compensate their own quantization error in the
//! update so that the network average follows a centralized projected
//! subgradient step. The crate is split into:
//!
//! - [`topology`]: random geometric graphs, lazy Metropolis weights, and the
//!   second singular value of the mixing matrix.
//! - [`quantizer`]: uniform grids, bit-exact codewords, adaptive intervals,
//!   and the message wire format.
//! - [`problems`]: regression losses, subgradient oracles, box projection,
//!   and a centralized reference solver.
//! - [`engine`]: the round loop for the quantized and unquantized methods,
//!   together with a runtime invariant monitor.
//! - [`harness`]: experiment configuration, metric files, and bit sweeps.

pub mod engine;
pub mod error;
pub mod harness;
pub mod problems;
pub mod quantizer;
pub mod rng;
pub mod topology;

mod linalg;

pub use error::{Error, Result};
