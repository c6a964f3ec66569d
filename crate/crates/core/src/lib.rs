//! Training engine for real-quantized (int8) convolutional networks under a
//! memory budget.
//!
//! The crate is organized around a static graph IR:
//!
//! - [`qtensor`]: quantized/float tensor types and bit-exact int8 kernels.
//! - [`graph`]: forward-graph construction and compile-time differentiation
//!   into a single static forward+backward graph.
//! - [`sparse`]: sparse-update schemes, backward-graph pruning, dead-code
//!   elimination and sub-operator slicing.
//! - [`memplan`]: tensor lifetime analysis, operator reordering with in-place
//!   gradient update, a simulated first-fit allocator and the analytic
//!   extra-memory model.
//! - [`exec`]: the graph interpreter shared by training and evaluation.
//! - [`train`]: quantization-aware gradient scaling, momentum-free SGD with
//!   int8 weight casting, gradient accumulation, metrics and checkpoints.
//! - [`search`]: contribution analysis and evolutionary / random search for
//!   update schemes under a byte constraint.
//! - [`data`]: in-memory datasets, synthetic task generators and shard I/O.

pub mod data;
pub mod error;
pub mod exec;
pub mod graph;
pub mod memplan;
pub mod qtensor;
pub mod search;
pub mod sparse;
pub mod testsupport;
pub mod train;

pub use error::{Error, Result};
