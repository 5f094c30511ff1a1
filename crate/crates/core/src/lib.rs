//! Per-output-channel dilation search over enlarged-kernel convolution
//! weights, and execution of the resulting inception convolutions.
//!
//! The pipeline runs in four steps:
//!
//! 1. [`container::generate`] or [`container::ModelContainer::read`] provides
//!    a supernet whose kernels have side `2·k·d_max + 1`.
//! 2. [`search::edo_model`] scores every dilation pattern of every filter and
//!    keeps the one whose discarded weights respond least to a constant input.
//! 3. [`rearrange::apply`] groups channels by pattern, gathers compact
//!    `(2k+1)²` kernels and pushes the channel permutation downstream.
//! 4. [`exec::run_inception`] runs one dilated convolution per group;
//!    [`verify::verify`] checks it against the zero-embedded supernet.
//!
//! [`oracle`] holds the brute-force `f64` references used by the tests and
//! by `verify --exact`.

pub mod cli;
pub mod container;
pub mod error;
pub mod exec;
pub mod oracle;
pub mod prng;
pub mod rearrange;
pub mod search;
pub mod tensor;
pub mod verify;

pub use container::{generate, LayerDecl, ModelContainer, ModelKind, ModelSpec};
pub use error::{Error, Result};
pub use exec::{cost_model, reference_full, run_inception, CostReport};
pub use prng::{Distribution, Prng};
pub use rearrange::{apply, build_permutation, extract_compact, propagate, ChannelPermutation, GroupedPlan};
pub use search::{edo_layer, edo_model, select_pattern, Assignment, DilationPattern, LayerSpec};
pub use tensor::{conv2d, ConvGeometry, Tensor4};
