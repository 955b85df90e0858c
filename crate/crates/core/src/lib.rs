//! Graph-variable neural layers and empirical checks of their sufficiency.
//!
//! A layer maps an input row `x` to `σ([A(x, α_1), …, A(x, α_m)] + β)`, where
//! the `α_j` are anchor points and `A` is a pairwise function. The crate
//! provides:
//!
//! - [`graph_layer`]: layers, pairwise functions, activations and networks;
//! - [`anchors`]: i.i.d. anchor sampling, covering radius and SGD training
//!   with traces;
//! - [`regions`]: region-separated synthetic distributions with ground-truth
//!   conditionals, and the ε-grid partitioner;
//! - [`separators`]: explicit discrete, linear, ReLU and sparse-patch
//!   constructions that separate regions with finitely many anchors;
//! - [`sufficiency`]: collision and separation reports, k-NN conditional
//!   estimates and the sufficiency gap;
//! - [`io`] and [`experiment`]: artifact persistence and the config-driven
//!   experiment runner behind the `graphvar` CLI.

pub mod anchors;
pub mod error;
pub mod experiment;
pub mod graph_layer;
pub mod io;
mod linalg;
pub mod regions;
pub mod separators;
pub mod sufficiency;

pub use error::{Error, Result};
pub use graph_layer::{augment_with_norm, Activation, GraphLayer, Network, PairwiseFunction};
pub use regions::{LabeledDataset, RegionSpec};
