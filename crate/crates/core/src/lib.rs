//! Simulation and optimization library for gossip-based decentralized
//! learning on label-skewed data.
//!
//! Agents hold private shards, train a small MLP locally and average
//! parameters with their graph neighbors through a doubly-stochastic mixing
//! matrix. On top of the DSGDm and quasi-global momentum baselines the crate
//! implements the cross-feature contrastive loss: every agent evaluates its
//! neighbors' models on its own mini-batch (model-variant cross-features) and
//! receives class-wise feature sums computed by its neighbors with its own
//! model (data-variant cross-features), then pulls its local features toward
//! both.
//!
//! Module map:
//!
//! - [`graph`]: topologies, mixing matrices, spectral gap.
//! - [`partition`]: synthetic blobs, CSV datasets, Dirichlet label skew.
//! - [`model`]: MLP with a separately exposed feature extractor and exact
//!   reverse-mode gradients.
//! - [`ccl`]: cross-feature summaries and the two contrastive losses.
//! - [`optim`]: DSGDm, quasi-global momentum, step-decay schedule.
//! - [`sim`]: round-synchronous multi-agent engine with byte and MAC
//!   accounting.
//! - [`config`]: experiment configuration, overrides and grid expansion.

pub mod ccl;
pub mod config;
mod error;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod partition;
pub mod rng;
pub mod sim;

pub use ccl::{CrossFeatureSummary, NeighborhoodRepresentation, SimilarityKind};
pub use config::{ExperimentConfig, GridSpec, Method};
pub use error::{Error, Result};
pub use graph::{MixingMatrix, Topology, TopologyKind};
pub use linalg::Matrix;
pub use model::{Activation, FeatureBatch, ForwardTape, Mlp, ModelSpec, ParamVector};
pub use optim::{LrSchedule, OptState, OptimizerConfig};
pub use partition::{Dataset, PartitionSpec};
pub use sim::{MetricsLog, RoundMetrics, RunSummary, WireMessage};
