//! Nearest-neighbour clustering of small parcels across a horizontally
//! decomposed box.
//!
//! Every parcel whose volume falls below a fortieth of a grid cell links to
//! its closest neighbour among the cells around its nearest grid node. The
//! resulting graph is resolved into star-shaped groups with one-sided flag
//! windows and collective synchronisation on an in-process runtime, and the
//! groups are merged. [`oracle::oracle_cluster`] computes the same groups in
//! a single process.

pub mod domain;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod harness;
pub mod message;
pub mod nng;
pub mod oracle;
pub mod parcels;
pub mod resolve;
pub mod runtime;

pub use domain::{Cell, Decomposition, Domain, Node, Vec3};
pub use engine::{Cluster, EngineOptions, StepReport};
pub use error::{Error, Result};
pub use graph::{DirectedGraphView, MergeGroup, Partition};
pub use nng::CandidateArrays;
pub use oracle::oracle_cluster;
pub use parcels::{Parcel, ParcelStore};
pub use resolve::{DualTieBreak, EdgeFate, FlagWindows, ResolveCounters};
pub use runtime::{Runtime, Schedule, WorkerGroup};
