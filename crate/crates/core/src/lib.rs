//! Planner and simulator for fusion-ready CNN execution on a small-buffer
//! systolic accelerator.
//!
//! The pipeline is: lightweight block conversion ([`convert`]), fusion-group
//! partitioning ([`fusion`]), buffer-constrained channel pruning ([`prune`]),
//! non-overlapped tile scheduling ([`tiling`]), functional and cycle-level
//! simulation of the PE array ([`sim`]) and external-memory accounting
//! ([`traffic`]). [`cli`] ties the stages together.

pub mod cli;
pub mod convert;
pub mod error;
pub mod fusion;
pub mod netir;
pub mod prune;
pub mod sim;
pub mod tiling;
pub mod traffic;

pub use error::{Error, Result};
pub use netir::{LayerKind, LayerNode, NetGraph, TensorShape};
