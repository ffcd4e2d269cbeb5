//! Core of the polymath orchestration engine.
//!
//! A task is decomposed into a [`graph::TaskFlowGraph`], the graph is
//! reshaped by a multilevel coarsen/relax cycle driven by retrieved
//! effective scores ([`score_db`], [`graph_opt`]), every subtask runs as a
//! small declarative [`workflow`], and workflows that score below the
//! trigger threshold are improved by a reflection-guided evolutionary
//! search ([`evolution`]). All model traffic goes through the
//! [`llm::ChatBackend`] trait so the whole engine can run against a
//! deterministic scripted backend.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the HTTP client
//! and the CLI live in the `polymath` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod evolution;
pub mod graph;
pub mod graph_opt;
pub mod llm;
pub mod orchestrator;
pub mod score_db;
pub mod workflow;

mod hash;

pub use hash::fnv1a64;

pub(crate) mod prelude {
    pub use alloc::borrow::ToOwned;
    pub use alloc::boxed::Box;
    pub use alloc::collections::{BTreeMap, BTreeSet};
    pub use alloc::format;
    pub use alloc::string::{String, ToString};
    pub use alloc::vec;
    pub use alloc::vec::Vec;
}
