//! Per-user layered system environments.
//!
//! Every user of a shared machine gets a private writable layer on top of the
//! host root. The crate is split into a pure core, usable and testable
//! without privileges, and the parts that touch the host:
//!
//! * [`overlay`]: two-layer resolution, copy-up, whiteouts, merged listings,
//!   the flatten oracle and merge-down.
//! * [`plan`]: the ordered list of steps that builds a user container.
//! * [`caps`]: the fixed capability policy applied inside containers.
//! * [`exec`]: runs a plan, either with kernel namespaces and mounts or
//!   simulated on plain directories.
//! * [`state`]: the on-disk registry of containers and the commit lock.
//! * [`commit`]: transactional merge of an upper directory into its lower.
//! * [`lifecycle`]: creating, entering and destroying registered containers.
//! * [`disk`]: small filesystem helpers shared by the above.
//! * [`cluster`]: attaching shared upper layers on login and compute nodes.
//! * [`bench`]: startup and file-operation measurements.
//!
//! The guide under `book/` walks through these pieces; its code samples are
//! compiled and run as doc-tests of this crate.

pub mod bench;
pub mod caps;
pub mod cluster;
pub mod commit;
pub mod disk;
pub mod exec;
pub mod lifecycle;
pub mod overlay;
pub mod path;
pub mod plan;
pub mod state;

pub use path::NormPath;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/layers.md")]
    pub mod layers {}
    #[doc = include_str!("../../../book/src/merge.md")]
    pub mod merge {}
    #[doc = include_str!("../../../book/src/plans.md")]
    pub mod plans {}
    #[doc = include_str!("../../../book/src/capabilities.md")]
    pub mod capabilities {}
    #[doc = include_str!("../../../book/src/sandbox.md")]
    pub mod sandbox {}
    #[doc = include_str!("../../../book/src/cluster.md")]
    pub mod cluster {}
    #[doc = include_str!("../../../book/src/bench.md")]
    pub mod bench {}
}
