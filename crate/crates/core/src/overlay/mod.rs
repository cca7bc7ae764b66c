//! Pure model of a two-layer filesystem view.
//!
//! A [`LayerStack`] pairs a read-only lower tree with a private upper delta.
//! Lookups prefer the upper layer; deletions of lower entries are recorded as
//! whiteouts; a directory recreated over a whiteout is opaque. [`flatten`]
//! computes the visible tree independently of [`LayerStack::resolve`] and
//! serves as the oracle for the rest of the crate. [`merge_down`] folds the
//! upper layer into the lower one through a staged journal.

mod flatten;
pub mod merge;
mod node;
mod stack;

use thiserror::Error;

pub use flatten::flatten;
pub use merge::{merge_down, merge_down_with, Checksum, JournalEntry, JournalState, MergeJournal, OpKind};
pub use node::{LayerTree, Node};
pub use stack::{DirEntry, LayerStack, Origin, Resolution};

use crate::path::{MalformedPath, NormPath};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OverlayError {
    #[error(transparent)]
    MalformedPath(#[from] MalformedPath),
    #[error("parent of {0} does not exist")]
    AbsentParent(NormPath),
    #[error("{0} is not a directory")]
    NotADirectory(NormPath),
    #[error("{0} does not exist")]
    Absent(NormPath),
    #[error("{0} is hidden")]
    Hidden(NormPath),
    #[error("directory {0} is not empty")]
    DirectoryNotEmpty(NormPath),
    #[error("{0} is a directory")]
    IsADirectory(NormPath),
    #[error("{0} already exists")]
    AlreadyExists(NormPath),
    #[error("operation not permitted on the root directory")]
    RootPath,
    #[error("lower layer must not contain whiteouts or opaque directories")]
    LowerHasMarkers,
}
