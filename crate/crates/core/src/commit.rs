//! Folding an upper directory into its lower directory on disk.
//!
//! A commit is a redo-log transaction under the registry's commit lock:
//!
//! 1. The journal is written in the `Staged` state and every file and
//!    symlink payload is copied into a staging directory and checksummed.
//! 2. The journal is rewritten as `Committed`. This atomic rename is the
//!    commit point.
//! 3. Entries are applied to the lower directory in journal order, the
//!    upper directory is emptied and the staging directory removed.
//!
//! [`recover`] finishes whatever a crash interrupted: a `Staged` journal is
//! marked `Aborted` with the lower directory untouched, and a `Committed`
//! journal whose staging directory still exists is replayed. Applying an
//! entry is idempotent, so replaying from the start is safe. Journals are
//! kept under `<state_root>/journals`.

use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use chrono::Utc;
use thiserror::Error;

use crate::disk::{self, Role};
use crate::overlay::merge::{plan_merge, EntryType};
use crate::overlay::{Checksum, JournalEntry, JournalState, MergeJournal, Node, OpKind};
use crate::path::NormPath;
use crate::state::{write_atomic, LockGuard, Registry, StateError};

pub const JOURNALS_DIR: &str = "journals";
pub const STAGING_DIR: &str = "staging";
/// File inside a staging directory naming the lower and upper directories.
pub const TARGET_FILE: &str = "target";
/// Environment variable read by [`env_fault_hook`].
pub const FAULT_ENV: &str = "CUE_FAULT_POINT";

/// Places where a commit can be interrupted, in the order they are reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitPoint {
    /// After entry `i` has been staged.
    Staged(usize),
    /// After the journal reached `Committed`.
    Sealed,
    /// After entry `i` has been applied to the lower directory.
    Applied(usize),
}

#[derive(Debug, Error)]
pub enum CommitError {
    #[error("another commit holds the lock")]
    LockBusy,
    #[error("staging failed: {reason}; lower directory untouched (journal {})", journal.display())]
    Stage { reason: String, journal: PathBuf },
    #[error("commit interrupted at {0:?}")]
    Interrupted(CommitPoint),
    #[error("journal {path}: {reason}")]
    CorruptJournal { path: PathBuf, reason: String },
    #[error(transparent)]
    State(#[from] StateError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> CommitError + '_ {
    move |source| CommitError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Default)]
pub struct CommitOptions {
    /// Staging fails when payloads exceed this many bytes.
    pub space_limit: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitOutcome {
    /// `None` when the upper directory was empty and nothing was written.
    pub id: Option<String>,
    pub journal: MergeJournal,
    pub journal_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecoveryAction {
    Aborted(String),
    Replayed(String),
    RemovedOrphan(String),
}

pub fn journals_dir(registry: &Registry) -> PathBuf {
    registry.root().join(JOURNALS_DIR)
}

fn journal_path(registry: &Registry, id: &str) -> PathBuf {
    journals_dir(registry).join(format!("{id}.journal"))
}

fn stage_dir(registry: &Registry, id: &str) -> PathBuf {
    registry.root().join(STAGING_DIR).join(id)
}

fn new_id() -> String {
    format!("{}-{}", Utc::now().format("%Y%m%dT%H%M%S%.6fZ"), std::process::id())
}

pub fn read_journal(path: &Path) -> Result<MergeJournal, CommitError> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    text.parse().map_err(|e: crate::overlay::merge::JournalParseError| CommitError::CorruptJournal {
        path: path.to_owned(),
        reason: e.to_string(),
    })
}

fn write_journal(path: &Path, journal: &MergeJournal) -> Result<(), CommitError> {
    write_atomic(path, journal.to_text().as_bytes()).map_err(io_at(path))
}

/// A hook that aborts the process at the `k`-th commit point when
/// `CUE_FAULT_POINT=k` is set, simulating a crash.
pub fn env_fault_hook() -> impl FnMut(CommitPoint) -> Result<(), String> {
    let target: Option<usize> = std::env::var(FAULT_ENV).ok().and_then(|v| v.parse().ok());
    let mut seen = 0usize;
    move |_point| {
        if Some(seen) == target {
            std::process::abort();
        }
        seen += 1;
        Ok(())
    }
}

/// Merges `upper` into `lower`. Takes the commit lock without blocking and
/// runs [`recover`] first.
pub fn commit(
    registry: &Registry,
    lower: &Path,
    upper: &Path,
    options: &CommitOptions,
    hook: &mut dyn FnMut(CommitPoint) -> Result<(), String>,
) -> Result<CommitOutcome, CommitError> {
    let lock = match registry.acquire_commit_lock() {
        Ok(l) => l,
        Err(StateError::WouldBlock(_)) => return Err(CommitError::LockBusy),
        Err(e) => return Err(e.into()),
    };
    commit_locked(registry, &lock, lower, upper, options, hook)
}

/// [`commit`] for a caller that already holds the commit lock.
pub fn commit_locked(
    registry: &Registry,
    _lock: &LockGuard,
    lower: &Path,
    upper: &Path,
    options: &CommitOptions,
    hook: &mut dyn FnMut(CommitPoint) -> Result<(), String>,
) -> Result<CommitOutcome, CommitError> {
    recover_locked(registry)?;
    let upper_tree = disk::load_tree(upper, Role::Upper).map_err(io_at(upper))?;
    let entries = plan_merge(&upper_tree);
    if entries.is_empty() {
        let mut journal = MergeJournal::new(entries);
        journal.state = JournalState::Committed;
        return Ok(CommitOutcome {
            id: None,
            journal,
            journal_path: None,
        });
    }

    let id = new_id();
    let jpath = journal_path(registry, &id);
    let stage = stage_dir(registry, &id);
    fs::create_dir_all(journals_dir(registry)).map_err(io_at(&jpath))?;
    let mut journal = MergeJournal::new(entries);
    write_journal(&jpath, &journal)?;

    if let Err(reason) = stage_all(&journal, upper, lower, &stage, options, hook)? {
        journal.state = JournalState::Aborted;
        write_journal(&jpath, &journal)?;
        let _ = disk::remove_any(&stage);
        return Err(CommitError::Stage { reason, journal: jpath });
    }

    journal.state = JournalState::Committed;
    write_journal(&jpath, &journal)?;
    hook(CommitPoint::Sealed).map_err(|_| CommitError::Interrupted(CommitPoint::Sealed))?;

    apply_all(&journal, lower, &stage, hook)?;
    finish(upper, &stage)?;
    Ok(CommitOutcome {
        id: Some(id),
        journal,
        journal_path: Some(jpath),
    })
}

/// Stages every payload. The outer error is an interruption or I/O failure
/// of the state directory; the inner one a staging failure to report.
fn stage_all(
    journal: &MergeJournal,
    upper: &Path,
    lower: &Path,
    stage: &Path,
    options: &CommitOptions,
    hook: &mut dyn FnMut(CommitPoint) -> Result<(), String>,
) -> Result<Result<(), String>, CommitError> {
    fs::create_dir_all(stage).map_err(io_at(stage))?;
    let target = stage.join(TARGET_FILE);
    let text = format!("{}\n{}\n", lower.display(), upper.display());
    fs::write(&target, text).map_err(io_at(&target))?;
    let mut staged_bytes = 0u64;
    for (i, entry) in journal.entries.iter().enumerate() {
        if let Some(ty) = entry.entry_type.filter(|t| *t != EntryType::Directory) {
            let src = disk::host_path(upper, &entry.path);
            let dst = stage.join(i.to_string());
            let result = match ty {
                EntryType::Symlink => fs::read_link(&src)
                    .and_then(|t| fs::write(&dst, t.as_os_str().as_encoded_bytes()))
                    .map(|()| 0),
                _ => fs::copy(&src, &dst),
            };
            let n = match result {
                Ok(n) => n,
                Err(e) => return Ok(Err(format!("{}: {e}", src.display()))),
            };
            staged_bytes += n;
            if options.space_limit.is_some_and(|limit| staged_bytes > limit) {
                return Ok(Err(format!("payloads exceed the space limit of {} bytes", options.space_limit.unwrap())));
            }
            let sum = checksum_file(&dst).map_err(io_at(&dst))?;
            if Some(sum) != entry.checksum {
                return Ok(Err(format!("checksum mismatch for {}", entry.path)));
            }
            File::open(&dst).and_then(|f| f.sync_all()).map_err(io_at(&dst))?;
        }
        hook(CommitPoint::Staged(i)).map_err(|_| CommitError::Interrupted(CommitPoint::Staged(i)))?;
    }
    File::open(stage).and_then(|f| f.sync_all()).map_err(io_at(stage))?;
    Ok(Ok(()))
}

fn checksum_file(path: &Path) -> io::Result<Checksum> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    Ok(Checksum::of(&bytes))
}

/// Applies one journal entry to the lower directory.
pub fn apply_entry_on_disk(lower: &Path, stage: &Path, index: usize, entry: &JournalEntry) -> io::Result<()> {
    let dst = disk::host_path(lower, &entry.path);
    match entry.kind {
        OpKind::DeleteFromLower => disk::remove_any(&dst),
        OpKind::MarkOpaqueApplied => {
            if entry.path.is_root() {
                for child in fs::read_dir(&dst)? {
                    disk::remove_any(&child?.path())?;
                }
                Ok(())
            } else {
                disk::remove_any(&dst)?;
                fs::create_dir(&dst)
            }
        }
        OpKind::CopyToLower => match entry.entry_type {
            Some(EntryType::Directory) | None => {
                if !dst.symlink_metadata().is_ok_and(|m| m.is_dir()) {
                    disk::remove_any(&dst)?;
                    fs::create_dir(&dst)?;
                }
                Ok(())
            }
            Some(EntryType::File) => {
                let tmp = dst.with_file_name(format!(".{}.cue-commit", entry.path.file_name().unwrap_or("root")));
                fs::copy(stage.join(index.to_string()), &tmp)?;
                if dst.symlink_metadata().is_ok_and(|m| m.is_dir()) {
                    disk::remove_any(&dst)?;
                }
                fs::rename(&tmp, &dst)
            }
            Some(EntryType::Symlink) => {
                let target = fs::read(stage.join(index.to_string()))?;
                disk::remove_any(&dst)?;
                std::os::unix::fs::symlink(String::from_utf8_lossy(&target).as_ref(), &dst)
            }
        },
    }
}

fn apply_all(
    journal: &MergeJournal,
    lower: &Path,
    stage: &Path,
    hook: &mut dyn FnMut(CommitPoint) -> Result<(), String>,
) -> Result<(), CommitError> {
    for (i, entry) in journal.entries.iter().enumerate() {
        apply_entry_on_disk(lower, stage, i, entry).map_err(io_at(&disk::host_path(lower, &entry.path)))?;
        hook(CommitPoint::Applied(i)).map_err(|_| CommitError::Interrupted(CommitPoint::Applied(i)))?;
    }
    Ok(())
}

fn finish(upper: &Path, stage: &Path) -> Result<(), CommitError> {
    if upper.is_dir() {
        for child in fs::read_dir(upper).map_err(io_at(upper))? {
            let child = child.map_err(io_at(upper))?.path();
            disk::remove_any(&child).map_err(io_at(&child))?;
        }
        // Clears an opaque attribute left by the kernel.
        let _ = xattr_remove(upper, "trusted.overlay.opaque");
    }
    disk::remove_any(stage).map_err(io_at(stage))
}

fn xattr_remove(path: &Path, name: &str) -> io::Result<()> {
    use std::os::unix::ffi::OsStrExt;
    let cpath = std::ffi::CString::new(path.as_os_str().as_bytes())?;
    let cname = std::ffi::CString::new(name)?;
    // SAFETY: both strings are NUL-terminated.
    let rc = unsafe { libc::lremovexattr(cpath.as_ptr(), cname.as_ptr()) };
    if rc == 0 {
        Ok(())
    } else {
        Err(io::Error::last_os_error())
    }
}

/// Takes the commit lock (blocking) and runs recovery.
pub fn recover(registry: &Registry) -> Result<Vec<RecoveryAction>, CommitError> {
    let _lock = registry.acquire_commit_lock_blocking()?;
    recover_locked(registry)
}

fn recover_locked(registry: &Registry) -> Result<Vec<RecoveryAction>, CommitError> {
    let mut actions = Vec::new();
    let jdir = journals_dir(registry);
    let mut ids = Vec::new();
    if let Ok(entries) = fs::read_dir(&jdir) {
        for e in entries {
            let name = e.map_err(io_at(&jdir))?.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".journal")) {
                ids.push(id.to_owned());
            }
        }
    }
    ids.sort();
    for id in &ids {
        let jpath = journal_path(registry, id);
        let stage = stage_dir(registry, id);
        let mut journal = read_journal(&jpath)?;
        match journal.state {
            JournalState::Staged => {
                journal.state = JournalState::Aborted;
                write_journal(&jpath, &journal)?;
                disk::remove_any(&stage).map_err(io_at(&stage))?;
                actions.push(RecoveryAction::Aborted(id.clone()));
            }
            JournalState::Committed if stage.exists() => {
                let target = fs::read_to_string(stage.join(TARGET_FILE)).map_err(io_at(&stage))?;
                let mut lines = target.lines();
                let (Some(lower), Some(upper)) = (lines.next(), lines.next()) else {
                    return Err(CommitError::CorruptJournal {
                        path: stage.join(TARGET_FILE),
                        reason: "missing lower or upper".into(),
                    });
                };
                apply_all(&journal, Path::new(lower), &stage, &mut |_| Ok(()))?;
                finish(Path::new(upper), &stage)?;
                actions.push(RecoveryAction::Replayed(id.clone()));
            }
            JournalState::Committed | JournalState::Aborted => {}
        }
    }
    let sdir = registry.root().join(STAGING_DIR);
    if let Ok(entries) = fs::read_dir(&sdir) {
        for e in entries {
            let e = e.map_err(io_at(&sdir))?;
            let id = e.file_name().to_string_lossy().into_owned();
            if !ids.contains(&id) {
                disk::remove_any(&e.path()).map_err(io_at(&e.path()))?;
                actions.push(RecoveryAction::RemovedOrphan(id));
            }
        }
    }
    Ok(actions)
}

/// The journals kept under the state root, oldest first.
pub fn list_journals(registry: &Registry) -> Result<Vec<(String, MergeJournal)>, CommitError> {
    let jdir = journals_dir(registry);
    let mut out = Vec::new();
    let Ok(entries) = fs::read_dir(&jdir) else {
        return Ok(out);
    };
    for e in entries {
        let e = e.map_err(io_at(&jdir))?;
        if let Some(id) = e.file_name().to_str().and_then(|n| n.strip_suffix(".journal")) {
            out.push((id.to_owned(), read_journal(&e.path())?));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Paths whose visible content differs between two trees loaded from disk.
pub fn tree_diff(a: &crate::overlay::LayerTree, b: &crate::overlay::LayerTree) -> Vec<NormPath> {
    let mut paths = a.paths();
    paths.extend(b.paths());
    paths.sort();
    paths.dedup();
    paths
        .into_iter()
        .filter(|p| a.get(p).map(Node::shallow) != b.get(p).map(Node::shallow))
        .collect()
}
