//! Folding the upper layer into the lower one.
//!
//! A merge is computed from the upper layer alone as an ordered list of
//! journal entries. Entries are staged (payloads collected and checksummed)
//! before anything is applied; the same entries drive both the in-memory
//! merge here and the on-disk commit in [`crate::commit`].

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::overlay::node::{LayerTree, Node};
use crate::overlay::stack::LayerStack;
use crate::path::{escape_field, unescape_field, NormPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    CopyToLower,
    DeleteFromLower,
    MarkOpaqueApplied,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::CopyToLower => "CopyToLower",
            OpKind::DeleteFromLower => "DeleteFromLower",
            OpKind::MarkOpaqueApplied => "MarkOpaqueApplied",
        }
    }
}

/// What a `CopyToLower` entry materializes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntryType {
    File,
    Directory,
    Symlink,
}

impl EntryType {
    fn as_str(self) -> &'static str {
        match self {
            EntryType::File => "file",
            EntryType::Directory => "dir",
            EntryType::Symlink => "symlink",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JournalState {
    Staged,
    Committed,
    Aborted,
}

impl JournalState {
    pub fn as_str(self) -> &'static str {
        match self {
            JournalState::Staged => "Staged",
            JournalState::Committed => "Committed",
            JournalState::Aborted => "Aborted",
        }
    }
}

/// SHA-256 of an entry payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Checksum(pub [u8; 32]);

impl Checksum {
    pub fn of(bytes: &[u8]) -> Checksum {
        Checksum(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Checksum> {
        let bytes = hex::decode(s).ok()?;
        Some(Checksum(bytes.try_into().ok()?))
    }
}

impl fmt::Display for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalEntry {
    pub kind: OpKind,
    pub path: NormPath,
    /// Set for `CopyToLower` only.
    pub entry_type: Option<EntryType>,
    /// Set for files and symlinks.
    pub checksum: Option<Checksum>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeJournal {
    pub state: JournalState,
    pub entries: Vec<JournalEntry>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum JournalParseError {
    #[error("journal is empty")]
    Empty,
    #[error("line {0}: malformed journal record")]
    Line(usize),
}

impl MergeJournal {
    pub fn new(entries: Vec<JournalEntry>) -> Self {
        MergeJournal {
            state: JournalState::Staged,
            entries,
        }
    }

    /// Line-delimited form: a `state <State>` header, then one
    /// `<kind> <path> <hex checksum|-> <file|dir|symlink|->` line per entry.
    pub fn to_text(&self) -> String {
        let mut out = format!("state {}\n", self.state.as_str());
        for e in &self.entries {
            out.push_str(e.kind.as_str());
            out.push(' ');
            out.push_str(&escape_field(e.path.as_str()));
            out.push(' ');
            match &e.checksum {
                Some(c) => out.push_str(&c.to_hex()),
                None => out.push('-'),
            }
            out.push(' ');
            out.push_str(e.entry_type.map_or("-", EntryType::as_str));
            out.push('\n');
        }
        out
    }
}

impl FromStr for MergeJournal {
    type Err = JournalParseError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(JournalParseError::Empty)?;
        let state = match header.strip_prefix("state ") {
            Some("Staged") => JournalState::Staged,
            Some("Committed") => JournalState::Committed,
            Some("Aborted") => JournalState::Aborted,
            _ => return Err(JournalParseError::Line(1)),
        };
        let mut entries = Vec::new();
        for (idx, line) in lines {
            let bad = || JournalParseError::Line(idx + 1);
            let fields: Vec<&str> = line.split(' ').collect();
            let [kind, path, sum, ty] = fields[..] else {
                return Err(bad());
            };
            let kind = match kind {
                "CopyToLower" => OpKind::CopyToLower,
                "DeleteFromLower" => OpKind::DeleteFromLower,
                "MarkOpaqueApplied" => OpKind::MarkOpaqueApplied,
                _ => return Err(bad()),
            };
            let path = unescape_field(path)
                .and_then(|p| NormPath::parse(&p).ok())
                .ok_or_else(bad)?;
            let checksum = match sum {
                "-" => None,
                hex => Some(Checksum::from_hex(hex).ok_or_else(bad)?),
            };
            let entry_type = match ty {
                "-" => None,
                "file" => Some(EntryType::File),
                "dir" => Some(EntryType::Directory),
                "symlink" => Some(EntryType::Symlink),
                _ => return Err(bad()),
            };
            entries.push(JournalEntry {
                kind,
                path,
                entry_type,
                checksum,
            });
        }
        Ok(MergeJournal { state, entries })
    }
}

/// Computes the merge entries for an upper layer, in pre-order so every
/// directory entry precedes the entries beneath it. Payload checksums are
/// filled in from the in-memory content.
pub fn plan_merge(upper: &LayerTree) -> Vec<JournalEntry> {
    let mut out = Vec::new();
    upper.walk(|path, node| {
        let entry = match node {
            Node::Directory { opaque: true, .. } => JournalEntry {
                kind: OpKind::MarkOpaqueApplied,
                path: path.clone(),
                entry_type: None,
                checksum: None,
            },
            Node::Directory { .. } if path.is_root() => return,
            Node::Directory { .. } => JournalEntry {
                kind: OpKind::CopyToLower,
                path: path.clone(),
                entry_type: Some(EntryType::Directory),
                checksum: None,
            },
            Node::File(content) => JournalEntry {
                kind: OpKind::CopyToLower,
                path: path.clone(),
                entry_type: Some(EntryType::File),
                checksum: Some(Checksum::of(content)),
            },
            Node::Symlink(target) => JournalEntry {
                kind: OpKind::CopyToLower,
                path: path.clone(),
                entry_type: Some(EntryType::Symlink),
                checksum: Some(Checksum::of(target.as_bytes())),
            },
            Node::Whiteout => JournalEntry {
                kind: OpKind::DeleteFromLower,
                path: path.clone(),
                entry_type: None,
                checksum: None,
            },
        };
        out.push(entry);
    });
    out
}

/// Payload captured while staging an entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    File(Vec<u8>),
    Symlink(String),
}

/// A point at which a merge may be interrupted. `Staged(i)` fires after
/// entry `i` has been staged; `Sealed` fires once staging is complete and
/// just before the commit point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergePoint {
    Staged(usize),
    Sealed,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MergeError {
    #[error("stage failure: {reason}")]
    StageFailure {
        reason: String,
        journal: MergeJournal,
    },
}

#[derive(Debug, Default, Clone, Copy)]
pub struct MergeOptions {
    /// Maximum number of payload bytes staging may hold.
    pub space_limit: Option<u64>,
}

/// Merges `stack.upper()` into a copy of `stack.lower()`.
pub fn merge_down(stack: &LayerStack) -> Result<(LayerTree, MergeJournal), MergeError> {
    merge_down_with(stack, MergeOptions::default(), &mut |_| Ok(()))
}

/// As [`merge_down`], calling `interrupt` at every staging point. An `Err`
/// from the hook aborts the merge before anything is applied.
pub fn merge_down_with(
    stack: &LayerStack,
    opts: MergeOptions,
    interrupt: &mut dyn FnMut(MergePoint) -> Result<(), String>,
) -> Result<(LayerTree, MergeJournal), MergeError> {
    let mut journal = MergeJournal::new(plan_merge(stack.upper()));
    let abort = |mut journal: MergeJournal, reason: String| {
        journal.state = JournalState::Aborted;
        MergeError::StageFailure { reason, journal }
    };

    let mut payloads = Vec::with_capacity(journal.entries.len());
    let mut staged_bytes = 0u64;
    for (i, entry) in journal.entries.iter().enumerate() {
        let payload = match stack.upper().get(&entry.path) {
            Some(Node::File(c)) => Some(Payload::File(c.clone())),
            Some(Node::Symlink(t)) => Some(Payload::Symlink(t.clone())),
            Some(_) => None,
            None => {
                let reason = format!("unreadable upper node {}", entry.path);
                return Err(abort(journal, reason));
            }
        };
        if let Some(p) = &payload {
            let (bytes, len) = match p {
                Payload::File(c) => (c.as_slice(), c.len()),
                Payload::Symlink(t) => (t.as_bytes(), t.len()),
            };
            if Some(Checksum::of(bytes)) != entry.checksum {
                let reason = format!("checksum mismatch staging {}", entry.path);
                return Err(abort(journal, reason));
            }
            staged_bytes += len as u64;
            if opts.space_limit.is_some_and(|limit| staged_bytes > limit) {
                return Err(abort(journal, "insufficient space".to_owned()));
            }
        }
        payloads.push(payload);
        if let Err(reason) = interrupt(MergePoint::Staged(i)) {
            return Err(abort(journal, reason));
        }
    }
    if let Err(reason) = interrupt(MergePoint::Sealed) {
        return Err(abort(journal, reason));
    }

    let mut lower = stack.lower().clone();
    for (entry, payload) in journal.entries.iter().zip(payloads) {
        apply_entry(&mut lower, entry, payload);
    }
    journal.state = JournalState::Committed;
    Ok((lower, journal))
}

/// Applies one staged entry to an in-memory lower tree.
pub fn apply_entry(lower: &mut LayerTree, entry: &JournalEntry, payload: Option<Payload>) {
    match entry.kind {
        OpKind::DeleteFromLower => {
            lower.remove(&entry.path);
        }
        OpKind::MarkOpaqueApplied => {
            lower.insert(&entry.path, Node::dir());
        }
        OpKind::CopyToLower => match (entry.entry_type, payload) {
            (Some(EntryType::Directory), _) => {
                if !lower.get(&entry.path).is_some_and(Node::is_dir) {
                    lower.insert(&entry.path, Node::dir());
                }
            }
            (_, Some(Payload::File(c))) => {
                lower.insert(&entry.path, Node::File(c));
            }
            (_, Some(Payload::Symlink(t))) => {
                lower.insert(&entry.path, Node::Symlink(t));
            }
            (_, None) => {}
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::overlay::flatten::flatten;

    fn p(s: &str) -> NormPath {
        NormPath::parse(s).unwrap()
    }

    fn python_stack() -> LayerStack {
        let mut lower = LayerTree::new();
        lower.insert_with_parents(&p("/bin/python"), Node::file("2.7"));
        lower.insert_with_parents(&p("/etc/old.conf"), Node::file("old"));
        let mut s = LayerStack::over(lower).unwrap();
        s.write_file(&p("/bin/python"), "3.5").unwrap();
        s.remove(&p("/etc/old.conf"), false).unwrap();
        s
    }

    #[test]
    fn empty_upper_is_noop() {
        let mut lower = LayerTree::new();
        lower.insert_with_parents(&p("/a/b"), Node::file("b"));
        let s = LayerStack::over(lower.clone()).unwrap();
        let (tree, journal) = merge_down(&s).unwrap();
        assert_eq!(tree, lower);
        assert!(journal.entries.is_empty());
        assert_eq!(journal.state, JournalState::Committed);
    }

    #[test]
    fn update_and_delete_land_in_lower() {
        let s = python_stack();
        let (tree, journal) = merge_down(&s).unwrap();
        assert_eq!(tree.get(&p("/bin/python")), Some(&Node::file("3.5")));
        assert_eq!(tree.get(&p("/etc/old.conf")), None);
        assert!(tree.get(&p("/etc")).unwrap().is_dir());
        assert_eq!(tree, flatten(&s));
        let kinds: Vec<_> = journal.entries.iter().map(|e| (e.kind, e.path.to_string())).collect();
        assert_eq!(
            kinds,
            [
                (OpKind::CopyToLower, "/bin".to_owned()),
                (OpKind::CopyToLower, "/bin/python".to_owned()),
                (OpKind::CopyToLower, "/etc".to_owned()),
                (OpKind::DeleteFromLower, "/etc/old.conf".to_owned()),
            ]
        );
        assert_eq!(journal.entries[1].checksum, Some(Checksum::of(b"3.5")));
    }

    #[test]
    fn interruption_aborts() {
        let s = python_stack();
        let err = merge_down_with(&s, MergeOptions::default(), &mut |pt| match pt {
            MergePoint::Staged(1) => Err("killed".into()),
            _ => Ok(()),
        })
        .unwrap_err();
        let MergeError::StageFailure { journal, .. } = err;
        assert_eq!(journal.state, JournalState::Aborted);
    }

    #[test]
    fn space_limit_fails_staging() {
        let s = python_stack();
        let opts = MergeOptions { space_limit: Some(2) };
        let err = merge_down_with(&s, opts, &mut |_| Ok(())).unwrap_err();
        assert!(matches!(err, MergeError::StageFailure { ref reason, .. } if reason == "insufficient space"));
    }

    #[test]
    fn journal_text_roundtrip() {
        let (_, mut journal) = merge_down(&python_stack()).unwrap();
        journal.entries.push(JournalEntry {
            kind: OpKind::MarkOpaqueApplied,
            path: p("/with space"),
            entry_type: None,
            checksum: None,
        });
        let text = journal.to_text();
        assert!(text.starts_with("state Committed\n"));
        assert_eq!(text.parse::<MergeJournal>().unwrap(), journal);
        assert_eq!("".parse::<MergeJournal>(), Err(JournalParseError::Empty));
        assert_eq!(
            "state Staged\nCopyToLower /x".parse::<MergeJournal>(),
            Err(JournalParseError::Line(2))
        );
    }
}
