//! On-disk registry of containers and the host-wide commit lock.
//!
//! Layout under the state root:
//!
//! ```text
//! <state_root>/containers/<kind>/<user>.json   one record per file
//! <state_root>/commit.lock                     global commit lock
//! <state_root>/locks/<digest>.lock             per-upper-directory locks
//! ```
//!
//! Records are replaced by writing a temporary file and renaming it over the
//! old one, so readers see either the old or the new record and never a torn
//! one. Locks are advisory `flock` locks and are released by the kernel when
//! the holder exits.

use std::fs::{self, File, OpenOptions, TryLockError};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::plan::{ContainerConfig, ContainerKind};

pub const STATE_ROOT_ENV: &str = "CUE_STATE_ROOT";
pub const DEFAULT_STATE_ROOT: &str = "/var/lib/cue";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Status {
    Created,
    Running,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerRecord {
    pub user: String,
    pub upper_dir: PathBuf,
    pub work_dir: PathBuf,
    pub merged_dir: PathBuf,
    pub hostname: String,
    #[serde(with = "rfc3339")]
    pub created_at: DateTime<Utc>,
    pub status: Status,
    pub kind: ContainerKind,
}

mod rfc3339 {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::Micros, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}

impl ContainerRecord {
    pub fn from_config(config: &ContainerConfig) -> Self {
        ContainerRecord {
            user: config.user.clone(),
            upper_dir: config.upper_dir.clone(),
            work_dir: config.work_dir.clone(),
            merged_dir: config.merged_dir.clone(),
            hostname: config.hostname.clone(),
            created_at: Utc::now(),
            status: Status::Created,
            kind: config.kind,
        }
    }

    pub fn is_live(&self) -> bool {
        self.status != Status::Stopped
    }
}

#[derive(Debug, Error)]
pub enum StateError {
    #[error("a live {kind:?} container for {user} is already registered")]
    Duplicate { user: String, kind: ContainerKind },
    #[error("no {kind:?} container registered for {user}")]
    NotFound { user: String, kind: ContainerKind },
    #[error("lock {0} is held by another process")]
    WouldBlock(PathBuf),
    #[error("state storage failure at {path}: {source}")]
    Storage { path: PathBuf, source: io::Error },
    #[error("corrupt record {path}: {source}")]
    Corrupt { path: PathBuf, source: serde_json::Error },
}

fn storage(path: &Path) -> impl FnOnce(io::Error) -> StateError + '_ {
    move |source| StateError::Storage {
        path: path.to_owned(),
        source,
    }
}

fn kind_dir(kind: ContainerKind) -> &'static str {
    match kind {
        ContainerKind::User => "user",
        ContainerKind::RootSandbox => "root-sandbox",
    }
}

/// Held lock on a file; released on drop.
#[derive(Debug)]
pub struct LockGuard {
    file: File,
    path: PathBuf,
}

impl LockGuard {
    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn release(self) {}
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

fn open_lock_file(path: &Path) -> Result<File, StateError> {
    OpenOptions::new()
        .create(true)
        .truncate(false)
        .read(true)
        .write(true)
        .open(path)
        .map_err(storage(path))
}

fn try_lock(path: &Path) -> Result<LockGuard, StateError> {
    let file = open_lock_file(path)?;
    match file.try_lock() {
        Ok(()) => Ok(LockGuard {
            file,
            path: path.to_owned(),
        }),
        Err(TryLockError::WouldBlock) => Err(StateError::WouldBlock(path.to_owned())),
        Err(TryLockError::Error(e)) => Err(storage(path)(e)),
    }
}

fn lock_blocking(path: &Path) -> Result<LockGuard, StateError> {
    let file = open_lock_file(path)?;
    file.lock().map_err(storage(path))?;
    Ok(LockGuard {
        file,
        path: path.to_owned(),
    })
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("record");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

impl Registry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StateError> {
        let root = root.into();
        for kind in [ContainerKind::User, ContainerKind::RootSandbox] {
            let dir = root.join("containers").join(kind_dir(kind));
            fs::create_dir_all(&dir).map_err(storage(&dir))?;
        }
        Ok(Registry { root })
    }

    /// Opens the registry at `$CUE_STATE_ROOT`, or `/var/lib/cue`.
    pub fn from_env() -> Result<Self, StateError> {
        Registry::open(default_state_root())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn record_path(&self, user: &str, kind: ContainerKind) -> PathBuf {
        self.root
            .join("containers")
            .join(kind_dir(kind))
            .join(format!("{user}.json"))
    }

    /// Serializes mutations of one record across processes.
    pub fn lock_record(&self, user: &str, kind: ContainerKind) -> Result<LockGuard, StateError> {
        let path = self
            .root
            .join("containers")
            .join(kind_dir(kind))
            .join(format!(".{user}.lock"));
        lock_blocking(&path)
    }

    pub fn register(&self, record: &ContainerRecord) -> Result<(), StateError> {
        let _guard = self.lock_record(&record.user, record.kind)?;
        if let Some(existing) = self.lookup(&record.user, record.kind)? {
            if existing.is_live() {
                return Err(StateError::Duplicate {
                    user: record.user.clone(),
                    kind: record.kind,
                });
            }
        }
        self.write_record(record)
    }

    fn write_record(&self, record: &ContainerRecord) -> Result<(), StateError> {
        let path = self.record_path(&record.user, record.kind);
        let mut bytes = serde_json::to_vec_pretty(record).expect("record serializes");
        bytes.push(b'\n');
        write_atomic(&path, &bytes).map_err(storage(&path))
    }

    pub fn lookup(&self, user: &str, kind: ContainerKind) -> Result<Option<ContainerRecord>, StateError> {
        let path = self.record_path(user, kind);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|source| StateError::Corrupt { path, source }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(storage(&path)(e)),
        }
    }

    pub fn update_status(&self, user: &str, kind: ContainerKind, status: Status) -> Result<ContainerRecord, StateError> {
        let _guard = self.lock_record(user, kind)?;
        let mut record = self.lookup(user, kind)?.ok_or_else(|| StateError::NotFound {
            user: user.to_owned(),
            kind,
        })?;
        record.status = status;
        self.write_record(&record)?;
        Ok(record)
    }

    /// Deletes a record; returns whether one existed.
    pub fn remove(&self, user: &str, kind: ContainerKind) -> Result<bool, StateError> {
        let _guard = self.lock_record(user, kind)?;
        let path = self.record_path(user, kind);
        match fs::remove_file(&path) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(storage(&path)(e)),
        }
    }

    /// All records, sorted by user and then kind.
    pub fn list(&self) -> Result<Vec<ContainerRecord>, StateError> {
        let mut out = Vec::new();
        for kind in [ContainerKind::User, ContainerKind::RootSandbox] {
            let dir = self.root.join("containers").join(kind_dir(kind));
            for entry in fs::read_dir(&dir).map_err(storage(&dir))? {
                let entry = entry.map_err(storage(&dir))?;
                let name = entry.file_name();
                let Some(name) = name.to_str() else { continue };
                if name.starts_with('.') {
                    continue;
                }
                if let Some(user) = name.strip_suffix(".json") {
                    if let Some(rec) = self.lookup(user, kind)? {
                        out.push(rec);
                    }
                }
            }
        }
        out.sort_by(|a, b| (&a.user, a.kind as u8).cmp(&(&b.user, b.kind as u8)));
        Ok(out)
    }

    pub fn commit_lock_path(&self) -> PathBuf {
        self.root.join("commit.lock")
    }

    /// Takes the global commit lock, failing with `WouldBlock` if another
    /// process holds it.
    pub fn acquire_commit_lock(&self) -> Result<LockGuard, StateError> {
        try_lock(&self.commit_lock_path())
    }

    pub fn acquire_commit_lock_blocking(&self) -> Result<LockGuard, StateError> {
        lock_blocking(&self.commit_lock_path())
    }

    /// Exclusive claim on an upper directory for the lifetime of a running
    /// container.
    pub fn lock_upper(&self, upper_dir: &Path) -> Result<LockGuard, StateError> {
        let dir = self.root.join("locks");
        fs::create_dir_all(&dir).map_err(storage(&dir))?;
        let digest = Sha256::digest(upper_dir.as_os_str().as_encoded_bytes());
        try_lock(&dir.join(format!("{}.lock", hex::encode(&digest[..12]))))
    }
}

pub fn default_state_root() -> PathBuf {
    std::env::var_os(STATE_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_STATE_ROOT))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(user: &str) -> ContainerRecord {
        ContainerRecord {
            user: user.to_owned(),
            upper_dir: format!("/s/{user}/upper").into(),
            work_dir: format!("/s/{user}/work").into(),
            merged_dir: format!("/s/{user}/merged").into(),
            hostname: format!("cue-{user}"),
            created_at: DateTime::parse_from_rfc3339("2026-01-02T03:04:05.000006Z")
                .unwrap()
                .with_timezone(&Utc),
            status: Status::Created,
            kind: ContainerKind::User,
        }
    }

    #[test]
    fn register_lookup_duplicate() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = Registry::open(tmp.path()).unwrap();
        assert!(reg.lookup("alice", ContainerKind::User).unwrap().is_none());
        reg.register(&record("alice")).unwrap();
        assert_eq!(reg.lookup("alice", ContainerKind::User).unwrap(), Some(record("alice")));
        assert!(matches!(
            reg.register(&record("alice")),
            Err(StateError::Duplicate { .. })
        ));
        assert!(reg.remove("alice", ContainerKind::User).unwrap());
        assert!(reg.lookup("alice", ContainerKind::User).unwrap().is_none());
    }

    #[test]
    fn record_json_keys_are_fixed() {
        let v = serde_json::to_value(record("bob")).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["created_at", "hostname", "kind", "merged_dir", "status", "upper_dir", "user", "work_dir"]
        );
        assert_eq!(v["created_at"], "2026-01-02T03:04:05.000006Z");
        assert_eq!(v["status"], "Created");
        assert_eq!(v["kind"], "User");
    }

    #[test]
    fn status_update_visible() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = Registry::open(tmp.path()).unwrap();
        reg.register(&record("carol")).unwrap();
        reg.update_status("carol", ContainerKind::User, Status::Running).unwrap();
        assert_eq!(
            reg.lookup("carol", ContainerKind::User).unwrap().unwrap().status,
            Status::Running
        );
        reg.update_status("carol", ContainerKind::User, Status::Stopped).unwrap();
        // A stopped record no longer blocks registration.
        reg.register(&record("carol")).unwrap();
    }

    #[test]
    fn list_sorted_and_ignores_temporaries() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = Registry::open(tmp.path()).unwrap();
        for u in ["zed", "alice", "mike"] {
            reg.register(&record(u)).unwrap();
        }
        let dir = reg.record_path("x", ContainerKind::User).parent().unwrap().to_owned();
        fs::write(dir.join(".alice.json.tmp-1"), b"{\"user\": \"al").unwrap();
        let users: Vec<_> = reg.list().unwrap().into_iter().map(|r| r.user).collect();
        assert_eq!(users, ["alice", "mike", "zed"]);
    }

    #[test]
    fn commit_lock_excludes_second_holder() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = Registry::open(tmp.path()).unwrap();
        let held = reg.acquire_commit_lock().unwrap();
        assert!(matches!(reg.acquire_commit_lock(), Err(StateError::WouldBlock(_))));
        held.release();
        reg.acquire_commit_lock().unwrap();
    }

    #[test]
    fn upper_lock_is_per_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = Registry::open(tmp.path()).unwrap();
        let _a = reg.lock_upper(Path::new("/u/a")).unwrap();
        let _b = reg.lock_upper(Path::new("/u/b")).unwrap();
        assert!(matches!(reg.lock_upper(Path::new("/u/a")), Err(StateError::WouldBlock(_))));
    }
}
