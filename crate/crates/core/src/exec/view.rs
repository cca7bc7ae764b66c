//! File access through a container's merged view without kernel mounts.
//!
//! Every operation loads just the entries along the requested path from the
//! lower and upper directories, hands that partial stack to the pure
//! [`overlay`](crate::overlay) model, and writes back whatever the model
//! changed in the upper layer. Nothing is cached between calls.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::disk::{self, Content, Role, OPAQUE_MARKER, WHITEOUT_PREFIX};
use crate::overlay::{self, DirEntry, LayerStack, LayerTree, Node, Origin, OverlayError, Resolution};
use crate::path::{MalformedPath, NormPath};
use crate::plan::{AccessMode, ContainerConfig, MaskMode, MaskRule};

const MAX_SYMLINK_HOPS: usize = 40;
const CHUNK: usize = 1 << 20;

/// Upper bound on the entries copied by [`SandboxView::materialize_all`].
pub const MATERIALIZE_LIMIT: usize = 250_000;

#[derive(Debug, Error)]
pub enum ViewError {
    #[error(transparent)]
    Overlay(#[from] OverlayError),
    #[error("{0} is read-only in this container")]
    ReadOnly(NormPath),
    #[error("{0} is masked in this container")]
    Masked(NormPath),
    #[error("{0} uses a reserved name")]
    ReservedName(NormPath),
    #[error("too many levels of symbolic links at {0}")]
    SymlinkLoop(NormPath),
    #[error("view has {0} entries, too many to materialize")]
    TooLarge(usize),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl From<MalformedPath> for ViewError {
    fn from(e: MalformedPath) -> Self {
        ViewError::Overlay(e.into())
    }
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> ViewError + '_ {
    move |source| ViewError::Io {
        path: path.to_owned(),
        source,
    }
}

/// A visible entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub origin: Origin,
    /// The entry without children.
    pub node: Node,
    /// Backing path on the host; `None` for masked directories.
    pub host: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SandboxView {
    lower: PathBuf,
    upper: PathBuf,
    merged: PathBuf,
    upper_mode: AccessMode,
    masks: Vec<MaskRule>,
}

enum MaskHit {
    At(MaskMode),
    Below(MaskMode),
}

impl SandboxView {
    pub fn new(lower: impl Into<PathBuf>, upper: impl Into<PathBuf>, merged: impl Into<PathBuf>) -> Self {
        SandboxView {
            lower: lower.into(),
            upper: upper.into(),
            merged: merged.into(),
            upper_mode: AccessMode::ReadWrite,
            masks: Vec::new(),
        }
    }

    pub fn from_config(config: &ContainerConfig) -> Self {
        SandboxView {
            lower: config.host_root.clone(),
            upper: config.upper_dir.clone(),
            merged: config.merged_dir.clone(),
            upper_mode: config.upper_mode,
            masks: config.mask_paths.clone(),
        }
    }

    pub fn with_upper_mode(mut self, mode: AccessMode) -> Self {
        self.upper_mode = mode;
        self
    }

    pub fn with_masks(mut self, masks: Vec<MaskRule>) -> Self {
        self.masks = masks;
        self
    }

    pub fn lower_dir(&self) -> &Path {
        &self.lower
    }

    pub fn upper_dir(&self) -> &Path {
        &self.upper
    }

    pub fn merged_dir(&self) -> &Path {
        &self.merged
    }

    fn partial_tree(&self, root: &Path, role: Role, path: &NormPath, children: bool) -> io::Result<LayerTree> {
        let mut tree = LayerTree::new();
        if !root.is_dir() {
            return Ok(tree);
        }
        if role == Role::Upper && disk::is_opaque_dir(root) {
            tree = LayerTree::from_root(Node::opaque_dir()).expect("directory");
        }
        let mut cur = NormPath::root();
        let mut reached = true;
        for comp in path.components() {
            let next = cur.join(comp).expect("normalized component");
            let host = disk::host_path(root, &next);
            let node = match disk::read_node(&host, role, Content::Placeholder) {
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::NotFound || e.kind() == io::ErrorKind::NotADirectory => None,
                Err(e) => return Err(e),
            };
            let node = match node {
                Some(n) => Some(n),
                None if role == Role::Upper => disk::whiteout_marker(root, &next)
                    .filter(|m| m.symlink_metadata().is_ok())
                    .map(|_| Node::Whiteout),
                None => None,
            };
            match node {
                Some(n) => {
                    let descend = n.is_dir();
                    tree.insert(&next, n);
                    cur = next;
                    if !descend {
                        reached = cur == *path;
                        break;
                    }
                }
                None => {
                    reached = false;
                    break;
                }
            }
        }
        if children && reached && tree.get(path).is_some_and(Node::is_dir) {
            let host = disk::host_path(root, path);
            let dir = tree.get_mut(path).and_then(Node::children_mut).expect("directory");
            for (name, child) in disk::read_children(&host, role, Content::Placeholder)? {
                if child.is_whiteout() && dir.contains_key(&name) {
                    continue;
                }
                dir.insert(name, child);
            }
        }
        Ok(tree)
    }

    /// The entries along `path` in both layers, as a pure stack.
    pub fn partial(&self, path: &NormPath, children: bool) -> Result<LayerStack, ViewError> {
        let lower = self
            .partial_tree(&self.lower, Role::Lower, path, children)
            .map_err(io_at(&self.lower))?;
        let upper = self
            .partial_tree(&self.upper, Role::Upper, path, children)
            .map_err(io_at(&self.upper))?;
        Ok(LayerStack::new(lower, upper)?)
    }

    fn mask_hit(&self, path: &NormPath) -> Option<MaskHit> {
        self.masks.iter().find_map(|m| {
            if *path == m.path {
                Some(MaskHit::At(m.mode))
            } else if path.starts_with(&m.path) {
                Some(MaskHit::Below(m.mode))
            } else {
                None
            }
        })
    }

    fn host_for(&self, origin: Origin, path: &NormPath) -> PathBuf {
        match origin {
            Origin::Upper => disk::host_path(&self.upper, path),
            Origin::Lower => disk::host_path(&self.lower, path),
        }
    }

    /// Follows symlinks in the ancestors of `path` (and in its last
    /// component when `follow_last`), lexically within the view.
    pub fn canonicalize(&self, path: &NormPath, follow_last: bool) -> Result<NormPath, ViewError> {
        let mut hops = 0;
        let mut cur = NormPath::root();
        let mut pending: VecDeque<String> = path.components().map(str::to_owned).collect();
        while !pending.is_empty() {
            // Build the candidate path from the pending components so the
            // whole remaining chain can be checked with one partial load.
            let mut full = cur.clone();
            let mut walked = Vec::new();
            let mut dotted = false;
            for c in &pending {
                if c == "." || c == ".." {
                    dotted = true;
                    break;
                }
                full = full.join(c)?;
                walked.push(full.clone());
            }
            let stack = if walked.is_empty() {
                None
            } else {
                Some(self.partial(&full, false)?)
            };
            let mut advanced = 0;
            let mut redirect = None;
            for (i, prefix) in walked.iter().enumerate() {
                let last = !dotted && i + 1 == pending.len();
                if last && !follow_last {
                    advanced = i + 1;
                    break;
                }
                let res = stack.as_ref().expect("walked implies stack").resolve(prefix);
                if let Some(Node::Symlink(target)) = res.node() {
                    redirect = Some((i, target.clone()));
                    break;
                }
                advanced = i + 1;
            }
            if let Some((i, target)) = redirect {
                hops += 1;
                if hops > MAX_SYMLINK_HOPS {
                    return Err(ViewError::SymlinkLoop(walked[i].clone()));
                }
                cur = if i == 0 { cur.clone() } else { walked[i - 1].clone() };
                if target.starts_with('/') {
                    cur = NormPath::root();
                }
                let rest: Vec<String> = pending.drain(..).skip(i + 1).collect();
                pending.extend(target.split('/').filter(|c| !c.is_empty()).map(str::to_owned));
                pending.extend(rest);
                continue;
            }
            if advanced > 0 {
                cur = walked[advanced - 1].clone();
                pending.drain(..advanced);
            }
            if let Some(c) = pending.front() {
                if c == "." {
                    pending.pop_front();
                } else if c == ".." {
                    pending.pop_front();
                    cur = cur.parent().unwrap_or_else(NormPath::root);
                } else if advanced == 0 && walked.is_empty() {
                    unreachable!("non-dot component always walks");
                }
            }
        }
        Ok(cur)
    }

    fn lookup_at(&self, path: &NormPath) -> Result<Option<Entry>, ViewError> {
        match self.mask_hit(path) {
            Some(MaskHit::At(MaskMode::EmptyBind)) => {
                return Ok(Some(Entry {
                    origin: Origin::Upper,
                    node: Node::dir(),
                    host: None,
                }))
            }
            Some(MaskHit::Below(MaskMode::EmptyBind)) => return Ok(None),
            _ => {}
        }
        let stack = self.partial(path, false)?;
        let entry = match stack.resolve(path) {
            Resolution::FoundUpper(n) => Some((Origin::Upper, n.shallow())),
            Resolution::FoundLower(n) => Some((Origin::Lower, n.shallow())),
            Resolution::Hidden | Resolution::Absent => None,
        };
        Ok(entry.map(|(origin, node)| Entry {
            origin,
            host: Some(self.host_for(origin, path)),
            node,
        }))
    }

    /// Resolves `path` without following a symlink in its last component.
    pub fn lookup(&self, path: &NormPath) -> Result<Option<Entry>, ViewError> {
        let path = self.canonicalize(path, false)?;
        self.lookup_at(&path)
    }

    /// Like [`lookup`](Self::lookup) but reports the model's distinction
    /// between hidden and absent entries.
    pub fn resolve_kind(&self, path: &NormPath) -> Result<ResolvedKind, ViewError> {
        let path = self.canonicalize(path, false)?;
        let stack = self.partial(&path, false)?;
        Ok(match stack.resolve(&path) {
            Resolution::FoundUpper(n) => ResolvedKind::FoundUpper(n.shallow()),
            Resolution::FoundLower(n) => ResolvedKind::FoundLower(n.shallow()),
            Resolution::Hidden => ResolvedKind::Hidden,
            Resolution::Absent => ResolvedKind::Absent,
        })
    }

    fn visible_file(&self, path: &NormPath) -> Result<(NormPath, PathBuf, Origin), ViewError> {
        let path = self.canonicalize(path, true)?;
        match self.lookup_at(&path)? {
            Some(Entry {
                node: Node::File(_),
                host: Some(host),
                origin,
            }) => Ok((path, host, origin)),
            Some(Entry { node, .. }) if node.is_dir() => Err(OverlayError::IsADirectory(path).into()),
            Some(_) => Err(OverlayError::Absent(path).into()),
            None => Err(OverlayError::Absent(path).into()),
        }
    }

    pub fn open(&self, path: &NormPath) -> Result<File, ViewError> {
        let (_, host, _) = self.visible_file(path)?;
        File::open(&host).map_err(io_at(&host))
    }

    pub fn read(&self, path: &NormPath) -> Result<Vec<u8>, ViewError> {
        let (_, host, _) = self.visible_file(path)?;
        fs::read(&host).map_err(io_at(&host))
    }

    pub fn list(&self, path: &NormPath) -> Result<Vec<DirEntry>, ViewError> {
        let path = self.canonicalize(path, true)?;
        match self.mask_hit(&path) {
            Some(MaskHit::At(MaskMode::EmptyBind)) => return Ok(Vec::new()),
            Some(MaskHit::Below(MaskMode::EmptyBind)) => return Err(OverlayError::Absent(path).into()),
            _ => {}
        }
        let stack = self.partial(&path, true)?;
        let mut entries = stack.list_dir(&path)?;
        entries.retain(|e| {
            path.join(&e.name)
                .map(|child| !matches!(self.mask_hit(&child), Some(MaskHit::Below(MaskMode::EmptyBind))))
                .unwrap_or(true)
        });
        Ok(entries)
    }

    fn check_writable(&self, path: &NormPath) -> Result<(), ViewError> {
        if path.components().any(|c| c.starts_with(WHITEOUT_PREFIX)) {
            return Err(ViewError::ReservedName(path.clone()));
        }
        match self.mask_hit(path) {
            Some(MaskHit::At(MaskMode::EmptyBind)) | Some(MaskHit::Below(MaskMode::EmptyBind)) => {
                return Err(ViewError::Masked(path.clone()))
            }
            Some(_) => return Err(ViewError::ReadOnly(path.clone())),
            None => {}
        }
        if self.upper_mode == AccessMode::ReadOnly {
            return Err(ViewError::ReadOnly(path.clone()));
        }
        Ok(())
    }

    /// Runs a model operation on the partial stack for `path` and writes the
    /// resulting upper-layer changes to disk.
    fn mutate(
        &self,
        path: &NormPath,
        children: bool,
        op: impl FnOnce(&mut LayerStack) -> Result<(), OverlayError>,
    ) -> Result<(), ViewError> {
        self.check_writable(path)?;
        let mut stack = self.partial(path, children)?;
        let before = stack.upper().clone();
        op(&mut stack)?;
        self.sync_upper(&before, stack.upper())
    }

    fn sync_upper(&self, before: &LayerTree, after: &LayerTree) -> Result<(), ViewError> {
        let mut paths = before.paths();
        paths.extend(after.paths());
        paths.sort();
        paths.dedup();
        for path in paths {
            let old = before.get(&path).map(Node::shallow);
            let new = after.get(&path).map(Node::shallow);
            if old == new {
                continue;
            }
            let host = disk::host_path(&self.upper, &path);
            if path.is_root() {
                let marker = self.upper.join(OPAQUE_MARKER);
                if new.as_ref().is_some_and(Node::is_opaque) {
                    fs::create_dir_all(&self.upper).map_err(io_at(&self.upper))?;
                    fs::write(&marker, b"").map_err(io_at(&marker))?;
                } else {
                    disk::remove_any(&marker).map_err(io_at(&marker))?;
                }
                continue;
            }
            let marker = disk::whiteout_marker(&self.upper, &path).expect("non-root");
            match &old {
                Some(Node::Whiteout) => {
                    disk::remove_any(&marker).map_err(io_at(&marker))?;
                    // Kernel-style whiteouts occupy the name itself.
                    if host.symlink_metadata().is_ok_and(|m| !m.is_dir() && !m.is_file() && !m.is_symlink()) {
                        disk::remove_any(&host).map_err(io_at(&host))?;
                    }
                }
                Some(Node::Directory { .. }) if new.as_ref().is_some_and(Node::is_dir) => {}
                Some(_) => disk::remove_any(&host).map_err(io_at(&host))?,
                None => {}
            }
            match &new {
                Some(Node::Whiteout) => {
                    disk::remove_any(&host).map_err(io_at(&host))?;
                    fs::write(&marker, b"").map_err(io_at(&marker))?;
                }
                Some(Node::Directory { opaque, .. }) => {
                    if !old.as_ref().is_some_and(Node::is_dir) {
                        fs::create_dir_all(&host).map_err(io_at(&host))?;
                    }
                    let opq = host.join(OPAQUE_MARKER);
                    if *opaque {
                        fs::write(&opq, b"").map_err(io_at(&opq))?;
                    } else {
                        disk::remove_any(&opq).map_err(io_at(&opq))?;
                    }
                }
                Some(Node::Symlink(target)) => {
                    std::os::unix::fs::symlink(target, &host).map_err(io_at(&host))?;
                }
                // File contents are written by the caller.
                Some(Node::File(_)) | None => {}
            }
        }
        Ok(())
    }

    fn create_at(&self, path: &NormPath) -> Result<File, ViewError> {
        let host = disk::host_path(&self.upper, path);
        // A copied-up file keeps the lower file's permission bits.
        let inherited = match host.symlink_metadata() {
            Ok(_) => None,
            Err(_) => disk::host_path(&self.lower, path)
                .symlink_metadata()
                .ok()
                .filter(|m| m.is_file())
                .map(|m| m.permissions()),
        };
        self.mutate(path, false, |s| s.write_file(path, Vec::new()))?;
        let file = File::create(&host).map_err(io_at(&host))?;
        if let Some(perms) = inherited {
            file.set_permissions(perms).map_err(io_at(&host))?;
        }
        Ok(file)
    }

    /// Creates or truncates a file in the upper layer, copying up its
    /// ancestors, and returns it open for writing.
    pub fn create(&self, path: &NormPath) -> Result<File, ViewError> {
        let path = self.canonicalize(path, true)?;
        self.create_at(&path)
    }

    pub fn write(&self, path: &NormPath, content: &[u8]) -> Result<(), ViewError> {
        let path = self.canonicalize(path, true)?;
        let host = disk::host_path(&self.upper, &path);
        let mut f = self.create_at(&path)?;
        f.write_all(content).map_err(io_at(&host))
    }

    /// Rewrites a visible file chunk by chunk through `f`. A lower file is
    /// copied up as it is rewritten; an upper file is modified in place.
    pub fn rewrite(&self, path: &NormPath, mut f: impl FnMut(&mut [u8])) -> Result<u64, ViewError> {
        let (path, src_host, origin) = self.visible_file(path)?;
        let mut buf = vec![0u8; CHUNK];
        let mut total = 0u64;
        match origin {
            Origin::Upper => {
                self.check_writable(&path)?;
                let mut file = OpenOptions::new()
                    .read(true)
                    .write(true)
                    .open(&src_host)
                    .map_err(io_at(&src_host))?;
                loop {
                    let n = file.read(&mut buf).map_err(io_at(&src_host))?;
                    if n == 0 {
                        break;
                    }
                    f(&mut buf[..n]);
                    file.seek(SeekFrom::Current(-(n as i64))).map_err(io_at(&src_host))?;
                    file.write_all(&buf[..n]).map_err(io_at(&src_host))?;
                    total += n as u64;
                }
            }
            Origin::Lower => {
                let mut src = File::open(&src_host).map_err(io_at(&src_host))?;
                let dst_host = disk::host_path(&self.upper, &path);
                let mut dst = self.create_at(&path)?;
                loop {
                    let n = src.read(&mut buf).map_err(io_at(&src_host))?;
                    if n == 0 {
                        break;
                    }
                    f(&mut buf[..n]);
                    dst.write_all(&buf[..n]).map_err(io_at(&dst_host))?;
                    total += n as u64;
                }
            }
        }
        Ok(total)
    }

    pub fn make_dir(&self, path: &NormPath) -> Result<(), ViewError> {
        let path = self.canonicalize(path, false)?;
        self.mutate(&path, false, |s| s.make_dir(&path))
    }

    pub fn symlink(&self, path: &NormPath, target: &str) -> Result<(), ViewError> {
        let path = self.canonicalize(path, false)?;
        self.mutate(&path, false, |s| s.symlink(&path, target))
    }

    pub fn remove(&self, path: &NormPath, recursive: bool) -> Result<(), ViewError> {
        let path = self.canonicalize(path, false)?;
        self.mutate(&path, true, |s| s.remove(&path, recursive))
    }

    /// Copies one visible entry into the merged directory and returns its
    /// location there.
    pub fn materialize(&self, path: &NormPath) -> Result<PathBuf, ViewError> {
        let path = self.canonicalize(path, true)?;
        let entry = self
            .lookup_at(&path)?
            .ok_or_else(|| ViewError::from(OverlayError::Absent(path.clone())))?;
        let dst = disk::host_path(&self.merged, &path);
        if let Some(parent) = dst.parent() {
            fs::create_dir_all(parent).map_err(io_at(parent))?;
        }
        match (&entry.node, &entry.host) {
            (Node::File(_), Some(src)) => {
                fs::copy(src, &dst).map_err(io_at(&dst))?;
            }
            (Node::Symlink(target), _) => {
                disk::remove_any(&dst).map_err(io_at(&dst))?;
                std::os::unix::fs::symlink(target, &dst).map_err(io_at(&dst))?;
            }
            _ => fs::create_dir_all(&dst).map_err(io_at(&dst))?,
        }
        Ok(dst)
    }

    fn layers(&self, content: Content) -> Result<LayerStack, ViewError> {
        let lower = disk::load_tree_with(&self.lower, Role::Lower, content).map_err(io_at(&self.lower))?;
        let upper = disk::load_tree_with(&self.upper, Role::Upper, content).map_err(io_at(&self.upper))?;
        Ok(LayerStack::new(lower, upper)?)
    }

    fn apply_masks(&self, flat: &mut LayerTree) {
        for mask in &self.masks {
            if mask.mode == MaskMode::EmptyBind && flat.get(&mask.path).is_some_and(Node::is_dir) {
                flat.insert(&mask.path, Node::dir());
            }
        }
    }

    /// The visible tree with masks applied.
    pub fn flatten(&self) -> Result<LayerTree, ViewError> {
        let mut flat = overlay::flatten(&self.layers(Content::Full)?);
        self.apply_masks(&mut flat);
        Ok(flat)
    }

    /// Copies the whole visible tree into the merged directory, replacing
    /// its previous contents, and returns the copied tree with empty file
    /// placeholders. Refuses trees with more than [`MATERIALIZE_LIMIT`]
    /// entries.
    pub fn materialize_all(&self) -> Result<LayerTree, ViewError> {
        let stack = self.layers(Content::Placeholder)?;
        let entries = stack.lower().node_count() + stack.upper().node_count();
        if entries > MATERIALIZE_LIMIT {
            return Err(ViewError::TooLarge(entries));
        }
        let mut flat = overlay::flatten(&stack);
        self.apply_masks(&mut flat);
        disk::remove_any(&self.merged).map_err(io_at(&self.merged))?;
        fs::create_dir_all(&self.merged).map_err(io_at(&self.merged))?;
        for path in flat.paths() {
            if path.is_root() {
                continue;
            }
            let dst = disk::host_path(&self.merged, &path);
            match flat.get(&path).expect("listed") {
                Node::Directory { .. } => fs::create_dir(&dst).map_err(io_at(&dst))?,
                Node::Symlink(target) => std::os::unix::fs::symlink(target, &dst).map_err(io_at(&dst))?,
                Node::File(_) => {
                    let origin = match stack.upper().get(&path) {
                        Some(Node::File(_)) => Origin::Upper,
                        _ => Origin::Lower,
                    };
                    let src = self.host_for(origin, &path);
                    fs::copy(&src, &dst).map_err(io_at(&src))?;
                }
                Node::Whiteout => {}
            }
        }
        Ok(flat)
    }

    /// Replays changes made directly inside the merged directory (after
    /// [`materialize_all`](Self::materialize_all)) into the upper layer.
    /// Returns the changed paths.
    pub fn sync_back(&self, baseline: &LayerTree) -> Result<Vec<NormPath>, ViewError> {
        let want = disk::load_tree_with(&self.merged, Role::Lower, Content::Placeholder).map_err(io_at(&self.merged))?;
        let mut changed = Vec::new();
        let mut removed: Vec<NormPath> = Vec::new();
        for path in baseline.paths() {
            if path.is_root() || removed.iter().any(|r| path.starts_with(r)) {
                continue;
            }
            let had = baseline.get(&path).expect("listed");
            let gone = match want.get(&path) {
                None => true,
                Some(w) => w.is_dir() != had.is_dir(),
            };
            if gone {
                self.mutate(&path, true, |s| s.remove(&path, true))?;
                removed.push(path.clone());
                changed.push(path);
            }
        }
        for path in want.paths() {
            if path.is_root() {
                continue;
            }
            let w = want.get(&path).expect("listed");
            let had = baseline
                .get(&path)
                .filter(|_| !removed.iter().any(|r| path.starts_with(r)));
            let merged_host = disk::host_path(&self.merged, &path);
            let same = match (had, w) {
                (Some(h), w) if h.is_dir() && w.is_dir() => true,
                (Some(Node::File(_)), Node::File(_)) => match self.lookup_at(&path)? {
                    Some(Entry { host: Some(src), .. }) => {
                        same_content(&src, &merged_host).map_err(io_at(&merged_host))?
                    }
                    _ => false,
                },
                (Some(h), w) => h == w,
                (None, _) => false,
            };
            if same {
                continue;
            }
            match w {
                Node::Directory { .. } => self.mutate(&path, false, |s| s.make_dir(&path))?,
                Node::File(_) => {
                    let host = disk::host_path(&self.upper, &path);
                    let mut dst = self.create_at(&path)?;
                    let mut src = File::open(&merged_host).map_err(io_at(&merged_host))?;
                    io::copy(&mut src, &mut dst).map_err(io_at(&host))?;
                    let perms = src.metadata().map_err(io_at(&merged_host))?.permissions();
                    dst.set_permissions(perms).map_err(io_at(&host))?;
                }
                Node::Symlink(target) => self.mutate(&path, false, |s| s.symlink(&path, target.clone()))?,
                Node::Whiteout => {}
            }
            changed.push(path);
        }
        Ok(changed)
    }
}

fn same_content(a: &Path, b: &Path) -> io::Result<bool> {
    if fs::metadata(a)?.len() != fs::metadata(b)?.len() {
        return Ok(false);
    }
    Ok(fs::read(a)? == fs::read(b)?)
}

/// Owned form of [`Resolution`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResolvedKind {
    FoundUpper(Node),
    FoundLower(Node),
    Hidden,
    Absent,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> NormPath {
        NormPath::parse(s).unwrap()
    }

    struct Fixture {
        _tmp: tempfile::TempDir,
        view: SandboxView,
    }

    fn fixture() -> Fixture {
        let tmp = tempfile::tempdir().unwrap();
        let lower = tmp.path().join("lower");
        fs::create_dir_all(lower.join("bin")).unwrap();
        fs::create_dir_all(lower.join("etc")).unwrap();
        fs::create_dir_all(lower.join("usr/lib")).unwrap();
        fs::write(lower.join("bin/python"), b"2.7").unwrap();
        fs::write(lower.join("etc/motd"), b"hello").unwrap();
        fs::write(lower.join("usr/lib/libc.so"), b"libc").unwrap();
        std::os::unix::fs::symlink("usr/lib", lower.join("lib")).unwrap();
        let view = SandboxView::new(lower, tmp.path().join("upper"), tmp.path().join("merged"));
        fs::create_dir_all(view.upper_dir()).unwrap();
        Fixture { _tmp: tmp, view }
    }

    #[test]
    fn reads_fall_through_to_lower() {
        let f = fixture();
        assert_eq!(f.view.read(&p("/bin/python")).unwrap(), b"2.7");
        assert_eq!(f.view.read(&p("/lib/libc.so")).unwrap(), b"libc");
    }

    #[test]
    fn writes_land_in_upper_only() {
        let f = fixture();
        f.view.write(&p("/bin/python"), b"3.5").unwrap();
        assert_eq!(f.view.read(&p("/bin/python")).unwrap(), b"3.5");
        assert_eq!(fs::read(f.view.upper_dir().join("bin/python")).unwrap(), b"3.5");
        assert_eq!(fs::read(f.view.lower_dir().join("bin/python")).unwrap(), b"2.7");
    }

    #[test]
    fn write_through_symlinked_dir_lands_at_target() {
        let f = fixture();
        f.view.write(&p("/lib/libmine.so"), b"mine").unwrap();
        assert!(f.view.upper_dir().join("usr/lib/libmine.so").is_file());
        assert_eq!(f.view.read(&p("/usr/lib/libmine.so")).unwrap(), b"mine");
    }

    #[test]
    fn remove_then_recreate() {
        let f = fixture();
        f.view.remove(&p("/etc/motd"), false).unwrap();
        assert!(f.view.upper_dir().join("etc/.wh.motd").exists());
        assert_eq!(f.view.resolve_kind(&p("/etc/motd")).unwrap(), ResolvedKind::Hidden);
        f.view.write(&p("/etc/motd"), b"new").unwrap();
        assert!(!f.view.upper_dir().join("etc/.wh.motd").exists());
        assert_eq!(f.view.read(&p("/etc/motd")).unwrap(), b"new");
    }

    #[test]
    fn recursive_remove_and_opaque_mkdir() {
        let f = fixture();
        assert!(matches!(
            f.view.remove(&p("/usr"), false),
            Err(ViewError::Overlay(OverlayError::DirectoryNotEmpty(_)))
        ));
        f.view.remove(&p("/usr"), true).unwrap();
        f.view.make_dir(&p("/usr")).unwrap();
        assert!(f.view.list(&p("/usr")).unwrap().is_empty());
        assert!(f.view.upper_dir().join("usr").join(OPAQUE_MARKER).exists());
    }

    #[test]
    fn list_merges_layers() {
        let f = fixture();
        f.view.write(&p("/etc/hosts"), b"h").unwrap();
        let names: Vec<_> = f.view.list(&p("/etc")).unwrap().into_iter().map(|e| (e.name, e.origin)).collect();
        assert_eq!(
            names,
            [("hosts".to_owned(), Origin::Upper), ("motd".to_owned(), Origin::Lower)]
        );
    }

    #[test]
    fn masks_and_read_only() {
        let f = fixture();
        let view = f.view.clone().with_masks(vec![
            MaskRule {
                path: p("/etc"),
                mode: MaskMode::EmptyBind,
            },
            MaskRule {
                path: p("/bin"),
                mode: MaskMode::ReadOnlyRemount,
            },
        ]);
        assert!(view.list(&p("/etc")).unwrap().is_empty());
        assert!(view.read(&p("/etc/motd")).is_err());
        assert!(matches!(view.write(&p("/etc/x"), b""), Err(ViewError::Masked(_))));
        assert_eq!(view.read(&p("/bin/python")).unwrap(), b"2.7");
        assert!(matches!(view.write(&p("/bin/python"), b""), Err(ViewError::ReadOnly(_))));
        let ro = f.view.clone().with_upper_mode(AccessMode::ReadOnly);
        assert!(matches!(ro.write(&p("/tmpfile"), b""), Err(ViewError::ReadOnly(_))));
    }

    #[test]
    fn reserved_names_rejected() {
        let f = fixture();
        assert!(matches!(
            f.view.write(&p("/etc/.wh.motd"), b""),
            Err(ViewError::ReservedName(_))
        ));
    }

    #[test]
    fn rewrite_copies_up_then_edits_in_place() {
        let f = fixture();
        f.view.rewrite(&p("/etc/motd"), |b| b.iter_mut().for_each(|x| *x = !*x)).unwrap();
        let flipped: Vec<u8> = b"hello".iter().map(|x| !x).collect();
        assert_eq!(f.view.read(&p("/etc/motd")).unwrap(), flipped);
        f.view.rewrite(&p("/etc/motd"), |b| b.iter_mut().for_each(|x| *x = !*x)).unwrap();
        assert_eq!(f.view.read(&p("/etc/motd")).unwrap(), b"hello");
        assert_eq!(fs::read(f.view.lower_dir().join("etc/motd")).unwrap(), b"hello");
    }

    #[test]
    fn symlink_loop_detected() {
        let f = fixture();
        f.view.symlink(&p("/loop"), "/loop").unwrap();
        assert!(matches!(f.view.read(&p("/loop")), Err(ViewError::SymlinkLoop(_))));
    }

    #[test]
    fn materialize_and_sync_back() {
        let f = fixture();
        let base = f.view.materialize_all().unwrap();
        let merged = f.view.merged_dir();
        assert_eq!(fs::read(merged.join("bin/python")).unwrap(), b"2.7");
        fs::write(merged.join("bin/python"), b"3.5").unwrap();
        fs::remove_file(merged.join("etc/motd")).unwrap();
        fs::create_dir(merged.join("opt")).unwrap();
        fs::write(merged.join("opt/tool"), b"t").unwrap();
        let changed: Vec<String> = f.view.sync_back(&base).unwrap().into_iter().map(String::from).collect();
        assert_eq!(changed, ["/etc/motd", "/bin/python", "/opt", "/opt/tool"]);
        assert_eq!(f.view.read(&p("/bin/python")).unwrap(), b"3.5");
        assert_eq!(f.view.resolve_kind(&p("/etc/motd")).unwrap(), ResolvedKind::Hidden);
        assert_eq!(f.view.read(&p("/opt/tool")).unwrap(), b"t");
        assert_eq!(fs::read(f.view.lower_dir().join("bin/python")).unwrap(), b"2.7");
    }
}
