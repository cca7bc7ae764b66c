use std::collections::BTreeMap;

use crate::overlay::node::{LayerTree, Node};
use crate::overlay::OverlayError;
use crate::path::NormPath;

/// Where a visible entry comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    Upper,
    Lower,
}

/// Outcome of looking a path up through both layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution<'a> {
    FoundUpper(&'a Node),
    FoundLower(&'a Node),
    /// A lower entry exists but a whiteout or opaque directory in the upper
    /// layer masks it.
    Hidden,
    Absent,
}

impl<'a> Resolution<'a> {
    pub fn node(&self) -> Option<&'a Node> {
        match self {
            Resolution::FoundUpper(n) | Resolution::FoundLower(n) => Some(n),
            _ => None,
        }
    }

    pub fn is_visible(&self) -> bool {
        self.node().is_some()
    }

    pub fn origin(&self) -> Option<Origin> {
        match self {
            Resolution::FoundUpper(_) => Some(Origin::Upper),
            Resolution::FoundLower(_) => Some(Origin::Lower),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirEntry {
    pub name: String,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mask {
    None,
    /// Whiteout or opaque directory above.
    Marker,
    /// A non-directory upper entry above.
    Shadow,
}

impl Mask {
    fn from_upper(node: Option<&Node>) -> Mask {
        match node {
            Some(Node::Whiteout) | Some(Node::Directory { opaque: true, .. }) => Mask::Marker,
            Some(Node::File(_)) | Some(Node::Symlink(_)) => Mask::Shadow,
            _ => Mask::None,
        }
    }
}

struct Probe<'a> {
    upper: Option<&'a Node>,
    lower: Option<&'a Node>,
    /// Masking of `lower` inherited from strict ancestors.
    inherited: Mask,
}

/// The two-layer view: a read-only `lower` tree shared by everyone and a
/// private `upper` delta that receives every modification.
///
/// Resolution is computed on each call; nothing is cached, so replacing the
/// lower tree is visible on the next lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerStack {
    lower: LayerTree,
    upper: LayerTree,
}

impl LayerStack {
    pub fn new(lower: LayerTree, upper: LayerTree) -> Result<Self, OverlayError> {
        if lower.has_markers() {
            return Err(OverlayError::LowerHasMarkers);
        }
        Ok(LayerStack { lower, upper })
    }

    /// A stack with an empty upper layer.
    pub fn over(lower: LayerTree) -> Result<Self, OverlayError> {
        LayerStack::new(lower, LayerTree::new())
    }

    pub fn lower(&self) -> &LayerTree {
        &self.lower
    }

    pub fn upper(&self) -> &LayerTree {
        &self.upper
    }

    pub fn into_parts(self) -> (LayerTree, LayerTree) {
        (self.lower, self.upper)
    }

    /// Swaps in a new lower tree, as when the administrator updates the base
    /// environment underneath live views.
    pub fn replace_lower(&mut self, lower: LayerTree) -> Result<LayerTree, OverlayError> {
        if lower.has_markers() {
            return Err(OverlayError::LowerHasMarkers);
        }
        Ok(std::mem::replace(&mut self.lower, lower))
    }

    fn probe(&self, path: &NormPath) -> Probe<'_> {
        let mut up = Some(self.upper.root());
        let mut low = Some(self.lower.root());
        let mut inherited = Mask::None;
        for comp in path.components() {
            if inherited == Mask::None {
                inherited = Mask::from_upper(up);
            }
            up = up.and_then(Node::children).and_then(|c| c.get(comp));
            low = low.and_then(Node::children).and_then(|c| c.get(comp));
        }
        Probe {
            upper: up,
            lower: low,
            inherited,
        }
    }

    pub fn resolve(&self, path: &NormPath) -> Resolution<'_> {
        let probe = self.probe(path);
        match probe.upper {
            Some(Node::Whiteout) => {
                if probe.lower.is_some() && probe.inherited != Mask::Shadow {
                    Resolution::Hidden
                } else {
                    Resolution::Absent
                }
            }
            Some(node) => Resolution::FoundUpper(node),
            None => match (probe.lower, probe.inherited) {
                (None, _) => Resolution::Absent,
                (Some(node), Mask::None) => Resolution::FoundLower(node),
                (Some(_), Mask::Marker) => Resolution::Hidden,
                (Some(_), Mask::Shadow) => Resolution::Absent,
            },
        }
    }

    pub fn resolve_str(&self, path: &str) -> Result<Resolution<'_>, OverlayError> {
        let path = NormPath::parse(path)?;
        Ok(self.resolve(&path))
    }

    /// Merged listing of a directory, sorted by name.
    pub fn list_dir(&self, path: &NormPath) -> Result<Vec<DirEntry>, OverlayError> {
        match self.resolve(path) {
            Resolution::Absent => return Err(OverlayError::Absent(path.clone())),
            Resolution::Hidden => return Err(OverlayError::Hidden(path.clone())),
            Resolution::FoundUpper(n) | Resolution::FoundLower(n) if !n.is_dir() => {
                return Err(OverlayError::NotADirectory(path.clone()))
            }
            _ => {}
        }
        let probe = self.probe(path);
        let mut out: BTreeMap<&str, Origin> = BTreeMap::new();
        let lower_visible = probe.inherited == Mask::None
            && !matches!(probe.upper, Some(n) if !n.is_dir() || n.is_opaque());
        let upper_children = probe.upper.and_then(Node::children);
        if lower_visible {
            if let Some(children) = probe.lower.and_then(Node::children) {
                for name in children.keys() {
                    out.insert(name, Origin::Lower);
                }
            }
        }
        if let Some(children) = upper_children {
            for (name, child) in children {
                if child.is_whiteout() {
                    out.remove(name.as_str());
                } else {
                    out.insert(name, Origin::Upper);
                }
            }
        }
        Ok(out
            .into_iter()
            .map(|(name, origin)| DirEntry {
                name: name.to_owned(),
                origin,
            })
            .collect())
    }

    /// Checks that every ancestor of `path` resolves to a visible directory.
    fn check_parents(&self, path: &NormPath) -> Result<(), OverlayError> {
        if path.is_root() {
            return Err(OverlayError::RootPath);
        }
        for anc in path.ancestors() {
            match self.resolve(&anc) {
                Resolution::FoundUpper(n) | Resolution::FoundLower(n) => {
                    if !n.is_dir() {
                        return Err(OverlayError::NotADirectory(anc));
                    }
                }
                Resolution::Hidden | Resolution::Absent => {
                    return Err(OverlayError::AbsentParent(path.clone()))
                }
            }
        }
        Ok(())
    }

    /// Copies the ancestor directories of `path` into the upper layer.
    /// Shallow: siblings are not copied.
    fn copy_up_parents(&mut self, path: &NormPath) {
        for anc in path.ancestors().into_iter().skip(1) {
            match self.upper.get(&anc) {
                Some(n) if n.is_dir() => {}
                _ => {
                    self.upper.insert(&anc, Node::dir());
                }
            }
        }
    }

    fn put(&mut self, path: &NormPath, node: Node) -> Result<(), OverlayError> {
        self.check_parents(path)?;
        if let Some(existing) = self.resolve(path).node() {
            if existing.is_dir() {
                return Err(OverlayError::IsADirectory(path.clone()));
            }
        }
        self.copy_up_parents(path);
        self.upper.insert(path, node);
        Ok(())
    }

    /// Writes a regular file into the upper layer, copying up ancestors.
    pub fn write_file(&mut self, path: &NormPath, content: impl Into<Vec<u8>>) -> Result<(), OverlayError> {
        self.put(path, Node::File(content.into()))
    }

    pub fn symlink(&mut self, path: &NormPath, target: impl Into<String>) -> Result<(), OverlayError> {
        self.put(path, Node::Symlink(target.into()))
    }

    /// Creates a directory. A directory created over a whiteout is opaque, so
    /// the old lower contents stay hidden.
    pub fn make_dir(&mut self, path: &NormPath) -> Result<(), OverlayError> {
        self.check_parents(path)?;
        if self.resolve(path).is_visible() {
            return Err(OverlayError::AlreadyExists(path.clone()));
        }
        let node = if self.upper.get(path).is_some_and(Node::is_whiteout) {
            Node::opaque_dir()
        } else {
            Node::dir()
        };
        self.copy_up_parents(path);
        self.upper.insert(path, node);
        Ok(())
    }

    /// Removes a visible entry. A lower entry is masked with a whiteout; an
    /// entry that exists only in the upper layer is dropped outright.
    pub fn remove(&mut self, path: &NormPath, recursive: bool) -> Result<(), OverlayError> {
        if path.is_root() {
            return Err(OverlayError::RootPath);
        }
        let node = match self.resolve(path) {
            Resolution::FoundUpper(n) | Resolution::FoundLower(n) => n,
            Resolution::Hidden | Resolution::Absent => {
                return Err(OverlayError::Absent(path.clone()))
            }
        };
        if node.is_dir() && !recursive && !self.list_dir(path)?.is_empty() {
            return Err(OverlayError::DirectoryNotEmpty(path.clone()));
        }
        let probe = self.probe(path);
        let lower_shows = probe.lower.is_some() && probe.inherited == Mask::None;
        if lower_shows {
            self.copy_up_parents(path);
            self.upper.insert(path, Node::Whiteout);
        } else {
            self.upper.remove(path);
        }
        Ok(())
    }

    /// Every path that exists in either layer, sorted.
    pub fn all_paths(&self) -> Vec<NormPath> {
        let mut paths = self.lower.paths();
        paths.extend(self.upper.paths());
        paths.sort();
        paths.dedup();
        paths
    }
}
