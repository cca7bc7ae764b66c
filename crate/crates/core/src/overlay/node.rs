use std::collections::BTreeMap;

use crate::path::NormPath;

/// One entry of a layer.
///
/// Children are kept in a `BTreeMap`, so iteration is in byte order of the
/// names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Node {
    File(Vec<u8>),
    Directory {
        /// Upper-layer marker: the same-path lower directory does not show
        /// through.
        opaque: bool,
        children: BTreeMap<String, Node>,
    },
    /// Upper-layer marker hiding the same-path lower entry.
    Whiteout,
    Symlink(String),
}

impl Node {
    pub fn dir() -> Node {
        Node::Directory {
            opaque: false,
            children: BTreeMap::new(),
        }
    }

    pub fn opaque_dir() -> Node {
        Node::Directory {
            opaque: true,
            children: BTreeMap::new(),
        }
    }

    pub fn file(content: impl Into<Vec<u8>>) -> Node {
        Node::File(content.into())
    }

    pub fn is_dir(&self) -> bool {
        matches!(self, Node::Directory { .. })
    }

    pub fn is_whiteout(&self) -> bool {
        matches!(self, Node::Whiteout)
    }

    pub fn is_opaque(&self) -> bool {
        matches!(self, Node::Directory { opaque: true, .. })
    }

    pub fn children(&self) -> Option<&BTreeMap<String, Node>> {
        match self {
            Node::Directory { children, .. } => Some(children),
            _ => None,
        }
    }

    pub fn children_mut(&mut self) -> Option<&mut BTreeMap<String, Node>> {
        match self {
            Node::Directory { children, .. } => Some(children),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Node::File(_) => "file",
            Node::Directory { .. } => "directory",
            Node::Whiteout => "whiteout",
            Node::Symlink(_) => "symlink",
        }
    }

    /// The same node without children, used when comparing single entries.
    pub fn shallow(&self) -> Node {
        match self {
            Node::Directory { opaque, .. } => Node::Directory {
                opaque: *opaque,
                children: BTreeMap::new(),
            },
            other => other.clone(),
        }
    }

    /// Number of nodes in this subtree, including `self`.
    pub fn count(&self) -> usize {
        1 + self
            .children()
            .map(|c| c.values().map(Node::count).sum())
            .unwrap_or(0)
    }

    fn has_markers(&self) -> bool {
        match self {
            Node::Whiteout => true,
            Node::Directory { opaque, children } => {
                *opaque || children.values().any(Node::has_markers)
            }
            _ => false,
        }
    }
}

/// A single layer: a directory tree addressed by [`NormPath`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerTree {
    root: Node,
}

impl Default for LayerTree {
    fn default() -> Self {
        LayerTree::new()
    }
}

impl LayerTree {
    pub fn new() -> Self {
        LayerTree { root: Node::dir() }
    }

    /// Wraps `root`, which must be a directory.
    pub fn from_root(root: Node) -> Option<Self> {
        root.is_dir().then_some(LayerTree { root })
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn root_mut(&mut self) -> &mut Node {
        &mut self.root
    }

    pub fn into_root(self) -> Node {
        self.root
    }

    pub fn is_empty(&self) -> bool {
        self.root.children().is_some_and(BTreeMap::is_empty) && !self.root.is_opaque()
    }

    pub fn get(&self, path: &NormPath) -> Option<&Node> {
        let mut cur = &self.root;
        for comp in path.components() {
            cur = cur.children()?.get(comp)?;
        }
        Some(cur)
    }

    pub fn get_mut(&mut self, path: &NormPath) -> Option<&mut Node> {
        let mut cur = &mut self.root;
        for comp in path.components() {
            cur = cur.children_mut()?.get_mut(comp)?;
        }
        Some(cur)
    }

    pub fn contains(&self, path: &NormPath) -> bool {
        self.get(path).is_some()
    }

    /// Inserts `node` at `path`, replacing any previous subtree there. The
    /// parent must already be a directory. Inserting at the root replaces the
    /// whole tree when `node` is a directory.
    pub fn insert(&mut self, path: &NormPath, node: Node) -> bool {
        let Some(name) = path.file_name() else {
            if node.is_dir() {
                self.root = node;
                return true;
            }
            return false;
        };
        let parent = path.parent().expect("non-root path has a parent");
        match self.get_mut(&parent).and_then(Node::children_mut) {
            Some(children) => {
                children.insert(name.to_owned(), node);
                true
            }
            None => false,
        }
    }

    /// Inserts `node`, creating missing ancestors as plain directories.
    /// Non-directory ancestors are replaced.
    pub fn insert_with_parents(&mut self, path: &NormPath, node: Node) {
        let mut cur = &mut self.root;
        let comps: Vec<&str> = path.components().collect();
        if comps.is_empty() {
            if node.is_dir() {
                self.root = node;
            }
            return;
        }
        for comp in &comps[..comps.len() - 1] {
            let children = cur.children_mut().expect("ancestor is a directory");
            let entry = children.entry((*comp).to_owned()).or_insert_with(Node::dir);
            if !entry.is_dir() {
                *entry = Node::dir();
            }
            cur = entry;
        }
        cur.children_mut()
            .expect("parent is a directory")
            .insert(comps[comps.len() - 1].to_owned(), node);
    }

    pub fn remove(&mut self, path: &NormPath) -> Option<Node> {
        let name = path.file_name()?;
        let parent = path.parent()?;
        self.get_mut(&parent)?.children_mut()?.remove(name)
    }

    /// Every path in the tree (root included), in pre-order, which is also
    /// byte order.
    pub fn paths(&self) -> Vec<NormPath> {
        let mut out = Vec::new();
        walk(&self.root, NormPath::root(), &mut |p, _| out.push(p.clone()));
        out
    }

    /// Visits every node in pre-order.
    pub fn walk(&self, mut f: impl FnMut(&NormPath, &Node)) {
        walk(&self.root, NormPath::root(), &mut f);
    }

    pub fn node_count(&self) -> usize {
        self.root.count()
    }

    /// True if the tree holds a whiteout or an opaque directory anywhere.
    pub fn has_markers(&self) -> bool {
        self.root.has_markers()
    }
}

fn walk(node: &Node, path: NormPath, f: &mut dyn FnMut(&NormPath, &Node)) {
    f(&path, node);
    if let Some(children) = node.children() {
        for (name, child) in children {
            let child_path = path.join(name).expect("tree names are valid components");
            walk(child, child_path, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> NormPath {
        NormPath::parse(s).unwrap()
    }

    #[test]
    fn insert_get_remove() {
        let mut t = LayerTree::new();
        assert!(!t.insert(&p("/a/b"), Node::file("x")));
        t.insert_with_parents(&p("/a/b"), Node::file("x"));
        assert_eq!(t.get(&p("/a/b")), Some(&Node::file("x")));
        assert!(t.get(&p("/a")).unwrap().is_dir());
        assert_eq!(t.node_count(), 3);
        assert_eq!(t.remove(&p("/a/b")), Some(Node::file("x")));
        assert_eq!(t.get(&p("/a/b")), None);
    }

    #[test]
    fn paths_are_preorder_and_sorted() {
        let mut t = LayerTree::new();
        for s in ["/b/c", "/a", "/b/a"] {
            t.insert_with_parents(&p(s), Node::file(""));
        }
        let got: Vec<String> = t.paths().into_iter().map(String::from).collect();
        assert_eq!(got, ["/", "/a", "/b", "/b/a", "/b/c"]);
    }

    #[test]
    fn markers_detected() {
        let mut t = LayerTree::new();
        assert!(!t.has_markers());
        t.insert(&p("/x"), Node::Whiteout);
        assert!(t.has_markers());
        let mut t = LayerTree::new();
        t.insert(&p("/d"), Node::opaque_dir());
        assert!(t.has_markers());
    }
}
