use std::collections::BTreeMap;

use crate::overlay::node::{LayerTree, Node};
use crate::overlay::stack::LayerStack;

/// Collapses a stack into a single marker-free tree holding exactly the
/// visible entries.
///
/// This walks both trees recursively and shares no code with
/// [`LayerStack::resolve`], so the two can be checked against each other.
pub fn flatten(stack: &LayerStack) -> LayerTree {
    let root = merge(Some(stack.upper().root()), Some(stack.lower().root()))
        .expect("root directory is always visible");
    LayerTree::from_root(root).expect("flattened root is a directory")
}

fn merge(upper: Option<&Node>, lower: Option<&Node>) -> Option<Node> {
    match upper {
        Some(Node::Whiteout) => None,
        Some(Node::File(c)) => Some(Node::File(c.clone())),
        Some(Node::Symlink(t)) => Some(Node::Symlink(t.clone())),
        Some(Node::Directory { opaque, children }) => {
            let lower_children = match lower {
                Some(Node::Directory { children, .. }) if !opaque => Some(children),
                _ => None,
            };
            let mut out = BTreeMap::new();
            if let Some(lc) = lower_children {
                for (name, child) in lc {
                    if !children.contains_key(name) {
                        out.insert(name.clone(), strip(child));
                    }
                }
            }
            for (name, child) in children {
                let below = lower_children.and_then(|lc| lc.get(name));
                if let Some(n) = merge(Some(child), below) {
                    out.insert(name.clone(), n);
                }
            }
            Some(Node::Directory {
                opaque: false,
                children: out,
            })
        }
        None => lower.map(strip),
    }
}

fn strip(node: &Node) -> Node {
    match node {
        Node::Directory { children, .. } => Node::Directory {
            opaque: false,
            children: children
                .iter()
                .filter(|(_, c)| !c.is_whiteout())
                .map(|(n, c)| (n.clone(), strip(c)))
                .collect(),
        },
        other => other.clone(),
    }
}
