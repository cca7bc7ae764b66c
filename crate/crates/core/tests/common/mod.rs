//! Random layer stacks for property tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use cue_core::overlay::{LayerStack, LayerTree, Node};
use cue_core::NormPath;
use proptest::prelude::*;

pub const MAX_NODES: usize = 200;

#[derive(Debug, Clone)]
pub enum Kind {
    File(Vec<u8>),
    Dir,
    Symlink(String),
    Whiteout,
    Opaque,
}

pub fn rel_path() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "bin", "lib"]), 1..=6)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

pub fn abs(comps: &[String]) -> NormPath {
    NormPath::parse(&format!("/{}", comps.join("/"))).unwrap()
}

fn content() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 0..8)
}

fn lower_kind() -> impl Strategy<Value = Kind> {
    prop_oneof![
        4 => content().prop_map(Kind::File),
        2 => Just(Kind::Dir),
        1 => "[a-z/.]{1,8}".prop_map(Kind::Symlink),
    ]
}

fn upper_kind() -> impl Strategy<Value = Kind> {
    prop_oneof![
        4 => content().prop_map(Kind::File),
        2 => Just(Kind::Dir),
        1 => "[a-z/.]{1,8}".prop_map(Kind::Symlink),
        3 => Just(Kind::Whiteout),
        2 => Just(Kind::Opaque),
    ]
}

fn node(kind: &Kind) -> Node {
    match kind {
        Kind::File(c) => Node::file(c.clone()),
        Kind::Dir => Node::dir(),
        Kind::Symlink(t) => Node::Symlink(t.clone()),
        Kind::Whiteout => Node::Whiteout,
        Kind::Opaque => Node::opaque_dir(),
    }
}

/// Builds both trees, dropping any insertion that would push the stack past
/// `MAX_NODES`.
pub fn build(lower: &[(Vec<String>, Kind)], upper: &[(Vec<String>, Kind)]) -> LayerStack {
    let mut lt = LayerTree::new();
    let mut ut = LayerTree::new();
    for (tree, entries) in [(&mut lt, lower), (&mut ut, upper)] {
        for (comps, kind) in entries {
            let before = tree.clone();
            tree.insert_with_parents(&abs(comps), node(kind));
            if tree.node_count() > MAX_NODES / 2 {
                *tree = before;
            }
        }
    }
    LayerStack::new(lt, ut).unwrap()
}

pub fn stack() -> impl Strategy<Value = LayerStack> {
    (
        prop::collection::vec((rel_path(), lower_kind()), 0..50),
        prop::collection::vec((rel_path(), upper_kind()), 0..50),
    )
        .prop_map(|(l, u)| build(&l, &u))
}

/// What a visible path shows, as computed by [`visible_map`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shown {
    Dir,
    File(Vec<u8>),
    Symlink(String),
}

fn shown(node: &Node) -> Option<Shown> {
    match node {
        Node::File(c) => Some(Shown::File(c.clone())),
        Node::Symlink(t) => Some(Shown::Symlink(t.clone())),
        Node::Directory { .. } => Some(Shown::Dir),
        Node::Whiteout => None,
    }
}

/// Visible entries by path, decided path by path: an upper entry shows
/// unless it is a whiteout; a lower entry shows when the upper has nothing
/// at that path and no upper ancestor is a whiteout, a non-directory or an
/// opaque directory.
pub fn visible_map(stack: &LayerStack) -> BTreeMap<String, Shown> {
    let mut candidates: Vec<NormPath> = stack.lower().paths();
    candidates.extend(stack.upper().paths());
    let mut out = BTreeMap::new();
    for p in candidates {
        if p.is_root() {
            out.insert(p.to_string(), Shown::Dir);
            continue;
        }
        if let Some(u) = stack.upper().get(&p) {
            if let Some(s) = shown(u) {
                out.insert(p.to_string(), s);
            }
            continue;
        }
        let Some(l) = stack.lower().get(&p) else { continue };
        let mut shadowed = false;
        let mut q = p.parent();
        while let Some(anc) = q {
            match stack.upper().get(&anc) {
                Some(Node::Directory { opaque: false, .. }) | None => {}
                Some(_) => shadowed = true,
            }
            q = anc.parent();
        }
        if !shadowed {
            out.insert(p.to_string(), shown(l).expect("lower holds no markers"));
        }
    }
    out
}

/// The same map read off a marker-free tree.
pub fn tree_map(tree: &LayerTree) -> BTreeMap<String, Shown> {
    let mut out = BTreeMap::new();
    tree.walk(|p, n| {
        out.insert(p.to_string(), shown(n).expect("no markers"));
    });
    out
}
