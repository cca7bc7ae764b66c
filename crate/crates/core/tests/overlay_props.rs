//! Properties of the layered view, checked over random stacks.

mod common;

use common::{abs, rel_path, stack, tree_map, visible_map};
use cue_core::overlay::{flatten, merge_down, LayerStack, Node, Resolution};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Write(Vec<String>, Vec<u8>),
    Remove(Vec<String>, bool),
    MakeDir(Vec<String>),
    Symlink(Vec<String>, String),
    List(Vec<String>),
    Resolve(Vec<String>),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (rel_path(), prop::collection::vec(any::<u8>(), 0..6)).prop_map(|(p, c)| Op::Write(p, c)),
        (rel_path(), any::<bool>()).prop_map(|(p, r)| Op::Remove(p, r)),
        rel_path().prop_map(Op::MakeDir),
        (rel_path(), "[a-z]{1,4}").prop_map(|(p, t)| Op::Symlink(p, t)),
        rel_path().prop_map(Op::List),
        rel_path().prop_map(Op::Resolve),
    ]
}

fn apply(s: &mut LayerStack, op: &Op) {
    let _ = match op {
        Op::Write(p, c) => s.write_file(&abs(p), c.clone()),
        Op::Remove(p, r) => s.remove(&abs(p), *r),
        Op::MakeDir(p) => s.make_dir(&abs(p)),
        Op::Symlink(p, t) => s.symlink(&abs(p), t.clone()),
        Op::List(p) => s.list_dir(&abs(p)).map(|_| ()),
        Op::Resolve(p) => {
            s.resolve(&abs(p));
            Ok(())
        }
    };
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn flatten_matches_path_oracle(s in stack()) {
        prop_assert_eq!(tree_map(&flatten(&s)), visible_map(&s));
    }

    #[test]
    fn merge_down_preserves_view(s in stack()) {
        let (merged, _) = merge_down(&s).unwrap();
        let single = LayerStack::over(merged).unwrap();
        prop_assert_eq!(flatten(&single), flatten(&s));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn resolve_agrees_with_oracle(s in stack(), probes in prop::collection::vec(rel_path(), 1..20)) {
        let visible = visible_map(&s);
        for comps in probes {
            let p = abs(&comps);
            let shown = visible.get(&p.to_string());
            match s.resolve(&p) {
                Resolution::FoundUpper(n) | Resolution::FoundLower(n) => {
                    prop_assert!(shown.is_some(), "{} resolved but is not visible", p);
                    prop_assert_eq!(n.is_dir(), shown == Some(&common::Shown::Dir));
                }
                Resolution::Hidden | Resolution::Absent => prop_assert!(shown.is_none(), "{} hidden but visible", p),
            }
        }
    }

    #[test]
    fn upper_entries_mask_lower(s in stack()) {
        for p in s.upper().paths() {
            if p.is_root() {
                continue;
            }
            if !s.upper().get(&p).unwrap().is_whiteout() {
                prop_assert!(matches!(s.resolve(&p), Resolution::FoundUpper(_)), "{}", p);
            }
        }
    }

    #[test]
    fn operations_never_touch_lower(s in stack(), ops in prop::collection::vec(op(), 1..30)) {
        let mut s = s;
        let before = s.lower().clone();
        for o in &ops {
            apply(&mut s, o);
            prop_assert!(!s.lower().has_markers());
        }
        prop_assert_eq!(s.lower(), &before);
        let (merged, _) = merge_down(&s).unwrap();
        prop_assert!(!merged.has_markers());
    }

    #[test]
    fn merge_down_is_idempotent(s in stack()) {
        let (once, _) = merge_down(&s).unwrap();
        let (twice, journal) = merge_down(&LayerStack::over(once.clone()).unwrap()).unwrap();
        prop_assert!(journal.entries.is_empty());
        prop_assert_eq!(twice, once);
    }

    #[test]
    fn write_after_remove_is_visible(s in stack(), comps in rel_path(), content in prop::collection::vec(any::<u8>(), 0..6)) {
        let mut s = s;
        let p = abs(&comps);
        let _ = s.remove(&p, true);
        if s.write_file(&p, content.clone()).is_ok() {
            prop_assert_eq!(s.resolve(&p), Resolution::FoundUpper(&Node::file(content)));
        }
    }
}
