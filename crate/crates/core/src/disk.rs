//! Mapping between layer trees and real directories.
//!
//! Upper directories written by this crate mark whiteouts with an empty
//! `.wh.<name>` file and opaque directories with a `.wh..wh..opq` file.
//! Upper directories written by the kernel union filesystem use a 0/0
//! character device and the `trusted.overlay.opaque` attribute instead;
//! both forms are recognized when reading.

use std::ffi::CString;
use std::fs;
use std::io;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::{FileTypeExt, MetadataExt};
use std::path::{Path, PathBuf};

use crate::overlay::{LayerTree, Node};
use crate::path::NormPath;

pub const WHITEOUT_PREFIX: &str = ".wh.";
pub const OPAQUE_MARKER: &str = ".wh..wh..opq";

/// How marker files are interpreted while reading a directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Lower,
    Upper,
}

/// Whether file contents are read or replaced by empty placeholders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Content {
    Full,
    Placeholder,
}

pub fn host_path(root: &Path, path: &NormPath) -> PathBuf {
    if path.is_root() {
        root.to_owned()
    } else {
        root.join(path.relative())
    }
}

pub fn whiteout_marker(root: &Path, path: &NormPath) -> Option<PathBuf> {
    let name = path.file_name()?;
    let parent = path.parent()?;
    Some(host_path(root, &parent).join(format!("{WHITEOUT_PREFIX}{name}")))
}

fn kernel_opaque(dir: &Path) -> bool {
    let Ok(cpath) = CString::new(dir.as_os_str().as_bytes()) else {
        return false;
    };
    let name = c"trusted.overlay.opaque";
    let mut buf = [0u8; 4];
    // SAFETY: both strings are NUL-terminated and buf outlives the call.
    let n = unsafe {
        libc::lgetxattr(
            cpath.as_ptr(),
            name.as_ptr(),
            buf.as_mut_ptr().cast(),
            buf.len(),
        )
    };
    n == 1 && buf[0] == b'y'
}

pub fn is_opaque_dir(dir: &Path) -> bool {
    dir.join(OPAQUE_MARKER).symlink_metadata().is_ok() || kernel_opaque(dir)
}

/// Reads one directory entry. Returns `None` for sockets, fifos and device
/// nodes other than kernel whiteouts.
pub fn read_node(host: &Path, role: Role, content: Content) -> io::Result<Option<Node>> {
    let meta = host.symlink_metadata()?;
    let ft = meta.file_type();
    Ok(if ft.is_dir() {
        Some(Node::Directory {
            opaque: role == Role::Upper && is_opaque_dir(host),
            children: Default::default(),
        })
    } else if ft.is_file() {
        Some(Node::File(match content {
            Content::Full => fs::read(host)?,
            Content::Placeholder => Vec::new(),
        }))
    } else if ft.is_symlink() {
        let target = fs::read_link(host)?;
        Some(Node::Symlink(target.to_string_lossy().into_owned()))
    } else if role == Role::Upper && ft.is_char_device() && meta.rdev() == 0 {
        Some(Node::Whiteout)
    } else {
        None
    })
}

/// Reads the immediate children of `dir`.
pub fn read_children(dir: &Path, role: Role, content: Content) -> io::Result<Vec<(String, Node)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("non UTF-8 name under {}", dir.display()),
            ));
        };
        if role == Role::Upper {
            if name == OPAQUE_MARKER {
                continue;
            }
            if let Some(hidden) = name.strip_prefix(WHITEOUT_PREFIX) {
                out.push((hidden.to_owned(), Node::Whiteout));
                continue;
            }
        }
        if let Some(node) = read_node(&entry.path(), role, content)? {
            out.push((name.to_owned(), node));
        }
    }
    Ok(out)
}

/// Loads a whole directory tree. A missing directory loads as an empty
/// tree.
pub fn load_tree(dir: &Path, role: Role) -> io::Result<LayerTree> {
    load_tree_with(dir, role, Content::Full)
}

pub fn load_tree_with(dir: &Path, role: Role, content: Content) -> io::Result<LayerTree> {
    let mut tree = LayerTree::new();
    if !dir.exists() {
        return Ok(tree);
    }
    if role == Role::Upper && is_opaque_dir(dir) {
        tree = LayerTree::from_root(Node::opaque_dir()).expect("directory");
    }
    fill(tree.root_mut(), dir, role, content)?;
    Ok(tree)
}

fn fill(node: &mut Node, dir: &Path, role: Role, content: Content) -> io::Result<()> {
    let children = node.children_mut().expect("directory");
    for (name, mut child) in read_children(dir, role, content)? {
        if child.is_dir() {
            fill(&mut child, &dir.join(&name), role, content)?;
        }
        // A real entry next to its own whiteout marker: the entry wins.
        if child.is_whiteout() && children.contains_key(&name) {
            continue;
        }
        children.insert(name, child);
    }
    Ok(())
}

/// Writes `tree` under `dir`, which must be empty or absent. Whiteouts and
/// opaque flags are written as marker files, so only upper trees should
/// carry them.
pub fn write_tree(dir: &Path, tree: &LayerTree) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_node(dir, tree.root(), true)
}

fn write_node(host: &Path, node: &Node, exists: bool) -> io::Result<()> {
    match node {
        Node::Directory { opaque, children } => {
            if !exists {
                fs::create_dir(host)?;
            }
            if *opaque {
                fs::write(host.join(OPAQUE_MARKER), b"")?;
            }
            for (name, child) in children {
                if child.is_whiteout() {
                    fs::write(host.join(format!("{WHITEOUT_PREFIX}{name}")), b"")?;
                } else {
                    write_node(&host.join(name), child, false)?;
                }
            }
            Ok(())
        }
        Node::File(content) => fs::write(host, content),
        Node::Symlink(target) => std::os::unix::fs::symlink(target, host),
        Node::Whiteout => Ok(()),
    }
}

/// Removes whatever is at `host`, recursively for directories.
pub fn remove_any(host: &Path) -> io::Result<()> {
    match host.symlink_metadata() {
        Ok(m) if m.is_dir() => fs::remove_dir_all(host),
        Ok(_) => fs::remove_file(host),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}

/// Apparent disk usage of a tree in bytes (allocated blocks), including
/// directories themselves.
pub fn disk_usage(path: &Path) -> io::Result<u64> {
    let meta = match path.symlink_metadata() {
        Ok(m) => m,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(e),
    };
    let mut total = meta.blocks() * 512;
    if meta.is_dir() {
        for entry in fs::read_dir(path)? {
            total += disk_usage(&entry?.path())?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> NormPath {
        NormPath::parse(s).unwrap()
    }

    #[test]
    fn upper_roundtrip_with_markers() {
        let tmp = tempfile::tempdir().unwrap();
        let mut t = LayerTree::new();
        t.insert_with_parents(&p("/etc/motd"), Node::Whiteout);
        t.insert_with_parents(&p("/bin/python"), Node::file("3.5"));
        t.insert_with_parents(&p("/bin/py"), Node::Symlink("python".into()));
        t.insert(&p("/opt"), Node::opaque_dir());
        t.insert(&p("/opt/x"), Node::file(""));
        write_tree(tmp.path(), &t).unwrap();
        assert!(tmp.path().join("etc/.wh.motd").exists());
        assert!(tmp.path().join("opt").join(OPAQUE_MARKER).exists());
        assert_eq!(load_tree(tmp.path(), Role::Upper).unwrap(), t);
    }

    #[test]
    fn lower_role_keeps_marker_names() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join(".wh.x"), b"").unwrap();
        let t = load_tree(tmp.path(), Role::Lower).unwrap();
        assert_eq!(t.get(&p("/.wh.x")), Some(&Node::file("")));
    }

    #[test]
    fn missing_dir_is_empty_tree() {
        let t = load_tree(Path::new("/nonexistent/cue/dir"), Role::Upper).unwrap();
        assert!(t.is_empty());
    }
}
