//! Normalized absolute paths inside a layered view.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed path {path:?}: {reason}")]
pub struct MalformedPath {
    pub path: String,
    pub reason: &'static str,
}

/// An absolute path with no `.`/`..` components, no empty components and no
/// trailing slash (except for the root itself).
///
/// Ordering is plain byte order of the string form, so sorted collections of
/// paths list parents before their children.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NormPath(String);

impl NormPath {
    pub fn root() -> Self {
        NormPath("/".to_owned())
    }

    pub fn parse(s: &str) -> Result<Self, MalformedPath> {
        let bad = |reason| MalformedPath {
            path: s.to_owned(),
            reason,
        };
        if !s.starts_with('/') {
            return Err(bad("not absolute"));
        }
        if s.contains('\0') {
            return Err(bad("contains NUL"));
        }
        if s == "/" {
            return Ok(Self::root());
        }
        if s.ends_with('/') {
            return Err(bad("trailing slash"));
        }
        for comp in s[1..].split('/') {
            match comp {
                "" => return Err(bad("empty component")),
                "." | ".." => return Err(bad("dot component")),
                _ => {}
            }
        }
        Ok(NormPath(s.to_owned()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0 == "/"
    }

    pub fn components(&self) -> impl Iterator<Item = &str> + '_ {
        self.0[1..].split('/').filter(|c| !c.is_empty())
    }

    pub fn depth(&self) -> usize {
        self.components().count()
    }

    pub fn file_name(&self) -> Option<&str> {
        if self.is_root() {
            None
        } else {
            self.0.rsplit('/').next()
        }
    }

    pub fn parent(&self) -> Option<NormPath> {
        if self.is_root() {
            return None;
        }
        let idx = self.0.rfind('/').unwrap_or(0);
        if idx == 0 {
            Some(Self::root())
        } else {
            Some(NormPath(self.0[..idx].to_owned()))
        }
    }

    /// Appends a single name. Fails if `name` is not a valid component.
    pub fn join(&self, name: &str) -> Result<NormPath, MalformedPath> {
        if !is_valid_name(name) {
            return Err(MalformedPath {
                path: format!("{}/{}", self.0.trim_end_matches('/'), name),
                reason: "invalid component",
            });
        }
        if self.is_root() {
            Ok(NormPath(format!("/{name}")))
        } else {
            Ok(NormPath(format!("{}/{name}", self.0)))
        }
    }

    /// Strict ancestors from the root down, excluding `self`.
    pub fn ancestors(&self) -> Vec<NormPath> {
        let mut out = Vec::new();
        let mut cur = self.parent();
        while let Some(p) = cur {
            cur = p.parent();
            out.push(p);
        }
        out.reverse();
        out
    }

    /// True if `self` equals `other` or lies underneath it.
    pub fn starts_with(&self, other: &NormPath) -> bool {
        if other.is_root() {
            return true;
        }
        self.0 == other.0
            || (self.0.starts_with(&other.0) && self.0.as_bytes().get(other.0.len()) == Some(&b'/'))
    }

    /// The path relative to the root, without the leading slash.
    pub fn relative(&self) -> &str {
        &self.0[1..]
    }
}

pub fn is_valid_name(name: &str) -> bool {
    !name.is_empty() && name != "." && name != ".." && !name.contains('/') && !name.contains('\0')
}

impl fmt::Display for NormPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for NormPath {
    type Err = MalformedPath;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NormPath::parse(s)
    }
}

impl TryFrom<String> for NormPath {
    type Error = MalformedPath;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        NormPath::parse(&s)
    }
}

impl From<NormPath> for String {
    fn from(p: NormPath) -> String {
        p.0
    }
}

/// Escapes a field for the space-separated line formats (plans, journals).
pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            's' => out.push(' '),
            't' => out.push('\t'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            _ => return None,
        }
    }
    Some(out)
}
