//! The capability policy applied inside containers.
//!
//! Users act as root inside their container but only hold the capabilities
//! needed to customize files and manage their own processes. Anything not
//! listed is denied. The tables are compiled in and cannot be edited at run
//! time.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Decision {
    Allow,
    Deny,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Allow => "Allow",
            Decision::Deny => "Deny",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("invalid capability name {0:?}")]
    InvalidName(String),
    #[error("line {0}: malformed policy record")]
    Malformed(usize),
    #[error("policy dump lacks the DEFAULT Deny trailer")]
    MissingDefault,
    #[error("{0} is always denied")]
    MandatoryDeny(String),
}

/// A validated `CAP_[A-Z_]+` name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CapName(String);

impl CapName {
    pub fn new(name: &str) -> Result<Self, PolicyError> {
        let valid = name
            .strip_prefix("CAP_")
            .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_uppercase() || b == b'_'));
        if valid {
            Ok(CapName(name.to_owned()))
        } else {
            Err(PolicyError::InvalidName(name.to_owned()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CapName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

const USER_ALLOW: &[&str] = &[
    "CAP_DAC_OVERRIDE",
    "CAP_DAC_READ_SEARCH",
    "CAP_CHOWN",
    "CAP_FOWNER",
    "CAP_FSETID",
    "CAP_SETUID",
    "CAP_SETGID",
    "CAP_KILL",
];

/// Denials that hold in every container, including the administrator's
/// update sandbox.
pub const MANDATORY_DENY: &[&str] = &[
    "CAP_SYS_ADMIN",
    "CAP_SYS_MODULE",
    "CAP_SYS_BOOT",
    "CAP_MKNOD",
    "CAP_NET_ADMIN",
    "CAP_NET_RAW",
    "CAP_NET_BIND_SERVICE",
    "CAP_NET_BROADCAST",
];

/// Explicit decisions over capability names; unlisted names are denied.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapabilitySet {
    decisions: BTreeMap<CapName, Decision>,
}

impl CapabilitySet {
    fn from_tables(allow: &[&str], deny: &[&str]) -> Self {
        let mut decisions = BTreeMap::new();
        for name in allow {
            decisions.insert(CapName::new(name).expect("static name"), Decision::Allow);
        }
        for name in deny {
            decisions.insert(CapName::new(name).expect("static name"), Decision::Deny);
        }
        CapabilitySet { decisions }
    }

    pub fn default_decision(&self) -> Decision {
        Decision::Deny
    }

    pub fn evaluate(&self, name: &str) -> Decision {
        match CapName::new(name) {
            Ok(n) => self.decisions.get(&n).copied().unwrap_or(Decision::Deny),
            Err(_) => Decision::Deny,
        }
    }

    pub fn decisions(&self) -> impl Iterator<Item = (&CapName, Decision)> {
        self.decisions.iter().map(|(n, d)| (n, *d))
    }

    pub fn allowed(&self) -> impl Iterator<Item = &CapName> {
        self.decisions
            .iter()
            .filter(|(_, d)| **d == Decision::Allow)
            .map(|(n, _)| n)
    }

    /// `<CAP_NAME> <Allow|Deny>` per listed capability in name order, then
    /// `DEFAULT Deny`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (name, d) in &self.decisions {
            out.push_str(name.as_str());
            out.push(' ');
            out.push_str(d.as_str());
            out.push('\n');
        }
        out.push_str("DEFAULT Deny\n");
        out
    }
}

impl FromStr for CapabilitySet {
    type Err = PolicyError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut decisions = BTreeMap::new();
        let mut saw_default = false;
        for (idx, line) in text.lines().enumerate() {
            if saw_default {
                return Err(PolicyError::Malformed(idx + 1));
            }
            let (name, decision) = line.split_once(' ').ok_or(PolicyError::Malformed(idx + 1))?;
            let decision = match decision {
                "Allow" => Decision::Allow,
                "Deny" => Decision::Deny,
                _ => return Err(PolicyError::Malformed(idx + 1)),
            };
            if name == "DEFAULT" {
                if decision != Decision::Deny {
                    return Err(PolicyError::Malformed(idx + 1));
                }
                saw_default = true;
                continue;
            }
            if decision == Decision::Allow && MANDATORY_DENY.contains(&name) {
                return Err(PolicyError::MandatoryDeny(name.to_owned()));
            }
            decisions.insert(CapName::new(name)?, decision);
        }
        if !saw_default {
            return Err(PolicyError::MissingDefault);
        }
        Ok(CapabilitySet { decisions })
    }
}

/// Policy for ordinary user containers.
pub fn user_policy() -> CapabilitySet {
    CapabilitySet::from_tables(USER_ALLOW, MANDATORY_DENY)
}

/// Policy for the administrator's update sandbox. It grants the same file
/// and process privileges as [`user_policy`]; mount and the rest of the
/// mandatory denials still apply.
pub fn root_sandbox_policy() -> CapabilitySet {
    CapabilitySet::from_tables(USER_ALLOW, MANDATORY_DENY)
}
