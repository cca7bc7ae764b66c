//! Deterministic setup plans for user containers.
//!
//! A plan is an ordered list of steps; building one has no side effects.
//! The executor walks the steps in order. Plans serialize to a canonical
//! line format, `<ordinal> <KIND> <args...>`, one step per line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caps::{self, CapabilitySet};
use crate::path::{escape_field, NormPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ContainerKind {
    User,
    RootSandbox,
}

impl ContainerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ContainerKind::User => "User",
            ContainerKind::RootSandbox => "RootSandbox",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessMode {
    ReadOnly,
    ReadWrite,
}

impl AccessMode {
    fn token(self) -> &'static str {
        match self {
            AccessMode::ReadOnly => "ro",
            AccessMode::ReadWrite => "rw",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MaskMode {
    /// Cover the path with an empty directory.
    EmptyBind,
    /// Keep the contents visible but read-only.
    ReadOnlyRemount,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceRule {
    pub host_path: PathBuf,
    pub mode: AccessMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRule {
    pub path: NormPath,
    pub mode: MaskMode,
}

/// Pseudo-devices exposed to every container.
pub const DEFAULT_DEVICES: &[&str] = &[
    "/dev/null",
    "/dev/zero",
    "/dev/full",
    "/dev/random",
    "/dev/urandom",
    "/dev/tty",
];

pub const ROOT_SANDBOX_USER: &str = "root-sandbox";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerConfig {
    pub user: String,
    pub kind: ContainerKind,
    pub hostname: String,
    pub device_allow: Vec<DeviceRule>,
    pub mask_paths: Vec<MaskRule>,
    pub host_root: PathBuf,
    pub upper_dir: PathBuf,
    /// Read-only upper layers are used for compute-node attachments.
    pub upper_mode: AccessMode,
    pub work_dir: PathBuf,
    pub merged_dir: PathBuf,
    pub entry_command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> PlanError {
    PlanError::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

/// Directory triple for a container's layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDirs {
    pub upper: PathBuf,
    pub work: PathBuf,
    pub merged: PathBuf,
}

impl LayerDirs {
    /// `<base>/upper`, `<base>/work`, `<base>/merged`.
    pub fn under(base: &Path) -> Self {
        LayerDirs {
            upper: base.join("upper"),
            work: base.join("work"),
            merged: base.join("merged"),
        }
    }
}

impl ContainerConfig {
    /// A user container with the default hostname, device set and entry
    /// shell. `state_root` is masked inside the container.
    pub fn for_user(user: &str, host_root: impl Into<PathBuf>, dirs: LayerDirs, state_root: &Path) -> Self {
        let mask_paths = state_root
            .to_str()
            .and_then(|s| NormPath::parse(s).ok())
            .map(|path| MaskRule {
                path,
                mode: MaskMode::EmptyBind,
            })
            .into_iter()
            .collect();
        ContainerConfig {
            user: user.to_owned(),
            kind: ContainerKind::User,
            hostname: format!("cue-{user}"),
            device_allow: DEFAULT_DEVICES
                .iter()
                .map(|d| DeviceRule {
                    host_path: PathBuf::from(d),
                    mode: AccessMode::ReadWrite,
                })
                .collect(),
            mask_paths,
            host_root: host_root.into(),
            upper_dir: dirs.upper,
            upper_mode: AccessMode::ReadWrite,
            work_dir: dirs.work,
            merged_dir: dirs.merged,
            entry_command: vec!["/bin/sh".to_owned()],
        }
    }

    pub fn dirs(&self) -> LayerDirs {
        LayerDirs {
            upper: self.upper_dir.clone(),
            work: self.work_dir.clone(),
            merged: self.merged_dir.clone(),
        }
    }

    pub fn policy(&self) -> CapabilitySet {
        match self.kind {
            ContainerKind::User => caps::user_policy(),
            ContainerKind::RootSandbox => caps::root_sandbox_policy(),
        }
    }

    /// Checks every invariant, naming the first offending field.
    pub fn validate(&self) -> Result<(), PlanError> {
        if !is_valid_user(&self.user) {
            return Err(invalid("user", format!("{:?} is not a valid user name", self.user)));
        }
        if !is_dns_label(&self.hostname) {
            return Err(invalid("hostname", format!("{:?} is not a valid DNS label", self.hostname)));
        }
        for rule in &self.device_allow {
            if !rule.host_path.is_absolute() || rule.host_path.to_str().is_none() {
                return Err(invalid("device_allow", format!("{}", rule.host_path.display())));
            }
        }
        let host = [("host_root", &self.host_root)];
        let dirs = [
            ("upper_dir", &self.upper_dir),
            ("work_dir", &self.work_dir),
            ("merged_dir", &self.merged_dir),
        ];
        for (field, dir) in host.iter().chain(dirs.iter()) {
            if !dir.is_absolute() {
                return Err(invalid(field, "must be absolute"));
            }
            if dir.to_str().is_none() {
                return Err(invalid(field, "must be valid UTF-8"));
            }
        }
        for (i, (fa, a)) in dirs.iter().enumerate() {
            for (_, b) in &dirs[i + 1..] {
                if a.starts_with(b) || b.starts_with(a) {
                    return Err(invalid(fa, format!("{} overlaps {}", a.display(), b.display())));
                }
            }
        }
        if self.entry_command.is_empty() {
            return Err(invalid("entry_command", "empty command"));
        }
        Ok(())
    }
}

fn is_valid_user(user: &str) -> bool {
    let bytes = user.as_bytes();
    !bytes.is_empty()
        && bytes.len() <= 32
        && (bytes[0].is_ascii_lowercase() || bytes[0] == b'_')
        && bytes
            .iter()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || *b == b'_' || *b == b'-')
}

/// 1 to 63 ASCII letters, digits or hyphens, not starting or ending with a
/// hyphen.
pub fn is_dns_label(name: &str) -> bool {
    let b = name.as_bytes();
    !b.is_empty()
        && b.len() <= 63
        && b.iter().all(|c| c.is_ascii_alphanumeric() || *c == b'-')
        && b[0] != b'-'
        && b[b.len() - 1] != b'-'
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Namespace {
    Mount,
    Pid,
    Uts,
}

impl Namespace {
    fn token(self) -> &'static str {
        match self {
            Namespace::Mount => "mount",
            Namespace::Pid => "pid",
            Namespace::Uts => "uts",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BindSource {
    /// A path on the host.
    Host(PathBuf),
    /// A fresh empty directory.
    Empty,
    /// The target itself, remounted.
    InPlace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepKind {
    MakeDirs(Vec<PathBuf>),
    NewNamespace(Namespace),
    OverlayMount {
        lower: PathBuf,
        upper: PathBuf,
        work: PathBuf,
        merged: PathBuf,
        upper_mode: AccessMode,
    },
    SetHostname(String),
    /// `target` is a path inside the container.
    BindMount {
        source: BindSource,
        target: NormPath,
        mode: AccessMode,
    },
    RemountProc,
    DropCapabilities(CapabilitySet),
    ChangeRoot(PathBuf),
    Exec(Vec<String>),
}

impl StepKind {
    pub fn token(&self) -> &'static str {
        match self {
            StepKind::MakeDirs(_) => "MAKE_DIRS",
            StepKind::NewNamespace(_) => "NEW_NAMESPACE",
            StepKind::OverlayMount { .. } => "OVERLAY_MOUNT",
            StepKind::SetHostname(_) => "SET_HOSTNAME",
            StepKind::BindMount { .. } => "BIND_MOUNT",
            StepKind::RemountProc => "REMOUNT_PROC",
            StepKind::DropCapabilities(_) => "DROP_CAPABILITIES",
            StepKind::ChangeRoot(_) => "CHANGE_ROOT",
            StepKind::Exec(_) => "EXEC",
        }
    }

    fn args(&self) -> Vec<String> {
        let path = |p: &Path| escape_field(&p.to_string_lossy());
        match self {
            StepKind::MakeDirs(dirs) => dirs.iter().map(|d| path(d)).collect(),
            StepKind::NewNamespace(ns) => vec![ns.token().to_owned()],
            StepKind::OverlayMount {
                lower,
                upper,
                work,
                merged,
                upper_mode,
            } => vec![
                path(lower),
                path(upper),
                path(work),
                path(merged),
                upper_mode.token().to_owned(),
            ],
            StepKind::SetHostname(name) => vec![escape_field(name)],
            StepKind::BindMount { source, target, mode } => {
                let src = match source {
                    BindSource::Host(p) => path(p),
                    BindSource::Empty => "<empty>".to_owned(),
                    BindSource::InPlace => "<self>".to_owned(),
                };
                vec![src, escape_field(target.as_str()), mode.token().to_owned()]
            }
            StepKind::RemountProc => vec!["/proc".to_owned()],
            StepKind::DropCapabilities(set) => {
                let keep: Vec<&str> = set.allowed().map(|c| c.as_str()).collect();
                vec![format!("keep={}", keep.join(","))]
            }
            StepKind::ChangeRoot(p) => vec![path(p)],
            StepKind::Exec(argv) => argv.iter().map(|a| escape_field(a)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetupStep {
    pub ordinal: usize,
    pub kind: StepKind,
}

impl SetupStep {
    /// The canonical one-line form, without a trailing newline.
    pub fn to_line(&self) -> String {
        let mut line = format!("{} {}", self.ordinal, self.kind.token());
        for arg in self.kind.args() {
            line.push(' ');
            line.push_str(&arg);
        }
        line
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetupPlan {
    steps: Vec<SetupStep>,
    config: ContainerConfig,
}

impl SetupPlan {
    pub fn steps(&self) -> &[SetupStep] {
        &self.steps
    }

    pub fn config(&self) -> &ContainerConfig {
        &self.config
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            let _ = writeln!(out, "{}", step.to_line());
        }
        out
    }

    /// A copy of this plan running `argv` instead of the configured entry
    /// command.
    pub fn with_entry(&self, argv: Vec<String>) -> SetupPlan {
        let mut plan = self.clone();
        if let Some(last) = plan.steps.last_mut() {
            last.kind = StepKind::Exec(argv.clone());
        }
        plan.config.entry_command = argv;
        plan
    }
}

/// Builds the plan that creates and enters a user container.
pub fn plan_create(config: &ContainerConfig) -> Result<SetupPlan, PlanError> {
    config.validate()?;
    let mut kinds = vec![
        StepKind::MakeDirs(vec![
            config.upper_dir.clone(),
            config.work_dir.clone(),
            config.merged_dir.clone(),
        ]),
        StepKind::NewNamespace(Namespace::Mount),
        StepKind::NewNamespace(Namespace::Pid),
        StepKind::NewNamespace(Namespace::Uts),
        StepKind::OverlayMount {
            lower: config.host_root.clone(),
            upper: config.upper_dir.clone(),
            work: config.work_dir.clone(),
            merged: config.merged_dir.clone(),
            upper_mode: config.upper_mode,
        },
        StepKind::SetHostname(config.hostname.clone()),
    ];
    for dev in &config.device_allow {
        let target = NormPath::parse(dev.host_path.to_str().unwrap_or_default())
            .map_err(|e| invalid("device_allow", e.to_string()))?;
        kinds.push(StepKind::BindMount {
            source: BindSource::Host(dev.host_path.clone()),
            target,
            mode: dev.mode,
        });
    }
    for mask in &config.mask_paths {
        let source = match mask.mode {
            MaskMode::EmptyBind => BindSource::Empty,
            MaskMode::ReadOnlyRemount => BindSource::InPlace,
        };
        kinds.push(StepKind::BindMount {
            source,
            target: mask.path.clone(),
            mode: AccessMode::ReadOnly,
        });
    }
    kinds.push(StepKind::RemountProc);
    kinds.push(StepKind::DropCapabilities(config.policy()));
    kinds.push(StepKind::ChangeRoot(config.merged_dir.clone()));
    kinds.push(StepKind::Exec(config.entry_command.clone()));
    Ok(SetupPlan {
        steps: kinds
            .into_iter()
            .enumerate()
            .map(|(ordinal, kind)| SetupStep { ordinal, kind })
            .collect(),
        config: config.clone(),
    })
}

/// Config for the administrator's update sandbox over `host_root`, with its
/// layers under `scratch_dir`.
pub fn sandbox_update_config(host_root: &Path, scratch_dir: &Path) -> ContainerConfig {
    let mut config = ContainerConfig::for_user(
        ROOT_SANDBOX_USER,
        host_root,
        LayerDirs::under(scratch_dir),
        Path::new(""),
    );
    config.kind = ContainerKind::RootSandbox;
    config.mask_paths.clear();
    config
}

/// Builds the plan for an update sandbox. `scratch_dir` must be empty or
/// absent.
pub fn plan_sandbox_update(host_root: &Path, scratch_dir: &Path) -> Result<SetupPlan, PlanError> {
    if let Ok(mut entries) = std::fs::read_dir(scratch_dir) {
        if entries.next().is_some() {
            return Err(invalid("scratch_dir", format!("{} is not empty", scratch_dir.display())));
        }
    }
    plan_create(&sandbox_update_config(host_root, scratch_dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn alice() -> ContainerConfig {
        ContainerConfig::for_user(
            "alice",
            "/",
            LayerDirs::under(Path::new("/var/lib/cue/layers/alice")),
            Path::new("/var/lib/cue"),
        )
    }

    #[test]
    fn default_hostname() {
        assert_eq!(alice().hostname, "cue-alice");
    }

    #[test]
    fn bad_hostnames_rejected() {
        for h in ["node!", "bad name", "", "-x", "x-", &"a".repeat(64)] {
            let mut c = alice();
            c.hostname = h.to_owned();
            assert!(
                matches!(plan_create(&c), Err(PlanError::InvalidConfig { field: "hostname", .. })),
                "{h:?}"
            );
        }
        let mut c = alice();
        c.hostname = "a".repeat(63);
        assert!(plan_create(&c).is_ok());
    }

    #[test]
    fn overlapping_dirs_rejected() {
        let mut c = alice();
        c.work_dir = c.upper_dir.join("work");
        assert!(matches!(
            plan_create(&c),
            Err(PlanError::InvalidConfig { field: "upper_dir", .. })
        ));
        let mut c = alice();
        c.merged_dir = c.work_dir.clone();
        assert!(plan_create(&c).is_err());
    }

    #[test]
    fn bad_user_rejected() {
        let mut c = alice();
        c.user = "Alice".into();
        assert!(matches!(plan_create(&c), Err(PlanError::InvalidConfig { field: "user", .. })));
    }

    #[test]
    fn devices_and_masks_in_config_order() {
        let mut c = alice();
        c.device_allow = vec![
            DeviceRule {
                host_path: "/dev/nvidia0".into(),
                mode: AccessMode::ReadWrite,
            },
            DeviceRule {
                host_path: "/dev/fuse".into(),
                mode: AccessMode::ReadOnly,
            },
        ];
        c.mask_paths = vec![MaskRule {
            path: NormPath::parse("/etc/shadow").unwrap(),
            mode: MaskMode::ReadOnlyRemount,
        }];
        let plan = plan_create(&c).unwrap();
        let binds: Vec<String> = plan
            .steps()
            .iter()
            .filter(|s| s.kind.token() == "BIND_MOUNT")
            .map(|s| s.kind.args().join(" "))
            .collect();
        assert_eq!(
            binds,
            [
                "/dev/nvidia0 /dev/nvidia0 rw",
                "/dev/fuse /dev/fuse ro",
                "<self> /etc/shadow ro"
            ]
        );
    }

    #[test]
    fn sandbox_plan_uses_root_sandbox_identity() {
        let tmp = std::env::temp_dir().join("cue-plan-test-absent");
        let plan = plan_sandbox_update(Path::new("/"), &tmp).unwrap();
        let text = plan.to_text();
        assert!(text.contains("SET_HOSTNAME cue-root-sandbox"));
        assert_eq!(plan.config().kind, ContainerKind::RootSandbox);
        assert!(plan.config().mask_paths.is_empty());
    }

    #[test]
    fn with_entry_replaces_exec() {
        let plan = plan_create(&alice()).unwrap().with_entry(vec!["/bin/hostname".into()]);
        assert_eq!(plan.steps().last().unwrap().to_line(), "16 EXEC /bin/hostname");
    }
}
