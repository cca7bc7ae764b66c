//! Shared upper layers across login and compute nodes.
//!
//! Each user's upper and work directories live in shared storage:
//!
//! ```text
//! <shared_root>/users/<user>/upper
//! <shared_root>/users/<user>/work
//! ```
//!
//! Logging in on a login node stacks the shared upper read-write over that
//! node's root. Deploying a job attaches the same upper read-only over each
//! allocated compute node's root, so every node sees the user's
//! customizations without copying them. At desk scale a node is a directory
//! standing in for its root filesystem, and a simulated cluster is described
//! by a `nodes.json` manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disk;
use crate::exec::{Backend, ContainerHandle, ExecError, Executor, SandboxView};
use crate::lifecycle::{self, LifecycleError};
use crate::plan::{is_dns_label, plan_create, AccessMode, ContainerConfig, ContainerKind, LayerDirs};
use crate::state::{ContainerRecord, Registry, StateError};

pub const SHARED_ROOT_ENV: &str = "CUE_SHARED_ROOT";
pub const MANIFEST_FILE: &str = "nodes.json";

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("shared storage {0} is unavailable")]
    SharedStorageUnavailable(PathBuf),
    #[error("{user} has no upper layer in shared storage; log in first")]
    NoUpper { user: String },
    #[error("node manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("{user} is not attached on node {node_id}")]
    NotFound { user: String, node_id: String },
    #[error("{user} already has a container with a different upper layer")]
    Conflict { user: String },
    #[error(transparent)]
    Lifecycle(#[from] LifecycleError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedLayout {
    root: PathBuf,
}

impl SharedLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        SharedLayout { root: root.into() }
    }

    /// The layout at `$CUE_SHARED_ROOT`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var_os(SHARED_ROOT_ENV).map(|r| SharedLayout::new(PathBuf::from(r)))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn user_dir(&self, user: &str) -> PathBuf {
        self.root.join("users").join(user)
    }

    pub fn upper(&self, user: &str) -> PathBuf {
        self.user_dir(user).join("upper")
    }

    pub fn work(&self, user: &str) -> PathBuf {
        self.user_dir(user).join("work")
    }

    fn check(&self) -> Result<(), ClusterError> {
        if self.root.is_dir() {
            Ok(())
        } else {
            Err(ClusterError::SharedStorageUnavailable(self.root.clone()))
        }
    }

    /// Creates the user's shared directories if missing.
    pub fn ensure_user(&self, user: &str) -> Result<(), ClusterError> {
        self.check()?;
        for dir in [self.upper(user), self.work(user)] {
            fs::create_dir_all(&dir).map_err(|source| ClusterError::Io { path: dir, source })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeHandle {
    pub node_id: String,
    pub node_root: PathBuf,
}

impl NodeHandle {
    pub fn new(node_id: impl Into<String>, node_root: impl Into<PathBuf>) -> Self {
        NodeHandle {
            node_id: node_id.into(),
            node_root: node_root.into(),
        }
    }

    fn hostname(&self, user: &str) -> String {
        if is_dns_label(&self.node_id) {
            self.node_id.clone()
        } else {
            format!("cue-{user}")
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<Vec<NodeHandle>, ClusterError> {
    let err = |reason: String| ClusterError::Manifest {
        path: path.to_owned(),
        reason,
    };
    let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))
}

pub fn save_manifest(path: &Path, nodes: &[NodeHandle]) -> Result<(), ClusterError> {
    let mut bytes = serde_json::to_vec_pretty(nodes).expect("manifest serializes");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|source| ClusterError::Io {
        path: path.to_owned(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason")]
pub enum NodeStatus {
    Attached,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeResult {
    pub node_id: String,
    #[serde(flatten)]
    pub status: NodeStatus,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DeploymentResult {
    /// One entry per requested node, in request order.
    pub nodes: Vec<NodeResult>,
}

impl DeploymentResult {
    pub fn attached(&self) -> usize {
        self.nodes.iter().filter(|n| n.status == NodeStatus::Attached).count()
    }
}

/// Shell commands run around each node attachment, with `CUE_USER`,
/// `CUE_NODE_ID` and `CUE_NODE_MERGED` set.
#[derive(Debug, Clone, Default)]
pub struct JobHooks {
    pub pre_job: Option<String>,
    pub post_job: Option<String>,
}

fn run_hook(cmd: &str, user: &str, node: &NodeHandle, merged: &Path) -> Result<(), String> {
    let status = Command::new("/bin/sh")
        .arg("-c")
        .arg(cmd)
        .env("CUE_USER", user)
        .env("CUE_NODE_ID", &node.node_id)
        .env("CUE_NODE_MERGED", merged)
        .status()
        .map_err(|e| format!("hook: {e}"))?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("hook exited with {status}"))
    }
}

/// Node-local directories for one user on one node.
pub fn node_dirs(state_root: &Path, node_id: &str, user: &str) -> (PathBuf, PathBuf) {
    let base = state_root.join("nodes").join(node_id).join(user);
    (base.join("work"), base.join("merged"))
}

/// Attaches the user's shared upper on the login node, registering a user
/// container on first login and reusing it afterwards.
pub fn attach_login(
    layout: &SharedLayout,
    registry: &Registry,
    user: &str,
    login_node: &NodeHandle,
    backend: Backend,
) -> Result<ContainerRecord, ClusterError> {
    layout.ensure_user(user)?;
    let upper = layout.upper(user);
    if let Some(existing) = registry.lookup(user, ContainerKind::User)? {
        if existing.upper_dir == upper && existing.is_live() {
            return Ok(existing);
        }
        if existing.is_live() {
            return Err(ClusterError::Conflict { user: user.to_owned() });
        }
    }
    let dirs = LayerDirs {
        upper,
        work: layout.work(user),
        merged: registry.root().join("layers").join(user).join("merged"),
    };
    let mut config = ContainerConfig::for_user(user, &login_node.node_root, dirs, registry.root());
    config.hostname = login_node.hostname(user);
    Ok(lifecycle::create(registry, &config, backend)?.record)
}

fn attach_node(
    layout: &SharedLayout,
    state_root: &Path,
    user: &str,
    node: &NodeHandle,
    hooks: &JobHooks,
) -> Result<(), String> {
    if !node.node_root.is_dir() {
        return Err(format!("node root {} is missing", node.node_root.display()));
    }
    let (work, merged) = node_dirs(state_root, &node.node_id, user);
    let mut config = ContainerConfig::for_user(
        user,
        &node.node_root,
        LayerDirs {
            upper: layout.upper(user),
            work,
            merged,
        },
        state_root,
    );
    config.hostname = node.hostname(user);
    config.upper_mode = AccessMode::ReadOnly;
    let plan = plan_create(&config).map_err(|e| e.to_string())?;
    let report = Executor::new()
        .execute(&plan, Backend::Sandbox)
        .map_err(|e| e.to_string())?;
    lifecycle::save_config(&config).map_err(|e| e.to_string())?;
    if let Some(cmd) = &hooks.pre_job {
        if let Err(e) = run_hook(cmd, user, node, &config.merged_dir) {
            let _ = Executor::new().teardown(report.handle.as_ref().expect("handle"));
            return Err(e);
        }
    }
    Ok(())
}

/// Attaches the user's shared upper, read-only, on every node concurrently.
/// A node that fails gets a `Failed` entry; the others proceed.
pub fn deploy_job(
    layout: &SharedLayout,
    state_root: &Path,
    user: &str,
    nodes: &[NodeHandle],
    hooks: &JobHooks,
) -> Result<DeploymentResult, ClusterError> {
    layout.check()?;
    if !layout.upper(user).is_dir() {
        return Err(ClusterError::NoUpper { user: user.to_owned() });
    }
    let nodes = std::thread::scope(|scope| {
        let workers: Vec<_> = nodes
            .iter()
            .map(|node| {
                scope.spawn(move || {
                    let t = Instant::now();
                    let status = match attach_node(layout, state_root, user, node, hooks) {
                        Ok(()) => NodeStatus::Attached,
                        Err(reason) => NodeStatus::Failed(reason),
                    };
                    NodeResult {
                        node_id: node.node_id.clone(),
                        status,
                        elapsed_us: t.elapsed().as_micros() as u64,
                    }
                })
            })
            .collect();
        workers
            .into_iter()
            .zip(nodes)
            .map(|(w, node)| {
                w.join().unwrap_or_else(|_| NodeResult {
                    node_id: node.node_id.clone(),
                    status: NodeStatus::Failed("attachment panicked".into()),
                    elapsed_us: 0,
                })
            })
            .collect()
    });
    Ok(DeploymentResult { nodes })
}

/// Tears down the user's attachments. The shared upper is not touched.
pub fn release_job(
    state_root: &Path,
    user: &str,
    nodes: &[NodeHandle],
    hooks: &JobHooks,
) -> Vec<(String, Result<(), ClusterError>)> {
    nodes
        .iter()
        .map(|node| {
            let (work, merged) = node_dirs(state_root, &node.node_id, user);
            let handle = ContainerHandle::Sandbox { merged: merged.clone() };
            let result = match Executor::new().teardown(&handle) {
                Ok(()) => {
                    if let Some(cmd) = &hooks.post_job {
                        let _ = run_hook(cmd, user, node, &merged);
                    }
                    disk::remove_any(&work).map_err(|source| ClusterError::Io { path: work, source })
                }
                Err(ExecError::NotFound(_)) => Err(ClusterError::NotFound {
                    user: user.to_owned(),
                    node_id: node.node_id.clone(),
                }),
                Err(e) => Err(LifecycleError::from(e).into()),
            };
            (node.node_id.clone(), result)
        })
        .collect()
}

/// The merged view of an attached node.
pub fn node_view(state_root: &Path, user: &str, node_id: &str) -> Result<SandboxView, ClusterError> {
    let (work, _) = node_dirs(state_root, node_id, user);
    if !work.is_dir() {
        return Err(ClusterError::NotFound {
            user: user.to_owned(),
            node_id: node_id.to_owned(),
        });
    }
    Ok(SandboxView::from_config(&lifecycle::load_config(&work)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::NormPath;

    fn p(s: &str) -> NormPath {
        NormPath::parse(s).unwrap()
    }

    struct Cluster {
        _tmp: tempfile::TempDir,
        layout: SharedLayout,
        registry: Registry,
        login: NodeHandle,
        nodes: Vec<NodeHandle>,
    }

    fn cluster(n: usize) -> Cluster {
        let tmp = tempfile::tempdir().unwrap();
        let mk_root = |name: &str| {
            let root = tmp.path().join(name);
            fs::create_dir_all(root.join("lib")).unwrap();
            fs::write(root.join("lib/libc.so"), b"libc").unwrap();
            root
        };
        let login = NodeHandle::new("login0", mk_root("login0"));
        let nodes = (0..n)
            .map(|i| NodeHandle::new(format!("cn{i}"), mk_root(&format!("cn{i}"))))
            .collect();
        let shared = tmp.path().join("shared");
        fs::create_dir_all(&shared).unwrap();
        let registry = Registry::open(tmp.path().join("state")).unwrap();
        Cluster {
            layout: SharedLayout::new(shared),
            registry,
            login,
            nodes,
            _tmp: tmp,
        }
    }

    #[test]
    fn login_persists_and_users_are_disjoint() {
        let c = cluster(0);
        let rec = attach_login(&c.layout, &c.registry, "alice", &c.login, Backend::Sandbox).unwrap();
        let view = SandboxView::from_config(&lifecycle::load_config(&rec.work_dir).unwrap());
        assert_eq!(view.read(&p("/lib/libc.so")).unwrap(), b"libc");
        view.write(&p("/lib/libmine.so"), b"mine").unwrap();

        let again = attach_login(&c.layout, &c.registry, "alice", &c.login, Backend::Sandbox).unwrap();
        assert_eq!(again.upper_dir, rec.upper_dir);
        let view = SandboxView::from_config(&lifecycle::load_config(&again.work_dir).unwrap());
        assert!(matches!(
            view.resolve_kind(&p("/lib/libmine.so")).unwrap(),
            crate::exec::ResolvedKind::FoundUpper(_)
        ));

        let bob = attach_login(&c.layout, &c.registry, "bob", &c.login, Backend::Sandbox).unwrap();
        let bob_view = SandboxView::from_config(&lifecycle::load_config(&bob.work_dir).unwrap());
        assert!(bob_view.read(&p("/lib/libmine.so")).is_err());
    }

    #[test]
    fn deploy_release_cycle() {
        let mut c = cluster(4);
        let rec = attach_login(&c.layout, &c.registry, "alice", &c.login, Backend::Sandbox).unwrap();
        SandboxView::from_config(&lifecycle::load_config(&rec.work_dir).unwrap())
            .write(&p("/lib/libmine.so"), b"mine")
            .unwrap();
        c.nodes.push(NodeHandle::new("ghost", c.layout.root().join("nope")));
        let state = c.registry.root();
        let result = deploy_job(&c.layout, state, "alice", &c.nodes, &JobHooks::default()).unwrap();
        let ids: Vec<&str> = result.nodes.iter().map(|n| n.node_id.as_str()).collect();
        assert_eq!(ids, ["cn0", "cn1", "cn2", "cn3", "ghost"]);
        assert_eq!(result.attached(), 4);
        assert!(matches!(result.nodes[4].status, NodeStatus::Failed(_)));
        for node in &c.nodes[..4] {
            let view = node_view(state, "alice", &node.node_id).unwrap();
            assert_eq!(view.read(&p("/lib/libmine.so")).unwrap(), b"mine");
            assert!(view.write(&p("/lib/x"), b"").is_err());
        }
        let released = release_job(state, "alice", &c.nodes[..4], &JobHooks::default());
        assert!(released.iter().all(|(_, r)| r.is_ok()));
        assert!(c.layout.upper("alice").join("lib/libmine.so").is_file());
        let again = release_job(state, "alice", &c.nodes[..4], &JobHooks::default());
        assert!(again.iter().all(|(_, r)| matches!(r, Err(ClusterError::NotFound { .. }))));
    }

    #[test]
    fn deploy_without_login_fails() {
        let c = cluster(1);
        assert!(matches!(
            deploy_job(&c.layout, c.registry.root(), "alice", &c.nodes, &JobHooks::default()),
            Err(ClusterError::NoUpper { .. })
        ));
        let empty = deploy_job(&c.layout, c.registry.root(), "alice", &[], &JobHooks::default());
        assert!(matches!(empty, Err(ClusterError::NoUpper { .. })));
    }

    #[test]
    fn manifest_roundtrip() {
        let c = cluster(2);
        let path = c.layout.root().join(MANIFEST_FILE);
        save_manifest(&path, &c.nodes).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), c.nodes);
        assert!(load_manifest(&c.layout.root().join("missing.json")).is_err());
    }

    #[test]
    fn result_json_shape() {
        let r = DeploymentResult {
            nodes: vec![
                NodeResult {
                    node_id: "cn0".into(),
                    status: NodeStatus::Attached,
                    elapsed_us: 5,
                },
                NodeResult {
                    node_id: "cn1".into(),
                    status: NodeStatus::Failed("gone".into()),
                    elapsed_us: 1,
                },
            ],
        };
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(
            json,
            r#"{"nodes":[{"node_id":"cn0","status":"Attached","elapsed_us":5},{"node_id":"cn1","status":"Failed","reason":"gone","elapsed_us":1}]}"#
        );
        assert_eq!(serde_json::from_str::<DeploymentResult>(&json).unwrap(), r);
    }
}
