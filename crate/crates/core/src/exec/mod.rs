//! Running setup plans.
//!
//! Two backends share one report format. The kernel backend creates real
//! namespaces and mounts and needs host root. The sandbox backend builds the
//! same container out of plain directories: namespace and capability steps
//! are recorded as simulated, and file access goes through a
//! [`SandboxView`], which applies the overlay model path by path.
//!
//! Either way a transcript is written to `<work_dir>/transcript`: the plan's
//! canonical lines, each followed by `=> <STATUS> <elapsed>us`.

pub mod kernel;
pub mod sandbox;
pub mod view;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::path::escape_field;
use crate::plan::SetupPlan;
use crate::state::{LockGuard, Registry, StateError};

pub use view::{Entry, ResolvedKind, SandboxView, ViewError};

pub const TRANSCRIPT_FILE: &str = "transcript";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Kernel,
    Sandbox,
}

impl Backend {
    pub fn as_str(self) -> &'static str {
        match self {
            Backend::Kernel => "kernel",
            Backend::Sandbox => "sandbox",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kernel" => Ok(Backend::Kernel),
            "sandbox" => Ok(Backend::Sandbox),
            _ => Err(format!("unknown backend {s:?} (expected kernel or sandbox)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepStatus {
    Ok,
    SimulatedOk,
    Failed(String),
}

impl StepStatus {
    pub fn is_failed(&self) -> bool {
        matches!(self, StepStatus::Failed(_))
    }
}

impl fmt::Display for StepStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepStatus::Ok => f.write_str("OK"),
            StepStatus::SimulatedOk => f.write_str("SIMULATED_OK"),
            StepStatus::Failed(reason) => write!(f, "FAILED {}", escape_field(reason)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub ordinal: usize,
    pub status: StepStatus,
    pub elapsed_us: u64,
}

/// Identifies a running container.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ContainerHandle {
    Sandbox { merged: PathBuf },
    /// `init` is the entry process (pid 1 inside the container); `child`
    /// is the intermediate process that owns the mounts.
    Kernel { init: i32, child: i32 },
}

impl fmt::Display for ContainerHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContainerHandle::Sandbox { merged } => write!(f, "sandbox:{}", merged.display()),
            ContainerHandle::Kernel { init, .. } => write!(f, "kernel:{init}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionReport {
    pub backend: Backend,
    /// One outcome per executed step, in ordinal order. Execution stops at
    /// the first failure.
    pub steps: Vec<StepOutcome>,
    pub handle: Option<ContainerHandle>,
    pub total_elapsed_us: u64,
    /// Ordinals undone after a failure, in the order they were undone.
    pub unwound: Vec<usize>,
}

impl ExecutionReport {
    pub fn failed_step(&self) -> Option<&StepOutcome> {
        self.steps.iter().find(|s| s.status.is_failed())
    }

    /// The plan text annotated with per-step status.
    pub fn transcript(&self, plan: &SetupPlan, header: &[String]) -> String {
        let mut out = String::new();
        for line in header {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
        for step in plan.steps() {
            out.push_str(&step.to_line());
            match self.steps.iter().find(|o| o.ordinal == step.ordinal) {
                Some(o) => out.push_str(&format!(" => {} {}us\n", o.status, o.elapsed_us)),
                None => out.push_str(" => NOT_RUN\n"),
            }
        }
        for ordinal in &self.unwound {
            out.push_str(&format!("UNWIND {ordinal} {}\n", plan.steps()[*ordinal].kind.token()));
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("the kernel backend needs host root privileges: {0}")]
    PrivilegeRequired(String),
    #[error("step {ordinal} failed: {reason}")]
    StepFailed {
        ordinal: usize,
        reason: String,
        report: Box<ExecutionReport>,
    },
    #[error("upper directory {0} is in use by another container")]
    RegistryConflict(PathBuf),
    #[error("no such container: {0}")]
    NotFound(String),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExecError + '_ {
    move |source| ExecError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Identity used for the entry process. There is no user namespace, so
/// in-container root is host root restricted by the capability policy.
pub const IDENTITY_NOTE: &str = "identity uid=0 gid=0 (host root, no user namespace, capabilities per policy)";

/// Runs plans and tracks the containers it started.
#[derive(Debug, Default)]
pub struct Executor {
    registry: Option<Registry>,
    fail_at: Option<usize>,
    live: Mutex<HashMap<ContainerHandle, Option<LockGuard>>>,
}

impl Executor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Uses the registry's per-upper locks to reject two containers over
    /// one upper directory.
    pub fn with_registry(registry: Registry) -> Self {
        Executor {
            registry: Some(registry),
            ..Self::default()
        }
    }

    /// Makes step `ordinal` fail, for exercising unwinding.
    pub fn with_injected_failure(mut self, ordinal: usize) -> Self {
        self.fail_at = Some(ordinal);
        self
    }

    fn lock_upper(&self, plan: &SetupPlan) -> Result<Option<LockGuard>, ExecError> {
        match &self.registry {
            None => Ok(None),
            Some(reg) => match reg.lock_upper(&plan.config().upper_dir) {
                Ok(g) => Ok(Some(g)),
                Err(StateError::WouldBlock(_)) => Err(ExecError::RegistryConflict(plan.config().upper_dir.clone())),
                Err(e) => Err(e.into()),
            },
        }
    }

    pub fn execute(&self, plan: &SetupPlan, backend: Backend) -> Result<ExecutionReport, ExecError> {
        let guard = self.lock_upper(plan)?;
        let report = match backend {
            Backend::Sandbox => sandbox::execute(plan, self.fail_at)?,
            Backend::Kernel => kernel::execute(plan, self.fail_at)?,
        };
        let handle = report.handle.clone().expect("successful execute has a handle");
        self.live.lock().unwrap().insert(handle, guard);
        Ok(report)
    }

    /// Stops a container. Kernel containers are killed and their mounts
    /// released; sandbox containers lose their merged directory while the
    /// upper directory is kept.
    pub fn teardown(&self, handle: &ContainerHandle) -> Result<(), ExecError> {
        let tracked = self.live.lock().unwrap().remove(handle);
        match handle {
            ContainerHandle::Sandbox { merged } => sandbox::teardown(merged),
            ContainerHandle::Kernel { .. } => {
                if tracked.is_none() {
                    return Err(ExecError::NotFound(handle.to_string()));
                }
                kernel::teardown(handle)
            }
        }
    }

    /// Waits for a kernel container's entry process and returns its exit
    /// code. Sandbox containers have no process and return 0.
    pub fn wait(&self, handle: &ContainerHandle) -> Result<i32, ExecError> {
        match handle {
            ContainerHandle::Sandbox { .. } => Ok(0),
            ContainerHandle::Kernel { .. } => {
                let tracked = self.live.lock().unwrap().remove(handle);
                if tracked.is_none() {
                    return Err(ExecError::NotFound(handle.to_string()));
                }
                kernel::wait(handle)
            }
        }
    }

    /// Runs `argv` in a container built from `plan` and returns the exit
    /// code. The container is torn down afterwards; file changes persist
    /// in the upper directory.
    pub fn run(&self, plan: &SetupPlan, backend: Backend, argv: Vec<String>) -> Result<i32, ExecError> {
        let plan = plan.with_entry(argv);
        match backend {
            Backend::Kernel => {
                let report = self.execute(&plan, backend)?;
                self.wait(report.handle.as_ref().expect("handle"))
            }
            Backend::Sandbox => {
                let report = self.execute(&plan, backend)?;
                let handle = report.handle.expect("handle");
                let code = sandbox::run_entry(plan.config());
                let torn = self.teardown(&handle);
                let code = code?;
                torn?;
                Ok(code)
            }
        }
    }
}

pub(crate) fn write_transcript(plan: &SetupPlan, report: &ExecutionReport, header: &[String]) -> Result<(), ExecError> {
    let work = &plan.config().work_dir;
    if !work.is_dir() {
        return Ok(());
    }
    let path = work.join(TRANSCRIPT_FILE);
    fs::write(&path, report.transcript(plan, header)).map_err(io_err(&path))
}

pub(crate) fn micros(d: std::time::Duration) -> u64 {
    d.as_micros().min(u64::MAX as u128) as u64
}

/// Sanitized environment for entry processes.
pub fn entry_env() -> Vec<(String, String)> {
    let mut env = vec![
        (
            "PATH".to_owned(),
            "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin".to_owned(),
        ),
        ("HOME".to_owned(), "/root".to_owned()),
        ("CUE_INSIDE".to_owned(), "1".to_owned()),
    ];
    if let Ok(term) = std::env::var("TERM") {
        env.push(("TERM".to_owned(), term));
    }
    env
}

/// True when `a` and `b` name the same directory.
pub(crate) fn same_dir(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}
