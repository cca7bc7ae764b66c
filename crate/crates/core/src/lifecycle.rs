//! Creating, entering and destroying registered containers.
//!
//! The registry record holds the fixed set of fields listed in
//! [`ContainerRecord`]; the full configuration is kept next to the
//! transcript as `<work_dir>/container.json`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::disk;
use crate::exec::{Backend, ExecError, ExecutionReport, Executor};
use crate::plan::{plan_create, ContainerConfig, ContainerKind, PlanError};
use crate::state::{write_atomic, ContainerRecord, Registry, StateError, Status};

pub const CONFIG_FILE: &str = "container.json";

#[derive(Debug, Error)]
pub enum LifecycleError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("container config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

pub fn config_path(work_dir: &Path) -> PathBuf {
    work_dir.join(CONFIG_FILE)
}

pub fn save_config(config: &ContainerConfig) -> Result<(), LifecycleError> {
    let path = config_path(&config.work_dir);
    let mut bytes = serde_json::to_vec_pretty(config).expect("config serializes");
    bytes.push(b'\n');
    write_atomic(&path, &bytes).map_err(|source| LifecycleError::Io { path, source })
}

pub fn load_config(work_dir: &Path) -> Result<ContainerConfig, LifecycleError> {
    let path = config_path(work_dir);
    let bytes = fs::read(&path).map_err(|e| LifecycleError::Config {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| LifecycleError::Config {
        path,
        reason: e.to_string(),
    })
}

#[derive(Debug, Clone)]
pub struct Created {
    pub record: ContainerRecord,
    pub report: ExecutionReport,
}

/// Plans, executes and registers a container. The sandbox backend leaves no
/// materialization behind; the kernel backend runs `/bin/true` as the entry
/// command to check the plan and waits for it.
pub fn create(registry: &Registry, config: &ContainerConfig, backend: Backend) -> Result<Created, LifecycleError> {
    if let Some(existing) = registry.lookup(&config.user, config.kind)? {
        if existing.is_live() {
            return Err(StateError::Duplicate {
                user: config.user.clone(),
                kind: config.kind,
            }
            .into());
        }
    }
    let plan = plan_create(config)?;
    let exec = Executor::with_registry(registry.clone());
    let report = match backend {
        Backend::Sandbox => {
            let report = exec.execute(&plan, backend)?;
            exec.teardown(report.handle.as_ref().expect("handle"))?;
            report
        }
        Backend::Kernel => {
            let report = exec.execute(&plan.with_entry(vec!["/bin/true".into()]), backend)?;
            exec.wait(report.handle.as_ref().expect("handle"))?;
            report
        }
    };
    save_config(config)?;
    let record = ContainerRecord::from_config(config);
    registry.register(&record)?;
    Ok(Created { record, report })
}

fn not_found(user: &str, kind: ContainerKind) -> LifecycleError {
    StateError::NotFound {
        user: user.to_owned(),
        kind,
    }
    .into()
}

/// Runs `argv` (or the configured entry command) in the user's container
/// and returns its exit code.
pub fn enter(
    registry: &Registry,
    user: &str,
    kind: ContainerKind,
    backend: Backend,
    argv: Option<Vec<String>>,
) -> Result<i32, LifecycleError> {
    let record = registry.lookup(user, kind)?.ok_or_else(|| not_found(user, kind))?;
    let config = load_config(&record.work_dir)?;
    let plan = plan_create(&config)?;
    let argv = argv.unwrap_or_else(|| config.entry_command.clone());
    registry.update_status(user, kind, Status::Running)?;
    let result = Executor::with_registry(registry.clone()).run(&plan, backend, argv);
    registry.update_status(user, kind, Status::Created)?;
    Ok(result?)
}

/// Removes a container's record and its directories, including the upper
/// layer.
pub fn destroy(registry: &Registry, user: &str, kind: ContainerKind) -> Result<ContainerRecord, LifecycleError> {
    let record = registry.lookup(user, kind)?.ok_or_else(|| not_found(user, kind))?;
    let _in_use = match registry.lock_upper(&record.upper_dir) {
        Ok(g) => g,
        Err(StateError::WouldBlock(_)) => return Err(ExecError::RegistryConflict(record.upper_dir.clone()).into()),
        Err(e) => return Err(e.into()),
    };
    for dir in [&record.merged_dir, &record.work_dir, &record.upper_dir] {
        disk::remove_any(dir).map_err(|source| LifecycleError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    registry.remove(user, kind)?;
    Ok(record)
}
