//! The unprivileged backend.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use super::{
    entry_env, io_err, micros, same_dir, write_transcript, Backend, ContainerHandle, ExecError, ExecutionReport,
    SandboxView, StepOutcome, StepStatus, IDENTITY_NOTE,
};
use crate::plan::{BindSource, ContainerConfig, SetupPlan, StepKind};

fn run_step(kind: &StepKind, created: &mut Vec<PathBuf>) -> StepStatus {
    match kind {
        StepKind::MakeDirs(dirs) => {
            for dir in dirs {
                if dir.is_dir() {
                    continue;
                }
                // Record each missing ancestor so unwinding removes exactly
                // what was created.
                let mut missing = Vec::new();
                let mut cur = Some(dir.as_path());
                while let Some(d) = cur {
                    if d.exists() {
                        break;
                    }
                    missing.push(d.to_owned());
                    cur = d.parent();
                }
                if let Err(e) = fs::create_dir_all(dir) {
                    return StepStatus::Failed(format!("{}: {e}", dir.display()));
                }
                created.extend(missing.into_iter().rev());
            }
            StepStatus::Ok
        }
        StepKind::OverlayMount { lower, upper, merged, .. } => {
            if !lower.is_dir() {
                return StepStatus::Failed(format!("lower {} is not a directory", lower.display()));
            }
            if same_dir(lower, merged) {
                return StepStatus::Failed("merged directory is the host root".to_owned());
            }
            if !upper.is_dir() {
                return StepStatus::Failed(format!("upper {} is not a directory", upper.display()));
            }
            StepStatus::Ok
        }
        StepKind::BindMount {
            source: BindSource::Host(src),
            ..
        } => {
            if src.symlink_metadata().is_err() {
                return StepStatus::Failed(format!("{} does not exist", src.display()));
            }
            StepStatus::SimulatedOk
        }
        // Masks are enforced by the view.
        StepKind::BindMount { .. } => StepStatus::Ok,
        StepKind::NewNamespace(_)
        | StepKind::SetHostname(_)
        | StepKind::RemountProc
        | StepKind::DropCapabilities(_)
        | StepKind::ChangeRoot(_)
        | StepKind::Exec(_) => StepStatus::SimulatedOk,
    }
}

pub(crate) fn execute(plan: &SetupPlan, fail_at: Option<usize>) -> Result<ExecutionReport, ExecError> {
    let start = Instant::now();
    let mut report = ExecutionReport {
        backend: Backend::Sandbox,
        steps: Vec::new(),
        handle: None,
        total_elapsed_us: 0,
        unwound: Vec::new(),
    };
    let mut created = Vec::new();
    for step in plan.steps() {
        let t = Instant::now();
        let status = if fail_at == Some(step.ordinal) {
            StepStatus::Failed("injected failure".to_owned())
        } else {
            run_step(&step.kind, &mut created)
        };
        let failed = status.is_failed();
        report.steps.push(StepOutcome {
            ordinal: step.ordinal,
            status,
            elapsed_us: micros(t.elapsed()),
        });
        if failed {
            break;
        }
    }
    report.total_elapsed_us = micros(start.elapsed());
    let config = plan.config();
    let header = vec![format!("backend {}", Backend::Sandbox), IDENTITY_NOTE.to_owned()];
    if let Some(failed) = report.failed_step().cloned() {
        let StepStatus::Failed(reason) = failed.status else {
            unreachable!()
        };
        report.unwound = (0..failed.ordinal).rev().collect();
        // The work directory is kept so the transcript survives.
        for dir in created.iter().rev() {
            if !config.work_dir.starts_with(dir) {
                let _ = fs::remove_dir(dir);
            }
        }
        write_transcript(plan, &report, &header)?;
        return Err(ExecError::StepFailed {
            ordinal: failed.ordinal,
            reason,
            report: Box::new(report),
        });
    }
    report.handle = Some(ContainerHandle::Sandbox {
        merged: config.merged_dir.clone(),
    });
    write_transcript(plan, &report, &header)?;
    Ok(report)
}

pub(crate) fn teardown(merged: &Path) -> Result<(), ExecError> {
    match fs::symlink_metadata(merged) {
        Ok(_) => fs::remove_dir_all(merged).map_err(io_err(merged)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Err(ExecError::NotFound(format!("sandbox:{}", merged.display()))),
        Err(e) => Err(io_err(merged)(e)),
    }
}

/// Materializes the merged view, runs the entry command inside it and
/// replays its file changes into the upper layer. Absolute program paths
/// are looked up in the merged view first; the working directory is the
/// merged directory, exported as `CUE_ROOT`.
pub(crate) fn run_entry(config: &ContainerConfig) -> Result<i32, ExecError> {
    run_entry_timed(config).map(|(code, _)| code)
}

/// Like [`run_entry`], also returning the entry command's own wall time.
pub(crate) fn run_entry_timed(config: &ContainerConfig) -> Result<(i32, Duration), ExecError> {
    let view = SandboxView::from_config(config);
    let baseline = view.materialize_all()?;
    let merged = view.merged_dir();
    let argv = &config.entry_command;
    let program = match argv[0].strip_prefix('/') {
        Some(rel) if merged.join(rel).is_file() => merged.join(rel),
        _ => PathBuf::from(&argv[0]),
    };
    let start = Instant::now();
    let status = Command::new(&program)
        .args(&argv[1..])
        .current_dir(merged)
        .env_clear()
        .envs(entry_env())
        .env("HOSTNAME", &config.hostname)
        .env("CUE_ROOT", merged)
        .status();
    let elapsed = start.elapsed();
    let code = match status {
        Ok(s) => s
            .code()
            .unwrap_or_else(|| 128 + std::os::unix::process::ExitStatusExt::signal(&s).unwrap_or(0)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => 127,
        Err(e) if e.kind() == io::ErrorKind::PermissionDenied => 126,
        Err(e) => return Err(io_err(&program)(e)),
    };
    view.sync_back(&baseline)?;
    Ok((code, elapsed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Executor;
    use crate::plan::{plan_create, LayerDirs};

    fn setup() -> (tempfile::TempDir, ContainerConfig) {
        let tmp = tempfile::tempdir().unwrap();
        let host = tmp.path().join("host");
        fs::create_dir_all(host.join("bin")).unwrap();
        fs::write(host.join("bin/python"), b"2.7").unwrap();
        let state = tmp.path().join("state");
        let config = ContainerConfig::for_user("alice", &host, LayerDirs::under(&state.join("layers/alice")), &state);
        (tmp, config)
    }

    #[test]
    fn execute_then_teardown() {
        let (_tmp, config) = setup();
        let plan = plan_create(&config).unwrap();
        let exec = Executor::new();
        let report = exec.execute(&plan, Backend::Sandbox).unwrap();
        assert_eq!(report.steps.len(), plan.steps().len());
        assert!(report.steps.windows(2).all(|w| w[0].ordinal < w[1].ordinal));
        let transcript = fs::read_to_string(config.work_dir.join("transcript")).unwrap();
        assert!(transcript.contains("NEW_NAMESPACE pid => SIMULATED_OK"));
        assert!(transcript.contains("OVERLAY_MOUNT"));
        let view = SandboxView::from_config(&config);
        assert_eq!(view.read(&"/bin/python".parse().unwrap()).unwrap(), b"2.7");
        view.write(&"/bin/python".parse().unwrap(), b"3.5").unwrap();
        assert!(config.upper_dir.join("bin/python").is_file());
        assert_eq!(fs::read(config.host_root.join("bin/python")).unwrap(), b"2.7");

        let handle = report.handle.unwrap();
        exec.teardown(&handle).unwrap();
        assert!(!config.merged_dir.exists());
        assert!(config.upper_dir.join("bin/python").is_file());
        assert!(matches!(exec.teardown(&handle), Err(ExecError::NotFound(_))));
    }

    #[test]
    fn failure_unwinds_earlier_steps() {
        let (_tmp, config) = setup();
        let plan = plan_create(&config).unwrap();
        let err = Executor::new()
            .with_injected_failure(5)
            .execute(&plan, Backend::Sandbox)
            .unwrap_err();
        let ExecError::StepFailed { ordinal, report, .. } = err else {
            panic!("{err}")
        };
        assert_eq!(ordinal, 5);
        assert_eq!(report.steps.len(), 6);
        assert_eq!(report.unwound, [4, 3, 2, 1, 0]);
        assert!(!config.merged_dir.exists());
        assert!(!config.upper_dir.exists());
        let transcript = fs::read_to_string(config.work_dir.join("transcript")).unwrap();
        assert!(transcript.contains("6 BIND_MOUNT /dev/null /dev/null rw => NOT_RUN"));
        assert!(transcript.contains("UNWIND 0 MAKE_DIRS"));
    }

    #[test]
    fn missing_lower_fails_overlay_step() {
        let (tmp, mut config) = setup();
        config.host_root = tmp.path().join("nope");
        let plan = plan_create(&config).unwrap();
        let err = Executor::new().execute(&plan, Backend::Sandbox).unwrap_err();
        assert!(matches!(err, ExecError::StepFailed { ordinal: 4, .. }));
    }

    #[test]
    fn run_replays_changes() {
        let (_tmp, config) = setup();
        let plan = plan_create(&config).unwrap();
        let code = Executor::new()
            .run(
                &plan,
                Backend::Sandbox,
                vec!["/bin/sh".into(), "-c".into(), "echo 3.5 > bin/python; echo $HOSTNAME > host".into()],
            )
            .unwrap();
        assert_eq!(code, 0);
        assert_eq!(fs::read(config.upper_dir.join("bin/python")).unwrap(), b"3.5\n");
        assert_eq!(fs::read(config.upper_dir.join("host")).unwrap(), b"cue-alice\n");
        assert_eq!(fs::read(config.host_root.join("bin/python")).unwrap(), b"2.7");
        assert!(!config.merged_dir.exists());
    }
}
