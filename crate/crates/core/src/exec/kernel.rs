//! The privileged backend: real namespaces, overlay and bind mounts.
//!
//! The calling process forks a setup child that unshares its namespaces and
//! performs the mounts. At the `/proc` step the setup child forks the entry
//! process, which becomes pid 1 of the new pid namespace, mounts `/proc`,
//! drops capabilities, changes root and execs. Both report step results to
//! the caller over a pipe whose write end closes on exec, so end-of-file
//! after the last step means the entry command started. The setup child
//! stays behind as the container's parent, waits for the entry process and
//! then unmounts in reverse order.

use std::collections::HashSet;
use std::ffi::CString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::os::fd::OwnedFd;
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::FileTypeExt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use caps::{CapSet, Capability};
use nix::errno::Errno;
use nix::fcntl::OFlag;
use nix::mount::{mount, umount2, MntFlags, MsFlags};
use nix::sched::{unshare, CloneFlags};
use nix::sys::signal::{kill, Signal};
use nix::sys::stat::{mknod, Mode, SFlag};
use nix::sys::wait::{waitpid, WaitStatus};
use nix::unistd::{chdir, chroot, execve, fork, pipe2, sethostname, ForkResult, Pid};

use super::{
    entry_env, micros, same_dir, write_transcript, Backend, ContainerHandle, ExecError, ExecutionReport, StepOutcome,
    StepStatus, IDENTITY_NOTE,
};
use crate::caps::CapabilitySet;
use crate::disk::{self, OPAQUE_MARKER, WHITEOUT_PREFIX};
use crate::path::{escape_field, unescape_field};
use crate::plan::{AccessMode, BindSource, ContainerConfig, Namespace, SetupPlan, StepKind};

/// Overlay work directory, under the container's work dir.
pub const OVERLAY_WORK: &str = "ovl";
/// Writable layer for read-only attachments, under the container's work dir.
pub const SCRATCH: &str = "scratch";

pub fn check_privilege() -> Result<(), ExecError> {
    if !nix::unistd::geteuid().is_root() {
        return Err(ExecError::PrivilegeRequired("effective uid is not 0".into()));
    }
    match caps::has_cap(None, CapSet::Effective, Capability::CAP_SYS_ADMIN) {
        Ok(true) => Ok(()),
        _ => Err(ExecError::PrivilegeRequired("CAP_SYS_ADMIN is not effective".into())),
    }
}

fn escape_option(path: &Path) -> String {
    let mut out = String::new();
    for c in path.to_string_lossy().chars() {
        if matches!(c, ',' | ':' | '\\') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

/// Mount options for the union filesystem. A read-only upper is stacked as
/// the top lower layer, with writes going to a scratch layer.
pub fn overlay_options(lower: &Path, upper: &Path, work: &Path, mode: AccessMode) -> String {
    let workdir = escape_option(&work.join(OVERLAY_WORK));
    match mode {
        AccessMode::ReadWrite => format!(
            "lowerdir={},upperdir={},workdir={workdir}",
            escape_option(lower),
            escape_option(upper)
        ),
        AccessMode::ReadOnly => format!(
            "lowerdir={}:{},upperdir={},workdir={workdir}",
            escape_option(upper),
            escape_option(lower),
            escape_option(&work.join(SCRATCH))
        ),
    }
}

/// Rewrites marker files left by the sandbox backend into the kernel's
/// whiteout devices and opaque attributes.
pub fn convert_markers(dir: &Path) -> io::Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    let opq = dir.join(OPAQUE_MARKER);
    if opq.symlink_metadata().is_ok() {
        xattr_set(dir, "trusted.overlay.opaque", b"y")?;
        fs::remove_file(&opq)?;
    }
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        let ft = entry.file_type()?;
        if let Some(hidden) = name.strip_prefix(WHITEOUT_PREFIX) {
            if name != OPAQUE_MARKER && !hidden.is_empty() {
                let target = dir.join(hidden);
                disk::remove_any(&target)?;
                mknod(&target, SFlag::S_IFCHR, Mode::empty(), 0).map_err(io::Error::from)?;
                fs::remove_file(entry.path())?;
            }
        } else if ft.is_dir() {
            convert_markers(&entry.path())?;
        }
    }
    Ok(())
}

fn xattr_set(path: &Path, name: &str, value: &[u8]) -> io::Result<()> {
    let cpath = CString::new(path.as_os_str().as_bytes())?;
    let cname = CString::new(name)?;
    // SAFETY: valid NUL-terminated strings and a live buffer.
    let rc = unsafe { libc::lsetxattr(cpath.as_ptr(), cname.as_ptr(), value.as_ptr().cast(), value.len(), 0) };
    if rc == 0 {
        Ok(())
    } else {
        Err(io::Error::last_os_error())
    }
}

fn host_target(merged: &Path, target: &crate::path::NormPath) -> PathBuf {
    disk::host_path(merged, target)
}

fn ensure_target(target: &Path, like_dir: bool) -> io::Result<()> {
    if target.symlink_metadata().is_ok() {
        return Ok(());
    }
    if like_dir {
        fs::create_dir_all(target)
    } else {
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        File::create(target).map(drop)
    }
}

fn remount_ro(target: &Path) -> nix::Result<()> {
    mount(
        None::<&str>,
        target,
        None::<&str>,
        MsFlags::MS_BIND | MsFlags::MS_REMOUNT | MsFlags::MS_RDONLY,
        None::<&str>,
    )
}

fn errno_reason(what: &str, e: impl std::fmt::Display) -> String {
    format!("{what}: {e}")
}

/// Steps run by the setup child before the entry process exists. Returns
/// the mount point added, if any.
fn setup_step(kind: &StepKind, config: &ContainerConfig) -> Result<Option<PathBuf>, String> {
    match kind {
        StepKind::NewNamespace(Namespace::Mount) => {
            unshare(CloneFlags::CLONE_NEWNS).map_err(|e| errno_reason("unshare(mount)", e))?;
            mount(
                None::<&str>,
                "/",
                None::<&str>,
                MsFlags::MS_REC | MsFlags::MS_PRIVATE,
                None::<&str>,
            )
            .map_err(|e| errno_reason("make / private", e))?;
            Ok(None)
        }
        StepKind::NewNamespace(Namespace::Pid) => {
            unshare(CloneFlags::CLONE_NEWPID).map_err(|e| errno_reason("unshare(pid)", e))?;
            Ok(None)
        }
        StepKind::NewNamespace(Namespace::Uts) => {
            unshare(CloneFlags::CLONE_NEWUTS).map_err(|e| errno_reason("unshare(uts)", e))?;
            Ok(None)
        }
        StepKind::OverlayMount {
            lower,
            upper,
            work,
            merged,
            upper_mode,
        } => {
            if same_dir(lower, merged) {
                return Err("merged directory is the host root".into());
            }
            convert_markers(upper).map_err(|e| errno_reason("convert markers", e))?;
            fs::create_dir_all(work.join(OVERLAY_WORK)).map_err(|e| errno_reason("work dir", e))?;
            if *upper_mode == AccessMode::ReadOnly {
                fs::create_dir_all(work.join(SCRATCH)).map_err(|e| errno_reason("scratch dir", e))?;
            }
            let opts = overlay_options(lower, upper, work, *upper_mode);
            mount(Some("overlay"), merged.as_path(), Some("overlay"), MsFlags::empty(), Some(opts.as_str()))
                .map_err(|e| errno_reason("mount overlay", e))?;
            Ok(Some(merged.clone()))
        }
        StepKind::SetHostname(name) => {
            sethostname(name).map_err(|e| errno_reason("sethostname", e))?;
            Ok(None)
        }
        StepKind::BindMount { source, target, mode } => {
            let dst = host_target(&config.merged_dir, target);
            match source {
                BindSource::Host(src) => {
                    let is_dir = src.is_dir();
                    ensure_target(&dst, is_dir).map_err(|e| errno_reason("bind target", e))?;
                    mount(Some(src.as_path()), dst.as_path(), None::<&str>, MsFlags::MS_BIND, None::<&str>)
                        .map_err(|e| errno_reason("bind", e))?;
                    if *mode == AccessMode::ReadOnly {
                        remount_ro(&dst).map_err(|e| errno_reason("remount ro", e))?;
                    }
                }
                BindSource::Empty => {
                    ensure_target(&dst, true).map_err(|e| errno_reason("mask target", e))?;
                    mount(
                        Some("tmpfs"),
                        dst.as_path(),
                        Some("tmpfs"),
                        MsFlags::MS_RDONLY | MsFlags::MS_NOSUID | MsFlags::MS_NODEV,
                        Some("size=4k,mode=755"),
                    )
                    .map_err(|e| errno_reason("mask", e))?;
                }
                BindSource::InPlace => {
                    mount(
                        Some(dst.as_path()),
                        dst.as_path(),
                        None::<&str>,
                        MsFlags::MS_BIND | MsFlags::MS_REC,
                        None::<&str>,
                    )
                    .map_err(|e| errno_reason("self bind", e))?;
                    remount_ro(&dst).map_err(|e| errno_reason("remount ro", e))?;
                }
            }
            Ok(Some(dst))
        }
        other => Err(format!("{} is not a setup step", other.token())),
    }
}

fn drop_capabilities(set: &CapabilitySet) -> Result<(), String> {
    let keep: HashSet<Capability> = set
        .allowed()
        .filter_map(|c| Capability::from_str(c.as_str()).ok())
        .collect();
    for cap in caps::runtime::thread_all_supported() {
        if !keep.contains(&cap) {
            caps::drop(None, CapSet::Bounding, cap).map_err(|e| errno_reason("drop bounding", e))?;
        }
    }
    caps::clear(None, CapSet::Ambient).map_err(|e| errno_reason("clear ambient", e))?;
    caps::set(None, CapSet::Inheritable, &keep).map_err(|e| errno_reason("set inheritable", e))?;
    // Permitted and effective sets are recomputed from the bounding set
    // when the entry command is executed; chroot still needs them here.
    Ok(())
}

fn resolve_program(name: &str) -> PathBuf {
    if name.contains('/') {
        return PathBuf::from(name);
    }
    let path = entry_env()
        .into_iter()
        .find(|(k, _)| k == "PATH")
        .map(|(_, v)| v)
        .unwrap_or_default();
    path.split(':')
        .map(|dir| Path::new(dir).join(name))
        .find(|p| p.is_file())
        .unwrap_or_else(|| PathBuf::from(name))
}

fn send(out: &mut File, line: String) {
    let _ = out.write_all(line.as_bytes());
}

fn send_step(out: &mut File, ordinal: usize, started: Instant, result: &Result<(), String>) {
    let us = micros(started.elapsed());
    let line = match result {
        Ok(()) => format!("step {ordinal} ok {us}\n"),
        Err(reason) => format!("step {ordinal} failed {us} {}\n", escape_field(reason)),
    };
    send(out, line);
}

fn unmount_all(mounts: &[PathBuf]) {
    for m in mounts.iter().rev() {
        let _ = umount2(m.as_path(), MntFlags::MNT_DETACH);
    }
}

fn exit_code(status: WaitStatus) -> i32 {
    match status {
        WaitStatus::Exited(_, code) => code,
        WaitStatus::Signaled(_, sig, _) => 128 + sig as i32,
        _ => 1,
    }
}

fn wait_exit(pid: Pid) -> nix::Result<i32> {
    loop {
        match waitpid(pid, None) {
            Ok(status @ (WaitStatus::Exited(..) | WaitStatus::Signaled(..))) => return Ok(exit_code(status)),
            Ok(_) => continue,
            Err(Errno::EINTR) => continue,
            Err(e) => return Err(e),
        }
    }
}

/// Runs in the entry process, from the `/proc` step on. Never returns.
fn entry_main(plan: &SetupPlan, from: usize, fail_at: Option<usize>, out: &mut File) -> ! {
    let merged = &plan.config().merged_dir;
    for step in &plan.steps()[from..] {
        let t = Instant::now();
        let result: Result<(), String> = if fail_at == Some(step.ordinal) {
            Err("injected failure".into())
        } else {
            match &step.kind {
                StepKind::RemountProc => {
                    let target = merged.join("proc");
                    ensure_target(&target, true)
                        .map_err(|e| errno_reason("proc target", e))
                        .and_then(|()| {
                            mount(
                                Some("proc"),
                                target.as_path(),
                                Some("proc"),
                                MsFlags::MS_NOSUID | MsFlags::MS_NODEV | MsFlags::MS_NOEXEC,
                                None::<&str>,
                            )
                            .map_err(|e| errno_reason("mount proc", e))
                        })
                }
                StepKind::DropCapabilities(set) => drop_capabilities(set),
                StepKind::ChangeRoot(dir) => chdir(dir.as_path())
                    .and_then(|()| chroot("."))
                    .and_then(|()| chdir("/"))
                    .map_err(|e| errno_reason("chroot", e)),
                StepKind::Exec(argv) => {
                    let program = resolve_program(&argv[0]);
                    let cargs: Result<Vec<CString>, _> = argv.iter().map(|a| CString::new(a.as_bytes())).collect();
                    let cenv: Result<Vec<CString>, _> = entry_env()
                        .into_iter()
                        .map(|(k, v)| CString::new(format!("{k}={v}")))
                        .collect();
                    let cprog = CString::new(program.as_os_str().as_bytes());
                    match (cprog, cargs, cenv) {
                        (Ok(p), Ok(a), Ok(e)) => {
                            // The pipe closes on success; only failures report.
                            let err = execve(&p, &a, &e).unwrap_err();
                            Err(errno_reason(&format!("exec {}", program.display()), err))
                        }
                        _ => Err("argument contains NUL".into()),
                    }
                }
                other => Err(format!("{} cannot run in the entry process", other.token())),
            }
        };
        send_step(out, step.ordinal, t, &result);
        if result.is_err() {
            // SAFETY: terminating the forked process without unwinding.
            unsafe { libc::_exit(127) }
        }
    }
    unsafe { libc::_exit(127) }
}

/// Runs in the setup child. Never returns.
fn setup_main(plan: &SetupPlan, fail_at: Option<usize>, mut out: File) -> ! {
    let mut mounts: Vec<PathBuf> = Vec::new();
    for (idx, step) in plan.steps().iter().enumerate().skip(1) {
        if matches!(step.kind, StepKind::RemountProc) {
            // SAFETY: the child only runs setup code and then execs.
            match unsafe { fork() } {
                Ok(ForkResult::Child) => entry_main(plan, idx, fail_at, &mut out),
                Ok(ForkResult::Parent { child }) => {
                    send(&mut out, format!("init {child}\n"));
                    drop(out);
                    let code = wait_exit(child).unwrap_or(1);
                    unmount_all(&mounts);
                    unsafe { libc::_exit(code) }
                }
                Err(e) => {
                    send_step(&mut out, step.ordinal, Instant::now(), &Err(errno_reason("fork", e)));
                    unmount_all(&mounts);
                    unsafe { libc::_exit(1) }
                }
            }
        }
        let t = Instant::now();
        let result = if fail_at == Some(step.ordinal) {
            Err("injected failure".to_owned())
        } else {
            setup_step(&step.kind, plan.config()).map(|m| mounts.extend(m))
        };
        send_step(&mut out, step.ordinal, t, &result);
        if result.is_err() {
            unmount_all(&mounts);
            unsafe { libc::_exit(1) }
        }
    }
    unsafe { libc::_exit(1) }
}

fn make_dirs(dirs: &[PathBuf], created: &mut Vec<PathBuf>) -> Result<(), String> {
    for dir in dirs {
        let mut missing = Vec::new();
        let mut cur = Some(dir.as_path());
        while let Some(d) = cur {
            if d.exists() {
                break;
            }
            missing.push(d.to_owned());
            cur = d.parent();
        }
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        created.extend(missing.into_iter().rev());
    }
    Ok(())
}

pub(crate) fn execute(plan: &SetupPlan, fail_at: Option<usize>) -> Result<ExecutionReport, ExecError> {
    check_privilege()?;
    let start = Instant::now();
    let config = plan.config();
    let mut report = ExecutionReport {
        backend: Backend::Kernel,
        steps: Vec::new(),
        handle: None,
        total_elapsed_us: 0,
        unwound: Vec::new(),
    };
    let header = vec![format!("backend {}", Backend::Kernel), IDENTITY_NOTE.to_owned()];
    let mut created = Vec::new();
    let first = &plan.steps()[0];
    let t = Instant::now();
    let status = match &first.kind {
        _ if fail_at == Some(0) => StepStatus::Failed("injected failure".into()),
        StepKind::MakeDirs(dirs) => match make_dirs(dirs, &mut created) {
            Ok(()) => StepStatus::Ok,
            Err(reason) => StepStatus::Failed(reason),
        },
        other => StepStatus::Failed(format!("plan starts with {}", other.token())),
    };
    report.steps.push(StepOutcome {
        ordinal: 0,
        status,
        elapsed_us: micros(t.elapsed()),
    });

    let mut init = None;
    let mut child = None;
    if report.failed_step().is_none() {
        let (rd, wr): (OwnedFd, OwnedFd) = pipe2(OFlag::O_CLOEXEC).map_err(|e| ExecError::Io {
            path: PathBuf::from("pipe"),
            source: e.into(),
        })?;
        // SAFETY: the child runs only setup code before exec or _exit.
        match unsafe { fork() } {
            Ok(ForkResult::Child) => {
                drop(rd);
                setup_main(plan, fail_at, File::from(wr))
            }
            Ok(ForkResult::Parent { child: c }) => {
                drop(wr);
                child = Some(c);
                let mut last_ok = Instant::now();
                for line in BufReader::new(File::from(rd)).lines() {
                    let Ok(line) = line else { break };
                    let fields: Vec<&str> = line.splitn(5, ' ').collect();
                    match fields.as_slice() {
                        ["init", pid] => init = pid.parse::<i32>().ok(),
                        ["step", ord, kind, us, rest @ ..] => {
                            let ordinal: usize = ord.parse().unwrap_or(usize::MAX);
                            let elapsed_us = us.parse().unwrap_or(0);
                            let status = if *kind == "ok" {
                                StepStatus::Ok
                            } else {
                                StepStatus::Failed(rest.first().and_then(|r| unescape_field(r)).unwrap_or_default())
                            };
                            report.steps.push(StepOutcome {
                                ordinal,
                                status,
                                elapsed_us,
                            });
                            last_ok = Instant::now();
                        }
                        _ => {}
                    }
                }
                report.steps.sort_by_key(|s| s.ordinal);
                if report.failed_step().is_none() {
                    let next = report.steps.len();
                    let status = if next + 1 == plan.steps().len() && init.is_some() {
                        StepStatus::Ok
                    } else {
                        StepStatus::Failed("setup process exited before the entry command started".into())
                    };
                    report.steps.push(StepOutcome {
                        ordinal: next,
                        status,
                        elapsed_us: micros(last_ok.elapsed()),
                    });
                }
            }
            Err(e) => {
                report.steps.push(StepOutcome {
                    ordinal: 1,
                    status: StepStatus::Failed(errno_reason("fork", e)),
                    elapsed_us: 0,
                });
            }
        }
    }
    report.total_elapsed_us = micros(start.elapsed());

    if let Some(failed) = report.failed_step().cloned() {
        if let Some(c) = child {
            let _ = wait_exit(c);
        }
        report.steps.truncate(failed.ordinal + 1);
        report.unwound = (0..failed.ordinal).rev().collect();
        for dir in created.iter().rev() {
            if !config.work_dir.starts_with(dir) {
                let _ = fs::remove_dir(dir);
            }
        }
        write_transcript(plan, &report, &header)?;
        let StepStatus::Failed(reason) = failed.status else {
            unreachable!()
        };
        return Err(ExecError::StepFailed {
            ordinal: failed.ordinal,
            reason,
            report: Box::new(report),
        });
    }
    report.handle = Some(ContainerHandle::Kernel {
        init: init.expect("entry pid reported"),
        child: child.expect("setup child").as_raw(),
    });
    write_transcript(plan, &report, &header)?;
    Ok(report)
}

pub(crate) fn teardown(handle: &ContainerHandle) -> Result<(), ExecError> {
    let ContainerHandle::Kernel { init, child } = handle else {
        unreachable!()
    };
    let _ = kill(Pid::from_raw(*init), Signal::SIGKILL);
    wait_exit(Pid::from_raw(*child))
        .map(drop)
        .map_err(|_| ExecError::NotFound(handle.to_string()))
}

pub(crate) fn wait(handle: &ContainerHandle) -> Result<i32, ExecError> {
    let ContainerHandle::Kernel { child, .. } = handle else {
        unreachable!()
    };
    wait_exit(Pid::from_raw(*child)).map_err(|_| ExecError::NotFound(handle.to_string()))
}

/// True for a kernel whiteout device.
pub fn is_kernel_whiteout(path: &Path) -> bool {
    use std::os::unix::fs::MetadataExt;
    path.symlink_metadata()
        .is_ok_and(|m| m.file_type().is_char_device() && m.rdev() == 0)
}
