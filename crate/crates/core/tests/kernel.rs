//! Kernel backend checks. They need host root and skip otherwise.

use std::fs;
use std::path::Path;

use cue_core::exec::{kernel, Backend, ExecError, Executor, SandboxView};
use cue_core::plan::{plan_create, ContainerConfig, LayerDirs};
use cue_core::NormPath;

fn privileged() -> bool {
    if kernel::check_privilege().is_err() {
        eprintln!("skipping: kernel backend needs host root");
        return false;
    }
    true
}

fn config(tmp: &Path) -> ContainerConfig {
    let state = tmp.join("state");
    ContainerConfig::for_user("alice", "/", LayerDirs::under(&state.join("layers/alice")), &state)
}

fn capture(exec: &Executor, cfg: &ContainerConfig, script: &str) -> (i32, String) {
    let plan = plan_create(cfg).unwrap();
    let code = exec
        .run(
            &plan,
            Backend::Kernel,
            vec!["/bin/sh".into(), "-c".into(), format!("({script}) > /tmp/cue-kernel-out 2>&1")],
        )
        .unwrap();
    let view = SandboxView::from_config(cfg);
    let text = view
        .read(&NormPath::parse("/tmp/cue-kernel-out").unwrap())
        .map(|b| String::from_utf8_lossy(&b).into_owned())
        .unwrap_or_default();
    (code, text)
}

#[test]
fn hostname_processes_and_copy_up() {
    if !privileged() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let exec = Executor::new();

    let (code, host) = capture(&exec, &cfg, "hostname");
    assert_eq!(code, 0, "{host}");
    assert_eq!(host.trim(), "cue-alice");

    let (code, pids) = capture(&exec, &cfg, "ls /proc | grep -E '^[0-9]+$'");
    assert_eq!(code, 0, "{pids}");
    let pids: Vec<u32> = pids.lines().map(|l| l.trim().parse().unwrap()).collect();
    assert!(!pids.is_empty() && pids.iter().all(|p| *p < 10), "{pids:?}");

    let (code, out) = capture(&exec, &cfg, "echo mine > /lib/libcue-test.so");
    assert_eq!(code, 0, "{out}");
    // /lib may be a symlink into /usr; follow it inside the view.
    let view = SandboxView::from_config(&cfg);
    let canonical = view
        .canonicalize(&NormPath::parse("/lib/libcue-test.so").unwrap(), true)
        .unwrap();
    assert_eq!(fs::read(cfg.upper_dir.join(canonical.relative())).unwrap(), b"mine\n");
    assert!(!Path::new("/").join(canonical.relative()).exists());
}

#[test]
fn capabilities_are_restricted() {
    if !privileged() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let (code, status) = capture(&Executor::new(), &cfg, "grep -E '^Cap(Eff|Bnd)' /proc/self/status");
    assert_eq!(code, 0, "{status}");
    // DAC_OVERRIDE, DAC_READ_SEARCH, CHOWN, FOWNER, FSETID, SETUID, SETGID, KILL.
    let want = (1u64 << 1) | (1 << 2) | 1 | (1 << 3) | (1 << 4) | (1 << 7) | (1 << 6) | (1 << 5);
    for line in status.lines() {
        let hex = line.split_whitespace().nth(1).unwrap();
        assert_eq!(u64::from_str_radix(hex, 16).unwrap(), want, "{line}");
    }
}

#[test]
fn failure_unwinds_and_teardown_twice() {
    if !privileged() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let plan = plan_create(&cfg).unwrap();
    let err = Executor::new()
        .with_injected_failure(7)
        .execute(&plan, Backend::Kernel)
        .unwrap_err();
    let ExecError::StepFailed { ordinal, report, .. } = err else {
        panic!("{err}")
    };
    assert_eq!(ordinal, 7);
    assert_eq!(report.unwound, (0..7).rev().collect::<Vec<_>>());

    let exec = Executor::new();
    let plan = plan.with_entry(vec!["/bin/sleep".into(), "30".into()]);
    let report = exec.execute(&plan, Backend::Kernel).unwrap();
    let handle = report.handle.unwrap();
    exec.teardown(&handle).unwrap();
    assert!(matches!(exec.teardown(&handle), Err(ExecError::NotFound(_))));
}

fn subtree(view: &SandboxView, root: &NormPath) -> std::collections::BTreeMap<String, String> {
    use cue_core::overlay::Node;
    let mut out = std::collections::BTreeMap::new();
    let mut todo = vec![root.clone()];
    while let Some(p) = todo.pop() {
        let Some(entry) = view.lookup(&p).unwrap() else { continue };
        let shown = match &entry.node {
            Node::Directory { .. } => {
                for child in view.list(&p).unwrap() {
                    todo.push(p.join(&child.name).unwrap());
                }
                "dir".to_owned()
            }
            Node::File(_) => format!("file {:?}", view.read(&p).unwrap()),
            Node::Symlink(t) => format!("link {t}"),
            Node::Whiteout => unreachable!("lookup never yields markers"),
        };
        out.insert(p.to_string(), shown);
    }
    out
}

#[test]
fn sandbox_and_kernel_agree_on_file_semantics() {
    if !privileged() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir_all(data.join("dir/sub")).unwrap();
    fs::create_dir_all(data.join("keep")).unwrap();
    fs::write(data.join("a"), b"lower a").unwrap();
    fs::write(data.join("b"), b"lower b").unwrap();
    fs::write(data.join("dir/x"), b"x").unwrap();
    fs::write(data.join("dir/sub/y"), b"y").unwrap();
    fs::write(data.join("keep/k"), b"k").unwrap();
    let d = data.display();
    let script = format!(
        "printf upper > {d}/a && rm {d}/b && rm -r {d}/dir && mkdir {d}/dir && printf z > {d}/dir/z \
         && ln -s ../a {d}/keep/link && mkdir {d}/new && printf n > {d}/new/n"
    );

    let state = tmp.path().join("state");
    let kcfg = ContainerConfig::for_user("alice", "/", LayerDirs::under(&state.join("layers/alice")), &state);
    let (code, out) = capture(&Executor::new(), &kcfg, &script);
    assert_eq!(code, 0, "{out}");

    let scfg = ContainerConfig::for_user("bob", "/", LayerDirs::under(&state.join("layers/bob")), &state);
    let plan = plan_create(&scfg).unwrap();
    let exec = Executor::new();
    let report = exec.execute(&plan, Backend::Sandbox).unwrap();
    let sview = SandboxView::from_config(&scfg);
    let p = |rel: &str| NormPath::parse(&format!("{d}/{rel}")).unwrap();
    sview.write(&p("a"), b"upper").unwrap();
    sview.remove(&p("b"), false).unwrap();
    sview.remove(&p("dir"), true).unwrap();
    sview.make_dir(&p("dir")).unwrap();
    sview.write(&p("dir/z"), b"z").unwrap();
    sview.symlink(&p("keep/link"), "../a").unwrap();
    sview.make_dir(&p("new")).unwrap();
    sview.write(&p("new/n"), b"n").unwrap();
    exec.teardown(report.handle.as_ref().unwrap()).unwrap();

    let root = NormPath::parse(&d.to_string()).unwrap();
    let kernel_view = subtree(&SandboxView::from_config(&kcfg), &root);
    assert_eq!(kernel_view, subtree(&sview, &root));
    assert_eq!(kernel_view[&format!("{d}/a")], format!("file {:?}", b"upper"));
    assert!(!kernel_view.contains_key(&format!("{d}/dir/x")));
    assert_eq!(fs::read(data.join("b")).unwrap(), b"lower b");
}

#[test]
fn no_process_outlives_the_container() {
    if !privileged() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let (code, _) = capture(&Executor::new(), &cfg, "sleep 0.2 & true");
    assert_eq!(code, 0);
    let me = std::process::id().to_string();
    let children: Vec<String> = fs::read_dir("/proc")
        .unwrap()
        .filter_map(|e| e.ok())
        .filter_map(|e| fs::read_to_string(e.path().join("stat")).ok())
        .filter(|stat| {
            stat.rsplit(')').next().and_then(|rest| rest.split_whitespace().nth(1)) == Some(me.as_str())
        })
        .collect();
    assert!(children.is_empty(), "{children:?}");
}
