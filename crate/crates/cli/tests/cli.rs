//! Command surface: help text snapshots, exit codes and output streams.
//! Set `UPDATE_SNAPSHOTS=1` to rewrite the snapshots.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CUE: &str = env!("CARGO_BIN_EXE_cue");

struct Env {
    tmp: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("host/bin")).unwrap();
        fs::write(tmp.path().join("host/bin/python"), "2.7").unwrap();
        fs::create_dir_all(tmp.path().join("shared")).unwrap();
        Env { tmp }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.tmp.path().join(rel)
    }

    fn cue(&self, args: &[&str]) -> Output {
        Command::new(CUE)
            .args(args)
            .env("CUE_STATE_ROOT", self.path("state"))
            .env("CUE_SHARED_ROOT", self.path("shared"))
            .env_remove("CUE_FAULT_POINT")
            .output()
            .unwrap()
    }

    fn create(&self, user: &str) -> Output {
        let host = self.path("host");
        self.cue(&["create", user, "--backend", "sandbox", "--host-root", host.to_str().unwrap()])
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn check_snapshot(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots").join(format!("{name}.txt"));
    if std::env::var_os("UPDATE_SNAPSHOTS").is_some() {
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing snapshot {}", path.display()));
    assert_eq!(actual, expected, "help text for {name} changed");
}

#[test]
fn help_snapshots() {
    let env = Env::new();
    let cases: &[(&str, &[&str])] = &[
        ("cue", &["--help"]),
        ("create", &["create", "--help"]),
        ("enter", &["enter", "--help"]),
        ("commit", &["commit", "--help"]),
        ("login", &["login", "--help"]),
        ("deploy", &["deploy", "--help"]),
        ("release", &["release", "--help"]),
        ("bench", &["bench", "--help"]),
        ("policy", &["policy", "--help"]),
        ("policy-dump", &["policy", "dump", "--help"]),
        ("list", &["list", "--help"]),
        ("destroy", &["destroy", "--help"]),
    ];
    for (name, args) in cases {
        let o = env.cue(args);
        assert_eq!(code(&o), 0, "{name}");
        let text = stdout(&o)
            .replace(env.path("state").to_str().unwrap(), "<state>")
            .replace(env.path("shared").to_str().unwrap(), "<shared>");
        check_snapshot(name, &text);
    }
}

#[test]
fn create_list_enter_destroy() {
    let env = Env::new();
    let o = env.create("alice");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&env.create("alice")), 12);

    let list = env.cue(&["list"]);
    assert!(stdout(&list).starts_with("alice\tUser\tCreated\tcue-alice\t"));
    let json: serde_json::Value = serde_json::from_slice(&env.cue(&["list", "--format", "json"]).stdout).unwrap();
    assert_eq!(json[0]["user"], "alice");
    assert_eq!(json[0]["status"], "Created");

    let o = env.cue(&["enter", "alice", "--backend", "sandbox", "--", "/bin/sh", "-c", "cat bin/python; exit 7"]);
    assert_eq!(code(&o), 7);
    assert_eq!(stdout(&o), "2.7");
    let o = env.cue(&["enter", "alice", "--backend", "sandbox", "--", "/bin/sh", "-c", "echo $CUE_INSIDE"]);
    assert_eq!(stdout(&o), "1\n");

    let o = env.cue(&["destroy", "alice"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).is_empty() && stderr(&o).contains("--yes"));
    assert_eq!(code(&env.cue(&["destroy", "alice", "--yes"])), 0);
    assert!(!env.path("state/layers/alice/upper").exists());
    assert_eq!(code(&env.cue(&["destroy", "alice", "--yes"])), 3);
}

#[test]
fn usage_and_not_found_codes() {
    let env = Env::new();
    let host = env.path("host");
    let host = host.to_str().unwrap();
    let o = env.cue(&["create", "bob", "--hostname", "bad name", "--backend", "sandbox", "--host-root", host]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).is_empty() && !stderr(&o).is_empty());
    assert_eq!(code(&env.cue(&["list", "--frobnicate"])), 2);
    assert_eq!(code(&env.cue(&["enter", "nobody", "--backend", "sandbox"])), 3);
    assert_eq!(code(&env.cue(&["commit"])), 2);
    assert_eq!(code(&env.cue(&["commit", "--sandbox-of-root"])), 3);
    let nodes = env.path("missing.json");
    assert_eq!(code(&env.cue(&["deploy", "alice", "--nodes", nodes.to_str().unwrap()])), 2);
    assert_eq!(code(&env.cue(&["bench", "exec", "--backend", "sandbox", "--", "no-such-cmd-cue"])), 3);
}

#[test]
fn update_sandbox_commit() {
    let env = Env::new();
    let host = env.path("host");
    let o = env.cue(&["create", "--sandbox-of-root", "--backend", "sandbox", "--host-root", host.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = env.cue(&["commit", "--sandbox-of-root"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), "nothing to commit\n");

    let o = env.cue(&["enter", "--sandbox-of-root", "--backend", "sandbox", "--", "/bin/sh", "-c", "printf 3.0 > bin/python"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(host.join("bin/python")).unwrap(), "2.7");
    let o = env.cue(&["commit", "--sandbox-of-root"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("committed "));
    assert_eq!(fs::read_to_string(host.join("bin/python")).unwrap(), "3.0");

    let lower = env.path("l");
    let upper = env.path("u");
    fs::create_dir_all(&lower).unwrap();
    fs::create_dir_all(&upper).unwrap();
    fs::write(upper.join("big"), vec![0u8; 4096]).unwrap();
    let o = env.cue(&[
        "commit",
        "--lower",
        lower.to_str().unwrap(),
        "--upper",
        upper.to_str().unwrap(),
        "--space-limit",
        "10",
    ]);
    assert_eq!(code(&o), 14, "{}", stderr(&o));
    assert!(!lower.join("big").exists());
}

#[test]
fn policy_dump_is_data_on_stdout() {
    let o = Env::new().cue(&["policy", "dump"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).ends_with("DEFAULT Deny\n"));
    assert!(stderr(&o).is_empty());
}

#[test]
fn bench_writes_json_and_csv() {
    let env = Env::new();
    let out = env.path("r.json");
    let csv = env.path("r.csv");
    let o = env.cue(&[
        "bench",
        "startup",
        "-n",
        "3",
        "--backend",
        "sandbox",
        "--out",
        out.to_str().unwrap(),
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["n_iterations"], 3);
    let csv = fs::read_to_string(&csv).unwrap();
    assert_eq!(csv.lines().next(), Some("scenario,iteration,micros"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn login_deploy_release() {
    let env = Env::new();
    let host = env.path("host");
    let host = host.to_str().unwrap();
    let o = env.cue(&["login", "alice", "--node-root", host, "--backend", "sandbox"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    fs::write(env.path("shared/users/alice/upper/marker"), "x").unwrap();

    let nodes = env.path("nodes.json");
    let manifest = serde_json::json!([
        {"node_id": "n1", "node_root": host},
        {"node_id": "n2", "node_root": host},
    ]);
    fs::write(&nodes, manifest.to_string()).unwrap();
    let nodes = nodes.to_str().unwrap();

    let o = env.cue(&["deploy", "alice", "--nodes", nodes, "--format", "json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let result: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(result["nodes"].as_array().unwrap().len(), 2);
    assert!(result["nodes"].as_array().unwrap().iter().all(|n| n["status"] == "Attached"));

    let o = env.cue(&["release", "alice", "--nodes", nodes]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o), "n1 Released\nn2 Released\n");
    assert_eq!(fs::read_to_string(env.path("shared/users/alice/upper/marker")).unwrap(), "x");
    assert_eq!(code(&env.cue(&["release", "alice", "--nodes", nodes])), 3);

    let o = env.cue(&["deploy", "bob", "--nodes", nodes]);
    assert_ne!(code(&o), 0);
}
