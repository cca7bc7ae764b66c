//! `cue`: per-user layered environments on a shared machine.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cue_core::bench::{self, BenchError, BenchReport, BenchSettings, StressOp, StressSpec};
use cue_core::caps;
use cue_core::cluster::{self, ClusterError, JobHooks, NodeHandle, NodeStatus, SharedLayout};
use cue_core::commit::{self, CommitError, CommitOptions, RecoveryAction};
use cue_core::exec::{kernel, Backend, ExecError};
use cue_core::lifecycle::{self, LifecycleError};
use cue_core::plan::{sandbox_update_config, ContainerConfig, ContainerKind, LayerDirs, PlanError, ROOT_SANDBOX_USER};
use cue_core::state::{Registry, StateError, DEFAULT_STATE_ROOT, STATE_ROOT_ENV};

const EXIT_HELP: &str = "\
Exit codes:
  0   success
  1   other failure
  2   usage error
  3   not found
  10  privilege required
  11  setup step failed
  12  duplicate container or registry conflict
  13  lock busy
  14  commit staging failed, lower untouched";

#[derive(Parser)]
#[command(name = "cue", version, about = "Per-user layered system environments", after_help = EXIT_HELP)]
struct Cli {
    /// Registry and layer storage.
    #[arg(long, global = true, env = STATE_ROOT_ENV, default_value = DEFAULT_STATE_ROOT)]
    state_root: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Create and register a user container.
    Create(CreateArgs),
    /// Run a command in a user's container.
    Enter(EnterArgs),
    /// Merge an upper layer into its lower layer.
    Commit(CommitArgs),
    /// Attach the shared upper layer on the login node.
    Login(LoginArgs),
    /// Attach a user's shared upper layer on compute nodes.
    Deploy(DeployArgs),
    /// Detach a user's layer from compute nodes.
    Release(ReleaseArgs),
    /// Run a benchmark and print its report.
    Bench(BenchArgs),
    /// Inspect capability policies.
    Policy {
        #[command(subcommand)]
        action: PolicyCmd,
    },
    /// List registered containers.
    List {
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Remove a container, its upper layer and its record.
    Destroy(DestroyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Kernel,
    Sandbox,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Kernel => Backend::Kernel,
            BackendArg::Sandbox => Backend::Sandbox,
        }
    }
}

/// Kernel when privileged, otherwise sandbox.
fn pick_backend(arg: Option<BackendArg>) -> Backend {
    match arg {
        Some(b) => b.into(),
        None if kernel::check_privilege().is_ok() => Backend::Kernel,
        None => Backend::Sandbox,
    }
}

#[derive(Args)]
struct Target {
    /// User name; omit with --sandbox-of-root.
    #[arg(required_unless_present = "sandbox_of_root")]
    user: Option<String>,
    /// Act on the administrator's update sandbox.
    #[arg(long, conflicts_with = "user")]
    sandbox_of_root: bool,
}

impl Target {
    fn resolve(&self) -> (String, ContainerKind) {
        match &self.user {
            Some(u) => (u.clone(), ContainerKind::User),
            None => (ROOT_SANDBOX_USER.to_owned(), ContainerKind::RootSandbox),
        }
    }
}

#[derive(Args)]
struct CreateArgs {
    #[command(flatten)]
    target: Target,
    #[arg(long)]
    hostname: Option<String>,
    /// Defaults to kernel when privileged, sandbox otherwise.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Lower layer.
    #[arg(long, default_value = "/")]
    host_root: PathBuf,
}

#[derive(Args)]
struct EnterArgs {
    #[command(flatten)]
    target: Target,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Command to run instead of the configured entry command.
    #[arg(last = true)]
    argv: Vec<String>,
}

#[derive(Args)]
struct CommitArgs {
    /// Merge the update sandbox's upper layer into its host root.
    #[arg(long, conflicts_with_all = ["lower", "upper"])]
    sandbox_of_root: bool,
    #[arg(long, requires = "upper")]
    lower: Option<PathBuf>,
    #[arg(long, requires = "lower")]
    upper: Option<PathBuf>,
    /// Only finish or abort interrupted commits.
    #[arg(long, conflicts_with_all = ["sandbox_of_root", "lower"])]
    recover_only: bool,
    /// Fail staging when payloads exceed this many bytes.
    #[arg(long)]
    space_limit: Option<u64>,
}

#[derive(Args)]
struct SharedArgs {
    /// Shared storage holding every user's upper layer.
    #[arg(long, env = cluster::SHARED_ROOT_ENV)]
    shared_root: PathBuf,
}

#[derive(Args)]
struct LoginArgs {
    user: String,
    #[command(flatten)]
    shared: SharedArgs,
    #[arg(long, default_value = "/")]
    node_root: PathBuf,
    #[arg(long, default_value = "login")]
    node_id: String,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
}

#[derive(Args)]
struct DeployArgs {
    user: String,
    #[command(flatten)]
    shared: SharedArgs,
    /// JSON list of {"node_id", "node_root"} objects.
    #[arg(long)]
    nodes: PathBuf,
    /// Shell command run on each node after attaching.
    #[arg(long)]
    pre_job: Option<String>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct ReleaseArgs {
    user: String,
    #[arg(long)]
    nodes: PathBuf,
    /// Shell command run on each node before detaching.
    #[arg(long)]
    post_job: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Startup,
    SmallRead,
    SmallWrite,
    BigRead,
    BigWrite,
    Exec,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(value_enum)]
    scenario: Scenario,
    /// Containers, iterations or repetitions.
    #[arg(short = 'n', default_value_t = 10)]
    n: usize,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write samples as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Scratch directory; defaults to <state-root>/bench.
    #[arg(long)]
    scratch: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    small_count: usize,
    #[arg(long, default_value_t = 16)]
    small_size: usize,
    /// Big file size in bytes; at least 64 MiB.
    #[arg(long, default_value_t = 1 << 30)]
    big_size: u64,
    #[arg(long, default_value_t = 0x5eed)]
    seed: u64,
    /// For exec: time only the bare command.
    #[arg(long)]
    outside: bool,
    /// For exec: the command to time.
    #[arg(last = true)]
    argv: Vec<String>,
}

#[derive(Subcommand)]
enum PolicyCmd {
    /// Print a policy table, one capability per line.
    Dump {
        /// The update sandbox's policy instead of the user policy.
        #[arg(long)]
        sandbox_of_root: bool,
    },
}

#[derive(Args)]
struct DestroyArgs {
    #[command(flatten)]
    target: Target,
    /// Confirm removal of the upper layer.
    #[arg(long)]
    yes: bool,
}

/// `println!` that ignores a closed standard output.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

fn state_code(e: &StateError) -> u8 {
    match e {
        StateError::Duplicate { .. } => 12,
        StateError::NotFound { .. } => 3,
        StateError::WouldBlock(_) => 13,
        _ => 1,
    }
}

fn exec_code(e: &ExecError) -> u8 {
    match e {
        ExecError::PrivilegeRequired(_) => 10,
        ExecError::StepFailed { .. } => 11,
        ExecError::RegistryConflict(_) => 12,
        ExecError::NotFound(_) => 3,
        ExecError::State(s) => state_code(s),
        _ => 1,
    }
}

fn lifecycle_code(e: &LifecycleError) -> u8 {
    match e {
        LifecycleError::Plan(_) => 2,
        LifecycleError::Exec(e) => exec_code(e),
        LifecycleError::State(e) => state_code(e),
        _ => 1,
    }
}

macro_rules! failure_from {
    ($t:ty, $f:expr) => {
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::new($f(&e), e.to_string())
            }
        }
    };
}

failure_from!(StateError, state_code);
failure_from!(ExecError, exec_code);
failure_from!(LifecycleError, lifecycle_code);
failure_from!(PlanError, |_: &PlanError| 2);
failure_from!(CommitError, |e: &CommitError| match e {
    CommitError::LockBusy => 13,
    CommitError::Stage { .. } => 14,
    CommitError::State(s) => state_code(s),
    _ => 1,
});
failure_from!(ClusterError, |e: &ClusterError| match e {
    ClusterError::Manifest { .. } => 2,
    ClusterError::NoUpper { .. } | ClusterError::NotFound { .. } => 3,
    ClusterError::Conflict { .. } => 12,
    ClusterError::Lifecycle(l) => lifecycle_code(l),
    ClusterError::State(s) => state_code(s),
    _ => 1,
});
failure_from!(BenchError, |e: &BenchError| match e {
    BenchError::Busy => 13,
    BenchError::InvalidSpec(_) => 2,
    BenchError::CommandNotFound(_) => 3,
    BenchError::Plan(_) => 2,
    BenchError::Exec(x) => exec_code(x),
    BenchError::State(s) => state_code(s),
    _ => 1,
});

type Outcome = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("cue: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let registry = || Registry::open(&cli.state_root).map_err(Failure::from);
    match cli.command {
        Cmd::Create(args) => create(&registry()?, args),
        Cmd::Enter(args) => {
            let (user, kind) = args.target.resolve();
            let argv = (!args.argv.is_empty()).then_some(args.argv);
            let code = lifecycle::enter(&registry()?, &user, kind, pick_backend(args.backend), argv)?;
            Ok(code.clamp(0, 255) as u8)
        }
        Cmd::Commit(args) => commit_cmd(&registry()?, args),
        Cmd::Login(args) => {
            let layout = SharedLayout::new(args.shared.shared_root);
            let node = NodeHandle::new(args.node_id, args.node_root);
            let rec = cluster::attach_login(&layout, &registry()?, &args.user, &node, pick_backend(args.backend))?;
            say!("{} {} {}", rec.user, rec.hostname, rec.upper_dir.display());
            Ok(0)
        }
        Cmd::Deploy(args) => deploy(&registry()?, args),
        Cmd::Release(args) => release(&registry()?, args),
        Cmd::Bench(args) => bench_cmd(&registry()?, &cli.state_root, args),
        Cmd::Policy {
            action: PolicyCmd::Dump { sandbox_of_root },
        } => {
            let policy = if sandbox_of_root {
                caps::root_sandbox_policy()
            } else {
                caps::user_policy()
            };
            let _ = std::io::stdout().write_all(policy.dump().as_bytes());
            Ok(0)
        }
        Cmd::List { format } => {
            let records = registry()?.list()?;
            match format {
                Format::Json => say!("{}", serde_json::to_string_pretty(&records).expect("records serialize")),
                Format::Text => {
                    for r in records {
                        say!(
                            "{}\t{}\t{:?}\t{}\t{}",
                            r.user,
                            r.kind.as_str(),
                            r.status,
                            r.hostname,
                            r.upper_dir.display()
                        );
                    }
                }
            }
            Ok(0)
        }
        Cmd::Destroy(args) => {
            if !args.yes {
                return Err(Failure::new(2, "destroy removes the upper layer; pass --yes to confirm"));
            }
            let (user, kind) = args.target.resolve();
            let rec = lifecycle::destroy(&registry()?, &user, kind)?;
            say!("destroyed {} {}", rec.user, rec.kind.as_str());
            Ok(0)
        }
    }
}

fn create(registry: &Registry, args: CreateArgs) -> Outcome {
    let host_root = fs::canonicalize(&args.host_root)
        .map_err(|e| Failure::new(3, format!("host root {}: {e}", args.host_root.display())))?;
    let (user, kind) = args.target.resolve();
    let base = registry.root().join("layers").join(&user);
    let mut config = match kind {
        ContainerKind::User => ContainerConfig::for_user(&user, host_root, LayerDirs::under(&base), registry.root()),
        ContainerKind::RootSandbox => sandbox_update_config(&host_root, &base),
    };
    if let Some(h) = args.hostname {
        config.hostname = h;
    }
    config.validate()?;
    let created = lifecycle::create(registry, &config, pick_backend(args.backend))?;
    say!(
        "created {} {} ({} backend, {} steps)",
        created.record.user,
        created.record.kind.as_str(),
        created.report.backend,
        created.report.steps.len()
    );
    Ok(0)
}

fn commit_cmd(registry: &Registry, args: CommitArgs) -> Outcome {
    if args.recover_only {
        for action in commit::recover(registry)? {
            match action {
                RecoveryAction::Aborted(id) => say!("aborted {id}"),
                RecoveryAction::Replayed(id) => say!("replayed {id}"),
                RecoveryAction::RemovedOrphan(id) => say!("removed orphan {id}"),
            }
        }
        return Ok(0);
    }
    let (lower, upper) = if args.sandbox_of_root {
        let rec = registry
            .lookup(ROOT_SANDBOX_USER, ContainerKind::RootSandbox)?
            .ok_or_else(|| Failure::new(3, "no update sandbox; run `cue create --sandbox-of-root` first"))?;
        let config = lifecycle::load_config(&rec.work_dir)?;
        (config.host_root, config.upper_dir)
    } else {
        match (args.lower, args.upper) {
            (Some(l), Some(u)) => (l, u),
            _ => return Err(Failure::new(2, "pass --sandbox-of-root, --recover-only or --lower with --upper")),
        }
    };
    let options = CommitOptions {
        space_limit: args.space_limit,
    };
    let mut hook = commit::env_fault_hook();
    let outcome = commit::commit(registry, &lower, &upper, &options, &mut hook)?;
    match outcome.id {
        Some(id) => say!("committed {id} ({} entries)", outcome.journal.entries.len()),
        None => say!("nothing to commit"),
    }
    Ok(0)
}

fn load_nodes(path: &Path) -> Result<Vec<NodeHandle>, Failure> {
    Ok(cluster::load_manifest(path)?)
}

fn deploy(registry: &Registry, args: DeployArgs) -> Outcome {
    let nodes = load_nodes(&args.nodes)?;
    let layout = SharedLayout::new(args.shared.shared_root);
    let hooks = JobHooks {
        pre_job: args.pre_job,
        post_job: None,
    };
    let result = cluster::deploy_job(&layout, registry.root(), &args.user, &nodes, &hooks)?;
    match args.format {
        Format::Json => say!("{}", serde_json::to_string_pretty(&result).expect("result serializes")),
        Format::Text => {
            for n in &result.nodes {
                match &n.status {
                    NodeStatus::Attached => say!("{} Attached", n.node_id),
                    NodeStatus::Failed(reason) => say!("{} Failed {reason}", n.node_id),
                }
            }
        }
    }
    Ok(if result.attached() == result.nodes.len() { 0 } else { 11 })
}

fn release(registry: &Registry, args: ReleaseArgs) -> Outcome {
    let nodes = load_nodes(&args.nodes)?;
    let hooks = JobHooks {
        pre_job: None,
        post_job: args.post_job,
    };
    let mut code = 0;
    for (node_id, result) in cluster::release_job(registry.root(), &args.user, &nodes, &hooks) {
        match result {
            Ok(()) => say!("{node_id} Released"),
            Err(e) => {
                let f = Failure::from(e);
                eprintln!("cue: {}", f.message);
                if code == 0 {
                    code = f.code;
                }
            }
        }
    }
    Ok(code)
}

fn bench_cmd(registry: &Registry, state_root: &Path, args: BenchArgs) -> Outcome {
    let scratch = args.scratch.clone().unwrap_or_else(|| state_root.join("bench"));
    let settings = BenchSettings::new(pick_backend(args.backend), scratch);
    let op = match args.scenario {
        Scenario::SmallRead => Some(StressOp::SmallRead),
        Scenario::SmallWrite => Some(StressOp::SmallWrite),
        Scenario::BigRead => Some(StressOp::BigRead),
        Scenario::BigWrite => Some(StressOp::BigWrite),
        _ => None,
    };
    let report = match (args.scenario, op) {
        (Scenario::Startup, _) => bench::bench_startup(registry, args.n, &settings)?,
        (Scenario::Exec, _) => {
            if args.argv.is_empty() {
                return Err(Failure::new(2, "exec needs a command after --"));
            }
            bench::bench_exec(registry, &args.argv, !args.outside, args.n, &settings)?
        }
        (_, Some(op)) => {
            let spec = StressSpec {
                op,
                small_count: args.small_count,
                small_size: args.small_size,
                big_size: args.big_size,
                iterations: args.n,
                seed: args.seed,
            };
            bench::bench_file_stress(registry, &spec, &settings)?
        }
        (_, None) => unreachable!("every stress scenario maps to an operation"),
    };
    emit_report(&report, &args)?;
    Ok(if report.incomplete { 11 } else { 0 })
}

fn emit_report(report: &BenchReport, args: &BenchArgs) -> Result<(), Failure> {
    let write = |path: &Path, text: &str| {
        fs::write(path, text).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))
    };
    if let Some(path) = &args.csv {
        write(path, &report.to_csv())?;
    }
    let text = match args.format {
        Format::Json => report.to_json() + "\n",
        Format::Text => summary_text(report),
    };
    match &args.out {
        Some(path) => write(path, &text),
        None => {
            let _ = std::io::stdout().write_all(text.as_bytes());
            Ok(())
        }
    }
}

fn summary_text(r: &BenchReport) -> String {
    let mut out = format!("{} ({}), {} iterations\n", r.scenario, r.backend, r.n_iterations);
    if let Some(s) = &r.summary {
        out += &format!("  mean {:.1} us, median {:.1} us, p95 {:.1} us\n", s.mean, s.median, s.p95);
    }
    if let Some(s) = &r.baseline_summary {
        out += &format!("  bare mean {:.1} us, median {:.1} us\n", s.mean, s.median);
    }
    if let Some(x) = r.overhead_ratio {
        out += &format!("  overhead {:+.2}%\n", x * 100.0);
    }
    if let Some(b) = r.space_overhead_bytes {
        out += &format!("  footprint {b} bytes per container\n");
    }
    if let Some(e) = &r.error {
        out += &format!("  incomplete: {e}\n");
    }
    out
}
