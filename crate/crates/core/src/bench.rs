//! Startup and file-operation measurements.
//!
//! Every benchmark does one untimed warm-up, then samples with a monotonic
//! clock at microsecond resolution. Layered runs are compared against the
//! same work on plain directories, and the result is a [`BenchReport`] that
//! serializes to JSON or CSV.
//!
//! Benchmarks hold the registry's commit lock while they run, so two of them
//! never overlap and a commit cannot disturb one.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::disk;
use crate::exec::{entry_env, kernel, sandbox, Backend, ExecError, Executor, SandboxView, ViewError};
use crate::plan::{plan_create, AccessMode, ContainerConfig, LayerDirs, PlanError};
use crate::state::{ContainerRecord, LockGuard, Registry, StateError};
use crate::NormPath;

const CHUNK: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("another benchmark or a commit holds the commit lock")]
    Busy,
    #[error("insufficient space: need {needed} bytes, {available} available")]
    InsufficientSpace { needed: u64, available: u64 },
    #[error("invalid benchmark spec: {0}")]
    InvalidSpec(String),
    #[error("command not found: {0}")]
    CommandNotFound(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> BenchError + '_ {
    move |source| BenchError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl Summary {
    /// Mean, median and nearest-rank 95th percentile. `None` when empty.
    pub fn of(samples: &[u64]) -> Option<Summary> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let mean = sorted.iter().map(|&s| s as f64).sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(Summary {
            mean,
            median,
            p95: sorted[rank - 1] as f64,
        })
    }
}

/// `scenario / baseline - 1`, defined only for a positive baseline mean.
pub fn overhead_ratio(scenario: &Summary, baseline: &Summary) -> Option<f64> {
    (baseline.mean > 0.0).then(|| scenario.mean / baseline.mean - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: String,
    pub backend: Backend,
    pub n_iterations: usize,
    /// Microseconds per iteration.
    pub samples: Vec<u64>,
    pub summary: Option<Summary>,
    pub total_us: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub baseline_samples: Vec<u64>,
    pub baseline_summary: Option<Summary>,
    pub overhead_ratio: Option<f64>,
    /// Largest per-container footprint, for startup runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space_overhead_bytes: Option<u64>,
    /// Exit code per sample, for command runs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exit_codes: Vec<i32>,
    pub incomplete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Reserved for numbers from external tools.
    #[serde(default)]
    pub comparison: Option<serde_json::Value>,
}

impl BenchReport {
    fn new(scenario: &str, backend: Backend, samples: Vec<u64>, baseline: Vec<u64>) -> Self {
        let summary = Summary::of(&samples);
        let baseline_summary = Summary::of(&baseline);
        let overhead_ratio = match (&summary, &baseline_summary) {
            (Some(s), Some(b)) => overhead_ratio(s, b),
            _ => None,
        };
        BenchReport {
            scenario: scenario.to_owned(),
            backend,
            n_iterations: samples.len(),
            total_us: samples.iter().sum(),
            samples,
            summary,
            baseline_samples: baseline,
            baseline_summary,
            overhead_ratio,
            space_overhead_bytes: None,
            exit_codes: Vec::new(),
            incomplete: false,
            error: None,
            comparison: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// `scenario,iteration,micros` rows; baseline rows use the scenario name
    /// with a `-baseline` suffix.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,iteration,micros\n");
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&format!("{},{i},{s}\n", self.scenario));
        }
        for (i, s) in self.baseline_samples.iter().enumerate() {
            out.push_str(&format!("{}-baseline,{i},{s}\n", self.scenario));
        }
        out
    }
}

/// Where and how benchmarks run.
#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub backend: Backend,
    /// Scratch space; everything created here is removed afterwards.
    pub scratch: PathBuf,
    /// Lower layer for containers.
    pub host_root: PathBuf,
}

impl BenchSettings {
    /// Kernel containers stack over `/`; sandbox containers over an empty
    /// directory in scratch, since a sandbox entry copies the whole view.
    pub fn new(backend: Backend, scratch: impl Into<PathBuf>) -> Self {
        let scratch = scratch.into();
        let host_root = match backend {
            Backend::Kernel => PathBuf::from("/"),
            Backend::Sandbox => scratch.join("host-root"),
        };
        BenchSettings {
            backend,
            scratch,
            host_root,
        }
    }

    fn prepare(&self, name: &str) -> Result<PathBuf, BenchError> {
        if self.backend == Backend::Kernel {
            kernel::check_privilege()?;
        }
        if self.host_root == self.scratch.join("host-root") {
            fs::create_dir_all(&self.host_root).map_err(io_at(&self.host_root))?;
        }
        let dir = self.scratch.join(name);
        disk::remove_any(&dir).map_err(io_at(&dir))?;
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        Ok(dir)
    }
}

fn lock(registry: &Registry) -> Result<LockGuard, BenchError> {
    match registry.acquire_commit_lock() {
        Ok(g) => Ok(g),
        Err(StateError::WouldBlock(_)) => Err(BenchError::Busy),
        Err(e) => Err(e.into()),
    }
}

struct Cleanup(PathBuf);

impl Drop for Cleanup {
    fn drop(&mut self) {
        let _ = disk::remove_any(&self.0);
    }
}

fn bench_config(state: &Path, user: &str, host_root: &Path) -> ContainerConfig {
    ContainerConfig::for_user(user, host_root, LayerDirs::under(&state.join("layers").join(user)), state)
}

fn micros(d: Duration) -> u64 {
    d.as_micros().min(u64::MAX as u128) as u64
}

/// Creates and tears down `n` fresh containers one after another, timing
/// planning plus execution of each. An executor error ends the run with the
/// samples gathered so far and `incomplete` set.
pub fn bench_startup(registry: &Registry, n: usize, settings: &BenchSettings) -> Result<BenchReport, BenchError> {
    if n == 0 {
        return Err(BenchError::InvalidSpec("n must be at least 1".into()));
    }
    let _lock = lock(registry)?;
    let dir = settings.prepare("startup")?;
    let _cleanup = Cleanup(dir.clone());
    let private = Registry::open(dir.join("state"))?;
    let mut samples = Vec::with_capacity(n);
    let mut space = 0u64;
    let mut failure = None;
    for i in 0..=n {
        match startup_once(&private, i, settings) {
            Ok((elapsed, bytes)) if i > 0 => {
                samples.push(elapsed);
                space = space.max(bytes);
            }
            Ok(_) => {}
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let mut report = BenchReport::new("startup", settings.backend, samples, Vec::new());
    report.space_overhead_bytes = Some(space);
    if let Some(e) = failure {
        report.incomplete = true;
        report.error = Some(e.to_string());
    }
    Ok(report)
}

fn startup_once(registry: &Registry, i: usize, settings: &BenchSettings) -> Result<(u64, u64), BenchError> {
    let config = bench_config(registry.root(), &format!("bench{i}"), &settings.host_root);
    let exec = Executor::new();
    let start = Instant::now();
    let plan = plan_create(&config)?;
    let (report, plan) = match settings.backend {
        Backend::Sandbox => (exec.execute(&plan, Backend::Sandbox)?, plan),
        Backend::Kernel => {
            let plan = plan.with_entry(vec!["/bin/true".into()]);
            (exec.execute(&plan, Backend::Kernel)?, plan)
        }
    };
    let elapsed = micros(start.elapsed());
    let handle = report.handle.expect("handle");
    match settings.backend {
        Backend::Sandbox => exec.teardown(&handle)?,
        Backend::Kernel => {
            exec.wait(&handle)?;
        }
    }
    let record = ContainerRecord::from_config(plan.config());
    registry.register(&record)?;
    let record_path = registry.record_path(&config.user, config.kind);
    let mut bytes = 0;
    for path in [&config.upper_dir, &config.work_dir, &record_path] {
        bytes += disk::disk_usage(path).map_err(io_at(path))?;
    }
    registry.remove(&config.user, config.kind)?;
    let base = config.upper_dir.parent().expect("layer base").to_owned();
    disk::remove_any(&base).map_err(io_at(&base))?;
    Ok((elapsed, bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StressOp {
    SmallRead,
    SmallWrite,
    BigRead,
    BigWrite,
}

impl StressOp {
    pub const ALL: [StressOp; 4] = [StressOp::SmallRead, StressOp::SmallWrite, StressOp::BigRead, StressOp::BigWrite];

    pub fn as_str(self) -> &'static str {
        match self {
            StressOp::SmallRead => "small-read",
            StressOp::SmallWrite => "small-write",
            StressOp::BigRead => "big-read",
            StressOp::BigWrite => "big-write",
        }
    }

    fn is_small(self) -> bool {
        matches!(self, StressOp::SmallRead | StressOp::SmallWrite)
    }

    fn is_write(self) -> bool {
        matches!(self, StressOp::SmallWrite | StressOp::BigWrite)
    }
}

impl std::fmt::Display for StressOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StressOp {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StressOp::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| BenchError::InvalidSpec(format!("unknown operation {s:?}")))
    }
}

pub const MIN_BIG_SIZE: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StressSpec {
    pub op: StressOp,
    pub small_count: usize,
    pub small_size: usize,
    pub big_size: u64,
    pub iterations: usize,
    pub seed: u64,
}

impl StressSpec {
    /// 10000 files of 16 bytes, or one 1 GiB file, sampled ten times.
    pub fn new(op: StressOp) -> Self {
        StressSpec {
            op,
            small_count: 10_000,
            small_size: 16,
            big_size: 1 << 30,
            iterations: 10,
            seed: 0x5eed,
        }
    }

    /// The same with the big file cut to 64 MiB.
    pub fn desk(op: StressOp) -> Self {
        StressSpec {
            big_size: MIN_BIG_SIZE,
            ..StressSpec::new(op)
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: &str| Err(BenchError::InvalidSpec(m.into()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.op.is_small() && self.small_count == 0 {
            return bad("small file count must be at least 1");
        }
        if !self.op.is_small() && self.big_size < MIN_BIG_SIZE {
            return bad("big file must be at least 64 MiB");
        }
        Ok(())
    }

    fn set_bytes(&self) -> u64 {
        if self.op.is_small() {
            self.small_count as u64 * self.small_size.max(1) as u64
        } else {
            self.big_size
        }
    }
}

/// Relative paths of the generated files.
pub fn file_set(spec: &StressSpec) -> Vec<PathBuf> {
    if spec.op.is_small() {
        (0..spec.small_count)
            .map(|i| PathBuf::from(format!("small/d{:03}/f{i:05}", i / 100)))
            .collect()
    } else {
        vec![PathBuf::from("big/data.bin")]
    }
}

/// Writes the seeded file set under `dir`. The same seed always produces
/// the same bytes.
pub fn generate_file_set(dir: &Path, spec: &StressSpec) -> Result<(), BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for rel in file_set(spec) {
        let path = dir.join(&rel);
        let parent = path.parent().expect("parent");
        fs::create_dir_all(parent).map_err(io_at(parent))?;
        let mut f = File::create(&path).map_err(io_at(&path))?;
        let mut remaining = if spec.op.is_small() {
            spec.small_size as u64
        } else {
            spec.big_size
        };
        let mut buf = vec![0u8; CHUNK.min(remaining as usize)];
        while remaining > 0 {
            let n = buf.len().min(remaining as usize);
            rng.fill_bytes(&mut buf[..n]);
            f.write_all(&buf[..n]).map_err(io_at(&path))?;
            remaining -= n as u64;
        }
    }
    Ok(())
}

fn available_bytes(dir: &Path) -> Result<u64, BenchError> {
    let st = nix::sys::statvfs::statvfs(dir).map_err(|e| BenchError::Io {
        path: dir.to_owned(),
        source: e.into(),
    })?;
    Ok(st.blocks_available() as u64 * st.fragment_size() as u64)
}

fn flip(buf: &mut [u8]) {
    for b in buf {
        *b = !*b;
    }
}

fn read_to_sink(mut f: File, buf: &mut [u8]) -> io::Result<u64> {
    let mut sink = io::sink();
    let mut total = 0;
    loop {
        let n = f.read(buf)?;
        if n == 0 {
            return Ok(total);
        }
        sink.write_all(&buf[..n])?;
        total += n as u64;
    }
}

fn flip_in_place(path: &Path, buf: &mut [u8]) -> io::Result<u64> {
    let mut f = OpenOptions::new().read(true).write(true).open(path)?;
    let mut total = 0;
    loop {
        let n = f.read(buf)?;
        if n == 0 {
            return Ok(total);
        }
        flip(&mut buf[..n]);
        f.seek(SeekFrom::Current(-(n as i64)))?;
        f.write_all(&buf[..n])?;
        total += n as u64;
    }
}

/// One side of a stress comparison.
trait Target {
    fn pass(&self, op: StressOp, buf: &mut [u8]) -> Result<(), BenchError>;
}

struct PlainDir {
    paths: Vec<PathBuf>,
}

impl Target for PlainDir {
    fn pass(&self, op: StressOp, buf: &mut [u8]) -> Result<(), BenchError> {
        for path in &self.paths {
            let r = if op.is_write() {
                flip_in_place(path, buf)
            } else {
                File::open(path).and_then(|f| read_to_sink(f, buf))
            };
            r.map_err(io_at(path))?;
        }
        Ok(())
    }
}

struct ViewTarget {
    view: SandboxView,
    paths: Vec<NormPath>,
}

impl Target for ViewTarget {
    fn pass(&self, op: StressOp, buf: &mut [u8]) -> Result<(), BenchError> {
        for path in &self.paths {
            if op.is_write() {
                self.view.rewrite(path, flip)?;
            } else {
                let f = self.view.open(path)?;
                read_to_sink(f, buf).map_err(|source| BenchError::Io {
                    path: path.to_string().into(),
                    source,
                })?;
            }
        }
        Ok(())
    }
}

struct OverlayMount(PathBuf);

impl OverlayMount {
    fn new(lower: &Path, upper: &Path, work: &Path, merged: &Path) -> Result<Self, BenchError> {
        let ovl = work.join(kernel::OVERLAY_WORK);
        fs::create_dir_all(&ovl).map_err(io_at(&ovl))?;
        let opts = kernel::overlay_options(lower, upper, work, AccessMode::ReadWrite);
        nix::mount::mount(
            Some("overlay"),
            merged,
            Some("overlay"),
            nix::mount::MsFlags::empty(),
            Some(opts.as_str()),
        )
        .map_err(|e| BenchError::Io {
            path: merged.to_owned(),
            source: e.into(),
        })?;
        Ok(OverlayMount(merged.to_owned()))
    }
}

impl Drop for OverlayMount {
    fn drop(&mut self) {
        let _ = nix::mount::umount2(&self.0, nix::mount::MntFlags::MNT_DETACH);
    }
}

/// Runs `spec.op` over identical file sets in a plain directory and in a
/// layered view whose lower holds the files. With the kernel backend the
/// view is a real overlay mount; with the sandbox backend it is a
/// [`SandboxView`]. Writes invert every byte; reads discard what they read.
pub fn bench_file_stress(
    registry: &Registry,
    spec: &StressSpec,
    settings: &BenchSettings,
) -> Result<BenchReport, BenchError> {
    spec.validate()?;
    let _lock = lock(registry)?;
    let dir = settings.prepare(&format!("stress-{}", spec.op))?;
    let _cleanup = Cleanup(dir.clone());
    let needed = spec.set_bytes() * 3;
    let available = available_bytes(&dir)?;
    if needed > available {
        return Err(BenchError::InsufficientSpace { needed, available });
    }
    let [bare, lower, upper, work, merged] = ["bare", "lower", "upper", "work", "merged"].map(|d| dir.join(d));
    for d in [&bare, &lower, &upper, &work, &merged] {
        fs::create_dir_all(d).map_err(io_at(d))?;
    }
    generate_file_set(&bare, spec)?;
    generate_file_set(&lower, spec)?;
    let rels = file_set(spec);
    let plain = PlainDir {
        paths: rels.iter().map(|r| bare.join(r)).collect(),
    };
    let _mount;
    let layered: Box<dyn Target> = match settings.backend {
        Backend::Kernel => {
            _mount = OverlayMount::new(&lower, &upper, &work, &merged)?;
            Box::new(PlainDir {
                paths: rels.iter().map(|r| merged.join(r)).collect(),
            })
        }
        Backend::Sandbox => Box::new(ViewTarget {
            view: SandboxView::new(&lower, &upper, &merged),
            paths: rels
                .iter()
                .map(|r| NormPath::parse(&format!("/{}", r.display())).expect("relative path"))
                .collect(),
        }),
    };
    let mut buf = vec![0u8; CHUNK];
    let time = |t: &dyn Target, buf: &mut [u8]| -> Result<u64, BenchError> {
        let start = Instant::now();
        t.pass(spec.op, buf)?;
        Ok(micros(start.elapsed()))
    };
    time(&plain, &mut buf)?;
    time(layered.as_ref(), &mut buf)?;
    let mut samples = Vec::with_capacity(spec.iterations);
    let mut baseline = Vec::with_capacity(spec.iterations);
    for i in 0..spec.iterations {
        if i % 2 == 0 {
            baseline.push(time(&plain, &mut buf)?);
            samples.push(time(layered.as_ref(), &mut buf)?);
        } else {
            samples.push(time(layered.as_ref(), &mut buf)?);
            baseline.push(time(&plain, &mut buf)?);
        }
    }
    drop(layered);
    Ok(BenchReport::new(spec.op.as_str(), settings.backend, samples, baseline))
}

/// Finds `program` the way the entry environment's `PATH` would.
pub fn resolve_command(program: &str) -> Option<PathBuf> {
    let is_exec = |p: &Path| {
        use std::os::unix::fs::PermissionsExt;
        p.metadata().map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0).unwrap_or(false)
    };
    if program.contains('/') {
        let p = PathBuf::from(program);
        return is_exec(&p).then_some(p);
    }
    let path = entry_env().into_iter().find(|(k, _)| k == "PATH").map(|(_, v)| v)?;
    path.split(':').map(|d| Path::new(d).join(program)).find(|p| is_exec(p))
}

fn run_bare(argv: &[String]) -> Result<(i32, u64), BenchError> {
    let start = Instant::now();
    let status = Command::new(&argv[0])
        .args(&argv[1..])
        .env_clear()
        .envs(entry_env())
        .status()
        .map_err(io_at(Path::new(&argv[0])))?;
    let elapsed = micros(start.elapsed());
    Ok((status.code().unwrap_or(-1), elapsed))
}

fn run_inside(dir: &Path, argv: &[String], settings: &BenchSettings) -> Result<(i32, u64), BenchError> {
    let config = bench_config(&dir.join("state"), "benchexec", &settings.host_root);
    let plan = plan_create(&config)?.with_entry(argv.to_vec());
    let exec = Executor::new();
    let result = match settings.backend {
        Backend::Sandbox => {
            let report = exec.execute(&plan, Backend::Sandbox)?;
            let timed = sandbox::run_entry_timed(plan.config());
            exec.teardown(report.handle.as_ref().expect("handle"))?;
            let (code, elapsed) = timed?;
            (code, micros(elapsed))
        }
        Backend::Kernel => {
            let start = Instant::now();
            let report = exec.execute(&plan, Backend::Kernel)?;
            let code = exec.wait(report.handle.as_ref().expect("handle"))?;
            let total = micros(start.elapsed());
            (code, total.saturating_sub(report.total_elapsed_us))
        }
    };
    let base = config.upper_dir.parent().expect("layer base").to_owned();
    disk::remove_any(&base).map_err(io_at(&base))?;
    Ok(result)
}

/// Times `argv` bare and, when `inside` is set, inside a fresh container per
/// repetition. Only the command's own run time is sampled; container setup
/// is excluded.
pub fn bench_exec(
    registry: &Registry,
    argv: &[String],
    inside: bool,
    repetitions: usize,
    settings: &BenchSettings,
) -> Result<BenchReport, BenchError> {
    let program = argv.first().ok_or_else(|| BenchError::InvalidSpec("empty command".into()))?;
    if repetitions == 0 {
        return Err(BenchError::InvalidSpec("repetitions must be at least 1".into()));
    }
    let resolved = resolve_command(program).ok_or_else(|| BenchError::CommandNotFound(program.clone()))?;
    let mut argv = argv.to_vec();
    argv[0] = resolved.to_string_lossy().into_owned();
    let _lock = lock(registry)?;
    let dir = settings.prepare("exec")?;
    let _cleanup = Cleanup(dir.clone());

    if !inside {
        run_bare(&argv)?;
        let mut samples = Vec::new();
        let mut codes = Vec::new();
        for _ in 0..repetitions {
            let (code, t) = run_bare(&argv)?;
            samples.push(t);
            codes.push(code);
        }
        let mut report = BenchReport::new("exec", settings.backend, samples, Vec::new());
        report.exit_codes = codes;
        return Ok(report);
    }

    run_bare(&argv)?;
    run_inside(&dir, &argv, settings)?;
    let mut samples = Vec::new();
    let mut baseline = Vec::new();
    let mut codes = Vec::new();
    for i in 0..repetitions {
        let inside = |codes: &mut Vec<i32>, samples: &mut Vec<u64>| -> Result<(), BenchError> {
            let (code, t) = run_inside(&dir, &argv, settings)?;
            codes.push(code);
            samples.push(t);
            Ok(())
        };
        if i % 2 == 0 {
            baseline.push(run_bare(&argv)?.1);
            inside(&mut codes, &mut samples)?;
        } else {
            inside(&mut codes, &mut samples)?;
            baseline.push(run_bare(&argv)?.1);
        }
    }
    let mut report = BenchReport::new("exec", settings.backend, samples, baseline);
    report.exit_codes = codes;
    Ok(report)
}
