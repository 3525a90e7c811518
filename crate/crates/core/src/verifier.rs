//! Sandboxed execution of candidate programs and five-way verdict
//! classification.
//!
//! A program is judged in two phases. First a parse-only compile gate
//! (`<interpreter> -m py_compile`) — interpreted languages still distinguish
//! `CompileError` from `RuntimeError`, so syntax problems are caught before
//! anything runs. Then each test case executes in a fresh temporary working
//! directory with a cleared environment, optional address-space and file-size
//! limits, and (by default) an empty network namespace. Classification
//! short-circuits on the first failing test.
//!
//! Environment problems (missing interpreter, sandbox setup failure) are
//! fatal errors, never verdicts: a broken judge must not masquerade as a
//! broken program.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, TestCase};
use crate::counters::record_execution;
use crate::error::{Error, Result};
use crate::reward::RewardProfile;

/// Environment variable overriding the interpreter command template.
pub const INTERPRETER_ENV: &str = "GROUPRL_INTERPRETER";

/// Placeholder in the interpreter command template replaced by the path of
/// the program under test.
pub const SOURCE_PLACEHOLDER: &str = "{source}";

/// Minimum wall budget for the parse-only compile gate. Parsing a short
/// program is interpreter startup plus microseconds, so this floor never
/// slows an honest compile down; it only keeps aggressive per-test budgets
/// (or a loaded machine) from turning startup jitter into CompileError.
const COMPILE_GATE_MIN_WALL: Duration = Duration::from_secs(2);

/// Execution outcome of one candidate program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    WrongAnswer,
    TimeLimit,
    RuntimeError,
    CompileError,
}

impl Verdict {
    pub const ALL: [Verdict; 5] = [
        Verdict::Accepted,
        Verdict::WrongAnswer,
        Verdict::TimeLimit,
        Verdict::RuntimeError,
        Verdict::CompileError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Accepted => "accepted",
            Verdict::WrongAnswer => "wrong_answer",
            Verdict::TimeLimit => "time_limit",
            Verdict::RuntimeError => "runtime_error",
            Verdict::CompileError => "compile_error",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Verdict> {
        Verdict::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown verdict {s:?}")))
    }
}

/// Resource limits and interpreter configuration for one execution.
#[derive(Debug, Clone)]
pub struct ExecLimits {
    /// Wall-clock budget per test case (and for the compile gate).
    pub wall_time_per_test: Duration,
    /// Optional address-space cap for the child process.
    pub memory_bytes: Option<u64>,
    /// Command template; `{source}` is replaced by the program path. If the
    /// placeholder is absent the path is appended as the last argument.
    pub interpreter_command: String,
    /// Unshare the network namespace for child processes. On unprivileged
    /// hosts this requires user namespaces; disable explicitly if setup
    /// fails rather than silently skipping isolation.
    pub isolate_network: bool,
    /// Captured stdout/stderr are truncated beyond this many bytes.
    pub max_output_bytes: usize,
}

impl Default for ExecLimits {
    fn default() -> Self {
        ExecLimits {
            wall_time_per_test: Duration::from_secs(2),
            memory_bytes: Some(512 << 20),
            interpreter_command: format!("python3 {SOURCE_PLACEHOLDER}"),
            isolate_network: true,
            max_output_bytes: 1 << 20,
        }
    }
}

impl ExecLimits {
    /// Apply the `GROUPRL_INTERPRETER` override if set and non-empty.
    pub fn with_env_override(self) -> Self {
        let value = std::env::var(INTERPRETER_ENV).ok();
        self.with_override(value.as_deref())
    }

    fn with_override(mut self, value: Option<&str>) -> Self {
        if let Some(cmd) = value {
            if !cmd.trim().is_empty() {
                self.interpreter_command = cmd.to_string();
            }
        }
        self
    }

    fn validate(&self) -> Result<()> {
        if self.wall_time_per_test.is_zero() {
            return Err(Error::Config("wall_time_per_test must be positive".into()));
        }
        if self.interpreter_command.trim().is_empty() {
            return Err(Error::Config("interpreter_command must not be empty".into()));
        }
        Ok(())
    }
}

/// Interpreter template resolved to concrete argv vectors.
#[derive(Debug, Clone)]
struct ResolvedInterpreter {
    /// Absolute path of the interpreter binary.
    program: PathBuf,
    /// Template arguments, still containing the `{source}` placeholder.
    args: Vec<String>,
}

impl ResolvedInterpreter {
    fn from_template(template: &str) -> Result<ResolvedInterpreter> {
        let mut parts = template.split_whitespace();
        let program = parts.next().ok_or_else(|| {
            Error::Config("interpreter_command must name a program".to_string())
        })?;
        Ok(ResolvedInterpreter {
            program: resolve_program(program)?,
            args: parts.map(str::to_string).collect(),
        })
    }

    /// argv (after the program) for running `source` against a test.
    fn run_args(&self, source: &Path) -> Vec<std::ffi::OsString> {
        let mut argv: Vec<std::ffi::OsString> = Vec::new();
        let mut substituted = false;
        for arg in &self.args {
            if arg == SOURCE_PLACEHOLDER {
                argv.push(source.as_os_str().to_os_string());
                substituted = true;
            } else {
                argv.push(arg.into());
            }
        }
        if !substituted {
            argv.push(source.as_os_str().to_os_string());
        }
        argv
    }

    /// argv for the parse-only compile gate: template flags (minus the
    /// source placeholder) + `-m py_compile <source>`.
    fn compile_args(&self, source: &Path) -> Vec<std::ffi::OsString> {
        let mut argv: Vec<std::ffi::OsString> = self
            .args
            .iter()
            .filter(|a| *a != SOURCE_PLACEHOLDER)
            .map(Into::into)
            .collect();
        argv.push("-m".into());
        argv.push("py_compile".into());
        argv.push(source.as_os_str().to_os_string());
        argv
    }
}

/// Locate `program` on PATH (or verify an explicit path) and require the
/// executable bit. Children run with a cleared environment, so the lookup
/// must happen here, in the parent.
fn resolve_program(program: &str) -> Result<PathBuf> {
    use std::os::unix::fs::PermissionsExt;

    let is_executable = |p: &Path| {
        p.metadata()
            .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
            .unwrap_or(false)
    };
    if program.contains('/') {
        let path = PathBuf::from(program);
        if is_executable(&path) {
            return Ok(path);
        }
        return Err(Error::Environment(format!(
            "interpreter {program:?} is missing or not executable"
        )));
    }
    let path_var = std::env::var_os("PATH").unwrap_or_default();
    for dir in std::env::split_paths(&path_var) {
        let candidate = dir.join(program);
        if is_executable(&candidate) {
            return Ok(candidate);
        }
    }
    Err(Error::Environment(format!("interpreter {program:?} not found on PATH")))
}

/// Compare judge output to the expectation, ignoring trailing whitespace on
/// each line and trailing blank lines — the usual competitive-judge rule, so
/// `print` output matches expectations authored without a final newline.
pub(crate) fn normalize_output(text: &str) -> String {
    let mut lines: Vec<&str> = text.lines().map(str::trim_end).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines.join("\n")
}

fn outputs_match(actual: &str, expected: &str) -> bool {
    normalize_output(actual) == normalize_output(expected)
}

/// Configure sandbox syscalls that must run between fork and exec.
fn sandbox_pre_exec(cmd: &mut Command, limits: &ExecLimits) {
    use std::os::unix::process::CommandExt;

    let memory = limits.memory_bytes;
    let isolate = limits.isolate_network;
    // SAFETY: the closure only calls async-signal-safe libc functions
    // (unshare, setrlimit) between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            if isolate && libc::unshare(libc::CLONE_NEWNET) != 0 {
                return Err(std::io::Error::last_os_error());
            }
            let set = |resource: libc::__rlimit_resource_t, value: u64| {
                let lim = libc::rlimit { rlim_cur: value, rlim_max: value };
                if libc::setrlimit(resource, &lim) != 0 {
                    return Err(std::io::Error::last_os_error());
                }
                Ok(())
            };
            if let Some(bytes) = memory {
                set(libc::RLIMIT_AS, bytes)?;
            }
            set(libc::RLIMIT_CORE, 0)?;
            set(libc::RLIMIT_FSIZE, 16 << 20)?;
            Ok(())
        });
    }
}

struct RunOutput {
    status: Option<ExitStatus>,
    stdout: String,
}

/// Spawn one sandboxed process, feed stdin, capture stdout, enforce the
/// wall-clock limit. `status: None` means the limit fired and the child was
/// killed.
fn run_sandboxed(
    interp_program: &Path,
    argv: &[std::ffi::OsString],
    workdir: &Path,
    stdin_data: &[u8],
    limits: &ExecLimits,
    wall: Duration,
) -> Result<RunOutput> {
    let mut cmd = Command::new(interp_program);
    cmd.args(argv)
        .current_dir(workdir)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .env_clear()
        .env("PATH", "/usr/local/bin:/usr/bin:/bin")
        .env("HOME", workdir)
        .env("TMPDIR", workdir)
        .env("LC_ALL", "C.UTF-8")
        .env("PYTHONHASHSEED", "0")
        .env("PYTHONIOENCODING", "utf-8");
    sandbox_pre_exec(&mut cmd, limits);

    let mut child = cmd.spawn().map_err(|e| {
        Error::Environment(format!(
            "failed to launch interpreter {}: {e}",
            interp_program.display()
        ))
    })?;

    let mut stdin_pipe = child.stdin.take().expect("stdin piped");
    let stdin_bytes = stdin_data.to_vec();
    let writer = std::thread::spawn(move || {
        // The program may exit (or crash) without reading stdin; a broken
        // pipe here is its problem, not ours.
        let _ = stdin_pipe.write_all(&stdin_bytes);
        drop(stdin_pipe);
    });

    let mut stdout_pipe = child.stdout.take().expect("stdout piped");
    let cap = limits.max_output_bytes;
    let reader = std::thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match stdout_pipe.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = cap.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                    // Keep draining past the cap so the child never blocks
                    // on a full pipe and turns a spam loop into TimeLimit.
                }
            }
        }
        kept
    });

    let status = wait_with_deadline(&mut child, Instant::now() + wall)?;
    if status.is_none() {
        let _ = child.kill();
        let _ = child.wait();
    }
    let _ = writer.join();
    let stdout = reader.join().unwrap_or_default();
    Ok(RunOutput { status, stdout: String::from_utf8_lossy(&stdout).into_owned() })
}

fn wait_with_deadline(child: &mut Child, deadline: Instant) -> Result<Option<ExitStatus>> {
    loop {
        if let Some(status) = child.try_wait().map_err(Error::Io)? {
            return Ok(Some(status));
        }
        if Instant::now() >= deadline {
            return Ok(None);
        }
        std::thread::sleep(Duration::from_millis(2));
    }
}

/// Execute `source` against `tests` and classify into exactly one verdict.
///
/// Gate order (and precedence): CompileError, then per test in order
/// TimeLimit / RuntimeError / WrongAnswer, short-circuiting on the first
/// failure; Accepted only if every test's normalized output matches.
pub fn verify(source: &str, tests: &[TestCase], limits: &ExecLimits) -> Result<Verdict> {
    limits.validate()?;
    if tests.is_empty() {
        return Err(Error::Validation("verify requires at least one test case".into()));
    }
    let interp = ResolvedInterpreter::from_template(&limits.interpreter_command)?;
    record_execution();

    let workdir = tempfile::Builder::new()
        .prefix("grouprl-judge-")
        .tempdir()
        .map_err(|e| Error::Environment(format!("sandbox setup failed: {e}")))?;
    let source_path = workdir.path().join("main.py");
    std::fs::write(&source_path, source).map_err(|e| Error::io_at(&source_path, e))?;

    // Phase 1: parse-only compile gate. A gate that hangs or crashes still
    // resolves to CompileError — nothing user-visible has executed yet. The
    // gate gets its own wall floor: compile time does not scale with the
    // per-test budget, and inheriting a tight test budget would let
    // interpreter startup jitter under load masquerade as CompileError.
    let compile_wall = limits.wall_time_per_test.max(COMPILE_GATE_MIN_WALL);
    let compile = run_sandboxed(
        &interp.program,
        &interp.compile_args(&source_path),
        workdir.path(),
        b"",
        limits,
        compile_wall,
    )?;
    match compile.status {
        Some(status) if status.success() => {}
        _ => return Ok(Verdict::CompileError),
    }

    // Phase 2: run tests in order, first failure decides.
    let run_args = interp.run_args(&source_path);
    for test in tests {
        let run = run_sandboxed(
            &interp.program,
            &run_args,
            workdir.path(),
            test.input.as_bytes(),
            limits,
            limits.wall_time_per_test,
        )?;
        let Some(status) = run.status else {
            return Ok(Verdict::TimeLimit);
        };
        if !status.success() {
            return Ok(Verdict::RuntimeError);
        }
        if !outputs_match(&run.stdout, &test.expected_output) {
            return Ok(Verdict::WrongAnswer);
        }
    }
    Ok(Verdict::Accepted)
}

/// Options for [`label_corpus`].
#[derive(Debug, Clone)]
pub struct LabelOptions {
    /// Worker threads for parallel verification (≥ 1).
    pub workers: usize,
    /// Re-verify solutions that already carry a verdict.
    pub force: bool,
    /// Where to record per-solution progress (JSONL of
    /// `{"solution_index":int,"verdict":str}`); written even on abort so a
    /// rerun can resume without repeating finished executions.
    pub progress_path: Option<PathBuf>,
    pub reward_profile: RewardProfile,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions {
            workers: 1,
            force: false,
            progress_path: None,
            reward_profile: RewardProfile::default(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ProgressEntry {
    solution_index: usize,
    verdict: Verdict,
}

fn write_progress(path: &Path, entries: &[(usize, Verdict)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(file);
    for &(solution_index, verdict) in entries {
        serde_json::to_writer(&mut w, &ProgressEntry { solution_index, verdict })?;
        w.write_all(b"\n").map_err(|e| Error::io_at(path, e))?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

/// Apply a progress file from an aborted labeling run: solutions named in it
/// get their recorded verdicts (unless already labeled), so the rerun skips
/// them.
pub fn apply_progress(corpus: &mut Corpus, path: &Path, profile: &RewardProfile) -> Result<usize> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let mut verdicts: Vec<(usize, Verdict)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ProgressEntry = serde_json::from_str(line).map_err(|e| {
            Error::Validation(format!(
                "{}: line {}: malformed progress entry: {e}",
                path.display(),
                lineno + 1
            ))
        })?;
        verdicts.push((entry.solution_index, entry.verdict));
    }
    let total = corpus.total_solutions();
    let mut applied = 0usize;
    let mut flat: Vec<(usize, usize)> = Vec::with_capacity(total);
    for (global, pid, idx, _) in corpus.indexed_solutions() {
        let key = corpus.problems().get_index_of(pid).expect("problem exists");
        flat.push((key, idx));
        debug_assert_eq!(flat.len() - 1, global);
    }
    for (index, verdict) in verdicts {
        let &(problem_pos, sol_idx) = flat.get(index).ok_or_else(|| {
            Error::Validation(format!(
                "progress entry references solution_index {index} but corpus has {total} solutions"
            ))
        })?;
        let (_, sols) = corpus
            .solutions_mut()
            .get_index_mut(problem_pos)
            .expect("problem position valid");
        let sol = &mut sols[sol_idx];
        if sol.verdict.is_none() {
            sol.set_verdict(verdict, profile);
            applied += 1;
        }
    }
    Ok(applied)
}

/// Verify every unlabeled solution (all of them with `force`) and return a
/// corpus where each carries `verdict` and `reward = reward_of(verdict)`.
///
/// Executions fan out to a pool of `workers` threads; verdicts are merged in
/// solution order, so results are independent of the worker count. On a
/// fatal environment error the completed verdicts are flushed to the
/// progress file before the error propagates.
pub fn label_corpus(corpus: &Corpus, limits: &ExecLimits, options: &LabelOptions) -> Result<Corpus> {
    use rayon::prelude::*;

    limits.validate()?;
    if options.workers == 0 {
        return Err(Error::Argument("workers must be at least 1".into()));
    }
    // Precondition: every problem referenced by work items has tests.
    #[derive(Clone)]
    struct WorkItem {
        global_index: usize,
        problem_pos: usize,
        sol_idx: usize,
        source: String,
    }
    let mut items: Vec<WorkItem> = Vec::new();
    for (global, pid, sol_idx, sol) in corpus.indexed_solutions() {
        if sol.verdict.is_some() && !options.force {
            continue;
        }
        let problem = corpus.problem(pid).expect("solution resolves");
        if problem.tests.is_empty() {
            return Err(Error::Validation(format!(
                "problem {pid:?} has solutions but no tests; cannot label"
            )));
        }
        items.push(WorkItem {
            global_index: global,
            problem_pos: corpus.problems().get_index_of(pid).expect("problem exists"),
            sol_idx,
            source: sol.source.clone(),
        });
    }
    if items.is_empty() {
        return Ok(corpus.clone());
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| Error::Environment(format!("worker pool setup failed: {e}")))?;
    let results: Vec<(usize, Result<Verdict>)> = pool.install(|| {
        items
            .par_iter()
            .map(|item| {
                let problem = corpus
                    .problems()
                    .get_index(item.problem_pos)
                    .expect("problem position valid")
                    .1;
                (item.global_index, verify(&item.source, &problem.tests, limits))
            })
            .collect()
    });

    let mut labeled: Vec<(usize, Verdict)> = Vec::new();
    let mut first_error: Option<Error> = None;
    // results preserve item order (indexed parallel map), hence solution
    // order; merge deterministically.
    for (global_index, outcome) in results {
        match outcome {
            Ok(verdict) => labeled.push((global_index, verdict)),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    if let Some(path) = &options.progress_path {
        write_progress(path, &labeled)?;
    }
    if let Some(err) = first_error {
        return Err(err);
    }

    let mut out = corpus.clone();
    let by_index: std::collections::HashMap<usize, Verdict> = labeled.into_iter().collect();
    for item in &items {
        let verdict = by_index[&item.global_index];
        let (_, sols) = out
            .solutions_mut()
            .get_index_mut(item.problem_pos)
            .expect("problem position valid");
        sols[item.sol_idx].set_verdict(verdict, &options.reward_profile);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod fixtures {
    //! Crafted programs with forced verdicts, shared across test modules.

    /// Echoes one line: Accepted on an echo test.
    pub const ECHO: &str = "print(input())\n";
    /// Prints a constant: WrongAnswer on any test not expecting it.
    pub const WRONG: &str = "input()\nprint('not the answer')\n";
    /// Never terminates: TimeLimit.
    pub const SPIN: &str = "while True:\n    pass\n";
    /// Raises after reading input: RuntimeError.
    pub const CRASH: &str = "input()\nraise RuntimeError('boom')\n";
    /// Unbalanced parenthesis: CompileError.
    pub const SYNTAX: &str = "def f(:\n";

    pub fn echo_test() -> crate::corpus::TestCase {
        crate::corpus::TestCase { input: "hello\n".into(), expected_output: "hello".into() }
    }
}
