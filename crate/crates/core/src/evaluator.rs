//! Execution feedback: runs candidate programs against test cases and turns
//! the outcomes into pass fractions and state passrates.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::digest_hex;
use crate::tree::{ProblemSpec, TestCase};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    /// The harness itself failed; never folded into a program score.
    #[error("executor infrastructure failure: {0}")]
    Infrastructure(String),
    #[error("invalid evaluation request: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    WrongOutput,
    RuntimeError,
    Timeout,
    CompileError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub outcome: Outcome,
    pub actual_output: Vec<u8>,
    pub diagnostic: String,
}

impl TestResult {
    fn new(outcome: Outcome, actual_output: Vec<u8>, diagnostic: impl Into<String>) -> Self {
        Self {
            outcome,
            actual_output,
            diagnostic: diagnostic.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_test: Vec<TestResult>,
    pub pass_fraction: f64,
}

impl EvalReport {
    pub fn from_results(per_test: Vec<TestResult>) -> Self {
        let passed = per_test.iter().filter(|t| t.outcome == Outcome::Pass).count();
        let pass_fraction = if per_test.is_empty() {
            0.0
        } else {
            passed as f64 / per_test.len() as f64
        };
        Self {
            per_test,
            pass_fraction,
        }
    }

    /// Human-readable digest of the failures, used as block analysis for refinement.
    pub fn failure_summary(&self) -> String {
        let mut lines = Vec::new();
        for (i, t) in self.per_test.iter().enumerate() {
            if t.outcome != Outcome::Pass {
                lines.push(format!("test {i}: {:?} {}", t.outcome, t.diagnostic));
            }
        }
        lines.join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub time_limit_ms: u64,
    pub memory_limit_mb: u64,
}

impl Limits {
    pub fn of(problem: &ProblemSpec) -> Self {
        Self {
            time_limit_ms: problem.time_limit_ms,
            memory_limit_mb: problem.memory_limit_mb,
        }
    }
}

/// Output normalization applied to both sides before comparison: CRLF folded
/// to LF, trailing whitespace stripped per line, trailing blank lines dropped.
pub fn normalize_output(bytes: &[u8]) -> Vec<u8> {
    let mut lines: Vec<&[u8]> = Vec::new();
    for raw in bytes.split(|&b| b == b'\n') {
        let line = raw.strip_suffix(b"\r").unwrap_or(raw);
        let end = line
            .iter()
            .rposition(|b| !b.is_ascii_whitespace())
            .map_or(0, |p| p + 1);
        lines.push(&line[..end]);
    }
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines.join(&b'\n')
}

fn judge(actual: Vec<u8>, expected: &[u8]) -> TestResult {
    if normalize_output(&actual) == normalize_output(expected) {
        TestResult::new(Outcome::Pass, actual, "")
    } else {
        TestResult::new(Outcome::WrongOutput, actual, "output differs from expected")
    }
}

pub trait Executor: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Checks that the program builds. `Ok(Some(msg))` is a compile error.
    fn compile(&self, _program: &str) -> Result<Option<String>, EvalError> {
        Ok(None)
    }

    fn run_one(
        &self,
        program: &str,
        test: &TestCase,
        limits: &Limits,
    ) -> Result<TestResult, EvalError>;
}

// ---------------------------------------------------------------------------
// Mock executor
// ---------------------------------------------------------------------------

/// Result of a registered mock behaviour for one input.
#[derive(Debug, Clone, PartialEq)]
pub enum MockRun {
    Output(Vec<u8>),
    Crash(String),
    Hang,
}

type MockBehaviour = Arc<dyn Fn(&[u8]) -> MockRun + Send + Sync>;

/// Deterministic in-process executor.
///
/// Programs registered with [`MockExecutor::register`] run their closure.
/// Everything else is read as a tiny line-oriented language; lines starting
/// with `#` are comments and the first remaining line is the instruction:
///
/// * `echo`: output the input unchanged
/// * `sum` / `product` / `max` / `min` / `count`: fold the integers of the input
/// * `sort` / `reverse`: reorder the integers of the input
/// * `add K` / `mul K`: map every integer
/// * `const TEXT`: always print TEXT
/// * `case IN => OUT` (one or more lines): a lookup table, unknown inputs print nothing
/// * `loop`: never terminates; `crash`: exits with a runtime error
///
/// Anything else is a compile error.
#[derive(Clone, Default)]
pub struct MockExecutor {
    registered: HashMap<String, MockBehaviour>,
}

#[derive(Debug, Clone, PartialEq)]
enum MockProgram {
    Echo,
    Fold(Fold),
    Sort,
    Reverse,
    Add(i64),
    Mul(i64),
    Const(String),
    Table(Vec<(String, String)>),
    Loop,
    Crash,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Fold {
    Sum,
    Product,
    Max,
    Min,
    Count,
}

impl MockExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, program: impl Into<String>, behaviour: F)
    where
        F: Fn(&[u8]) -> MockRun + Send + Sync + 'static,
    {
        self.registered.insert(program.into(), Arc::new(behaviour));
    }

    fn parse(program: &str) -> Result<MockProgram, String> {
        let lines: Vec<&str> = program
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        let Some(first) = lines.first() else {
            return Err("empty program".into());
        };
        if first.starts_with("case ") {
            let mut table = Vec::new();
            for line in &lines {
                let body = line
                    .strip_prefix("case ")
                    .ok_or_else(|| format!("expected `case`, found `{line}`"))?;
                let (input, output) = body
                    .split_once("=>")
                    .ok_or_else(|| format!("missing `=>` in `{line}`"))?;
                table.push((input.trim().to_string(), output.trim().to_string()));
            }
            return Ok(MockProgram::Table(table));
        }
        if lines.len() > 1 {
            return Err(format!("unexpected trailing instruction `{}`", lines[1]));
        }
        let (op, arg) = match first.split_once(' ') {
            Some((op, arg)) => (op, Some(arg.trim())),
            None => (*first, None),
        };
        let int_arg = || -> Result<i64, String> {
            arg.ok_or_else(|| format!("`{op}` needs an argument"))?
                .parse()
                .map_err(|e| format!("bad argument to `{op}`: {e}"))
        };
        let no_arg = |p: MockProgram| match arg {
            None => Ok(p),
            Some(a) => Err(format!("`{op}` takes no argument, got `{a}`")),
        };
        match op {
            "echo" => no_arg(MockProgram::Echo),
            "sum" => no_arg(MockProgram::Fold(Fold::Sum)),
            "product" => no_arg(MockProgram::Fold(Fold::Product)),
            "max" => no_arg(MockProgram::Fold(Fold::Max)),
            "min" => no_arg(MockProgram::Fold(Fold::Min)),
            "count" => no_arg(MockProgram::Fold(Fold::Count)),
            "sort" => no_arg(MockProgram::Sort),
            "reverse" => no_arg(MockProgram::Reverse),
            "loop" => no_arg(MockProgram::Loop),
            "crash" => no_arg(MockProgram::Crash),
            "add" => Ok(MockProgram::Add(int_arg()?)),
            "mul" => Ok(MockProgram::Mul(int_arg()?)),
            "const" => Ok(MockProgram::Const(arg.unwrap_or_default().to_string())),
            _ => Err(format!("unknown instruction `{op}`")),
        }
    }

    fn interpret(program: &MockProgram, input: &[u8]) -> MockRun {
        let text = String::from_utf8_lossy(input);
        let ints = || -> Result<Vec<i64>, String> {
            text.split_whitespace()
                .map(|t| t.parse::<i64>().map_err(|e| format!("bad integer `{t}`: {e}")))
                .collect()
        };
        let join = |v: Vec<i64>| {
            v.iter()
                .map(i64::to_string)
                .collect::<Vec<_>>()
                .join(" ")
                .into_bytes()
        };
        let result = match program {
            MockProgram::Echo => Ok(input.to_vec()),
            MockProgram::Const(s) => Ok(s.clone().into_bytes()),
            MockProgram::Loop => return MockRun::Hang,
            MockProgram::Crash => Err("explicit crash".to_string()),
            MockProgram::Table(rows) => {
                let key = text.trim();
                Ok(rows
                    .iter()
                    .find(|(i, _)| i == key)
                    .map(|(_, o)| o.clone().into_bytes())
                    .unwrap_or_default())
            }
            MockProgram::Fold(f) => ints().and_then(|v| {
                let value = match f {
                    Fold::Count => Some(v.len() as i64),
                    Fold::Sum => v.iter().try_fold(0i64, |a, b| a.checked_add(*b)),
                    Fold::Product => v.iter().try_fold(1i64, |a, b| a.checked_mul(*b)),
                    Fold::Max => v.iter().copied().max(),
                    Fold::Min => v.iter().copied().min(),
                };
                value
                    .map(|x| x.to_string().into_bytes())
                    .ok_or_else(|| "overflow or empty input".to_string())
            }),
            MockProgram::Sort => ints().map(|mut v| {
                v.sort_unstable();
                join(v)
            }),
            MockProgram::Reverse => ints().map(|mut v| {
                v.reverse();
                join(v)
            }),
            MockProgram::Add(k) => ints().map(|v| join(v.into_iter().map(|x| x + k).collect())),
            MockProgram::Mul(k) => ints().map(|v| join(v.into_iter().map(|x| x * k).collect())),
        };
        match result {
            Ok(out) => MockRun::Output(out),
            Err(e) => MockRun::Crash(e),
        }
    }
}

impl Executor for MockExecutor {
    fn kind(&self) -> &'static str {
        "mock"
    }

    fn compile(&self, program: &str) -> Result<Option<String>, EvalError> {
        if self.registered.contains_key(program) {
            return Ok(None);
        }
        Ok(Self::parse(program).err())
    }

    fn run_one(
        &self,
        program: &str,
        test: &TestCase,
        limits: &Limits,
    ) -> Result<TestResult, EvalError> {
        if limits.time_limit_ms == 0 || limits.memory_limit_mb == 0 {
            return Err(EvalError::Invalid("limits must be positive".into()));
        }
        let run = match self.registered.get(program) {
            Some(behaviour) => behaviour(&test.input),
            None => match Self::parse(program) {
                Ok(p) => Self::interpret(&p, &test.input),
                Err(e) => return Ok(TestResult::new(Outcome::CompileError, Vec::new(), e)),
            },
        };
        Ok(match run {
            MockRun::Output(out) => judge(out, &test.expected_output),
            MockRun::Crash(msg) => TestResult::new(Outcome::RuntimeError, Vec::new(), msg),
            MockRun::Hang => TestResult::new(
                Outcome::Timeout,
                Vec::new(),
                format!("time limit of {} ms exceeded", limits.time_limit_ms),
            ),
        })
    }
}

// ---------------------------------------------------------------------------
// Process executor
// ---------------------------------------------------------------------------

/// Placeholder in command templates replaced by the program file path.
pub const FILE_PLACEHOLDER: &str = "{file}";

/// Runs programs as child processes of a configured interpreter command.
///
/// The program text is written to a temporary file; `{file}` in the run (and
/// optional compile) template is replaced by its path. Test input goes to
/// stdin, stdout is compared after normalization.
#[derive(Debug, Clone)]
pub struct ProcessExecutor {
    pub run_template: Vec<String>,
    pub compile_template: Option<Vec<String>>,
    pub file_name: String,
}

impl ProcessExecutor {
    pub fn new(run_template: Vec<String>) -> Self {
        Self {
            run_template,
            compile_template: None,
            file_name: "main.prog".into(),
        }
    }

    fn command(template: &[String], file: &std::path::Path) -> Result<Command, EvalError> {
        let (program, args) = template
            .split_first()
            .ok_or_else(|| EvalError::Invalid("empty command template".into()))?;
        let file = file.to_string_lossy();
        let mut cmd = Command::new(program.replace(FILE_PLACEHOLDER, &file));
        cmd.args(args.iter().map(|a| a.replace(FILE_PLACEHOLDER, &file)));
        Ok(cmd)
    }

    fn write_program(&self, program: &str) -> Result<(tempfile::TempDir, PathBuf), EvalError> {
        let dir = tempfile::tempdir().map_err(|e| EvalError::Infrastructure(e.to_string()))?;
        let path = dir.path().join(&self.file_name);
        fs::write(&path, program).map_err(|e| EvalError::Infrastructure(e.to_string()))?;
        Ok((dir, path))
    }
}

#[cfg(unix)]
fn apply_memory_cap(cmd: &mut Command, memory_limit_mb: u64) {
    use std::os::unix::process::CommandExt;
    let bytes = memory_limit_mb.saturating_mul(1024 * 1024) as libc::rlim_t;
    // SAFETY: setrlimit is async-signal-safe and only touches the child.
    unsafe {
        cmd.pre_exec(move || {
            let lim = libc::rlimit {
                rlim_cur: bytes,
                rlim_max: bytes,
            };
            libc::setrlimit(libc::RLIMIT_AS, &lim);
            Ok(())
        });
    }
}

#[cfg(not(unix))]
fn apply_memory_cap(_cmd: &mut Command, _memory_limit_mb: u64) {}

impl Executor for ProcessExecutor {
    fn kind(&self) -> &'static str {
        "process"
    }

    fn compile(&self, program: &str) -> Result<Option<String>, EvalError> {
        let Some(template) = &self.compile_template else {
            return Ok(None);
        };
        let (_dir, path) = self.write_program(program)?;
        let output = Self::command(template, &path)?
            .stdin(Stdio::null())
            .output()
            .map_err(|e| EvalError::Infrastructure(format!("spawn compiler: {e}")))?;
        if output.status.success() {
            Ok(None)
        } else {
            Ok(Some(String::from_utf8_lossy(&output.stderr).into_owned()))
        }
    }

    fn run_one(
        &self,
        program: &str,
        test: &TestCase,
        limits: &Limits,
    ) -> Result<TestResult, EvalError> {
        if limits.time_limit_ms == 0 || limits.memory_limit_mb == 0 {
            return Err(EvalError::Invalid("limits must be positive".into()));
        }
        let (_dir, path) = self.write_program(program)?;
        let mut cmd = Self::command(&self.run_template, &path)?;
        cmd.stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        apply_memory_cap(&mut cmd, limits.memory_limit_mb);
        let mut child = cmd
            .spawn()
            .map_err(|e| EvalError::Infrastructure(format!("spawn {:?}: {e}", self.run_template)))?;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let input = test.input.clone();
        let feeder = std::thread::spawn(move || {
            // A program may exit without reading its input; a broken pipe is fine.
            let _ = stdin.write_all(&input);
        });
        let mut stdout = child.stdout.take().expect("piped stdout");
        let reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stdout.read_to_end(&mut buf);
            buf
        });
        let mut stderr = child.stderr.take().expect("piped stderr");
        let err_reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = stderr.read_to_end(&mut buf);
            buf
        });

        let started = Instant::now();
        let limit = Duration::from_millis(limits.time_limit_ms);
        let status = child
            .wait_timeout(limit)
            .map_err(|e| EvalError::Infrastructure(format!("wait: {e}")))?;
        let status = match status {
            Some(s) => s,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                let _ = feeder.join();
                let out = reader.join().unwrap_or_default();
                let _ = err_reader.join();
                return Ok(TestResult::new(
                    Outcome::Timeout,
                    out,
                    format!(
                        "killed after {} ms (limit {} ms)",
                        started.elapsed().as_millis(),
                        limits.time_limit_ms
                    ),
                ));
            }
        };
        let _ = feeder.join();
        let out = reader.join().unwrap_or_default();
        let err = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Ok(TestResult::new(
                Outcome::RuntimeError,
                out,
                format!("{status}: {}", String::from_utf8_lossy(&err).trim()),
            ));
        }
        Ok(judge(out, &test.expected_output))
    }
}

// ---------------------------------------------------------------------------
// Evaluator
// ---------------------------------------------------------------------------

/// Scores programs against a problem's tests, with a result cache keyed by
/// (program digest, problem id).
pub struct Evaluator {
    executor: Arc<dyn Executor>,
    cache: Mutex<HashMap<(String, String), EvalReport>>,
    cache_enabled: bool,
    cache_dir: Option<PathBuf>,
    /// Score a solution 1 only when every test passes.
    pub binary_passed: bool,
    pub workers: usize,
}

impl Evaluator {
    pub fn new(executor: Arc<dyn Executor>) -> Self {
        Self {
            executor,
            cache: Mutex::new(HashMap::new()),
            cache_enabled: true,
            cache_dir: None,
            binary_passed: false,
            workers: 4,
        }
    }

    pub fn without_cache(mut self) -> Self {
        self.cache_enabled = false;
        self
    }

    /// Persists reports as `<dir>/<sha256(problem id, program)>.json`.
    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn executor(&self) -> &dyn Executor {
        self.executor.as_ref()
    }

    pub fn run_one(
        &self,
        program: &str,
        test: &TestCase,
        limits: &Limits,
    ) -> Result<TestResult, EvalError> {
        self.executor.run_one(program, test, limits)
    }

    /// Runs every test and returns the report. Bypasses the cache.
    pub fn evaluate(&self, program: &str, problem: &ProblemSpec) -> Result<EvalReport, EvalError> {
        if problem.tests.is_empty() {
            return Err(EvalError::Invalid(format!("problem {} has no tests", problem.id)));
        }
        if let Some(diag) = self.executor.compile(program)? {
            let per_test = problem
                .tests
                .iter()
                .map(|_| TestResult::new(Outcome::CompileError, Vec::new(), diag.clone()))
                .collect();
            return Ok(EvalReport::from_results(per_test));
        }
        let limits = Limits::of(problem);
        let per_test = problem
            .tests
            .iter()
            .map(|t| self.executor.run_one(program, t, &limits))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(EvalReport::from_results(per_test))
    }

    fn cache_key(program: &str, problem: &ProblemSpec) -> (String, String) {
        (digest_hex(program), problem.id.clone())
    }

    fn disk_path(&self, key: &(String, String)) -> Option<PathBuf> {
        self.cache_dir
            .as_ref()
            .map(|d| d.join(format!("{}.json", digest_hex(&format!("{}\n{}", key.1, key.0)))))
    }

    /// Report for `program`, served from the cache when possible.
    pub fn report(&self, program: &str, problem: &ProblemSpec) -> Result<EvalReport, EvalError> {
        if !self.cache_enabled {
            return self.evaluate(program, problem);
        }
        let key = Self::cache_key(program, problem);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        if let Some(path) = self.disk_path(&key) {
            if let Ok(bytes) = fs::read(&path) {
                if let Ok(report) = serde_json::from_slice::<EvalReport>(&bytes) {
                    self.cache.lock().expect("cache lock").insert(key, report.clone());
                    return Ok(report);
                }
            }
        }
        let report = self.evaluate(program, problem)?;
        if let Some(path) = self.disk_path(&key) {
            let write = fs::create_dir_all(path.parent().expect("cache file has a parent"))
                .and_then(|_| fs::write(&path, serde_json::to_vec(&report).expect("serializable")));
            if let Err(e) = write {
                return Err(EvalError::Infrastructure(format!("cache write {}: {e}", path.display())));
            }
        }
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, report.clone());
        Ok(report)
    }

    /// Passed(program): the fraction of tests passed (or the all-pass bit in
    /// binary mode) together with the full report.
    pub fn passed(&self, program: &str, problem: &ProblemSpec) -> Result<(f64, EvalReport), EvalError> {
        let report = self.report(program, problem)?;
        Ok((self.score(&report), report))
    }

    pub fn score(&self, report: &EvalReport) -> f64 {
        if self.binary_passed {
            if report.pass_fraction >= 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            report.pass_fraction
        }
    }

    /// Scores every solution (concurrently, up to `workers`), in input order.
    pub fn score_all(
        &self,
        solutions: &[String],
        problem: &ProblemSpec,
    ) -> Result<Vec<(f64, EvalReport)>, EvalError> {
        let workers = self.workers.max(1);
        let mut results: Vec<Option<Result<(f64, EvalReport), EvalError>>> =
            (0..solutions.len()).map(|_| None).collect();
        for (chunk_idx, chunk) in solutions.chunks(workers).enumerate() {
            let scored: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|program| s.spawn(move || self.passed(program, problem)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("evaluation thread panicked"))
                    .collect()
            });
            for (i, r) in scored.into_iter().enumerate() {
                results[chunk_idx * workers + i] = Some(r);
            }
        }
        results.into_iter().map(|r| r.expect("filled")).collect()
    }

    /// PR(S): the unweighted mean of Passed over the state's solutions.
    pub fn state_passrate(&self, solutions: &[String], problem: &ProblemSpec) -> Result<f64, EvalError> {
        if solutions.is_empty() {
            return Err(EvalError::Invalid("state passrate needs at least one solution".into()));
        }
        let scores = self.score_all(solutions, problem)?;
        Ok(mean(scores.iter().map(|(s, _)| *s)))
    }
}

pub(crate) fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
