//! Judge for real programs: stdin/stdout test cases, one fresh subprocess per
//! test, a memory ceiling, and a timeout scaled from a canonical solution.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;
use wait_timeout::ChildExt;

use crate::corpus::PassVector;
use crate::error::{Error, Result};
use crate::reward::{binary_reward, pass_rate_reward};

pub const DEFAULT_MULTIPLIER: f64 = 3.0;
pub const DEFAULT_T_MIN: f64 = 10.0;
pub const DEFAULT_T_MAX: f64 = 30.0;
pub const DEFAULT_MEMORY_MB: u64 = 512;
/// Stdout beyond this many bytes is discarded (and so fails comparison).
const MAX_OUTPUT_BYTES: u64 = 64 << 20;
const CANONICAL_RUNS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TimeoutPolicy {
    pub multiplier: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// Canonical solution runtime in seconds.
    pub canonical_runtime: Option<f64>,
}

impl Default for TimeoutPolicy {
    fn default() -> Self {
        TimeoutPolicy { multiplier: DEFAULT_MULTIPLIER, t_min: DEFAULT_T_MIN, t_max: DEFAULT_T_MAX, canonical_runtime: None }
    }
}

impl TimeoutPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.multiplier > 0.0 && self.multiplier.is_finite()) {
            return Err(Error::invalid("timeout multiplier must be positive"));
        }
        if !(self.t_min > 0.0 && self.t_min <= self.t_max && self.t_max.is_finite()) {
            return Err(Error::invalid("timeouts need 0 < t_min <= t_max"));
        }
        if let Some(t) = self.canonical_runtime {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::invalid("canonical runtime must be a non-negative number of seconds"));
            }
        }
        Ok(())
    }

    pub fn with_canonical(&self, t_canon: f64) -> TimeoutPolicy {
        TimeoutPolicy { canonical_runtime: Some(t_canon), ..self.clone() }
    }
}

/// `clamp(S · t_canon, t_min, t_max)`, or `t_min` without a canonical runtime.
pub fn adaptive_timeout(p: &TimeoutPolicy) -> Result<f64> {
    p.validate()?;
    Ok(match p.canonical_runtime {
        Some(t) => (p.multiplier * t).clamp(p.t_min, p.t_max),
        None => p.t_min,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Pass,
    WrongOutput,
    Timeout,
    RuntimeError,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Pass => "PASS",
            Outcome::WrongOutput => "WRONG_OUTPUT",
            Outcome::Timeout => "TIMEOUT",
            Outcome::RuntimeError => "RUNTIME_ERROR",
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TestCase {
    pub input: String,
    pub expected: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TestRun {
    pub outcome: Outcome,
    pub wall: Duration,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecResult {
    pub runs: Vec<TestRun>,
}

impl ExecResult {
    pub fn outcomes(&self) -> Vec<Outcome> {
        self.runs.iter().map(|r| r.outcome).collect()
    }

    /// PASS → 1; every other outcome → 0.
    pub fn pass_vector(&self) -> PassVector {
        PassVector::new(self.runs.iter().map(|r| r.outcome == Outcome::Pass).collect())
    }
}

/// How to launch a candidate: `command... program`. An empty command runs the
/// program file directly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExecSpec {
    pub command: Vec<String>,
    pub program: PathBuf,
    /// Address-space ceiling per test process; `None` disables it.
    pub memory_mb: Option<u64>,
}

impl ExecSpec {
    pub fn new(command: Vec<String>, program: impl Into<PathBuf>) -> Self {
        ExecSpec { command, program: program.into(), memory_mb: Some(DEFAULT_MEMORY_MB) }
    }

    fn check(&self) -> Result<()> {
        fs::metadata(&self.program).map_err(|e| Error::io(&self.program, e))?;
        Ok(())
    }

    fn build(&self) -> Command {
        let mut cmd = match self.command.split_first() {
            Some((exe, args)) => {
                let mut c = Command::new(exe);
                c.args(args).arg(&self.program);
                c
            }
            None => Command::new(&self.program),
        };
        cmd.stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::null());
        // own process group so a timeout can kill any children too
        cmd.process_group(0);
        if let Some(mb) = self.memory_mb {
            let bytes = mb.saturating_mul(1 << 20) as libc::rlim_t;
            // SAFETY: setrlimit is async-signal-safe and touches no shared state.
            unsafe {
                cmd.pre_exec(move || {
                    let lim = libc::rlimit { rlim_cur: bytes, rlim_max: bytes };
                    if libc::setrlimit(libc::RLIMIT_AS, &lim) != 0 {
                        return Err(std::io::Error::last_os_error());
                    }
                    Ok(())
                });
            }
        }
        cmd
    }
}

/// Per-line right-trim, then drop trailing blank lines.
pub fn normalize_output(s: &str) -> Vec<&str> {
    let mut lines: Vec<&str> = s.lines().map(str::trim_end).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    lines
}

pub fn outputs_match(actual: &str, expected: &str) -> bool {
    normalize_output(actual) == normalize_output(expected)
}

/// Runs one test in a fresh process.
pub fn run_test(spec: &ExecSpec, test: &TestCase, timeout: Duration) -> Result<TestRun> {
    let start = Instant::now();
    let mut child = spec
        .build()
        .spawn()
        .map_err(|e| Error::Environment(format!("cannot start {}: {e}", spec.program.display())))?;
    let mut stdin = child.stdin.take().expect("stdin is piped");
    let input = test.input.clone().into_bytes();
    // a program may exit without reading its input; a broken pipe is not an error
    let writer = thread::spawn(move || {
        let _ = stdin.write_all(&input);
    });
    let stdout = child.stdout.take().expect("stdout is piped");
    let reader = thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = stdout.take(MAX_OUTPUT_BYTES).read_to_end(&mut buf);
        buf
    });
    let status = child
        .wait_timeout(timeout)
        .map_err(|e| Error::Environment(format!("waiting for {}: {e}", spec.program.display())))?;
    let status = match status {
        Some(s) => Some(s),
        None => {
            // SAFETY: plain syscall; the group id is the child's pid.
            unsafe {
                libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
            }
            let _ = child.kill();
            let _ = child.wait();
            None
        }
    };
    let _ = writer.join();
    let output = reader.join().unwrap_or_default();
    let wall = start.elapsed();
    let outcome = match status {
        None => Outcome::Timeout,
        Some(s) if !s.success() => Outcome::RuntimeError,
        Some(_) if outputs_match(&String::from_utf8_lossy(&output), &test.expected) => Outcome::Pass,
        Some(_) => Outcome::WrongOutput,
    };
    Ok(TestRun { outcome, wall })
}

pub fn run_program(spec: &ExecSpec, tests: &[TestCase], policy: &TimeoutPolicy) -> Result<ExecResult> {
    if tests.is_empty() {
        return Err(Error::invalid("no test cases"));
    }
    spec.check()?;
    let timeout = Duration::from_secs_f64(adaptive_timeout(policy)?);
    let runs = tests.iter().map(|t| run_test(spec, t, timeout)).collect::<Result<Vec<_>>>()?;
    Ok(ExecResult { runs })
}

// ---------------------------------------------------------------------------
// Problem directories
// ---------------------------------------------------------------------------

/// `tests/NN.in` + `tests/NN.out`, optional `canonical`, and `candidates/<name>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem {
    pub root: PathBuf,
    pub tests: Vec<TestCase>,
    pub test_names: Vec<String>,
    pub canonical: Option<PathBuf>,
    pub candidates: Vec<(String, PathBuf)>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for e in rd {
        out.push(e.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

impl Problem {
    pub fn load(root: &Path) -> Result<Problem> {
        let tests_dir = root.join("tests");
        if !tests_dir.is_dir() {
            return Err(Error::Config(format!("{}: missing tests directory", tests_dir.display())));
        }
        let mut stems: Vec<String> = Vec::new();
        for p in sorted_entries(&tests_dir)? {
            let (Some(stem), Some(ext)) = (p.file_stem().and_then(|s| s.to_str()), p.extension().and_then(|s| s.to_str()))
            else {
                return Err(Error::Config(format!("{}: expected NN.in or NN.out", p.display())));
            };
            match ext {
                "in" => stems.push(stem.to_string()),
                "out" => {}
                _ => return Err(Error::Config(format!("{}: expected NN.in or NN.out", p.display()))),
            }
        }
        if stems.is_empty() {
            return Err(Error::Config(format!("{}: no test cases", tests_dir.display())));
        }
        let mut tests = Vec::with_capacity(stems.len());
        for s in &stems {
            let (i, o) = (tests_dir.join(format!("{s}.in")), tests_dir.join(format!("{s}.out")));
            if !o.is_file() {
                return Err(Error::Config(format!("{}: missing expected output", o.display())));
            }
            tests.push(TestCase { input: read_text(&i)?, expected: read_text(&o)? });
        }
        for p in sorted_entries(&tests_dir)? {
            if p.extension().is_some_and(|e| e == "out") && !tests_dir.join(p.with_extension("in").file_name().unwrap()).is_file() {
                return Err(Error::Config(format!("{}: no matching input", p.display())));
            }
        }
        let canonical = root.join("canonical");
        let canonical = canonical.is_file().then_some(canonical);
        let cand_dir = root.join("candidates");
        if !cand_dir.is_dir() {
            return Err(Error::Config(format!("{}: missing candidates directory", cand_dir.display())));
        }
        let mut candidates = Vec::new();
        for p in sorted_entries(&cand_dir)? {
            if !p.is_file() {
                return Err(Error::Config(format!("{}: candidates must be files", p.display())));
            }
            let name = p.file_name().and_then(|s| s.to_str()).ok_or_else(|| {
                Error::Config(format!("{}: candidate names must be UTF-8", p.display()))
            })?;
            candidates.push((name.to_string(), p.clone()));
        }
        if candidates.is_empty() {
            return Err(Error::Config(format!("{}: no candidates", cand_dir.display())));
        }
        Ok(Problem { root: root.to_path_buf(), tests, test_names: stems, canonical, candidates })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub command: Vec<String>,
    pub policy: TimeoutPolicy,
    pub memory_mb: Option<u64>,
    pub workers: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateReport {
    pub name: String,
    pub result: ExecResult,
    pub binary: f64,
    pub pass_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub canonical_runtime: Option<f64>,
    pub timeout: f64,
    pub candidates: Vec<CandidateReport>,
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Environment(format!("cannot start worker pool: {e}")))
}

/// Median over three runs of the canonical solution's slowest test.
fn canonical_runtime(problem: &Problem, path: &Path, opts: &SuiteOptions) -> Result<f64> {
    let spec = ExecSpec { command: opts.command.clone(), program: path.to_path_buf(), memory_mb: opts.memory_mb };
    let limit = Duration::from_secs_f64(opts.policy.t_max);
    let mut samples = Vec::with_capacity(CANONICAL_RUNS);
    for _ in 0..CANONICAL_RUNS {
        let mut slowest = Duration::ZERO;
        for (t, name) in problem.tests.iter().zip(&problem.test_names) {
            let run = run_test(&spec, t, limit)?;
            if run.outcome != Outcome::Pass {
                return Err(Error::Config(format!(
                    "{}: canonical solution does not pass test {name} ({})",
                    path.display(),
                    run.outcome
                )));
            }
            slowest = slowest.max(run.wall);
        }
        samples.push(slowest.as_secs_f64());
    }
    samples.sort_by(f64::total_cmp);
    Ok(samples[CANONICAL_RUNS / 2])
}

pub fn eval_suite(root: &Path, opts: &SuiteOptions) -> Result<SuiteReport> {
    opts.policy.validate()?;
    let problem = Problem::load(root)?;
    let policy = match (&problem.canonical, opts.policy.canonical_runtime) {
        (Some(c), None) => opts.policy.with_canonical(canonical_runtime(&problem, c, opts)?),
        _ => opts.policy.clone(),
    };
    let timeout = adaptive_timeout(&policy)?;
    let limit = Duration::from_secs_f64(timeout);
    let specs: Vec<ExecSpec> = problem
        .candidates
        .iter()
        .map(|(_, p)| ExecSpec { command: opts.command.clone(), program: p.clone(), memory_mb: opts.memory_mb })
        .collect();
    let jobs: Vec<(usize, usize)> =
        (0..specs.len()).flat_map(|c| (0..problem.tests.len()).map(move |t| (c, t))).collect();
    // results come back in job order whatever order they finish in
    let runs = pool(opts.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(c, t)| run_test(&specs[c], &problem.tests[t], limit))
            .collect::<Result<Vec<_>>>()
    })?;
    let per = problem.tests.len();
    let candidates = problem
        .candidates
        .iter()
        .enumerate()
        .map(|(c, (name, _))| {
            let result = ExecResult { runs: runs[c * per..(c + 1) * per].to_vec() };
            let pv = result.pass_vector();
            Ok(CandidateReport { name: name.clone(), binary: binary_reward(&pv)?, pass_rate: pass_rate_reward(&pv)?, result })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport { canonical_runtime: policy.canonical_runtime, timeout, candidates })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timeout_examples() {
        let p = TimeoutPolicy::default();
        assert_eq!(adaptive_timeout(&p.with_canonical(5.0)).unwrap(), 15.0);
        assert_eq!(adaptive_timeout(&p.with_canonical(1.0)).unwrap(), 10.0);
        assert_eq!(adaptive_timeout(&p.with_canonical(20.0)).unwrap(), 30.0);
        assert_eq!(adaptive_timeout(&p).unwrap(), 10.0);
        let bad = TimeoutPolicy { t_min: 40.0, ..TimeoutPolicy::default() };
        assert!(adaptive_timeout(&bad).is_err());
        let bad = TimeoutPolicy { multiplier: 0.0, ..TimeoutPolicy::default() };
        assert!(adaptive_timeout(&bad).is_err());
    }

    #[test]
    fn timeout_always_within_bounds() {
        let p = TimeoutPolicy::default();
        for i in 0..200 {
            let t = adaptive_timeout(&p.with_canonical(i as f64 * 0.37)).unwrap();
            assert!((p.t_min..=p.t_max).contains(&t));
        }
    }

    #[test]
    fn comparison_ignores_trailing_whitespace() {
        assert!(outputs_match("1 2  \n3\n\n\n", "1 2\n3"));
        assert!(outputs_match("", "\n\n"));
        assert!(!outputs_match("1 2\n3", "1  2\n3"));
        assert!(!outputs_match(" 1", "1"));
        assert!(!outputs_match("1\n\n2", "1\n2"));
    }

    #[test]
    fn missing_program_is_io_error() {
        let spec = ExecSpec::new(vec!["sh".into()], "/nonexistent/prog.sh");
        let t = [TestCase { input: String::new(), expected: String::new() }];
        assert!(matches!(run_program(&spec, &t, &TimeoutPolicy::default()), Err(Error::Io { .. })));
    }

    #[test]
    fn spawn_failure_is_environment_error() {
        let dir = tempfile::tempdir().unwrap();
        let prog = dir.path().join("p.sh");
        fs::write(&prog, "cat\n").unwrap();
        let spec = ExecSpec::new(vec!["/nonexistent/interpreter".into()], &prog);
        let t = [TestCase { input: String::new(), expected: String::new() }];
        assert!(matches!(run_program(&spec, &t, &TimeoutPolicy::default()), Err(Error::Environment(_))));
    }
}
