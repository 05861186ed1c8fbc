use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rlvr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlvr-lab")).args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = rlvr(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const EASY: &str = "seed = 5\n[corpus]\nkind = \"easy\"\ntasks = 6\ntests = 6\n\n\
                    [train]\nbatch_tasks = 6\nsteps = 30\nsnapshot_every = 10\nreward = { kind = \"pass_rate\" }\n";

#[test]
fn train_twice_gives_identical_traces_and_snapshots() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.toml", EASY);
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]);
    ok(&["train", "--config", &cfg, "--out", b.to_str().unwrap(), "--workers", "1"]);
    for f in ["train_trace.csv", "policy_final.snap", "snapshots/policy_step_000010.snap", "snapshots/policy_step_000030.snap"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let trace = fs::read_to_string(a.join("train_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,mean_reward,effective_group_frac,solved_rate,reward_kind,method,seed"));
    assert_eq!(lines.count(), 30);
    assert!(trace.lines().nth(1).unwrap().ends_with(",pass_rate,grpo,5"));
}

#[test]
fn seed_flag_overrides_the_file() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.toml", EASY);
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&["train", "--config", &cfg, "--out", a.to_str().unwrap()]);
    ok(&["train", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "6"]);
    let ta = fs::read_to_string(a.join("train_trace.csv")).unwrap();
    let tb = fs::read_to_string(b.join("train_trace.csv")).unwrap();
    assert_ne!(ta, tb);
    assert!(tb.lines().nth(1).unwrap().ends_with(",6"));
}

#[test]
fn report_over_identical_runs_agrees_fully() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.toml", EASY);
    ok(&["train", "--config", &cfg, "--out", d.path().join("run").to_str().unwrap()]);
    fs::create_dir(d.path().join("copy")).unwrap();
    fs::copy(d.path().join("run/policy_final.snap"), d.path().join("copy/policy_final.snap")).unwrap();
    let rep = write(
        d.path(),
        "r.toml",
        "seed = 5\n[corpus]\nkind = \"easy\"\ntasks = 6\ntests = 6\n[report]\nruns = [\"run\", \"copy\"]\neval_samples = 16\n",
    );
    let out = d.path().join("out");
    ok(&["report", "--config", &rep, "--out", out.to_str().unwrap()]);
    let overlap = fs::read_to_string(out.join("overlap.csv")).unwrap();
    let row: Vec<&str> = overlap.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0..2], ["run", "copy"]);
    assert_eq!(row[3], "0");
    assert_eq!(row[4], "0");
    assert_eq!(row[6], "1");
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("corpus,run,pass@1,pass@4,pass@8,pass@16"));
    let rows: Vec<&str> = metrics.lines().skip(1).map(|l| l.split_once(",run,").map_or(l, |x| x.1)).collect();
    let copies: Vec<&str> = metrics.lines().skip(1).map(|l| l.split_once(",copy,").map_or(l, |x| x.1)).collect();
    assert_eq!(rows[0], copies[1]);
    let density = fs::read_to_string(out.join("density.csv")).unwrap();
    assert_eq!(density.lines().next(), Some("run,total_groups,effective_groups,intermediate_fraction,distinct_values,groups"));
}

#[test]
fn binary_without_full_rows_are_zero() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "p.toml",
        "seed = 9\n[corpus]\nkind = \"conflict\"\ntasks = 12\ntests = 25\nharmful_pass_fraction = 0.84\n\
         [probe]\netas = [0.01]\nconditions = [\"BINARY_WITHOUT_FULL\", \"PASS_RATE_WITHOUT_FULL\"]\n",
    );
    let out = d.path().join("out");
    ok(&["probe", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let probe = fs::read_to_string(out.join("probe.csv")).unwrap();
    assert_eq!(probe.lines().next(), Some("task_id,condition,method,eta,delta_grp,delta_grp_norm"));
    let zero: Vec<&str> = probe.lines().filter(|l| l.contains(",BINARY_WITHOUT_FULL,")).collect();
    assert_eq!(zero.len(), 12);
    assert!(zero.iter().all(|l| l.ends_with(",0,0")));
    let samples = fs::read_to_string(out.join("probe_samples.csv")).unwrap();
    assert_eq!(samples.lines().next(), Some("task_id,sample_index,mode,pass_rate,advantage,delta_i_norm"));
    assert_eq!(samples.lines().count(), 1 + 12 * 16);
    assert!(out.join("conflict.csv").exists());
}

#[test]
fn gen_writes_a_readable_corpus() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "g.toml", "seed = 2\n[corpus]\nkind = \"conflict\"\ntasks = 3\ntests = 25\nharmful_pass_fraction = 0.84\n");
    let out = d.path().join("out");
    ok(&["gen", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let c = rlvr_lab::corpus::Corpus::read(&out.join("corpus.jsonl")).unwrap();
    assert_eq!(c.tasks.len(), 3);
    // and it can be used as a file corpus
    let file_cfg = write(
        d.path(),
        "f.toml",
        "seed = 2\n[corpus]\nkind = \"file\"\npath = \"out/corpus.jsonl\"\n[probe]\netas = [0.001]\n",
    );
    ok(&["probe", "--config", &file_cfg, "--out", d.path().join("p").to_str().unwrap()]);
}

#[test]
fn errors_exit_nonzero_with_a_diagnostic() {
    let d = tempfile::tempdir().unwrap();
    let typo = write(d.path(), "t.toml", "seed = 1\n[train]\nreward = { kind = \"binary\" }\nsteps = 2\nbatch = 4\n");
    let out = rlvr(&["train", "--config", &typo, "--out", d.path().join("o").to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 5") && err.contains("batch"), "{err}");

    let missing = rlvr(&["gen", "--config", d.path().join("nope.toml").to_str().unwrap()]);
    assert!(!missing.status.success());

    let no_section = write(d.path(), "n.toml", "seed = 1\n[corpus]\nkind = \"easy\"\ntasks = 2\ntests = 2\n");
    let out = rlvr(&["probe", "--config", &no_section, "--out", d.path().join("o2").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[probe]"));
}

#[test]
fn failed_exec_leaves_no_outputs() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("problem");
    fs::create_dir_all(p.join("tests")).unwrap();
    fs::create_dir_all(p.join("candidates")).unwrap();
    fs::write(p.join("tests/01.in"), "x\n").unwrap();
    fs::write(p.join("tests/01.out"), "x\n").unwrap();
    fs::write(p.join("candidates/a.sh"), "cat\n").unwrap();
    // a canonical solution that fails its own tests makes the suite invalid
    fs::write(p.join("canonical"), "echo nope\n").unwrap();
    let cfg = write(d.path(), "e.toml", "seed = 1\n[exec]\nproblem = \"problem\"\ninterpreter = [\"sh\"]\nt_min = 1\nt_max = 2\n");
    let out_dir = d.path().join("out");
    let out = rlvr(&["exec", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("canonical"));
    assert_eq!(fs::read_dir(&out_dir).unwrap().count(), 0);

    fs::write(p.join("canonical"), "cat\n").unwrap();
    ok(&["exec", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    let rewards = fs::read_to_string(out_dir.join("rewards.csv")).unwrap();
    assert_eq!(rewards, "candidate,binary,pass_rate\na.sh,1,1\n");
    let report = fs::read_to_string(out_dir.join("exec_report.csv")).unwrap();
    assert!(report.starts_with("candidate,test_index,outcome,wall_ms\na.sh,0,PASS,"));
}

#[test]
fn reweighted_training_labels_tests() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "rw.toml",
        "seed = 4\n[corpus]\nkind = \"easy\"\ntasks = 4\ntests = 6\ntest_correlation = 0.8\n\
         [train]\nbatch_tasks = 4\nsteps = 10\nreward = { kind = \"reweighted\" }\n[reweight]\ntier_steps = [40, 10, 0]\n",
    );
    let out = d.path().join("out");
    ok(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let diff = fs::read_to_string(out.join("difficulty.csv")).unwrap();
    assert_eq!(diff.lines().next(), Some("task_id,test_index,pass_signal,label,weight"));
    assert_eq!(diff.lines().count(), 1 + 4 * 6);
    for l in diff.lines().skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        let expected = match f[3] {
            "EASY" => "1",
            "MEDIUM" => "2",
            "HARD" => "3",
            other => panic!("label {other}"),
        };
        assert_eq!(f[4], expected);
    }
}
