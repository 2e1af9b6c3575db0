use std::path::Path;
use std::process::{Command, Output};

fn ioprobe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ioprobe")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

#[test]
fn gen_prints_counts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a.bin"), path(dir.path(), "b.bin"));
    let args = |out: &str| {
        ioprobe(&[
            "gen", "--beta", "2", "--h", "8", "--m", "4", "--seed", "1", "--out", out,
        ])
    };
    let o = args(&a);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("deletes=8192"), "{s}");
    assert!(s.contains("extract_mins=8192"), "{s}");
    assert!(args(&b).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(std::fs::read(&a).unwrap().starts_with(b"IOPQW1"));
}

#[test]
fn zero_height_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ioprobe(&["gen", "--beta", "2", "--h", "0", "--out", &path(dir.path(), "x.bin")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn run_reports_and_rejects_missing_capabilities() {
    let dir = tempfile::tempdir().unwrap();
    let w = path(dir.path(), "w.jsonl");
    assert!(ioprobe(&["gen", "--h", "3", "--seed", "4", "--out", &w])
        .status
        .success());

    let o = ioprobe(&["run", "--input", &w, "--queue", "oracle"]);
    assert!(o.status.success());
    let row = stdout(&o).lines().nth(1).unwrap().to_owned();
    assert_eq!(row.split(',').nth(5), Some("0"));

    let t1 = stdout(&ioprobe(&[
        "run",
        "--input",
        &w,
        "--queue",
        "tournament",
        "--seed",
        "9",
    ]));
    let t2 = stdout(&ioprobe(&[
        "run",
        "--input",
        &w,
        "--queue",
        "tournament",
        "--seed",
        "9",
    ]));
    assert_eq!(t1, t2);
    let probes: u64 = t1.lines().nth(1).unwrap().split(',').nth(5).unwrap().parse().unwrap();
    assert!(probes > 0);

    assert!(ioprobe(&["run", "--input", &w, "--queue", "dk:buffered_heap"])
        .status
        .success());
    assert!(!ioprobe(&["run", "--input", &w, "--queue", "buffered_heap"])
        .status
        .success());
}

#[test]
fn stats_conserves_probes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = path(dir.path(), "nodes.csv");
    let o = ioprobe(&["stats", "--h", "3", "--trials", "2", "--out", &csv]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    for line in s.lines().filter(|l| l.starts_with("trial=")) {
        let field = |name: &str| line.split(' ').find_map(|f| f.strip_prefix(name)).unwrap().to_owned();
        assert_eq!(field("probes="), field("sum_P="));
    }
    assert!(s.contains("embedding: h_star="));
    assert!(std::fs::read_to_string(&csv)
        .unwrap()
        .starts_with("node,height,kind,P,C,L1"));
}

#[test]
fn comm_rows_are_all_correct() {
    let o = ioprobe(&["comm", "--trials", "100", "--universe", "512"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    let rows: Vec<&str> = s.lines().skip(1).collect();
    assert_eq!(rows.len(), 100);
    assert!(rows.iter().all(|r| r.split(',').nth(10) == Some("true")));
}

#[test]
fn obs1_defaults_match_inverse_e() {
    let o = ioprobe(&["obs1", "--trials", "200"]);
    assert!(o.status.success());
    let s = stdout(&o);
    let frac: f64 = s.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!((frac - (-1f64).exp()).abs() <= 0.02);
}

#[test]
fn bench_emits_one_row_per_queue_and_trial() {
    let o = ioprobe(&["bench", "--h", "3", "--trials", "2", "--queue", "tournament,oracle"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 1 + 4);
}
