use std::path::Path;
use std::process::{Command, Output};

fn stressnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stressnet"))
        .args(args)
        .output()
        .expect("spawn stressnet")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, subjects: &str) -> std::path::PathBuf {
    let tree = dir.join("tree");
    let out = stressnet(&["synth", "--out", s(&tree), "--subjects", subjects, "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    tree
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(stressnet(&["--help"]).status.code(), Some(0));
    assert_eq!(stressnet(&["--version"]).status.code(), Some(0));
    assert_eq!(stressnet(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(stressnet(&[]).status.code(), Some(1));
    assert_eq!(stressnet(&["bogus"]).status.code(), Some(1));
    assert_eq!(stressnet(&["train", "--out", "x.ckpt"]).status.code(), Some(1));
    assert_eq!(
        stressnet(&["train", "--data", "a", "--cache", "b", "--out", "x"]).status.code(),
        Some(1)
    );
    assert_eq!(stressnet(&["synth", "--out", "x", "--subjects", "57"]).status.code(), Some(1));
}

#[test]
fn infeasible_geometry_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let tree = synth(dir.path(), "1");
    let out = stressnet(&[
        "train", "--data", s(&tree), "--Fsize", "64", "--fsize", "128", "--ss", "2", "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CNN layer 1"));
}

#[test]
fn missing_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = stressnet(&[
        "train", "--data", s(&dir.path().join("nope")), "--Fsize", "64", "--fsize", "8", "--ss", "2", "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = stressnet(&["eval", "--model", s(&dir.path().join("nope.ckpt")), "--cache", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_gradcheck_exits_three() {
    let ok = stressnet(&["gradcheck", "--seed", "1"]);
    assert_eq!(ok.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("conv1") && stdout.contains("dense2"), "{stdout}");
    let strict = stressnet(&["gradcheck", "--seed", "1", "--tol", "1e-30"]);
    assert_eq!(strict.status.code(), Some(3));
}

#[test]
fn prepare_writes_a_loadable_cache() {
    let dir = tempfile::tempdir().unwrap();
    let tree = synth(dir.path(), "2");
    let cache = dir.path().join("c.bin");
    let out = stressnet(&["prepare", "--data", s(&tree), "--cache", s(&cache), "--norm", "global"]);
    assert!(out.status.success());
    let v = stressnet::dataset::load_cache(&cache).unwrap();
    assert_eq!(v.subject_count(), 2);
    assert_eq!(v.norm, stressnet::dataset::NormScope::Global);
    assert!(v.filter.is_none());
}

#[test]
fn sweep_writes_report_markdown_and_timings() {
    let dir = tempfile::tempdir().unwrap();
    let tree = synth(dir.path(), "2");
    let grid = dir.path().join("grid.json");
    std::fs::write(&grid, r#"{"rows":[{"n":2,"m":2,"Fsize":64,"fsize":8,"SS":2,"st":48}]}"#).unwrap();
    let tsv = dir.path().join("r.tsv");
    let md = dir.path().join("r.md");
    let out = stressnet(&[
        "sweep", "--data", s(&tree), "--grid", s(&grid), "--out", s(&tsv), "--md", s(&md), "--max-epochs", "2",
        "--split", "both",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stressnet::sweep::parse_tsv(&std::fs::read_to_string(&tsv).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 2);
    let md = std::fs::read_to_string(&md).unwrap();
    assert!(md.contains("| Training accuracy | Testing accuracy |"));
    assert!(md.contains("subject-level split"));
    let timing = std::fs::read_to_string(dir.path().join("r.timing.tsv")).unwrap();
    let times: Vec<f64> = timing
        .lines()
        .skip(1)
        .map(|l| l.rsplit('\t').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(times.len(), 2);
    assert!(times.iter().all(|t| t.is_finite() && *t >= 0.0));
}

#[test]
fn bad_grid_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let tree = synth(dir.path(), "1");
    let grid = dir.path().join("grid.json");
    std::fs::write(&grid, r#"{"rows":[{"n":2,"m":2,"Fsize":64,"fsize":128,"SS":2,"st":48}]}"#).unwrap();
    let out = stressnet(&["sweep", "--data", s(&tree), "--grid", s(&grid), "--out", s(&dir.path().join("r.tsv"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_emits_tsv_row_in_sweep_schema() {
    let dir = tempfile::tempdir().unwrap();
    let tree = synth(dir.path(), "1");
    let tsv = dir.path().join("row.tsv");
    let out = stressnet(&[
        "train", "--data", s(&tree), "--Fsize", "64", "--fsize", "8", "--ss", "2", "--stride", "48", "--max-epochs",
        "2", "--out", s(&dir.path().join("m.ckpt")), "--tsv", s(&tsv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = stressnet::sweep::parse_tsv(&std::fs::read_to_string(&tsv).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].network.frame_size, 64);
}

#[test]
fn ablate_rejects_swapped_caches() {
    let dir = tempfile::tempdir().unwrap();
    let tree = synth(dir.path(), "1");
    let raw = dir.path().join("raw.bin");
    let filtered = dir.path().join("f.bin");
    assert!(stressnet(&["prepare", "--data", s(&tree), "--cache", s(&raw)]).status.success());
    assert!(stressnet(&["prepare", "--data", s(&tree), "--cache", s(&filtered), "--filter", "cheby2"])
        .status
        .success());
    let out = stressnet(&[
        "ablate", "--raw-cache", s(&filtered), "--filtered-cache", s(&raw), "--Fsize", "64", "--fsize", "8", "--ss",
        "2", "--report", s(&dir.path().join("a.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
