use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn swapsim(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swapsim"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn swapsim")
}

fn write_cfg(dir: &Path, name: &str, preset: &str) {
    let text = format!(
        r#"{{"preset": "{preset}", "scale_divisor": 64, "workload": {{"heavy_switches": 100}}}}"#
    );
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn run_then_replay_check() {
    let dir = tempfile::tempdir().unwrap();
    write_cfg(dir.path(), "o.json", "optane_zswap");
    let out = swapsim(&["run", "o.json", "--seed", "4", "--out", "r"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "trace.tsv",
        "switches.csv",
        "blkio.csv",
        "summary.csv",
        "summary.json",
        "config.json",
    ] {
        assert!(dir.path().join("r").join(f).exists(), "missing {f}");
    }
    let out = swapsim(&["replay", "r/trace.tsv", "--check"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("replay ok"));
}

#[test]
fn replay_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write_cfg(dir.path(), "o.json", "optane");
    assert_eq!(
        swapsim(&["run", "o.json", "--out", "r"], dir.path())
            .status
            .code(),
        Some(0)
    );
    let p = dir.path().join("r/summary.json");
    let text = fs::read_to_string(&p)
        .unwrap()
        .replacen("\"seed\": 0", "\"seed\": 9", 1);
    fs::write(&p, text).unwrap();
    let out = swapsim(&["replay", "r/trace.tsv", "--check"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replay-equality"));
}

#[test]
fn truncated_trace_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    write_cfg(dir.path(), "o.json", "optane");
    assert_eq!(
        swapsim(&["run", "o.json", "--out", "r"], dir.path())
            .status
            .code(),
        Some(0)
    );
    let p = dir.path().join("r/trace.tsv");
    let text = fs::read_to_string(&p).unwrap();
    let cut: String = text
        .lines()
        .take(text.lines().count() / 2)
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(&p, cut).unwrap();
    assert_eq!(
        swapsim(&["replay", "r/trace.tsv", "--check"], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn config_errors_exit_1_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.json"),
        r#"{"preset": "optane", "zswap": {"max_pool_percent": "lots"}}"#,
    )
    .unwrap();
    let out = swapsim(&["run", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("zswap.max_pool_percent"));

    fs::write(dir.path().join("unknown.json"), r#"{"preset": "floppy"}"#).unwrap();
    assert_eq!(
        swapsim(&["run", "unknown.json"], dir.path()).status.code(),
        Some(1)
    );
    assert_eq!(
        swapsim(&["run", "missing.json"], dir.path()).status.code(),
        Some(1)
    );
    assert_eq!(swapsim(&["frobnicate"], dir.path()).status.code(), Some(1));
}

#[test]
fn compare_prints_ratios_against_the_first_config() {
    let dir = tempfile::tempdir().unwrap();
    write_cfg(dir.path(), "b.json", "baseline");
    write_cfg(dir.path(), "o.json", "optane");
    let out = swapsim(
        &[
            "compare", "b.json", "o.json", "--seed", "1", "--csv", "s.csv",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = String::from_utf8_lossy(&out.stdout);
    let header = table.lines().next().unwrap();
    assert!(
        header.contains("baseline") && header.contains("optane"),
        "{table}"
    );
    assert!(table
        .lines()
        .any(|l| l.starts_with("tabs_before_first_discard") && l.contains('x')));
    let rows = csv::Reader::from_path(dir.path().join("s.csv"))
        .unwrap()
        .records()
        .count();
    assert_eq!(rows, 2);
}
