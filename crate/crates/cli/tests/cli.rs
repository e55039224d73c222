use std::fs;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_safefilter"))
}

#[test]
fn help_lists_subcommands() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["train", "grid-solve", "sweep", "run-filter", "bench", "plot"] {
        assert!(text.contains(cmd), "missing {cmd} in\n{text}");
    }
}

#[test]
fn malformed_block_range_is_a_usage_error() {
    let out = bin().args(["run-filter", "--block", "9..3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("END"));
}

#[test]
fn missing_config_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--config", dir.path().join("nope.toml").to_str().unwrap(), "grid-solve"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.toml"));
}

#[test]
fn grid_solve_writes_oracle_files_and_plot_needs_a_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, "[oracle]\nshape = [11, 11]\nactions = 5\n").unwrap();
    let out_dir = dir.path().join("out");
    let run = |cmd: &str| {
        bin()
            .args(["--config", cfg.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap(), "--jobs", "1", cmd])
            .output()
            .unwrap()
    };
    let out = run("grid-solve");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("zero-sublevel fraction"));
    assert!(out_dir.join("oracle.bin").exists());
    let csv = fs::read_to_string(out_dir.join("oracle.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 121);
    assert!(out_dir.join("config.toml").exists());

    let out = run("plot");
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweep"));
}
