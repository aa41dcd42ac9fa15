use std::process::Command;

fn contraq(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_contraq")).args(args).output().expect("binary runs")
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[plant]\nno_such_key = 3\n").unwrap();
    let out = contraq(&["collect", "--config", cfg.to_str().unwrap(), "--seed", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let missing = contraq(&["collect", "--config", "/nonexistent.toml", "--seed", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
    let unknown = contraq(&["fly", "--config", cfg.to_str().unwrap()]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn missing_prerequisite_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "").unwrap();
    let out_dir = dir.path().join("out");
    for (cmd, producer) in [("train-metric", "train-model"), ("train-model", "collect"), ("evaluate", "train-agent")] {
        let out = contraq(&["--seed", "3", cmd, "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(3), "{cmd}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(&format!("run `{producer}` first")), "{cmd}: {err}");
    }
}
