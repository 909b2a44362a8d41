use std::process::Command;

fn owndsm(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_owndsm")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "nodes = 2\ncolor_bits = 40\n").unwrap();
    let (code, _) = owndsm(&["bench", "economy", "--config", conf.to_str().unwrap()]);
    assert_eq!(code, 2);
    let (code, _) = owndsm(&["cluster", "--config", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(code, 2);
}

#[test]
fn bench_passes_on_loopback() {
    let (code, out) = owndsm(&["bench", "tiedlist", "--nodes", "2", "--n", "50"]);
    assert_eq!(code, 0, "{out}");
    let v: serde_json::Value = serde_json::from_str(out.lines().last().unwrap()).unwrap();
    assert_eq!(v["reader_fetches"], 1);
}

#[test]
fn injected_fault_fails_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("cx");
    let (code, out) =
        owndsm(&["verify", "--programs", "0", "--fault", "skip-write-back", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code, 1, "{out}");
    let file = std::fs::read_dir(&out_dir).unwrap().next().unwrap().unwrap().path();
    let (code, _) = owndsm(&["replay", file.to_str().unwrap()]);
    assert_eq!(code, 1);
}

#[test]
fn clean_verify_exits_0() {
    let (code, out) = owndsm(&["verify", "--programs", "10"]);
    assert_eq!(code, 0, "{out}");
}
