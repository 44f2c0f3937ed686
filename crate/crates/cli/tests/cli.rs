use std::process::{Command, Output};

fn bsa_sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsa-sim")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scenario(name: &str) -> String {
    format!("{}/../../scenarios/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn run_prints_verdicts_and_canonical_json() {
    let o = bsa_sim(&["run", &scenario("honest_exit.toml")]);
    assert!(o.status.success());
    let text = stdout(&o);
    let last = text.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(v["dep_safe"], true);
    assert_eq!(v["to_safe"], true);

    let json = bsa_sim(&["run", "--json", &scenario("false_rebalance_all_offline.toml")]);
    assert!(json.status.success());
    let v: serde_json::Value = serde_json::from_str(stdout(&json).trim()).unwrap();
    assert_eq!(v["dep_safe"], false);
    assert_eq!(v["protocol_safe"], false);
}

#[test]
fn run_rejects_missing_and_malformed_files() {
    assert_eq!(bsa_sim(&["run", "/nonexistent.toml"]).status.code(), Some(2));
    let bad = std::env::temp_dir().join("bsa-sim-bad.toml");
    std::fs::write(&bad, "t1 = 10\nbogus = 1\n").unwrap();
    assert_eq!(bsa_sim(&["run", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn avail_prints_six_decimal_bounds() {
    let o = bsa_sim(&["avail", "--t1", "3d", "--t2", "2d", "--t3", "30d", "--t-op", "1h", "--t-check", "1h", "--wsp", "14d"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("uptime'    0.934722"), "{text}");
    assert!(text.contains("uptime''   0.002976"), "{text}");
    let bad = bsa_sim(&["avail", "--t1", "1d", "--t2", "1d", "--t3", "30d", "--t-op", "2d", "--t-check", "1h", "--wsp", "14d"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn ceremony_lists_four_addresses() {
    let o = bsa_sim(&["ceremony", "--demo"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.contains("leaves:")).count(), 4, "{text}");
    assert!(text.contains("registry digest"));
    assert_eq!(bsa_sim(&["ceremony"]).status.code(), Some(2));
}

#[test]
fn matrix_mock_scheme_matches() {
    let o = bsa_sim(&["matrix", "--scheme", "mock"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("8 of 8 rows match"));
}
