// SPDX-License-Identifier: Apache-2.0

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cove(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cove"))
        .args(args)
        .output()
        .expect("spawn cove")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn list_scenarios_prints_bundled_names() {
    let o = cove(&["list-scenarios"]);
    assert!(o.status.success());
    let names: Vec<&str> = cove::scenario::BUNDLED.iter().map(|(n, _)| *n).collect();
    let out = stdout(&o);
    for n in names {
        assert!(out.lines().any(|l| l.trim() == n), "{n} missing:\n{out}");
    }
}

#[test]
fn run_bundled_and_file_scenarios() {
    let o = cove(&["run", "host_steals_page", "--require-coverage"]);
    // A single scenario cannot cover every documented error.
    assert_eq!(o.status.code(), Some(1));

    let all: Vec<&str> = cove::scenario::BUNDLED.iter().map(|(n, _)| *n).collect();
    let mut args = vec!["run", "--require-coverage"];
    args.extend(all);
    let o = cove(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cove");
    fs::write(
        &bad,
        "scenario bad\nconfig memory_pages 64\nhost convert 0x10 1 expect error PageInUse\n",
    )
    .unwrap();
    let o = cove(&["run", path(&bad)]);
    assert_eq!(o.status.code(), Some(1));

    let unparsable = dir.path().join("unparsable.cove");
    fs::write(&unparsable, "host frobnicate\n").unwrap();
    assert_eq!(cove(&["run", path(&unparsable)]).status.code(), Some(2));
    assert_eq!(cove(&["run", "no_such_scenario"]).status.code(), Some(2));
}

#[test]
fn trace_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let o = cove(&["run", "lifecycle_happy_path", "--trace", path(&trace)]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = fs::read_to_string(&trace).unwrap();
    assert!(text.lines().count() > 10);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["seq", "actor", "op", "args", "result", "mtt_delta"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
    let o = cove(&["replay", "lifecycle_happy_path", path(&trace)]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 mismatches"));
}

#[test]
fn fuzz_exit_status() {
    let o = cove(&["fuzz", "--seed", "4", "--ops", "2000", "--illegal-bias", "30"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("violations=0"));
    assert_eq!(cove(&["fuzz", "--illegal-bias", "101"]).status.code(), Some(2));
}

#[test]
fn attest_demo_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let ev = dir.path().join("evidence.bin");
    let key = dir.path().join("root.hex");
    let o = cove(&[
        "attest-demo",
        "--out",
        path(&ev),
        "--root-key-out",
        path(&key),
        "--report-data",
        "1,2,3",
    ]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    let measurement = out
        .lines()
        .find_map(|l| l.strip_prefix("measurement"))
        .unwrap()
        .trim()
        .to_string();

    let o = cove(&["attest-verify", "--evidence", path(&ev), "--root-key", path(&key)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "Accept");

    let o = cove(&[
        "attest-verify",
        "--evidence",
        path(&ev),
        "--root-key",
        path(&key),
        "--expect-measurement",
        &measurement,
    ]);
    assert_eq!(o.status.code(), Some(0));

    let wrong = "00".repeat(32);
    let o = cove(&[
        "attest-verify",
        "--evidence",
        path(&ev),
        "--root-key",
        path(&key),
        "--expect-measurement",
        &wrong,
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout(&o).trim(), "Reject(MeasurementMismatch)");

    // Raw 32-byte key files work too.
    let raw = dir.path().join("root.bin");
    let hex_key = fs::read_to_string(&key).unwrap();
    fs::write(&raw, hex::decode(hex_key.trim()).unwrap()).unwrap();
    let o = cove(&["attest-verify", "--evidence", path(&ev), "--root-key", path(&raw)]);
    assert_eq!(o.status.code(), Some(0));

    let mut bytes = fs::read(&ev).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let tampered = dir.path().join("tampered.bin");
    fs::write(&tampered, bytes).unwrap();
    let o = cove(&["attest-verify", "--evidence", path(&tampered), "--root-key", path(&key)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("Reject("));
}

#[test]
fn debug_evidence_needs_allow_debug() {
    let dir = tempfile::tempdir().unwrap();
    let ev = dir.path().join("evidence.bin");
    let key = dir.path().join("root.hex");
    let o = cove(&[
        "attest-demo",
        "--debug",
        "--out",
        path(&ev),
        "--root-key-out",
        path(&key),
    ]);
    assert!(o.status.success());
    let o = cove(&["attest-verify", "--evidence", path(&ev), "--root-key", path(&key)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout(&o).trim(), "Reject(DebugForbidden)");
    let o = cove(&[
        "attest-verify",
        "--evidence",
        path(&ev),
        "--root-key",
        path(&key),
        "--allow-debug",
    ]);
    assert_eq!(o.status.code(), Some(0));
}
