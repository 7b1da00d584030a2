// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use cove::scenario::{self, parse_scenario, replay_trace, run_scenario, ParseErrorKind, TraceRecord};

#[test]
fn every_bundled_scenario_passes() {
    for (name, text) in scenario::BUNDLED {
        let sc = parse_scenario(text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(&sc.name, name);
        let report = run_scenario(&sc);
        assert!(report.passed(), "{}", report.summary());
        assert_eq!(report.steps_run, sc.steps.len());
    }
}

#[test]
fn bundled_suite_exercises_every_documented_error() {
    let mut coverage: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (_, text) in scenario::BUNDLED {
        let report = run_scenario(&parse_scenario(text).unwrap());
        for (op, errs) in report.error_coverage {
            coverage.entry(op).or_default().extend(errs);
        }
    }
    assert_eq!(scenario::missing_coverage(&coverage), vec![]);
}

#[test]
fn bundled_table_matches_scenario_directory() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
    let mut on_disk: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "cove"))
        .map(|p| p.file_stem().unwrap().to_string_lossy().into_owned())
        .collect();
    on_disk.sort();
    let mut bundled: Vec<String> = scenario::BUNDLED.iter().map(|(n, _)| n.to_string()).collect();
    bundled.sort();
    assert_eq!(on_disk, bundled);
}

#[test]
fn traces_replay_without_mismatch() {
    for (name, text) in scenario::BUNDLED {
        let sc = parse_scenario(text).unwrap();
        let report = run_scenario(&sc);
        let lines: Vec<String> = report.trace.iter().map(TraceRecord::to_json_line).collect();
        let records: Vec<TraceRecord> = lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records, report.trace);
        let mismatches = replay_trace(&sc, &records).unwrap();
        assert!(mismatches.is_empty(), "{name}: {mismatches:?}");
    }
}

#[test]
fn edited_trace_is_caught_on_replay() {
    let sc = parse_scenario(scenario::bundled("host_steals_page").unwrap()).unwrap();
    let mut trace = run_scenario(&sc).trace;
    let victim = trace
        .iter()
        .position(|r| r.result.starts_with("fault"))
        .expect("scenario has a faulting step");
    trace[victim].result = "ok 0x0".into();
    let mismatches = replay_trace(&sc, &trace).unwrap();
    assert_eq!(mismatches.len(), 1);
    assert_eq!(mismatches[0].seq, trace[victim].seq);
}

#[test]
fn failing_expectation_is_reported_with_its_line() {
    let text = "\
scenario wrong
config memory_pages 64
host convert 0x10 2        expect ok
adversary read 0x10        expect value 5
";
    let report = run_scenario(&parse_scenario(text).unwrap());
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].line, 4);
    assert_eq!(report.failures[0].actual, "fault AccessFault");
}

#[test]
fn parse_errors_carry_kind_and_position() {
    let cases = [
        ("host frobnicate 1", ParseErrorKind::UnknownOp),
        ("host convert 0x10", ParseErrorKind::ArityMismatch),
        ("adversary read 0x100", ParseErrorKind::MissingExpectation),
        ("host convert zz 1", ParseErrorKind::Syntax),
        ("host convert 1 1 expect sideways", ParseErrorKind::Syntax),
    ];
    for (line, kind) in cases {
        let text = format!("scenario bad\n{line}\n");
        let err = parse_scenario(&text).unwrap_err();
        assert_eq!(err.kind, kind, "{line}: {err}");
        assert_eq!(err.line, 2, "{line}");
        assert!(err.column >= 1, "{line}");
    }
}

#[test]
fn comments_and_blank_lines_are_ignored() {
    let text = "\
# leading comment
scenario tidy

host convert 0x10 1   expect ok   # trailing comment
";
    let sc = parse_scenario(text).unwrap();
    assert_eq!(sc.steps.len(), 1);
    assert_eq!(sc.steps[0].line, 4);
    assert!(run_scenario(&sc).passed());
}
