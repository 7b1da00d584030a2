// SPDX-License-Identifier: Apache-2.0

//! Scenario scripts, the untrusted host driver, and the ABI fuzzer.
//!
//! A scenario is a line-oriented script:
//!
//! ```text
//! scenario host_steals_page
//! config memory_pages 64
//! host convert 0x10 4                          expect ok
//! host tvm_create 0x10 1                       expect value 0
//! adversary read 0x10                          expect fault AccessFault
//! tvm 0 0 read 0x80000000                      expect value 7
//! ```
//!
//! Each step is `<actor> <op> <args...> [expect <clause>]`. Actors are
//! `host[:hart]`, `adversary[:hart]` (a host that must state what it
//! expects) and `tvm <id> <vcpu>` (a guest action executed on hart 0).
//! Integers are decimal or `0x` hex and may contain `_`. Page arguments are
//! page numbers; guest addresses and offsets are byte addresses. Clauses:
//! `expect ok`, `expect error <Name>`, `expect fault <ExceptionKind>`,
//! `expect value <n>` and `expect exit <wfi|halted N|page_fault GPA|request CALL|interrupt>`.
//! `expect ok` also accepts any `run` exit.
//!
//! Host and adversary operations:
//!
//! | op                   | args                                        |
//! |----------------------|---------------------------------------------|
//! | boot                 | - (only with `config boot manual`)          |
//! | tsm_info             | - (value = page size)                       |
//! | convert              | page count                                  |
//! | reclaim              | page count                                  |
//! | reassign             | page count (value = count)                  |
//! | tvm_create           | page count [debug] (value = tvm id)         |
//! | add_page_table_pages | tvm page count                              |
//! | add_memory_region    | tvm gpa pages confidential\|shared          |
//! | add_measured_pages   | tvm src_page dest_page gpa                  |
//! | create_vcpu          | tvm vcpu page count program_page            |
//! | finalize             | tvm                                         |
//! | run                  | tvm vcpu                                    |
//! | add_zero_pages       | tvm page gpa                                |
//! | add_shared_pages     | tvm page gpa                                |
//! | destroy              | tvm                                         |
//! | bind_interrupt_file  | tvm vcpu page                               |
//! | inject_interrupt     | tvm vcpu irq                                |
//! | teecall              | function_id [a0..a5] (value = a1)           |
//! | read / fetch         | page [offset]                               |
//! | write                | page offset value                           |
//! | fill                 | page value (every 8-byte word)              |
//! | stage_program        | page program-text (see `TvmProgram`)        |
//! | mode                 | U\|S\|VS\|VU                                |
//! | host_irq             | - (interrupt pending on this hart)          |
//! | guest_read/guest_fetch | tvm vcpu gpa (adversary only)             |
//! | guest_write          | tvm vcpu gpa value (adversary only)         |
//!
//! Guest operations (`tvm <id> <vcpu> ...`): `read gpa`, `write gpa value`,
//! `fetch gpa`, `share gpa pages`, `unshare gpa pages`,
//! `get_evidence out_gpa [report words...]`, `covg call [args...]`.
//!
//! Directives, allowed before the first step: `scenario <name>`,
//! `config memory_pages|harts|max_tvms|tsm_version <n>`,
//! `config root_secret <64 hex digits>`, `config tsm_blob <text>`,
//! `config debug_platform`, `config boot manual`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::hart::ExceptionKind;
use crate::tsm::abi::{ExitReason, TvmExit};
use crate::tsm::program::{Action, TvmProgram};
use crate::tsm::tvm::RegionKind;
use crate::{PlatformConfig, TvmId, VcpuId};

pub mod fuzz;
mod parse;
mod run;

pub use fuzz::{fuzz, FuzzOptions, FuzzReport};
pub use parse::{parse_scenario, ParseError, ParseErrorKind};
pub use run::{replay_trace, run_scenario, ReplayMismatch};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Actor {
    Host(usize),
    Adversary(usize),
    Tvm(TvmId, VcpuId),
}

impl fmt::Display for Actor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Actor::Host(0) => f.write_str("host"),
            Actor::Host(h) => write!(f, "host:{h}"),
            Actor::Adversary(0) => f.write_str("adversary"),
            Actor::Adversary(h) => write!(f, "adversary:{h}"),
            Actor::Tvm(t, v) => write!(f, "tvm {t} {v}"),
        }
    }
}

/// A decoded step operation. Page fields hold page numbers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Op {
    Boot,
    TsmInfo,
    Convert {
        page: u64,
        count: u64,
    },
    Reclaim {
        page: u64,
        count: u64,
    },
    Reassign {
        page: u64,
        count: u64,
    },
    TvmCreate {
        page: u64,
        count: u64,
        debug: bool,
    },
    AddPageTablePages {
        tvm: TvmId,
        page: u64,
        count: u64,
    },
    AddMemoryRegion {
        tvm: TvmId,
        gpa: u64,
        pages: u64,
        kind: RegionKind,
    },
    AddMeasuredPages {
        tvm: TvmId,
        src: u64,
        dest: u64,
        gpa: u64,
    },
    CreateVcpu {
        tvm: TvmId,
        vcpu: VcpuId,
        page: u64,
        count: u64,
        program: u64,
    },
    Finalize {
        tvm: TvmId,
    },
    Run {
        tvm: TvmId,
        vcpu: VcpuId,
    },
    AddZeroPages {
        tvm: TvmId,
        page: u64,
        gpa: u64,
    },
    AddSharedPages {
        tvm: TvmId,
        page: u64,
        gpa: u64,
    },
    Destroy {
        tvm: TvmId,
    },
    BindInterruptFile {
        tvm: TvmId,
        vcpu: VcpuId,
        page: u64,
    },
    InjectInterrupt {
        tvm: TvmId,
        vcpu: VcpuId,
        irq: u64,
    },
    Teecall {
        function_id: u64,
        args: Vec<u64>,
    },
    Read {
        page: u64,
        offset: u64,
    },
    Fetch {
        page: u64,
        offset: u64,
    },
    Write {
        page: u64,
        offset: u64,
        value: u64,
    },
    Fill {
        page: u64,
        value: u64,
    },
    StageProgram {
        page: u64,
        program: TvmProgram,
    },
    Mode {
        priv_level: crate::hart::PrivilegeLevel,
        v: bool,
    },
    HostIrq,
    /// A guest action, from a `tvm` actor or an adversary `guest_*` op.
    Guest {
        tvm: TvmId,
        vcpu: VcpuId,
        action: Action,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expect {
    Ok,
    Error(String),
    Fault(String),
    Value(u64),
    Exit { reason: String, arg: Option<u64> },
}

impl fmt::Display for Expect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expect::Ok => f.write_str("ok"),
            Expect::Error(e) => write!(f, "error {e}"),
            Expect::Fault(k) => write!(f, "fault {k}"),
            Expect::Value(v) => write!(f, "value {v:#x}"),
            Expect::Exit { reason, arg: None } => write!(f, "exit {reason}"),
            Expect::Exit { reason, arg: Some(a) } => write!(f, "exit {reason} {a:#x}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Step {
    /// 1-based source line.
    pub line: usize,
    pub actor: Actor,
    /// Operation name as written.
    pub op_name: String,
    /// Argument tokens as written.
    pub args: Vec<String>,
    pub op: Op,
    pub expect: Option<Expect>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub config: PlatformConfig,
    /// Leave the platform unbooted until a `boot` step.
    pub manual_boot: bool,
    pub steps: Vec<Step>,
}

/// The observable result of one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok { value: Option<u64>, detail: Option<String> },
    Error(String),
    Fault(ExceptionKind),
    Exit(TvmExit),
}

impl Outcome {
    pub(crate) fn unit() -> Self {
        Outcome::Ok {
            value: None,
            detail: None,
        }
    }

    pub(crate) fn value(v: u64) -> Self {
        Outcome::Ok {
            value: Some(v),
            detail: None,
        }
    }

    pub fn matches(&self, expect: &Expect) -> bool {
        match (expect, self) {
            (Expect::Ok, Outcome::Ok { .. } | Outcome::Exit(_)) => true,
            (Expect::Value(n), Outcome::Ok { value: Some(v), .. }) => n == v,
            (Expect::Error(e), Outcome::Error(a)) => e == a,
            (Expect::Fault(k), Outcome::Fault(a)) => k == &format!("{a:?}"),
            (Expect::Exit { reason, arg }, Outcome::Exit(e)) => {
                let (name, actual_arg) = exit_parts(e);
                name == reason && arg.is_none_or(|a| Some(a) == actual_arg)
            }
            _ => false,
        }
    }
}

fn exit_parts(e: &TvmExit) -> (&'static str, Option<u64>) {
    match &e.reason {
        ExitReason::GuestPageFault(gpa) => ("page_fault", Some(*gpa)),
        ExitReason::GuestRequest { call, .. } => ("request", Some(*call)),
        ExitReason::Wfi => ("wfi", None),
        ExitReason::Halted(code) => ("halted", Some(*code)),
        ExitReason::InterruptPending => ("interrupt", None),
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Ok {
                value: None,
                detail: None,
            } => f.write_str("ok"),
            Outcome::Ok {
                value: Some(v),
                detail: None,
            } => write!(f, "ok {v:#x}"),
            Outcome::Ok {
                value: None,
                detail: Some(d),
            } => write!(f, "ok {d}"),
            Outcome::Ok {
                value: Some(v),
                detail: Some(d),
            } => write!(f, "ok {v:#x} {d}"),
            Outcome::Error(e) => write!(f, "error {e}"),
            Outcome::Fault(k) => write!(f, "fault {k:?}"),
            Outcome::Exit(e) => match &e.details {
                Some(ex) => write!(f, "exit {e} ({ex})"),
                None => write!(f, "exit {e}"),
            },
        }
    }
}

/// One line of a trace file. Field order is fixed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub actor: String,
    pub op: String,
    pub args: Vec<String>,
    pub result: String,
    /// Pages whose MTT entry changed, as `page:old->new`.
    pub mtt_delta: Vec<String>,
}

impl TraceRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace records always serialize")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Failure {
    /// 0-based index of the step.
    pub step: usize,
    pub line: usize,
    pub expected: String,
    pub actual: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} (line {}): expected {}, got {}",
            self.step, self.line, self.expected, self.actual
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Report {
    pub name: String,
    pub steps_run: usize,
    pub failures: Vec<Failure>,
    pub trace: Vec<TraceRecord>,
    /// Error names observed per operation.
    pub error_coverage: BTreeMap<String, BTreeSet<String>>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "scenario {}: {} steps, {} failures\n",
            self.name,
            self.steps_run,
            self.failures.len()
        );
        for f in &self.failures {
            s.push_str(&format!("  FAIL {f}\n"));
        }
        s
    }
}

/// Errors each ABI operation documents. The bundled suite must observe
/// every pair at least once.
pub const DOCUMENTED_ERRORS: &[(&str, &[&str])] = &[
    ("tsm_info", &["NotBooted"]),
    ("convert", &["AlreadyConfidential", "OutOfBounds"]),
    ("reclaim", &["PageInUse", "NotConfidential"]),
    ("reassign", &["PageNotFree"]),
    ("tvm_create", &["PageNotFree", "TooFewPages", "TvmLimit"]),
    ("add_page_table_pages", &["PageNotFree", "UnknownTvm"]),
    ("add_memory_region", &["Overlap", "WrongPhase", "UnknownTvm"]),
    (
        "add_measured_pages",
        &[
            "WrongPhase",
            "BadSource",
            "PageNotFree",
            "GpaUnmappedRegion",
            "GpaAlreadyMapped",
            "OutOfTablePages",
        ],
    ),
    ("create_vcpu", &["WrongPhase", "PageNotFree", "DuplicateVcpu"]),
    ("finalize", &["WrongPhase", "NoVcpus"]),
    ("run", &["WrongPhase", "UnknownVcpu"]),
    (
        "add_zero_pages",
        &["PageNotFree", "GpaUnmappedRegion", "GpaAlreadyMapped", "WrongPhase"],
    ),
    (
        "add_shared_pages",
        &[
            "SourceConfidential",
            "GpaUnmappedRegion",
            "GpaNotShared",
            "GpaAlreadyMapped",
        ],
    ),
    ("destroy", &["UnknownTvm"]),
    ("share", &["GpaUnmappedRegion"]),
    ("unshare", &["GpaUnmappedRegion"]),
    ("bind_interrupt_file", &["PageNotFree", "AlreadyBound", "UnknownVcpu"]),
    ("inject_interrupt", &["InvalidIrq", "Unbound"]),
    ("teecall", &["UnknownFunction"]),
];

/// Documented (op, error) pairs not present in `coverage`.
pub fn missing_coverage(coverage: &BTreeMap<String, BTreeSet<String>>) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (op, errs) in DOCUMENTED_ERRORS {
        for e in *errs {
            if !coverage.get(*op).is_some_and(|s| s.contains(*e)) {
                out.push((op.to_string(), e.to_string()));
            }
        }
    }
    out
}

/// Scenarios shipped with the crate.
pub const BUNDLED: &[(&str, &str)] = &[
    (
        "host_steals_page",
        include_str!("../../scenarios/host_steals_page.cove"),
    ),
    (
        "lifecycle_happy_path",
        include_str!("../../scenarios/lifecycle_happy_path.cove"),
    ),
    ("memory_errors", include_str!("../../scenarios/memory_errors.cove")),
    ("build_errors", include_str!("../../scenarios/build_errors.cove")),
    ("runtime_errors", include_str!("../../scenarios/runtime_errors.cove")),
    ("interrupt_files", include_str!("../../scenarios/interrupt_files.cove")),
    ("shared_memory", include_str!("../../scenarios/shared_memory.cove")),
    ("tvm_isolation", include_str!("../../scenarios/tvm_isolation.cove")),
    ("attestation", include_str!("../../scenarios/attestation.cove")),
    ("boot_and_modes", include_str!("../../scenarios/boot_and_modes.cove")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}
