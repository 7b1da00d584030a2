// SPDX-License-Identifier: Apache-2.0

use super::{parse_scenario, Actor, Failure, Op, Outcome, ParseError, Report, Scenario, Step, TraceRecord};
use crate::mem_tracking::MttEntry;
use crate::platform::{Platform, PlatformError};
use crate::tsm::abi::{CovhCall, CovhReturn};
use crate::tsm::{GuestStep, TsmError};
use crate::tsm_driver::DomainSwitchRequest;
use crate::PAGE_SIZE;

fn spa(page: u64) -> u64 {
    page * PAGE_SIZE as u64
}

fn from_platform(e: PlatformError) -> Outcome {
    match e {
        PlatformError::Fault(ex) => Outcome::Fault(ex.kind),
        e => Outcome::Error(e.name().to_string()),
    }
}

fn covh(p: &mut Platform, hart: usize, call: CovhCall) -> Outcome {
    match p.covh(hart, call) {
        Ok(CovhReturn::Unit) => Outcome::unit(),
        Ok(CovhReturn::Info(i)) => Outcome::Ok {
            value: Some(i.page_size),
            detail: Some(format!(
                "version={} caps={:#x} max_tvms={}",
                i.version, i.capabilities, i.max_tvms
            )),
        },
        Ok(CovhReturn::Tvm(id)) => Outcome::value(id.0),
        Ok(CovhReturn::Count(n)) => Outcome::value(n),
        Ok(CovhReturn::Digest(d)) => Outcome::Ok {
            value: None,
            detail: Some(format!("digest={d}")),
        },
        Ok(CovhReturn::Exit(e)) => Outcome::Exit(e),
        Err(e) => from_platform(e),
    }
}

fn unit(r: Result<(), PlatformError>) -> Outcome {
    r.map_or_else(from_platform, |_| Outcome::unit())
}

fn value(r: Result<u64, PlatformError>) -> Outcome {
    r.map_or_else(from_platform, Outcome::value)
}

/// Executes one step against `p` on behalf of its actor.
pub(crate) fn execute(p: &mut Platform, actor: &Actor, op: &Op) -> Outcome {
    let hart = match actor {
        Actor::Host(h) | Actor::Adversary(h) => *h,
        Actor::Tvm(..) => 0,
    };
    match op {
        Op::Boot => unit(p.boot().map(|_| ())),
        Op::TsmInfo => covh(p, hart, CovhCall::TsmInfo),
        Op::Convert { page, count } => covh(
            p,
            hart,
            CovhCall::Convert {
                spa: spa(*page),
                pages: *count,
            },
        ),
        Op::Reclaim { page, count } => covh(
            p,
            hart,
            CovhCall::Reclaim {
                spa: spa(*page),
                pages: *count,
            },
        ),
        Op::Reassign { page, count } => covh(
            p,
            hart,
            CovhCall::Reassign {
                spa: spa(*page),
                pages: *count,
            },
        ),
        Op::TvmCreate { page, count, debug } => covh(
            p,
            hart,
            CovhCall::TvmCreate {
                spa: spa(*page),
                pages: *count,
                debug: *debug,
            },
        ),
        Op::AddPageTablePages { tvm, page, count } => covh(
            p,
            hart,
            CovhCall::AddPageTablePages {
                tvm: *tvm,
                spa: spa(*page),
                pages: *count,
            },
        ),
        Op::AddMemoryRegion { tvm, gpa, pages, kind } => covh(
            p,
            hart,
            CovhCall::AddMemoryRegion {
                tvm: *tvm,
                gpa: *gpa,
                pages: *pages,
                kind: *kind,
            },
        ),
        Op::AddMeasuredPages { tvm, src, dest, gpa } => covh(
            p,
            hart,
            CovhCall::AddMeasuredPages {
                tvm: *tvm,
                src: spa(*src),
                dest: spa(*dest),
                gpa: *gpa,
            },
        ),
        Op::CreateVcpu {
            tvm,
            vcpu,
            page,
            count,
            program,
        } => covh(
            p,
            hart,
            CovhCall::CreateVcpu {
                tvm: *tvm,
                vcpu: *vcpu,
                spa: spa(*page),
                pages: *count,
                program: spa(*program),
            },
        ),
        Op::Finalize { tvm } => covh(p, hart, CovhCall::Finalize { tvm: *tvm }),
        Op::Run { tvm, vcpu } => covh(p, hart, CovhCall::Run { tvm: *tvm, vcpu: *vcpu }),
        Op::AddZeroPages { tvm, page, gpa } => covh(
            p,
            hart,
            CovhCall::AddZeroPages {
                tvm: *tvm,
                dest: spa(*page),
                gpa: *gpa,
            },
        ),
        Op::AddSharedPages { tvm, page, gpa } => covh(
            p,
            hart,
            CovhCall::AddSharedPages {
                tvm: *tvm,
                src: spa(*page),
                gpa: *gpa,
            },
        ),
        Op::Destroy { tvm } => covh(p, hart, CovhCall::Destroy { tvm: *tvm }),
        Op::BindInterruptFile { tvm, vcpu, page } => covh(
            p,
            hart,
            CovhCall::BindInterruptFile {
                tvm: *tvm,
                vcpu: *vcpu,
                spa: spa(*page),
            },
        ),
        Op::InjectInterrupt { tvm, vcpu, irq } => {
            let irq = u32::try_from(*irq).unwrap_or(u32::MAX);
            unit(p.inject_interrupt(*tvm, *vcpu, irq))
        }
        Op::Teecall { function_id, args } => match p.teecall(hart, &DomainSwitchRequest::new(*function_id, args)) {
            Ok(r) if r.status == 0 => Outcome::value(r.values[0]),
            Ok(r) => Outcome::Error(
                TsmError::from_code(r.status).map_or_else(|| format!("Status{}", r.status), |e| e.name().to_string()),
            ),
            Err(e) => from_platform(e),
        },
        Op::Read { page, offset } => value(p.host_read(hart, spa(*page) + offset)),
        Op::Fetch { page, offset } => value(p.host_fetch(hart, spa(*page) + offset)),
        Op::Write { page, offset, value } => unit(p.host_write(hart, spa(*page) + offset, *value)),
        Op::Fill { page, value } => {
            unit((0..PAGE_SIZE as u64 / 8).try_for_each(|w| p.host_write(hart, spa(*page) + 8 * w, *value)))
        }
        Op::StageProgram { page, program } => unit(p.host_write_bytes(hart, spa(*page), &program.encode())),
        Op::Mode { priv_level, v } => unit(p.set_host_mode(hart, *priv_level, *v)),
        Op::HostIrq => unit(p.raise_host_interrupt(hart)),
        Op::Guest { tvm, vcpu, action } => match p.guest_step(hart, *tvm, *vcpu, action) {
            Ok(GuestStep::Value(v)) => Outcome::value(v),
            Ok(GuestStep::Status(0)) => Outcome::unit(),
            Ok(GuestStep::Status(s)) => {
                Outcome::Error(TsmError::from_code(s).map_or_else(|| format!("Status{s}"), |e| e.name().to_string()))
            }
            Ok(GuestStep::Exit(e)) => Outcome::Exit(e),
            Ok(GuestStep::Fault(ex)) => Outcome::Fault(ex.kind),
            Err(e) => from_platform(e),
        },
    }
}

pub(crate) fn mtt_delta(before: &[MttEntry], after: &[MttEntry]) -> Vec<String> {
    before
        .iter()
        .zip(after)
        .enumerate()
        .filter(|(_, (b, a))| b != a)
        .map(|(i, (b, a))| format!("{i:#x}:{b}->{a}"))
        .collect()
}

fn platform_for(sc: &Scenario) -> Platform {
    let mut p = Platform::new(sc.config.clone());
    if !sc.manual_boot {
        // A failed boot leaves the platform unbooted; steps then report NotBooted.
        let _ = p.boot();
    }
    p
}

fn record(seq: usize, step: &Step, outcome: &Outcome, delta: Vec<String>) -> TraceRecord {
    TraceRecord {
        seq: seq as u64,
        actor: step.actor.to_string(),
        op: step.op_name.clone(),
        args: step.args.clone(),
        result: outcome.to_string(),
        mtt_delta: delta,
    }
}

/// Runs every step on a fresh platform, checking expectations and the
/// platform invariants after each step.
pub fn run_scenario(sc: &Scenario) -> Report {
    let mut p = platform_for(sc);
    let mut report = Report {
        name: sc.name.clone(),
        ..Report::default()
    };
    for (i, step) in sc.steps.iter().enumerate() {
        let before = p.mem().entries().to_vec();
        let outcome = execute(&mut p, &step.actor, &step.op);
        let delta = mtt_delta(&before, p.mem().entries());
        report.steps_run += 1;

        if let Outcome::Error(name) = &outcome {
            report
                .error_coverage
                .entry(step.op_name.clone())
                .or_default()
                .insert(name.clone());
        }
        if let Some(expect) = &step.expect {
            if !outcome.matches(expect) {
                report.failures.push(Failure {
                    step: i,
                    line: step.line,
                    expected: expect.to_string(),
                    actual: outcome.to_string(),
                });
            }
        }
        for v in p.audit() {
            report.failures.push(Failure {
                step: i,
                line: step.line,
                expected: "invariants hold".to_string(),
                actual: v,
            });
        }
        report.trace.push(record(i, step, &outcome, delta));
    }
    report
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayMismatch {
    pub seq: u64,
    pub recorded: String,
    pub replayed: String,
}

/// Re-executes the operations of a trace on a fresh platform configured as
/// `base` and reports every step whose result or MTT delta differs.
pub fn replay_trace(base: &Scenario, records: &[TraceRecord]) -> Result<Vec<ReplayMismatch>, ParseError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&format!("{} {} {}", r.actor, r.op, r.args.join(" ")));
        if r.actor.starts_with("adversary") {
            text.push_str(" expect ok");
        }
        text.push('\n');
    }
    let mut sc = parse_scenario(&text)?;
    sc.name = base.name.clone();
    sc.config = base.config.clone();
    sc.manual_boot = base.manual_boot;
    for s in &mut sc.steps {
        s.expect = None;
    }
    let report = run_scenario(&sc);
    Ok(records
        .iter()
        .zip(&report.trace)
        .filter(|(a, b)| a.result != b.result || a.mtt_delta != b.mtt_delta)
        .map(|(a, b)| ReplayMismatch {
            seq: a.seq,
            recorded: a.result.clone(),
            replayed: b.result.clone(),
        })
        .collect())
}
