// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use thiserror::Error;

use super::{Actor, Expect, Op, Scenario, Step};
use crate::hart::PrivilegeLevel;
use crate::tsm::abi;
use crate::tsm::program::{parse_int, Action, TouchKind, TvmProgram};
use crate::tsm::tvm::RegionKind;
use crate::tsm::TsmError;
use crate::{PlatformConfig, TvmId, VcpuId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParseErrorKind {
    Syntax,
    UnknownOp,
    ArityMismatch,
    MissingExpectation,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub kind: ParseErrorKind,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: {}", self.line, self.column, self.message)
    }
}

#[derive(Clone, Copy, Debug)]
struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let code = line.split('#').next().unwrap_or("");
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in code.char_indices().chain(std::iter::once((code.len(), ' '))) {
        match (ch.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push(Token {
                    text: &code[s..i],
                    column: code[..s].chars().count() + 1,
                });
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Largest page number whose byte address fits in 64 bits.
const MAX_PAGE: u64 = u64::MAX >> 12;

const EXCEPTION_KINDS: &[&str] = &[
    "IllegalInstruction",
    "VirtualInstruction",
    "AccessFault",
    "GuestPageFault",
    "EcallFromVS",
    "EcallFromHS",
];

const PLATFORM_ERRORS: &[&str] = &[
    "NotBooted",
    "AlreadyBooted",
    "UnknownHart",
    "NotHostContext",
    "NotTsmContext",
    "BootFailed",
    "ConfidentialMode",
    "IllegalMode",
];

const EXIT_REASONS: &[&str] = &["page_fault", "request", "wfi", "halted", "interrupt"];

/// (name, min args, max args). Guest ops are only valid for `tvm` actors.
const HOST_OPS: &[(&str, usize, usize)] = &[
    ("boot", 0, 0),
    ("tsm_info", 0, 0),
    ("convert", 2, 2),
    ("reclaim", 2, 2),
    ("reassign", 2, 2),
    ("tvm_create", 2, 3),
    ("add_page_table_pages", 3, 3),
    ("add_memory_region", 4, 4),
    ("add_measured_pages", 4, 4),
    ("create_vcpu", 5, 5),
    ("finalize", 1, 1),
    ("run", 2, 2),
    ("add_zero_pages", 3, 3),
    ("add_shared_pages", 3, 3),
    ("destroy", 1, 1),
    ("bind_interrupt_file", 3, 3),
    ("inject_interrupt", 3, 3),
    ("teecall", 1, 7),
    ("read", 1, 2),
    ("fetch", 1, 2),
    ("write", 3, 3),
    ("fill", 2, 2),
    ("stage_program", 1, usize::MAX),
    ("mode", 1, 1),
    ("host_irq", 0, 0),
];

const ADVERSARY_ONLY_OPS: &[(&str, usize, usize)] =
    &[("guest_read", 3, 3), ("guest_fetch", 3, 3), ("guest_write", 4, 4)];

const GUEST_OPS: &[(&str, usize, usize)] = &[
    ("read", 1, 1),
    ("fetch", 1, 1),
    ("write", 2, 2),
    ("share", 2, 2),
    ("unshare", 2, 2),
    ("get_evidence", 1, 9),
    ("covg", 1, 1 + crate::tsm::program::MAX_COVG_ARGS),
];

struct LineParser<'a> {
    line: usize,
    tokens: Vec<Token<'a>>,
    line_len: usize,
}

impl<'a> LineParser<'a> {
    fn err(&self, column: usize, kind: ParseErrorKind, message: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            column,
            kind,
            message: message.into(),
        }
    }

    fn syntax(&self, tok: &Token<'_>, message: impl Into<String>) -> ParseError {
        self.err(tok.column, ParseErrorKind::Syntax, message)
    }

    fn int(&self, tok: &Token<'_>) -> Result<u64, ParseError> {
        parse_int(tok.text).ok_or_else(|| self.syntax(tok, format!("expected an integer, found `{}`", tok.text)))
    }

    fn page(&self, tok: &Token<'_>) -> Result<u64, ParseError> {
        let v = self.int(tok)?;
        if v > MAX_PAGE {
            return Err(self.syntax(tok, "page number out of range"));
        }
        Ok(v)
    }

    fn end_column(&self) -> usize {
        self.line_len + 1
    }
}

/// Parses a scenario script. Never panics; every malformed line yields a
/// positioned error.
pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    let mut sc = Scenario {
        name: "unnamed".to_string(),
        config: PlatformConfig::default(),
        manual_boot: false,
        steps: Vec::new(),
    };
    for (idx, raw) in text.lines().enumerate() {
        let p = LineParser {
            line: idx + 1,
            tokens: tokenize(raw),
            line_len: raw.split('#').next().unwrap_or("").trim_end().chars().count(),
        };
        let Some(first) = p.tokens.first().copied() else {
            continue;
        };
        match first.text {
            "scenario" | "config" if !sc.steps.is_empty() => {
                return Err(p.syntax(&first, "directives must precede the first step"));
            }
            "scenario" => {
                let name = p
                    .tokens
                    .get(1)
                    .ok_or_else(|| p.err(p.end_column(), ParseErrorKind::ArityMismatch, "scenario needs a name"))?;
                if p.tokens.len() > 2 {
                    return Err(p.err(
                        p.tokens[2].column,
                        ParseErrorKind::ArityMismatch,
                        "scenario takes one name",
                    ));
                }
                sc.name = name.text.to_string();
            }
            "config" => parse_config(&p, &mut sc)?,
            _ => sc.steps.push(parse_step(&p)?),
        }
    }
    Ok(sc)
}

fn parse_config(p: &LineParser<'_>, sc: &mut Scenario) -> Result<(), ParseError> {
    let key = p
        .tokens
        .get(1)
        .ok_or_else(|| p.err(p.end_column(), ParseErrorKind::ArityMismatch, "config needs a key"))?;
    let values = &p.tokens[2..];
    let one = || -> Result<&Token<'_>, ParseError> {
        match values {
            [v] => Ok(v),
            [] => Err(p.err(p.end_column(), ParseErrorKind::ArityMismatch, "missing value")),
            [_, extra, ..] => Err(p.err(extra.column, ParseErrorKind::ArityMismatch, "too many values")),
        }
    };
    let none = || -> Result<(), ParseError> {
        match values.first() {
            None => Ok(()),
            Some(t) => Err(p.err(t.column, ParseErrorKind::ArityMismatch, "unexpected value")),
        }
    };
    let c = &mut sc.config;
    match key.text {
        "memory_pages" => {
            let t = one()?;
            let v = p.int(t)?;
            if !(8..=1 << 20).contains(&v) {
                return Err(p.syntax(t, "memory_pages must be between 8 and 1048576"));
            }
            c.memory_pages = v;
        }
        "harts" => {
            let t = one()?;
            let v = p.int(t)?;
            if !(1..=64).contains(&v) {
                return Err(p.syntax(t, "harts must be between 1 and 64"));
            }
            c.harts = v as usize;
        }
        "max_tvms" => c.max_tvms = p.int(one()?)?,
        "tsm_version" => c.tsm_version = p.int(one()?)?,
        "root_secret" => {
            let t = one()?;
            let bytes = hex::decode(t.text)
                .ok()
                .and_then(|b| <[u8; 32]>::try_from(b).ok())
                .ok_or_else(|| p.syntax(t, "root_secret must be 64 hex digits"))?;
            c.root_secret = bytes;
        }
        "tsm_blob" => {
            if values.is_empty() {
                return Err(p.err(p.end_column(), ParseErrorKind::ArityMismatch, "missing value"));
            }
            c.tsm_blob = values.iter().map(|t| t.text).collect::<Vec<_>>().join(" ").into_bytes();
        }
        "debug_platform" => {
            none()?;
            c.debug_platform = true;
        }
        "boot" => {
            let t = one()?;
            if t.text != "manual" {
                return Err(p.syntax(t, "expected `manual`"));
            }
            sc.manual_boot = true;
        }
        _ => return Err(p.syntax(key, format!("unknown config key `{}`", key.text))),
    }
    Ok(())
}

fn parse_step(p: &LineParser<'_>) -> Result<Step, ParseError> {
    let toks = &p.tokens;
    let head = toks[0];
    let (actor, mut pos) = match head.text.split_once(':') {
        _ if head.text == "tvm" => {
            let id = toks.get(1).ok_or_else(|| {
                p.err(
                    p.end_column(),
                    ParseErrorKind::ArityMismatch,
                    "tvm actor needs <id> <vcpu>",
                )
            })?;
            let vcpu = toks.get(2).ok_or_else(|| {
                p.err(
                    p.end_column(),
                    ParseErrorKind::ArityMismatch,
                    "tvm actor needs <id> <vcpu>",
                )
            })?;
            (Actor::Tvm(TvmId(p.int(id)?), VcpuId(p.int(vcpu)?)), 3)
        }
        None if head.text == "host" => (Actor::Host(0), 1),
        None if head.text == "adversary" => (Actor::Adversary(0), 1),
        Some((name @ ("host" | "adversary"), hart)) => {
            let h = parse_int(hart)
                .filter(|h| *h < 64)
                .ok_or_else(|| p.syntax(&head, "bad hart index"))? as usize;
            (
                if name == "host" {
                    Actor::Host(h)
                } else {
                    Actor::Adversary(h)
                },
                1,
            )
        }
        _ => return Err(p.syntax(&head, format!("unknown actor `{}`", head.text))),
    };

    let op_tok = *toks
        .get(pos)
        .ok_or_else(|| p.err(p.end_column(), ParseErrorKind::ArityMismatch, "missing operation"))?;
    pos += 1;
    let expect_at = toks[pos..].iter().position(|t| t.text == "expect").map(|i| i + pos);
    let args: Vec<Token<'_>> = toks[pos..expect_at.unwrap_or(toks.len())].to_vec();

    let table: Vec<(&str, usize, usize)> = match actor {
        Actor::Tvm(..) => GUEST_OPS.to_vec(),
        Actor::Host(_) => HOST_OPS.to_vec(),
        Actor::Adversary(_) => HOST_OPS.iter().chain(ADVERSARY_ONLY_OPS).copied().collect(),
    };
    let Some(&(_, min, max)) = table.iter().find(|(n, _, _)| *n == op_tok.text) else {
        return Err(p.err(
            op_tok.column,
            ParseErrorKind::UnknownOp,
            format!("unknown operation `{}` for {}", op_tok.text, actor),
        ));
    };
    if args.len() < min {
        let col = expect_at.map_or(p.end_column(), |i| toks[i].column);
        return Err(p.err(
            col,
            ParseErrorKind::ArityMismatch,
            format!(
                "`{}` takes at least {min} argument(s), found {}",
                op_tok.text,
                args.len()
            ),
        ));
    }
    if args.len() > max {
        return Err(p.err(
            args[max].column,
            ParseErrorKind::ArityMismatch,
            format!(
                "`{}` takes at most {max} argument(s), found {}",
                op_tok.text,
                args.len()
            ),
        ));
    }

    let op = match actor {
        Actor::Tvm(tvm, vcpu) => Op::Guest {
            tvm,
            vcpu,
            action: guest_action(p, op_tok.text, &args)?,
        },
        _ => host_op(p, op_tok.text, &args)?,
    };

    let expect = match expect_at {
        Some(i) => Some(parse_expect(p, &toks[i], &toks[i + 1..])?),
        None => None,
    };
    if matches!(actor, Actor::Adversary(_)) && expect.is_none() {
        return Err(p.err(
            p.end_column(),
            ParseErrorKind::MissingExpectation,
            "adversary steps must state an expectation",
        ));
    }

    Ok(Step {
        line: p.line,
        actor,
        op_name: op_tok.text.to_string(),
        args: args.iter().map(|t| t.text.to_string()).collect(),
        op,
        expect,
    })
}

fn guest_action(p: &LineParser<'_>, name: &str, args: &[Token<'_>]) -> Result<Action, ParseError> {
    let n: Vec<u64> = args.iter().map(|t| p.int(t)).collect::<Result<_, _>>()?;
    let touch = |kind, value| Action::Touch { gpa: n[0], kind, value };
    Ok(match name {
        "read" => touch(TouchKind::Load, 0),
        "fetch" => touch(TouchKind::Fetch, 0),
        "write" => touch(TouchKind::Store, n[1]),
        "share" => Action::Covg {
            call: abi::COVG_SHARE,
            args: n,
        },
        "unshare" => Action::Covg {
            call: abi::COVG_UNSHARE,
            args: n,
        },
        "get_evidence" => Action::Covg {
            call: abi::COVG_GET_EVIDENCE,
            args: n,
        },
        "covg" => Action::Covg {
            call: n[0],
            args: n[1..].to_vec(),
        },
        _ => unreachable!("checked against GUEST_OPS"),
    })
}

fn host_op(p: &LineParser<'_>, name: &str, args: &[Token<'_>]) -> Result<Op, ParseError> {
    let int = |i: usize| p.int(&args[i]);
    let page = |i: usize| p.page(&args[i]);
    let tvm = |i: usize| int(i).map(TvmId);
    let vcpu = |i: usize| int(i).map(VcpuId);
    let offset = |i: usize| -> Result<u64, ParseError> {
        match args.get(i) {
            None => Ok(0),
            Some(t) => {
                let v = p.int(t)?;
                if v >= crate::PAGE_SIZE as u64 {
                    return Err(p.syntax(t, "offset must be within the page"));
                }
                Ok(v)
            }
        }
    };
    Ok(match name {
        "boot" => Op::Boot,
        "tsm_info" => Op::TsmInfo,
        "convert" => Op::Convert {
            page: page(0)?,
            count: int(1)?,
        },
        "reclaim" => Op::Reclaim {
            page: page(0)?,
            count: int(1)?,
        },
        "reassign" => Op::Reassign {
            page: page(0)?,
            count: int(1)?,
        },
        "tvm_create" => Op::TvmCreate {
            page: page(0)?,
            count: int(1)?,
            debug: match args.get(2) {
                None => false,
                Some(t) if t.text == "debug" => true,
                Some(t) => return Err(p.syntax(t, "expected `debug`")),
            },
        },
        "add_page_table_pages" => Op::AddPageTablePages {
            tvm: tvm(0)?,
            page: page(1)?,
            count: int(2)?,
        },
        "add_memory_region" => Op::AddMemoryRegion {
            tvm: tvm(0)?,
            gpa: int(1)?,
            pages: int(2)?,
            kind: match args[3].text {
                "confidential" => RegionKind::Confidential,
                "shared" => RegionKind::NonConfidentialShared,
                _ => return Err(p.syntax(&args[3], "expected `confidential` or `shared`")),
            },
        },
        "add_measured_pages" => Op::AddMeasuredPages {
            tvm: tvm(0)?,
            src: page(1)?,
            dest: page(2)?,
            gpa: int(3)?,
        },
        "create_vcpu" => Op::CreateVcpu {
            tvm: tvm(0)?,
            vcpu: vcpu(1)?,
            page: page(2)?,
            count: int(3)?,
            program: page(4)?,
        },
        "finalize" => Op::Finalize { tvm: tvm(0)? },
        "run" => Op::Run {
            tvm: tvm(0)?,
            vcpu: vcpu(1)?,
        },
        "add_zero_pages" => Op::AddZeroPages {
            tvm: tvm(0)?,
            page: page(1)?,
            gpa: int(2)?,
        },
        "add_shared_pages" => Op::AddSharedPages {
            tvm: tvm(0)?,
            page: page(1)?,
            gpa: int(2)?,
        },
        "destroy" => Op::Destroy { tvm: tvm(0)? },
        "bind_interrupt_file" => Op::BindInterruptFile {
            tvm: tvm(0)?,
            vcpu: vcpu(1)?,
            page: page(2)?,
        },
        "inject_interrupt" => Op::InjectInterrupt {
            tvm: tvm(0)?,
            vcpu: vcpu(1)?,
            irq: int(2)?,
        },
        "teecall" => Op::Teecall {
            function_id: int(0)?,
            args: (1..args.len()).map(int).collect::<Result<_, _>>()?,
        },
        "read" => Op::Read {
            page: page(0)?,
            offset: offset(1)?,
        },
        "fetch" => Op::Fetch {
            page: page(0)?,
            offset: offset(1)?,
        },
        "write" => Op::Write {
            page: page(0)?,
            offset: offset(1)?,
            value: int(2)?,
        },
        "fill" => Op::Fill {
            page: page(0)?,
            value: int(1)?,
        },
        "stage_program" => {
            let text = args[1..].iter().map(|t| t.text).collect::<Vec<_>>().join(" ");
            let program: TvmProgram = text.parse().map_err(|e| {
                let col = args.get(1).map_or(p.end_column(), |t| t.column);
                p.err(col, ParseErrorKind::Syntax, format!("bad program: {e}"))
            })?;
            Op::StageProgram {
                page: page(0)?,
                program,
            }
        }
        "mode" => {
            let (priv_level, v) = match args[0].text {
                "U" => (PrivilegeLevel::U, false),
                "S" => (PrivilegeLevel::S, false),
                "VS" => (PrivilegeLevel::S, true),
                "VU" => (PrivilegeLevel::U, true),
                _ => return Err(p.syntax(&args[0], "expected U, S, VS or VU")),
            };
            Op::Mode { priv_level, v }
        }
        "host_irq" => Op::HostIrq,
        "guest_read" | "guest_fetch" | "guest_write" => {
            let kind = match name {
                "guest_read" => TouchKind::Load,
                "guest_fetch" => TouchKind::Fetch,
                _ => TouchKind::Store,
            };
            Op::Guest {
                tvm: tvm(0)?,
                vcpu: vcpu(1)?,
                action: Action::Touch {
                    gpa: int(2)?,
                    kind,
                    value: if kind == TouchKind::Store { int(3)? } else { 0 },
                },
            }
        }
        _ => unreachable!("checked against HOST_OPS"),
    })
}

fn parse_expect(p: &LineParser<'_>, kw: &Token<'_>, rest: &[Token<'_>]) -> Result<Expect, ParseError> {
    let Some(kind) = rest.first() else {
        return Err(p.err(kw.column, ParseErrorKind::Syntax, "expect needs a clause"));
    };
    let arity = |n: usize| -> Result<(), ParseError> {
        if rest.len() - 1 < n {
            Err(p.err(
                p.end_column(),
                ParseErrorKind::Syntax,
                format!("`expect {}` is incomplete", kind.text),
            ))
        } else if rest.len() - 1 > n {
            Err(p.err(
                rest[n + 1].column,
                ParseErrorKind::Syntax,
                "trailing tokens after expectation",
            ))
        } else {
            Ok(())
        }
    };
    Ok(match kind.text {
        "ok" => {
            arity(0)?;
            Expect::Ok
        }
        "error" => {
            arity(1)?;
            let name = rest[1].text;
            if TsmError::from_name(name).is_none() && !PLATFORM_ERRORS.contains(&name) {
                return Err(p.syntax(&rest[1], format!("unknown error name `{name}`")));
            }
            Expect::Error(name.to_string())
        }
        "fault" => {
            arity(1)?;
            if !EXCEPTION_KINDS.contains(&rest[1].text) {
                return Err(p.syntax(&rest[1], format!("unknown exception kind `{}`", rest[1].text)));
            }
            Expect::Fault(rest[1].text.to_string())
        }
        "value" => {
            arity(1)?;
            Expect::Value(p.int(&rest[1])?)
        }
        "exit" => {
            let reason = rest
                .get(1)
                .ok_or_else(|| p.err(p.end_column(), ParseErrorKind::Syntax, "`expect exit` needs a reason"))?;
            if !EXIT_REASONS.contains(&reason.text) {
                return Err(p.syntax(reason, format!("unknown exit reason `{}`", reason.text)));
            }
            let arg = match rest.get(2) {
                Some(t) => Some(p.int(t)?),
                None => None,
            };
            if let Some(t) = rest.get(3) {
                return Err(p.syntax(t, "trailing tokens after expectation"));
            }
            Expect::Exit {
                reason: reason.text.to_string(),
                arg,
            }
        }
        _ => return Err(p.syntax(kind, format!("unknown expectation `{}`", kind.text))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn host_convert_line() {
        let sc = parse_scenario("host convert 0x100 4 expect ok").unwrap();
        let s = &sc.steps[0];
        assert_eq!(s.actor, Actor::Host(0));
        assert_eq!(s.op, Op::Convert { page: 0x100, count: 4 });
        assert_eq!(s.expect, Some(Expect::Ok));
    }

    #[test]
    fn adversary_needs_expectation() {
        let e = parse_scenario("adversary read 0x100").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::MissingExpectation);
        assert_eq!(e.line, 1);
    }

    #[test]
    fn unknown_op_is_positioned() {
        let e = parse_scenario("# comment\n\nhost tvm_creat 1").unwrap_err();
        assert_eq!((e.line, e.column, e.kind), (3, 6, ParseErrorKind::UnknownOp));
    }

    #[test]
    fn arity_and_syntax_errors() {
        let e = parse_scenario("host convert 0x100").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::ArityMismatch);
        let e = parse_scenario("host convert 0x100 4 5").unwrap_err();
        assert_eq!((e.kind, e.column), (ParseErrorKind::ArityMismatch, 22));
        let e = parse_scenario("host convert 0x1g0 4").unwrap_err();
        assert_eq!((e.kind, e.column), (ParseErrorKind::Syntax, 14));
        let e = parse_scenario("host convert 1 1 expect error Nope").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::Syntax);
        let e = parse_scenario("host convert 1 1\nconfig harts 2").unwrap_err();
        assert_eq!(e.line, 2);
    }

    #[test]
    fn tvm_actor_and_programs() {
        let sc = parse_scenario(
            "scenario demo\nconfig memory_pages 64\nhost stage_program 3 load 0x1000; exit 2 expect ok\ntvm 0 1 read 0x1000 expect value 0",
        )
        .unwrap();
        assert_eq!(sc.name, "demo");
        assert_eq!(sc.config.memory_pages, 64);
        match &sc.steps[0].op {
            Op::StageProgram { page: 3, program } => assert_eq!(program.len(), 2),
            other => panic!("{other:?}"),
        }
        assert_eq!(sc.steps[1].actor, Actor::Tvm(TvmId(0), VcpuId(1)));
    }

    proptest! {
        #[test]
        fn parser_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
            let text = String::from_utf8_lossy(&bytes);
            let _ = parse_scenario(&text);
        }

        #[test]
        fn parser_is_total_on_token_soup(words in proptest::collection::vec(
            prop_oneof![
                Just("host"), Just("tvm"), Just("adversary"), Just("expect"), Just("ok"), Just("error"),
                Just("value"), Just("exit"), Just("convert"), Just("run"), Just("stage_program"), Just(";"),
                Just("0x10"), Just("1"), Just("18446744073709551615"), Just("\n"), Just("#"), Just("config"),
                Just("fault"), Just("AccessFault"), Just("halted"), Just("mode"), Just("VS"), Just("teecall"),
            ], 0..40)) {
            let _ = parse_scenario(&words.join(" "));
        }
    }
}
