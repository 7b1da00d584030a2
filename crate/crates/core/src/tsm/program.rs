// SPDX-License-Identifier: Apache-2.0

//! Abstract vcpu programs.
//!
//! A vcpu executes an ordered list of actions instead of instructions. The
//! binary form below is what the host places in memory for `create_vcpu`
//! and what gets measured:
//!
//! ```text
//! program := u32:count action*
//! action  := 0x01 u8:kind(0=load 1=store 2=fetch) u64:gpa u64:value
//!          | 0x02 u64:call u8:argc u64*argc
//!          | 0x03                                   (wfi)
//!          | 0x04 u64:code                          (exit)
//! ```
//!
//! The text form, used by scenarios, separates actions with `;`:
//! `load 0x80000000; store 0x80000008 7; covg 0x101 0x90000000 1; wfi; exit 0`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Upper bound on an encoded program; it must fit beside the saved
/// registers in the first vcpu backing page.
pub const MAX_PROGRAM_BYTES: usize = 3584;
pub const MAX_COVG_ARGS: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TouchKind {
    Load,
    Store,
    Fetch,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Touch { gpa: u64, kind: TouchKind, value: u64 },
    Covg { call: u64, args: Vec<u64> },
    Wfi,
    Exit(u64),
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Touch {
                gpa,
                kind: TouchKind::Load,
                ..
            } => write!(f, "load {gpa:#x}"),
            Action::Touch {
                gpa,
                kind: TouchKind::Fetch,
                ..
            } => write!(f, "fetch {gpa:#x}"),
            Action::Touch {
                gpa,
                kind: TouchKind::Store,
                value,
            } => write!(f, "store {gpa:#x} {value:#x}"),
            Action::Covg { call, args } => {
                write!(f, "covg {call:#x}")?;
                for a in args {
                    write!(f, " {a:#x}")?;
                }
                Ok(())
            }
            Action::Wfi => f.write_str("wfi"),
            Action::Exit(code) => write!(f, "exit {code}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TvmProgram {
    actions: Vec<Action>,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ProgramError {
    #[error("truncated program")]
    Truncated,
    #[error("unknown action tag {0:#x}")]
    BadTag(u8),
    #[error("too many covg arguments")]
    TooManyArgs,
    #[error("program too large")]
    TooLarge,
    #[error("trailing bytes")]
    Trailing,
    #[error("bad action `{0}`")]
    Syntax(String),
}

impl TvmProgram {
    pub fn new(actions: Vec<Action>) -> Self {
        TvmProgram { actions }
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.actions.len() as u32).to_le_bytes());
        for a in &self.actions {
            match a {
                Action::Touch { gpa, kind, value } => {
                    out.push(0x01);
                    out.push(*kind as u8);
                    out.extend_from_slice(&gpa.to_le_bytes());
                    out.extend_from_slice(&value.to_le_bytes());
                }
                Action::Covg { call, args } => {
                    out.push(0x02);
                    out.extend_from_slice(&call.to_le_bytes());
                    out.push(args.len() as u8);
                    for a in args {
                        out.extend_from_slice(&a.to_le_bytes());
                    }
                }
                Action::Wfi => out.push(0x03),
                Action::Exit(code) => {
                    out.push(0x04);
                    out.extend_from_slice(&code.to_le_bytes());
                }
            }
        }
        out
    }

    /// Decodes a program from the start of `bytes`, ignoring anything after
    /// it. Returns the program and its encoded length.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize), ProgramError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], ProgramError> {
            let s = bytes.get(pos..pos + n).ok_or(ProgramError::Truncated)?;
            pos += n;
            Ok(s)
        };
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if count > MAX_PROGRAM_BYTES {
            return Err(ProgramError::TooLarge);
        }
        let mut actions = Vec::with_capacity(count);
        for _ in 0..count {
            let tag = take(1)?[0];
            let action = match tag {
                0x01 => {
                    let kind = match take(1)?[0] {
                        0 => TouchKind::Load,
                        1 => TouchKind::Store,
                        2 => TouchKind::Fetch,
                        k => return Err(ProgramError::BadTag(k)),
                    };
                    let gpa = u64::from_le_bytes(take(8)?.try_into().unwrap());
                    let value = u64::from_le_bytes(take(8)?.try_into().unwrap());
                    Action::Touch { gpa, kind, value }
                }
                0x02 => {
                    let call = u64::from_le_bytes(take(8)?.try_into().unwrap());
                    let argc = take(1)?[0] as usize;
                    if argc > MAX_COVG_ARGS {
                        return Err(ProgramError::TooManyArgs);
                    }
                    let mut args = Vec::with_capacity(argc);
                    for _ in 0..argc {
                        args.push(u64::from_le_bytes(take(8)?.try_into().unwrap()));
                    }
                    Action::Covg { call, args }
                }
                0x03 => Action::Wfi,
                0x04 => Action::Exit(u64::from_le_bytes(take(8)?.try_into().unwrap())),
                t => return Err(ProgramError::BadTag(t)),
            };
            actions.push(action);
        }
        if pos > MAX_PROGRAM_BYTES {
            return Err(ProgramError::TooLarge);
        }
        Ok((TvmProgram { actions }, pos))
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProgramError> {
        let (p, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(ProgramError::Trailing);
        }
        Ok(p)
    }

    /// Checks that the program can be handed to `create_vcpu`.
    pub fn validate(&self) -> Result<(), ProgramError> {
        if self
            .actions
            .iter()
            .any(|a| matches!(a, Action::Covg { args, .. } if args.len() > MAX_COVG_ARGS))
        {
            return Err(ProgramError::TooManyArgs);
        }
        if self.encode().len() > MAX_PROGRAM_BYTES {
            return Err(ProgramError::TooLarge);
        }
        Ok(())
    }
}

impl fmt::Display for TvmProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.actions.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

pub(crate) fn parse_int(s: &str) -> Option<u64> {
    let s = s.replace('_', "");
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u64::from_str_radix(hex, 16).ok()
    } else {
        s.parse().ok()
    }
}

impl FromStr for Action {
    type Err = ProgramError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ProgramError::Syntax(s.trim().to_string());
        let words: Vec<&str> = s.split_whitespace().collect();
        let (op, rest) = words.split_first().ok_or_else(bad)?;
        let nums: Vec<u64> = rest
            .iter()
            .map(|w| parse_int(w))
            .collect::<Option<_>>()
            .ok_or_else(bad)?;
        let touch = |kind, value| Action::Touch {
            gpa: nums[0],
            kind,
            value,
        };
        Ok(match (*op, nums.len()) {
            ("load", 1) => touch(TouchKind::Load, 0),
            ("fetch", 1) => touch(TouchKind::Fetch, 0),
            ("store", 2) => touch(TouchKind::Store, nums[1]),
            ("covg", n) if n >= 1 => {
                if n - 1 > MAX_COVG_ARGS {
                    return Err(ProgramError::TooManyArgs);
                }
                Action::Covg {
                    call: nums[0],
                    args: nums[1..].to_vec(),
                }
            }
            ("wfi", 0) => Action::Wfi,
            ("exit", 1) => Action::Exit(nums[0]),
            _ => return Err(bad()),
        })
    }
}

impl FromStr for TvmProgram {
    type Err = ProgramError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let actions = s
            .split(';')
            .filter(|part| !part.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Action>, _>>()?;
        let p = TvmProgram { actions };
        p.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn action() -> impl Strategy<Value = Action> {
        prop_oneof![
            (any::<u64>(), 0u8..3, any::<u64>()).prop_map(|(gpa, k, value)| Action::Touch {
                gpa,
                kind: [TouchKind::Load, TouchKind::Store, TouchKind::Fetch][k as usize],
                value: if k == 1 { value } else { 0 },
            }),
            (any::<u64>(), proptest::collection::vec(any::<u64>(), 0..=MAX_COVG_ARGS))
                .prop_map(|(call, args)| Action::Covg { call, args }),
            Just(Action::Wfi),
            any::<u64>().prop_map(Action::Exit),
        ]
    }

    proptest! {
        #[test]
        fn binary_and_text_forms_round_trip(actions in proptest::collection::vec(action(), 0..20)) {
            let p = TvmProgram::new(actions);
            prop_assert_eq!(TvmProgram::decode(&p.encode()).unwrap(), p.clone());
            prop_assert_eq!(p.to_string().parse::<TvmProgram>().unwrap(), p);
        }

        #[test]
        fn decoding_garbage_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = TvmProgram::decode(&bytes);
        }
    }

    #[test]
    fn text_form() {
        let p: TvmProgram = "load 0x8000_0000; store 0x80000008 7; wfi; exit 3".parse().unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.actions()[3], Action::Exit(3));
        assert!("jump 4".parse::<TvmProgram>().is_err());
        assert!("store 0x1000".parse::<TvmProgram>().is_err());
    }

    #[test]
    fn oversize_program_rejected() {
        let p = TvmProgram::new(vec![Action::Wfi; MAX_PROGRAM_BYTES]);
        assert_eq!(p.validate(), Err(ProgramError::TooLarge));
    }
}
