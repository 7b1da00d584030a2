// SPDX-License-Identifier: Apache-2.0

//! Function identifiers and register marshalling for the TSM ABIs.
//!
//! | id      | call                 | a0..a5 arguments                               | a1..a5 results                |
//! |---------|----------------------|------------------------------------------------|-------------------------------|
//! | 0x00    | tsm_info             | -                                              | version, caps, page size, max |
//! | 0x01    | convert              | spa, pages                                     | -                             |
//! | 0x02    | tvm_create           | state spa, pages, flags (bit 0 = debug)        | tvm id                        |
//! | 0x03    | add_page_table_pages | tvm, spa, pages                                | -                             |
//! | 0x04    | add_memory_region    | tvm, gpa, pages, kind (0 conf, 1 shared)       | -                             |
//! | 0x05    | add_measured_pages   | tvm, src spa, dest spa, gpa                    | -                             |
//! | 0x06    | create_vcpu          | tvm, vcpu, backing spa, pages, program spa     | -                             |
//! | 0x07    | finalize             | tvm                                            | digest (4 words)              |
//! | 0x08    | run                  | tvm, vcpu                                      | exit reason, detail, args     |
//! | 0x09    | add_zero_pages       | tvm, dest spa, gpa                             | -                             |
//! | 0x0A    | add_shared_pages     | tvm, src spa, gpa                              | -                             |
//! | 0x0B    | destroy              | tvm                                            | -                             |
//! | 0x0C    | reassign             | spa, pages                                     | pages                         |
//! | 0x0D    | reclaim              | spa, pages                                     | -                             |
//! | 0x100   | covg get_evidence    | out gpa, report data (8 words)                 | status                        |
//! | 0x101   | covg share           | gpa, pages                                     | status                        |
//! | 0x102   | covg unshare         | gpa, pages                                     | status                        |
//! | 0x200   | covi bind            | tvm, vcpu, spa                                 | -                             |
//!
//! Exit reasons returned by `run`: 0 guest page fault (detail = gpa),
//! 1 guest request (detail = call id, then up to three arguments), 2 wfi,
//! 3 halted (detail = code), 4 interrupt pending.

use std::fmt;

use crate::hart::Exception;
use crate::tsm::tvm::RegionKind;
use crate::tsm::TsmError;
use crate::tsm_driver::{DomainSwitchRequest, SwitchResponse};
use crate::{Digest, TvmId, VcpuId};

pub const TSM_INFO: u64 = 0x00;
pub const CONVERT: u64 = 0x01;
pub const TVM_CREATE: u64 = 0x02;
pub const ADD_PAGE_TABLE_PAGES: u64 = 0x03;
pub const ADD_MEMORY_REGION: u64 = 0x04;
pub const ADD_MEASURED_PAGES: u64 = 0x05;
pub const CREATE_VCPU: u64 = 0x06;
pub const FINALIZE: u64 = 0x07;
pub const RUN: u64 = 0x08;
pub const ADD_ZERO_PAGES: u64 = 0x09;
pub const ADD_SHARED_PAGES: u64 = 0x0A;
pub const DESTROY: u64 = 0x0B;
pub const REASSIGN: u64 = 0x0C;
pub const RECLAIM: u64 = 0x0D;

pub const COVG_GET_EVIDENCE: u64 = 0x100;
pub const COVG_SHARE: u64 = 0x101;
pub const COVG_UNSHARE: u64 = 0x102;

pub const COVI_BIND_INTERRUPT_FILE: u64 = 0x200;

pub const CAP_COVH: u64 = 1 << 0;
pub const CAP_COVG: u64 = 1 << 1;
pub const CAP_COVI: u64 = 1 << 2;

/// A host-side call to the TSM.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CovhCall {
    TsmInfo,
    Convert {
        spa: u64,
        pages: u64,
    },
    TvmCreate {
        spa: u64,
        pages: u64,
        debug: bool,
    },
    AddPageTablePages {
        tvm: TvmId,
        spa: u64,
        pages: u64,
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
        spa: u64,
        pages: u64,
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
        dest: u64,
        gpa: u64,
    },
    AddSharedPages {
        tvm: TvmId,
        src: u64,
        gpa: u64,
    },
    Destroy {
        tvm: TvmId,
    },
    Reassign {
        spa: u64,
        pages: u64,
    },
    Reclaim {
        spa: u64,
        pages: u64,
    },
    BindInterruptFile {
        tvm: TvmId,
        vcpu: VcpuId,
        spa: u64,
    },
}

impl CovhCall {
    pub fn function_id(&self) -> u64 {
        use CovhCall::*;
        match self {
            TsmInfo => TSM_INFO,
            Convert { .. } => CONVERT,
            TvmCreate { .. } => TVM_CREATE,
            AddPageTablePages { .. } => ADD_PAGE_TABLE_PAGES,
            AddMemoryRegion { .. } => ADD_MEMORY_REGION,
            AddMeasuredPages { .. } => ADD_MEASURED_PAGES,
            CreateVcpu { .. } => CREATE_VCPU,
            Finalize { .. } => FINALIZE,
            Run { .. } => RUN,
            AddZeroPages { .. } => ADD_ZERO_PAGES,
            AddSharedPages { .. } => ADD_SHARED_PAGES,
            Destroy { .. } => DESTROY,
            Reassign { .. } => REASSIGN,
            Reclaim { .. } => RECLAIM,
            BindInterruptFile { .. } => COVI_BIND_INTERRUPT_FILE,
        }
    }

    pub fn name(&self) -> &'static str {
        function_name(self.function_id()).unwrap_or("unknown")
    }

    pub fn to_request(&self) -> DomainSwitchRequest {
        use CovhCall::*;
        let kind_code = |k: &RegionKind| match k {
            RegionKind::Confidential => 0,
            RegionKind::NonConfidentialShared => 1,
        };
        let args: Vec<u64> = match *self {
            TsmInfo => vec![],
            Convert { spa, pages } | Reassign { spa, pages } | Reclaim { spa, pages } => vec![spa, pages],
            TvmCreate { spa, pages, debug } => vec![spa, pages, debug as u64],
            AddPageTablePages { tvm, spa, pages } => vec![tvm.0, spa, pages],
            AddMemoryRegion { tvm, gpa, pages, kind } => vec![tvm.0, gpa, pages, kind_code(&kind)],
            AddMeasuredPages { tvm, src, dest, gpa } => vec![tvm.0, src, dest, gpa],
            CreateVcpu {
                tvm,
                vcpu,
                spa,
                pages,
                program,
            } => vec![tvm.0, vcpu.0, spa, pages, program],
            Finalize { tvm } | Destroy { tvm } => vec![tvm.0],
            Run { tvm, vcpu } => vec![tvm.0, vcpu.0],
            AddZeroPages { tvm, dest, gpa } => vec![tvm.0, dest, gpa],
            AddSharedPages { tvm, src, gpa } => vec![tvm.0, src, gpa],
            BindInterruptFile { tvm, vcpu, spa } => vec![tvm.0, vcpu.0, spa],
        };
        DomainSwitchRequest::new(self.function_id(), &args)
    }

    /// Decodes a request as seen by the TSM.
    pub fn from_request(req: &DomainSwitchRequest) -> Result<Self, TsmError> {
        use CovhCall::*;
        let a = req.args;
        let tvm = TvmId(a[0]);
        Ok(match req.function_id {
            TSM_INFO => TsmInfo,
            CONVERT => Convert { spa: a[0], pages: a[1] },
            TVM_CREATE => TvmCreate {
                spa: a[0],
                pages: a[1],
                debug: match a[2] {
                    0 => false,
                    1 => true,
                    _ => return Err(TsmError::InvalidArgument),
                },
            },
            ADD_PAGE_TABLE_PAGES => AddPageTablePages {
                tvm,
                spa: a[1],
                pages: a[2],
            },
            ADD_MEMORY_REGION => AddMemoryRegion {
                tvm,
                gpa: a[1],
                pages: a[2],
                kind: match a[3] {
                    0 => RegionKind::Confidential,
                    1 => RegionKind::NonConfidentialShared,
                    _ => return Err(TsmError::InvalidArgument),
                },
            },
            ADD_MEASURED_PAGES => AddMeasuredPages {
                tvm,
                src: a[1],
                dest: a[2],
                gpa: a[3],
            },
            CREATE_VCPU => CreateVcpu {
                tvm,
                vcpu: VcpuId(a[1]),
                spa: a[2],
                pages: a[3],
                program: a[4],
            },
            FINALIZE => Finalize { tvm },
            RUN => Run {
                tvm,
                vcpu: VcpuId(a[1]),
            },
            ADD_ZERO_PAGES => AddZeroPages {
                tvm,
                dest: a[1],
                gpa: a[2],
            },
            ADD_SHARED_PAGES => AddSharedPages {
                tvm,
                src: a[1],
                gpa: a[2],
            },
            DESTROY => Destroy { tvm },
            REASSIGN => Reassign { spa: a[0], pages: a[1] },
            RECLAIM => Reclaim { spa: a[0], pages: a[1] },
            COVI_BIND_INTERRUPT_FILE => BindInterruptFile {
                tvm,
                vcpu: VcpuId(a[1]),
                spa: a[2],
            },
            _ => return Err(TsmError::UnknownFunction),
        })
    }
}

pub fn function_name(id: u64) -> Option<&'static str> {
    Some(match id {
        TSM_INFO => "tsm_info",
        CONVERT => "convert",
        TVM_CREATE => "tvm_create",
        ADD_PAGE_TABLE_PAGES => "add_page_table_pages",
        ADD_MEMORY_REGION => "add_memory_region",
        ADD_MEASURED_PAGES => "add_measured_pages",
        CREATE_VCPU => "create_vcpu",
        FINALIZE => "finalize",
        RUN => "run",
        ADD_ZERO_PAGES => "add_zero_pages",
        ADD_SHARED_PAGES => "add_shared_pages",
        DESTROY => "destroy",
        REASSIGN => "reassign",
        RECLAIM => "reclaim",
        COVG_GET_EVIDENCE => "covg_get_evidence",
        COVG_SHARE => "covg_share",
        COVG_UNSHARE => "covg_unshare",
        COVI_BIND_INTERRUPT_FILE => "covi_bind_interrupt_file",
        _ => return None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TsmInfo {
    pub version: u64,
    pub capabilities: u64,
    pub page_size: u64,
    pub max_tvms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ExitReason {
    GuestPageFault(u64),
    GuestRequest { call: u64, args: Vec<u64> },
    Wfi,
    Halted(u64),
    InterruptPending,
}

/// Why `run` returned to the host. `details` carries the exception that
/// stopped a faulted vcpu.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TvmExit {
    pub reason: ExitReason,
    pub details: Option<Exception>,
}

impl TvmExit {
    pub fn new(reason: ExitReason) -> Self {
        TvmExit { reason, details: None }
    }

    fn encode(&self) -> [u64; 5] {
        let mut v = [0u64; 5];
        match &self.reason {
            ExitReason::GuestPageFault(gpa) => v[1] = *gpa,
            ExitReason::GuestRequest { call, args } => {
                v[0] = 1;
                v[1] = *call;
                for (slot, a) in v[2..].iter_mut().zip(args) {
                    *slot = *a;
                }
            }
            ExitReason::Wfi => v[0] = 2,
            ExitReason::Halted(code) => {
                v[0] = 3;
                v[1] = *code;
            }
            ExitReason::InterruptPending => v[0] = 4,
        }
        v
    }

    fn decode(v: &[u64; 5]) -> Option<TvmExit> {
        let reason = match v[0] {
            0 => ExitReason::GuestPageFault(v[1]),
            1 => ExitReason::GuestRequest {
                call: v[1],
                args: v[2..].to_vec(),
            },
            2 => ExitReason::Wfi,
            3 => ExitReason::Halted(v[1]),
            4 => ExitReason::InterruptPending,
            _ => return None,
        };
        Some(TvmExit::new(reason))
    }
}

impl fmt::Display for TvmExit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.reason {
            ExitReason::GuestPageFault(gpa) => write!(f, "page_fault {gpa:#x}"),
            ExitReason::GuestRequest { call, .. } => write!(f, "request {call:#x}"),
            ExitReason::Wfi => f.write_str("wfi"),
            ExitReason::Halted(code) => write!(f, "halted {code}"),
            ExitReason::InterruptPending => f.write_str("interrupt"),
        }
    }
}

/// Typed result of a host call.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum CovhReturn {
    Unit,
    Info(TsmInfo),
    Tvm(TvmId),
    Digest(Digest),
    Exit(TvmExit),
    Count(u64),
}

impl CovhReturn {
    pub(crate) fn encode(&self) -> [u64; 5] {
        match self {
            CovhReturn::Unit => [0; 5],
            CovhReturn::Info(i) => [i.version, i.capabilities, i.page_size, i.max_tvms, 0],
            CovhReturn::Tvm(id) => [id.0, 0, 0, 0, 0],
            CovhReturn::Digest(d) => {
                let w = d.to_words();
                [w[0], w[1], w[2], w[3], 0]
            }
            CovhReturn::Exit(e) => e.encode(),
            CovhReturn::Count(n) => [*n, 0, 0, 0, 0],
        }
    }

    /// Decodes the response registers of `call`.
    pub fn decode(call: &CovhCall, resp: &SwitchResponse) -> Result<CovhReturn, TsmError> {
        if resp.status != 0 {
            return Err(TsmError::from_code(resp.status).unwrap_or(TsmError::InvalidArgument));
        }
        let v = &resp.values;
        Ok(match call {
            CovhCall::TsmInfo => CovhReturn::Info(TsmInfo {
                version: v[0],
                capabilities: v[1],
                page_size: v[2],
                max_tvms: v[3],
            }),
            CovhCall::TvmCreate { .. } => CovhReturn::Tvm(TvmId(v[0])),
            CovhCall::Finalize { .. } => CovhReturn::Digest(Digest::from_words([v[0], v[1], v[2], v[3]])),
            CovhCall::Run { .. } => CovhReturn::Exit(TvmExit::decode(v).ok_or(TsmError::InvalidArgument)?),
            CovhCall::Reassign { .. } => CovhReturn::Count(v[0]),
            _ => CovhReturn::Unit,
        })
    }
}
