// SPDX-License-Identifier: Apache-2.0

//! The TEE Security Manager.
//!
//! The TSM owns every TVM's G-stage mappings, vcpu contexts and
//! measurement, and is the only software that changes the MTT after boot.
//! Host requests arrive through the TSM-driver as register-encoded COVH
//! calls ([`abi`]); guest requests arrive as COVG actions executed by a
//! running vcpu. All calls validate fully before changing any state.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::attestation::{self, TsmCredentials};
use crate::hart::{
    self, ActiveContext, Exception, ExceptionKind, Hart, HartError, HartOp, PrivilegeLevel, REG_A0, REG_A1,
};
use crate::mem_tracking::{
    AccessContext, AccessKind, Domain, MemTracker, MttEntry, MttError, Owner, PageAddr, PageUse,
};
use crate::tsm_driver::{DomainSwitchRequest, SwitchResponse};
use crate::{Digest, TvmId, VcpuId, PAGE_SIZE};

pub mod abi;
pub mod measurement;
pub mod program;
pub mod tvm;

use abi::{CovhCall, CovhReturn, ExitReason, TsmInfo, TvmExit};
use program::{Action, TouchKind, TvmProgram};
use tvm::{MappingKind, MemRegion, RegionKind, TablePage, Tvm, TvmPhase, VcpuContext};

macro_rules! tsm_errors {
    ($($(#[$doc:meta])* $name:ident = $code:literal, $msg:literal;)*) => {
        /// Status codes returned in `a0`. Zero means success.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Error)]
        #[repr(u64)]
        pub enum TsmError {
            $($(#[$doc])* #[error($msg)] $name = $code,)*
        }

        impl TsmError {
            pub const ALL: &'static [TsmError] = &[$(TsmError::$name,)*];

            pub fn code(self) -> u64 {
                self as u64
            }

            pub fn from_code(code: u64) -> Option<Self> {
                match code {
                    $($code => Some(TsmError::$name),)*
                    _ => None,
                }
            }

            pub fn name(self) -> &'static str {
                match self {
                    $(TsmError::$name => stringify!($name),)*
                }
            }

            pub fn from_name(name: &str) -> Option<Self> {
                match name {
                    $(stringify!($name) => Some(TsmError::$name),)*
                    _ => None,
                }
            }
        }
    };
}

tsm_errors! {
    UnknownFunction = 1, "unknown function";
    InvalidArgument = 2, "invalid argument";
    Unaligned = 3, "address not page aligned";
    OutOfBounds = 4, "address outside physical memory";
    AlreadyConfidential = 5, "page already confidential";
    PageInUse = 6, "page in use";
    NotConfidential = 7, "page not confidential";
    PageNotFree = 8, "page not free confidential memory";
    TooFewPages = 9, "too few pages";
    TvmLimit = 10, "too many TVMs";
    UnknownTvm = 11, "unknown TVM";
    OutOfTablePages = 12, "no G-stage table capacity";
    Overlap = 13, "region overlaps an existing region";
    WrongPhase = 14, "call not allowed in this TVM phase";
    BadSource = 15, "source page must be non-confidential";
    GpaUnmappedRegion = 16, "gpa outside a region of the required kind";
    GpaAlreadyMapped = 17, "gpa already mapped";
    DuplicateVcpu = 18, "vcpu id in use";
    NoVcpus = 19, "TVM has no vcpus";
    UnknownVcpu = 20, "unknown vcpu";
    SourceConfidential = 21, "shared source page is confidential";
    GpaNotShared = 22, "gpa not offered for sharing by the guest";
    AlreadyBound = 23, "interrupt file already bound";
    InvalidIrq = 24, "invalid interrupt identity";
    Unbound = 25, "no interrupt file bound";
    /// Conversion of a page that a TVM maps as shared memory.
    PageMapped = 26, "page mapped shared into a TVM";
    BadProgram = 27, "malformed vcpu program";
    NotRunnable = 28, "vcpu not runnable";
}

impl From<MttError> for TsmError {
    fn from(e: MttError) -> Self {
        match e {
            MttError::OutOfBounds => TsmError::OutOfBounds,
            MttError::AlreadyConfidential => TsmError::AlreadyConfidential,
            MttError::PageInUse => TsmError::PageInUse,
            MttError::NotConfidential => TsmError::NotConfidential,
            MttError::NotFree => TsmError::PageNotFree,
            MttError::NotAssigned => TsmError::PageInUse,
        }
    }
}

impl From<hart::IrqError> for TsmError {
    fn from(e: hart::IrqError) -> Self {
        match e {
            hart::IrqError::InvalidIrq => TsmError::InvalidIrq,
            hart::IrqError::Unbound => TsmError::Unbound,
        }
    }
}

pub type Result<T> = core::result::Result<T, TsmError>;

pub const DEFAULT_MAX_TVMS: u64 = 8;
/// Halt code reported for a vcpu stopped by an access fault.
pub const FAULT_EXIT_CODE: u64 = u64::MAX;
/// Offset of the program copy in the first vcpu backing page; the saved
/// registers occupy the bytes before it.
const PROGRAM_OFFSET: usize = 512;
const GPR_BYTES: usize = 32 * 8;

/// Outcome of a single guest action executed on behalf of a TVM actor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GuestStep {
    /// Memory access completed; loads carry the value read.
    Value(u64),
    /// A COVG call completed with this status (0 = success).
    Status(u64),
    Exit(TvmExit),
    Fault(Exception),
}

enum ActionOutcome {
    Next(Option<u64>),
    Status(u64),
    Exit { exit: TvmExit, advance: bool },
    Fault(Exception),
}

#[derive(Debug)]
pub struct Tsm {
    version: u64,
    max_tvms: u64,
    credentials: TsmCredentials,
    tvms: BTreeMap<TvmId, Tvm>,
    next_id: u64,
    next_file_id: u64,
}

fn page_of(spa: u64) -> Result<PageAddr> {
    PageAddr::from_spa(spa).ok_or(TsmError::Unaligned)
}

fn gpa_page(gpa: u64) -> Result<u64> {
    if !gpa.is_multiple_of(PAGE_SIZE as u64) {
        return Err(TsmError::Unaligned);
    }
    Ok(gpa / PAGE_SIZE as u64)
}

fn page_range(mem: &MemTracker, spa: u64, pages: u64) -> Result<Vec<PageAddr>> {
    let start = page_of(spa)?;
    if pages == 0 {
        return Err(TsmError::TooFewPages);
    }
    let end = start.pfn().checked_add(pages).ok_or(TsmError::OutOfBounds)?;
    if end > mem.page_count() {
        return Err(TsmError::OutOfBounds);
    }
    Ok((start.pfn()..end).map(PageAddr::new).collect())
}

fn require_free(mem: &MemTracker, pages: &[PageAddr]) -> Result<()> {
    for p in pages {
        if mem.entry(*p)? != MttEntry::ConfidentialFree {
            return Err(TsmError::PageNotFree);
        }
    }
    Ok(())
}

fn tsm_ctx(kind: AccessKind) -> AccessContext {
    AccessContext::new(Domain::Tsm, kind)
}

/// Reads a page as the TSM.
fn tsm_read(mem: &mut MemTracker, page: PageAddr) -> Result<Vec<u8>> {
    if !mem.check(page, tsm_ctx(AccessKind::Load))?.is_allowed() {
        return Err(TsmError::BadSource);
    }
    Ok(mem.page_bytes(page)?.to_vec())
}

fn tsm_write(mem: &mut MemTracker, page: PageAddr, offset: usize, bytes: &[u8]) {
    let ok = mem
        .check(page, tsm_ctx(AccessKind::Store))
        .is_ok_and(|d| d.is_allowed());
    assert!(ok, "TSM store to {page} denied");
    mem.write_bytes(page, offset, bytes);
}

fn vcpu_record(vcpu: VcpuId, program: &[u8]) -> Vec<u8> {
    let mut v = vcpu.0.to_le_bytes().to_vec();
    v.extend_from_slice(program);
    v
}

impl Tsm {
    pub fn new(version: u64, max_tvms: u64, credentials: TsmCredentials) -> Self {
        Tsm {
            version,
            max_tvms,
            credentials,
            tvms: BTreeMap::new(),
            next_id: 0,
            next_file_id: 0,
        }
    }

    pub fn info(&self) -> TsmInfo {
        TsmInfo {
            version: self.version,
            capabilities: abi::CAP_COVH | abi::CAP_COVG | abi::CAP_COVI,
            page_size: PAGE_SIZE as u64,
            max_tvms: self.max_tvms,
        }
    }

    /// A TVM, including destroyed ones, for inspection.
    pub fn tvm(&self, id: TvmId) -> Option<&Tvm> {
        self.tvms.get(&id)
    }

    pub fn tvms(&self) -> impl Iterator<Item = &Tvm> {
        self.tvms.values()
    }

    pub fn live_tvms(&self) -> impl Iterator<Item = &Tvm> {
        self.tvms.values().filter(|t| t.phase != TvmPhase::Destroyed)
    }

    fn live(&self, id: TvmId) -> Result<&Tvm> {
        self.tvms
            .get(&id)
            .filter(|t| t.phase != TvmPhase::Destroyed)
            .ok_or(TsmError::UnknownTvm)
    }

    fn live_mut(&mut self, id: TvmId) -> Result<&mut Tvm> {
        self.tvms
            .get_mut(&id)
            .filter(|t| t.phase != TvmPhase::Destroyed)
            .ok_or(TsmError::UnknownTvm)
    }

    fn live_in(&self, id: TvmId, phase: TvmPhase) -> Result<&Tvm> {
        let t = self.live(id)?;
        if t.phase != phase {
            return Err(TsmError::WrongPhase);
        }
        Ok(t)
    }

    /// Entry point for a TEECALL: decodes the request in the argument
    /// registers, runs it, and builds the response.
    pub fn handle(
        &mut self,
        hart: &mut Hart,
        mem: &mut MemTracker,
        req: DomainSwitchRequest,
        host_irq: &mut bool,
    ) -> SwitchResponse {
        let result = CovhCall::from_request(&req).and_then(|call| self.call(hart, mem, call, host_irq));
        // Scratch use of temporaries; TEERET restores the host's values.
        hart.set_gpr(5, req.function_id);
        hart.set_gpr(6, self.next_id);
        hart.set_gpr(7, mem.check_count());
        match result {
            Ok(ret) => SwitchResponse {
                status: 0,
                values: ret.encode(),
            },
            Err(e) => SwitchResponse {
                status: e.code(),
                values: [0; 5],
            },
        }
    }

    /// Typed dispatch of a host call. The hart must be in TSM context.
    pub fn call(
        &mut self,
        hart: &mut Hart,
        mem: &mut MemTracker,
        call: CovhCall,
        host_irq: &mut bool,
    ) -> Result<CovhReturn> {
        use CovhCall::*;
        let unit = |r: Result<()>| r.map(|_| CovhReturn::Unit);
        match call {
            TsmInfo => Ok(CovhReturn::Info(self.info())),
            Convert { spa, pages } => unit(self.convert(mem, spa, pages)),
            TvmCreate { spa, pages, debug } => self.tvm_create(mem, spa, pages, debug).map(CovhReturn::Tvm),
            AddPageTablePages { tvm, spa, pages } => unit(self.add_page_table_pages(mem, tvm, spa, pages)),
            AddMemoryRegion { tvm, gpa, pages, kind } => unit(self.add_memory_region(
                tvm,
                MemRegion {
                    gpa_start: gpa,
                    page_count: pages,
                    kind,
                },
            )),
            AddMeasuredPages { tvm, src, dest, gpa } => unit(self.add_measured_pages(mem, tvm, src, dest, gpa)),
            CreateVcpu {
                tvm,
                vcpu,
                spa,
                pages,
                program,
            } => unit(self.create_vcpu(mem, tvm, vcpu, spa, pages, program)),
            Finalize { tvm } => self.finalize(tvm).map(CovhReturn::Digest),
            Run { tvm, vcpu } => self.run(hart, mem, tvm, vcpu, host_irq).map(CovhReturn::Exit),
            AddZeroPages { tvm, dest, gpa } => unit(self.add_zero_pages(mem, tvm, dest, gpa)),
            AddSharedPages { tvm, src, gpa } => unit(self.add_shared_pages(mem, tvm, src, gpa)),
            Destroy { tvm } => unit(self.destroy(mem, tvm)),
            Reassign { spa, pages } => self.reassign(mem, spa, pages).map(CovhReturn::Count),
            Reclaim { spa, pages } => unit(self.reclaim(mem, spa, pages)),
            BindInterruptFile { tvm, vcpu, spa } => unit(self.bind_interrupt_file(mem, tvm, vcpu, spa)),
        }
    }

    pub fn convert(&mut self, mem: &mut MemTracker, spa: u64, pages: u64) -> Result<()> {
        let range = page_range(mem, spa, pages).map_err(|e| match e {
            TsmError::TooFewPages => TsmError::InvalidArgument,
            e => e,
        })?;
        let shared = self
            .live_tvms()
            .flat_map(|t| t.gstage.values())
            .any(|m| m.kind == MappingKind::Shared && range.contains(&m.spa));
        if shared {
            // Reject before the MTT so the AlreadyConfidential check stays primary.
            if range.iter().all(|p| mem.entry(*p).is_ok_and(|e| !e.is_confidential())) {
                return Err(TsmError::PageMapped);
            }
        }
        Ok(mem.convert_range(range[0], pages)?)
    }

    pub fn reclaim(&mut self, mem: &mut MemTracker, spa: u64, pages: u64) -> Result<()> {
        let start = page_of(spa)?;
        if pages == 0 {
            return Err(TsmError::InvalidArgument);
        }
        Ok(mem.reclaim_range(start, pages)?)
    }

    /// Confirms that a range of released confidential memory is unowned and
    /// may be assigned to any TVM without a reclaim/convert cycle.
    pub fn reassign(&mut self, mem: &mut MemTracker, spa: u64, pages: u64) -> Result<u64> {
        let start = page_of(spa)?;
        if pages == 0 {
            return Err(TsmError::InvalidArgument);
        }
        mem.check_free_range(start, pages)
            .map_err(|e| match TsmError::from(e) {
                TsmError::PageInUse | TsmError::NotConfidential => TsmError::PageNotFree,
                e => e,
            })?;
        Ok(pages)
    }

    pub fn tvm_create(&mut self, mem: &mut MemTracker, spa: u64, pages: u64, debug: bool) -> Result<TvmId> {
        if self.live_tvms().count() as u64 >= self.max_tvms {
            return Err(TsmError::TvmLimit);
        }
        let range = page_range(mem, spa, pages)?;
        require_free(mem, &range)?;
        let id = TvmId(self.next_id);
        for p in &range {
            mem.assign_page(*p, Owner::Tvm(id), PageUse::TvmState)?;
        }
        self.next_id += 1;
        self.tvms.insert(id, Tvm::new(id, range, debug));
        Ok(id)
    }

    pub fn add_page_table_pages(&mut self, mem: &mut MemTracker, tvm: TvmId, spa: u64, pages: u64) -> Result<()> {
        self.live(tvm)?;
        let range = page_range(mem, spa, pages)?;
        require_free(mem, &range)?;
        let t = self.live_mut(tvm)?;
        for p in range {
            mem.assign_page(p, Owner::Tvm(tvm), PageUse::GStageTable)?;
            t.table_pool.push(TablePage { page: p, used: 0 });
        }
        Ok(())
    }

    pub fn add_memory_region(&mut self, tvm: TvmId, region: MemRegion) -> Result<()> {
        let t = self.live_in(tvm, TvmPhase::Initializing)?;
        gpa_page(region.gpa_start)?;
        let end = region
            .page_count
            .checked_mul(PAGE_SIZE as u64)
            .and_then(|len| region.gpa_start.checked_add(len));
        if region.page_count == 0 || end.is_none_or(|e| e > measurement::VCPU_RECORD) {
            return Err(TsmError::InvalidArgument);
        }
        if t.regions.iter().any(|r| r.overlaps(&region)) {
            return Err(TsmError::Overlap);
        }
        self.live_mut(tvm)?.regions.push(region);
        Ok(())
    }

    pub fn add_measured_pages(
        &mut self,
        mem: &mut MemTracker,
        tvm: TvmId,
        src: u64,
        dest: u64,
        gpa: u64,
    ) -> Result<()> {
        let t = self.live_in(tvm, TvmPhase::Initializing)?;
        let src = page_of(src)?;
        let dest = page_of(dest)?;
        let gpa_pg = gpa_page(gpa)?;
        if mem.entry(src)? != MttEntry::NonConfidential {
            return Err(TsmError::BadSource);
        }
        require_free(mem, &[dest])?;
        t.check_mappable(gpa_pg, RegionKind::Confidential)?;
        if !t.has_table_capacity() {
            return Err(TsmError::OutOfTablePages);
        }

        let contents = tsm_read(mem, src)?;
        mem.assign_page(dest, Owner::Tvm(tvm), PageUse::TvmData)?;
        tsm_write(mem, dest, 0, &contents);
        let t = self.live_mut(tvm)?;
        t.map(gpa_pg, dest, MappingKind::Measured);
        t.measurement.extend_page(gpa, &contents);
        Ok(())
    }

    pub fn create_vcpu(
        &mut self,
        mem: &mut MemTracker,
        tvm: TvmId,
        vcpu: VcpuId,
        spa: u64,
        pages: u64,
        program_spa: u64,
    ) -> Result<()> {
        let t = self.live_in(tvm, TvmPhase::Initializing)?;
        if t.vcpus.contains_key(&vcpu) {
            return Err(TsmError::DuplicateVcpu);
        }
        let range = page_range(mem, spa, pages)?;
        require_free(mem, &range)?;
        let src = page_of(program_spa)?;
        if mem.entry(src)? != MttEntry::NonConfidential {
            return Err(TsmError::BadSource);
        }
        let bytes = tsm_read(mem, src)?;
        let (program, len) = TvmProgram::decode_prefix(&bytes).map_err(|_| TsmError::BadProgram)?;
        let encoded = &bytes[..len];

        for p in &range {
            mem.assign_page(*p, Owner::Tvm(tvm), PageUse::VcpuState)?;
        }
        tsm_write(mem, range[0], PROGRAM_OFFSET, encoded);
        let t = self.live_mut(tvm)?;
        t.measurement.extend(
            measurement::VCPU_RECORD | vcpu.0,
            Digest::of(&vcpu_record(vcpu, encoded)),
        );
        t.vcpus.insert(
            vcpu,
            VcpuContext {
                vcpu_id: vcpu,
                backing_pages: range,
                program,
                pc: 0,
                runnable: true,
                halted: None,
                interrupt_file: None,
                observed_irqs: 0,
            },
        );
        Ok(())
    }

    pub fn finalize(&mut self, tvm: TvmId) -> Result<Digest> {
        let t = self.live_in(tvm, TvmPhase::Initializing)?;
        if t.vcpus.is_empty() {
            return Err(TsmError::NoVcpus);
        }
        let t = self.live_mut(tvm)?;
        t.phase = TvmPhase::Runnable;
        Ok(t.measurement.digest())
    }

    pub fn add_zero_pages(&mut self, mem: &mut MemTracker, tvm: TvmId, dest: u64, gpa: u64) -> Result<()> {
        let t = self.live_in(tvm, TvmPhase::Runnable)?;
        let dest = page_of(dest)?;
        let gpa_pg = gpa_page(gpa)?;
        require_free(mem, &[dest])?;
        t.check_mappable(gpa_pg, RegionKind::Confidential)?;
        if !t.has_table_capacity() {
            return Err(TsmError::OutOfTablePages);
        }
        mem.zero_page(dest);
        mem.assign_page(dest, Owner::Tvm(tvm), PageUse::TvmData)?;
        self.live_mut(tvm)?.map(gpa_pg, dest, MappingKind::Zero);
        Ok(())
    }

    pub fn add_shared_pages(&mut self, mem: &mut MemTracker, tvm: TvmId, src: u64, gpa: u64) -> Result<()> {
        let t = self.live_in(tvm, TvmPhase::Runnable)?;
        let src = page_of(src)?;
        let gpa_pg = gpa_page(gpa)?;
        if mem.entry(src)?.is_confidential() {
            return Err(TsmError::SourceConfidential);
        }
        if !t
            .region_of(gpa_pg)
            .is_some_and(|r| r.kind == RegionKind::NonConfidentialShared)
        {
            return Err(TsmError::GpaUnmappedRegion);
        }
        if !t.shared_offers.contains(&gpa_pg) {
            return Err(TsmError::GpaNotShared);
        }
        t.check_mappable(gpa_pg, RegionKind::NonConfidentialShared)?;
        if !t.has_table_capacity() {
            return Err(TsmError::OutOfTablePages);
        }
        self.live_mut(tvm)?.map(gpa_pg, src, MappingKind::Shared);
        Ok(())
    }

    pub fn destroy(&mut self, mem: &mut MemTracker, tvm: TvmId) -> Result<()> {
        let t = self.live_mut(tvm)?;
        for (page, _) in t.owned_pages() {
            mem.release_page(page)?;
        }
        t.phase = TvmPhase::Destroyed;
        t.gstage.clear();
        t.vcpus.clear();
        t.state_pages.clear();
        t.table_pool.clear();
        t.shared_offers.clear();
        t.regions.clear();
        Ok(())
    }

    pub fn bind_interrupt_file(&mut self, mem: &mut MemTracker, tvm: TvmId, vcpu: VcpuId, spa: u64) -> Result<()> {
        let t = self.live(tvm)?;
        let v = t.vcpus.get(&vcpu).ok_or(TsmError::UnknownVcpu)?;
        if v.interrupt_file.is_some() {
            return Err(TsmError::AlreadyBound);
        }
        let page = page_of(spa)?;
        require_free(mem, &[page])?;
        mem.assign_page(page, Owner::Tvm(tvm), PageUse::InterruptFile)?;
        let mut file = hart::InterruptFile::new(self.next_file_id, page);
        self.next_file_id += 1;
        file.bound_to = Some((tvm, vcpu));
        self.live_mut(tvm)?
            .vcpus
            .get_mut(&vcpu)
            .expect("checked above")
            .interrupt_file = Some(file);
        Ok(())
    }

    /// Posts an interrupt to a vcpu's bound interrupt file.
    pub fn inject_interrupt(&mut self, tvm: TvmId, vcpu: VcpuId, irq: u32) -> Result<()> {
        let v = self.live_mut(tvm)?.vcpus.get_mut(&vcpu).ok_or(TsmError::UnknownVcpu)?;
        match &mut v.interrupt_file {
            Some(f) => Ok(hart::inject_interrupt(f, irq)?),
            None if irq == 0 || irq > hart::MAX_IRQ => Err(TsmError::InvalidIrq),
            None => Err(TsmError::Unbound),
        }
    }

    /// Runs a vcpu until it exits. The hart must be in TSM context.
    pub fn run(
        &mut self,
        hart: &mut Hart,
        mem: &mut MemTracker,
        tvm: TvmId,
        vcpu: VcpuId,
        host_irq: &mut bool,
    ) -> Result<TvmExit> {
        let t = self.live_in(tvm, TvmPhase::Runnable)?;
        let v = t.vcpus.get(&vcpu).ok_or(TsmError::UnknownVcpu)?;
        if !v.runnable {
            return Err(TsmError::NotRunnable);
        }
        self.enter_vcpu(hart, mem, tvm, vcpu, true);
        let creds = &self.credentials;
        let t = self.tvms.get_mut(&tvm).expect("live");
        let exit = loop {
            if std::mem::take(host_irq) {
                break TvmExit::new(ExitReason::InterruptPending);
            }
            let v = t.vcpus.get(&vcpu).expect("exists");
            let Some(action) = v.program.actions().get(v.pc).cloned() else {
                let v = t.vcpus.get_mut(&vcpu).expect("exists");
                v.runnable = false;
                v.halted = Some(0);
                break TvmExit::new(ExitReason::Halted(0));
            };
            match exec_action(hart, mem, creds, t, &action) {
                ActionOutcome::Next(_) | ActionOutcome::Status(_) => {
                    t.vcpus.get_mut(&vcpu).expect("exists").pc += 1;
                }
                ActionOutcome::Exit { exit, advance } => {
                    let v = t.vcpus.get_mut(&vcpu).expect("exists");
                    if advance {
                        v.pc += 1;
                    }
                    if let ExitReason::Halted(code) = exit.reason {
                        v.runnable = false;
                        v.halted = Some(code);
                    }
                    break exit;
                }
                ActionOutcome::Fault(e) => {
                    let v = t.vcpus.get_mut(&vcpu).expect("exists");
                    v.runnable = false;
                    v.halted = Some(FAULT_EXIT_CODE);
                    break TvmExit {
                        reason: ExitReason::Halted(FAULT_EXIT_CODE),
                        details: Some(e),
                    };
                }
            }
        };
        self.leave_vcpu(hart, mem, tvm, vcpu);
        Ok(exit)
    }

    /// Executes one action in the context of a vcpu without advancing its
    /// program. Used to drive guest behavior directly from scenarios.
    pub fn guest_step(
        &mut self,
        hart: &mut Hart,
        mem: &mut MemTracker,
        tvm: TvmId,
        vcpu: VcpuId,
        action: &Action,
    ) -> Result<GuestStep> {
        let t = self.live_in(tvm, TvmPhase::Runnable)?;
        t.vcpus.get(&vcpu).ok_or(TsmError::UnknownVcpu)?;
        if !matches!(action, Action::Touch { .. } | Action::Covg { .. }) {
            return Err(TsmError::InvalidArgument);
        }
        self.enter_vcpu(hart, mem, tvm, vcpu, false);
        let creds = &self.credentials;
        let t = self.tvms.get_mut(&tvm).expect("live");
        let out = match exec_action(hart, mem, creds, t, action) {
            ActionOutcome::Next(v) => GuestStep::Value(v.unwrap_or(0)),
            ActionOutcome::Status(s) => GuestStep::Status(s),
            ActionOutcome::Exit { exit, .. } => GuestStep::Exit(exit),
            ActionOutcome::Fault(e) => GuestStep::Fault(e),
        };
        self.leave_vcpu(hart, mem, tvm, vcpu);
        Ok(out)
    }

    fn enter_vcpu(&mut self, hart: &mut Hart, mem: &mut MemTracker, tvm: TvmId, vcpu: VcpuId, deliver: bool) {
        debug_assert_eq!(hart.active, ActiveContext::TsmContext);
        let v = self
            .tvms
            .get_mut(&tvm)
            .and_then(|t| t.vcpus.get_mut(&vcpu))
            .expect("checked by caller");
        let ctx = tsm_read(mem, v.backing_pages[0]).expect("vcpu state readable by the TSM");
        let gprs: [u64; 32] = std::array::from_fn(|i| u64::from_le_bytes(ctx[i * 8..i * 8 + 8].try_into().unwrap()));
        if deliver {
            if let Some(f) = &mut v.interrupt_file {
                v.observed_irqs |= f.take_pending();
            }
        }
        hart.load_gprs(&gprs);
        hart.active = ActiveContext::TvmContext(tvm, vcpu);
        hart.v = true;
        hart.priv_level = PrivilegeLevel::S;
    }

    fn leave_vcpu(&mut self, hart: &mut Hart, mem: &mut MemTracker, tvm: TvmId, vcpu: VcpuId) {
        let v = &self.tvms[&tvm].vcpus[&vcpu];
        let mut ctx = [0u8; GPR_BYTES];
        for (i, r) in hart.gprs().iter().enumerate() {
            ctx[i * 8..i * 8 + 8].copy_from_slice(&r.to_le_bytes());
        }
        tsm_write(mem, v.backing_pages[0], 0, &ctx);
        hart.active = ActiveContext::TsmContext;
        hart.v = false;
        hart.priv_level = PrivilegeLevel::S;
    }

    /// Consistency audit of TSM state against the MTT. Returns one line per
    /// violation.
    pub fn audit(&self, mem: &MemTracker) -> Vec<String> {
        let mut out = Vec::new();
        let mut claimed: BTreeMap<PageAddr, TvmId> = BTreeMap::new();
        for t in self.live_tvms() {
            for (page, page_use) in t.owned_pages() {
                if let Some(prev) = claimed.insert(page, t.id) {
                    out.push(format!("page {page} held by tvm {prev} and tvm {}", t.id));
                }
                let expect = MttEntry::ConfidentialAssigned {
                    owner: Owner::Tvm(t.id),
                    page_use,
                };
                match mem.entry(page) {
                    Ok(e) if e == expect => {}
                    Ok(e) => out.push(format!(
                        "tvm {} holds page {page} as {page_use:?} but MTT says {e}",
                        t.id
                    )),
                    Err(_) => out.push(format!("tvm {} holds out-of-bounds page {page}", t.id)),
                }
            }
            for (gpa_page, m) in &t.gstage {
                let want = match m.kind {
                    MappingKind::Shared => RegionKind::NonConfidentialShared,
                    _ => RegionKind::Confidential,
                };
                if t.region_of(*gpa_page).map(|r| r.kind) != Some(want) {
                    out.push(format!(
                        "tvm {} maps gpa page {gpa_page:#x} outside a {want:?} region",
                        t.id
                    ));
                }
                if m.kind == MappingKind::Shared && mem.entry(m.spa).is_ok_and(|e| e.is_confidential()) {
                    out.push(format!("tvm {} shared mapping to confidential page {}", t.id, m.spa));
                }
            }
            let used: u64 = t.table_pool.iter().map(|p| p.used as u64).sum();
            if used != t.gstage.len() as u64 {
                out.push(format!(
                    "tvm {} table accounting {used} != {} mappings",
                    t.id,
                    t.gstage.len()
                ));
            }
            if t.measurement.replay() != t.measurement.digest() {
                out.push(format!("tvm {} measurement log does not replay", t.id));
            }
        }
        for (i, e) in mem.entries().iter().enumerate() {
            if let Some(Owner::Tvm(id)) = e.owner() {
                let page = PageAddr::new(i as u64);
                if claimed.get(&page) != Some(&id) {
                    out.push(format!("MTT assigns page {page} to tvm {id} which does not hold it"));
                }
            }
        }
        out
    }
}

fn exec_action(
    hart: &mut Hart,
    mem: &mut MemTracker,
    creds: &TsmCredentials,
    tvm: &mut Tvm,
    action: &Action,
) -> ActionOutcome {
    match action {
        Action::Touch { gpa, kind, value } => {
            let op = match kind {
                TouchKind::Load => HartOp::Load,
                TouchKind::Store => HartOp::Store(*value),
                TouchKind::Fetch => HartOp::Fetch,
            };
            match hart::hart_access(hart, mem, Some(&*tvm), *gpa, op) {
                Ok(v) => {
                    if *kind != TouchKind::Store {
                        hart.set_gpr(REG_A0, v);
                        hart.set_gpr(REG_A1, hart.gpr(REG_A1).wrapping_add(v));
                    }
                    ActionOutcome::Next(Some(v))
                }
                Err(HartError::Trap(Exception {
                    kind: ExceptionKind::GuestPageFault,
                    addr,
                })) => ActionOutcome::Exit {
                    exit: TvmExit::new(ExitReason::GuestPageFault(addr.unwrap_or(*gpa))),
                    advance: false,
                },
                Err(HartError::Trap(e)) => ActionOutcome::Fault(e),
                Err(HartError::Unaligned) => ActionOutcome::Fault(Exception::access_fault(*gpa)),
            }
        }
        Action::Covg { call, args } => {
            let arg = |i: usize| args.get(i).copied().unwrap_or(0);
            let status = match *call {
                abi::COVG_GET_EVIDENCE => match get_evidence(mem, creds, tvm, arg(0), args.get(1..).unwrap_or(&[])) {
                    Ok(()) => 0,
                    Err(EvidenceError::Status(e)) => e.code(),
                    Err(EvidenceError::Unmapped(gpa)) => {
                        return ActionOutcome::Exit {
                            exit: TvmExit::new(ExitReason::GuestPageFault(gpa)),
                            advance: false,
                        }
                    }
                },
                abi::COVG_SHARE => status_of(covg_share(tvm, arg(0), arg(1))),
                abi::COVG_UNSHARE => status_of(covg_unshare(tvm, arg(0), arg(1))),
                _ => {
                    return ActionOutcome::Exit {
                        exit: TvmExit::new(ExitReason::GuestRequest {
                            call: *call,
                            args: args.clone(),
                        }),
                        advance: true,
                    }
                }
            };
            hart.set_gpr(REG_A0, status);
            ActionOutcome::Status(status)
        }
        Action::Wfi => ActionOutcome::Exit {
            exit: TvmExit::new(ExitReason::Wfi),
            advance: true,
        },
        Action::Exit(code) => ActionOutcome::Exit {
            exit: TvmExit::new(ExitReason::Halted(*code)),
            advance: true,
        },
    }
}

fn status_of(r: Result<()>) -> u64 {
    r.map_or_else(|e| e.code(), |_| 0)
}

enum EvidenceError {
    Status(TsmError),
    Unmapped(u64),
}

/// COVG get_evidence: writes `u32 length || evidence` to the page at `out_gpa`.
fn get_evidence(
    mem: &mut MemTracker,
    creds: &TsmCredentials,
    tvm: &Tvm,
    out_gpa: u64,
    report_words: &[u64],
) -> core::result::Result<(), EvidenceError> {
    let page = gpa_page(out_gpa).map_err(EvidenceError::Status)?;
    let Some(m) = tvm.gstage.get(&page) else {
        return Err(EvidenceError::Unmapped(out_gpa));
    };
    let mut report_data = [0u8; 64];
    for (i, w) in report_words.iter().take(8).enumerate() {
        report_data[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
    }
    let ev = attestation::issue_tvm_evidence(creds, tvm.id, &tvm.measurement.digest(), tvm.debug_opt_in, &report_data);
    let bytes = ev.encode();
    let mut buf = (bytes.len() as u32).to_le_bytes().to_vec();
    buf.extend_from_slice(&bytes);
    if buf.len() > PAGE_SIZE {
        return Err(EvidenceError::Status(TsmError::InvalidArgument));
    }
    tsm_write(mem, m.spa, 0, &buf);
    Ok(())
}

fn shared_range(tvm: &Tvm, gpa: u64, pages: u64) -> Result<std::ops::Range<u64>> {
    let first = gpa_page(gpa)?;
    if pages == 0 {
        return Err(TsmError::InvalidArgument);
    }
    let end = first.checked_add(pages).ok_or(TsmError::GpaUnmappedRegion)?;
    let all_shared = (first..end).all(|p| {
        tvm.region_of(p)
            .is_some_and(|r| r.kind == RegionKind::NonConfidentialShared)
    });
    if !all_shared {
        return Err(TsmError::GpaUnmappedRegion);
    }
    Ok(first..end)
}

fn covg_share(tvm: &mut Tvm, gpa: u64, pages: u64) -> Result<()> {
    let range = shared_range(tvm, gpa, pages)?;
    tvm.shared_offers.extend(range);
    Ok(())
}

fn covg_unshare(tvm: &mut Tvm, gpa: u64, pages: u64) -> Result<()> {
    let range = shared_range(tvm, gpa, pages)?;
    for p in range {
        tvm.shared_offers.remove(&p);
        tvm.unmap(p);
    }
    Ok(())
}
