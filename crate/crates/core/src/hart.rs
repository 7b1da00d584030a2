// SPDX-License-Identifier: Apache-2.0

//! Hart model: privilege level, virtualization mode, confidential qualifier,
//! the integer register file, and the physical access path through G-stage
//! translation and the MTT checker.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::mem_tracking::{AccessContext, AccessKind, Domain, MemTracker, Owner, PageAddr, PageUse};
use crate::{TvmId, VcpuId, PAGE_SIZE};

/// Nominal privilege level with its two-bit architectural encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum PrivilegeLevel {
    U = 0b00,
    S = 0b01,
    M = 0b11,
}

impl PrivilegeLevel {
    /// Decodes a two-bit level; `0b10` is reserved.
    pub fn from_encoding(bits: u8) -> Option<Self> {
        match bits {
            0b00 => Some(PrivilegeLevel::U),
            0b01 => Some(PrivilegeLevel::S),
            0b11 => Some(PrivilegeLevel::M),
            _ => None,
        }
    }

    pub fn encoding(self) -> u8 {
        self as u8
    }
}

/// Whether `(v, priv, c)` is one of the seven legal hart modes.
///
/// Non-virtualized confidential modes are not architectural modes here; TSM
/// execution is represented by [`ActiveContext::TsmContext`] instead.
pub fn is_legal_mode(v: bool, priv_level: PrivilegeLevel, c: bool) -> bool {
    use PrivilegeLevel::*;
    match (v, c) {
        (false, false) => true,
        (true, _) => matches!(priv_level, U | S),
        (false, true) => false,
    }
}

/// What is currently executing on a hart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ActiveContext {
    Host,
    TsmContext,
    TvmContext(TvmId, VcpuId),
}

/// Host state captured on entry to the TSM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SavedContext {
    pub gprs: [u64; 32],
    pub priv_level: PrivilegeLevel,
    pub v: bool,
}

pub const REG_A0: usize = 10;
pub const REG_A1: usize = 11;
pub const REG_A6: usize = 16;
pub const REG_A7: usize = 17;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hart {
    pub hart_id: usize,
    pub(crate) priv_level: PrivilegeLevel,
    pub(crate) v: bool,
    pub(crate) c: bool,
    gprs: [u64; 32],
    pub(crate) active: ActiveContext,
    pub(crate) saved_host_ctx: Option<SavedContext>,
}

impl Hart {
    /// A hart running the host in HS-mode.
    pub fn new(hart_id: usize) -> Self {
        Hart {
            hart_id,
            priv_level: PrivilegeLevel::S,
            v: false,
            c: false,
            gprs: [0; 32],
            active: ActiveContext::Host,
            saved_host_ctx: None,
        }
    }

    /// A hart in an arbitrary mode and context, including combinations the
    /// platform never produces. Used to drive exhaustive checks of the
    /// access path.
    pub fn with_state(hart_id: usize, priv_level: PrivilegeLevel, v: bool, c: bool, active: ActiveContext) -> Self {
        Hart {
            priv_level,
            v,
            c,
            active,
            ..Hart::new(hart_id)
        }
    }

    pub fn priv_level(&self) -> PrivilegeLevel {
        self.priv_level
    }

    pub fn v(&self) -> bool {
        self.v
    }

    pub fn c(&self) -> bool {
        self.c
    }

    pub fn active(&self) -> ActiveContext {
        self.active
    }

    pub fn gpr(&self, idx: usize) -> u64 {
        self.gprs[idx]
    }

    /// Writes a register; writes to x0 are discarded.
    pub fn set_gpr(&mut self, idx: usize, value: u64) {
        if idx != 0 {
            self.gprs[idx] = value;
        }
    }

    pub fn gprs(&self) -> &[u64; 32] {
        &self.gprs
    }

    pub(crate) fn load_gprs(&mut self, gprs: &[u64; 32]) {
        self.gprs = *gprs;
        self.gprs[0] = 0;
    }

    /// Changes the mode of a non-confidential hart. Confidential modes are
    /// entered only through the TSM-driver.
    pub fn set_host_mode(&mut self, priv_level: PrivilegeLevel, v: bool) -> Result<(), ModeError> {
        if self.c || self.active != ActiveContext::Host {
            return Err(ModeError::Confidential);
        }
        if !is_legal_mode(v, priv_level, false) {
            return Err(ModeError::Illegal);
        }
        self.priv_level = priv_level;
        self.v = v;
        Ok(())
    }

    /// Checks the mode-table and context invariants.
    pub fn is_consistent(&self) -> bool {
        let legal =
            is_legal_mode(self.v, self.priv_level, self.c) || (self.active == ActiveContext::TsmContext && !self.v);
        let c_matches = self.c == (self.active != ActiveContext::Host);
        legal && c_matches && self.gprs[0] == 0
    }

    /// Access domain of whatever is executing on the hart.
    pub fn domain(&self) -> Domain {
        match self.active {
            ActiveContext::Host => Domain::Host,
            ActiveContext::TsmContext => Domain::Tsm,
            ActiveContext::TvmContext(t, _) => Domain::Tvm(t),
        }
    }

    fn access_context(&self, kind: AccessKind) -> AccessContext {
        AccessContext {
            conf_qualifier: self.c,
            domain: self.domain(),
            kind,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum ModeError {
    #[error("hart is in a confidential context")]
    Confidential,
    #[error("illegal mode combination")]
    Illegal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum ExceptionKind {
    IllegalInstruction,
    VirtualInstruction,
    AccessFault,
    GuestPageFault,
    EcallFromVS,
    EcallFromHS,
}

/// A synchronous exception. `addr` is set exactly for access and guest page
/// faults and holds the faulting byte address (guest physical for the latter).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Exception {
    pub kind: ExceptionKind,
    pub addr: Option<u64>,
}

impl Exception {
    pub fn new(kind: ExceptionKind) -> Self {
        Exception { kind, addr: None }
    }

    pub fn access_fault(addr: u64) -> Self {
        Exception {
            kind: ExceptionKind::AccessFault,
            addr: Some(addr),
        }
    }

    pub fn guest_page_fault(gpa: u64) -> Self {
        Exception {
            kind: ExceptionKind::GuestPageFault,
            addr: Some(gpa),
        }
    }
}

impl fmt::Display for Exception {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.addr {
            Some(a) => write!(f, "{:?}@{a:#x}", self.kind),
            None => write!(f, "{:?}", self.kind),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum HartError {
    #[error("exception {0}")]
    Trap(Exception),
    #[error("unaligned access")]
    Unaligned,
}

impl From<Exception> for HartError {
    fn from(e: Exception) -> Self {
        HartError::Trap(e)
    }
}

/// A memory operation issued by a hart. All accesses are 8 bytes wide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum HartOp {
    Load,
    Store(u64),
    Fetch,
}

impl HartOp {
    pub fn kind(self) -> AccessKind {
        match self {
            HartOp::Load => AccessKind::Load,
            HartOp::Store(_) => AccessKind::Store,
            HartOp::Fetch => AccessKind::Fetch,
        }
    }
}

/// Result of a G-stage lookup for one guest page.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Translation {
    /// Mapped to `spa`; the walk reads the table page `walk`.
    Mapped {
        spa: PageAddr,
        walk: PageAddr,
    },
    Unmapped,
}

/// G-stage translation of a TVM.
pub trait GuestTranslate {
    fn translate(&self, gpa_page: u64) -> Translation;
}

/// Performs one aligned 8-byte access from `hart`.
///
/// Host and TSM contexts use `addr` as a supervisor physical address. TVM
/// contexts treat it as a guest physical address and translate it through
/// `gstage`; the table page read by the walk and the final page are each
/// checked against the MTT once. Stores return the value written.
pub fn hart_access(
    hart: &Hart,
    mem: &mut MemTracker,
    gstage: Option<&dyn GuestTranslate>,
    addr: u64,
    op: HartOp,
) -> Result<u64, HartError> {
    if !addr.is_multiple_of(8) {
        return Err(HartError::Unaligned);
    }
    let offset = (addr % PAGE_SIZE as u64) as usize;
    let spa = match hart.active {
        ActiveContext::TvmContext(..) => {
            let gpa_page = addr / PAGE_SIZE as u64;
            let translation = gstage.map_or(Translation::Unmapped, |g| g.translate(gpa_page));
            match translation {
                Translation::Unmapped => return Err(Exception::guest_page_fault(addr).into()),
                Translation::Mapped { spa, walk } => {
                    let walk_ok = mem
                        .check(walk, hart.access_context(AccessKind::PageWalk))
                        .is_ok_and(|d| d.is_allowed());
                    if !walk_ok {
                        return Err(Exception::access_fault(addr).into());
                    }
                    spa
                }
            }
        }
        _ => PageAddr::new(addr / PAGE_SIZE as u64),
    };
    let fault = Exception::access_fault(addr);
    let entry = mem.entry(spa).map_err(|_| fault)?;
    let decision = mem.check(spa, hart.access_context(op.kind())).map_err(|_| fault)?;

    if entry.page_use() == Some(PageUse::InterruptFile) {
        let owned = matches!((hart.domain(), entry.owner()), (Domain::Tvm(t), Some(Owner::Tvm(o))) if t == o);
        if let Some(kind) = interrupt_file_exception(hart.c, hart.v, owned) {
            return Err(HartError::Trap(match kind {
                ExceptionKind::AccessFault => fault,
                k => Exception::new(k),
            }));
        }
    } else if !decision.is_allowed() {
        return Err(fault.into());
    }

    Ok(match op {
        HartOp::Load | HartOp::Fetch => mem.read_u64(spa, offset),
        HartOp::Store(v) => {
            mem.write_u64(spa, offset, v);
            v
        }
    })
}

/// Largest interrupt identity supported by an interrupt file.
pub const MAX_IRQ: u32 = 63;

/// A memory-resident guest interrupt file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterruptFile {
    pub file_id: u64,
    pub backing_page: PageAddr,
    pub bound_to: Option<(TvmId, VcpuId)>,
    /// Bit `i` set means identity `i` is pending. Bit 0 is never set.
    pending: u64,
}

impl InterruptFile {
    pub fn new(file_id: u64, backing_page: PageAddr) -> Self {
        InterruptFile {
            file_id,
            backing_page,
            bound_to: None,
            pending: 0,
        }
    }

    pub fn pending(&self) -> Vec<u32> {
        (1..=MAX_IRQ).filter(|i| self.pending & (1 << i) != 0).collect()
    }

    pub fn pending_bits(&self) -> u64 {
        self.pending
    }

    /// Empties the pending set, returning what was pending.
    pub fn take_pending(&mut self) -> u64 {
        std::mem::take(&mut self.pending)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum IrqError {
    #[error("invalid interrupt identity")]
    InvalidIrq,
    #[error("interrupt file not bound")]
    Unbound,
}

/// Exception raised by an access to a TEE-assigned interrupt file, if any.
///
/// A non-confidential hart gets an illegal instruction exception outside
/// virtualization and a virtual instruction exception inside it. A
/// confidential hart may access the file only on behalf of the owning TVM.
pub fn interrupt_file_exception(c: bool, v: bool, accessor_owns: bool) -> Option<ExceptionKind> {
    match (c, v) {
        (false, false) => Some(ExceptionKind::IllegalInstruction),
        (false, true) => Some(ExceptionKind::VirtualInstruction),
        (true, _) if accessor_owns => None,
        (true, _) => Some(ExceptionKind::AccessFault),
    }
}

/// Register-level access to an interrupt file. Loads return the pending
/// bitmap; stores replace it.
pub fn interrupt_file_access(hart: &Hart, file: &mut InterruptFile, op: HartOp) -> Result<u64, Exception> {
    if let Some((owner, _)) = file.bound_to {
        let owns = matches!(hart.active, ActiveContext::TvmContext(t, _) if t == owner);
        if let Some(kind) = interrupt_file_exception(hart.c, hart.v, owns) {
            return Err(match kind {
                ExceptionKind::AccessFault => Exception::access_fault(file.backing_page.spa()),
                k => Exception::new(k),
            });
        }
    }
    Ok(match op {
        HartOp::Load | HartOp::Fetch => file.pending,
        HartOp::Store(v) => {
            file.pending = v & !1;
            file.pending
        }
    })
}

/// Marks `irq` pending in a bound interrupt file.
pub fn inject_interrupt(file: &mut InterruptFile, irq: u32) -> Result<(), IrqError> {
    if irq == 0 || irq > MAX_IRQ {
        return Err(IrqError::InvalidIrq);
    }
    if file.bound_to.is_none() {
        return Err(IrqError::Unbound);
    }
    file.pending |= 1 << irq;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem_tracking::MttEntry;

    #[test]
    fn legal_modes_table() {
        use PrivilegeLevel::*;
        let mut legal = 0;
        for v in [false, true] {
            for p in [U, S, M] {
                for c in [false, true] {
                    legal += is_legal_mode(v, p, c) as usize;
                }
            }
        }
        assert_eq!(legal, 7);
        assert!(!is_legal_mode(false, S, true));
        assert!(!is_legal_mode(true, M, false));
        assert!(is_legal_mode(true, S, true));
        assert_eq!(PrivilegeLevel::from_encoding(0b10), None);
        assert_eq!(PrivilegeLevel::from_encoding(0b11), Some(M));
    }

    #[test]
    fn x0_is_hardwired() {
        let mut h = Hart::new(0);
        h.set_gpr(0, 7);
        h.load_gprs(&[9; 32]);
        assert_eq!(h.gpr(0), 0);
        assert!(h.is_consistent());
    }

    #[test]
    fn host_store_to_assigned_page_faults() {
        let mut mem = MemTracker::new(4);
        mem.convert_range(PageAddr::new(1), 1).unwrap();
        mem.assign_page(PageAddr::new(1), Owner::Tvm(TvmId(0)), PageUse::TvmData)
            .unwrap();
        let h = Hart::new(0);
        assert_eq!(
            hart_access(&h, &mut mem, None, 0x1000, HartOp::Store(1)),
            Err(HartError::Trap(Exception::access_fault(0x1000)))
        );
        assert_eq!(hart_access(&h, &mut mem, None, 0x2000, HartOp::Store(5)), Ok(5));
        assert_eq!(hart_access(&h, &mut mem, None, 0x2000, HartOp::Load), Ok(5));
        assert_eq!(
            hart_access(&h, &mut mem, None, 0x2004, HartOp::Load),
            Err(HartError::Unaligned)
        );
        assert_eq!(
            hart_access(&h, &mut mem, None, 0x4000, HartOp::Load),
            Err(HartError::Trap(Exception::access_fault(0x4000)))
        );
    }

    struct OneMapping {
        gpa_page: u64,
        spa: PageAddr,
        walk: PageAddr,
    }

    impl GuestTranslate for OneMapping {
        fn translate(&self, gpa_page: u64) -> Translation {
            if gpa_page == self.gpa_page {
                Translation::Mapped {
                    spa: self.spa,
                    walk: self.walk,
                }
            } else {
                Translation::Unmapped
            }
        }
    }

    fn tvm_hart(t: TvmId) -> Hart {
        let mut h = Hart::new(0);
        h.c = true;
        h.v = true;
        h.active = ActiveContext::TvmContext(t, VcpuId(0));
        h
    }

    #[test]
    fn tvm_access_walks_then_checks() {
        let t = TvmId(0);
        let mut mem = MemTracker::new(8);
        mem.convert_range(PageAddr::new(0), 2).unwrap();
        mem.assign_page(PageAddr::new(0), Owner::Tvm(t), PageUse::GStageTable)
            .unwrap();
        mem.assign_page(PageAddr::new(1), Owner::Tvm(t), PageUse::TvmData)
            .unwrap();
        let g = OneMapping {
            gpa_page: 0x80000,
            spa: PageAddr::new(1),
            walk: PageAddr::new(0),
        };
        let h = tvm_hart(t);
        let before = mem.check_count();
        assert_eq!(
            hart_access(&h, &mut mem, Some(&g), 0x8000_0010, HartOp::Store(42)),
            Ok(42)
        );
        assert_eq!(mem.check_count() - before, 2);
        assert_eq!(hart_access(&h, &mut mem, Some(&g), 0x8000_0010, HartOp::Load), Ok(42));
        assert_eq!(
            hart_access(&h, &mut mem, Some(&g), 0x8000_1000, HartOp::Load),
            Err(HartError::Trap(Exception::guest_page_fault(0x8000_1000)))
        );
        // Another TVM using the same translation is denied at the walk.
        let other = tvm_hart(TvmId(1));
        assert!(matches!(
            hart_access(&other, &mut mem, Some(&g), 0x8000_0010, HartOp::Load),
            Err(HartError::Trap(Exception {
                kind: ExceptionKind::AccessFault,
                ..
            }))
        ));
    }

    #[test]
    fn interrupt_file_truth_table() {
        use ExceptionKind::*;
        assert_eq!(interrupt_file_exception(false, false, false), Some(IllegalInstruction));
        assert_eq!(interrupt_file_exception(false, false, true), Some(IllegalInstruction));
        assert_eq!(interrupt_file_exception(false, true, false), Some(VirtualInstruction));
        assert_eq!(interrupt_file_exception(true, true, true), None);
        assert_eq!(interrupt_file_exception(true, true, false), Some(AccessFault));
    }

    #[test]
    fn interrupt_file_register_access() {
        let mut f = InterruptFile::new(0, PageAddr::new(3));
        f.bound_to = Some((TvmId(2), VcpuId(0)));
        let host = Hart::new(0);
        assert_eq!(
            interrupt_file_access(&host, &mut f, HartOp::Load),
            Err(Exception::new(ExceptionKind::IllegalInstruction))
        );
        let mut guest = Hart::new(0);
        guest.set_host_mode(PrivilegeLevel::S, true).unwrap();
        assert_eq!(
            interrupt_file_access(&guest, &mut f, HartOp::Load),
            Err(Exception::new(ExceptionKind::VirtualInstruction))
        );
        inject_interrupt(&mut f, 5).unwrap();
        assert_eq!(
            interrupt_file_access(&tvm_hart(TvmId(2)), &mut f, HartOp::Load),
            Ok(1 << 5)
        );
        assert_eq!(f.pending(), vec![5]);
        assert!(interrupt_file_access(&tvm_hart(TvmId(1)), &mut f, HartOp::Load).is_err());
    }

    #[test]
    fn inject_errors() {
        let mut f = InterruptFile::new(0, PageAddr::new(3));
        assert_eq!(inject_interrupt(&mut f, 5), Err(IrqError::Unbound));
        f.bound_to = Some((TvmId(0), VcpuId(0)));
        assert_eq!(inject_interrupt(&mut f, 0), Err(IrqError::InvalidIrq));
        assert_eq!(inject_interrupt(&mut f, 64), Err(IrqError::InvalidIrq));
        inject_interrupt(&mut f, 63).unwrap();
        assert_eq!(f.take_pending(), 1 << 63);
    }

    #[test]
    fn host_access_to_bound_file_page_is_illegal_instruction() {
        let mut mem = MemTracker::new(2);
        mem.convert_range(PageAddr::new(1), 1).unwrap();
        mem.assign_page(PageAddr::new(1), Owner::Tvm(TvmId(0)), PageUse::InterruptFile)
            .unwrap();
        assert_eq!(
            mem.entry(PageAddr::new(1)).unwrap().page_use(),
            Some(PageUse::InterruptFile)
        );
        let h = Hart::new(0);
        assert_eq!(
            hart_access(&h, &mut mem, None, 0x1000, HartOp::Load),
            Err(HartError::Trap(Exception::new(ExceptionKind::IllegalInstruction)))
        );
        assert_ne!(mem.entry(PageAddr::new(0)).unwrap(), MttEntry::ConfidentialFree);
    }
}
