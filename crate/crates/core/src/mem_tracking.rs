// SPDX-License-Identifier: Apache-2.0

//! Memory Tracking Table (MTT) and the domain-assignment access checker.
//!
//! Every physical page carries one [`MttEntry`]. The checker in
//! [`MemTracker::check`] is consulted for every physical access made by a
//! hart or by the TSM, and is the only place that decides whether a domain
//! may touch a page. Page contents live alongside the table so that the
//! conversion lifecycle can scrub pages as they change state.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::{TvmId, PAGE_SIZE};

/// Physical page number (supervisor physical address / 4096).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct PageAddr(u64);

impl PageAddr {
    pub const fn new(pfn: u64) -> Self {
        PageAddr(pfn)
    }

    /// Builds a page address from a byte address; `None` unless page aligned.
    pub fn from_spa(spa: u64) -> Option<Self> {
        spa.is_multiple_of(PAGE_SIZE as u64)
            .then_some(PageAddr(spa / PAGE_SIZE as u64))
    }

    pub const fn pfn(self) -> u64 {
        self.0
    }

    pub const fn spa(self) -> u64 {
        self.0 * PAGE_SIZE as u64
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// The page `n` pages after this one, if it does not overflow.
    pub fn checked_add(self, n: u64) -> Option<Self> {
        self.0.checked_add(n).map(PageAddr)
    }
}

impl fmt::Display for PageAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Owner of a confidential page.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Owner {
    Tsm,
    Tvm(TvmId),
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Owner::Tsm => write!(f, "tsm"),
            Owner::Tvm(id) => write!(f, "tvm{}", id.0),
        }
    }
}

/// What an assigned confidential page holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum PageUse {
    TvmData,
    TvmState,
    VcpuState,
    GStageTable,
    InterruptFile,
    TsmInternal,
}

/// Coarse state of an MTT entry, without owner details.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum PageState {
    NonConfidential,
    ConfidentialFree,
    ConfidentialAssigned,
}

/// Per-page ownership record.
///
/// Owner and use exist only for assigned pages; the enum makes any other
/// combination unrepresentable. The architectural C bit of a page is
/// `state() != NonConfidential`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize)]
pub enum MttEntry {
    #[default]
    NonConfidential,
    ConfidentialFree,
    ConfidentialAssigned {
        owner: Owner,
        page_use: PageUse,
    },
}

impl MttEntry {
    pub fn state(&self) -> PageState {
        match self {
            MttEntry::NonConfidential => PageState::NonConfidential,
            MttEntry::ConfidentialFree => PageState::ConfidentialFree,
            MttEntry::ConfidentialAssigned { .. } => PageState::ConfidentialAssigned,
        }
    }

    pub fn owner(&self) -> Option<Owner> {
        match self {
            MttEntry::ConfidentialAssigned { owner, .. } => Some(*owner),
            _ => None,
        }
    }

    pub fn page_use(&self) -> Option<PageUse> {
        match self {
            MttEntry::ConfidentialAssigned { page_use, .. } => Some(*page_use),
            _ => None,
        }
    }

    pub fn is_confidential(&self) -> bool {
        !matches!(self, MttEntry::NonConfidential)
    }
}

impl fmt::Display for MttEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MttEntry::NonConfidential => write!(f, "NonConfidential"),
            MttEntry::ConfidentialFree => write!(f, "ConfidentialFree"),
            MttEntry::ConfidentialAssigned { owner, page_use } => {
                write!(f, "ConfidentialAssigned({owner},{page_use:?})")
            }
        }
    }
}

/// Security domain issuing an access.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Host,
    Tsm,
    Tvm(TvmId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum AccessKind {
    Load,
    Store,
    Fetch,
    PageWalk,
}

/// Qualifiers carried with a physical access.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AccessContext {
    /// Confidential qualifier of the issuing hart.
    pub conf_qualifier: bool,
    pub domain: Domain,
    pub kind: AccessKind,
}

impl AccessContext {
    /// Context with the qualifier implied by the domain (C=1 for TSM and TVMs).
    pub fn new(domain: Domain, kind: AccessKind) -> Self {
        AccessContext {
            conf_qualifier: !matches!(domain, Domain::Host),
            domain,
            kind,
        }
    }

    /// Whether the qualifier agrees with the domain.
    pub fn is_consistent(&self) -> bool {
        self.conf_qualifier == !matches!(self.domain, Domain::Host)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum FaultKind {
    AccessFault,
    GuestPageFault,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessDecision {
    Allow,
    Deny(FaultKind),
}

impl AccessDecision {
    pub fn is_allowed(self) -> bool {
        matches!(self, AccessDecision::Allow)
    }
}

/// MTT errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum MttError {
    /// A page lies beyond the end of physical memory.
    #[error("page out of bounds")]
    OutOfBounds,
    /// Conversion requested for a page that is already confidential.
    #[error("page already confidential")]
    AlreadyConfidential,
    /// Reclaim requested for a page still assigned to an owner.
    #[error("page in use")]
    PageInUse,
    /// Reclaim requested for a page that is not confidential.
    #[error("page not confidential")]
    NotConfidential,
    /// Assignment requested for a page that is not `ConfidentialFree`.
    #[error("page not free")]
    NotFree,
    /// Release requested for a page that is not assigned.
    #[error("page not assigned")]
    NotAssigned,
}

pub type Result<T> = core::result::Result<T, MttError>;

type PageBuf = Box<[u8; PAGE_SIZE]>;

/// The MTT together with the physical memory it tracks.
///
/// Page buffers are allocated lazily; an absent buffer reads as zeros.
#[derive(Clone)]
pub struct MemTracker {
    entries: Vec<MttEntry>,
    pages: Vec<Option<PageBuf>>,
    checks: u64,
}

impl fmt::Debug for MemTracker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemTracker")
            .field("pages", &self.entries.len())
            .field("checks", &self.checks)
            .finish()
    }
}

impl MemTracker {
    /// A memory of `page_count` pages, all non-confidential and zero.
    pub fn new(page_count: u64) -> Self {
        MemTracker {
            entries: vec![MttEntry::NonConfidential; page_count as usize],
            pages: vec![None; page_count as usize],
            checks: 0,
        }
    }

    pub fn page_count(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn contains(&self, page: PageAddr) -> bool {
        page.pfn() < self.page_count()
    }

    fn bounds(&self, page: PageAddr) -> Result<usize> {
        if self.contains(page) {
            Ok(page.index())
        } else {
            Err(MttError::OutOfBounds)
        }
    }

    fn range(&self, start: PageAddr, count: u64) -> Result<std::ops::Range<usize>> {
        let end = start.pfn().checked_add(count).ok_or(MttError::OutOfBounds)?;
        if end > self.page_count() {
            return Err(MttError::OutOfBounds);
        }
        Ok(start.index()..end as usize)
    }

    pub fn entry(&self, page: PageAddr) -> Result<MttEntry> {
        self.bounds(page).map(|i| self.entries[i])
    }

    pub fn entries(&self) -> &[MttEntry] {
        &self.entries
    }

    /// Number of access checks performed so far.
    pub fn check_count(&self) -> u64 {
        self.checks
    }

    /// Decides whether `ctx` may access `page`.
    pub fn check(&mut self, page: PageAddr, ctx: AccessContext) -> Result<AccessDecision> {
        let entry = self.entry(page)?;
        self.checks += 1;
        Ok(decide(entry, ctx))
    }

    /// Moves `count` non-confidential pages into the confidential world.
    pub fn convert_range(&mut self, start: PageAddr, count: u64) -> Result<()> {
        let range = self.range(start, count)?;
        if self.entries[range.clone()]
            .iter()
            .any(|e| *e != MttEntry::NonConfidential)
        {
            return Err(MttError::AlreadyConfidential);
        }
        for i in range {
            self.scrub(i);
            self.entries[i] = MttEntry::ConfidentialFree;
        }
        Ok(())
    }

    /// Returns `count` free confidential pages to the non-confidential world.
    pub fn reclaim_range(&mut self, start: PageAddr, count: u64) -> Result<()> {
        let range = self.range(start, count)?;
        for e in &self.entries[range.clone()] {
            match e {
                MttEntry::ConfidentialAssigned { .. } => return Err(MttError::PageInUse),
                MttEntry::NonConfidential => return Err(MttError::NotConfidential),
                MttEntry::ConfidentialFree => {}
            }
        }
        for i in range {
            self.scrub(i);
            self.entries[i] = MttEntry::NonConfidential;
        }
        Ok(())
    }

    /// Confirms that a range is free confidential memory, available to any owner.
    pub fn check_free_range(&self, start: PageAddr, count: u64) -> Result<()> {
        let range = self.range(start, count)?;
        for e in &self.entries[range] {
            match e {
                MttEntry::ConfidentialAssigned { .. } => return Err(MttError::PageInUse),
                MttEntry::NonConfidential => return Err(MttError::NotConfidential),
                MttEntry::ConfidentialFree => {}
            }
        }
        Ok(())
    }

    pub fn assign_page(&mut self, page: PageAddr, owner: Owner, page_use: PageUse) -> Result<()> {
        let i = self.bounds(page)?;
        if self.entries[i] != MttEntry::ConfidentialFree {
            return Err(MttError::NotFree);
        }
        self.entries[i] = MttEntry::ConfidentialAssigned { owner, page_use };
        Ok(())
    }

    /// Scrubs an assigned page and returns it to `ConfidentialFree`.
    pub fn release_page(&mut self, page: PageAddr) -> Result<()> {
        let i = self.bounds(page)?;
        if !matches!(self.entries[i], MttEntry::ConfidentialAssigned { .. }) {
            return Err(MttError::NotAssigned);
        }
        self.scrub(i);
        self.entries[i] = MttEntry::ConfidentialFree;
        Ok(())
    }

    fn scrub(&mut self, i: usize) {
        self.pages[i] = None;
    }

    /// Raw page contents, bypassing the checker. Auditing only.
    pub fn page_bytes(&self, page: PageAddr) -> Result<&[u8]> {
        const ZERO: [u8; PAGE_SIZE] = [0; PAGE_SIZE];
        let i = self.bounds(page)?;
        Ok(match &self.pages[i] {
            Some(buf) => &buf[..],
            None => &ZERO[..],
        })
    }

    pub fn is_zero(&self, page: PageAddr) -> Result<bool> {
        let i = self.bounds(page)?;
        Ok(self.pages[i].as_ref().is_none_or(|buf| buf.iter().all(|&b| b == 0)))
    }

    /// Reads a word after the caller has obtained an `Allow` decision.
    pub(crate) fn read_u64(&self, page: PageAddr, offset: usize) -> u64 {
        debug_assert!(offset + 8 <= PAGE_SIZE);
        match &self.pages[page.index()] {
            Some(buf) => u64::from_le_bytes(buf[offset..offset + 8].try_into().unwrap()),
            None => 0,
        }
    }

    pub(crate) fn write_u64(&mut self, page: PageAddr, offset: usize, value: u64) {
        let buf = self.page_mut(page);
        buf[offset..offset + 8].copy_from_slice(&value.to_le_bytes());
    }

    pub(crate) fn write_bytes(&mut self, page: PageAddr, offset: usize, bytes: &[u8]) {
        let buf = self.page_mut(page);
        buf[offset..offset + bytes.len()].copy_from_slice(bytes);
    }

    pub(crate) fn zero_page(&mut self, page: PageAddr) {
        self.scrub(page.index());
    }

    fn page_mut(&mut self, page: PageAddr) -> &mut [u8; PAGE_SIZE] {
        self.pages[page.index()].get_or_insert_with(|| Box::new([0; PAGE_SIZE]))
    }

    /// Overwrites an entry without any lifecycle checks. Used only by the
    /// fuzzer's detector self-test to manufacture a divergence.
    #[doc(hidden)]
    pub fn corrupt_entry(&mut self, page: PageAddr, entry: MttEntry) {
        self.entries[page.index()] = entry;
    }
}

/// The domain-assignment rule table.
fn decide(entry: MttEntry, ctx: AccessContext) -> AccessDecision {
    use AccessDecision::*;
    use FaultKind::AccessFault;

    if !ctx.conf_qualifier && entry.is_confidential() {
        return Deny(AccessFault);
    }
    match (ctx.domain, entry) {
        (Domain::Tvm(me), MttEntry::ConfidentialAssigned { owner, .. }) if owner != Owner::Tvm(me) => Deny(AccessFault),
        (Domain::Tvm(_), MttEntry::NonConfidential) if matches!(ctx.kind, AccessKind::Fetch | AccessKind::PageWalk) => {
            Deny(AccessFault)
        }
        (Domain::Tsm, MttEntry::NonConfidential) if ctx.kind == AccessKind::Fetch => Deny(AccessFault),
        _ => Allow,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T1: TvmId = TvmId(1);
    const T2: TvmId = TvmId(2);

    fn mem_with(entry: MttEntry) -> MemTracker {
        let mut m = MemTracker::new(4);
        m.entries[0] = entry;
        m
    }

    fn assigned(t: TvmId) -> MttEntry {
        MttEntry::ConfidentialAssigned {
            owner: Owner::Tvm(t),
            page_use: PageUse::TvmData,
        }
    }

    #[test]
    fn check_examples() {
        let p = PageAddr::new(0);
        let host_load = AccessContext::new(Domain::Host, AccessKind::Load);
        let t1 = |kind| AccessContext::new(Domain::Tvm(T1), kind);

        let mut m = mem_with(MttEntry::NonConfidential);
        assert_eq!(m.check(p, host_load), Ok(AccessDecision::Allow));
        assert_eq!(
            m.check(p, t1(AccessKind::Fetch)),
            Ok(AccessDecision::Deny(FaultKind::AccessFault))
        );
        assert_eq!(m.check(p, t1(AccessKind::Load)), Ok(AccessDecision::Allow));

        let mut m = mem_with(assigned(T1));
        assert_eq!(m.check(p, host_load), Ok(AccessDecision::Deny(FaultKind::AccessFault)));

        let mut m = mem_with(assigned(T2));
        assert_eq!(
            m.check(p, t1(AccessKind::Load)),
            Ok(AccessDecision::Deny(FaultKind::AccessFault))
        );
        assert_eq!(m.check(PageAddr::new(4), host_load), Err(MttError::OutOfBounds));
    }

    #[test]
    fn convert_is_atomic() {
        let mut m = MemTracker::new(8);
        m.convert_range(PageAddr::new(2), 1).unwrap();
        m.assign_page(PageAddr::new(2), Owner::Tvm(T1), PageUse::TvmData)
            .unwrap();
        let before = m.entries.clone();
        assert_eq!(m.convert_range(PageAddr::new(0), 4), Err(MttError::AlreadyConfidential));
        assert_eq!(m.entries, before);
        assert_eq!(m.convert_range(PageAddr::new(0), 9), Err(MttError::OutOfBounds));
        assert_eq!(m.convert_range(PageAddr::new(u64::MAX), 2), Err(MttError::OutOfBounds));
    }

    #[test]
    fn convert_zeroes_and_frees() {
        let mut m = MemTracker::new(8);
        m.write_u64(PageAddr::new(1), 0, 0xdead_beef);
        m.convert_range(PageAddr::new(0), 4).unwrap();
        for i in 0..4 {
            let p = PageAddr::new(i);
            assert_eq!(m.entry(p).unwrap(), MttEntry::ConfidentialFree);
            assert!(m.is_zero(p).unwrap());
        }
    }

    #[test]
    fn reclaim_errors_and_round_trip() {
        let mut m = MemTracker::new(8);
        let initial = m.entries.clone();
        m.convert_range(PageAddr::new(0), 4).unwrap();
        m.reclaim_range(PageAddr::new(0), 4).unwrap();
        assert_eq!(m.entries, initial);

        assert_eq!(m.reclaim_range(PageAddr::new(0), 1), Err(MttError::NotConfidential));
        m.convert_range(PageAddr::new(0), 1).unwrap();
        m.assign_page(PageAddr::new(0), Owner::Tsm, PageUse::TsmInternal)
            .unwrap();
        assert_eq!(m.reclaim_range(PageAddr::new(0), 1), Err(MttError::PageInUse));
    }

    #[test]
    fn assign_and_release() {
        let mut m = MemTracker::new(4);
        let p = PageAddr::new(1);
        assert_eq!(
            m.assign_page(p, Owner::Tvm(T1), PageUse::TvmData),
            Err(MttError::NotFree)
        );
        m.convert_range(p, 1).unwrap();
        m.assign_page(p, Owner::Tvm(T1), PageUse::TvmData).unwrap();
        assert_eq!(m.entry(p).unwrap(), assigned(T1));
        assert_eq!(
            m.assign_page(p, Owner::Tvm(T2), PageUse::TvmData),
            Err(MttError::NotFree)
        );
        m.write_u64(p, 8, 0x5a5a);
        m.release_page(p).unwrap();
        assert!(m.is_zero(p).unwrap());
        assert_eq!(m.release_page(p), Err(MttError::NotAssigned));
        m.assign_page(p, Owner::Tvm(T2), PageUse::TvmData).unwrap();
        assert_eq!(m.entry(p).unwrap(), assigned(T2));
    }

    #[test]
    fn host_never_reaches_confidential_pages() {
        let states = [
            MttEntry::ConfidentialFree,
            assigned(T1),
            MttEntry::ConfidentialAssigned {
                owner: Owner::Tsm,
                page_use: PageUse::TsmInternal,
            },
        ];
        let kinds = [
            AccessKind::Load,
            AccessKind::Store,
            AccessKind::Fetch,
            AccessKind::PageWalk,
        ];
        for s in states {
            for k in kinds {
                let mut m = mem_with(s);
                let d = m.check(PageAddr::new(0), AccessContext::new(Domain::Host, k)).unwrap();
                assert!(!d.is_allowed(), "{s} {k:?}");
            }
        }
    }

    #[test]
    fn page_addr_alignment() {
        assert_eq!(PageAddr::from_spa(0x1000), Some(PageAddr::new(1)));
        assert_eq!(PageAddr::from_spa(0x1008), None);
        assert_eq!(PageAddr::new(3).spa(), 0x3000);
    }
}
