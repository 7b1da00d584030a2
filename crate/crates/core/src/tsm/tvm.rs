// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use crate::hart::{GuestTranslate, InterruptFile, Translation};
use crate::mem_tracking::PageAddr;
use crate::tsm::measurement::MeasurementRegister;
use crate::tsm::program::TvmProgram;
use crate::tsm::TsmError;
use crate::{TvmId, VcpuId, PAGE_SIZE};

/// G-stage mappings tracked per donated table page.
pub const MAPPINGS_PER_TABLE_PAGE: u32 = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TvmPhase {
    Initializing,
    Runnable,
    Destroyed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegionKind {
    Confidential,
    NonConfidentialShared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MemRegion {
    pub gpa_start: u64,
    pub page_count: u64,
    pub kind: RegionKind,
}

impl MemRegion {
    fn first_page(&self) -> u64 {
        self.gpa_start / PAGE_SIZE as u64
    }

    fn end_page(&self) -> u64 {
        self.first_page() + self.page_count
    }

    pub fn contains_page(&self, gpa_page: u64) -> bool {
        (self.first_page()..self.end_page()).contains(&gpa_page)
    }

    pub fn overlaps(&self, other: &MemRegion) -> bool {
        self.first_page() < other.end_page() && other.first_page() < self.end_page()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MappingKind {
    Measured,
    Zero,
    Shared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GMapping {
    pub spa: PageAddr,
    pub kind: MappingKind,
    /// Donated table page holding this entry.
    pub table: PageAddr,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TablePage {
    pub page: PageAddr,
    pub used: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VcpuContext {
    pub vcpu_id: VcpuId,
    pub backing_pages: Vec<PageAddr>,
    pub program: TvmProgram,
    /// Index of the next action to execute.
    pub pc: usize,
    pub runnable: bool,
    pub halted: Option<u64>,
    pub interrupt_file: Option<InterruptFile>,
    /// Interrupt identities delivered to the vcpu so far.
    pub observed_irqs: u64,
}

impl VcpuContext {
    pub fn observed_interrupts(&self) -> Vec<u32> {
        (1..64).filter(|i| self.observed_irqs & (1u64 << i) != 0).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Tvm {
    pub id: TvmId,
    pub phase: TvmPhase,
    pub regions: Vec<MemRegion>,
    pub gstage: BTreeMap<u64, GMapping>,
    pub vcpus: BTreeMap<VcpuId, VcpuContext>,
    pub measurement: MeasurementRegister,
    pub state_pages: Vec<PageAddr>,
    pub table_pool: Vec<TablePage>,
    pub shared_offers: BTreeSet<u64>,
    pub debug_opt_in: bool,
}

impl Tvm {
    pub fn new(id: TvmId, state_pages: Vec<PageAddr>, debug_opt_in: bool) -> Self {
        Tvm {
            id,
            phase: TvmPhase::Initializing,
            regions: Vec::new(),
            gstage: BTreeMap::new(),
            vcpus: BTreeMap::new(),
            measurement: MeasurementRegister::new(),
            state_pages,
            table_pool: Vec::new(),
            shared_offers: BTreeSet::new(),
            debug_opt_in,
        }
    }

    pub fn region_of(&self, gpa_page: u64) -> Option<&MemRegion> {
        self.regions.iter().find(|r| r.contains_page(gpa_page))
    }

    /// Checks that `gpa_page` is unmapped and lies in a region of `kind`.
    pub fn check_mappable(&self, gpa_page: u64, kind: RegionKind) -> Result<(), TsmError> {
        match self.region_of(gpa_page) {
            Some(r) if r.kind == kind => {}
            _ => return Err(TsmError::GpaUnmappedRegion),
        }
        if self.gstage.contains_key(&gpa_page) {
            return Err(TsmError::GpaAlreadyMapped);
        }
        Ok(())
    }

    pub fn has_table_capacity(&self) -> bool {
        self.table_pool.iter().any(|t| t.used < MAPPINGS_PER_TABLE_PAGE)
    }

    /// Inserts a mapping, charging a table slot. Callers check capacity first.
    pub fn map(&mut self, gpa_page: u64, spa: PageAddr, kind: MappingKind) {
        let table = self
            .table_pool
            .iter_mut()
            .find(|t| t.used < MAPPINGS_PER_TABLE_PAGE)
            .expect("table capacity checked by caller");
        table.used += 1;
        let table = table.page;
        self.gstage.insert(gpa_page, GMapping { spa, kind, table });
    }

    pub fn unmap(&mut self, gpa_page: u64) -> Option<GMapping> {
        let m = self.gstage.remove(&gpa_page)?;
        if let Some(t) = self.table_pool.iter_mut().find(|t| t.page == m.table) {
            t.used -= 1;
        }
        Some(m)
    }

    pub fn mapping_count(&self) -> usize {
        self.gstage.len()
    }

    /// Every confidential page this TVM holds, with the use it was assigned.
    pub fn owned_pages(&self) -> Vec<(PageAddr, crate::PageUse)> {
        use crate::PageUse::*;
        let mut out: Vec<(PageAddr, crate::PageUse)> = Vec::new();
        out.extend(self.state_pages.iter().map(|p| (*p, TvmState)));
        out.extend(self.table_pool.iter().map(|t| (t.page, GStageTable)));
        out.extend(
            self.gstage
                .values()
                .filter(|m| m.kind != MappingKind::Shared)
                .map(|m| (m.spa, TvmData)),
        );
        for v in self.vcpus.values() {
            out.extend(v.backing_pages.iter().map(|p| (*p, VcpuState)));
            if let Some(f) = &v.interrupt_file {
                out.push((f.backing_page, InterruptFile));
            }
        }
        out
    }
}

impl GuestTranslate for Tvm {
    fn translate(&self, gpa_page: u64) -> Translation {
        match self.gstage.get(&gpa_page) {
            Some(m) => Translation::Mapped {
                spa: m.spa,
                walk: m.table,
            },
            None => Translation::Unmapped,
        }
    }
}
