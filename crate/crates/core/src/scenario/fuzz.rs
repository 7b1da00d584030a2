// SPDX-License-Identifier: Apache-2.0

//! Seeded ABI fuzzer.
//!
//! Calls are generated from a reference model of the platform kept
//! independently of the TSM: a page→owner map, per-TVM phase, regions,
//! mappings, vcpus and the expected measurement chain. Most calls are drawn
//! from what the model says is legal next; `illegal_bias` percent are wild
//! calls with arbitrary arguments. After every call the fuzzer checks that
//! the model predicted success or failure correctly, that the MTT equals
//! the model's page map, that pages entering a free or shared state are
//! zero, that TVM phases and measurements agree, and that the TSM's own
//! audit is clean. The run stops at the first violation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

use crate::hart::{ActiveContext, ExceptionKind};
use crate::mem_tracking::{MttEntry, Owner, PageAddr, PageUse};
use crate::platform::{Platform, PlatformConfig, PlatformError};
use crate::tsm::abi::{self, CovhCall, CovhReturn, ExitReason};
use crate::tsm::measurement::VCPU_RECORD;
use crate::tsm::program::{Action, TouchKind, TvmProgram};
use crate::tsm::tvm::{RegionKind, TvmPhase, MAPPINGS_PER_TABLE_PAGE};
use crate::tsm::GuestStep;
use crate::{Digest, TvmId, VcpuId, PAGE_SIZE};

const PAGE: u64 = PAGE_SIZE as u64;
const CONF_BASE: u64 = 0x8000_0000;
const SHARED_BASE: u64 = 0x4000_0000;
const REGION_STRIDE: u64 = 0x10_0000;
const REGION_SLOTS: u64 = 4;
const GPA_LIMIT: u64 = 1 << 63;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FuzzOptions {
    pub seed: u64,
    pub ops: u64,
    /// Percentage of calls generated with arbitrary arguments.
    pub illegal_bias: u8,
    pub memory_pages: u64,
    pub max_tvms: u64,
    /// Corrupts one MTT entry behind the TSM's back after this op, to
    /// check that the detectors fire.
    #[doc(hidden)]
    pub diverge_at: Option<u64>,
}

impl FuzzOptions {
    pub fn new(seed: u64, ops: u64) -> Self {
        FuzzOptions {
            seed,
            ops,
            illegal_bias: 20,
            memory_pages: 256,
            max_tvms: 4,
            diverge_at: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub op_index: u64,
    pub call: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FuzzReport {
    pub seed: u64,
    pub ops_run: u64,
    pub illegal_calls: u64,
    /// (successes, failures) per call name.
    pub op_stats: BTreeMap<String, (u64, u64)>,
    pub tvms_created: u64,
    pub tvms_finalized: u64,
    pub demand_faults: u64,
    pub violations: Vec<Violation>,
}

impl FuzzReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn first_violation(&self) -> Option<u64> {
        self.violations.first().map(|v| v.op_index)
    }

    /// Deterministic text rendering; identical seeds give identical text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "fuzz seed={} ops={} illegal={}",
            self.seed, self.ops_run, self.illegal_calls
        );
        let _ = writeln!(
            s,
            "tvms created={} finalized={} demand_faults={}",
            self.tvms_created, self.tvms_finalized, self.demand_faults
        );
        for (name, (ok, err)) in &self.op_stats {
            let _ = writeln!(s, "  {name:<24} ok={ok:<8} err={err}");
        }
        let _ = writeln!(s, "violations={}", self.violations.len());
        for v in &self.violations {
            let _ = writeln!(s, "  op {}: {}: {}", v.op_index, v.call, v.message);
        }
        s
    }
}

#[derive(Clone, Debug)]
enum FuzzCall {
    Covh(CovhCall),
    HostRead(u64),
    HostWrite(u64, u64),
    Stage(u64, TvmProgram),
    Share {
        tvm: TvmId,
        vcpu: VcpuId,
        gpa: u64,
        pages: u64,
        unshare: bool,
    },
    Touch {
        tvm: TvmId,
        vcpu: VcpuId,
        gpa: u64,
        kind: TouchKind,
    },
    Inject {
        tvm: TvmId,
        vcpu: VcpuId,
        irq: u32,
    },
    HostIrq,
}

impl FuzzCall {
    fn name(&self) -> &'static str {
        match self {
            FuzzCall::Covh(c) => c.name(),
            FuzzCall::HostRead(_) => "host_read",
            FuzzCall::HostWrite(..) => "host_write",
            FuzzCall::Stage(..) => "stage_program",
            FuzzCall::Share { unshare: false, .. } => "covg_share",
            FuzzCall::Share { unshare: true, .. } => "covg_unshare",
            FuzzCall::Touch { .. } => "guest_touch",
            FuzzCall::Inject { .. } => "inject_interrupt",
            FuzzCall::HostIrq => "host_irq",
        }
    }
}

/// Observable result of a call, coarse enough to predict.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Class {
    Success,
    Failure,
    GuestPageFault,
    AccessFault,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum MPage {
    NonConf,
    Free,
    Tsm,
    Tvm(u64, PageUse),
}

impl MPage {
    fn to_entry(self) -> MttEntry {
        match self {
            MPage::NonConf => MttEntry::NonConfidential,
            MPage::Free => MttEntry::ConfidentialFree,
            MPage::Tsm => MttEntry::ConfidentialAssigned {
                owner: Owner::Tsm,
                page_use: PageUse::TsmInternal,
            },
            MPage::Tvm(id, page_use) => MttEntry::ConfidentialAssigned {
                owner: Owner::Tvm(TvmId(id)),
                page_use,
            },
        }
    }
}

#[derive(Clone, Debug)]
struct MRegion {
    first: u64,
    count: u64,
    shared: bool,
}

#[derive(Clone, Debug)]
struct MVcpu {
    runnable: bool,
    bound: bool,
}

#[derive(Clone, Debug)]
struct MTvm {
    runnable: bool,
    regions: Vec<MRegion>,
    /// gpa page → (spa pfn, shared)
    mapped: BTreeMap<u64, (u64, bool)>,
    table_pages: u64,
    vcpus: BTreeMap<u64, MVcpu>,
    offers: BTreeSet<u64>,
    chain: [u8; 32],
    pending_fault: Option<u64>,
}

impl MTvm {
    fn region(&self, gpa_page: u64) -> Option<&MRegion> {
        self.regions
            .iter()
            .find(|r| gpa_page >= r.first && gpa_page - r.first < r.count)
    }

    fn in_kind(&self, gpa_page: u64, shared: bool) -> bool {
        self.region(gpa_page).is_some_and(|r| r.shared == shared)
    }

    fn has_capacity(&self) -> bool {
        (self.mapped.len() as u64) < self.table_pages * MAPPINGS_PER_TABLE_PAGE as u64
    }

    fn extend(&mut self, key: u64, content: &[u8]) {
        let inner: [u8; 32] = Sha256::digest(content).into();
        let mut h = Sha256::new();
        h.update(self.chain);
        h.update(key.to_le_bytes());
        h.update(inner);
        self.chain = h.finalize().into();
    }
}

struct Model {
    pages: Vec<MPage>,
    tvms: BTreeMap<u64, MTvm>,
    next_id: u64,
    max_tvms: u64,
    usable: u64,
}

impl Model {
    fn page(&self, spa: u64) -> Option<MPage> {
        if !spa.is_multiple_of(PAGE) {
            return None;
        }
        self.pages.get((spa / PAGE) as usize).copied()
    }

    fn range(&self, spa: u64, n: u64) -> Option<std::ops::Range<u64>> {
        if !spa.is_multiple_of(PAGE) || n == 0 {
            return None;
        }
        let start = spa / PAGE;
        let end = start.checked_add(n)?;
        (end <= self.pages.len() as u64).then_some(start..end)
    }

    fn all(&self, r: &std::ops::Range<u64>, want: MPage) -> bool {
        r.clone().all(|p| self.pages[p as usize] == want)
    }

    fn tvm(&self, id: TvmId) -> Option<&MTvm> {
        self.tvms.get(&id.0)
    }

    fn shared_mapped(&self, pfn: u64) -> bool {
        self.tvms
            .values()
            .any(|t| t.mapped.values().any(|(spa, shared)| *shared && *spa == pfn))
    }

    fn program_at(&self, p: &Platform, spa: u64) -> Option<Vec<u8>> {
        if self.page(spa)? != MPage::NonConf {
            return None;
        }
        let bytes = p.mem().page_bytes(PageAddr::new(spa / PAGE)).ok()?;
        let (_, len) = TvmProgram::decode_prefix(bytes).ok()?;
        Some(bytes[..len].to_vec())
    }

    fn predict(&self, p: &Platform, call: &FuzzCall) -> Class {
        use Class::*;
        let ok = |b: bool| if b { Success } else { Failure };
        let init = |id: TvmId| self.tvm(id).filter(|t| !t.runnable);
        let running = |id: TvmId| self.tvm(id).filter(|t| t.runnable);
        let gpa_page = |gpa: u64| gpa.is_multiple_of(PAGE).then_some(gpa / PAGE);
        match call {
            FuzzCall::Covh(c) => match *c {
                CovhCall::TsmInfo => Success,
                CovhCall::Convert { spa, pages } => ok(self
                    .range(spa, pages)
                    .is_some_and(|r| self.all(&r, MPage::NonConf) && !r.clone().any(|p| self.shared_mapped(p)))),
                CovhCall::Reclaim { spa, pages } | CovhCall::Reassign { spa, pages } => {
                    ok(self.range(spa, pages).is_some_and(|r| self.all(&r, MPage::Free)))
                }
                CovhCall::TvmCreate { spa, pages, .. } => ok((self.tvms.len() as u64) < self.max_tvms
                    && self.range(spa, pages).is_some_and(|r| self.all(&r, MPage::Free))),
                CovhCall::AddPageTablePages { tvm, spa, pages } => {
                    ok(self.tvm(tvm).is_some() && self.range(spa, pages).is_some_and(|r| self.all(&r, MPage::Free)))
                }
                CovhCall::AddMemoryRegion { tvm, gpa, pages, .. } => ok(init(tvm).is_some_and(|t| {
                    let Some(first) = gpa_page(gpa) else { return false };
                    let end = pages.checked_mul(PAGE).and_then(|l| gpa.checked_add(l));
                    pages > 0
                        && end.is_some_and(|e| e <= GPA_LIMIT)
                        && !t
                            .regions
                            .iter()
                            .any(|r| first < r.first + r.count && r.first < first + pages)
                })),
                CovhCall::AddMeasuredPages { tvm, src, dest, gpa } => ok(init(tvm).is_some_and(|t| {
                    self.page(src) == Some(MPage::NonConf)
                        && self.page(dest) == Some(MPage::Free)
                        && gpa_page(gpa).is_some_and(|g| t.in_kind(g, false) && !t.mapped.contains_key(&g))
                        && t.has_capacity()
                })),
                CovhCall::CreateVcpu {
                    tvm,
                    vcpu,
                    spa,
                    pages,
                    program,
                } => ok(init(tvm).is_some_and(|t| {
                    !t.vcpus.contains_key(&vcpu.0)
                        && self.range(spa, pages).is_some_and(|r| self.all(&r, MPage::Free))
                        && self.program_at(p, program).is_some()
                })),
                CovhCall::Finalize { tvm } => ok(init(tvm).is_some_and(|t| !t.vcpus.is_empty())),
                CovhCall::Run { tvm, vcpu } => {
                    ok(running(tvm).is_some_and(|t| t.vcpus.get(&vcpu.0).is_some_and(|v| v.runnable)))
                }
                CovhCall::AddZeroPages { tvm, dest, gpa } => ok(running(tvm).is_some_and(|t| {
                    self.page(dest) == Some(MPage::Free)
                        && gpa_page(gpa).is_some_and(|g| t.in_kind(g, false) && !t.mapped.contains_key(&g))
                        && t.has_capacity()
                })),
                CovhCall::AddSharedPages { tvm, src, gpa } => ok(running(tvm).is_some_and(|t| {
                    self.page(src) == Some(MPage::NonConf)
                        && gpa_page(gpa)
                            .is_some_and(|g| t.in_kind(g, true) && t.offers.contains(&g) && !t.mapped.contains_key(&g))
                        && t.has_capacity()
                })),
                CovhCall::Destroy { tvm } => ok(self.tvm(tvm).is_some()),
                CovhCall::BindInterruptFile { tvm, vcpu, spa } => ok(self.tvm(tvm).is_some_and(|t| {
                    t.vcpus.get(&vcpu.0).is_some_and(|v| !v.bound) && self.page(spa) == Some(MPage::Free)
                })),
            },
            FuzzCall::HostRead(spa) | FuzzCall::HostWrite(spa, _) => {
                ok(spa % 8 == 0 && self.page(spa - spa % PAGE) == Some(MPage::NonConf))
            }
            FuzzCall::Stage(spa, _) => ok(self.page(*spa) == Some(MPage::NonConf)),
            FuzzCall::Share {
                tvm, vcpu, gpa, pages, ..
            } => ok(running(*tvm).is_some_and(|t| {
                t.vcpus.contains_key(&vcpu.0)
                    && *pages > 0
                    && gpa_page(*gpa).is_some_and(|g| {
                        g.checked_add(*pages)
                            .is_some_and(|end| (g..end).all(|x| t.in_kind(x, true)))
                    })
            })),
            FuzzCall::Touch { tvm, vcpu, gpa, kind } => {
                let Some(t) = running(*tvm).filter(|t| t.vcpus.contains_key(&vcpu.0)) else {
                    return Failure;
                };
                if gpa % 8 != 0 {
                    return AccessFault;
                }
                match t.mapped.get(&(gpa / PAGE)) {
                    None => GuestPageFault,
                    Some((_, true)) if *kind == TouchKind::Fetch => AccessFault,
                    Some(_) => Success,
                }
            }
            FuzzCall::Inject { tvm, vcpu, irq } => ok(self.tvm(*tvm).is_some_and(|t| {
                t.vcpus.get(&vcpu.0).is_some_and(|v| v.bound) && (1..=crate::hart::MAX_IRQ).contains(irq)
            })),
            FuzzCall::HostIrq => Success,
        }
    }
}

struct Fuzzer {
    rng: ChaCha8Rng,
    p: Platform,
    m: Model,
    report: FuzzReport,
    diverge_at: Option<u64>,
}

enum Actual {
    Covh(Result<CovhReturn, PlatformError>),
    Host(Result<(), PlatformError>),
    Guest(Result<GuestStep, PlatformError>),
}

fn classify(a: &Actual) -> Class {
    match a {
        Actual::Covh(Ok(_)) | Actual::Host(Ok(())) => Class::Success,
        Actual::Covh(Err(_)) | Actual::Host(Err(_)) | Actual::Guest(Err(_)) => Class::Failure,
        Actual::Guest(Ok(GuestStep::Value(_))) | Actual::Guest(Ok(GuestStep::Status(0))) => Class::Success,
        Actual::Guest(Ok(GuestStep::Status(_))) => Class::Failure,
        Actual::Guest(Ok(GuestStep::Exit(e))) => match e.reason {
            ExitReason::GuestPageFault(_) => Class::GuestPageFault,
            _ => Class::Failure,
        },
        Actual::Guest(Ok(GuestStep::Fault(e))) if e.kind == ExceptionKind::AccessFault => Class::AccessFault,
        Actual::Guest(Ok(GuestStep::Fault(_))) => Class::Failure,
    }
}

impl Fuzzer {
    fn pick<T: Copy>(&mut self, items: &[T]) -> Option<T> {
        (!items.is_empty()).then(|| items[self.rng.gen_range(0..items.len())])
    }

    fn pages_in(&self, want: MPage) -> Vec<u64> {
        (0..self.m.usable)
            .filter(|p| self.m.pages[*p as usize] == want)
            .collect()
    }

    /// A run of up to `max` contiguous pages in state `want`.
    fn run_of(&mut self, want: MPage, max: u64) -> Option<(u64, u64)> {
        let candidates = self.pages_in(want);
        let start = self.pick(&candidates)?;
        let limit = self.rng.gen_range(1..=max);
        let mut n = 1;
        while n < limit && start + n < self.m.usable && self.m.pages[(start + n) as usize] == want {
            n += 1;
        }
        Some((start * PAGE, n))
    }

    fn tvm_ids(&self, filter: impl Fn(&MTvm) -> bool) -> Vec<u64> {
        self.m
            .tvms
            .iter()
            .filter(|(_, t)| filter(t))
            .map(|(id, _)| *id)
            .collect()
    }

    fn random_gpa(&mut self, t: &MTvm) -> u64 {
        let r = &t.regions[self.rng.gen_range(0..t.regions.len())];
        let page = r.first + self.rng.gen_range(0..r.count);
        page * PAGE + 8 * self.rng.gen_range(0..4u64)
    }

    fn random_program(&mut self, t: &MTvm) -> TvmProgram {
        let n = self.rng.gen_range(1..=8);
        let mut actions = Vec::new();
        for _ in 0..n {
            let roll = self.rng.gen_range(0..100);
            let a = if roll < 70 && !t.regions.is_empty() {
                let gpa = self.random_gpa(t);
                match self.rng.gen_range(0..3) {
                    0 => Action::Touch {
                        gpa,
                        kind: TouchKind::Load,
                        value: 0,
                    },
                    1 => Action::Touch {
                        gpa,
                        kind: TouchKind::Store,
                        value: self.rng.gen(),
                    },
                    _ => Action::Touch {
                        gpa,
                        kind: TouchKind::Fetch,
                        value: 0,
                    },
                }
            } else if roll < 80 {
                Action::Wfi
            } else if roll < 85 {
                Action::Covg {
                    call: 0x180,
                    args: vec![self.rng.gen_range(0..16)],
                }
            } else {
                Action::Exit(self.rng.gen_range(0..4))
            };
            actions.push(a);
        }
        TvmProgram::new(actions)
    }

    /// Calls the model considers legal next, most of the time.
    fn legal(&mut self) -> Vec<FuzzCall> {
        for _ in 0..16 {
            let kind = self.rng.gen_range(0..100);
            if let Some(calls) = self.legal_kind(kind) {
                return calls;
            }
        }
        vec![FuzzCall::Covh(CovhCall::TsmInfo)]
    }

    fn legal_kind(&mut self, roll: u32) -> Option<Vec<FuzzCall>> {
        let c = |call| Some(vec![FuzzCall::Covh(call)]);
        match roll {
            0..=7 => {
                let (spa, pages) = self.run_of(MPage::NonConf, 8)?;
                c(CovhCall::Convert { spa, pages })
            }
            8..=11 => {
                let (spa, pages) = self.run_of(MPage::Free, 4)?;
                c(CovhCall::Reclaim { spa, pages })
            }
            12..=13 => {
                let (spa, pages) = self.run_of(MPage::Free, 4)?;
                c(CovhCall::Reassign { spa, pages })
            }
            14..=19 => {
                if self.m.tvms.len() as u64 >= self.m.max_tvms {
                    return None;
                }
                let (spa, pages) = self.run_of(MPage::Free, 2)?;
                c(CovhCall::TvmCreate {
                    spa,
                    pages,
                    debug: self.rng.gen_bool(0.2),
                })
            }
            20..=24 => {
                let ids = self.tvm_ids(|t| t.table_pages < 2);
                let tvm = TvmId(self.pick(&ids)?);
                let (spa, _) = self.run_of(MPage::Free, 1)?;
                c(CovhCall::AddPageTablePages { tvm, spa, pages: 1 })
            }
            25..=30 => {
                let ids = self.tvm_ids(|t| !t.runnable && t.regions.len() < 3);
                let id = self.pick(&ids)?;
                let t = &self.m.tvms[&id];
                let shared = self.rng.gen_bool(0.3);
                let base = if shared { SHARED_BASE } else { CONF_BASE };
                let used: Vec<u64> = t.regions.iter().map(|r| r.first).collect();
                let slot = (0..REGION_SLOTS)
                    .map(|s| base + s * REGION_STRIDE)
                    .find(|g| !used.contains(&(g / PAGE)))?;
                c(CovhCall::AddMemoryRegion {
                    tvm: TvmId(id),
                    gpa: slot,
                    pages: self.rng.gen_range(1..=16),
                    kind: if shared {
                        RegionKind::NonConfidentialShared
                    } else {
                        RegionKind::Confidential
                    },
                })
            }
            31..=40 => {
                let ids = self.tvm_ids(|t| !t.runnable && t.regions.iter().any(|r| !r.shared) && t.has_capacity());
                let id = self.pick(&ids)?;
                let gpa = self.unmapped_conf_gpa(id)?;
                let src = self.pick(&self.pages_in(MPage::NonConf))?;
                let (dest, _) = self.run_of(MPage::Free, 1)?;
                c(CovhCall::AddMeasuredPages {
                    tvm: TvmId(id),
                    src: src * PAGE,
                    dest,
                    gpa,
                })
            }
            41..=47 => {
                let ids = self.tvm_ids(|t| !t.runnable && t.vcpus.len() < 2);
                let id = self.pick(&ids)?;
                let t = self.m.tvms[&id].clone();
                let program = self.random_program(&t);
                let stage = self.pick(&self.pages_in(MPage::NonConf))?;
                let (spa, pages) = self.run_of(MPage::Free, 2)?;
                let vcpu = VcpuId((0..4).find(|v| !t.vcpus.contains_key(v))?);
                Some(vec![
                    FuzzCall::Stage(stage * PAGE, program),
                    FuzzCall::Covh(CovhCall::CreateVcpu {
                        tvm: TvmId(id),
                        vcpu,
                        spa,
                        pages,
                        program: stage * PAGE,
                    }),
                ])
            }
            48..=52 => {
                let ids = self.tvm_ids(|t| !t.runnable && !t.vcpus.is_empty());
                c(CovhCall::Finalize {
                    tvm: TvmId(self.pick(&ids)?),
                })
            }
            53..=64 => {
                let ids = self.tvm_ids(|t| t.runnable && t.vcpus.values().any(|v| v.runnable));
                let id = self.pick(&ids)?;
                let vcpus: Vec<u64> = self.m.tvms[&id]
                    .vcpus
                    .iter()
                    .filter(|(_, v)| v.runnable)
                    .map(|(k, _)| *k)
                    .collect();
                c(CovhCall::Run {
                    tvm: TvmId(id),
                    vcpu: VcpuId(self.pick(&vcpus)?),
                })
            }
            65..=71 => {
                let ids = self.tvm_ids(|t| t.runnable && t.has_capacity());
                let id = self.pick(&ids)?;
                let gpa = match self.m.tvms[&id].pending_fault {
                    Some(g) if !self.m.tvms[&id].mapped.contains_key(&(g / PAGE)) => g - g % PAGE,
                    _ => self.unmapped_conf_gpa(id)?,
                };
                let (dest, _) = self.run_of(MPage::Free, 1)?;
                c(CovhCall::AddZeroPages {
                    tvm: TvmId(id),
                    dest,
                    gpa,
                })
            }
            72..=76 => {
                let ids = self.tvm_ids(|t| t.runnable && t.regions.iter().any(|r| r.shared) && t.has_capacity());
                let id = self.pick(&ids)?;
                let t = &self.m.tvms[&id];
                let shared: Vec<u64> = t
                    .regions
                    .iter()
                    .filter(|r| r.shared)
                    .flat_map(|r| r.first..r.first + r.count)
                    .filter(|g| !t.mapped.contains_key(g))
                    .collect();
                let vcpu = *t.vcpus.keys().next()?;
                let g = self.pick(&shared)?;
                let src = self.pick(&self.pages_in(MPage::NonConf))?;
                let mut out = Vec::new();
                if !self.m.tvms[&id].offers.contains(&g) {
                    out.push(FuzzCall::Share {
                        tvm: TvmId(id),
                        vcpu: VcpuId(vcpu),
                        gpa: g * PAGE,
                        pages: 1,
                        unshare: false,
                    });
                }
                out.push(FuzzCall::Covh(CovhCall::AddSharedPages {
                    tvm: TvmId(id),
                    src: src * PAGE,
                    gpa: g * PAGE,
                }));
                Some(out)
            }
            77..=78 => {
                let ids = self.tvm_ids(|t| t.runnable && t.regions.iter().any(|r| r.shared));
                let id = self.pick(&ids)?;
                let t = &self.m.tvms[&id];
                let r = t.regions.iter().find(|r| r.shared)?.clone();
                let vcpu = *t.vcpus.keys().next()?;
                Some(vec![FuzzCall::Share {
                    tvm: TvmId(id),
                    vcpu: VcpuId(vcpu),
                    gpa: r.first * PAGE,
                    pages: self.rng.gen_range(1..=r.count),
                    unshare: self.rng.gen_bool(0.5),
                }])
            }
            79..=82 => {
                let ids = self.tvm_ids(|t| t.runnable && !t.regions.is_empty());
                let id = self.pick(&ids)?;
                let t = self.m.tvms[&id].clone();
                let vcpu = *t.vcpus.keys().next()?;
                let gpa = self.random_gpa(&t);
                let kind = [TouchKind::Load, TouchKind::Store, TouchKind::Fetch][self.rng.gen_range(0..3)];
                Some(vec![FuzzCall::Touch {
                    tvm: TvmId(id),
                    vcpu: VcpuId(vcpu),
                    gpa,
                    kind,
                }])
            }
            83..=85 => {
                let ids = self.tvm_ids(|t| t.vcpus.values().any(|v| !v.bound));
                let id = self.pick(&ids)?;
                let vcpu = *self.m.tvms[&id].vcpus.iter().find(|(_, v)| !v.bound)?.0;
                let (spa, _) = self.run_of(MPage::Free, 1)?;
                c(CovhCall::BindInterruptFile {
                    tvm: TvmId(id),
                    vcpu: VcpuId(vcpu),
                    spa,
                })
            }
            86..=87 => {
                let ids = self.tvm_ids(|t| t.vcpus.values().any(|v| v.bound));
                let id = self.pick(&ids)?;
                let vcpu = *self.m.tvms[&id].vcpus.iter().find(|(_, v)| v.bound)?.0;
                Some(vec![FuzzCall::Inject {
                    tvm: TvmId(id),
                    vcpu: VcpuId(vcpu),
                    irq: self.rng.gen_range(1..=crate::hart::MAX_IRQ),
                }])
            }
            88..=91 => {
                let ids = self.tvm_ids(|_| true);
                let pressure = self.pages_in(MPage::Free).len() + self.pages_in(MPage::NonConf).len() < 24;
                if !pressure && self.rng.gen_bool(0.5) {
                    return None;
                }
                c(CovhCall::Destroy {
                    tvm: TvmId(self.pick(&ids)?),
                })
            }
            92..=95 => {
                let page = self.rng.gen_range(0..self.m.pages.len() as u64);
                let spa = page * PAGE + 8 * self.rng.gen_range(0..512);
                if self.rng.gen_bool(0.5) {
                    Some(vec![FuzzCall::HostRead(spa)])
                } else {
                    Some(vec![FuzzCall::HostWrite(spa, self.rng.gen())])
                }
            }
            96 => Some(vec![FuzzCall::HostIrq]),
            _ => c(CovhCall::TsmInfo),
        }
    }

    fn unmapped_conf_gpa(&mut self, id: u64) -> Option<u64> {
        let t = &self.m.tvms[&id];
        let free: Vec<u64> = t
            .regions
            .iter()
            .filter(|r| !r.shared)
            .flat_map(|r| r.first..r.first + r.count)
            .filter(|g| !t.mapped.contains_key(g))
            .collect();
        self.pick(&free).map(|g| g * PAGE)
    }

    fn wild_addr(&mut self) -> u64 {
        let pages = self.m.pages.len() as u64;
        match self.rng.gen_range(0..10) {
            0 => self.rng.gen(),
            1 => self.rng.gen_range(0..pages * PAGE),
            2 => (pages + self.rng.gen_range(0..4)) * PAGE,
            _ => self.rng.gen_range(0..pages) * PAGE,
        }
    }

    fn wild_gpa(&mut self) -> u64 {
        let base = [CONF_BASE, SHARED_BASE, 0][self.rng.gen_range(0..3)];
        let off = self.rng.gen_range(0..20) * PAGE;
        if self.rng.gen_bool(0.1) {
            base + off + 8
        } else {
            base + off
        }
    }

    /// A call with arbitrary arguments drawn near the interesting values.
    fn wild(&mut self) -> FuzzCall {
        let tvm = TvmId(self.rng.gen_range(0..self.m.next_id + 2));
        let vcpu = VcpuId(self.rng.gen_range(0..3));
        let n = self.rng.gen_range(0..5);
        let call = match self.rng.gen_range(0..19) {
            0 => CovhCall::Convert {
                spa: self.wild_addr(),
                pages: n,
            },
            1 => CovhCall::Reclaim {
                spa: self.wild_addr(),
                pages: n,
            },
            2 => CovhCall::Reassign {
                spa: self.wild_addr(),
                pages: n,
            },
            3 => CovhCall::TvmCreate {
                spa: self.wild_addr(),
                pages: n,
                debug: false,
            },
            4 => CovhCall::AddPageTablePages {
                tvm,
                spa: self.wild_addr(),
                pages: n,
            },
            5 => CovhCall::AddMemoryRegion {
                tvm,
                gpa: self.wild_gpa(),
                pages: n,
                kind: if self.rng.gen() {
                    RegionKind::Confidential
                } else {
                    RegionKind::NonConfidentialShared
                },
            },
            6 => CovhCall::AddMeasuredPages {
                tvm,
                src: self.wild_addr(),
                dest: self.wild_addr(),
                gpa: self.wild_gpa(),
            },
            7 => CovhCall::CreateVcpu {
                tvm,
                vcpu,
                spa: self.wild_addr(),
                pages: n,
                program: self.wild_addr(),
            },
            8 => CovhCall::Finalize { tvm },
            9 => CovhCall::Run { tvm, vcpu },
            10 => CovhCall::AddZeroPages {
                tvm,
                dest: self.wild_addr(),
                gpa: self.wild_gpa(),
            },
            11 => CovhCall::AddSharedPages {
                tvm,
                src: self.wild_addr(),
                gpa: self.wild_gpa(),
            },
            12 => CovhCall::Destroy { tvm },
            13 => CovhCall::BindInterruptFile {
                tvm,
                vcpu,
                spa: self.wild_addr(),
            },
            14 => {
                return FuzzCall::Inject {
                    tvm,
                    vcpu,
                    irq: self.rng.gen_range(0..70),
                }
            }
            15 => {
                return FuzzCall::Share {
                    tvm,
                    vcpu,
                    gpa: self.wild_gpa(),
                    pages: n,
                    unshare: self.rng.gen(),
                }
            }
            16 => {
                return FuzzCall::Touch {
                    tvm,
                    vcpu,
                    gpa: self.wild_gpa(),
                    kind: TouchKind::Load,
                }
            }
            17 => {
                let a = self.wild_addr();
                return FuzzCall::HostRead(a - a % 8);
            }
            _ => {
                let a = self.wild_addr();
                return FuzzCall::HostWrite(a - a % 8, self.rng.gen());
            }
        };
        FuzzCall::Covh(call)
    }

    fn execute(&mut self, call: &FuzzCall) -> Actual {
        let p = &mut self.p;
        match call {
            FuzzCall::Covh(c) => Actual::Covh(p.covh(0, *c)),
            FuzzCall::HostRead(spa) => Actual::Host(p.host_read(0, *spa).map(|_| ())),
            FuzzCall::HostWrite(spa, v) => Actual::Host(p.host_write(0, *spa, *v)),
            FuzzCall::Stage(spa, prog) => Actual::Host(p.host_write_bytes(0, *spa, &prog.encode())),
            FuzzCall::Share {
                tvm,
                vcpu,
                gpa,
                pages,
                unshare,
            } => {
                let call = if *unshare { abi::COVG_UNSHARE } else { abi::COVG_SHARE };
                let action = Action::Covg {
                    call,
                    args: vec![*gpa, *pages],
                };
                Actual::Guest(p.guest_step(0, *tvm, *vcpu, &action))
            }
            FuzzCall::Touch { tvm, vcpu, gpa, kind } => {
                let action = Action::Touch {
                    gpa: *gpa,
                    kind: *kind,
                    value: 0x5a5a,
                };
                Actual::Guest(p.guest_step(0, *tvm, *vcpu, &action))
            }
            FuzzCall::Inject { tvm, vcpu, irq } => Actual::Host(p.inject_interrupt(*tvm, *vcpu, *irq)),
            FuzzCall::HostIrq => Actual::Host(p.raise_host_interrupt(0)),
        }
    }

    fn set_pages(&mut self, spa: u64, n: u64, to: MPage) {
        for p in spa / PAGE..spa / PAGE + n {
            self.m.pages[p as usize] = to;
        }
    }

    /// Applies the effects of a successful call to the model. Returns a
    /// violation message when the returned values disagree with the model.
    fn apply(&mut self, call: &FuzzCall, actual: &Actual, pre_src: Option<Vec<u8>>) -> Option<String> {
        let FuzzCall::Covh(c) = call else {
            if let FuzzCall::Share {
                tvm,
                gpa,
                pages,
                unshare,
                ..
            } = call
            {
                let t = self.m.tvms.get_mut(&tvm.0).expect("predicted success");
                for g in gpa / PAGE..gpa / PAGE + pages {
                    if *unshare {
                        t.offers.remove(&g);
                        t.mapped.remove(&g);
                    } else {
                        t.offers.insert(g);
                    }
                }
            }
            return None;
        };
        let Actual::Covh(Ok(ret)) = actual else {
            return None;
        };
        match *c {
            CovhCall::Convert { spa, pages } => self.set_pages(spa, pages, MPage::Free),
            CovhCall::Reclaim { spa, pages } => self.set_pages(spa, pages, MPage::NonConf),
            CovhCall::Reassign { pages, .. } => {
                if *ret != CovhReturn::Count(pages) {
                    return Some(format!("reassign returned {ret:?}"));
                }
            }
            CovhCall::TvmCreate { spa, pages, .. } => {
                let id = self.m.next_id;
                if *ret != CovhReturn::Tvm(TvmId(id)) {
                    return Some(format!("expected tvm id {id}, got {ret:?}"));
                }
                self.m.next_id += 1;
                self.report.tvms_created += 1;
                self.set_pages(spa, pages, MPage::Tvm(id, PageUse::TvmState));
                self.m.tvms.insert(
                    id,
                    MTvm {
                        runnable: false,
                        regions: Vec::new(),
                        mapped: BTreeMap::new(),
                        table_pages: 0,
                        vcpus: BTreeMap::new(),
                        offers: BTreeSet::new(),
                        chain: [0; 32],
                        pending_fault: None,
                    },
                );
            }
            CovhCall::AddPageTablePages { tvm, spa, pages } => {
                self.set_pages(spa, pages, MPage::Tvm(tvm.0, PageUse::GStageTable));
                self.m.tvms.get_mut(&tvm.0)?.table_pages += pages;
            }
            CovhCall::AddMemoryRegion { tvm, gpa, pages, kind } => {
                self.m.tvms.get_mut(&tvm.0)?.regions.push(MRegion {
                    first: gpa / PAGE,
                    count: pages,
                    shared: kind == RegionKind::NonConfidentialShared,
                });
            }
            CovhCall::AddMeasuredPages { tvm, dest, gpa, .. } => {
                self.set_pages(dest, 1, MPage::Tvm(tvm.0, PageUse::TvmData));
                let t = self.m.tvms.get_mut(&tvm.0)?;
                t.mapped.insert(gpa / PAGE, (dest / PAGE, false));
                t.extend(gpa, &pre_src?);
            }
            CovhCall::CreateVcpu {
                tvm, vcpu, spa, pages, ..
            } => {
                self.set_pages(spa, pages, MPage::Tvm(tvm.0, PageUse::VcpuState));
                let t = self.m.tvms.get_mut(&tvm.0)?;
                t.vcpus.insert(
                    vcpu.0,
                    MVcpu {
                        runnable: true,
                        bound: false,
                    },
                );
                let mut rec = vcpu.0.to_le_bytes().to_vec();
                rec.extend_from_slice(&pre_src?);
                t.extend(VCPU_RECORD | vcpu.0, &rec);
            }
            CovhCall::Finalize { tvm } => {
                let t = self.m.tvms.get_mut(&tvm.0)?;
                t.runnable = true;
                self.report.tvms_finalized += 1;
                if *ret != CovhReturn::Digest(Digest(t.chain)) {
                    return Some(format!("finalize digest {ret:?} differs from reference chain"));
                }
            }
            CovhCall::Run { tvm, vcpu } => {
                let CovhReturn::Exit(exit) = ret else {
                    return Some(format!("run returned {ret:?}"));
                };
                let t = self.m.tvms.get_mut(&tvm.0)?;
                match exit.reason {
                    ExitReason::Halted(_) => t.vcpus.get_mut(&vcpu.0)?.runnable = false,
                    ExitReason::GuestPageFault(gpa) => {
                        self.report.demand_faults += 1;
                        if t.mapped.contains_key(&(gpa / PAGE)) {
                            return Some(format!("page fault on mapped gpa {gpa:#x}"));
                        }
                        t.pending_fault = Some(gpa);
                    }
                    _ => {}
                }
            }
            CovhCall::AddZeroPages { tvm, dest, gpa } => {
                self.set_pages(dest, 1, MPage::Tvm(tvm.0, PageUse::TvmData));
                self.m
                    .tvms
                    .get_mut(&tvm.0)?
                    .mapped
                    .insert(gpa / PAGE, (dest / PAGE, false));
            }
            CovhCall::AddSharedPages { tvm, src, gpa } => {
                self.m
                    .tvms
                    .get_mut(&tvm.0)?
                    .mapped
                    .insert(gpa / PAGE, (src / PAGE, true));
            }
            CovhCall::Destroy { tvm } => {
                for p in self.m.pages.iter_mut() {
                    if matches!(p, MPage::Tvm(id, _) if *id == tvm.0) {
                        *p = MPage::Free;
                    }
                }
                self.m.tvms.remove(&tvm.0);
            }
            CovhCall::BindInterruptFile { tvm, vcpu, spa } => {
                self.set_pages(spa, 1, MPage::Tvm(tvm.0, PageUse::InterruptFile));
                self.m.tvms.get_mut(&tvm.0)?.vcpus.get_mut(&vcpu.0)?.bound = true;
            }
            CovhCall::TsmInfo => {}
        }
        None
    }

    /// Compares platform state with the model.
    fn check_state(&self, before: &[MPage]) -> Vec<String> {
        let mut out = Vec::new();
        let mem = self.p.mem();
        for (i, (want, got)) in self.m.pages.iter().zip(mem.entries()).enumerate() {
            if want.to_entry() != *got {
                out.push(format!("page {i:#x}: MTT {got}, reference {:?}", want));
                if out.len() > 4 {
                    return out;
                }
            }
        }
        for (i, (old, new)) in before.iter().zip(&self.m.pages).enumerate() {
            let must_be_zero = old != new
                && match new {
                    MPage::Free | MPage::NonConf => true,
                    MPage::Tvm(_, u) => matches!(u, PageUse::TvmState | PageUse::GStageTable | PageUse::InterruptFile),
                    MPage::Tsm => false,
                };
            if must_be_zero && !mem.is_zero(PageAddr::new(i as u64)).unwrap_or(false) {
                out.push(format!("page {i:#x} not zero after becoming {new:?}"));
            }
        }
        let tsm = self.p.tsm().expect("booted");
        let live: Vec<u64> = tsm.live_tvms().map(|t| t.id.0).collect();
        let model: Vec<u64> = self.m.tvms.keys().copied().collect();
        if live != model {
            out.push(format!("live TVMs {live:?}, reference {model:?}"));
        }
        for (id, mt) in &self.m.tvms {
            let Some(t) = tsm.tvm(TvmId(*id)) else { continue };
            let phase = if mt.runnable {
                TvmPhase::Runnable
            } else {
                TvmPhase::Initializing
            };
            if t.phase != phase {
                out.push(format!("tvm {id} phase {:?}, reference {phase:?}", t.phase));
            }
            if t.measurement.digest() != Digest(mt.chain) {
                out.push(format!("tvm {id} measurement differs from reference chain"));
            }
            if t.measurement.replay() != t.measurement.digest() {
                out.push(format!("tvm {id} measurement log does not replay"));
            }
            if t.mapping_count() != mt.mapped.len() {
                out.push(format!(
                    "tvm {id} has {} mappings, reference {}",
                    t.mapping_count(),
                    mt.mapped.len()
                ));
            }
        }
        out.extend(tsm.audit(mem));
        let h = self.p.hart(0).expect("hart 0");
        if !h.is_consistent() || h.active() != ActiveContext::Host || h.c() {
            out.push("hart 0 not back in host context".to_string());
        }
        out
    }

    fn step(&mut self, index: u64, call: FuzzCall, illegal: bool) -> bool {
        let predicted = self.m.predict(&self.p, &call);
        let pre_src = match &call {
            FuzzCall::Covh(CovhCall::AddMeasuredPages { src, .. }) if src % PAGE == 0 => self
                .p
                .mem()
                .page_bytes(PageAddr::new(src / PAGE))
                .ok()
                .map(|b| b.to_vec()),
            FuzzCall::Covh(CovhCall::CreateVcpu { program, .. }) => self.m.program_at(&self.p, *program),
            _ => None,
        };
        let before = self.m.pages.clone();
        let actual = self.execute(&call);
        let class = classify(&actual);

        let stats = self.report.op_stats.entry(call.name().to_string()).or_default();
        if class == Class::Success {
            stats.0 += 1;
        } else {
            stats.1 += 1;
        }
        self.report.ops_run += 1;
        if illegal {
            self.report.illegal_calls += 1;
        }

        let mut problems = Vec::new();
        if class != predicted {
            problems.push(format!(
                "reference predicted {predicted:?}, platform gave {}",
                describe(&actual)
            ));
        } else if class == Class::Success {
            problems.extend(self.apply(&call, &actual, pre_src));
        }
        if self.p.mem().entries().len() as u64 != self.m.pages.len() as u64 {
            problems.push("memory size changed".to_string());
        }
        if Some(index) == self.diverge_at {
            self.corrupt();
        }
        problems.extend(self.check_state(&before));
        for message in problems {
            self.report.violations.push(Violation {
                op_index: index,
                call: format!("{call:?}"),
                message,
            });
        }
        self.report.violations.is_empty()
    }

    fn corrupt(&mut self) {
        let page = PageAddr::new(0);
        let entry = match self.p.mem().entry(page) {
            Ok(MttEntry::NonConfidential) => MttEntry::ConfidentialFree,
            _ => MttEntry::NonConfidential,
        };
        self.p.mem_mut().corrupt_entry(page, entry);
    }
}

fn describe(a: &Actual) -> String {
    match a {
        Actual::Covh(Ok(r)) => format!("{r:?}"),
        Actual::Host(Ok(())) => "ok".to_string(),
        Actual::Guest(Ok(g)) => format!("{g:?}"),
        Actual::Covh(Err(e)) | Actual::Host(Err(e)) | Actual::Guest(Err(e)) => format!("error {}", e.name()),
    }
}

/// Runs a seeded fuzz campaign. Identical options give identical reports.
pub fn fuzz(opts: &FuzzOptions) -> FuzzReport {
    let config = PlatformConfig {
        memory_pages: opts.memory_pages,
        max_tvms: opts.max_tvms,
        ..PlatformConfig::default()
    };
    let p = Platform::booted(config).expect("default TCB fits in memory");
    let reserved = p.boot_info().expect("booted").reserved_start.pfn();
    let pages = p
        .mem()
        .entries()
        .iter()
        .map(|e| match e {
            MttEntry::NonConfidential => MPage::NonConf,
            _ => MPage::Tsm,
        })
        .collect();
    let mut f = Fuzzer {
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
        p,
        m: Model {
            pages,
            tvms: BTreeMap::new(),
            next_id: 0,
            max_tvms: opts.max_tvms,
            usable: reserved,
        },
        report: FuzzReport {
            seed: opts.seed,
            ..FuzzReport::default()
        },
        diverge_at: opts.diverge_at,
    };
    let mut index = 0;
    'outer: while index < opts.ops {
        let illegal = f.rng.gen_range(0..100) < opts.illegal_bias as u32;
        let calls = if illegal { vec![f.wild()] } else { f.legal() };
        for call in calls {
            if index >= opts.ops || !f.step(index, call, illegal) {
                break 'outer;
            }
            index += 1;
        }
    }
    f.report
}
