// SPDX-License-Identifier: Apache-2.0

//! Oracles shared by the integration tests. Nothing here calls into the
//! hashing or access-check code under test.

#![allow(dead_code)]

pub mod sha256_ref;

use cove::mem_tracking::{AccessContext, AccessKind, Domain};
use cove::tsm::abi::{CovhCall, CovhReturn};
use cove::tsm::program::TvmProgram;
use cove::tsm::tvm::RegionKind;
use cove::{MttEntry, Owner, Platform, TvmId, VcpuId, PAGE_SIZE};

pub const PAGE: u64 = PAGE_SIZE as u64;

pub fn spa(page: u64) -> u64 {
    page * PAGE
}

/// The MTT access rule written out case by case from the rule text.
#[allow(clippy::match_like_matches_macro)]
pub fn rule_allows(entry: MttEntry, ctx: AccessContext) -> bool {
    let c = ctx.conf_qualifier;
    match entry {
        MttEntry::NonConfidential => match (ctx.domain, ctx.kind) {
            (Domain::Tvm(_), AccessKind::Fetch | AccessKind::PageWalk) => false,
            (Domain::Tsm, AccessKind::Fetch) => false,
            _ => true,
        },
        MttEntry::ConfidentialFree => c,
        MttEntry::ConfidentialAssigned { owner, .. } => {
            if !c {
                return false;
            }
            match (ctx.domain, owner) {
                (Domain::Tvm(a), Owner::Tvm(o)) => a == o,
                (Domain::Tvm(_), Owner::Tsm) => false,
                _ => true,
            }
        }
    }
}

/// Measurement chain recomputed with the reference SHA-256:
/// `d' = H(d || le64(key) || H(content))`, starting from 32 zero bytes.
pub fn reference_chain<'a>(records: impl IntoIterator<Item = (u64, &'a [u8])>) -> [u8; 32] {
    let mut d = [0u8; 32];
    for (key, content) in records {
        let mut buf = d.to_vec();
        buf.extend_from_slice(&key.to_le_bytes());
        buf.extend_from_slice(&sha256_ref::digest(content));
        d = sha256_ref::digest(&buf);
    }
    d
}

pub const VCPU_KEY: u64 = 1 << 63;

/// Content hashed for a vcpu record: `le64(vcpu) || program encoding`.
pub fn vcpu_content(vcpu: u64, program: &TvmProgram) -> Vec<u8> {
    let mut v = vcpu.to_le_bytes().to_vec();
    v.extend_from_slice(&program.encode());
    v
}

pub fn ok(p: &mut Platform, call: CovhCall) -> CovhReturn {
    p.covh(0, call)
        .unwrap_or_else(|e| panic!("{} failed: {e}", call.name()))
}

/// Page layout used by [`build_tvm`]; host-side staging pages sit below
/// `conf_base`.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub conf_base: u64,
    pub conf_pages: u64,
    pub staging: u64,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            conf_base: 0x40,
            conf_pages: 64,
            staging: 0x10,
        }
    }
}

pub const CONF_GPA: u64 = 0x8000_0000;
pub const SHARED_GPA: u64 = 0x4000_0000;

/// Converts `layout.conf_pages` pages, creates a TVM with one table page,
/// a confidential region of `region_pages` at `CONF_GPA` and a one-page
/// shared region at `SHARED_GPA`, measures `images` at consecutive gpas
/// and adds one vcpu per program. Returns the TVM id and the next unused
/// confidential page.
pub fn build_tvm(
    p: &mut Platform,
    layout: Layout,
    region_pages: u64,
    images: &[Vec<u8>],
    programs: &[TvmProgram],
    debug: bool,
) -> (TvmId, u64) {
    let mut next = layout.conf_base;
    let mut take = |n: u64| {
        let s = next;
        next += n;
        s
    };
    ok(
        p,
        CovhCall::Convert {
            spa: spa(layout.conf_base),
            pages: layout.conf_pages,
        },
    );
    let CovhReturn::Tvm(tvm) = ok(
        p,
        CovhCall::TvmCreate {
            spa: spa(take(1)),
            pages: 1,
            debug,
        },
    ) else {
        panic!("tvm_create returned no id")
    };
    ok(
        p,
        CovhCall::AddPageTablePages {
            tvm,
            spa: spa(take(1)),
            pages: 1,
        },
    );
    ok(
        p,
        CovhCall::AddMemoryRegion {
            tvm,
            gpa: CONF_GPA,
            pages: region_pages,
            kind: RegionKind::Confidential,
        },
    );
    ok(
        p,
        CovhCall::AddMemoryRegion {
            tvm,
            gpa: SHARED_GPA,
            pages: 1,
            kind: RegionKind::NonConfidentialShared,
        },
    );
    for (i, image) in images.iter().enumerate() {
        p.host_write_bytes(0, spa(layout.staging), image).unwrap();
        ok(
            p,
            CovhCall::AddMeasuredPages {
                tvm,
                src: spa(layout.staging),
                dest: spa(take(1)),
                gpa: CONF_GPA + i as u64 * PAGE,
            },
        );
        clear_page(p, layout.staging);
    }
    for (i, program) in programs.iter().enumerate() {
        p.host_write_bytes(0, spa(layout.staging), &program.encode()).unwrap();
        ok(
            p,
            CovhCall::CreateVcpu {
                tvm,
                vcpu: VcpuId(i as u64),
                spa: spa(take(1)),
                pages: 1,
                program: spa(layout.staging),
            },
        );
        clear_page(p, layout.staging);
    }
    (tvm, next)
}

pub fn clear_page(p: &mut Platform, page: u64) {
    p.host_write_bytes(0, spa(page), &[0u8; PAGE_SIZE]).unwrap();
}

/// Reads a whole page with host loads.
pub fn host_page(p: &mut Platform, page: u64) -> Result<Vec<u8>, cove::PlatformError> {
    let mut out = Vec::with_capacity(PAGE_SIZE);
    for w in 0..PAGE / 8 {
        out.extend_from_slice(&p.host_read(0, spa(page) + 8 * w)?.to_le_bytes());
    }
    Ok(out)
}
