// SPDX-License-Identifier: Apache-2.0

//! The MTT state machine against a map-based ownership model.

mod common;

use std::collections::BTreeMap;

use common::{ok, spa, PAGE};
use cove::mem_tracking::MttError;
use cove::tsm::abi::CovhCall;
use cove::{MemTracker, MttEntry, Owner, PageAddr, PageUse, Platform, PlatformConfig, TvmId};
use proptest::prelude::*;

const PAGES: u64 = 24;

#[derive(Clone, Debug)]
enum Op {
    Convert(u64, u64),
    Reclaim(u64, u64),
    Assign(u64, Owner, PageUse),
    Release(u64),
}

fn owner() -> impl Strategy<Value = Owner> {
    prop_oneof![Just(Owner::Tsm), (0u64..3).prop_map(|t| Owner::Tvm(TvmId(t)))]
}

fn page_use() -> impl Strategy<Value = PageUse> {
    prop_oneof![
        Just(PageUse::TvmData),
        Just(PageUse::TvmState),
        Just(PageUse::VcpuState),
        Just(PageUse::GStageTable),
        Just(PageUse::InterruptFile),
        Just(PageUse::TsmInternal),
    ]
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..PAGES + 2, 1u64..6).prop_map(|(s, n)| Op::Convert(s, n)),
        (0..PAGES + 2, 1u64..6).prop_map(|(s, n)| Op::Reclaim(s, n)),
        (0..PAGES + 2, owner(), page_use()).prop_map(|(p, o, u)| Op::Assign(p, o, u)),
        (0..PAGES + 2).prop_map(Op::Release),
    ]
}

/// page -> None (non-confidential), Some(None) (free), Some(Some(owner)).
type Model = BTreeMap<u64, Option<Option<(Owner, PageUse)>>>;

fn model_entry(m: &Model, p: u64) -> MttEntry {
    match m[&p] {
        None => MttEntry::NonConfidential,
        Some(None) => MttEntry::ConfidentialFree,
        Some(Some((owner, page_use))) => MttEntry::ConfidentialAssigned { owner, page_use },
    }
}

fn apply_model(m: &mut Model, op: &Op) -> Result<(), MttError> {
    let in_range = |s: u64, n: u64| s + n <= PAGES;
    match *op {
        Op::Convert(s, n) => {
            if !in_range(s, n) {
                return Err(MttError::OutOfBounds);
            }
            if (s..s + n).any(|p| m[&p].is_some()) {
                return Err(MttError::AlreadyConfidential);
            }
            for p in s..s + n {
                m.insert(p, Some(None));
            }
        }
        Op::Reclaim(s, n) => {
            if !in_range(s, n) {
                return Err(MttError::OutOfBounds);
            }
            for p in s..s + n {
                match m[&p] {
                    Some(Some(_)) => return Err(MttError::PageInUse),
                    None => return Err(MttError::NotConfidential),
                    Some(None) => {}
                }
            }
            for p in s..s + n {
                m.insert(p, None);
            }
        }
        Op::Assign(p, o, u) => {
            if p >= PAGES {
                return Err(MttError::OutOfBounds);
            }
            if m[&p] != Some(None) {
                return Err(MttError::NotFree);
            }
            m.insert(p, Some(Some((o, u))));
        }
        Op::Release(p) => {
            if p >= PAGES {
                return Err(MttError::OutOfBounds);
            }
            if !matches!(m[&p], Some(Some(_))) {
                return Err(MttError::NotAssigned);
            }
            m.insert(p, Some(None));
        }
    }
    Ok(())
}

fn apply(mem: &mut MemTracker, op: &Op) -> Result<(), MttError> {
    match *op {
        Op::Convert(s, n) => mem.convert_range(PageAddr::new(s), n),
        Op::Reclaim(s, n) => mem.reclaim_range(PageAddr::new(s), n),
        Op::Assign(p, o, u) => mem.assign_page(PageAddr::new(p), o, u),
        Op::Release(p) => mem.release_page(PageAddr::new(p)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tracker_follows_the_ownership_model(ops in proptest::collection::vec(op(), 1..80)) {
        let mut mem = MemTracker::new(PAGES);
        let mut model: Model = (0..PAGES).map(|p| (p, None)).collect();
        for (i, op) in ops.iter().enumerate() {
            let before = mem.entries().to_vec();
            let want = apply_model(&mut model, op);
            let got = apply(&mut mem, op);
            prop_assert_eq!(got, want, "op {} {:?}", i, op);
            if got.is_err() {
                prop_assert_eq!(mem.entries(), &before[..], "failed op {} {:?} changed state", i, op);
            }
            for p in 0..PAGES {
                prop_assert_eq!(mem.entry(PageAddr::new(p)).unwrap(), model_entry(&model, p));
            }
        }
    }

    /// Data written by the host or a TVM is gone once a page changes world
    /// or owner.
    #[test]
    fn transitions_scrub_pages(value in 1u64.., word in 0u64..512, second_owner in any::<bool>()) {
        let mut p = Platform::booted(PlatformConfig { memory_pages: 128, ..PlatformConfig::default() }).unwrap();
        let page = 0x20;
        p.host_write(0, spa(page) + 8 * word, value).unwrap();
        ok(&mut p, CovhCall::Convert { spa: spa(page), pages: 1 });
        prop_assert!(p.mem().is_zero(PageAddr::new(page)).unwrap());

        let (tvm, _) = common::build_tvm(
            &mut p,
            common::Layout { conf_base: 0x30, conf_pages: 8, staging: 0x10 },
            2,
            &[],
            &["exit 0".parse().unwrap()],
            false,
        );
        ok(&mut p, CovhCall::Finalize { tvm });
        ok(&mut p, CovhCall::AddZeroPages { tvm, dest: spa(page), gpa: common::CONF_GPA });
        let step = p.guest_step(0, tvm, cove::VcpuId(0), &cove::tsm::program::Action::Touch {
            gpa: common::CONF_GPA + 8 * word,
            kind: cove::tsm::program::TouchKind::Store,
            value,
        });
        prop_assert!(step.is_ok());
        prop_assert!(!p.mem().is_zero(PageAddr::new(page)).unwrap());
        ok(&mut p, CovhCall::Destroy { tvm });
        prop_assert!(p.mem().is_zero(PageAddr::new(page)).unwrap());
        if second_owner {
            ok(&mut p, CovhCall::Reassign { spa: spa(page), pages: 1 });
        }
        ok(&mut p, CovhCall::Reclaim { spa: spa(page), pages: 1 });
        let bytes = common::host_page(&mut p, page).unwrap();
        prop_assert!(bytes.iter().all(|b| *b == 0));
        prop_assert_eq!(bytes.len() as u64, PAGE);
    }
}

#[test]
fn out_of_bounds_ranges() {
    let mut mem = MemTracker::new(8);
    assert_eq!(mem.convert_range(PageAddr::new(6), 3), Err(MttError::OutOfBounds));
    assert_eq!(
        mem.convert_range(PageAddr::new(u64::MAX), 2),
        Err(MttError::OutOfBounds)
    );
    assert_eq!(mem.entry(PageAddr::new(8)), Err(MttError::OutOfBounds));
    assert!(mem.entries().iter().all(|e| *e == MttEntry::NonConfidential));
}
