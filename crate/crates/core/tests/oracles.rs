// SPDX-License-Identifier: Apache-2.0

//! Self-checks for the test oracles, so a broken oracle cannot mask a
//! broken implementation.

mod common;

use common::sha256_ref;
use cove::mem_tracking::{AccessContext, AccessKind, Domain};
use cove::{Digest, MttEntry, Owner, PageUse, TvmId};
use proptest::prelude::*;

fn hex(d: [u8; 32]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn reference_sha256_known_answers() {
    assert_eq!(
        hex(sha256_ref::digest(b"")),
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    );
    assert_eq!(
        hex(sha256_ref::digest(b"abc")),
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    );
    assert_eq!(
        hex(sha256_ref::digest(
            b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq"
        )),
        "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1"
    );
    let million_a = vec![b'a'; 1_000_000];
    assert_eq!(
        hex(sha256_ref::digest(&million_a)),
        "cdc76e5c9914fb9281a1c7e284d73e67f1809a48a497200e046d39ccc7112cd0"
    );
}

proptest! {
    #[test]
    fn reference_sha256_agrees_on_padding_boundaries(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        prop_assert_eq!(sha256_ref::digest(&bytes), Digest::of(&bytes).0);
    }
}

#[test]
fn reference_chain_of_nothing_is_zero() {
    assert_eq!(common::reference_chain([]), [0u8; 32]);
}

#[test]
fn reference_chain_one_step_by_hand() {
    let mut buf = vec![0u8; 32];
    buf.extend_from_slice(&7u64.to_le_bytes());
    buf.extend_from_slice(&sha256_ref::digest(b"content"));
    assert_eq!(
        common::reference_chain([(7, &b"content"[..])]),
        sha256_ref::digest(&buf)
    );
}

#[test]
fn rule_oracle_matches_the_worked_examples() {
    let assigned = |t| MttEntry::ConfidentialAssigned {
        owner: Owner::Tvm(TvmId(t)),
        page_use: PageUse::TvmData,
    };
    let ctx = |c, domain, kind| AccessContext {
        conf_qualifier: c,
        domain,
        kind,
    };
    let t1 = Domain::Tvm(TvmId(1));
    let t2 = Domain::Tvm(TvmId(2));
    let cases = [
        (
            MttEntry::NonConfidential,
            ctx(false, Domain::Host, AccessKind::Load),
            true,
        ),
        (assigned(1), ctx(false, Domain::Host, AccessKind::Load), false),
        (assigned(1), ctx(true, t1, AccessKind::Store), true),
        (assigned(1), ctx(true, t2, AccessKind::Load), false),
        (MttEntry::NonConfidential, ctx(true, t1, AccessKind::Fetch), false),
        (MttEntry::NonConfidential, ctx(true, t1, AccessKind::PageWalk), false),
        (MttEntry::NonConfidential, ctx(true, t1, AccessKind::Load), true),
        (
            MttEntry::NonConfidential,
            ctx(true, Domain::Tsm, AccessKind::Fetch),
            false,
        ),
        (
            MttEntry::NonConfidential,
            ctx(true, Domain::Tsm, AccessKind::Load),
            true,
        ),
        (
            MttEntry::ConfidentialFree,
            ctx(false, Domain::Host, AccessKind::Store),
            false,
        ),
        (
            MttEntry::ConfidentialFree,
            ctx(true, Domain::Tsm, AccessKind::Store),
            true,
        ),
        (assigned(1), ctx(true, Domain::Tsm, AccessKind::Load), true),
    ];
    for (entry, c, want) in cases {
        assert_eq!(common::rule_allows(entry, c), want, "{entry} {c:?}");
    }
}
