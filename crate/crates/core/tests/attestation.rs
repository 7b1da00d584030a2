// SPDX-License-Identifier: Apache-2.0

use cove::attestation::{
    self, AttestationEvidence, ClaimId, ClaimValue, LayerName, Policy, RejectReason, TcbReference, Verdict,
};
use cove::tsm_driver::{self, TcbImage};
use cove::{Digest, TvmId};
use ed25519_dalek::{Signature, VerifyingKey};
use proptest::prelude::*;

fn image(secret: u8, debug_platform: bool) -> TcbImage {
    TcbImage {
        tsm_driver_blob: b"driver image".to_vec(),
        tsm_blob: b"tsm image".to_vec(),
        tsm_version: 4,
        debug_platform,
        device_secret: [secret; 32],
    }
}

fn evidence(img: &TcbImage, measurement: Digest, debug: bool) -> AttestationEvidence {
    let m = tsm_driver::measure(img);
    let creds = attestation::derive_tcb_chain(img.device_secret, &m);
    attestation::issue_tvm_evidence(&creds, TvmId(3), &measurement, debug, &[0x5a; 64])
}

fn strict_policy(img: &TcbImage, measurement: Digest) -> Policy {
    let m = tsm_driver::measure(img);
    Policy {
        expected_tcb: Some(TcbReference {
            tsm_driver_digest: m.tsm_driver_digest,
            tsm_digest: m.tsm_digest,
        }),
        allow_debug: false,
        expected_tvm_measurement: Some(measurement),
    }
}

#[test]
fn chain_signatures_verify_with_plain_ed25519() {
    let img = image(9, false);
    let ev = evidence(&img, Digest::of(b"tvm"), false);
    assert_eq!(ev.chain.len(), 4);
    let root = attestation::root_public_key(img.device_secret);
    let mut issuer = root;
    for cert in &ev.chain {
        let key = VerifyingKey::from_bytes(&issuer).unwrap();
        key.verify_strict(&cert.tbs_bytes(), &Signature::from_bytes(&cert.signature))
            .unwrap();
        issuer = cert.subject_key;
    }
    let subjects: Vec<LayerName> = ev.chain.iter().map(|c| c.subject).collect();
    assert_eq!(
        subjects,
        [
            LayerName::Rot,
            LayerName::TsmDriver,
            LayerName::Tsm,
            LayerName::Tvm(TvmId(3))
        ]
    );
}

#[test]
fn layer_keys_depend_on_measured_images() {
    let a = image(9, false);
    let mut b = a.clone();
    b.tsm_blob.push(0);
    let ea = evidence(&a, Digest::of(b"tvm"), false);
    let eb = evidence(&b, Digest::of(b"tvm"), false);
    assert_eq!(ea.chain[0], eb.chain[0]);
    assert_eq!(ea.chain[1], eb.chain[1]);
    assert_ne!(ea.chain[2].subject_key, eb.chain[2].subject_key);
    assert_ne!(ea.chain[3].subject_key, eb.chain[3].subject_key);
}

#[test]
fn accepts_matching_evidence() {
    let img = image(1, false);
    let m = Digest::of(b"tvm");
    let ev = evidence(&img, m, false);
    let root = attestation::root_public_key(img.device_secret);
    assert_eq!(
        attestation::verify_evidence(&ev, &root, &strict_policy(&img, m)),
        Verdict::Accept
    );
    assert_eq!(
        attestation::verify_evidence_bytes(&ev.encode(), &root, &strict_policy(&img, m)),
        Verdict::Accept
    );
    assert_eq!(ev.report_data(), Some([0x5a; 64]));
}

#[test]
fn each_reject_reason() {
    let img = image(1, false);
    let m = Digest::of(b"tvm");
    let ev = evidence(&img, m, false);
    let root = attestation::root_public_key(img.device_secret);
    let policy = strict_policy(&img, m);
    let verdict =
        |ev: &AttestationEvidence, root: &[u8; 32], policy: &Policy| attestation::verify_evidence(ev, root, policy);

    let other_root = attestation::root_public_key([2; 32]);
    assert_eq!(
        verdict(&ev, &other_root, &policy),
        Verdict::Reject(RejectReason::WrongRoot)
    );

    let mut short = ev.clone();
    short.chain.pop();
    assert_eq!(
        verdict(&short, &root, &policy),
        Verdict::Reject(RejectReason::ChainBroken)
    );

    let mut swapped = ev.clone();
    swapped.chain.swap(1, 2);
    assert_eq!(
        verdict(&swapped, &root, &policy),
        Verdict::Reject(RejectReason::ChainBroken)
    );

    let mut forged = ev.clone();
    forged.chain[3].claims = forged.chain[3]
        .claims
        .clone()
        .with(ClaimId::Measurement, ClaimValue::Digest(Digest::of(b"other")));
    assert_eq!(
        verdict(&forged, &root, &policy),
        Verdict::Reject(RejectReason::BadSignature)
    );

    let mut other_tcb = image(1, false);
    other_tcb.tsm_version += 1;
    other_tcb.tsm_blob = b"patched tsm".to_vec();
    let ev2 = evidence(&other_tcb, m, false);
    assert_eq!(
        verdict(&ev2, &root, &policy),
        Verdict::Reject(RejectReason::TcbMismatch)
    );
    let lax = Policy {
        expected_tcb: None,
        ..policy.clone()
    };
    assert_eq!(verdict(&ev2, &root, &lax), Verdict::Accept);

    let other_m = strict_policy(&img, Digest::of(b"someone else"));
    assert_eq!(
        verdict(&ev, &root, &other_m),
        Verdict::Reject(RejectReason::MeasurementMismatch)
    );

    assert_eq!(
        attestation::verify_evidence_bytes(b"CVEV", &root, &policy),
        Verdict::Reject(RejectReason::Malformed)
    );
}

#[test]
fn debug_posture_from_either_layer() {
    let m = Digest::of(b"tvm");
    for (platform, opt_in) in [(true, false), (false, true), (true, true)] {
        let img = image(1, platform);
        let ev = evidence(&img, m, opt_in);
        let root = attestation::root_public_key(img.device_secret);
        let mut policy = strict_policy(&img, m);
        assert_eq!(
            attestation::verify_evidence(&ev, &root, &policy),
            Verdict::Reject(RejectReason::DebugForbidden)
        );
        policy.allow_debug = true;
        assert_eq!(attestation::verify_evidence(&ev, &root, &policy), Verdict::Accept);
    }
}

#[test]
fn evidence_text_names_every_layer() {
    let ev = evidence(&image(1, false), Digest::of(b"tvm"), true);
    let text = ev.to_text();
    for needle in [
        "subject: RoT",
        "subject: TsmDriver",
        "subject: Tsm\n",
        "subject: Tvm(3)",
        "claim.DebugOptIn: true",
    ] {
        assert!(text.contains(needle), "{needle} missing from:\n{text}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encoding_round_trips(secret in any::<u8>(), m in any::<[u8; 32]>(), debug in any::<bool>()) {
        let ev = evidence(&image(secret, false), Digest(m), debug);
        let bytes = ev.encode();
        prop_assert_eq!(AttestationEvidence::decode(&bytes).unwrap(), ev);
    }

    #[test]
    fn truncation_or_extension_is_rejected(cut in 0usize..2000, extra in any::<u8>()) {
        let img = image(1, false);
        let m = Digest::of(b"tvm");
        let bytes = evidence(&img, m, false).encode();
        let root = attestation::root_public_key(img.device_secret);
        let policy = strict_policy(&img, m);
        let cut = cut % bytes.len();
        prop_assert!(matches!(
            attestation::verify_evidence_bytes(&bytes[..cut], &root, &policy),
            Verdict::Reject(_)
        ));
        let mut longer = bytes.clone();
        longer.push(extra);
        prop_assert!(matches!(
            attestation::verify_evidence_bytes(&longer, &root, &policy),
            Verdict::Reject(_)
        ));
    }
}
