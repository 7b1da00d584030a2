// SPDX-License-Identifier: Apache-2.0

//! Layered DICE credentials and TVM attestation evidence.
//!
//! Each TCB layer receives a compound device identifier (CDI) from the
//! layer below, `cdi_child = HMAC-SHA256(cdi_parent, digest_child)`, and
//! derives an Ed25519 signing key from it. The parent signs a certificate
//! over the child's public key and claims. Evidence handed to a relying
//! party is the chain `RoT -> TsmDriver -> Tsm -> Tvm`; the RoT certificate
//! is self-signed by the key derived from the device secret.
//!
//! # Encoding
//!
//! All integers are little-endian.
//!
//! ```text
//! evidence := "CVEV" u8:version(=1) u8:count { u32:len cert }*count
//! cert     := name:subject name:issuer [32]:public_key claims [64]:signature
//! name     := u8:kind (0=RoT 1=TsmDriver 2=Tsm 3=Tvm) [u64:tvm_id if kind=3]
//! claims   := u8:count { u8:id u16:len value }*count      (ids ascending)
//! ```
//!
//! The signature covers every byte of the certificate before it. Claim
//! values: `measurement`(1) 32 bytes, `version`(2) u64, `debug_platform`(3)
//! and `debug_opt_in`(4) one byte 0/1, `report_data`(5) 64 bytes. Decoding
//! is strict, so every accepted byte string has exactly one meaning.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use hmac::{Hmac, KeyInit, Mac};
use sha2::Sha256;
use thiserror::Error;

use crate::tsm_driver::TcbMeasurements;
use crate::{Digest, TvmId};

/// Compound device identifier of one layer. Never leaves this module's
/// callers in the TCB; `Debug` does not print the value.
#[derive(Clone, PartialEq, Eq)]
pub struct Cdi([u8; 32]);

impl fmt::Debug for Cdi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Cdi(..)")
    }
}

fn hmac_sha256(key: &[u8], msg: &[&[u8]]) -> [u8; 32] {
    let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(key).expect("hmac accepts any key length");
    for m in msg {
        mac.update(m);
    }
    mac.finalize().into_bytes().into()
}

impl Cdi {
    /// The root CDI: the platform's unique device secret.
    pub fn from_device_secret(secret: [u8; 32]) -> Self {
        Cdi(secret)
    }

    /// CDI of the next layer, bound to that layer's measurement.
    pub fn derive(&self, layer_digest: &Digest) -> Cdi {
        Cdi(hmac_sha256(&self.0, &[layer_digest.as_bytes()]))
    }

    fn signing_key(&self) -> SigningKey {
        SigningKey::from_bytes(&hmac_sha256(&self.0, &[b"layer-signing-key"]))
    }

    pub fn public_key(&self) -> [u8; 32] {
        self.signing_key().verifying_key().to_bytes()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerName {
    Rot,
    TsmDriver,
    Tsm,
    Tvm(TvmId),
}

impl LayerName {
    fn encode(&self, out: &mut Vec<u8>) {
        match self {
            LayerName::Rot => out.push(0),
            LayerName::TsmDriver => out.push(1),
            LayerName::Tsm => out.push(2),
            LayerName::Tvm(id) => {
                out.push(3);
                out.extend_from_slice(&id.0.to_le_bytes());
            }
        }
    }
}

impl fmt::Display for LayerName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerName::Rot => f.write_str("RoT"),
            LayerName::TsmDriver => f.write_str("TsmDriver"),
            LayerName::Tsm => f.write_str("Tsm"),
            LayerName::Tvm(id) => write!(f, "Tvm({id})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClaimId {
    Measurement = 1,
    Version = 2,
    DebugPlatform = 3,
    DebugOptIn = 4,
    ReportData = 5,
}

impl ClaimId {
    fn from_u8(b: u8) -> Option<Self> {
        Some(match b {
            1 => ClaimId::Measurement,
            2 => ClaimId::Version,
            3 => ClaimId::DebugPlatform,
            4 => ClaimId::DebugOptIn,
            5 => ClaimId::ReportData,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClaimValue {
    Digest(Digest),
    U64(u64),
    Bool(bool),
    ReportData([u8; 64]),
}

impl ClaimValue {
    fn encode(&self, out: &mut Vec<u8>) {
        let bytes: Vec<u8> = match self {
            ClaimValue::Digest(d) => d.0.to_vec(),
            ClaimValue::U64(v) => v.to_le_bytes().to_vec(),
            ClaimValue::Bool(b) => vec![*b as u8],
            ClaimValue::ReportData(r) => r.to_vec(),
        };
        out.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(&bytes);
    }

    fn decode(id: ClaimId, bytes: &[u8]) -> Option<Self> {
        Some(match id {
            ClaimId::Measurement => ClaimValue::Digest(Digest(bytes.try_into().ok()?)),
            ClaimId::Version => ClaimValue::U64(u64::from_le_bytes(bytes.try_into().ok()?)),
            ClaimId::DebugPlatform | ClaimId::DebugOptIn => match bytes {
                [0] => ClaimValue::Bool(false),
                [1] => ClaimValue::Bool(true),
                _ => return None,
            },
            ClaimId::ReportData => ClaimValue::ReportData(bytes.try_into().ok()?),
        })
    }
}

impl fmt::Display for ClaimValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClaimValue::Digest(d) => write!(f, "{d}"),
            ClaimValue::U64(v) => write!(f, "{v}"),
            ClaimValue::Bool(b) => write!(f, "{b}"),
            ClaimValue::ReportData(r) => f.write_str(&hex::encode(r)),
        }
    }
}

/// Claims carried by a certificate, kept in canonical (ascending id) order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Claims(BTreeMap<ClaimId, ClaimValue>);

impl Claims {
    pub fn new() -> Self {
        Claims::default()
    }

    pub fn with(mut self, id: ClaimId, value: ClaimValue) -> Self {
        self.0.insert(id, value);
        self
    }

    pub fn get(&self, id: ClaimId) -> Option<&ClaimValue> {
        self.0.get(&id)
    }

    pub fn measurement(&self) -> Option<Digest> {
        match self.get(ClaimId::Measurement) {
            Some(ClaimValue::Digest(d)) => Some(*d),
            _ => None,
        }
    }

    pub fn flag(&self, id: ClaimId) -> Option<bool> {
        match self.get(id) {
            Some(ClaimValue::Bool(b)) => Some(*b),
            _ => None,
        }
    }

    pub fn version(&self) -> Option<u64> {
        match self.get(ClaimId::Version) {
            Some(ClaimValue::U64(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn report_data(&self) -> Option<[u8; 64]> {
        match self.get(ClaimId::ReportData) {
            Some(ClaimValue::ReportData(r)) => Some(*r),
            _ => None,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ClaimId, &ClaimValue)> {
        self.0.iter()
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.0.len() as u8);
        for (id, value) in &self.0 {
            out.push(*id as u8);
            value.encode(out);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCert {
    pub subject: LayerName,
    pub issuer: LayerName,
    pub subject_key: [u8; 32],
    pub claims: Claims,
    pub signature: [u8; 64],
}

impl LayerCert {
    fn sign(subject: LayerName, issuer: LayerName, subject_key: [u8; 32], claims: Claims, issuer_cdi: &Cdi) -> Self {
        let mut cert = LayerCert {
            subject,
            issuer,
            subject_key,
            claims,
            signature: [0; 64],
        };
        cert.signature = issuer_cdi.signing_key().sign(&cert.tbs_bytes()).to_bytes();
        cert
    }

    /// The signed portion of the certificate.
    pub fn tbs_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(256);
        self.subject.encode(&mut out);
        self.issuer.encode(&mut out);
        out.extend_from_slice(&self.subject_key);
        self.claims.encode(&mut out);
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.tbs_bytes();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader(bytes);
        let subject = r.name()?;
        let issuer = r.name()?;
        let subject_key = r.array::<32>()?;
        let count = r.u8()?;
        let mut claims = BTreeMap::new();
        let mut last = 0u8;
        for _ in 0..count {
            let raw = r.u8()?;
            if raw <= last {
                return Err(DecodeError::NonCanonical);
            }
            last = raw;
            let id = ClaimId::from_u8(raw).ok_or(DecodeError::NonCanonical)?;
            let len = r.u16()? as usize;
            let value = ClaimValue::decode(id, r.take(len)?).ok_or(DecodeError::NonCanonical)?;
            claims.insert(id, value);
        }
        let signature = r.array::<64>()?;
        if !r.0.is_empty() {
            return Err(DecodeError::TrailingBytes);
        }
        Ok(LayerCert {
            subject,
            issuer,
            subject_key,
            claims: Claims(claims),
            signature,
        })
    }

    fn verify_with(&self, issuer_key: &[u8; 32]) -> bool {
        let Ok(key) = VerifyingKey::from_bytes(issuer_key) else {
            return false;
        };
        key.verify_strict(&self.tbs_bytes(), &Signature::from_bytes(&self.signature))
            .is_ok()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("truncated input")]
    Truncated,
    #[error("bad magic or version")]
    BadHeader,
    #[error("non-canonical encoding")]
    NonCanonical,
    #[error("trailing bytes")]
    TrailingBytes,
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.0.len() < n {
            return Err(DecodeError::Truncated);
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn name(&mut self) -> Result<LayerName, DecodeError> {
        Ok(match self.u8()? {
            0 => LayerName::Rot,
            1 => LayerName::TsmDriver,
            2 => LayerName::Tsm,
            3 => LayerName::Tvm(TvmId(u64::from_le_bytes(self.array()?))),
            _ => return Err(DecodeError::NonCanonical),
        })
    }
}

/// Derives the next layer's CDI and issues its certificate, signed with the
/// key of `parent_cdi`.
pub fn derive_layer(
    parent_cdi: &Cdi,
    parent: LayerName,
    subject: LayerName,
    layer_digest: &Digest,
    claims: Claims,
) -> (Cdi, LayerCert) {
    let child = parent_cdi.derive(layer_digest);
    let cert = LayerCert::sign(subject, parent, child.public_key(), claims, parent_cdi);
    (child, cert)
}

/// Self-signed certificate of the root of trust.
pub fn root_cert(device_cdi: &Cdi) -> LayerCert {
    LayerCert::sign(
        LayerName::Rot,
        LayerName::Rot,
        device_cdi.public_key(),
        Claims::new(),
        device_cdi,
    )
}

/// Credentials of the TSM layer: its CDI and the chain that certifies it.
#[derive(Clone, Debug)]
pub struct TsmCredentials {
    pub(crate) cdi: Cdi,
    pub chain: [LayerCert; 3],
}

/// Runs the measured-boot DICE flow from the device secret up to the TSM.
pub fn derive_tcb_chain(device_secret: [u8; 32], tcb: &TcbMeasurements) -> TsmCredentials {
    let root = Cdi::from_device_secret(device_secret);
    let rot = root_cert(&root);
    let (driver_cdi, driver) = derive_layer(
        &root,
        LayerName::Rot,
        LayerName::TsmDriver,
        &tcb.tsm_driver_digest,
        Claims::new().with(ClaimId::Measurement, ClaimValue::Digest(tcb.tsm_driver_digest)),
    );
    let (tsm_cdi, tsm) = derive_layer(
        &driver_cdi,
        LayerName::TsmDriver,
        LayerName::Tsm,
        &tcb.tsm_digest,
        Claims::new()
            .with(ClaimId::Measurement, ClaimValue::Digest(tcb.tsm_digest))
            .with(ClaimId::Version, ClaimValue::U64(tcb.tsm_version))
            .with(ClaimId::DebugPlatform, ClaimValue::Bool(tcb.debug_platform)),
    );
    TsmCredentials {
        cdi: tsm_cdi,
        chain: [rot, driver, tsm],
    }
}

/// Public key a relying party trusts for a device secret.
pub fn root_public_key(device_secret: [u8; 32]) -> [u8; 32] {
    Cdi::from_device_secret(device_secret).public_key()
}

/// Certificate chain from the RoT to a TVM leaf.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttestationEvidence {
    pub chain: Vec<LayerCert>,
}

const EVIDENCE_MAGIC: &[u8; 4] = b"CVEV";
const EVIDENCE_VERSION: u8 = 1;

impl AttestationEvidence {
    pub fn leaf(&self) -> Option<&LayerCert> {
        self.chain.last()
    }

    pub fn tvm_measurement(&self) -> Option<Digest> {
        self.leaf()?.claims.measurement()
    }

    pub fn debug_opt_in(&self) -> Option<bool> {
        self.leaf()?.claims.flag(ClaimId::DebugOptIn)
    }

    pub fn report_data(&self) -> Option<[u8; 64]> {
        self.leaf()?.claims.report_data()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(1024);
        out.extend_from_slice(EVIDENCE_MAGIC);
        out.push(EVIDENCE_VERSION);
        out.push(self.chain.len() as u8);
        for cert in &self.chain {
            let bytes = cert.encode();
            out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
            out.extend_from_slice(&bytes);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader(bytes);
        if r.take(4)? != EVIDENCE_MAGIC || r.u8()? != EVIDENCE_VERSION {
            return Err(DecodeError::BadHeader);
        }
        let count = r.u8()?;
        let mut chain = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = r.u32()? as usize;
            chain.push(LayerCert::decode(r.take(len)?)?);
        }
        if !r.0.is_empty() {
            return Err(DecodeError::TrailingBytes);
        }
        Ok(AttestationEvidence { chain })
    }

    /// Human-readable dump, one field per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "evidence: {} certificates", self.chain.len());
        for (i, cert) in self.chain.iter().enumerate() {
            let _ = writeln!(s, "cert[{i}]:");
            let _ = writeln!(s, "  subject: {}", cert.subject);
            let _ = writeln!(s, "  issuer: {}", cert.issuer);
            let _ = writeln!(s, "  public_key: {}", hex::encode(cert.subject_key));
            for (id, value) in cert.claims.iter() {
                let _ = writeln!(s, "  claim.{id:?}: {value}");
            }
            let _ = writeln!(s, "  signature: {}", hex::encode(cert.signature));
        }
        s
    }
}

/// Issues the TVM leaf certificate under the TSM layer and attaches the
/// TCB chain.
pub fn issue_tvm_evidence(
    tsm: &TsmCredentials,
    tvm: TvmId,
    tvm_measurement: &Digest,
    debug_opt_in: bool,
    report_data: &[u8; 64],
) -> AttestationEvidence {
    let (_, leaf) = derive_layer(
        &tsm.cdi,
        LayerName::Tsm,
        LayerName::Tvm(tvm),
        tvm_measurement,
        Claims::new()
            .with(ClaimId::Measurement, ClaimValue::Digest(*tvm_measurement))
            .with(ClaimId::DebugOptIn, ClaimValue::Bool(debug_opt_in))
            .with(ClaimId::ReportData, ClaimValue::ReportData(*report_data)),
    );
    let mut chain = tsm.chain.to_vec();
    chain.push(leaf);
    AttestationEvidence { chain }
}

/// Reference values for the TSM-driver and TSM layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TcbReference {
    pub tsm_driver_digest: Digest,
    pub tsm_digest: Digest,
}

/// Relying-party appraisal policy.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Policy {
    /// Required TCB digests; unchecked when absent.
    pub expected_tcb: Option<TcbReference>,
    pub allow_debug: bool,
    pub expected_tvm_measurement: Option<Digest>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RejectReason {
    Malformed,
    ChainBroken,
    WrongRoot,
    BadSignature,
    TcbMismatch,
    DebugForbidden,
    MeasurementMismatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Accept => f.write_str("Accept"),
            Verdict::Reject(r) => write!(f, "Reject({r:?})"),
        }
    }
}

/// Appraises evidence against a trusted root key and a policy.
pub fn verify_evidence(evidence: &AttestationEvidence, trusted_root: &[u8; 32], policy: &Policy) -> Verdict {
    use RejectReason::*;
    let reject = Verdict::Reject;

    let [rot, driver, tsm, leaf] = evidence.chain.as_slice() else {
        return reject(ChainBroken);
    };
    let shape_ok = rot.subject == LayerName::Rot
        && rot.issuer == LayerName::Rot
        && driver.subject == LayerName::TsmDriver
        && tsm.subject == LayerName::Tsm
        && matches!(leaf.subject, LayerName::Tvm(_))
        && evidence.chain.windows(2).all(|w| w[1].issuer == w[0].subject);
    if !shape_ok {
        return reject(ChainBroken);
    }
    if &rot.subject_key != trusted_root {
        return reject(WrongRoot);
    }
    let mut issuer_key = &rot.subject_key;
    for cert in &evidence.chain {
        if !cert.verify_with(issuer_key) {
            return reject(BadSignature);
        }
        issuer_key = &cert.subject_key;
    }

    let (Some(driver_digest), Some(tsm_digest)) = (driver.claims.measurement(), tsm.claims.measurement()) else {
        return reject(TcbMismatch);
    };
    if let Some(expected) = &policy.expected_tcb {
        if expected.tsm_driver_digest != driver_digest || expected.tsm_digest != tsm_digest {
            return reject(TcbMismatch);
        }
    }

    let (Some(debug_platform), Some(debug_opt_in), Some(measurement)) = (
        tsm.claims.flag(ClaimId::DebugPlatform),
        leaf.claims.flag(ClaimId::DebugOptIn),
        leaf.claims.measurement(),
    ) else {
        return reject(Malformed);
    };
    if (debug_platform || debug_opt_in) && !policy.allow_debug {
        return reject(DebugForbidden);
    }
    if policy.expected_tvm_measurement.is_some_and(|m| m != measurement) {
        return reject(MeasurementMismatch);
    }
    Verdict::Accept
}

/// Decodes and appraises serialized evidence; undecodable input is rejected.
pub fn verify_evidence_bytes(bytes: &[u8], trusted_root: &[u8; 32], policy: &Policy) -> Verdict {
    match AttestationEvidence::decode(bytes) {
        Ok(ev) => verify_evidence(&ev, trusted_root, policy),
        Err(_) => Verdict::Reject(RejectReason::Malformed),
    }
}
