// SPDX-License-Identifier: Apache-2.0

//! TVM measurement register.
//!
//! Starting from 32 zero bytes, each extend computes
//! `d' = SHA-256(d || LE64(key) || content_digest)`, where `key` is the
//! guest physical address of a measured page, or `VCPU_RECORD | vcpu_id`
//! for a vcpu, and `content_digest` is the SHA-256 of the page or of the
//! vcpu's canonical encoding.

use sha2::{Digest as _, Sha256};

use crate::Digest;

/// Tag bit distinguishing vcpu records from page records.
pub const VCPU_RECORD: u64 = 1 << 63;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExtendRecord {
    pub key: u64,
    pub content_digest: Digest,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MeasurementRegister {
    digest: Digest,
    log: Vec<ExtendRecord>,
}

fn fold(prev: &Digest, rec: &ExtendRecord) -> Digest {
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(rec.key.to_le_bytes());
    h.update(rec.content_digest.as_bytes());
    Digest(h.finalize().into())
}

impl MeasurementRegister {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn log(&self) -> &[ExtendRecord] {
        &self.log
    }

    pub fn extend(&mut self, key: u64, content_digest: Digest) {
        let rec = ExtendRecord { key, content_digest };
        self.digest = fold(&self.digest, &rec);
        self.log.push(rec);
    }

    pub fn extend_page(&mut self, gpa: u64, contents: &[u8]) {
        self.extend(gpa, Digest::of(contents));
    }

    /// Recomputes the digest from the log.
    pub fn replay(&self) -> Digest {
        self.log.iter().fold(Digest::ZERO, |d, rec| fold(&d, rec))
    }
}
