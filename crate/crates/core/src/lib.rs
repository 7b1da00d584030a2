// SPDX-License-Identifier: Apache-2.0

//! A deterministic simulator of a RISC-V confidential-computing platform.
//!
//! The platform couples simulated harts with a security monitor split into
//! a machine-mode driver ([`tsm_driver`]) and a TEE security manager
//! ([`tsm`]). Confidential memory ownership is tracked page by page in the
//! memory tracking table ([`mem_tracking`]); every access made by a hart is
//! checked against it. TVMs are built and run through the host-facing ABI,
//! and their evidence is rooted in a layered DICE chain ([`attestation`]).
//! The [`scenario`] module drives the platform from a small scripting
//! language, fuzzes the ABI against independent oracles and emits traces.

use std::fmt;

use serde::Serialize;

pub mod attestation;
pub mod hart;
pub mod mem_tracking;
pub mod platform;
pub mod scenario;
pub mod tsm;
pub mod tsm_driver;

pub use mem_tracking::{MemTracker, MttEntry, Owner, PageAddr, PageUse};
pub use platform::{Platform, PlatformConfig, PlatformError};

/// Size of a page in bytes. The MTT tracks memory at this granularity.
pub const PAGE_SIZE: usize = 4096;

/// Identifier of a TVM. Allocated sequentially from zero and never reused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct TvmId(pub u64);

impl fmt::Display for TvmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct VcpuId(pub u64);

impl fmt::Display for VcpuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A SHA-256 output.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0; 32]);

    pub fn of(bytes: &[u8]) -> Digest {
        use sha2::Digest as _;
        Digest(sha2::Sha256::digest(bytes).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Digest> {
        let v = hex::decode(s.trim()).ok()?;
        Some(Digest(v.try_into().ok()?))
    }

    /// The digest as four little-endian words, as returned in registers.
    pub fn to_words(&self) -> [u64; 4] {
        std::array::from_fn(|i| u64::from_le_bytes(self.0[i * 8..i * 8 + 8].try_into().unwrap()))
    }

    pub fn from_words(words: [u64; 4]) -> Digest {
        let mut out = [0u8; 32];
        for (i, w) in words.iter().enumerate() {
            out[i * 8..i * 8 + 8].copy_from_slice(&w.to_le_bytes());
        }
        Digest(out)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}
