// SPDX-License-Identifier: Apache-2.0

//! Machine-mode TSM-driver: measured boot of the TCB and the TEECALL/TEERET
//! domain switches between the host and the TSM.
//!
//! Calling convention: the function id is passed in `a6` and arguments in
//! `a0`-`a5`. On return `a0` holds the status and `a1`-`a5` the values. All
//! other registers are restored to the host's values at TEERET.

use thiserror::Error;

use crate::attestation::{self, TsmCredentials};
use crate::hart::{ActiveContext, Hart, PrivilegeLevel, SavedContext, REG_A0, REG_A6};
use crate::mem_tracking::{MemTracker, MttError, Owner, PageAddr, PageUse};
use crate::{Digest, PAGE_SIZE};

/// Measurements of the TCB layers taken by the root of trust.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TcbMeasurements {
    pub tsm_driver_digest: Digest,
    pub tsm_digest: Digest,
    pub tsm_version: u64,
    pub debug_platform: bool,
}

/// Firmware images and identity inputs consumed at boot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TcbImage {
    pub tsm_driver_blob: Vec<u8>,
    pub tsm_blob: Vec<u8>,
    pub tsm_version: u64,
    pub debug_platform: bool,
    pub device_secret: [u8; 32],
}

impl TcbImage {
    /// Pages reserved for the TSM-driver and TSM images.
    pub fn reserved_pages(&self) -> u64 {
        let pages = |len: usize| len.div_ceil(PAGE_SIZE).max(1) as u64;
        pages(self.tsm_driver_blob.len()) + pages(self.tsm_blob.len())
    }
}

pub fn measure(image: &TcbImage) -> TcbMeasurements {
    TcbMeasurements {
        tsm_driver_digest: Digest::of(&image.tsm_driver_blob),
        tsm_digest: Digest::of(&image.tsm_blob),
        tsm_version: image.tsm_version,
        debug_platform: image.debug_platform,
    }
}

pub struct BootOutcome {
    pub measurements: TcbMeasurements,
    pub credentials: TsmCredentials,
    /// First page of the TCB reservation at the top of memory.
    pub reserved_start: PageAddr,
}

/// Measures the TCB, derives the DICE chain up to the TSM and isolates the
/// TCB images in `TsmInternal` pages at the top of memory.
pub fn boot(mem: &mut MemTracker, image: &TcbImage) -> Result<BootOutcome, MttError> {
    let measurements = measure(image);
    let credentials = attestation::derive_tcb_chain(image.device_secret, &measurements);

    let reserved = image.reserved_pages();
    let start = mem
        .page_count()
        .checked_sub(reserved)
        .map(PageAddr::new)
        .ok_or(MttError::OutOfBounds)?;
    mem.convert_range(start, reserved)?;
    let mut page = start;
    for blob in [&image.tsm_driver_blob, &image.tsm_blob] {
        let chunks: Vec<&[u8]> = if blob.is_empty() {
            vec![&[]]
        } else {
            blob.chunks(PAGE_SIZE).collect()
        };
        for chunk in chunks {
            mem.assign_page(page, Owner::Tsm, PageUse::TsmInternal)?;
            mem.write_bytes(page, 0, chunk);
            page = page.checked_add(1).expect("within memory");
        }
    }
    Ok(BootOutcome {
        measurements,
        credentials,
        reserved_start: start,
    })
}

/// Registers that carry a TSM response back to the host (`a0`-`a5`).
pub const RESPONSE_REGS: std::ops::Range<usize> = REG_A0..REG_A0 + 6;

/// A COVH request as placed in registers by the host.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DomainSwitchRequest {
    pub function_id: u64,
    pub args: [u64; 6],
}

impl DomainSwitchRequest {
    pub fn new(function_id: u64, args: &[u64]) -> Self {
        assert!(args.len() <= 6, "at most six arguments");
        let mut a = [0; 6];
        a[..args.len()].copy_from_slice(args);
        DomainSwitchRequest { function_id, args: a }
    }

    /// Places the request in the argument registers.
    pub fn place(&self, hart: &mut Hart) {
        for (i, a) in self.args.iter().enumerate() {
            hart.set_gpr(REG_A0 + i, *a);
        }
        hart.set_gpr(REG_A6, self.function_id);
    }

    /// Reads a request out of the argument registers.
    pub fn from_hart(hart: &Hart) -> Self {
        DomainSwitchRequest {
            function_id: hart.gpr(REG_A6),
            args: std::array::from_fn(|i| hart.gpr(REG_A0 + i)),
        }
    }
}

/// Status plus up to five return values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct SwitchResponse {
    pub status: u64,
    pub values: [u64; 5],
}

impl SwitchResponse {
    pub fn from_hart(hart: &Hart) -> Self {
        SwitchResponse {
            status: hart.gpr(REG_A0),
            values: std::array::from_fn(|i| hart.gpr(REG_A0 + 1 + i)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum SwitchError {
    /// TEECALL from anything other than the host in HS-mode.
    #[error("teecall requires the host in HS-mode")]
    NotHostContext,
    /// TEERET outside of TSM context.
    #[error("teeret requires TSM context")]
    NotTsmContext,
}

/// First half of TEECALL: snapshot host state and raise the qualifier.
pub fn teecall_enter(hart: &mut Hart) -> Result<(), SwitchError> {
    if hart.c || hart.active != ActiveContext::Host || hart.v || hart.priv_level != PrivilegeLevel::S {
        return Err(SwitchError::NotHostContext);
    }
    hart.saved_host_ctx = Some(SavedContext {
        gprs: *hart.gprs(),
        priv_level: hart.priv_level,
        v: hart.v,
    });
    hart.c = true;
    hart.active = ActiveContext::TsmContext;
    Ok(())
}

/// TEERET: restore every host register, then write the response registers.
pub fn teeret(hart: &mut Hart, response: &SwitchResponse) -> Result<(), SwitchError> {
    if !hart.c || hart.active != ActiveContext::TsmContext {
        return Err(SwitchError::NotTsmContext);
    }
    let saved = hart.saved_host_ctx.take().ok_or(SwitchError::NotTsmContext)?;
    hart.load_gprs(&saved.gprs);
    hart.priv_level = saved.priv_level;
    hart.v = saved.v;
    hart.c = false;
    hart.active = ActiveContext::Host;
    hart.set_gpr(REG_A0, response.status);
    for (i, v) in response.values.iter().enumerate() {
        hart.set_gpr(REG_A0 + 1 + i, *v);
    }
    Ok(())
}

/// Full TEECALL round trip. `handler` runs in TSM context with the request
/// in the argument registers and may use any register as scratch.
pub fn teecall<F>(hart: &mut Hart, req: &DomainSwitchRequest, handler: F) -> Result<SwitchResponse, SwitchError>
where
    F: FnOnce(&mut Hart, DomainSwitchRequest) -> SwitchResponse,
{
    if hart.c || hart.active != ActiveContext::Host {
        return Err(SwitchError::NotHostContext);
    }
    req.place(hart);
    teecall_enter(hart)?;
    let request = DomainSwitchRequest::from_hart(hart);
    let response = handler(hart, request);
    teeret(hart, &response)?;
    Ok(response)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> TcbImage {
        TcbImage {
            tsm_driver_blob: b"driver".to_vec(),
            tsm_blob: vec![0x5a; 5000],
            tsm_version: 1,
            debug_platform: false,
            device_secret: [1; 32],
        }
    }

    #[test]
    fn boot_reserves_tcb_pages() {
        let mut mem = MemTracker::new(16);
        let out = boot(&mut mem, &image()).unwrap();
        assert_eq!(out.reserved_start, PageAddr::new(13));
        for p in 13..16 {
            assert_eq!(
                mem.entry(PageAddr::new(p)).unwrap().page_use(),
                Some(PageUse::TsmInternal)
            );
        }
        assert_eq!(mem.page_bytes(PageAddr::new(14)).unwrap()[0], 0x5a);
        assert!(!mem.entry(PageAddr::new(12)).unwrap().is_confidential());
    }

    #[test]
    fn teecall_restores_non_response_registers() {
        let mut h = Hart::new(0);
        for i in 1..32 {
            h.set_gpr(i, 0x1000 + i as u64);
        }
        let before = *h.gprs();
        let resp = teecall(&mut h, &DomainSwitchRequest::new(0, &[]), |hart, _| {
            assert!(hart.c());
            hart.set_gpr(7, 0xdead);
            SwitchResponse {
                status: 0,
                values: [9, 0, 0, 0, 0],
            }
        })
        .unwrap();
        assert_eq!(resp.values[0], 9);
        assert!(!h.c());
        assert_eq!(h.gpr(7), before[7]);
        for i in (1..32).filter(|i| !RESPONSE_REGS.contains(i) && *i != REG_A6) {
            assert_eq!(h.gpr(i), before[i], "x{i}");
        }
        assert_eq!(h.gpr(REG_A0 + 1), 9);
    }

    #[test]
    fn switch_preconditions() {
        let mut h = Hart::new(0);
        assert_eq!(
            teeret(&mut h, &SwitchResponse::default()),
            Err(SwitchError::NotTsmContext)
        );
        h.set_host_mode(PrivilegeLevel::U, false).unwrap();
        assert_eq!(teecall_enter(&mut h), Err(SwitchError::NotHostContext));
        h.set_host_mode(PrivilegeLevel::S, false).unwrap();
        teecall_enter(&mut h).unwrap();
        assert_eq!(teecall_enter(&mut h), Err(SwitchError::NotHostContext));
        teeret(&mut h, &SwitchResponse::default()).unwrap();
        assert!(h.is_consistent());
    }
}
