// SPDX-License-Identifier: Apache-2.0

//! A whole simulated machine: physical memory with its MTT, a set of harts,
//! the TSM-driver and the TSM.

use thiserror::Error;

use crate::attestation;
use crate::hart::{self, ActiveContext, Exception, Hart, HartError, HartOp, ModeError, PrivilegeLevel};
use crate::mem_tracking::{MemTracker, MttEntry, MttError, Owner, PageAddr};
use crate::tsm::abi::{CovhCall, CovhReturn};
use crate::tsm::program::Action;
use crate::tsm::{GuestStep, Tsm, TsmError, DEFAULT_MAX_TVMS};
use crate::tsm_driver::{self, DomainSwitchRequest, SwitchError, SwitchResponse, TcbImage, TcbMeasurements};
use crate::{TvmId, VcpuId};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlatformConfig {
    pub memory_pages: u64,
    pub harts: usize,
    pub tsm_driver_blob: Vec<u8>,
    pub tsm_blob: Vec<u8>,
    pub tsm_version: u64,
    pub debug_platform: bool,
    /// Device secret held by the root of trust.
    pub root_secret: [u8; 32],
    pub max_tvms: u64,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            memory_pages: 1024,
            harts: 1,
            tsm_driver_blob: b"cove tsm-driver image v1".to_vec(),
            tsm_blob: b"cove tsm image v1".to_vec(),
            tsm_version: 1,
            debug_platform: false,
            root_secret: [0x01; 32],
            max_tvms: DEFAULT_MAX_TVMS,
        }
    }
}

impl PlatformConfig {
    pub fn tcb_image(&self) -> TcbImage {
        TcbImage {
            tsm_driver_blob: self.tsm_driver_blob.clone(),
            tsm_blob: self.tsm_blob.clone(),
            tsm_version: self.tsm_version,
            debug_platform: self.debug_platform,
            device_secret: self.root_secret,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum PlatformError {
    #[error("platform not booted")]
    NotBooted,
    #[error("platform already booted")]
    AlreadyBooted,
    #[error("no hart {0}")]
    UnknownHart(usize),
    #[error("domain switch: {0}")]
    Switch(#[from] SwitchError),
    #[error("boot failed: {0}")]
    Boot(MttError),
    #[error("mode change: {0}")]
    Mode(#[from] ModeError),
    #[error("exception {0}")]
    Fault(Exception),
    #[error("TSM: {0}")]
    Tsm(#[from] TsmError),
}

impl PlatformError {
    /// Short name used to match scenario expectations.
    pub fn name(&self) -> &'static str {
        match self {
            PlatformError::NotBooted => "NotBooted",
            PlatformError::AlreadyBooted => "AlreadyBooted",
            PlatformError::UnknownHart(_) => "UnknownHart",
            PlatformError::Switch(SwitchError::NotHostContext) => "NotHostContext",
            PlatformError::Switch(SwitchError::NotTsmContext) => "NotTsmContext",
            PlatformError::Boot(_) => "BootFailed",
            PlatformError::Mode(ModeError::Confidential) => "ConfidentialMode",
            PlatformError::Mode(ModeError::Illegal) => "IllegalMode",
            PlatformError::Fault(_) => "Fault",
            PlatformError::Tsm(e) => e.name(),
        }
    }
}

impl From<HartError> for PlatformError {
    fn from(e: HartError) -> Self {
        match e {
            HartError::Trap(e) => PlatformError::Fault(e),
            HartError::Unaligned => PlatformError::Tsm(TsmError::Unaligned),
        }
    }
}

pub type Result<T> = core::result::Result<T, PlatformError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BootInfo {
    pub measurements: TcbMeasurements,
    pub reserved_start: PageAddr,
    pub root_public_key: [u8; 32],
}

pub struct Platform {
    config: PlatformConfig,
    mem: MemTracker,
    harts: Vec<Hart>,
    tsm: Option<Tsm>,
    boot: Option<BootInfo>,
    host_irq: Vec<bool>,
}

impl Platform {
    /// A powered-on but unbooted machine. All memory is non-confidential.
    pub fn new(config: PlatformConfig) -> Self {
        let harts = (0..config.harts.max(1)).map(Hart::new).collect::<Vec<_>>();
        Platform {
            mem: MemTracker::new(config.memory_pages),
            host_irq: vec![false; harts.len()],
            harts,
            tsm: None,
            boot: None,
            config,
        }
    }

    /// Convenience: a machine that has completed measured boot.
    pub fn booted(config: PlatformConfig) -> Result<Self> {
        let mut p = Platform::new(config);
        p.boot()?;
        Ok(p)
    }

    /// Runs the TSM-driver's measured boot and starts the TSM.
    pub fn boot(&mut self) -> Result<BootInfo> {
        if self.boot.is_some() {
            return Err(PlatformError::AlreadyBooted);
        }
        let image = self.config.tcb_image();
        let out = tsm_driver::boot(&mut self.mem, &image).map_err(PlatformError::Boot)?;
        let info = BootInfo {
            measurements: out.measurements,
            reserved_start: out.reserved_start,
            root_public_key: attestation::root_public_key(self.config.root_secret),
        };
        self.tsm = Some(Tsm::new(self.config.tsm_version, self.config.max_tvms, out.credentials));
        self.boot = Some(info);
        Ok(info)
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn boot_info(&self) -> Option<&BootInfo> {
        self.boot.as_ref()
    }

    pub fn mem(&self) -> &MemTracker {
        &self.mem
    }

    /// Direct MTT access, bypassing every check. For fault-injection tests.
    #[doc(hidden)]
    pub fn mem_mut(&mut self) -> &mut MemTracker {
        &mut self.mem
    }

    pub fn tsm(&self) -> Option<&Tsm> {
        self.tsm.as_ref()
    }

    pub fn hart_count(&self) -> usize {
        self.harts.len()
    }

    pub fn hart(&self, idx: usize) -> Result<&Hart> {
        self.harts.get(idx).ok_or(PlatformError::UnknownHart(idx))
    }

    pub fn hart_mut(&mut self, idx: usize) -> Result<&mut Hart> {
        self.harts.get_mut(idx).ok_or(PlatformError::UnknownHart(idx))
    }

    /// Issues a register-level TEECALL from `hart` with `req` in `a0`-`a6`.
    pub fn teecall(&mut self, hart: usize, req: &DomainSwitchRequest) -> Result<SwitchResponse> {
        let tsm = self.tsm.as_mut().ok_or(PlatformError::NotBooted)?;
        let h = self.harts.get_mut(hart).ok_or(PlatformError::UnknownHart(hart))?;
        let irq = &mut self.host_irq[hart];
        let mem = &mut self.mem;
        Ok(tsm_driver::teecall(h, req, |h, r| tsm.handle(h, mem, r, irq))?)
    }

    /// Marshals a typed call into registers, performs the TEECALL and
    /// decodes the response.
    pub fn covh(&mut self, hart: usize, call: CovhCall) -> Result<CovhReturn> {
        let resp = self.teecall(hart, &call.to_request())?;
        Ok(CovhReturn::decode(&call, &resp)?)
    }

    /// A host load of the 8 bytes at `spa`.
    pub fn host_read(&mut self, hart: usize, spa: u64) -> Result<u64> {
        self.host_access(hart, spa, HartOp::Load)
    }

    pub fn host_write(&mut self, hart: usize, spa: u64, value: u64) -> Result<()> {
        self.host_access(hart, spa, HartOp::Store(value)).map(|_| ())
    }

    pub fn host_fetch(&mut self, hart: usize, spa: u64) -> Result<u64> {
        self.host_access(hart, spa, HartOp::Fetch)
    }

    fn host_access(&mut self, hart: usize, spa: u64, op: HartOp) -> Result<u64> {
        let h = self.harts.get(hart).ok_or(PlatformError::UnknownHart(hart))?;
        if h.active() != ActiveContext::Host {
            return Err(SwitchError::NotHostContext.into());
        }
        Ok(hart::hart_access(h, &mut self.mem, None, spa, op)?)
    }

    /// Host write of raw bytes into a non-confidential page, e.g. to stage a
    /// measured image or a vcpu program. Fails with an access fault on any
    /// page the host may not store to.
    pub fn host_write_bytes(&mut self, hart: usize, spa: u64, bytes: &[u8]) -> Result<()> {
        let mut padded = bytes.to_vec();
        padded.resize(bytes.len().div_ceil(8) * 8, 0);
        for (i, chunk) in padded.chunks(8).enumerate() {
            let v = u64::from_le_bytes(chunk.try_into().unwrap());
            self.host_write(hart, spa + 8 * i as u64, v)?;
        }
        Ok(())
    }

    pub fn set_host_mode(&mut self, hart: usize, priv_level: PrivilegeLevel, v: bool) -> Result<()> {
        Ok(self.hart_mut(hart)?.set_host_mode(priv_level, v)?)
    }

    /// Marks a host interrupt pending on `hart`; a TVM running there exits
    /// with `InterruptPending` before its next action.
    pub fn raise_host_interrupt(&mut self, hart: usize) -> Result<()> {
        *self.host_irq.get_mut(hart).ok_or(PlatformError::UnknownHart(hart))? = true;
        Ok(())
    }

    /// Writes `irq` into the interrupt file bound to a vcpu.
    pub fn inject_interrupt(&mut self, tvm: TvmId, vcpu: VcpuId, irq: u32) -> Result<()> {
        let tsm = self.tsm.as_mut().ok_or(PlatformError::NotBooted)?;
        Ok(tsm.inject_interrupt(tvm, vcpu, irq)?)
    }

    /// Executes one guest action on `hart` as vcpu `vcpu` of `tvm`. The host
    /// register file is left exactly as it was.
    pub fn guest_step(&mut self, hart: usize, tvm: TvmId, vcpu: VcpuId, action: &Action) -> Result<GuestStep> {
        let tsm = self.tsm.as_mut().ok_or(PlatformError::NotBooted)?;
        let h = self.harts.get_mut(hart).ok_or(PlatformError::UnknownHart(hart))?;
        let unchanged = SwitchResponse::from_hart(h);
        tsm_driver::teecall_enter(h)?;
        let out = tsm.guest_step(h, &mut self.mem, tvm, vcpu, action);
        tsm_driver::teeret(h, &unchanged)?;
        Ok(out?)
    }

    /// Cross-checks the MTT, TSM bookkeeping and hart state. Returns one
    /// line per violated invariant.
    pub fn audit(&self) -> Vec<String> {
        let mut out = Vec::new();
        for h in &self.harts {
            if !h.is_consistent() {
                out.push(format!("hart {} inconsistent mode/context", h.hart_id));
            }
        }
        let Some(tsm) = &self.tsm else {
            return out;
        };
        out.extend(tsm.audit(&self.mem));
        let reserved = self.boot.map(|b| b.reserved_start.pfn()).unwrap_or(u64::MAX);
        for (i, e) in self.mem.entries().iter().enumerate() {
            let page = PageAddr::new(i as u64);
            match e {
                MttEntry::ConfidentialFree if !self.mem.is_zero(page).unwrap_or(true) => {
                    out.push(format!("free confidential page {page} not scrubbed"));
                }
                MttEntry::ConfidentialAssigned { owner: Owner::Tsm, .. } if (i as u64) < reserved => {
                    out.push(format!("TSM-owned page {page} outside the TCB reservation"));
                }
                _ => {}
            }
        }
        out
    }

    /// First page of the TCB reservation; pages at and above it are never
    /// usable by the host.
    pub fn usable_pages(&self) -> u64 {
        self.boot.map_or(self.config.memory_pages, |b| b.reserved_start.pfn())
    }
}
