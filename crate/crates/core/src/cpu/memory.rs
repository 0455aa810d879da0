//! Tracked memory map for one emulated chain.
//!
//! Four region kinds exist: the network data buffer under inspection, a
//! synthetic stack, a read-only TIB stub, and scratch regions created by the
//! optional syscall model. Every memory operand executed by the chain lands
//! in the access log; instruction fetches do not (the log counts operands).

use std::sync::Arc;

use serde::{Deserialize, Serialize};

#[derive(Debug, Copy, Clone, Eq, PartialEq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Buffer,
    Stack,
    Tib,
    Scratch,
}

#[derive(Debug, Copy, Clone, Eq, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Read,
    Write,
    ExecFetch,
    /// Performed by the modeled kernel on the chain's behalf, not by the
    /// instruction stream itself.
    SyscallRead,
    SyscallWrite,
}

/// One memory access performed by the chain.
#[derive(Debug, Copy, Clone, Eq, PartialEq, Serialize, Deserialize)]
pub struct AccessEvent {
    pub kind: AccessKind,
    pub addr: u32,
    pub size: u8,
    /// Address of the instruction that caused the access.
    pub at_eip: u32,
    /// True iff `addr` falls inside the buffer region.
    pub in_buffer: bool,
}

/// Backing storage for a region. The buffer is shared between chains and
/// copied only when a chain actually writes to it; the stack starts as
/// all-zero and materializes on first write.
#[derive(Debug, Clone)]
enum Backing {
    Shared(Arc<Vec<u8>>),
    Owned(Vec<u8>),
    Zeroed,
}

#[derive(Debug, Clone)]
pub struct Region {
    pub base: u32,
    pub len: u32,
    pub kind: RegionKind,
    pub writable: bool,
    backing: Backing,
}

impl Region {
    pub fn shared(base: u32, kind: RegionKind, writable: bool, bytes: Arc<Vec<u8>>) -> Region {
        Region { base, len: bytes.len() as u32, kind, writable, backing: Backing::Shared(bytes) }
    }

    pub fn owned(base: u32, kind: RegionKind, writable: bool, bytes: Vec<u8>) -> Region {
        Region { base, len: bytes.len() as u32, kind, writable, backing: Backing::Owned(bytes) }
    }

    pub fn zeroed(base: u32, len: u32, kind: RegionKind, writable: bool) -> Region {
        Region { base, len, kind, writable, backing: Backing::Zeroed }
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && u64::from(addr) < u64::from(self.base) + u64::from(self.len)
    }

    /// Whole access fits inside this region.
    fn covers(&self, addr: u32, size: u8) -> bool {
        self.contains(addr)
            && u64::from(addr) + u64::from(size) <= u64::from(self.base) + u64::from(self.len)
    }

    fn byte(&self, off: usize) -> u8 {
        match &self.backing {
            Backing::Shared(b) => b[off],
            Backing::Owned(b) => b[off],
            Backing::Zeroed => 0,
        }
    }

    fn bytes_mut(&mut self) -> &mut Vec<u8> {
        if !matches!(self.backing, Backing::Owned(_)) {
            let owned = match &self.backing {
                Backing::Shared(b) => b.as_ref().clone(),
                Backing::Zeroed => vec![0u8; self.len as usize],
                Backing::Owned(_) => unreachable!(),
            };
            self.backing = Backing::Owned(owned);
        }
        match &mut self.backing {
            Backing::Owned(b) => b,
            _ => unreachable!(),
        }
    }

    /// Copies out up to `max` bytes starting at `addr` (used for fetches).
    fn slice_from(&self, addr: u32, max: usize, out: &mut [u8]) -> usize {
        let off = (addr - self.base) as usize;
        let avail = (self.len as usize - off).min(max);
        match &self.backing {
            Backing::Shared(b) => out[..avail].copy_from_slice(&b[off..off + avail]),
            Backing::Owned(b) => out[..avail].copy_from_slice(&b[off..off + avail]),
            Backing::Zeroed => out[..avail].fill(0),
        }
        avail
    }
}

/// Raised by an access the region map cannot satisfy; the chain terminates
/// with a memory fault.
#[derive(Debug, Copy, Clone, Eq, PartialEq)]
pub struct MemFault {
    pub addr: u32,
    pub size: u8,
    pub write: bool,
}

#[derive(Debug, Clone)]
pub struct MemoryImage {
    regions: Vec<Region>,
    pub log: Vec<AccessEvent>,
    buffer_base: u32,
    buffer_len: u32,
    next_scratch_base: u32,
}

/// Default base for syscall-allocated scratch regions.
pub const SCRATCH_BASE: u32 = 0x0080_0000;
pub const SCRATCH_LEN: u32 = 0x1_0000;

impl MemoryImage {
    /// Builds an image from non-overlapping regions. Exactly one buffer and
    /// one TIB region are expected; overlap checking is the caller's job
    /// (see `init_state`).
    pub fn new(regions: Vec<Region>) -> MemoryImage {
        let buf = regions
            .iter()
            .find(|r| r.kind == RegionKind::Buffer)
            .expect("memory image needs a buffer region");
        let (buffer_base, buffer_len) = (buf.base, buf.len);
        MemoryImage { regions, log: Vec::new(), buffer_base, buffer_len, next_scratch_base: SCRATCH_BASE }
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn buffer_base(&self) -> u32 {
        self.buffer_base
    }

    pub fn buffer_len(&self) -> u32 {
        self.buffer_len
    }

    pub fn in_buffer(&self, addr: u32) -> bool {
        addr >= self.buffer_base
            && u64::from(addr) < u64::from(self.buffer_base) + u64::from(self.buffer_len)
    }

    pub fn region_at(&self, addr: u32) -> Option<&Region> {
        self.regions.iter().find(|r| r.contains(addr))
    }

    fn region_index_at(&self, addr: u32) -> Option<usize> {
        self.regions.iter().position(|r| r.contains(addr))
    }

    /// Allocates a fresh scratch region (syscall model). Returns its base.
    pub fn alloc_scratch(&mut self) -> u32 {
        let mut base = self.next_scratch_base;
        // Step past anything already mapped there.
        while self.regions.iter().any(|r| {
            let r_end = u64::from(r.base) + u64::from(r.len);
            u64::from(base) < r_end && u64::from(base) + u64::from(SCRATCH_LEN) > u64::from(r.base)
        }) {
            base = base.wrapping_add(SCRATCH_LEN);
        }
        self.next_scratch_base = base.wrapping_add(SCRATCH_LEN);
        self.regions.push(Region::zeroed(base, SCRATCH_LEN, RegionKind::Scratch, true));
        base
    }

    /// Logged data read of 1/2/4 bytes, little-endian.
    pub fn read(&mut self, addr: u32, size: u8, at_eip: u32, kind: AccessKind) -> Result<u32, MemFault> {
        let idx = self
            .region_index_at(addr)
            .filter(|&i| self.regions[i].covers(addr, size))
            .ok_or(MemFault { addr, size, write: false })?;
        let region = &self.regions[idx];
        let off = (addr - region.base) as usize;
        let mut val = 0u32;
        for i in 0..size as usize {
            val |= u32::from(region.byte(off + i)) << (8 * i);
        }
        self.log.push(AccessEvent { kind, addr, size, at_eip, in_buffer: self.in_buffer(addr) });
        Ok(val)
    }

    /// Logged data write of 1/2/4 bytes, little-endian.
    pub fn write(&mut self, addr: u32, size: u8, val: u32, at_eip: u32, kind: AccessKind) -> Result<(), MemFault> {
        let idx = self
            .region_index_at(addr)
            .filter(|&i| self.regions[i].covers(addr, size) && self.regions[i].writable)
            .ok_or(MemFault { addr, size, write: true })?;
        let in_buffer = self.in_buffer(addr);
        let region = &mut self.regions[idx];
        let off = (addr - region.base) as usize;
        let bytes = region.bytes_mut();
        for i in 0..size as usize {
            bytes[off + i] = (val >> (8 * i)) as u8;
        }
        self.log.push(AccessEvent { kind, addr, size, at_eip, in_buffer });
        Ok(())
    }

    /// Unlogged fetch window for the decoder; returns the number of bytes
    /// actually available at `addr` (fetches never span regions).
    pub fn fetch_window(&self, addr: u32, out: &mut [u8]) -> usize {
        match self.region_at(addr) {
            Some(r) => r.slice_from(addr, out.len(), out),
            None => 0,
        }
    }

    /// Unlogged byte peek, for tests and report rendering.
    pub fn peek(&self, addr: u32) -> Option<u8> {
        self.region_at(addr).map(|r| r.byte((addr - r.base) as usize))
    }

    /// Unlogged range copy, for tests and the syscall model.
    pub fn peek_range(&self, addr: u32, len: usize) -> Option<Vec<u8>> {
        let r = self.region_at(addr)?;
        if !r.covers(addr, 1) || (addr - r.base) as usize + len > r.len as usize {
            return None;
        }
        let off = (addr - r.base) as usize;
        Some((0..len).map(|i| r.byte(off + i)).collect())
    }

    /// Unlogged write used to seed memory before a chain runs (tests only).
    pub fn poke_range(&mut self, addr: u32, bytes: &[u8]) -> Result<(), MemFault> {
        let idx = self
            .region_index_at(addr)
            .ok_or(MemFault { addr, size: 1, write: true })?;
        let region = &mut self.regions[idx];
        let off = (addr - region.base) as usize;
        if off + bytes.len() > region.len as usize {
            return Err(MemFault { addr, size: 1, write: true });
        }
        region.bytes_mut()[off..off + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    /// Full byte dump of every region, for the step-locality property test.
    pub fn snapshot(&self) -> Vec<(u32, Vec<u8>)> {
        self.regions
            .iter()
            .map(|r| {
                let mut buf = vec![0u8; r.len as usize];
                r.slice_from(r.base, r.len as usize, &mut buf);
                (r.base, buf)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image() -> MemoryImage {
        MemoryImage::new(vec![
            Region::shared(0x1000, RegionKind::Buffer, true, Arc::new(vec![0xAB; 16])),
            Region::zeroed(0x2000, 32, RegionKind::Stack, true),
            Region::owned(0x3000, RegionKind::Tib, false, vec![0xEE; 8]),
        ])
    }

    #[test]
    fn read_write_roundtrip_and_log() {
        let mut m = image();
        m.write(0x2000, 4, 0xDEAD_BEEF, 0x42, AccessKind::Write).unwrap();
        assert_eq!(m.read(0x2000, 4, 0x43, AccessKind::Read).unwrap(), 0xDEAD_BEEF);
        assert_eq!(m.read(0x2001, 1, 0x44, AccessKind::Read).unwrap(), 0xBE);
        assert_eq!(m.log.len(), 3);
        assert!(!m.log[0].in_buffer);
    }

    #[test]
    fn buffer_reads_are_flagged() {
        let mut m = image();
        let ev_val = m.read(0x1004, 1, 0, AccessKind::Read).unwrap();
        assert_eq!(ev_val, 0xAB);
        assert!(m.log[0].in_buffer);
    }

    #[test]
    fn write_to_readonly_faults() {
        let mut m = image();
        let err = m.write(0x3000, 1, 0, 0, AccessKind::Write).unwrap_err();
        assert!(err.write);
        assert!(m.log.is_empty());
    }

    #[test]
    fn unmapped_access_faults() {
        let mut m = image();
        assert!(m.read(0x9000, 4, 0, AccessKind::Read).is_err());
        // Access straddling the end of a region also faults.
        assert!(m.read(0x100E, 4, 0, AccessKind::Read).is_err());
    }

    #[test]
    fn shared_buffer_copies_on_write() {
        let shared = Arc::new(vec![0x11u8; 8]);
        let mut a = MemoryImage::new(vec![Region::shared(0x1000, RegionKind::Buffer, true, shared.clone())]);
        a.write(0x1000, 1, 0x99, 0, AccessKind::Write).unwrap();
        assert_eq!(a.peek(0x1000), Some(0x99));
        assert_eq!(shared[0], 0x11);
    }

    #[test]
    fn zeroed_stack_reads_zero_before_any_write() {
        let mut m = image();
        assert_eq!(m.read(0x2010, 4, 0, AccessKind::Read).unwrap(), 0);
    }

    #[test]
    fn scratch_allocation_avoids_existing_regions() {
        let mut m = image();
        let a = m.alloc_scratch();
        let b = m.alloc_scratch();
        assert_ne!(a, b);
        assert!(m.region_at(a).is_some());
        assert!(m.region_at(b).is_some());
    }
}
