//! Machine state and initialization policies.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::decode::Reg;
use super::memory::{MemoryImage, Region, RegionKind};

/// Arithmetic flags the emulator models. Parity/aux carry are not tracked.
#[derive(Debug, Copy, Clone, Default, Eq, PartialEq, Hash)]
pub struct Flags {
    pub cf: bool,
    pub zf: bool,
    pub sf: bool,
    pub of: bool,
}

/// Register file plus the few extra architectural bits the heuristic needs.
#[derive(Debug, Clone, Eq, PartialEq)]
pub struct CpuState {
    pub regs: [u32; 8],
    pub eip: u32,
    pub flags: Flags,
    /// Address of the most recent non-control FPU instruction, 0 if none.
    /// This is what FNSTENV stores as the saved instruction pointer.
    pub fpu_last_ip: u32,
    /// Base of the synthetic TIB reachable through the FS segment.
    pub fs_base: u32,
}

impl CpuState {
    pub fn reg(&self, r: Reg) -> u32 {
        self.regs[r.index()]
    }

    pub fn set_reg(&mut self, r: Reg, v: u32) {
        self.regs[r.index()] = v;
    }

    pub fn esp(&self) -> u32 {
        self.regs[Reg::Esp.index()]
    }
}

/// How the general registers are seeded before a chain runs.
#[derive(Debug, Copy, Clone, Eq, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Everything zero except ESP (libemu-style).
    Zeroed,
    /// Registers are a pure function of the seed; ESP still points at the
    /// stack top.
    Randomized { seed: u64 },
    /// Caller-provided register file. ESP must land inside the stack.
    Fixed { regs: [u32; 8] },
}

/// Where the synthetic address space places things.
#[derive(Debug, Copy, Clone, Eq, PartialEq, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub buffer_base: u32,
    /// Top of stack (exclusive); the region spans `[stack_top - stack_size, stack_top)`.
    pub stack_top: u32,
    pub stack_size: u32,
    pub tib_base: u32,
}

pub const DEFAULT_BUFFER_BASE: u32 = 0x0040_0000;
pub const DEFAULT_STACK_TOP: u32 = 0x0012_F000;
pub const DEFAULT_STACK_SIZE: u32 = 0x1_0000;
pub const DEFAULT_TIB_BASE: u32 = 0x7FFD_0000;
const TIB_LEN: u32 = 0x30;

/// ESP starts this far below the stack top in every policy.
pub const ESP_HEADROOM: u32 = 16;

impl Default for MemoryLayout {
    fn default() -> MemoryLayout {
        MemoryLayout {
            buffer_base: DEFAULT_BUFFER_BASE,
            stack_top: DEFAULT_STACK_TOP,
            stack_size: DEFAULT_STACK_SIZE,
            tib_base: DEFAULT_TIB_BASE,
        }
    }
}

impl MemoryLayout {
    pub fn stack_base(&self) -> u32 {
        self.stack_top - self.stack_size
    }
}

#[derive(Debug, Clone, Eq, PartialEq, Error)]
pub enum LayoutError {
    #[error("regions overlap: {0}")]
    Overlap(&'static str),
    #[error("stack size/top inconsistent")]
    BadStack,
    #[error("fixed-policy ESP {0:#010x} outside the stack region")]
    EspOutsideStack(u32),
}

fn ranges_overlap(a: (u64, u64), b: (u64, u64)) -> bool {
    a.0 < b.1 && b.0 < a.1
}

/// Builds the initial CPU state and memory image for one chain.
///
/// The TIB is populated so `fs:[0x04]` holds the stack top and `fs:[0x08]`
/// the stack bottom. The buffer is shared copy-on-write between chains.
pub fn init_state(
    policy: &InitPolicy,
    layout: &MemoryLayout,
    buffer: Arc<Vec<u8>>,
) -> Result<(CpuState, MemoryImage), LayoutError> {
    if layout.stack_size == 0 || layout.stack_size > layout.stack_top {
        return Err(LayoutError::BadStack);
    }
    let buf_range = (
        u64::from(layout.buffer_base),
        u64::from(layout.buffer_base) + buffer.len() as u64,
    );
    let stack_range = (u64::from(layout.stack_base()), u64::from(layout.stack_top));
    let tib_range = (u64::from(layout.tib_base), u64::from(layout.tib_base) + u64::from(TIB_LEN));
    if ranges_overlap(buf_range, stack_range) {
        return Err(LayoutError::Overlap("buffer/stack"));
    }
    if ranges_overlap(buf_range, tib_range) {
        return Err(LayoutError::Overlap("buffer/tib"));
    }
    if ranges_overlap(stack_range, tib_range) {
        return Err(LayoutError::Overlap("stack/tib"));
    }

    let mut tib = vec![0u8; TIB_LEN as usize];
    tib[4..8].copy_from_slice(&layout.stack_top.to_le_bytes());
    tib[8..12].copy_from_slice(&layout.stack_base().to_le_bytes());

    let memory = MemoryImage::new(vec![
        Region::shared(layout.buffer_base, RegionKind::Buffer, true, buffer),
        Region::zeroed(layout.stack_base(), layout.stack_size, RegionKind::Stack, true),
        Region::owned(layout.tib_base, RegionKind::Tib, false, tib),
    ]);

    let esp = layout.stack_top - ESP_HEADROOM;
    let mut regs = match policy {
        InitPolicy::Zeroed => [0u32; 8],
        InitPolicy::Randomized { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut r = [0u32; 8];
            for v in &mut r {
                *v = rng.gen();
            }
            r
        }
        InitPolicy::Fixed { regs } => {
            let esp_fixed = regs[Reg::Esp.index()];
            if esp_fixed < layout.stack_base() || esp_fixed > layout.stack_top {
                return Err(LayoutError::EspOutsideStack(esp_fixed));
            }
            *regs
        }
    };
    if !matches!(policy, InitPolicy::Fixed { .. }) {
        regs[Reg::Esp.index()] = esp;
    }

    let state = CpuState {
        regs,
        eip: layout.buffer_base,
        flags: Flags::default(),
        fpu_last_ip: 0,
        fs_base: layout.tib_base,
    };
    Ok((state, memory))
}
