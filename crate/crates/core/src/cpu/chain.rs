//! Runs one candidate chain: a fresh CPU plus a private copy-on-write view
//! of the buffer, stepped from one entry offset until something stops it.

use std::collections::hash_map::DefaultHasher;
use std::collections::VecDeque;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::exec::{step, ControlRecord, ExecCtx, RDTSC_TICKS_PER_INSN};
use super::memory::{AccessEvent, MemoryImage};
use super::state::{init_state, CpuState, InitPolicy, MemoryLayout};

pub use super::exec::TerminationReason;

/// Windows XP SP2 service numbers from the syscall-copy evasion; both are
/// configurable because they are build-specific.
pub const DEFAULT_SYSCALL_ALLOC: u32 = 0x11;
pub const DEFAULT_SYSCALL_COPY: u32 = 0xBA;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainConfig {
    /// Hard cap on retired instructions (REP iterations count individually).
    pub instruction_budget: u32,
    /// Rolling (eip, state-hash) window for cycle detection; 0 disables it.
    pub loop_guard_window: usize,
    pub policy: InitPolicy,
    pub layout: MemoryLayout,
    pub syscall_model: bool,
    pub syscall_alloc: u32,
    pub syscall_copy: u32,
    /// Pre-seed `[esp]` with a sentinel so a final RET ends the chain as
    /// `clean_return` instead of a fault. Off for scanning; used by tests.
    pub seed_return_sentinel: bool,
}

impl Default for ChainConfig {
    fn default() -> ChainConfig {
        ChainConfig {
            instruction_budget: 8192,
            loop_guard_window: 64,
            policy: InitPolicy::Zeroed,
            layout: MemoryLayout::default(),
            syscall_model: false,
            syscall_alloc: DEFAULT_SYSCALL_ALLOC,
            syscall_copy: DEFAULT_SYSCALL_COPY,
            seed_return_sentinel: false,
        }
    }
}

/// Address used when `seed_return_sentinel` is on; lives outside every region.
pub const RETURN_SENTINEL: u32 = 0xFFF0_0000;

/// Address-space facts the detector needs to interpret a trace.
#[derive(Debug, Copy, Clone, Eq, PartialEq, Serialize, Deserialize)]
pub struct TraceLayout {
    pub buffer_base: u32,
    pub buffer_len: u32,
    pub stack_base: u32,
    pub stack_top: u32,
    pub fs_base: u32,
}

impl TraceLayout {
    pub fn in_buffer(&self, addr: u32) -> bool {
        addr >= self.buffer_base
            && u64::from(addr) < u64::from(self.buffer_base) + u64::from(self.buffer_len)
    }

    pub fn in_stack(&self, addr: u32) -> bool {
        addr >= self.stack_base && addr < self.stack_top
    }
}

/// Everything one chain did, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionTrace {
    pub entry_offset: u32,
    pub layout: TraceLayout,
    pub events: Vec<AccessEvent>,
    pub control: Vec<ControlRecord>,
    pub retired: u32,
    pub termination: TerminationReason,
    /// Synthetic elapsed time (same clock RDTSC exposes to the chain), kept
    /// instead of wall time so traces stay byte-comparable.
    pub virtual_ticks: u64,
}

/// Trace plus final machine state, for callers that inspect memory.
#[derive(Debug)]
pub struct ChainOutcome {
    pub trace: ExecutionTrace,
    pub state: CpuState,
    pub memory: MemoryImage,
}

/// Cycle detector over exact (eip, register/flag-hash) recurrences.
///
/// Memory is deliberately excluded from the hash: a counted loop that makes
/// progress through registers is not an endless loop, and the instruction
/// budget stays as the backstop for everything this misses.
#[derive(Debug)]
pub struct LoopGuard {
    window: usize,
    seen: VecDeque<(u32, u64)>,
}

#[derive(Debug, Copy, Clone, Eq, PartialEq)]
pub enum LoopCheck {
    Continue,
    LoopDetected,
}

impl LoopGuard {
    pub fn new(window: usize) -> LoopGuard {
        LoopGuard { window, seen: VecDeque::with_capacity(window.min(1024)) }
    }

    pub fn state_hash(state: &CpuState) -> u64 {
        let mut h = DefaultHasher::new();
        state.regs.hash(&mut h);
        state.flags.hash(&mut h);
        state.fpu_last_ip.hash(&mut h);
        h.finish()
    }

    /// Feed the pre-execution state of the next instruction.
    pub fn check(&mut self, eip: u32, state_hash: u64) -> LoopCheck {
        if self.window == 0 {
            return LoopCheck::Continue;
        }
        let pair = (eip, state_hash);
        if self.seen.contains(&pair) {
            return LoopCheck::LoopDetected;
        }
        if self.seen.len() == self.window {
            self.seen.pop_front();
        }
        self.seen.push_back(pair);
        LoopCheck::Continue
    }
}

/// Emulates one chain starting at `buffer[entry_offset]`.
///
/// The buffer is shared read-only and copied only if the chain writes to it,
/// so chains never observe each other's effects and the call is safe from
/// any number of threads.
pub fn run_chain(buffer: &Arc<Vec<u8>>, entry_offset: u32, config: &ChainConfig) -> ChainOutcome {
    debug_assert!((entry_offset as usize) < buffer.len().max(1));
    let (mut state, mut memory) =
        init_state(&config.policy, &config.layout, Arc::clone(buffer)).expect("chain layout invalid");
    state.eip = config.layout.buffer_base.wrapping_add(entry_offset);

    let mut ctx = ExecCtx {
        retired: 0,
        syscall_model: config.syscall_model,
        syscall_alloc: config.syscall_alloc,
        syscall_copy: config.syscall_copy,
        return_sentinel: config.seed_return_sentinel.then_some(RETURN_SENTINEL),
        stack_base: config.layout.stack_base(),
        stack_top: config.layout.stack_top,
    };
    if config.seed_return_sentinel {
        memory
            .poke_range(state.esp(), &RETURN_SENTINEL.to_le_bytes())
            .expect("esp points into the stack after init");
    }

    let mut guard = LoopGuard::new(config.loop_guard_window);
    let mut control = Vec::new();
    let termination = loop {
        if ctx.retired >= config.instruction_budget {
            break TerminationReason::BudgetExhausted;
        }
        if guard.check(state.eip, LoopGuard::state_hash(&state)) == LoopCheck::LoopDetected {
            break TerminationReason::LoopDetected;
        }
        let out = step(&mut state, &mut memory, &ctx);
        if out.executed {
            // An instruction that faulted mid-way still retired.
            ctx.retired += 1;
        }
        if let Some(rec) = out.control {
            control.push(rec);
        }
        if let Some(reason) = out.terminated {
            break reason;
        }
    };

    let layout = TraceLayout {
        buffer_base: config.layout.buffer_base,
        buffer_len: buffer.len() as u32,
        stack_base: config.layout.stack_base(),
        stack_top: config.layout.stack_top,
        fs_base: state.fs_base,
    };
    let retired = ctx.retired;
    let events = std::mem::take(&mut memory.log);
    let trace = ExecutionTrace {
        entry_offset,
        layout,
        events,
        control,
        retired,
        termination,
        virtual_ticks: u64::from(retired) * RDTSC_TICKS_PER_INSN,
    };
    ChainOutcome { trace, state, memory }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(code: &[u8], config: &ChainConfig) -> ChainOutcome {
        run_chain(&Arc::new(code.to_vec()), 0, config)
    }

    #[test]
    fn single_ret_faults_without_seeded_return() {
        let out = run(&[0xC3], &ChainConfig::default());
        assert_eq!(out.trace.termination, TerminationReason::MemoryFault);
        assert_eq!(out.trace.retired, 1);
    }

    #[test]
    fn single_ret_with_sentinel_returns_cleanly() {
        let config = ChainConfig { seed_return_sentinel: true, ..ChainConfig::default() };
        let out = run(&[0xC3], &config);
        assert_eq!(out.trace.termination, TerminationReason::CleanReturn);
        assert_eq!(out.trace.retired, 1);
    }

    #[test]
    fn jmp_self_is_detected_on_second_visit() {
        // eb fe    jmp $-0
        let out = run(&[0xEB, 0xFE], &ChainConfig::default());
        assert_eq!(out.trace.termination, TerminationReason::LoopDetected);
        assert_eq!(out.trace.retired, 1);
    }

    #[test]
    fn counted_loop_exhausts_budget_not_loop_guard() {
        // b9 40 42 0f 00    mov ecx, 1000000
        // e2 fe             loop $-0
        let out = run(&[0xB9, 0x40, 0x42, 0x0F, 0x00, 0xE2, 0xFE], &ChainConfig::default());
        assert_eq!(out.trace.termination, TerminationReason::BudgetExhausted);
        assert_eq!(out.trace.retired, ChainConfig::default().instruction_budget);
    }

    #[test]
    fn straight_line_code_never_trips_the_guard() {
        let mut code = vec![0x90u8; 200];
        code.push(0xC3);
        let out = run(&code, &ChainConfig::default());
        assert_eq!(out.trace.termination, TerminationReason::MemoryFault);
        assert_eq!(out.trace.retired, 201);
    }

    #[test]
    fn chains_are_deterministic() {
        let code: Vec<u8> = (0..255u8).collect();
        let buffer = Arc::new(code);
        let config = ChainConfig::default();
        for offset in [0u32, 3, 17, 254] {
            let a = run_chain(&buffer, offset, &config);
            let b = run_chain(&buffer, offset, &config);
            assert_eq!(a.trace, b.trace);
        }
    }

    #[test]
    fn chains_do_not_observe_each_others_writes() {
        // c6 05 <buf> 41   mov byte [buf], 0x41  — chain 0 rewrites offset 0
        let layout = MemoryLayout::default();
        let b = layout.buffer_base;
        let code = vec![
            0xC6, 0x05, b as u8, (b >> 8) as u8, (b >> 16) as u8, (b >> 24) as u8, 0x41, 0x90,
        ];
        let buffer = Arc::new(code);
        let config = ChainConfig::default();
        let first = run_chain(&buffer, 0, &config);
        assert_eq!(first.memory.peek(b), Some(0x41));
        // The shared buffer and later chains still see the original byte.
        assert_eq!(buffer[0], 0xC6);
        let second = run_chain(&buffer, 0, &config);
        assert_eq!(second.trace, first.trace);
    }

    #[test]
    fn budget_is_an_exact_ceiling() {
        let config = ChainConfig { instruction_budget: 7, ..ChainConfig::default() };
        let out = run(&[0x90; 64], &config);
        assert_eq!(out.trace.termination, TerminationReason::BudgetExhausted);
        assert_eq!(out.trace.retired, 7);
    }
}
