//! Single-instruction execution over [`CpuState`] and [`MemoryImage`].
//!
//! `step` executes exactly one instruction (one iteration, for REP string
//! forms) and reports either a control-flow record the detector cares about
//! or a termination reason. All partial failure modes are normal chain
//! outcomes, never panics.

use serde::{Deserialize, Serialize};

use super::decode::{
    decode_instruction, Cond, DecodeError, MemOperand, Mnemonic, Operand, Reg, Reg8,
};
use super::memory::{AccessKind, MemFault, MemoryImage};
use super::state::CpuState;

/// Why a chain stopped. Every trace carries exactly one of these.
#[derive(Debug, Copy, Clone, Eq, PartialEq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    BudgetExhausted,
    DecodeError,
    MemoryFault,
    LoopDetected,
    CleanReturn,
    UnmodeledInstruction,
    SyscallUnmodeled,
}

impl TerminationReason {
    pub fn name(self) -> &'static str {
        match self {
            TerminationReason::BudgetExhausted => "budget_exhausted",
            TerminationReason::DecodeError => "decode_error",
            TerminationReason::MemoryFault => "memory_fault",
            TerminationReason::LoopDetected => "loop_detected",
            TerminationReason::CleanReturn => "clean_return",
            TerminationReason::UnmodeledInstruction => "unmodeled_instruction",
            TerminationReason::SyscallUnmodeled => "syscall_unmodeled",
        }
    }
}

/// Control-flow facts recorded for the GetPC detector. `log_pos` is the
/// access-log length right after the instruction executed, so "events after
/// this record" is exactly `log[log_pos..]`.
#[derive(Debug, Copy, Clone, Eq, PartialEq)]
pub enum ControlRecord {
    Call {
        indirect: bool,
        at_eip: u32,
        dest: u32,
        ret_addr: u32,
        /// Stack slot the return address was written to.
        ret_slot: u32,
        log_pos: usize,
        retired: u32,
    },
    /// FNSTENV stored an FPU environment.
    EnvStore {
        at_eip: u32,
        env_addr: u32,
        saved_ip: u32,
        log_pos: usize,
        retired: u32,
    },
}

/// Per-chain execution context that is not architectural state.
#[derive(Debug, Clone)]
pub struct ExecCtx {
    /// Instructions retired before the current step (drives RDTSC).
    pub retired: u32,
    pub syscall_model: bool,
    pub syscall_alloc: u32,
    pub syscall_copy: u32,
    /// When set, RET to this address terminates with `CleanReturn`.
    pub return_sentinel: Option<u32>,
    /// Stack bounds for the post-step ESP invariant: `[base, top]` inclusive
    /// of the empty-stack position.
    pub stack_base: u32,
    pub stack_top: u32,
}

#[derive(Debug, Default)]
pub struct StepOutcome {
    pub control: Option<ControlRecord>,
    pub terminated: Option<TerminationReason>,
    /// False when the chain stopped before an instruction ran (fetch or
    /// decode failure); such steps do not retire.
    pub executed: bool,
}

impl StepOutcome {
    fn end(reason: TerminationReason) -> StepOutcome {
        StepOutcome { control: None, terminated: Some(reason), executed: true }
    }

    fn abort(reason: TerminationReason) -> StepOutcome {
        StepOutcome { control: None, terminated: Some(reason), executed: false }
    }
}

/// RDTSC advances this many synthetic ticks per retired instruction.
pub const RDTSC_TICKS_PER_INSN: u64 = 40;

fn mask(size: u8) -> u32 {
    match size {
        1 => 0xFF,
        2 => 0xFFFF,
        _ => 0xFFFF_FFFF,
    }
}

fn sign_bit(size: u8) -> u32 {
    match size {
        1 => 0x80,
        2 => 0x8000,
        _ => 0x8000_0000,
    }
}

fn operand_size(op: &Operand) -> u8 {
    match op {
        Operand::Reg32(_) => 4,
        Operand::Reg16(_) => 2,
        Operand::Reg8(_) => 1,
        Operand::Mem(m) => m.size,
        Operand::Imm(_) | Operand::Rel(_) => 4,
    }
}

struct Machine<'a> {
    st: &'a mut CpuState,
    mem: &'a mut MemoryImage,
    at_eip: u32,
}

impl<'a> Machine<'a> {
    fn effective_addr(&self, m: &MemOperand) -> u32 {
        let mut ea = m.disp as u32;
        if let Some(b) = m.base {
            ea = ea.wrapping_add(self.st.reg(b));
        }
        if let Some((idx, scale)) = m.index {
            ea = ea.wrapping_add(self.st.reg(idx).wrapping_mul(u32::from(scale)));
        }
        if m.fs {
            ea = ea.wrapping_add(self.st.fs_base);
        }
        ea
    }

    fn read_reg8(&self, r: Reg8) -> u32 {
        let v = self.st.reg(r.parent());
        if r.is_high() {
            (v >> 8) & 0xFF
        } else {
            v & 0xFF
        }
    }

    fn write_reg8(&mut self, r: Reg8, val: u32) {
        let p = r.parent();
        let old = self.st.reg(p);
        let new = if r.is_high() {
            (old & 0xFFFF_00FF) | ((val & 0xFF) << 8)
        } else {
            (old & 0xFFFF_FF00) | (val & 0xFF)
        };
        self.st.set_reg(p, new);
    }

    fn read_operand(&mut self, op: &Operand) -> Result<u32, MemFault> {
        Ok(match op {
            Operand::Reg32(r) => self.st.reg(*r),
            Operand::Reg16(r) => self.st.reg(*r) & 0xFFFF,
            Operand::Reg8(r) => self.read_reg8(*r),
            Operand::Imm(v) => *v,
            Operand::Mem(m) => {
                let ea = self.effective_addr(m);
                self.mem.read(ea, m.size, self.at_eip, AccessKind::Read)?
            }
            Operand::Rel(_) => unreachable!("relative operand read as data"),
        })
    }

    fn write_operand(&mut self, op: &Operand, val: u32) -> Result<(), MemFault> {
        match op {
            Operand::Reg32(r) => self.st.set_reg(*r, val),
            Operand::Reg16(r) => {
                let old = self.st.reg(*r);
                self.st.set_reg(*r, (old & 0xFFFF_0000) | (val & 0xFFFF));
            }
            Operand::Reg8(r) => self.write_reg8(*r, val),
            Operand::Mem(m) => {
                let ea = self.effective_addr(m);
                self.mem.write(ea, m.size, val & mask(m.size), self.at_eip, AccessKind::Write)?;
            }
            Operand::Imm(_) | Operand::Rel(_) => unreachable!("immediate as destination"),
        }
        Ok(())
    }

    fn push(&mut self, val: u32) -> Result<u32, MemFault> {
        let esp = self.st.esp().wrapping_sub(4);
        self.mem.write(esp, 4, val, self.at_eip, AccessKind::Write)?;
        self.st.set_reg(Reg::Esp, esp);
        Ok(esp)
    }

    fn pop(&mut self) -> Result<u32, MemFault> {
        let esp = self.st.esp();
        let val = self.mem.read(esp, 4, self.at_eip, AccessKind::Read)?;
        self.st.set_reg(Reg::Esp, esp.wrapping_add(4));
        Ok(val)
    }

    fn logic_flags(&mut self, size: u8, result: u32) {
        let r = result & mask(size);
        self.st.flags.cf = false;
        self.st.flags.of = false;
        self.st.flags.zf = r == 0;
        self.st.flags.sf = r & sign_bit(size) != 0;
    }

    fn add_flags(&mut self, size: u8, a: u32, b: u32) -> u32 {
        let m = mask(size);
        let wide = u64::from(a & m) + u64::from(b & m);
        let r = (wide as u32) & m;
        self.st.flags.cf = wide > u64::from(m);
        self.st.flags.of = (a ^ r) & (b ^ r) & sign_bit(size) != 0;
        self.st.flags.zf = r == 0;
        self.st.flags.sf = r & sign_bit(size) != 0;
        r
    }

    fn sub_flags(&mut self, size: u8, a: u32, b: u32) -> u32 {
        let m = mask(size);
        let (a, b) = (a & m, b & m);
        let r = a.wrapping_sub(b) & m;
        self.st.flags.cf = b > a;
        self.st.flags.of = (a ^ b) & (a ^ r) & sign_bit(size) != 0;
        self.st.flags.zf = r == 0;
        self.st.flags.sf = r & sign_bit(size) != 0;
        r
    }

    fn cond(&self, c: Cond) -> bool {
        let f = &self.st.flags;
        match c {
            Cond::O => f.of,
            Cond::No => !f.of,
            Cond::B => f.cf,
            Cond::Ae => !f.cf,
            Cond::E => f.zf,
            Cond::Ne => !f.zf,
            Cond::Be => f.cf || f.zf,
            Cond::A => !f.cf && !f.zf,
            Cond::S => f.sf,
            Cond::Ns => !f.sf,
            Cond::L => f.sf != f.of,
            Cond::Ge => f.sf == f.of,
            Cond::Le => f.zf || (f.sf != f.of),
            Cond::G => !f.zf && (f.sf == f.of),
        }
    }
}

/// FNSTENV 32-bit protected-mode environment image: FCW, FSW, FTW, FIP,
/// FCS+opcode, FDP, FDS.
fn fpu_env_words(saved_ip: u32) -> [u32; 7] {
    [0x0000_037F, 0, 0x0000_FFFF, saved_ip, 0, 0, 0]
}

/// Offset of the saved instruction pointer inside the stored environment.
pub const FPU_ENV_IP_OFFSET: u32 = 12;

/// Executes one instruction at `st.eip`.
pub fn step(st: &mut CpuState, mem: &mut MemoryImage, ctx: &ExecCtx) -> StepOutcome {
    let at_eip = st.eip;

    let mut window = [0u8; 16];
    let n = mem.fetch_window(at_eip, &mut window);
    if n == 0 {
        return StepOutcome::abort(TerminationReason::MemoryFault);
    }

    let insn = match decode_instruction(&window[..n], 0) {
        Ok(i) => i,
        Err(DecodeError::Unsupported { .. }) => {
            return StepOutcome::abort(TerminationReason::UnmodeledInstruction)
        }
        Err(_) => return StepOutcome::abort(TerminationReason::DecodeError),
    };

    let next_eip = at_eip.wrapping_add(u32::from(insn.length));
    let mut m = Machine { st, mem, at_eip };
    let mut outcome = StepOutcome::default();
    let mut eip_after = next_eip;

    macro_rules! try_mem {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(_) => return StepOutcome::end(TerminationReason::MemoryFault),
            }
        };
    }

    match insn.mnemonic {
        Mnemonic::Nop | Mnemonic::Fwait => {}

        Mnemonic::Mov => {
            let src = insn.src.as_ref().unwrap();
            let dst = insn.dst.as_ref().unwrap();
            let v = try_mem!(m.read_operand(src));
            try_mem!(m.write_operand(dst, v));
        }

        Mnemonic::Lea => {
            let (dst, src) = (insn.dst.unwrap(), insn.src.unwrap());
            let Operand::Mem(mo) = src else { unreachable!() };
            // LEA yields the plain offset; segment overrides do not apply.
            let ea = m.effective_addr(&MemOperand { fs: false, ..mo });
            try_mem!(m.write_operand(&dst, ea));
        }

        Mnemonic::Push => {
            let v = try_mem!(m.read_operand(insn.dst.as_ref().unwrap()));
            try_mem!(m.push(v));
        }

        Mnemonic::Pop => {
            let v = try_mem!(m.pop());
            try_mem!(m.write_operand(insn.dst.as_ref().unwrap(), v));
        }

        Mnemonic::Xchg => {
            let (a, b) = (insn.dst.unwrap(), insn.src.unwrap());
            let va = try_mem!(m.read_operand(&a));
            let vb = try_mem!(m.read_operand(&b));
            try_mem!(m.write_operand(&a, vb));
            try_mem!(m.write_operand(&b, va));
        }

        Mnemonic::Add | Mnemonic::Or | Mnemonic::And | Mnemonic::Sub | Mnemonic::Xor => {
            let (dst, src) = (insn.dst.unwrap(), insn.src.unwrap());
            let size = operand_size(&dst);
            let a = try_mem!(m.read_operand(&dst));
            let b = try_mem!(m.read_operand(&src));
            let r = match insn.mnemonic {
                Mnemonic::Add => m.add_flags(size, a, b),
                Mnemonic::Sub => m.sub_flags(size, a, b),
                Mnemonic::Or => {
                    let r = (a | b) & mask(size);
                    m.logic_flags(size, r);
                    r
                }
                Mnemonic::And => {
                    let r = (a & b) & mask(size);
                    m.logic_flags(size, r);
                    r
                }
                _ => {
                    let r = (a ^ b) & mask(size);
                    m.logic_flags(size, r);
                    r
                }
            };
            try_mem!(m.write_operand(&dst, r));
        }

        Mnemonic::Cmp => {
            let (dst, src) = (insn.dst.unwrap(), insn.src.unwrap());
            let size = operand_size(&dst);
            let a = try_mem!(m.read_operand(&dst));
            let b = try_mem!(m.read_operand(&src));
            m.sub_flags(size, a, b);
        }

        Mnemonic::Test => {
            let (dst, src) = (insn.dst.unwrap(), insn.src.unwrap());
            let size = operand_size(&dst);
            let a = try_mem!(m.read_operand(&dst));
            let b = try_mem!(m.read_operand(&src));
            m.logic_flags(size, (a & b) & mask(size));
        }

        Mnemonic::Inc | Mnemonic::Dec => {
            let dst = insn.dst.unwrap();
            let size = operand_size(&dst);
            let a = try_mem!(m.read_operand(&dst));
            let saved_cf = m.st.flags.cf;
            let r = if insn.mnemonic == Mnemonic::Inc {
                m.add_flags(size, a, 1)
            } else {
                m.sub_flags(size, a, 1)
            };
            m.st.flags.cf = saved_cf; // INC/DEC leave CF alone
            try_mem!(m.write_operand(&dst, r));
        }

        Mnemonic::Not => {
            let dst = insn.dst.unwrap();
            let size = operand_size(&dst);
            let a = try_mem!(m.read_operand(&dst));
            try_mem!(m.write_operand(&dst, !a & mask(size)));
        }

        Mnemonic::Neg => {
            let dst = insn.dst.unwrap();
            let size = operand_size(&dst);
            let a = try_mem!(m.read_operand(&dst));
            let r = m.sub_flags(size, 0, a);
            try_mem!(m.write_operand(&dst, r));
        }

        Mnemonic::Jmp => {
            let Operand::Rel(rel) = insn.dst.unwrap() else { unreachable!() };
            eip_after = next_eip.wrapping_add(rel as u32);
        }

        Mnemonic::JmpInd => {
            let v = try_mem!(m.read_operand(insn.dst.as_ref().unwrap()));
            eip_after = v;
        }

        Mnemonic::Jcc(c) => {
            let Operand::Rel(rel) = insn.dst.unwrap() else { unreachable!() };
            if m.cond(c) {
                eip_after = next_eip.wrapping_add(rel as u32);
            }
        }

        Mnemonic::Call => {
            let Operand::Rel(rel) = insn.dst.unwrap() else { unreachable!() };
            let dest = next_eip.wrapping_add(rel as u32);
            let ret_slot = try_mem!(m.push(next_eip));
            eip_after = dest;
            outcome.control = Some(ControlRecord::Call {
                indirect: false,
                at_eip,
                dest,
                ret_addr: next_eip,
                ret_slot,
                log_pos: m.mem.log.len(),
                retired: ctx.retired,
            });
        }

        Mnemonic::CallInd => {
            // Target is evaluated before the return address is pushed, so
            // `call esp` goes to the pre-push stack pointer.
            let dest = try_mem!(m.read_operand(insn.dst.as_ref().unwrap()));
            let ret_slot = try_mem!(m.push(next_eip));
            eip_after = dest;
            outcome.control = Some(ControlRecord::Call {
                indirect: true,
                at_eip,
                dest,
                ret_addr: next_eip,
                ret_slot,
                log_pos: m.mem.log.len(),
                retired: ctx.retired,
            });
        }

        Mnemonic::Ret => {
            let target = try_mem!(m.pop());
            if let Some(Operand::Imm(extra)) = insn.dst {
                let esp = m.st.esp().wrapping_add(extra);
                m.st.set_reg(Reg::Esp, esp);
            }
            if ctx.return_sentinel == Some(target) {
                return StepOutcome::end(TerminationReason::CleanReturn);
            }
            eip_after = target;
        }

        Mnemonic::Loop => {
            let Operand::Rel(rel) = insn.dst.unwrap() else { unreachable!() };
            let ecx = m.st.reg(Reg::Ecx).wrapping_sub(1);
            m.st.set_reg(Reg::Ecx, ecx);
            if ecx != 0 {
                eip_after = next_eip.wrapping_add(rel as u32);
            }
        }

        Mnemonic::Stosb | Mnemonic::Movsb | Mnemonic::Lodsb => {
            let rep = insn.rep;
            let ecx = m.st.reg(Reg::Ecx);
            if rep && ecx == 0 {
                // Zero-count REP retires without touching memory.
            } else {
                match insn.mnemonic {
                    Mnemonic::Stosb => {
                        let al = m.read_reg8(Reg8::Al);
                        let edi = m.st.reg(Reg::Edi);
                        try_mem!(m.mem.write(edi, 1, al, at_eip, AccessKind::Write));
                        m.st.set_reg(Reg::Edi, edi.wrapping_add(1));
                    }
                    Mnemonic::Movsb => {
                        let esi = m.st.reg(Reg::Esi);
                        let edi = m.st.reg(Reg::Edi);
                        let b = try_mem!(m.mem.read(esi, 1, at_eip, AccessKind::Read));
                        try_mem!(m.mem.write(edi, 1, b, at_eip, AccessKind::Write));
                        m.st.set_reg(Reg::Esi, esi.wrapping_add(1));
                        m.st.set_reg(Reg::Edi, edi.wrapping_add(1));
                    }
                    _ => {
                        let esi = m.st.reg(Reg::Esi);
                        let b = try_mem!(m.mem.read(esi, 1, at_eip, AccessKind::Read));
                        m.write_reg8(Reg8::Al, b);
                        m.st.set_reg(Reg::Esi, esi.wrapping_add(1));
                    }
                }
                if rep {
                    let left = ecx.wrapping_sub(1);
                    m.st.set_reg(Reg::Ecx, left);
                    if left != 0 {
                        // Re-fetch on the next step: each iteration retires
                        // on its own and sees the latest bytes.
                        eip_after = at_eip;
                    }
                }
            }
        }

        Mnemonic::Fldz => {
            m.st.fpu_last_ip = at_eip;
        }

        Mnemonic::Fnstenv => {
            let Operand::Mem(mo) = insn.dst.unwrap() else { unreachable!() };
            let env_addr = m.effective_addr(&mo);
            let saved_ip = m.st.fpu_last_ip;
            for (i, word) in fpu_env_words(saved_ip).iter().enumerate() {
                try_mem!(m.mem.write(
                    env_addr.wrapping_add(4 * i as u32),
                    4,
                    *word,
                    at_eip,
                    AccessKind::Write
                ));
            }
            outcome.control = Some(ControlRecord::EnvStore {
                at_eip,
                env_addr,
                saved_ip,
                log_pos: m.mem.log.len(),
                retired: ctx.retired,
            });
        }

        Mnemonic::Rdtsc => {
            let ticks = (u64::from(ctx.retired) + 1) * RDTSC_TICKS_PER_INSN;
            m.st.set_reg(Reg::Eax, ticks as u32);
            m.st.set_reg(Reg::Edx, (ticks >> 32) as u32);
        }

        Mnemonic::Sysenter => {
            if !ctx.syscall_model {
                return StepOutcome::end(TerminationReason::SyscallUnmodeled);
            }
            let service = m.st.reg(Reg::Eax);
            let edx = m.st.reg(Reg::Edx);
            let resume = try_mem!(m.mem.read(edx, 4, at_eip, AccessKind::SyscallRead));
            if service == ctx.syscall_alloc {
                // ZwAllocateVirtualMemory-shaped: arg block is
                // [ret, ret, handle, base_ptr, zero_bits, size_ptr, type, prot].
                let out_ptr = try_mem!(m.mem.read(edx.wrapping_add(12), 4, at_eip, AccessKind::SyscallRead));
                let base = m.mem.alloc_scratch();
                try_mem!(m.mem.write(out_ptr, 4, base, at_eip, AccessKind::SyscallWrite));
            } else if service == ctx.syscall_copy {
                // ZwReadVirtualMemory-shaped: [ret, ret, handle, src, dst, len, out_len_ptr].
                let src = try_mem!(m.mem.read(edx.wrapping_add(12), 4, at_eip, AccessKind::SyscallRead));
                let dst = try_mem!(m.mem.read(edx.wrapping_add(16), 4, at_eip, AccessKind::SyscallRead));
                let len = try_mem!(m.mem.read(edx.wrapping_add(20), 4, at_eip, AccessKind::SyscallRead));
                let len = len.min(super::memory::SCRATCH_LEN);
                // The kernel does the copying; the chain's instruction
                // stream never issues these reads itself.
                for i in 0..len {
                    let b = try_mem!(m.mem.read(src.wrapping_add(i), 1, at_eip, AccessKind::SyscallRead));
                    try_mem!(m.mem.write(dst.wrapping_add(i), 1, b, at_eip, AccessKind::SyscallWrite));
                }
            } else {
                return StepOutcome::end(TerminationReason::SyscallUnmodeled);
            }
            m.st.set_reg(Reg::Eax, 0);
            m.st.set_reg(Reg::Esp, edx.wrapping_add(8));
            eip_after = resume;
        }

        Mnemonic::Int => {
            return StepOutcome::end(TerminationReason::SyscallUnmodeled);
        }
    }

    st.eip = eip_after;

    // ESP invariant: a step that parks the stack pointer outside the stack
    // region (one-past-the-end allowed) is a fault.
    let esp = st.esp();
    if esp < ctx.stack_base || esp > ctx.stack_top {
        return StepOutcome::end(TerminationReason::MemoryFault);
    }

    outcome.executed = true;
    outcome
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::cpu::state::{init_state, InitPolicy, MemoryLayout};

    fn setup(code: &[u8]) -> (CpuState, MemoryImage, ExecCtx) {
        let layout = MemoryLayout::default();
        let (st, mem) = init_state(&InitPolicy::Zeroed, &layout, Arc::new(code.to_vec())).unwrap();
        let ctx = ExecCtx {
            retired: 0,
            syscall_model: false,
            syscall_alloc: 0x11,
            syscall_copy: 0xBA,
            return_sentinel: None,
            stack_base: layout.stack_base(),
            stack_top: layout.stack_top,
        };
        (st, mem, ctx)
    }

    fn run_steps(st: &mut CpuState, mem: &mut MemoryImage, ctx: &mut ExecCtx, n: usize) {
        for _ in 0..n {
            let out = step(st, mem, ctx);
            assert_eq!(out.terminated, None, "unexpected termination");
            ctx.retired += 1;
        }
    }

    #[test]
    fn nop_advances_without_events() {
        let (mut st, mut mem, ctx) = setup(&[0x90]);
        let base = st.eip;
        let out = step(&mut st, &mut mem, &ctx);
        assert!(out.terminated.is_none());
        assert_eq!(st.eip, base + 1);
        assert!(mem.log.is_empty());
    }

    #[test]
    fn xor_eax_eax_sets_flags() {
        // 31 c0    xor eax, eax
        let (mut st, mut mem, ctx) = setup(&[0x31, 0xC0]);
        st.set_reg(Reg::Eax, 0x1234_5678);
        step(&mut st, &mut mem, &ctx);
        assert_eq!(st.reg(Reg::Eax), 0);
        assert!(st.flags.zf);
        assert!(!st.flags.sf);
        assert!(!st.flags.cf);
    }

    #[test]
    fn call_pop_recovers_own_address() {
        // e8 00 00 00 00   call +0
        // 5e               pop esi
        let (mut st, mut mem, mut ctx) = setup(&[0xE8, 0x00, 0x00, 0x00, 0x00, 0x5E]);
        let entry = st.eip;
        run_steps(&mut st, &mut mem, &mut ctx, 2);
        assert_eq!(st.reg(Reg::Esi), entry + 5);
    }

    #[test]
    fn call_pushes_following_address() {
        let (mut st, mut mem, ctx) = setup(&[0xE8, 0x00, 0x00, 0x00, 0x00, 0x5E]);
        let entry = st.eip;
        let esp0 = st.esp();
        let out = step(&mut st, &mut mem, &ctx);
        let Some(ControlRecord::Call { dest, ret_addr, ret_slot, indirect, .. }) = out.control
        else {
            panic!("missing call record");
        };
        assert!(!indirect);
        assert_eq!(dest, entry + 5);
        assert_eq!(ret_addr, entry + 5);
        assert_eq!(ret_slot, esp0 - 4);
        assert_eq!(mem.read(ret_slot, 4, 0, AccessKind::Read).unwrap(), entry + 5);
    }

    #[test]
    fn listing_one_indirect_call_leaves_esi_after_call() {
        // 68 5e 56 90 c3   push 0xc390565e   ; pop esi / push esi / nop / ret
        // ff d4            call esp
        let code = [0x68, 0x5E, 0x56, 0x90, 0xC3, 0xFF, 0xD4];
        let (mut st, mut mem, mut ctx) = setup(&code);
        let entry = st.eip;
        // push imm; call esp; pop esi; push esi; nop; ret
        run_steps(&mut st, &mut mem, &mut ctx, 6);
        assert_eq!(st.reg(Reg::Esi), entry + 7, "esi = first instruction after call esp");
        assert_eq!(st.eip, entry + 7, "ret resumes after the call");
    }

    #[test]
    fn fnstenv_stores_last_fpu_instruction_pointer() {
        // d9 ee            fldz
        // d9 74 24 f4      fnstenv [esp-0xc]
        // 58               pop eax
        let (mut st, mut mem, mut ctx) = setup(&[0xD9, 0xEE, 0xD9, 0x74, 0x24, 0xF4, 0x58]);
        let entry = st.eip;
        let esp0 = st.esp();
        run_steps(&mut st, &mut mem, &mut ctx, 3);
        // Saved IP field sits at env+12 = esp0, which is what POP reads.
        assert_eq!(st.reg(Reg::Eax), entry);
        assert_eq!(st.esp(), esp0 + 4);
    }

    #[test]
    fn fnstenv_without_prior_fpu_op_stores_zero() {
        let (mut st, mut mem, ctx) = setup(&[0xD9, 0x74, 0x24, 0xF4]);
        let esp0 = st.esp();
        step(&mut st, &mut mem, &ctx);
        assert_eq!(mem.read(esp0, 4, 0, AccessKind::Read).unwrap(), 0);
    }

    #[test]
    fn rdtsc_is_monotonic_and_deterministic() {
        let (mut st, mut mem, mut ctx) = setup(&[0x0F, 0x31, 0x0F, 0x31]);
        step(&mut st, &mut mem, &ctx);
        let first = st.reg(Reg::Eax);
        ctx.retired = 1;
        step(&mut st, &mut mem, &ctx);
        let second = st.reg(Reg::Eax);
        assert!(second > first);
        assert_eq!(u64::from(first), RDTSC_TICKS_PER_INSN);
    }

    #[test]
    fn sysenter_without_model_terminates() {
        let (mut st, mut mem, ctx) = setup(&[0x0F, 0x34]);
        let out = step(&mut st, &mut mem, &ctx);
        assert_eq!(out.terminated, Some(TerminationReason::SyscallUnmodeled));
    }

    #[test]
    fn int_terminates_as_unmodeled_syscall() {
        let (mut st, mut mem, ctx) = setup(&[0xCD, 0x80]);
        let out = step(&mut st, &mut mem, &ctx);
        assert_eq!(out.terminated, Some(TerminationReason::SyscallUnmodeled));
    }

    #[test]
    fn self_modifying_store_is_seen_by_next_fetch() {
        // c6 05 <buf+7> 40   mov byte [buf+7], 0x40  ; rewrites the nop below as inc eax
        // 90                 nop (offset 7, gets replaced before it is fetched)
        let layout = MemoryLayout::default();
        let b = layout.buffer_base;
        let code = vec![
            0xC6, 0x05,
            (b + 7) as u8, ((b + 7) >> 8) as u8, ((b + 7) >> 16) as u8, ((b + 7) >> 24) as u8,
            0x40,
            0x90,
        ];
        let (mut st, mem) = init_state(&InitPolicy::Zeroed, &layout, Arc::new(code)).unwrap();
        let mut mem = mem;
        let ctx = ExecCtx {
            retired: 0,
            syscall_model: false,
            syscall_alloc: 0x11,
            syscall_copy: 0xBA,
            return_sentinel: None,
            stack_base: layout.stack_base(),
            stack_top: layout.stack_top,
        };
        let eax0 = st.reg(Reg::Eax);
        step(&mut st, &mut mem, &ctx); // the store
        assert_eq!(mem.peek(b + 7), Some(0x40));
        step(&mut st, &mut mem, &ctx); // executes the overwritten byte: inc eax
        assert_eq!(st.reg(Reg::Eax), eax0 + 1);
    }

    #[test]
    fn rep_stosb_iterates_per_step() {
        // f3 aa    rep stosb
        let (mut st, mut mem, mut ctx) = setup(&[0xF3, 0xAA]);
        let entry = st.eip;
        st.set_reg(Reg::Ecx, 3);
        st.set_reg(Reg::Edi, st.esp() - 8);
        st.set_reg(Reg::Eax, 0x41);
        for left in [2u32, 1] {
            step(&mut st, &mut mem, &mut ctx.clone());
            assert_eq!(st.reg(Reg::Ecx), left);
            assert_eq!(st.eip, entry, "eip parked on the rep until the count runs out");
            ctx.retired += 1;
        }
        step(&mut st, &mut mem, &ctx);
        assert_eq!(st.reg(Reg::Ecx), 0);
        assert_eq!(st.eip, entry + 2);
        assert_eq!(mem.log.iter().filter(|e| e.kind == AccessKind::Write).count(), 3);
    }

    #[test]
    fn esp_leaving_the_stack_is_a_fault() {
        // bc 10 00 00 00    mov esp, 0x10
        let (mut st, mut mem, ctx) = setup(&[0xBC, 0x10, 0x00, 0x00, 0x00]);
        let out = step(&mut st, &mut mem, &ctx);
        assert_eq!(out.terminated, Some(TerminationReason::MemoryFault));
    }

    #[test]
    fn ret_to_sentinel_is_a_clean_return() {
        let (mut st, mut mem, mut ctx) = setup(&[0xC3]);
        ctx.return_sentinel = Some(0xFFF0_0000);
        mem.poke_range(st.esp(), &0xFFF0_0000u32.to_le_bytes()).unwrap();
        let out = step(&mut st, &mut mem, &ctx);
        assert_eq!(out.terminated, Some(TerminationReason::CleanReturn));
    }

    #[test]
    fn inc_preserves_carry() {
        // 31 c0  xor eax,eax ; f7 d8 neg eax(cf=0)... simpler: set cf via sub
        // b8 00 00 00 00   mov eax, 0
        // 48               dec eax        (wraps to ffffffff, cf must survive)
        let (mut st, mut mem, mut ctx) = setup(&[0xB8, 0x00, 0x00, 0x00, 0x00, 0x48]);
        st.flags.cf = true;
        run_steps(&mut st, &mut mem, &mut ctx, 2);
        assert_eq!(st.reg(Reg::Eax), 0xFFFF_FFFF);
        assert!(st.flags.cf, "dec must not clobber cf");
        assert!(st.flags.sf);
    }

    #[test]
    fn fs_segment_load_reads_tib() {
        // 64 a1 04 00 00 00    mov eax, fs:[4]
        let (mut st, mut mem, ctx) = setup(&[0x64, 0xA1, 0x04, 0x00, 0x00, 0x00]);
        step(&mut st, &mut mem, &ctx);
        assert_eq!(st.reg(Reg::Eax), MemoryLayout::default().stack_top);
        assert_eq!(mem.log.len(), 1);
        assert!(!mem.log[0].in_buffer);
    }
}
