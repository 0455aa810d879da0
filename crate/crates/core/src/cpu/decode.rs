//! IA-32 instruction decoding for the emulated subset.
//!
//! The decoder is a length-exact, flat-memory (32-bit operand/address size)
//! decoder for the instructions the corpus emits plus the GetPC idioms a
//! network payload is likely to carry. It never guesses: bytes outside the
//! subset come back as [`DecodeError::Unsupported`] (real IA-32 we chose not
//! to model) or [`DecodeError::InvalidOpcode`] (not valid IA-32 at all).

use thiserror::Error;

/// General purpose registers in encoding order.
#[derive(Debug, Copy, Clone, Eq, PartialEq, Hash)]
#[repr(u8)]
pub enum Reg {
    Eax = 0,
    Ecx = 1,
    Edx = 2,
    Ebx = 3,
    Esp = 4,
    Ebp = 5,
    Esi = 6,
    Edi = 7,
}

impl Reg {
    pub fn from_index(i: u8) -> Reg {
        match i & 7 {
            0 => Reg::Eax,
            1 => Reg::Ecx,
            2 => Reg::Edx,
            3 => Reg::Ebx,
            4 => Reg::Esp,
            5 => Reg::Ebp,
            6 => Reg::Esi,
            _ => Reg::Edi,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi"][self.index()]
    }
}

/// 8-bit registers in encoding order (AL..BH).
#[derive(Debug, Copy, Clone, Eq, PartialEq, Hash)]
#[repr(u8)]
pub enum Reg8 {
    Al = 0,
    Cl = 1,
    Dl = 2,
    Bl = 3,
    Ah = 4,
    Ch = 5,
    Dh = 6,
    Bh = 7,
}

impl Reg8 {
    pub fn from_index(i: u8) -> Reg8 {
        match i & 7 {
            0 => Reg8::Al,
            1 => Reg8::Cl,
            2 => Reg8::Dl,
            3 => Reg8::Bl,
            4 => Reg8::Ah,
            5 => Reg8::Ch,
            6 => Reg8::Dh,
            _ => Reg8::Bh,
        }
    }

    /// Parent 32-bit register (AL/AH -> EAX and so on).
    pub fn parent(self) -> Reg {
        Reg::from_index(self as u8 & 3)
    }

    pub fn is_high(self) -> bool {
        self as u8 >= 4
    }
}

/// Branch conditions over the modeled flags {CF, ZF, SF, OF}.
#[derive(Debug, Copy, Clone, Eq, PartialEq)]
pub enum Cond {
    O,
    No,
    B,
    Ae,
    E,
    Ne,
    Be,
    A,
    S,
    Ns,
    L,
    Ge,
    Le,
    G,
}

impl Cond {
    /// Maps the low nibble of a Jcc opcode; parity conditions (0xA/0xB) are
    /// not representable because PF is not modeled.
    fn from_nibble(n: u8) -> Option<Cond> {
        Some(match n {
            0x0 => Cond::O,
            0x1 => Cond::No,
            0x2 => Cond::B,
            0x3 => Cond::Ae,
            0x4 => Cond::E,
            0x5 => Cond::Ne,
            0x6 => Cond::Be,
            0x7 => Cond::A,
            0x8 => Cond::S,
            0x9 => Cond::Ns,
            0xC => Cond::L,
            0xD => Cond::Ge,
            0xE => Cond::Le,
            0xF => Cond::G,
            _ => return None,
        })
    }
}

/// A memory operand: `segment:[base + index*scale + disp]`.
#[derive(Debug, Copy, Clone, Eq, PartialEq)]
pub struct MemOperand {
    pub base: Option<Reg>,
    pub index: Option<(Reg, u8)>,
    pub disp: i32,
    /// Access width in bytes (1, 2 or 4).
    pub size: u8,
    /// FS segment override (effective address gets the TIB base added).
    pub fs: bool,
}

#[derive(Debug, Copy, Clone, Eq, PartialEq)]
pub enum Operand {
    Reg32(Reg),
    Reg16(Reg),
    Reg8(Reg8),
    /// Immediate, already sign/zero-extended to the operand width.
    Imm(u32),
    Mem(MemOperand),
    /// Relative branch displacement from the end of the instruction.
    Rel(i32),
}

#[derive(Debug, Copy, Clone, Eq, PartialEq)]
pub enum Mnemonic {
    Mov,
    Lea,
    Push,
    Pop,
    Xchg,
    Add,
    Or,
    And,
    Sub,
    Xor,
    Cmp,
    Test,
    Inc,
    Dec,
    Not,
    Neg,
    Nop,
    Jmp,
    JmpInd,
    Jcc(Cond),
    Call,
    CallInd,
    Ret,
    Loop,
    Stosb,
    Movsb,
    Lodsb,
    Fldz,
    Fnstenv,
    Fwait,
    Rdtsc,
    Sysenter,
    Int,
}

/// One decoded instruction. Decoding the same bytes always yields the same
/// value; no state is carried between calls.
#[derive(Debug, Copy, Clone, Eq, PartialEq)]
pub struct Instruction {
    pub mnemonic: Mnemonic,
    pub dst: Option<Operand>,
    pub src: Option<Operand>,
    pub length: u8,
    pub rep: bool,
}

impl Instruction {
    fn new(mnemonic: Mnemonic, length: u8) -> Instruction {
        Instruction { mnemonic, dst: None, src: None, length, rep: false }
    }

    fn with(mnemonic: Mnemonic, dst: Operand, src: Operand, length: u8) -> Instruction {
        Instruction { mnemonic, dst: Some(dst), src: Some(src), length, rep: false }
    }

    fn one(mnemonic: Mnemonic, dst: Operand, length: u8) -> Instruction {
        Instruction { mnemonic, dst: Some(dst), src: None, length, rep: false }
    }
}

#[derive(Debug, Clone, Eq, PartialEq, Error)]
pub enum DecodeError {
    /// Not valid IA-32 (or a byte pattern we cannot tell apart from garbage).
    #[error("invalid opcode {0:#04x}")]
    InvalidOpcode(u8),
    /// Recognizable IA-32 outside the emulated subset.
    #[error("unmodeled instruction (opcode {opcode:#04x}, two-byte: {two_byte})")]
    Unsupported { opcode: u8, two_byte: bool },
    /// Instruction would extend past the end of the byte window.
    #[error("truncated instruction")]
    Truncated,
}

const MAX_INSN_LEN: usize = 15;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u8(&mut self) -> Result<u8, DecodeError> {
        let b = *self.bytes.get(self.pos).ok_or(DecodeError::Truncated)?;
        self.pos += 1;
        if self.pos > MAX_INSN_LEN {
            return Err(DecodeError::InvalidOpcode(b));
        }
        Ok(b)
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from(self.u8()?) | (u16::from(self.u8()?) << 8))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        let mut v = 0u32;
        for shift in [0, 8, 16, 24] {
            v |= u32::from(self.u8()?) << shift;
        }
        Ok(v)
    }

    fn imm(&mut self, size: u8) -> Result<u32, DecodeError> {
        match size {
            1 => Ok(u32::from(self.u8()?)),
            2 => Ok(u32::from(self.u16()?)),
            _ => self.u32(),
        }
    }
}

struct Prefixes {
    rep: bool,
    osize: bool,
    fs: bool,
}

/// ModRM byte split plus the decoded r/m side.
struct ModRm {
    reg: u8,
    rm: RmSide,
}

enum RmSide {
    Reg(u8),
    Mem(MemOperand),
}

fn decode_modrm(cur: &mut Cursor, prefixes: &Prefixes, size: u8) -> Result<ModRm, DecodeError> {
    let modrm = cur.u8()?;
    let md = modrm >> 6;
    let reg = (modrm >> 3) & 7;
    let rm = modrm & 7;

    if md == 3 {
        return Ok(ModRm { reg, rm: RmSide::Reg(rm) });
    }

    let mut base = None;
    let mut index = None;
    let mut disp: i32 = 0;

    if rm == 4 {
        // SIB follows.
        let sib = cur.u8()?;
        let scale = 1u8 << (sib >> 6);
        let idx = (sib >> 3) & 7;
        let b = sib & 7;
        if idx != 4 {
            index = Some((Reg::from_index(idx), scale));
        }
        if b == 5 && md == 0 {
            disp = cur.u32()? as i32;
        } else {
            base = Some(Reg::from_index(b));
        }
    } else if rm == 5 && md == 0 {
        disp = cur.u32()? as i32;
    } else {
        base = Some(Reg::from_index(rm));
    }

    match md {
        1 => disp = disp.wrapping_add(cur.u8()? as i8 as i32),
        2 => disp = disp.wrapping_add(cur.u32()? as i32),
        _ => {}
    }

    Ok(ModRm { reg, rm: RmSide::Mem(MemOperand { base, index, disp, size, fs: prefixes.fs }) })
}

fn rm_operand(side: RmSide, size: u8) -> Operand {
    match side {
        RmSide::Mem(m) => Operand::Mem(m),
        RmSide::Reg(i) => reg_operand(i, size),
    }
}

fn reg_operand(i: u8, size: u8) -> Operand {
    match size {
        1 => Operand::Reg8(Reg8::from_index(i)),
        2 => Operand::Reg16(Reg::from_index(i)),
        _ => Operand::Reg32(Reg::from_index(i)),
    }
}

fn alu_mnemonic(n: u8) -> Option<Mnemonic> {
    Some(match n {
        0 => Mnemonic::Add,
        1 => Mnemonic::Or,
        4 => Mnemonic::And,
        5 => Mnemonic::Sub,
        6 => Mnemonic::Xor,
        7 => Mnemonic::Cmp,
        _ => return None, // ADC/SBB
    })
}

/// Decodes the instruction starting at `offset`.
///
/// Returns the decoded instruction or an error; `Instruction::length` is the
/// number of bytes consumed from `offset`.
pub fn decode_instruction(bytes: &[u8], offset: usize) -> Result<Instruction, DecodeError> {
    if offset >= bytes.len() {
        return Err(DecodeError::Truncated);
    }
    let mut cur = Cursor { bytes: &bytes[offset..], pos: 0 };
    let mut prefixes = Prefixes { rep: false, osize: false, fs: false };

    // Prefix loop. CS/DS/ES/SS overrides are neutral in a flat address space.
    let opcode = loop {
        let b = cur.u8()?;
        match b {
            0xF3 => prefixes.rep = true,
            0x66 => prefixes.osize = true,
            0x64 => prefixes.fs = true,
            0x26 | 0x2E | 0x36 | 0x3E => {}
            0x65 | 0x67 | 0xF0 | 0xF2 => {
                return Err(DecodeError::Unsupported { opcode: b, two_byte: false })
            }
            _ => break b,
        }
    };

    let osz: u8 = if prefixes.osize { 2 } else { 4 };

    let mut insn = match opcode {
        // ALU: 00/08/20/28/30/38 blocks, in the standard 6-form pattern.
        0x00..=0x3D if opcode & 7 <= 5 && alu_mnemonic(opcode >> 3).is_some() => {
            let mn = alu_mnemonic(opcode >> 3).unwrap();
            match opcode & 7 {
                0 => {
                    let m = decode_modrm(&mut cur, &prefixes, 1)?;
                    Instruction::with(mn, rm_operand(m.rm, 1), reg_operand(m.reg, 1), 0)
                }
                1 => {
                    let m = decode_modrm(&mut cur, &prefixes, osz)?;
                    Instruction::with(mn, rm_operand(m.rm, osz), reg_operand(m.reg, osz), 0)
                }
                2 => {
                    let m = decode_modrm(&mut cur, &prefixes, 1)?;
                    Instruction::with(mn, reg_operand(m.reg, 1), rm_operand(m.rm, 1), 0)
                }
                3 => {
                    let m = decode_modrm(&mut cur, &prefixes, osz)?;
                    Instruction::with(mn, reg_operand(m.reg, osz), rm_operand(m.rm, osz), 0)
                }
                4 => {
                    let imm = cur.imm(1)?;
                    Instruction::with(mn, Operand::Reg8(Reg8::Al), Operand::Imm(imm), 0)
                }
                _ => {
                    let imm = cur.imm(osz)?;
                    Instruction::with(mn, reg_operand(0, osz), Operand::Imm(imm), 0)
                }
            }
        }

        0x40..=0x47 => Instruction::one(Mnemonic::Inc, Operand::Reg32(Reg::from_index(opcode - 0x40)), 0),
        0x48..=0x4F => Instruction::one(Mnemonic::Dec, Operand::Reg32(Reg::from_index(opcode - 0x48)), 0),
        0x50..=0x57 => Instruction::one(Mnemonic::Push, Operand::Reg32(Reg::from_index(opcode - 0x50)), 0),
        0x58..=0x5F => Instruction::one(Mnemonic::Pop, Operand::Reg32(Reg::from_index(opcode - 0x58)), 0),

        0x68 => {
            let imm = cur.u32()?;
            Instruction::one(Mnemonic::Push, Operand::Imm(imm), 0)
        }
        0x6A => {
            let imm = cur.u8()? as i8 as i32 as u32;
            Instruction::one(Mnemonic::Push, Operand::Imm(imm), 0)
        }

        0x70..=0x7F => match Cond::from_nibble(opcode & 0xF) {
            Some(c) => {
                let rel = cur.u8()? as i8 as i32;
                Instruction::one(Mnemonic::Jcc(c), Operand::Rel(rel), 0)
            }
            None => return Err(DecodeError::Unsupported { opcode, two_byte: false }),
        },

        // Group 1: ALU r/m, imm
        0x80 | 0x81 | 0x83 => {
            let size = if opcode == 0x80 { 1 } else { osz };
            let m = decode_modrm(&mut cur, &prefixes, size)?;
            let mn = alu_mnemonic(m.reg)
                .ok_or(DecodeError::Unsupported { opcode, two_byte: false })?;
            let imm = if opcode == 0x83 {
                cur.u8()? as i8 as i32 as u32
            } else {
                cur.imm(size)?
            };
            let imm = if size == 2 { imm & 0xFFFF } else { imm };
            let imm = if size == 1 { imm & 0xFF } else { imm };
            Instruction::with(mn, rm_operand(m.rm, size), Operand::Imm(imm), 0)
        }

        0x84 | 0x85 => {
            let size = if opcode == 0x84 { 1 } else { osz };
            let m = decode_modrm(&mut cur, &prefixes, size)?;
            Instruction::with(Mnemonic::Test, rm_operand(m.rm, size), reg_operand(m.reg, size), 0)
        }
        0x86 | 0x87 => {
            let size = if opcode == 0x86 { 1 } else { osz };
            let m = decode_modrm(&mut cur, &prefixes, size)?;
            Instruction::with(Mnemonic::Xchg, rm_operand(m.rm, size), reg_operand(m.reg, size), 0)
        }

        0x88..=0x8B => {
            let size = if opcode & 1 == 0 { 1 } else { osz };
            let m = decode_modrm(&mut cur, &prefixes, size)?;
            let (dst, src) = if opcode & 2 == 0 {
                (rm_operand(m.rm, size), reg_operand(m.reg, size))
            } else {
                (reg_operand(m.reg, size), rm_operand(m.rm, size))
            };
            Instruction::with(Mnemonic::Mov, dst, src, 0)
        }

        0x8D => {
            let m = decode_modrm(&mut cur, &prefixes, 4)?;
            match m.rm {
                RmSide::Mem(mem) => Instruction::with(
                    Mnemonic::Lea,
                    reg_operand(m.reg, 4),
                    Operand::Mem(mem),
                    0,
                ),
                RmSide::Reg(_) => return Err(DecodeError::InvalidOpcode(opcode)),
            }
        }

        0x8F => {
            let m = decode_modrm(&mut cur, &prefixes, 4)?;
            if m.reg != 0 {
                return Err(DecodeError::InvalidOpcode(opcode));
            }
            Instruction::one(Mnemonic::Pop, rm_operand(m.rm, 4), 0)
        }

        0x90 => Instruction::new(Mnemonic::Nop, 0),
        0x91..=0x97 => Instruction::with(
            Mnemonic::Xchg,
            Operand::Reg32(Reg::Eax),
            Operand::Reg32(Reg::from_index(opcode - 0x90)),
            0,
        ),

        0x9B => Instruction::new(Mnemonic::Fwait, 0),

        // MOV accumulator <-> memory offset.
        0xA0..=0xA3 => {
            let size = if opcode & 1 == 0 { 1 } else { osz };
            let moffs = cur.u32()? as i32;
            let mem = Operand::Mem(MemOperand { base: None, index: None, disp: moffs, size, fs: prefixes.fs });
            let acc = reg_operand(0, size);
            if opcode < 0xA2 {
                Instruction::with(Mnemonic::Mov, acc, mem, 0)
            } else {
                Instruction::with(Mnemonic::Mov, mem, acc, 0)
            }
        }

        0xA4 => Instruction::new(Mnemonic::Movsb, 0),
        0xA8 => {
            let imm = cur.imm(1)?;
            Instruction::with(Mnemonic::Test, Operand::Reg8(Reg8::Al), Operand::Imm(imm), 0)
        }
        0xA9 => {
            let imm = cur.imm(osz)?;
            Instruction::with(Mnemonic::Test, reg_operand(0, osz), Operand::Imm(imm), 0)
        }
        0xAA => Instruction::new(Mnemonic::Stosb, 0),
        0xAC => Instruction::new(Mnemonic::Lodsb, 0),

        0xB0..=0xB7 => {
            let imm = cur.imm(1)?;
            Instruction::with(
                Mnemonic::Mov,
                Operand::Reg8(Reg8::from_index(opcode - 0xB0)),
                Operand::Imm(imm),
                0,
            )
        }
        0xB8..=0xBF => {
            let imm = cur.imm(osz)?;
            Instruction::with(Mnemonic::Mov, reg_operand(opcode - 0xB8, osz), Operand::Imm(imm), 0)
        }

        0xC2 => {
            let imm = cur.u16()?;
            Instruction::one(Mnemonic::Ret, Operand::Imm(u32::from(imm)), 0)
        }
        0xC3 => Instruction::new(Mnemonic::Ret, 0),

        0xC6 | 0xC7 => {
            let size = if opcode == 0xC6 { 1 } else { osz };
            let m = decode_modrm(&mut cur, &prefixes, size)?;
            if m.reg != 0 {
                return Err(DecodeError::InvalidOpcode(opcode));
            }
            let imm = cur.imm(size)?;
            Instruction::with(Mnemonic::Mov, rm_operand(m.rm, size), Operand::Imm(imm), 0)
        }

        0xCD => {
            let imm = cur.imm(1)?;
            Instruction::one(Mnemonic::Int, Operand::Imm(imm), 0)
        }

        0xD9 => {
            let next = cur.u8()?;
            if next == 0xEE {
                Instruction::new(Mnemonic::Fldz, 0)
            } else if next < 0xC0 && (next >> 3) & 7 == 6 {
                // FNSTENV m28: re-decode the modrm byte properly.
                cur.pos -= 1;
                let m = decode_modrm(&mut cur, &prefixes, 4)?;
                match m.rm {
                    RmSide::Mem(mem) => Instruction::one(Mnemonic::Fnstenv, Operand::Mem(mem), 0),
                    RmSide::Reg(_) => return Err(DecodeError::InvalidOpcode(opcode)),
                }
            } else {
                return Err(DecodeError::Unsupported { opcode, two_byte: false });
            }
        }
        // Remaining x87 opcodes exist but are not modeled (the emulation gap
        // the fpu_dependent corpus variant leans on).
        0xD8 | 0xDA..=0xDF => {
            return Err(DecodeError::Unsupported { opcode, two_byte: false })
        }

        0xE2 => {
            let rel = cur.u8()? as i8 as i32;
            Instruction::one(Mnemonic::Loop, Operand::Rel(rel), 0)
        }

        0xE8 => {
            let rel = cur.u32()? as i32;
            Instruction::one(Mnemonic::Call, Operand::Rel(rel), 0)
        }
        0xE9 => {
            let rel = cur.u32()? as i32;
            Instruction::one(Mnemonic::Jmp, Operand::Rel(rel), 0)
        }
        0xEB => {
            let rel = cur.u8()? as i8 as i32;
            Instruction::one(Mnemonic::Jmp, Operand::Rel(rel), 0)
        }

        0xF6 | 0xF7 => {
            let size = if opcode == 0xF6 { 1 } else { osz };
            let m = decode_modrm(&mut cur, &prefixes, size)?;
            match m.reg {
                0 => {
                    let imm = cur.imm(size)?;
                    Instruction::with(Mnemonic::Test, rm_operand(m.rm, size), Operand::Imm(imm), 0)
                }
                2 => Instruction::one(Mnemonic::Not, rm_operand(m.rm, size), 0),
                3 => Instruction::one(Mnemonic::Neg, rm_operand(m.rm, size), 0),
                // MUL/IMUL/DIV/IDIV
                _ => return Err(DecodeError::Unsupported { opcode, two_byte: false }),
            }
        }

        0xFE => {
            let m = decode_modrm(&mut cur, &prefixes, 1)?;
            match m.reg {
                0 => Instruction::one(Mnemonic::Inc, rm_operand(m.rm, 1), 0),
                1 => Instruction::one(Mnemonic::Dec, rm_operand(m.rm, 1), 0),
                _ => return Err(DecodeError::InvalidOpcode(opcode)),
            }
        }
        0xFF => {
            let m = decode_modrm(&mut cur, &prefixes, 4)?;
            match m.reg {
                0 => Instruction::one(Mnemonic::Inc, rm_operand(m.rm, 4), 0),
                1 => Instruction::one(Mnemonic::Dec, rm_operand(m.rm, 4), 0),
                2 => Instruction::one(Mnemonic::CallInd, rm_operand(m.rm, 4), 0),
                4 => Instruction::one(Mnemonic::JmpInd, rm_operand(m.rm, 4), 0),
                6 => Instruction::one(Mnemonic::Push, rm_operand(m.rm, 4), 0),
                _ => return Err(DecodeError::Unsupported { opcode, two_byte: false }),
            }
        }

        0x0F => {
            let second = cur.u8()?;
            match second {
                0x31 => Instruction::new(Mnemonic::Rdtsc, 0),
                0x34 => Instruction::new(Mnemonic::Sysenter, 0),
                0x80..=0x8F => match Cond::from_nibble(second & 0xF) {
                    Some(c) => {
                        let rel = cur.u32()? as i32;
                        Instruction::one(Mnemonic::Jcc(c), Operand::Rel(rel), 0)
                    }
                    None => {
                        return Err(DecodeError::Unsupported { opcode: second, two_byte: true })
                    }
                },
                0x0B | 0xB9 | 0xFF => return Err(DecodeError::InvalidOpcode(second)),
                _ => return Err(DecodeError::Unsupported { opcode: second, two_byte: true }),
            }
        }

        // Recognizable IA-32 we deliberately do not model.
        0x06 | 0x07 | 0x0E | 0x16 | 0x17 | 0x1E | 0x1F // segment push/pop
        | 0x10..=0x15 | 0x18..=0x1D // ADC/SBB
        | 0x27 | 0x2F | 0x37 | 0x3F // BCD adjust
        | 0x60..=0x63 | 0x69 | 0x6B..=0x6F
        | 0x8C | 0x8E
        | 0x98..=0x9A | 0x9C..=0x9F
        | 0xA5..=0xA7 | 0xAB | 0xAD..=0xAF
        | 0xC0 | 0xC1 | 0xC4 | 0xC5 | 0xC8..=0xCC | 0xCE | 0xCF
        | 0xD0..=0xD7
        | 0xE0 | 0xE1 | 0xE3..=0xE7 | 0xEA | 0xEC..=0xEF
        | 0xF4 | 0xF5 | 0xF8..=0xFD => {
            return Err(DecodeError::Unsupported { opcode, two_byte: false })
        }

        other => return Err(DecodeError::InvalidOpcode(other)),
    };

    insn.length = cur.pos as u8;
    insn.rep = prefixes.rep;
    debug_assert!(insn.length >= 1 && insn.length as usize <= MAX_INSN_LEN);
    Ok(insn)
}
