//! The polymorphic decryptor generator.
//!
//! Every sample follows the three-part anatomy: GetPC code, a byte-wise XOR
//! decryptor loop, and the encoded payload, with optional no-op junk woven
//! between the real instructions. Register assignment, junk placement and
//! the key all derive from the seed, so two seeds give different bytes that
//! decrypt to the same plaintext.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cpu::decode::Reg;
use crate::detector::VerdictLabel;

use super::encode::encode_payload_xor;
use super::getpc_emit::emit_getpc;
use super::{plaintext_payload, CorpusError, CorpusSample, DecryptSite, Requires, Variant};

#[derive(Debug, Copy, Clone, Eq, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GetPcVariant {
    CallRelPop,
    Fstenv,
    CallIndirectPush,
    NoneRegisterAssume,
}

impl GetPcVariant {
    pub fn all() -> [GetPcVariant; 4] {
        [
            GetPcVariant::CallRelPop,
            GetPcVariant::Fstenv,
            GetPcVariant::CallIndirectPush,
            GetPcVariant::NoneRegisterAssume,
        ]
    }

    fn variant(self) -> Variant {
        match self {
            GetPcVariant::CallRelPop => Variant::XorCallRel,
            GetPcVariant::Fstenv => Variant::XorFstenv,
            GetPcVariant::CallIndirectPush => Variant::XorCallIndirect,
            GetPcVariant::NoneRegisterAssume => Variant::XorRegisterAssume,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub getpc_variant: GetPcVariant,
    pub payload_length: usize,
    /// Probability of emitting a junk item at each junk slot.
    pub junk_density: f32,
    /// Reject keys (and refuse decryptor encodings) that produce NUL bytes.
    pub nul_free: bool,
    /// Pins the register permutation independently of the main seed.
    pub register_permutation_seed: Option<u64>,
}

impl Default for GeneratorSpec {
    fn default() -> GeneratorSpec {
        GeneratorSpec {
            getpc_variant: GetPcVariant::CallRelPop,
            payload_length: 64,
            junk_density: 0.25,
            nul_free: true,
            register_permutation_seed: None,
        }
    }
}

pub(crate) fn modrm(md: u8, reg: u8, rm: u8) -> u8 {
    (md << 6) | (reg << 3) | rm
}

#[derive(Debug, Copy, Clone, Eq, PartialEq)]
pub(crate) enum JunkClass {
    Any,
    FlagNeutral,
}

/// Emits at most one junk item from the fixed no-op-equivalent alphabet:
/// NOP, XCHG r,r, MOV r,r, and (flag-clobbering) INC/DEC pairs on a free
/// register.
pub(crate) fn emit_junk(
    out: &mut Vec<u8>,
    rng: &mut ChaCha8Rng,
    density: f32,
    free: &[Reg],
    class: JunkClass,
) {
    if density <= 0.0 || rng.gen::<f32>() >= density {
        return;
    }
    let reg = *free.choose(rng).expect("junk register pool is never empty");
    let r = reg.index() as u8;
    let pick_limit = if class == JunkClass::Any { 4 } else { 3 };
    match rng.gen_range(0..pick_limit) {
        0 => out.push(0x90),                          // nop
        1 => out.extend([0x87, modrm(3, r, r)]),      // xchg r, r
        2 => out.extend([0x89, modrm(3, r, r)]),      // mov r, r
        _ => out.extend([0x40 + r, 0x48 + r]),        // inc r / dec r
    }
}

/// Picks a nonzero key whose encoding of `plaintext` avoids forbidden bytes.
pub(crate) fn pick_key(
    rng: &mut ChaCha8Rng,
    plaintext: &[u8],
    nul_free: bool,
    also_avoid: &[u8],
) -> Result<u8, CorpusError> {
    for _ in 0..512 {
        let key = rng.gen_range(1..=255u8);
        match encode_payload_xor(plaintext, key, nul_free) {
            Ok(enc) => {
                if also_avoid.iter().any(|b| enc.contains(b)) {
                    continue;
                }
                return Ok(key);
            }
            Err(_) => continue,
        }
    }
    Err(CorpusError::KeyExhausted)
}

/// Generates one sample: `[junk]* getpc decryptor payload`.
pub fn generate_shellcode(spec: &GeneratorSpec, seed: u64) -> Result<CorpusSample, CorpusError> {
    if spec.payload_length == 0 {
        return Err(CorpusError::EmptyPayload);
    }
    if !(0.0..=1.0).contains(&spec.junk_density) {
        return Err(CorpusError::BadJunkDensity);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg_rng = ChaCha8Rng::seed_from_u64(spec.register_permutation_seed.unwrap_or(seed) ^ 0x9E37);

    // Register roles. The pointer walks the payload; the counter needs
    // byte-addressable halves (so one of EAX..EBX); the value register is a
    // low 8-bit register distinct from both.
    let mut ptr_pool = [Reg::Eax, Reg::Ecx, Reg::Edx, Reg::Ebx, Reg::Esi, Reg::Edi];
    ptr_pool.shuffle(&mut reg_rng);
    let ptr = ptr_pool[0];
    let mut low_pool: Vec<Reg> = [Reg::Eax, Reg::Ecx, Reg::Edx, Reg::Ebx]
        .into_iter()
        .filter(|r| *r != ptr)
        .collect();
    low_pool.shuffle(&mut reg_rng);
    let cnt = low_pool[0];
    let val = low_pool[1];
    let free: Vec<Reg> = [Reg::Eax, Reg::Ecx, Reg::Edx, Reg::Ebx, Reg::Ebp, Reg::Esi, Reg::Edi]
        .into_iter()
        .filter(|r| *r != ptr && *r != cnt && *r != val)
        .collect();

    let plaintext = plaintext_payload(spec.payload_length);
    let key = pick_key(&mut rng, &plaintext, spec.nul_free, &[])?;
    let encoded = encode_payload_xor(&plaintext, key, spec.nul_free)?;

    let (p, c, v) = (ptr.index() as u8, cnt.index() as u8, val.index() as u8);
    let density = spec.junk_density;
    let mut b: Vec<u8> = Vec::with_capacity(64 + encoded.len());

    // Lead junk before the GetPC code (all registers still dead).
    let lead_pool = [Reg::Eax, Reg::Ecx, Reg::Edx, Reg::Ebx, Reg::Ebp, Reg::Esi, Reg::Edi];
    for _ in 0..2 {
        emit_junk(&mut b, &mut rng, density, &lead_pool, JunkClass::Any);
    }

    let block_start = b.len();
    let block = emit_getpc(spec.getpc_variant, ptr)?;
    b.extend_from_slice(&block.bytes);
    // The assumed-register variant anchors at the sample entry, not at the
    // (empty) block position.
    let recovered_at = match spec.getpc_variant {
        GetPcVariant::NoneRegisterAssume => 0,
        _ => block_start + block.recovered_offset,
    };

    let decr_start = b.len();
    // add ptr, disp8 — patched once the layout is known
    let add_patch = b.len() + 2;
    b.extend([0x83, modrm(3, 0, p), 0x00]);
    emit_junk(&mut b, &mut rng, density, &free, JunkClass::Any);
    // xor cnt, cnt
    b.extend([0x31, modrm(3, c, c)]);
    emit_junk(&mut b, &mut rng, density, &free, JunkClass::Any);
    // mov cnt.lo / cnt.hi, payload length parts (zero bytes never emitted)
    let (len_lo, len_hi) = (spec.payload_length as u8, (spec.payload_length >> 8) as u8);
    if len_lo != 0 {
        b.extend([0xB0 + c, len_lo]);
    }
    if len_hi != 0 {
        b.extend([0xB4 + c, len_hi]);
    }
    emit_junk(&mut b, &mut rng, density, &free, JunkClass::Any);

    let loop_top = b.len();
    // mov val, [ptr]
    b.extend([0x8A, modrm(0, v, p)]);
    emit_junk(&mut b, &mut rng, density, &free, JunkClass::Any);
    // xor val, key
    b.extend([0x80, modrm(3, 6, v), key]);
    emit_junk(&mut b, &mut rng, density, &free, JunkClass::Any);
    // mov [ptr], val
    b.extend([0x88, modrm(0, v, p)]);
    emit_junk(&mut b, &mut rng, density, &free, JunkClass::Any);
    // inc ptr / dec cnt
    b.push(0x40 + p);
    b.push(0x48 + c);
    // Only flag-preserving junk may sit between DEC and the loop branch.
    emit_junk(&mut b, &mut rng, density, &free, JunkClass::FlagNeutral);
    // jnz loop_top
    let body_len = b.len() + 2 - loop_top;
    debug_assert!(body_len <= 126, "loop body must stay a short jump");
    b.extend([0x75, (-(body_len as i32)) as u8]);

    let payload_offset = b.len();
    let disp = payload_offset - recovered_at;
    assert!((1..=127).contains(&disp), "pointer displacement must fit imm8");
    b[add_patch] = disp as u8;

    if spec.nul_free {
        debug_assert!(
            !b[decr_start..].contains(&0),
            "decryptor must be NUL-free when requested"
        );
    }
    b.extend_from_slice(&encoded);

    let variant = spec.getpc_variant.variant();
    let (expected_baseline, expected_extended) = match spec.getpc_variant {
        GetPcVariant::CallRelPop | GetPcVariant::Fstenv => {
            (VerdictLabel::Shellcode, VerdictLabel::Shellcode)
        }
        GetPcVariant::CallIndirectPush => (VerdictLabel::Benign, VerdictLabel::Shellcode),
        GetPcVariant::NoneRegisterAssume => (VerdictLabel::Benign, VerdictLabel::Benign),
    };
    let assumes = matches!(spec.getpc_variant, GetPcVariant::NoneRegisterAssume);

    Ok(CorpusSample {
        bytes: b,
        variant,
        seed,
        entry_offset: 0,
        key,
        plaintext_payload: plaintext,
        decryptor_offset: decr_start as u32,
        payload_offset: payload_offset as u32,
        expected_baseline,
        expected_extended,
        decrypt_site: DecryptSite::InPlace,
        requires: if assumes { Requires::FixedRegisters } else { Requires::None },
        assumed_register: assumes.then_some(ptr),
    })
}
