//! The evasion corpus: samples that defeat the baseline heuristic, each one
//! reproducing a concrete countermeasure from the literature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::VerdictLabel;

use super::encode::encode_payload_xor;
use super::generate::pick_key;
use super::{plaintext_payload, CorpusError, CorpusSample, DecryptSite, Requires, Variant};

#[derive(Debug, Clone)]
pub struct EvasionParams {
    pub seed: u64,
    /// Payload length; the fixed-form evasions count with an 8-bit register,
    /// so at most 255.
    pub payload_len: usize,
    /// Marker the stack scanner hunts for. Needs at least three distinct
    /// bytes so it cannot collide with the two-valued encoded payload.
    pub marker: [u8; 4],
    /// Iterations of the delaying loop.
    pub loop_count: u32,
    pub syscall_alloc: u32,
    pub syscall_copy: u32,
}

impl Default for EvasionParams {
    fn default() -> EvasionParams {
        EvasionParams {
            seed: 0,
            payload_len: 64,
            marker: [0xDE, 0xC0, 0xAD, 0x0B],
            loop_count: 1_000_000,
            syscall_alloc: crate::cpu::chain::DEFAULT_SYSCALL_ALLOC,
            syscall_copy: crate::cpu::chain::DEFAULT_SYSCALL_COPY,
        }
    }
}

fn keyed_payload(params: &EvasionParams) -> Result<(Vec<u8>, Vec<u8>, u8), CorpusError> {
    if params.payload_len == 0 {
        return Err(CorpusError::Param("payload_len must be at least 1".into()));
    }
    if params.payload_len > 255 {
        return Err(CorpusError::Param("fixed-form evasions support payloads up to 255 bytes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let plaintext = plaintext_payload(params.payload_len);
    let key = pick_key(&mut rng, &plaintext, true, &[])?;
    let encoded = encode_payload_xor(&plaintext, key, true)?;
    Ok((plaintext, encoded, key))
}

/// Builds one evasion sample. Every one of these is expected to scan benign
/// under the baseline profile; `stack_scan_fs` flips to shellcode under the
/// extended profile.
pub fn emit_evasion(kind: Variant, params: &EvasionParams) -> Result<CorpusSample, CorpusError> {
    match kind {
        Variant::StackScanFs => stack_scan_fs(params),
        Variant::SyscallCopy => syscall_copy(params),
        Variant::TimeExhaust => time_exhaust(params),
        Variant::PiqSelfmod => piq_selfmod(params),
        Variant::FpuDependent => fpu_dependent(params),
        other => Err(CorpusError::Param(format!("{} is not an evasion variant", other.name()))),
    }
}

/// TIB stack scan: pull the stack bounds out of fs:[4]/fs:[8], sweep the
/// stack for a marker, decrypt right after it. No GetPC idiom and no buffer
/// reads anywhere, so the baseline heuristic has nothing to hold on to.
fn stack_scan_fs(params: &EvasionParams) -> Result<CorpusSample, CorpusError> {
    let distinct = {
        let mut m = params.marker.to_vec();
        m.sort_unstable();
        m.dedup();
        m.len()
    };
    if distinct < 3 {
        return Err(CorpusError::Param("marker needs at least three distinct bytes".into()));
    }
    let (plaintext, encoded, key) = keyed_payload(params)?;
    let m = params.marker;
    let len = params.payload_len as u8;

    #[rustfmt::skip]
    let mut b = vec![
        0x64, 0x8B, 0x35, 0x04, 0x00, 0x00, 0x00, // mov esi, fs:[0x04]   ; stack top
        0x64, 0x8B, 0x3D, 0x08, 0x00, 0x00, 0x00, // mov edi, fs:[0x08]   ; stack bottom
        0x83, 0xEE, 0x04,                         // sub esi, 4
        // scan:
        0x81, 0x3E, m[0], m[1], m[2], m[3],       // cmp dword [esi], marker
        0x74, 0x05,                               // je found
        0x4E,                                     // dec esi
        0x39, 0xFE,                               // cmp esi, edi
        0x77, 0xF3,                               // ja scan
        // found:
        0x83, 0xC6, 0x04,                         // add esi, 4           ; skip the marker
        0x89, 0xF3,                               // mov ebx, esi         ; payload start
        0x31, 0xC9,                               // xor ecx, ecx
        0xB1, len,                                // mov cl, len
        // dloop:
        0x8A, 0x06,                               // mov al, [esi]
        0x34, key,                                // xor al, key
        0x88, 0x06,                               // mov [esi], al
        0x46,                                     // inc esi
        0x49,                                     // dec ecx
        0x75, 0xF6,                               // jnz dloop
        0xFF, 0xE3,                               // jmp ebx              ; run the payload
    ];
    b.extend_from_slice(&m);
    let payload_offset = b.len() as u32;
    b.extend_from_slice(&encoded);

    Ok(CorpusSample {
        bytes: b,
        variant: Variant::StackScanFs,
        seed: params.seed,
        entry_offset: 0,
        key,
        plaintext_payload: plaintext,
        decryptor_offset: 30,
        payload_offset,
        expected_baseline: VerdictLabel::Benign,
        expected_extended: VerdictLabel::Shellcode,
        decrypt_site: DecryptSite::StackPlant,
        requires: Requires::None,
        assumed_register: None,
    })
}

/// Listing-2-shaped self-copy: allocate memory with one service call, have
/// the kernel copy the payload out of the buffer with another, decrypt the
/// copy. The chain dies at SYSENTER without syscall modeling; with naive
/// modeling the copy is attributed to the kernel, so the decryptor's reads
/// never touch the data buffer either way.
fn syscall_copy(params: &EvasionParams) -> Result<CorpusSample, CorpusError> {
    let (plaintext, encoded, key) = keyed_payload(params)?;
    let len = params.payload_len as u32;
    let alloc = params.syscall_alloc.to_le_bytes();
    let copy = params.syscall_copy.to_le_bytes();
    let len_b = len.to_le_bytes();

    #[rustfmt::skip]
    let mut b = vec![
        0xE8, 0x00, 0x00, 0x00, 0x00,             // call +0
        0x5E,                                     // pop esi              ; esi = base+5
        0x31, 0xC0,                               // xor eax, eax
        0x50,                                     // push eax             ; out_base slot
        0x89, 0xE3,                               // mov ebx, esp         ; ebx = &slot
        0x6A, 0x40,                               // push 0x40            ; PAGE_EXECUTE_READWRITE
        0x68, 0x00, 0x10, 0x00, 0x00,             // push 0x1000          ; MEM_COMMIT
        0x53,                                     // push ebx             ; &region_size
        0x50,                                     // push eax             ; zero bits
        0x53,                                     // push ebx             ; &out_base
        0x6A, 0xFF,                               // push -1              ; process handle
        0x8D, 0x56, 0x20,                         // lea edx, [esi+0x20]  ; = ret1
        0x52,                                     // push edx             ; return address,
        0x52,                                     // push edx             ; pushed twice
        0x89, 0xE2,                               // mov edx, esp
        0xB8, alloc[0], alloc[1], alloc[2], alloc[3], // mov eax, alloc#
        0x0F, 0x34,                               // sysenter
        // ret1 (offset 37):
        0x8B, 0x3B,                               // mov edi, [ebx]       ; allocated base
        0x50,                                     // push eax             ; bytes-written ptr
        0x68, len_b[0], len_b[1], len_b[2], len_b[3], // push len
        0x57,                                     // push edi             ; dst (scratch)
        0x8D, 0x46, 0x4C,                         // lea eax, [esi+0x4c]  ; = payload
        0x50,                                     // push eax             ; src (data buffer)
        0x6A, 0xFF,                               // push -1
        0x8D, 0x56, 0x3D,                         // lea edx, [esi+0x3d]  ; = ret2
        0x52,                                     // push edx
        0x52,                                     // push edx
        0x89, 0xE2,                               // mov edx, esp
        0xB8, copy[0], copy[1], copy[2], copy[3], // mov eax, copy#
        0x0F, 0x34,                               // sysenter
        // ret2 (offset 66):
        0x31, 0xC9,                               // xor ecx, ecx
        0xB1, len as u8,                          // mov cl, len
        // dloop (offset 70):
        0x8A, 0x07,                               // mov al, [edi]
        0x34, key,                                // xor al, key
        0x88, 0x07,                               // mov [edi], al
        0x47,                                     // inc edi
        0x49,                                     // dec ecx
        0x75, 0xF6,                               // jnz dloop
        0xC3,                                     // ret
    ];
    debug_assert_eq!(b.len(), 81);
    let payload_offset = b.len() as u32;
    b.extend_from_slice(&encoded);

    Ok(CorpusSample {
        bytes: b,
        variant: Variant::SyscallCopy,
        seed: params.seed,
        entry_offset: 0,
        key,
        plaintext_payload: plaintext,
        decryptor_offset: 66,
        payload_offset,
        expected_baseline: VerdictLabel::Benign,
        expected_extended: VerdictLabel::Benign,
        decrypt_site: DecryptSite::Scratch,
        requires: Requires::SyscallModel,
        assumed_register: None,
    })
}

/// Delay loop between the GetPC code and the payload reads: any chain that
/// sees the GetPC event burns its entire instruction budget inside the loop
/// before a single payload read happens.
fn time_exhaust(params: &EvasionParams) -> Result<CorpusSample, CorpusError> {
    if params.loop_count == 0 {
        return Err(CorpusError::Param("loop_count must be at least 1".into()));
    }
    let (plaintext, encoded, key) = keyed_payload(params)?;
    let count = params.loop_count.to_le_bytes();
    let len = params.payload_len as u8;

    #[rustfmt::skip]
    let mut b = vec![
        0xE8, 0x00, 0x00, 0x00, 0x00,             // call +0
        0x5E,                                     // pop esi              ; esi = base+5
        0xB9, count[0], count[1], count[2], count[3], // mov ecx, loop_count
        0xE2, 0xFE,                               // loop $               ; the delay
        0x83, 0xC6, 0x1A,                         // add esi, 0x1a        ; -> payload
        0x31, 0xC9,                               // xor ecx, ecx
        0xB1, len,                                // mov cl, len
        // dloop (offset 20):
        0x8A, 0x06,                               // mov al, [esi]
        0x34, key,                                // xor al, key
        0x88, 0x06,                               // mov [esi], al
        0x46,                                     // inc esi
        0x49,                                     // dec ecx
        0x75, 0xF6,                               // jnz dloop
        0xC3,                                     // ret
    ];
    debug_assert_eq!(b.len(), 31);
    let payload_offset = b.len() as u32;
    // esi holds base+5 after the pop; the displacement spans the rest.
    debug_assert_eq!(payload_offset - 5, 0x1A);
    b.extend_from_slice(&encoded);

    Ok(CorpusSample {
        bytes: b,
        variant: Variant::TimeExhaust,
        seed: params.seed,
        entry_offset: 0,
        key,
        plaintext_payload: plaintext,
        decryptor_offset: 13,
        payload_offset,
        expected_baseline: VerdictLabel::Benign,
        expected_extended: VerdictLabel::Benign,
        decrypt_site: DecryptSite::InPlace,
        requires: Requires::ExtendedBudget,
        assumed_register: None,
    })
}

/// Self-overwriting REP STOSB: the store loop rewrites the upcoming short
/// jump. Hardware with a prefetch queue would execute the original bytes
/// and reach the decryptor; this emulator's write-through fetch executes
/// the overwritten bytes and derails before any payload read.
fn piq_selfmod(params: &EvasionParams) -> Result<CorpusSample, CorpusError> {
    let (plaintext, encoded, key) = keyed_payload(params)?;
    let len = params.payload_len as u8;

    #[rustfmt::skip]
    let mut b = vec![
        0xE8, 0x00, 0x00, 0x00, 0x00,             // call +0
        0x5E,                                     // pop esi              ; esi = base+5
        0x8D, 0x7E, 0x0A,                         // lea edi, [esi+0x0a]  ; = the jmp below
        0xB0, 0x90,                               // mov al, 0x90
        0xB1, 0x02,                               // mov cl, 2
        0xF3, 0xAA,                               // rep stosb            ; stomps the jmp
        // stomp target (offset 15):
        0xEB, 0x01,                               // jmp +1               ; hops over the ret
        0xC3,                                     // ret                  ; emulated landing
        // decryptor (offset 18):
        0x83, 0xC6, 0x1F,                         // add esi, 0x1f        ; -> payload
        0x31, 0xC9,                               // xor ecx, ecx
        0xB1, len,                                // mov cl, len
        // dloop (offset 25):
        0x8A, 0x06,                               // mov al, [esi]
        0x34, key,                                // xor al, key
        0x88, 0x06,                               // mov [esi], al
        0x46,                                     // inc esi
        0x49,                                     // dec ecx
        0x75, 0xF6,                               // jnz dloop
        0xC3,                                     // ret
    ];
    debug_assert_eq!(b.len(), 36);
    let payload_offset = b.len() as u32;
    debug_assert_eq!(payload_offset - 5, 0x1F);
    b.extend_from_slice(&encoded);

    Ok(CorpusSample {
        bytes: b,
        variant: Variant::PiqSelfmod,
        seed: params.seed,
        entry_offset: 0,
        key,
        plaintext_payload: plaintext,
        decryptor_offset: 18,
        payload_offset,
        expected_baseline: VerdictLabel::Benign,
        expected_extended: VerdictLabel::Benign,
        decrypt_site: DecryptSite::HardwareOnly,
        requires: Requires::None,
        assumed_register: None,
    })
}

/// Decryptor gated on an FPU instruction the emulator does not model
/// (FSIN): emulation stops right after the GetPC code, before any read.
fn fpu_dependent(params: &EvasionParams) -> Result<CorpusSample, CorpusError> {
    let (plaintext, encoded, key) = keyed_payload(params)?;
    let len = params.payload_len as u8;

    #[rustfmt::skip]
    let mut b = vec![
        0xE8, 0x00, 0x00, 0x00, 0x00,             // call +0
        0x5E,                                     // pop esi              ; esi = base+5
        0xD9, 0xFE,                               // fsin                 ; unmodeled here
        0x83, 0xC6, 0x15,                         // add esi, 0x15        ; -> payload
        0x31, 0xC9,                               // xor ecx, ecx
        0xB1, len,                                // mov cl, len
        // dloop (offset 15):
        0x8A, 0x06,                               // mov al, [esi]
        0x34, key,                                // xor al, key
        0x88, 0x06,                               // mov [esi], al
        0x46,                                     // inc esi
        0x49,                                     // dec ecx
        0x75, 0xF6,                               // jnz dloop
        0xC3,                                     // ret
    ];
    debug_assert_eq!(b.len(), 26);
    let payload_offset = b.len() as u32;
    debug_assert_eq!(payload_offset - 5, 0x15);
    b.extend_from_slice(&encoded);

    Ok(CorpusSample {
        bytes: b,
        variant: Variant::FpuDependent,
        seed: params.seed,
        entry_offset: 0,
        key,
        plaintext_payload: plaintext,
        decryptor_offset: 8,
        payload_offset,
        expected_baseline: VerdictLabel::Benign,
        expected_extended: VerdictLabel::Benign,
        decrypt_site: DecryptSite::HardwareOnly,
        requires: Requires::None,
        assumed_register: None,
    })
}
