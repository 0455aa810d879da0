//! GetPC block emission.

use crate::cpu::decode::Reg;

use super::{CorpusError, GetPcVariant};

/// An emitted GetPC block. After the block executes, the target register
/// holds `block_start + recovered_offset` — for the classic CALL+0/POP pair
/// that is the address of the POP itself, not the end of the block, so
/// layout math must use the exact offset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetPcBlock {
    pub bytes: Vec<u8>,
    pub recovered_offset: usize,
}

/// Emits the GetPC idiom `variant` leaving the recovered address in
/// `target`. `NoneRegisterAssume` emits nothing: the register is assumed to
/// already point at the code (recorded in sample metadata).
pub fn emit_getpc(variant: GetPcVariant, target: Reg) -> Result<GetPcBlock, CorpusError> {
    if target == Reg::Esp {
        return Err(CorpusError::UnsupportedRegister);
    }
    let r = target.index() as u8;
    Ok(match variant {
        GetPcVariant::CallRelPop => GetPcBlock {
            bytes: vec![
                0xE8, 0x00, 0x00, 0x00, 0x00, // call +0
                0x58 + r, // pop target
            ],
            recovered_offset: 5,
        },
        GetPcVariant::Fstenv => GetPcBlock {
            bytes: vec![
                0xD9, 0xEE, // fldz               (sets the saved FPU IP)
                0xD9, 0x74, 0x24, 0xF4, // fnstenv [esp-0xc]  (saved IP lands at [esp])
                0x58 + r, // pop target
            ],
            recovered_offset: 0,
        },
        GetPcVariant::CallIndirectPush => {
            // The pushed immediate is itself the code that runs on the
            // stack: pop target / push target / nop / ret.
            let imm = [0x58 + r, 0x50 + r, 0x90, 0xC3];
            GetPcBlock {
                bytes: vec![
                    0x68, imm[0], imm[1], imm[2], imm[3], // push imm32
                    0xFF, 0xD4, // call esp
                ],
                recovered_offset: 7,
            }
        }
        GetPcVariant::NoneRegisterAssume => GetPcBlock { bytes: Vec::new(), recovered_offset: 0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn call_rel_pop_esi_matches_the_canonical_bytes() {
        let b = emit_getpc(GetPcVariant::CallRelPop, Reg::Esi).unwrap();
        assert_eq!(b.bytes, vec![0xE8, 0x00, 0x00, 0x00, 0x00, 0x5E]);
        assert_eq!(b.recovered_offset, 5);
    }

    #[test]
    fn indirect_push_esi_matches_listing_bytes() {
        let b = emit_getpc(GetPcVariant::CallIndirectPush, Reg::Esi).unwrap();
        assert_eq!(b.bytes, vec![0x68, 0x5E, 0x56, 0x90, 0xC3, 0xFF, 0xD4]);
        assert_eq!(b.recovered_offset, 7);
    }

    #[test]
    fn esp_target_is_rejected() {
        assert!(matches!(
            emit_getpc(GetPcVariant::CallRelPop, Reg::Esp),
            Err(CorpusError::UnsupportedRegister)
        ));
    }

    #[test]
    fn none_variant_emits_nothing() {
        let b = emit_getpc(GetPcVariant::NoneRegisterAssume, Reg::Ebx).unwrap();
        assert!(b.bytes.is_empty());
    }
}
