//! The cipher side of the decryptor: a single-byte XOR.

use super::CorpusError;

/// XOR-encodes `payload` with `key`. Involutive: applying it twice returns
/// the original bytes. With `nul_free` set, a key that would produce a NUL
/// anywhere in the output is rejected so the caller can retry another key.
pub fn encode_payload_xor(payload: &[u8], key: u8, nul_free: bool) -> Result<Vec<u8>, CorpusError> {
    if payload.is_empty() {
        return Err(CorpusError::EmptyPayload);
    }
    let out: Vec<u8> = payload.iter().map(|&b| b ^ key).collect();
    if nul_free && out.contains(&0) {
        return Err(CorpusError::KeyError { key });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_encode_to_the_key() {
        assert_eq!(encode_payload_xor(&[0, 0, 0], 0xAA, false).unwrap(), vec![0xAA, 0xAA, 0xAA]);
    }

    #[test]
    fn complement_key() {
        assert_eq!(encode_payload_xor(&[0xDE, 0xAD], 0xFF, false).unwrap(), vec![0x21, 0x52]);
    }

    #[test]
    fn involution() {
        let payload: Vec<u8> = (0..=255).collect();
        for key in [0x01u8, 0x5A, 0xFF] {
            let enc = encode_payload_xor(&payload, key, false).unwrap();
            let dec = encode_payload_xor(&enc, key, false).unwrap();
            assert_eq!(dec, payload);
        }
    }

    #[test]
    fn nul_free_rejects_keys_matching_a_payload_byte() {
        // 0x90 ^ 0x90 = 0, so key 0x90 is forbidden for a payload containing 0x90.
        assert!(matches!(
            encode_payload_xor(&[0x90, 0xC3], 0x90, true),
            Err(CorpusError::KeyError { key: 0x90 })
        ));
        assert!(encode_payload_xor(&[0x90, 0xC3], 0x5A, true).is_ok());
    }

    #[test]
    fn empty_payload_is_an_error() {
        assert!(matches!(encode_payload_xor(&[], 1, false), Err(CorpusError::EmptyPayload)));
    }
}
