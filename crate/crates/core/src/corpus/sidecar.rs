//! Sample sidecar files: one small TOML document of ground truth next to
//! each raw sample, consumed by the evaluation harness.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cpu::decode::Reg;
use crate::detector::VerdictLabel;

use super::{CorpusSample, DecryptSite, Requires, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarMeta {
    pub schema: u32,
    pub variant: Variant,
    pub seed: u64,
    pub entry_offset: u32,
    pub key: u8,
    pub payload_len: u32,
    pub decryptor_offset: u32,
    pub payload_offset: u32,
    pub payload_sha256: String,
    pub expected_baseline: VerdictLabel,
    pub expected_extended: VerdictLabel,
    pub decrypt_site: DecryptSite,
    pub requires: Requires,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assumed_register: Option<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub notes: String,
}

#[derive(Debug, Error)]
pub enum SidecarError {
    #[error("malformed sidecar: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unsupported sidecar schema {0}")]
    Schema(u32),
}

pub fn payload_digest(plaintext: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(plaintext);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

impl SidecarMeta {
    pub fn for_sample(sample: &CorpusSample) -> SidecarMeta {
        SidecarMeta {
            schema: 1,
            variant: sample.variant,
            seed: sample.seed,
            entry_offset: sample.entry_offset,
            key: sample.key,
            payload_len: sample.plaintext_payload.len() as u32,
            decryptor_offset: sample.decryptor_offset,
            payload_offset: sample.payload_offset,
            payload_sha256: payload_digest(&sample.plaintext_payload),
            expected_baseline: sample.expected_baseline,
            expected_extended: sample.expected_extended,
            decrypt_site: sample.decrypt_site,
            requires: sample.requires,
            assumed_register: sample.assumed_register.map(|r| r.name().to_string()),
            notes: match sample.decrypt_site {
                DecryptSite::HardwareOnly => {
                    "decryption diverges under emulation by design".to_string()
                }
                _ => String::new(),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("sidecar serialization cannot fail")
    }

    pub fn from_toml(text: &str) -> Result<SidecarMeta, SidecarError> {
        let meta: SidecarMeta = toml::from_str(text)?;
        if meta.schema != 1 {
            return Err(SidecarError::Schema(meta.schema));
        }
        Ok(meta)
    }

    pub fn assumed_reg(&self) -> Option<Reg> {
        let name = self.assumed_register.as_deref()?;
        [Reg::Eax, Reg::Ecx, Reg::Edx, Reg::Ebx, Reg::Esp, Reg::Ebp, Reg::Esi, Reg::Edi]
            .into_iter()
            .find(|r| r.name() == name)
    }
}
