//! Ground-truth sample generation: detectable polymorphic shellcodes, the
//! evasion variants that slip past the baseline heuristic, and benign
//! background data. Every sample carries machine-readable metadata so the
//! detector can be evaluated against known truth.
//!
//! Payloads are inert by construction: a NOP sled ending in RET, never
//! functional attack code.

mod background;
mod encode;
mod evasion;
mod generate;
mod getpc_emit;
pub mod sidecar;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cpu::chain::{run_chain, ChainConfig, TerminationReason};
use crate::cpu::decode::Reg;
use crate::cpu::exec::{step, ExecCtx};
use crate::cpu::state::{init_state, InitPolicy, MemoryLayout};
use crate::detector::VerdictLabel;

pub use background::{generate_background, BackgroundKind};
pub use encode::encode_payload_xor;
pub use evasion::{emit_evasion, EvasionParams};
pub use generate::{generate_shellcode, GeneratorSpec, GetPcVariant};
pub use getpc_emit::{emit_getpc, GetPcBlock};
pub use sidecar::SidecarMeta;

/// Every sample family the toolkit can emit.
#[derive(Debug, Copy, Clone, Eq, PartialEq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    XorCallRel,
    XorFstenv,
    XorCallIndirect,
    XorRegisterAssume,
    StackScanFs,
    SyscallCopy,
    TimeExhaust,
    PiqSelfmod,
    FpuDependent,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::XorCallRel => "xor_call_rel",
            Variant::XorFstenv => "xor_fstenv",
            Variant::XorCallIndirect => "xor_call_indirect",
            Variant::XorRegisterAssume => "xor_register_assume",
            Variant::StackScanFs => "stack_scan_fs",
            Variant::SyscallCopy => "syscall_copy",
            Variant::TimeExhaust => "time_exhaust",
            Variant::PiqSelfmod => "piq_selfmod",
            Variant::FpuDependent => "fpu_dependent",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::all().into_iter().find(|v| v.name() == s)
    }

    pub fn all() -> [Variant; 9] {
        [
            Variant::XorCallRel,
            Variant::XorFstenv,
            Variant::XorCallIndirect,
            Variant::XorRegisterAssume,
            Variant::StackScanFs,
            Variant::SyscallCopy,
            Variant::TimeExhaust,
            Variant::PiqSelfmod,
            Variant::FpuDependent,
        ]
    }

    pub fn is_evasion(self) -> bool {
        !matches!(self, Variant::XorCallRel | Variant::XorFstenv)
    }
}

/// Where the plaintext lands after a successful (emulated) decryption.
#[derive(Debug, Copy, Clone, Eq, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecryptSite {
    /// In the data buffer, at `payload_offset`.
    InPlace,
    /// In the first syscall-allocated scratch region.
    Scratch,
    /// Only when the sample is planted on the stack (TIB scan variant).
    StackPlant,
    /// Not reproducible under this emulator; the divergence is the point.
    HardwareOnly,
}

/// What the emulation needs for the decryption to complete.
#[derive(Debug, Copy, Clone, Eq, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Requires {
    None,
    /// The assumed register must be preloaded (fixed register policy).
    FixedRegisters,
    /// Syscall modeling must be enabled.
    SyscallModel,
    /// An instruction budget large enough to outlast the delay loop.
    ExtendedBudget,
}

/// One generated sample plus its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample {
    pub bytes: Vec<u8>,
    pub variant: Variant,
    pub seed: u64,
    pub entry_offset: u32,
    pub key: u8,
    pub plaintext_payload: Vec<u8>,
    /// Offset of the decryptor loop (first byte after the GetPC block).
    pub decryptor_offset: u32,
    /// Offset of the encoded payload inside `bytes`.
    pub payload_offset: u32,
    pub expected_baseline: VerdictLabel,
    pub expected_extended: VerdictLabel,
    pub decrypt_site: DecryptSite,
    pub requires: Requires,
    /// For `xor_register_assume`: the register assumed to point at the
    /// sample's first byte.
    pub assumed_register: Option<Reg>,
}

#[derive(Debug, Clone, Eq, PartialEq, Error)]
pub enum CorpusError {
    #[error("payload must be non-empty")]
    EmptyPayload,
    #[error("junk density must lie in 0..=1")]
    BadJunkDensity,
    #[error("esp cannot receive the recovered address")]
    UnsupportedRegister,
    #[error("xor key {key:#04x} produces a forbidden byte")]
    KeyError { key: u8 },
    #[error("no xor key satisfies the byte constraints")]
    KeyExhausted,
    #[error("invalid parameter: {0}")]
    Param(String),
}

/// The inert plaintext every decryptor reconstructs: a NOP sled ending in a
/// single RET.
pub fn plaintext_payload(len: usize) -> Vec<u8> {
    let mut p = vec![0x90u8; len.max(1)];
    *p.last_mut().unwrap() = 0xC3;
    p
}

/// Generates any variant with default shape parameters. The four decryptor
/// variants honor `payload_len`/`junk_density`; evasions take `payload_len`.
pub fn generate(
    variant: Variant,
    payload_len: usize,
    junk_density: f32,
    seed: u64,
) -> Result<CorpusSample, CorpusError> {
    let getpc = match variant {
        Variant::XorCallRel => Some(GetPcVariant::CallRelPop),
        Variant::XorFstenv => Some(GetPcVariant::Fstenv),
        Variant::XorCallIndirect => Some(GetPcVariant::CallIndirectPush),
        Variant::XorRegisterAssume => Some(GetPcVariant::NoneRegisterAssume),
        _ => None,
    };
    match getpc {
        Some(g) => {
            let spec = GeneratorSpec {
                getpc_variant: g,
                payload_length: payload_len,
                junk_density,
                ..GeneratorSpec::default()
            };
            generate_shellcode(&spec, seed)
        }
        None => {
            let params = EvasionParams { payload_len, seed, ..EvasionParams::default() };
            emit_evasion(variant, &params)
        }
    }
}

/// Runs the sample the way its metadata says it can be decrypted and returns
/// the plaintext found at the decrypt site. This is the round-trip oracle:
/// the result must equal `plaintext_payload`.
pub fn emulate_decryption(sample: &CorpusSample) -> Result<Vec<u8>, String> {
    let len = sample.plaintext_payload.len();
    match sample.decrypt_site {
        DecryptSite::HardwareOnly => {
            Err("divergent by design: decryption only completes on real hardware".into())
        }
        DecryptSite::StackPlant => emulate_stack_plant(sample),
        site => {
            let mut config = ChainConfig {
                instruction_budget: decryption_budget(sample),
                ..ChainConfig::default()
            };
            match sample.requires {
                Requires::SyscallModel => config.syscall_model = true,
                Requires::FixedRegisters => {
                    let reg = sample.assumed_register.ok_or("missing assumed register")?;
                    let mut regs = [0u32; 8];
                    regs[reg.index()] = config.layout.buffer_base + sample.entry_offset;
                    regs[Reg::Esp.index()] = config.layout.stack_top - 16;
                    config.policy = InitPolicy::Fixed { regs };
                }
                _ => {}
            }
            let buffer = std::sync::Arc::new(sample.bytes.clone());
            let outcome = run_chain(&buffer, sample.entry_offset, &config);
            let addr = match site {
                DecryptSite::InPlace => config.layout.buffer_base + sample.payload_offset,
                DecryptSite::Scratch => crate::cpu::memory::SCRATCH_BASE,
                _ => unreachable!(),
            };
            outcome
                .memory
                .peek_range(addr, len)
                .ok_or_else(|| format!("decrypt site unreadable (chain ended {:?})", outcome.trace.termination))
        }
    }
}

fn decryption_budget(sample: &CorpusSample) -> u32 {
    let base = 4096 + sample.plaintext_payload.len() as u32 * 8;
    match sample.requires {
        Requires::ExtendedBudget => 1_100_000 + base,
        _ => base,
    }
}

/// Plants the sample inside the stack region and executes it from there,
/// mirroring the attack the TIB stack scan assumes.
fn emulate_stack_plant(sample: &CorpusSample) -> Result<Vec<u8>, String> {
    let layout = MemoryLayout::default();
    // An unrelated buffer keeps the region map complete.
    let buffer = std::sync::Arc::new(vec![0u8; 64]);
    let (mut state, mut memory) =
        init_state(&InitPolicy::Zeroed, &layout, buffer).map_err(|e| e.to_string())?;
    let plant = layout.stack_top - sample.bytes.len() as u32 - 64;
    memory.poke_range(plant, &sample.bytes).map_err(|_| "plant outside stack")?;
    state.eip = plant + sample.entry_offset;

    let ctx = ExecCtx {
        retired: 0,
        syscall_model: false,
        syscall_alloc: crate::cpu::chain::DEFAULT_SYSCALL_ALLOC,
        syscall_copy: crate::cpu::chain::DEFAULT_SYSCALL_COPY,
        return_sentinel: None,
        stack_base: layout.stack_base(),
        stack_top: layout.stack_top,
    };
    let mut ctx = ctx;
    let budget = decryption_budget(sample).max(600_000);
    let mut termination: Option<TerminationReason> = None;
    while ctx.retired < budget {
        let out = step(&mut state, &mut memory, &ctx);
        if out.executed {
            ctx.retired += 1;
        }
        if let Some(t) = out.terminated {
            termination = Some(t);
            break;
        }
    }
    let _ = termination; // any stop is fine; only the memory matters
    memory
        .peek_range(plant + sample.payload_offset, sample.plaintext_payload.len())
        .ok_or_else(|| "planted payload unreadable".to_string())
}
