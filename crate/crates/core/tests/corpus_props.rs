//! Corpus generator invariants: round-trip decryption, polymorphism and
//! byte constraints.

use std::collections::HashSet;

use emuscan_core::corpus::{
    emulate_decryption, generate, generate_shellcode, GeneratorSpec, GetPcVariant, Variant,
};

/// Emulated decryption reconstructs the plaintext for every decryptor
/// variant across seeds, payload sizes and junk densities.
#[test]
fn round_trip_across_variants_and_seeds() {
    let lengths = [16usize, 64, 256];
    let densities = [0.0f32, 0.25, 0.5];
    let mut runs = 0;
    for variant in GetPcVariant::all() {
        for seed in 0..10u64 {
            let spec = GeneratorSpec {
                getpc_variant: variant,
                payload_length: lengths[seed as usize % lengths.len()],
                junk_density: densities[seed as usize % densities.len()],
                ..GeneratorSpec::default()
            };
            let sample = generate_shellcode(&spec, seed).unwrap();
            let recovered = emulate_decryption(&sample)
                .unwrap_or_else(|e| panic!("{variant:?} seed {seed}: {e}"));
            assert_eq!(recovered, sample.plaintext_payload, "{variant:?} seed {seed}");
            runs += 1;
        }
    }
    assert_eq!(runs, 40);
}

/// The decryptable evasions round-trip too, under their stated requirements.
#[test]
fn evasion_round_trips() {
    for variant in [Variant::StackScanFs, Variant::SyscallCopy, Variant::TimeExhaust] {
        for seed in 0..5u64 {
            let sample = generate(variant, 48, 0.0, seed).unwrap();
            let recovered = emulate_decryption(&sample)
                .unwrap_or_else(|e| panic!("{variant:?} seed {seed}: {e}"));
            assert_eq!(recovered, sample.plaintext_payload, "{variant:?} seed {seed}");
        }
    }
}

/// No two of 100 same-spec samples are byte-identical, and all decrypt to
/// the same plaintext.
#[test]
fn polymorphism_over_one_hundred_seeds() {
    let spec = GeneratorSpec::default();
    let mut seen: HashSet<Vec<u8>> = HashSet::new();
    let reference = generate_shellcode(&spec, 0).unwrap().plaintext_payload;
    for seed in 0..100u64 {
        let sample = generate_shellcode(&spec, seed).unwrap();
        assert_eq!(sample.plaintext_payload, reference);
        assert!(seen.insert(sample.bytes.clone()), "seed {seed} duplicated an earlier sample");
    }
}

/// With the NUL-free flag set (the default), neither the decryptor nor the
/// encoded payload contains a zero byte.
#[test]
fn nul_free_decryptor_and_payload() {
    for variant in GetPcVariant::all() {
        for seed in 0..50u64 {
            let spec =
                GeneratorSpec { getpc_variant: variant, junk_density: 0.5, ..Default::default() };
            let sample = generate_shellcode(&spec, seed).unwrap();
            let decryptor =
                &sample.bytes[sample.decryptor_offset as usize..sample.payload_offset as usize];
            assert!(!decryptor.contains(&0), "{variant:?} seed {seed}: NUL in decryptor");
            assert!(
                !sample.bytes[sample.payload_offset as usize..].contains(&0),
                "{variant:?} seed {seed}: NUL in encoded payload"
            );
        }
    }
}

/// Register permutation actually moves across seeds.
#[test]
fn register_roles_vary_with_the_seed() {
    let spec = GeneratorSpec {
        getpc_variant: GetPcVariant::NoneRegisterAssume,
        ..GeneratorSpec::default()
    };
    let regs: HashSet<_> = (0..24u64)
        .map(|seed| generate_shellcode(&spec, seed).unwrap().assumed_register.unwrap())
        .collect();
    assert!(regs.len() >= 3, "expected several distinct pointer registers, got {regs:?}");
}
