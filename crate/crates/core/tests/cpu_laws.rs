//! Execution-model laws checked over randomized inputs.

use std::sync::Arc;

use proptest::prelude::*;

use emuscan_core::cpu::chain::{run_chain, ChainConfig};
use emuscan_core::cpu::exec::{step, ControlRecord, ExecCtx};
use emuscan_core::cpu::memory::AccessKind;
use emuscan_core::cpu::state::{init_state, InitPolicy, MemoryLayout};

/// A layout with a tiny stack so full-image snapshots stay cheap.
fn small_layout() -> MemoryLayout {
    MemoryLayout { stack_top: 0x0013_0000, stack_size: 1024, ..MemoryLayout::default() }
}

fn ctx_for(layout: &MemoryLayout) -> ExecCtx {
    ExecCtx {
        retired: 0,
        syscall_model: false,
        syscall_alloc: 0x11,
        syscall_copy: 0xBA,
        return_sentinel: None,
        stack_base: layout.stack_base(),
        stack_top: layout.stack_top,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// For every executed CALL at address A with length L, the dword written
    /// at the new ESP equals A+L.
    #[test]
    fn call_pushes_the_following_address(pad in 0usize..24, rel in any::<i32>()) {
        let layout = MemoryLayout::default();
        let mut code = vec![0x90u8; pad];
        code.push(0xE8);
        code.extend_from_slice(&rel.to_le_bytes());
        code.resize(code.len() + 8, 0x90);

        let config = ChainConfig {
            instruction_budget: pad as u32 + 1, // stop right after the call
            ..ChainConfig::default()
        };
        let out = run_chain(&Arc::new(code), 0, &config);
        let call_site = layout.buffer_base + pad as u32;
        let expected_ret = call_site + 5;
        let rec = out.trace.control.iter().find_map(|r| match *r {
            ControlRecord::Call { at_eip, ret_addr, ret_slot, .. } if at_eip == call_site => {
                Some((ret_addr, ret_slot))
            }
            _ => None,
        });
        let (ret_addr, ret_slot) = rec.expect("call record present");
        prop_assert_eq!(ret_addr, expected_ret);
        let stored = out.memory.peek_range(ret_slot, 4).expect("slot readable");
        prop_assert_eq!(stored, expected_ret.to_le_bytes().to_vec());
    }

    /// The saved-IP field of a stored FPU environment equals the address of
    /// the most recent FPU instruction.
    #[test]
    fn fnstenv_stores_the_last_fpu_ip(before in 0usize..16, between in 0usize..16) {
        let layout = MemoryLayout::default();
        let mut code = vec![0x90u8; before];
        code.extend_from_slice(&[0xD9, 0xEE]); // fldz
        code.extend(std::iter::repeat(0x90).take(between));
        code.extend_from_slice(&[0xD9, 0x74, 0x24, 0xF4]); // fnstenv [esp-0xc]
        let budget = (before + between + 2) as u32;
        let config = ChainConfig { instruction_budget: budget, ..ChainConfig::default() };
        let out = run_chain(&Arc::new(code), 0, &config);
        let fldz_at = layout.buffer_base + before as u32;
        let esp_init = layout.stack_top - 16;
        let saved = out.memory.peek_range(esp_init, 4).expect("env field readable");
        prop_assert_eq!(saved, fldz_at.to_le_bytes().to_vec());
    }

    /// After each step, every byte outside the write events is unchanged.
    #[test]
    fn step_locality(code in proptest::collection::vec(any::<u8>(), 1..64)) {
        let layout = small_layout();
        let (mut st, mut mem) =
            init_state(&InitPolicy::Zeroed, &layout, Arc::new(code)).unwrap();
        let ctx = ctx_for(&layout);
        let mut ctx = ctx;
        for _ in 0..40 {
            let before = mem.snapshot();
            let log_start = mem.log.len();
            let out = step(&mut st, &mut mem, &ctx);
            if out.executed {
                ctx.retired += 1;
            }
            let after = mem.snapshot();
            let writes: Vec<(u32, u8)> = mem.log[log_start..]
                .iter()
                .filter(|e| matches!(e.kind, AccessKind::Write | AccessKind::SyscallWrite))
                .map(|e| (e.addr, e.size))
                .collect();
            for ((base_a, bytes_a), (base_b, bytes_b)) in before.iter().zip(after.iter()) {
                prop_assert_eq!(base_a, base_b);
                for (i, (x, y)) in bytes_a.iter().zip(bytes_b.iter()).enumerate() {
                    if x != y {
                        let addr = base_a + i as u32;
                        let covered = writes.iter().any(|(w, sz)| {
                            addr >= *w && addr < w.wrapping_add(u32::from(*sz))
                        });
                        prop_assert!(covered, "byte {addr:#x} changed without a write event");
                    }
                }
            }
            if out.terminated.is_some() {
                break;
            }
        }
    }

    /// Chains are isolated: running offsets in either order gives the same traces.
    #[test]
    fn chain_order_independence(
        code in proptest::collection::vec(any::<u8>(), 64..256),
        a in 0u32..64,
        b in 0u32..64,
    ) {
        let buffer = Arc::new(code);
        let config = ChainConfig { instruction_budget: 256, ..ChainConfig::default() };
        let t_a1 = run_chain(&buffer, a, &config).trace;
        let t_b1 = run_chain(&buffer, b, &config).trace;
        let t_b2 = run_chain(&buffer, b, &config).trace;
        let t_a2 = run_chain(&buffer, a, &config).trace;
        prop_assert_eq!(t_a1, t_a2);
        prop_assert_eq!(t_b1, t_b2);
    }

    /// Identical inputs produce identical traces.
    #[test]
    fn chain_determinism(code in proptest::collection::vec(any::<u8>(), 1..128), off_seed in any::<u32>()) {
        let offset = off_seed % code.len() as u32;
        let buffer = Arc::new(code);
        let config = ChainConfig::default();
        prop_assert_eq!(run_chain(&buffer, offset, &config).trace, run_chain(&buffer, offset, &config).trace);
    }

    /// No chain retires more instructions than its budget.
    #[test]
    fn budget_is_a_ceiling(code in proptest::collection::vec(any::<u8>(), 1..128), budget in 1u32..200) {
        let buffer = Arc::new(code);
        let config = ChainConfig { instruction_budget: budget, ..ChainConfig::default() };
        for offset in [0u32, (buffer.len() / 2) as u32] {
            let trace = run_chain(&buffer, offset.min(buffer.len() as u32 - 1), &config).trace;
            prop_assert!(trace.retired <= budget);
        }
    }
}

/// Access log granularity: one event per executed memory operand.
#[test]
fn access_log_counts_memory_operands() {
    // push eax ; pop ebx ; mov ecx, [esp-4] ; xchg [esp-4], edx
    let code = vec![
        0x50, // push eax                  -> 1 write
        0x5B, // pop ebx                   -> 1 read
        0x8B, 0x4C, 0x24, 0xFC, // mov ecx, [esp-4]   -> 1 read
        0x87, 0x54, 0x24, 0xFC, // xchg [esp-4], edx  -> 1 read + 1 write
    ];
    let out = run_chain(&Arc::new(code), 0, &ChainConfig::default());
    let ops: Vec<AccessKind> = out.trace.events.iter().map(|e| e.kind).collect();
    assert_eq!(
        ops,
        vec![
            AccessKind::Write,
            AccessKind::Read,
            AccessKind::Read,
            AccessKind::Read,
            AccessKind::Write
        ]
    );
}
