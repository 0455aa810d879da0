//! Per-offset scanning and the GetPC-then-payload-reads heuristic.
//!
//! Every byte of a buffer is treated as a potential entry point: each offset
//! gets a fresh chain, the resulting trace is classified, and the buffer is
//! convicted at the smallest convicting offset. Scanning is deterministic
//! for a fixed configuration regardless of how many workers run the chains.

mod classify;
mod getpc;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cpu::chain::{run_chain, ChainConfig, TerminationReason};
use crate::cpu::state::{InitPolicy, MemoryLayout};
use crate::ingest::DataBuffer;

pub use crate::cpu::chain::{LoopCheck, LoopGuard};
pub use classify::{classify_trace, Evidence, Verdict, VerdictLabel};
pub use getpc::{detect_getpc_events, GetPcEvent, GetPcKind, GetPcModes};

// Wall-clock shim: wasm32 has no monotonic clock, and the only thing the
// clock is used for is the between-chain wall budget, so elapsed time is
// simply zero there (the instruction budget still bounds every chain).
#[cfg(not(target_arch = "wasm32"))]
pub(crate) mod clock {
    pub use std::time::Instant;
}
#[cfg(target_arch = "wasm32")]
pub(crate) mod clock {
    #[derive(Debug, Copy, Clone)]
    pub struct Instant;
    impl Instant {
        pub fn now() -> Instant {
            Instant
        }
        pub fn elapsed(&self) -> std::time::Duration {
            std::time::Duration::ZERO
        }
    }
}

/// Scan parameters. The defaults are the baseline (libemu-parity) profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanConfig {
    /// Distinct reads of the recovered region required after a GetPC event.
    pub payload_read_threshold: u32,
    /// Max retired instructions per chain.
    pub instruction_budget: u32,
    /// Max milliseconds per buffer, enforced between chains; offsets not
    /// reached are reported as skipped.
    pub wall_budget_ms: u64,
    pub getpc_modes: GetPcModes,
    pub loop_guard_window: usize,
    pub register_policy: InitPolicy,
    pub syscall_model: bool,
    pub syscall_alloc: u32,
    pub syscall_copy: u32,
}

impl Default for ScanConfig {
    fn default() -> ScanConfig {
        ScanConfig::baseline()
    }
}

impl ScanConfig {
    pub fn baseline() -> ScanConfig {
        ScanConfig {
            payload_read_threshold: 8,
            instruction_budget: 8192,
            wall_budget_ms: 2000,
            getpc_modes: GetPcModes::baseline(),
            loop_guard_window: 64,
            register_policy: InitPolicy::Zeroed,
            syscall_model: false,
            syscall_alloc: crate::cpu::chain::DEFAULT_SYSCALL_ALLOC,
            syscall_copy: crate::cpu::chain::DEFAULT_SYSCALL_COPY,
        }
    }

    pub fn extended() -> ScanConfig {
        ScanConfig { getpc_modes: GetPcModes::extended(), ..ScanConfig::baseline() }
    }

    pub(crate) fn chain_config(&self, buffer_base: u32) -> ChainConfig {
        ChainConfig {
            instruction_budget: self.instruction_budget,
            loop_guard_window: self.loop_guard_window,
            policy: self.register_policy,
            layout: MemoryLayout { buffer_base, ..MemoryLayout::default() },
            syscall_model: self.syscall_model,
            syscall_alloc: self.syscall_alloc,
            syscall_copy: self.syscall_copy,
            seed_return_sentinel: false,
        }
    }
}

/// Per-offset result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSummary {
    pub offset: u32,
    pub retired: u32,
    pub termination: TerminationReason,
    /// GetPC events in execution order (capped; `getpc_total` is exact).
    pub getpc: Vec<GetPcEvent>,
    pub getpc_total: u32,
    /// Distinct in-buffer read addresses over the whole chain.
    pub distinct_in_buffer_reads: u32,
    pub convicted: bool,
}

const SUMMARY_EVENT_CAP: usize = 8;

/// The scan result for one buffer.
#[derive(Debug, Clone)]
pub struct DetectionReport {
    pub origin: crate::ingest::Origin,
    pub length: u32,
    pub verdict: Verdict,
    pub chains: Vec<ChainSummary>,
    /// Offsets never emulated because the wall budget ran out.
    pub skipped: u32,
    pub first_skipped: Option<u32>,
    pub retired_total: u64,
    /// Deterministic synthetic time (sum of chain ticks).
    pub virtual_ticks: u64,
    /// Real measured time; excluded from structured output so reports stay
    /// byte-identical across runs and worker counts.
    pub elapsed: Duration,
    pub config: ScanConfig,
}

impl DetectionReport {
    /// Termination histogram in stable (name-sorted) order.
    pub fn termination_histogram(&self) -> Vec<(&'static str, u32)> {
        let mut counts: std::collections::BTreeMap<&'static str, u32> = Default::default();
        for c in &self.chains {
            *counts.entry(c.termination.name()).or_default() += 1;
        }
        counts.into_iter().collect()
    }

    pub fn max_distinct_reads(&self) -> u32 {
        self.chains.iter().map(|c| c.distinct_in_buffer_reads).max().unwrap_or(0)
    }
}

fn summarize_offset(
    buffer: &Arc<Vec<u8>>,
    offset: u32,
    chain_config: &ChainConfig,
    config: &ScanConfig,
) -> (ChainSummary, Option<Verdict>) {
    let outcome = run_chain(buffer, offset, chain_config);
    let trace = &outcome.trace;
    let events = detect_getpc_events(trace, &config.getpc_modes);
    let verdict = classify::classify_with_events(trace, &events, config);
    let summary = ChainSummary {
        offset,
        retired: trace.retired,
        termination: trace.termination,
        getpc_total: events.len() as u32,
        getpc: events.into_iter().take(SUMMARY_EVENT_CAP).collect(),
        distinct_in_buffer_reads: classify::distinct_in_buffer_reads(trace),
        convicted: verdict.is_shellcode(),
    };
    let verdict = verdict.is_shellcode().then_some(verdict);
    (summary, verdict)
}

/// Scans a buffer from every offset and aggregates the verdicts.
///
/// The final verdict is shellcode at the smallest convicting offset. There
/// is no early exit: every offset (wall budget permitting) is emulated, so
/// the report does not depend on scheduling.
pub fn scan_buffer(buffer: &DataBuffer, config: &ScanConfig) -> DetectionReport {
    let started = clock::Instant::now();
    let shared = Arc::new(buffer.bytes.clone());
    let chain_config = config.chain_config(buffer.base);
    let len = buffer.bytes.len() as u32;
    let deadline = Duration::from_millis(config.wall_budget_ms);
    let out_of_time = AtomicBool::new(false);

    let run_one = |offset: u32| -> Option<(ChainSummary, Option<Verdict>)> {
        if out_of_time.load(Ordering::Relaxed) {
            return None;
        }
        let result = summarize_offset(&shared, offset, &chain_config, config);
        if started.elapsed() > deadline {
            out_of_time.store(true, Ordering::Relaxed);
        }
        Some(result)
    };

    #[cfg(feature = "parallel")]
    let per_offset: Vec<Option<(ChainSummary, Option<Verdict>)>> = {
        use rayon::prelude::*;
        (0..len).into_par_iter().map(run_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_offset: Vec<Option<(ChainSummary, Option<Verdict>)>> = (0..len).map(run_one).collect();

    let mut chains = Vec::with_capacity(per_offset.len());
    let mut verdict = Verdict::benign();
    let mut skipped = 0u32;
    let mut first_skipped = None;
    for (offset, slot) in per_offset.into_iter().enumerate() {
        match slot {
            Some((summary, v)) => {
                if verdict.label == VerdictLabel::Benign {
                    if let Some(v) = v {
                        verdict = v;
                    }
                }
                chains.push(summary);
            }
            None => {
                skipped += 1;
                if first_skipped.is_none() {
                    first_skipped = Some(offset as u32);
                }
            }
        }
    }

    let retired_total = chains.iter().map(|c| u64::from(c.retired)).sum();
    DetectionReport {
        origin: buffer.origin.clone(),
        length: len,
        verdict,
        chains,
        skipped,
        first_skipped,
        retired_total,
        virtual_ticks: retired_total * crate::cpu::exec::RDTSC_TICKS_PER_INSN,
        elapsed: started.elapsed(),
        config: config.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpu::chain::ChainConfig;
    use crate::ingest::Origin;

    fn buffer(bytes: Vec<u8>) -> DataBuffer {
        DataBuffer {
            bytes,
            base: crate::cpu::state::DEFAULT_BUFFER_BASE,
            origin: Origin { source: "test".into(), stream_offset: 0 },
        }
    }

    fn trace_of(code: &[u8]) -> crate::cpu::chain::ExecutionTrace {
        run_chain(&Arc::new(code.to_vec()), 0, &ChainConfig::default()).trace
    }

    /// CALL+0 / POP ESI / a loop reading 32 buffer bytes through ESI, with
    /// enough trailing data for the reads to stay inside the buffer.
    fn call_rel_reader() -> Vec<u8> {
        let mut code = vec![
            0xE8, 0x00, 0x00, 0x00, 0x00, // call +0
            0x5E, // pop esi
            0xB1, 0x20, // mov cl, 32
            // loop:
            0x8A, 0x06, // mov al, [esi]
            0x46, // inc esi
            0xFE, 0xC9, // dec cl
            0x75, 0xF9, // jnz loop
            0xC3, // ret
        ];
        code.resize(64, 0x41);
        code
    }

    #[test]
    fn call_rel_event_recovers_entry_plus_five() {
        let trace = trace_of(&[0xE8, 0x00, 0x00, 0x00, 0x00, 0x5E, 0x90]);
        let events = detect_getpc_events(&trace, &GetPcModes::baseline());
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, GetPcKind::CallRel);
        assert_eq!(events[0].recovered, trace.layout.buffer_base + 5);
    }

    #[test]
    fn nop_sled_has_no_events() {
        let trace = trace_of(&[0x90; 64]);
        assert!(detect_getpc_events(&trace, &GetPcModes::extended()).is_empty());
    }

    #[test]
    fn listing_one_needs_the_indirect_mode() {
        // push 0xc390565e / call esp — plus a reader loop after return
        // (esi already holds the return address, so skip the pop).
        let mut code = vec![0x68, 0x5E, 0x56, 0x90, 0xC3, 0xFF, 0xD4];
        code.extend_from_slice(&call_rel_reader()[6..]);
        let trace = trace_of(&code);
        assert!(detect_getpc_events(&trace, &GetPcModes::baseline()).is_empty());
        let extended = detect_getpc_events(&trace, &GetPcModes::extended());
        assert_eq!(extended.len(), 1);
        assert_eq!(extended[0].kind, GetPcKind::CallIndirect);
    }

    #[test]
    fn getpc_followed_by_reads_convicts() {
        let trace = trace_of(&call_rel_reader());
        let verdict = classify_trace(&trace, &ScanConfig::baseline());
        assert!(verdict.is_shellcode());
        let ev = verdict.evidence.unwrap();
        assert_eq!(ev.getpc.kind, GetPcKind::CallRel);
        assert!(ev.distinct_reads >= 32);
    }

    #[test]
    fn reads_without_getpc_stay_benign() {
        // mov esi, buffer_base ; mov cl, 64 ; read loop — plenty of in-buffer
        // reads but no GetPC event anywhere.
        let base = crate::cpu::state::DEFAULT_BUFFER_BASE;
        let mut code = vec![0xBE];
        code.extend_from_slice(&base.to_le_bytes());
        code.extend_from_slice(&[
            0xB1, 0x40, // mov cl, 64
            0x8A, 0x06, // mov al, [esi]
            0x46, // inc esi
            0xFE, 0xC9, // dec cl
            0x75, 0xF9, // jnz
        ]);
        code.resize(128, 0x90);
        let trace = trace_of(&code);
        let verdict = classify_trace(&trace, &ScanConfig::baseline());
        assert_eq!(verdict.label, VerdictLabel::Benign);
        assert!(classify::distinct_in_buffer_reads(&trace) >= 64);
    }

    #[test]
    fn empty_trace_is_benign() {
        let trace = trace_of(&[0xF4]); // hlt: unmodeled immediately
        assert_eq!(classify_trace(&trace, &ScanConfig::baseline()).label, VerdictLabel::Benign);
    }

    #[test]
    fn threshold_gates_conviction() {
        let trace = trace_of(&call_rel_reader());
        let mut config = ScanConfig::baseline();
        config.payload_read_threshold = 64; // the loop only reads 32 bytes
        assert_eq!(classify_trace(&trace, &config).label, VerdictLabel::Benign);
        config.payload_read_threshold = 32;
        assert!(classify_trace(&trace, &config).is_shellcode());
    }

    #[test]
    fn scan_convicts_at_the_smallest_offset() {
        let mut bytes = vec![0x90; 7];
        bytes.extend_from_slice(&call_rel_reader());
        let report = scan_buffer(&buffer(bytes), &ScanConfig::baseline());
        assert!(report.verdict.is_shellcode());
        // Offsets 0..=7 all slide into the getpc, so the earliest convicts.
        assert_eq!(report.verdict.offset, Some(0));
        assert_eq!(report.chains.len(), report.length as usize);
        assert_eq!(report.skipped, 0);
    }

    #[test]
    fn empty_buffer_scans_to_benign_with_zero_chains() {
        let report = scan_buffer(&buffer(Vec::new()), &ScanConfig::baseline());
        assert_eq!(report.verdict.label, VerdictLabel::Benign);
        assert!(report.chains.is_empty());
    }

    #[test]
    fn four_kib_of_seeded_random_bytes_is_benign() {
        use rand::{RngCore, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut bytes = vec![0u8; 4096];
        rng.fill_bytes(&mut bytes);
        let report = scan_buffer(&buffer(bytes), &ScanConfig::baseline());
        assert_eq!(report.verdict.label, VerdictLabel::Benign);
    }

    #[test]
    fn budget_ceiling_holds_for_every_chain() {
        let mut bytes = vec![0xB9, 0x40, 0x42, 0x0F, 0x00, 0xE2, 0xFE]; // mov ecx,1e6 ; loop $
        bytes.resize(64, 0x90);
        let config = ScanConfig { instruction_budget: 500, ..ScanConfig::baseline() };
        let report = scan_buffer(&buffer(bytes), &config);
        assert!(report.chains.iter().all(|c| c.retired <= 500));
    }
}
