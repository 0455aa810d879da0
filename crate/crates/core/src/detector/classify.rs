//! The conviction rule: a GetPC event followed by enough distinct reads of
//! the recovered code region.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::cpu::chain::{ExecutionTrace, TerminationReason, TraceLayout};
use crate::cpu::memory::AccessKind;

use super::getpc::{detect_getpc_events, GetPcEvent, GetPcKind};
use super::ScanConfig;

#[derive(Debug, Copy, Clone, Eq, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictLabel {
    Shellcode,
    Benign,
}

/// What convicted a chain.
#[derive(Debug, Copy, Clone, Eq, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub getpc: GetPcEvent,
    /// Distinct read addresses in the convicting region after the event.
    pub distinct_reads: u32,
    pub termination: TerminationReason,
}

#[derive(Debug, Clone, Eq, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: VerdictLabel,
    /// Entry offset of the convicting chain; present iff shellcode.
    pub offset: Option<u32>,
    pub evidence: Option<Evidence>,
}

impl Verdict {
    pub fn benign() -> Verdict {
        Verdict { label: VerdictLabel::Benign, offset: None, evidence: None }
    }

    pub fn is_shellcode(&self) -> bool {
        self.label == VerdictLabel::Shellcode
    }
}

/// The region whose reads count toward conviction for a given event kind:
/// the data buffer for call/fstenv GetPC, and additionally the stack for a
/// TIB stack probe (that idiom recovers a stack range, not a buffer address).
fn in_convicting_region(kind: GetPcKind, layout: &TraceLayout, addr: u32) -> bool {
    match kind {
        GetPcKind::FsStackProbe => layout.in_buffer(addr) || layout.in_stack(addr),
        _ => layout.in_buffer(addr),
    }
}

/// Counts distinct read addresses after `pos` that fall in the event's
/// convicting region.
fn distinct_reads_after(trace: &ExecutionTrace, pos: usize, kind: GetPcKind) -> u32 {
    let mut seen: HashSet<u32> = HashSet::new();
    for ev in &trace.events[pos.min(trace.events.len())..] {
        if ev.kind == AccessKind::Read && in_convicting_region(kind, &trace.layout, ev.addr) {
            seen.insert(ev.addr);
        }
    }
    seen.len() as u32
}

/// Classifies one trace. In-buffer reads with no preceding GetPC never
/// convict; a GetPC with too few distinct reads after it never convicts.
///
/// Only the earliest event per convicting-region class needs counting: a
/// later event of the same class sees a subset of the reads, so its count
/// can only be lower.
pub fn classify_trace(trace: &ExecutionTrace, config: &ScanConfig) -> Verdict {
    let events = detect_getpc_events(trace, &config.getpc_modes);
    classify_with_events(trace, &events, config)
}

pub(crate) fn classify_with_events(
    trace: &ExecutionTrace,
    events: &[GetPcEvent],
    config: &ScanConfig,
) -> Verdict {
    let first_buffer = events.iter().find(|e| e.kind != GetPcKind::FsStackProbe);
    let first_probe = events.iter().find(|e| e.kind == GetPcKind::FsStackProbe);

    let mut best: Option<Evidence> = None;
    for event in [first_buffer, first_probe].into_iter().flatten() {
        let count = distinct_reads_after(trace, event.pos, event.kind);
        if count >= config.payload_read_threshold {
            let ev = Evidence { getpc: *event, distinct_reads: count, termination: trace.termination };
            best = match best {
                Some(b) if b.getpc.pos <= ev.getpc.pos => Some(b),
                _ => Some(ev),
            };
        }
    }

    match best {
        Some(evidence) => Verdict {
            label: VerdictLabel::Shellcode,
            offset: Some(trace.entry_offset),
            evidence: Some(evidence),
        },
        None => Verdict::benign(),
    }
}

/// Total distinct in-buffer read addresses over the whole chain, for report
/// summaries.
pub(crate) fn distinct_in_buffer_reads(trace: &ExecutionTrace) -> u32 {
    let mut seen: HashSet<u32> = HashSet::new();
    for ev in &trace.events {
        if ev.kind == AccessKind::Read && ev.in_buffer {
            seen.insert(ev.addr);
        }
    }
    seen.len() as u32
}
