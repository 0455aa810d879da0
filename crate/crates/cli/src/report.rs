//! The structured report document (schema 1) and its text projection.
//!
//! The JSON document is fully deterministic for a fixed input and
//! configuration: timing appears only as synthetic ticks derived from
//! retired instruction counts, never as wall-clock measurements, so runs
//! with different worker counts serialize byte-identically.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use emuscan_core::detector::{DetectionReport, GetPcKind, ScanConfig, VerdictLabel};
use emuscan_core::InitPolicy;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema: u32,
    pub tool: ToolInfo,
    pub mode: String,
    pub config: ConfigEcho,
    pub buffers: Vec<BufferReport>,
    pub totals: Totals,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl ToolInfo {
    pub fn current() -> ToolInfo {
        ToolInfo { name: "emuscan".into(), version: env!("CARGO_PKG_VERSION").into() }
    }
}

/// Detection-relevant configuration. Worker count is deliberately absent:
/// it cannot influence results, and the document must not change with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub profile: String,
    pub threshold: u32,
    pub insn_budget: u32,
    pub wall_budget_ms: u64,
    pub chunk_max: usize,
    pub overlap: usize,
    pub seed: u64,
    pub register_policy: String,
    pub getpc_modes: Vec<String>,
    pub loop_guard_window: usize,
    pub syscall_model: bool,
    pub prefix_only: bool,
}

impl ConfigEcho {
    pub fn new(
        profile: &str,
        scan: &ScanConfig,
        chunk_max: usize,
        overlap: usize,
        seed: u64,
        prefix_only: bool,
    ) -> ConfigEcho {
        let mut modes = Vec::new();
        for (on, name) in [
            (scan.getpc_modes.call_rel, "call_rel"),
            (scan.getpc_modes.fstenv, "fstenv"),
            (scan.getpc_modes.call_indirect, "call_indirect"),
            (scan.getpc_modes.stack_scan_fs, "stack_scan_fs"),
        ] {
            if on {
                modes.push(name.to_string());
            }
        }
        ConfigEcho {
            profile: profile.into(),
            threshold: scan.payload_read_threshold,
            insn_budget: scan.instruction_budget,
            wall_budget_ms: scan.wall_budget_ms,
            chunk_max,
            overlap,
            seed,
            register_policy: match scan.register_policy {
                InitPolicy::Zeroed => "zeroed".into(),
                InitPolicy::Randomized { .. } => "randomized".into(),
                InitPolicy::Fixed { .. } => "fixed".into(),
            },
            getpc_modes: modes,
            loop_guard_window: scan.loop_guard_window,
            syscall_model: scan.syscall_model,
            prefix_only,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceReport {
    pub getpc_kind: String,
    pub getpc_at: u32,
    pub recovered: u32,
    pub distinct_reads: u32,
    pub termination: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferReport {
    pub id: u32,
    pub source: String,
    pub stream_offset: u64,
    pub length: u32,
    pub verdict: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<EvidenceReport>,
    pub chains: u32,
    pub skipped: u32,
    pub terminations: BTreeMap<String, u32>,
    /// Chains that produced at least one GetPC event.
    pub getpc_chains: u32,
    pub max_distinct_reads: u32,
    pub retired_total: u64,
    pub virtual_ticks: u64,
}

impl BufferReport {
    pub fn from_detection(id: u32, report: &DetectionReport) -> BufferReport {
        let evidence = report.verdict.evidence.map(|ev| EvidenceReport {
            getpc_kind: kind_name(ev.getpc.kind).into(),
            getpc_at: ev.getpc.at_eip,
            recovered: ev.getpc.recovered,
            distinct_reads: ev.distinct_reads,
            termination: ev.termination.name().into(),
        });
        BufferReport {
            id,
            source: report.origin.source.clone(),
            stream_offset: report.origin.stream_offset,
            length: report.length,
            verdict: verdict_name(report.verdict.label).into(),
            offset: report.verdict.offset,
            evidence,
            chains: report.chains.len() as u32,
            skipped: report.skipped,
            terminations: report
                .termination_histogram()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            getpc_chains: report.chains.iter().filter(|c| c.getpc_total > 0).count() as u32,
            max_distinct_reads: report.max_distinct_reads(),
            retired_total: report.retired_total,
            virtual_ticks: report.virtual_ticks,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub buffers: u32,
    pub convicted: u32,
    pub chains: u64,
    pub skipped: u64,
    pub retired: u64,
    pub virtual_ticks: u64,
}

impl Totals {
    pub fn add(&mut self, b: &BufferReport) {
        self.buffers += 1;
        if b.verdict == "shellcode" {
            self.convicted += 1;
        }
        self.chains += u64::from(b.chains);
        self.skipped += u64::from(b.skipped);
        self.retired += b.retired_total;
        self.virtual_ticks += b.virtual_ticks;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub rows: Vec<EvalRow>,
    pub samples: Vec<SampleResult>,
    pub background: Vec<BackgroundRow>,
    pub mismatches: u32,
}

/// Confusion-matrix row: one variant under one profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variant: String,
    pub profile: String,
    pub samples: u32,
    pub detected: u32,
    pub evaded: u32,
    pub expected: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub name: String,
    pub variant: String,
    pub baseline: String,
    pub extended: String,
    pub expected_baseline: String,
    pub expected_extended: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundRow {
    pub kind: String,
    pub bytes: u64,
    pub buffers: u32,
    pub false_positives_baseline: u32,
    pub false_positives_extended: u32,
}

pub fn verdict_name(label: VerdictLabel) -> &'static str {
    match label {
        VerdictLabel::Shellcode => "shellcode",
        VerdictLabel::Benign => "benign",
    }
}

pub fn kind_name(kind: GetPcKind) -> &'static str {
    kind.name()
}

/// Renders the human-readable buffer line.
pub fn buffer_line(b: &BufferReport) -> String {
    match (&b.offset, &b.evidence) {
        (Some(off), Some(ev)) => format!(
            "buffer {} @{} len {}: SHELLCODE at offset {} [{} at {:#010x}, recovered {:#010x}, {} distinct reads, {}]",
            b.id, b.stream_offset, b.length, off, ev.getpc_kind, ev.getpc_at, ev.recovered,
            ev.distinct_reads, ev.termination
        ),
        _ => format!(
            "buffer {} @{} len {}: benign ({} chains, {} getpc, max reads {})",
            b.id, b.stream_offset, b.length, b.chains, b.getpc_chains, b.max_distinct_reads
        ),
    }
}
