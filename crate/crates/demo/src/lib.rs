//! wasm-bindgen surface for the browser demo.
//!
//! Three operations, all JSON-string in/out so the page stays a thin
//! renderer: generate a corpus sample, scan a hex buffer from every offset,
//! and trace a single chain. The functions are pure Rust and run the same
//! on native targets, which is how they are tested.

use serde_json::json;
use wasm_bindgen::prelude::*;

use emuscan_core::corpus::{generate, Variant};
use emuscan_core::detector::{detect_getpc_events, scan_buffer, GetPcModes, ScanConfig};
use emuscan_core::ingest::{decode_hex, DataBuffer, Origin};
use emuscan_core::{run_chain, ChainConfig};

/// Inputs beyond this size make the per-offset table unwieldy in a page.
const DEMO_MAX_BYTES: usize = 16 * 1024;
const TRACE_EVENT_CAP: usize = 512;

fn hex_of(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ")
}

fn err(msg: impl std::fmt::Display) -> String {
    json!({ "ok": false, "error": msg.to_string() }).to_string()
}

fn parse_input(hex: &str) -> Result<Vec<u8>, String> {
    let bytes = decode_hex(hex).map_err(|e| e.to_string())?;
    if bytes.is_empty() {
        return Err("empty input".into());
    }
    if bytes.len() > DEMO_MAX_BYTES {
        return Err(format!("demo caps input at {DEMO_MAX_BYTES} bytes"));
    }
    Ok(bytes)
}

fn config_for(profile: &str, threshold: u32, insn_budget: u32, syscall_model: bool) -> ScanConfig {
    let mut config = match profile {
        "extended" => ScanConfig::extended(),
        _ => ScanConfig::baseline(),
    };
    config.payload_read_threshold = threshold.max(1);
    config.instruction_budget = insn_budget.clamp(1, 1 << 20);
    config.syscall_model = syscall_model;
    config
}

/// Generates a corpus sample and returns it as annotated hex.
#[wasm_bindgen]
pub fn demo_generate(variant: &str, seed: u32, payload_len: u32, junk_density: f32) -> String {
    let Some(variant) = Variant::parse(variant) else {
        return err(format!("unknown variant {variant:?}"));
    };
    let payload_len = payload_len.clamp(1, 255) as usize;
    match generate(variant, payload_len, junk_density.clamp(0.0, 1.0), u64::from(seed)) {
        Ok(sample) => json!({
            "ok": true,
            "variant": sample.variant.name(),
            "seed": sample.seed,
            "hex": hex_of(&sample.bytes),
            "length": sample.bytes.len(),
            "entry_offset": sample.entry_offset,
            "payload_offset": sample.payload_offset,
            "payload_len": sample.plaintext_payload.len(),
            "key": sample.key,
            "expected_baseline": label_name(sample.expected_baseline),
            "expected_extended": label_name(sample.expected_extended),
        })
        .to_string(),
        Err(e) => err(e),
    }
}

fn label_name(label: emuscan_core::VerdictLabel) -> &'static str {
    match label {
        emuscan_core::VerdictLabel::Shellcode => "shellcode",
        emuscan_core::VerdictLabel::Benign => "benign",
    }
}

/// Scans hex bytes from every offset; returns the verdict plus one row per
/// offset for the heatmap.
#[wasm_bindgen]
pub fn demo_scan(hex: &str, profile: &str, threshold: u32, insn_budget: u32, syscall_model: bool) -> String {
    let bytes = match parse_input(hex) {
        Ok(b) => b,
        Err(e) => return err(e),
    };
    let config = config_for(profile, threshold, insn_budget, syscall_model);
    let buffer = DataBuffer {
        bytes,
        base: emuscan_core::cpu::state::DEFAULT_BUFFER_BASE,
        origin: Origin { source: "demo".into(), stream_offset: 0 },
    };
    let report = scan_buffer(&buffer, &config);
    let offsets: Vec<_> = report
        .chains
        .iter()
        .map(|c| {
            json!({
                "offset": c.offset,
                "retired": c.retired,
                "termination": c.termination.name(),
                "getpc": c.getpc_total,
                "reads": c.distinct_in_buffer_reads,
                "convicted": c.convicted,
            })
        })
        .collect();
    let evidence = report.verdict.evidence.map(|ev| {
        json!({
            "kind": ev.getpc.kind.name(),
            "at": format!("{:#010x}", ev.getpc.at_eip),
            "recovered": format!("{:#010x}", ev.getpc.recovered),
            "distinct_reads": ev.distinct_reads,
            "termination": ev.termination.name(),
        })
    });
    json!({
        "ok": true,
        "verdict": label_name(report.verdict.label),
        "offset": report.verdict.offset,
        "evidence": evidence,
        "length": report.length,
        "offsets": offsets,
    })
    .to_string()
}

/// Emulates one chain and returns its event log.
#[wasm_bindgen]
pub fn demo_trace(hex: &str, offset: u32, insn_budget: u32, syscall_model: bool) -> String {
    let bytes = match parse_input(hex) {
        Ok(b) => b,
        Err(e) => return err(e),
    };
    if offset as usize >= bytes.len() {
        return err("offset past the end of the buffer");
    }
    let config = ChainConfig {
        instruction_budget: insn_budget.clamp(1, 1 << 20),
        syscall_model,
        ..ChainConfig::default()
    };
    let outcome = run_chain(&std::sync::Arc::new(bytes), offset, &config);
    let trace = &outcome.trace;
    let events: Vec<_> = trace
        .events
        .iter()
        .take(TRACE_EVENT_CAP)
        .map(|e| {
            json!({
                "kind": format!("{:?}", e.kind).to_lowercase(),
                "addr": format!("{:#010x}", e.addr),
                "size": e.size,
                "at": format!("{:#010x}", e.at_eip),
                "in_buffer": e.in_buffer,
            })
        })
        .collect();
    let getpc: Vec<_> = detect_getpc_events(trace, &GetPcModes::extended())
        .iter()
        .map(|g| {
            json!({
                "kind": g.kind.name(),
                "at": format!("{:#010x}", g.at_eip),
                "recovered": format!("{:#010x}", g.recovered),
            })
        })
        .collect();
    json!({
        "ok": true,
        "offset": offset,
        "termination": trace.termination.name(),
        "retired": trace.retired,
        "virtual_ticks": trace.virtual_ticks,
        "events_total": trace.events.len(),
        "events": events,
        "getpc": getpc,
    })
    .to_string()
}
