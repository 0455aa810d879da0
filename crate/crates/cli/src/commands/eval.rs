use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use emuscan_core::corpus::{generate_background, BackgroundKind, SidecarMeta};
use emuscan_core::detector::{scan_buffer, ScanConfig, VerdictLabel};
use emuscan_core::ingest::{chunk_stream, DataBuffer, Origin};

use crate::report::{
    verdict_name, BackgroundRow, BufferReport, ConfigEcho, EvalRow, EvalSection, ReportDocument,
    SampleResult, ToolInfo, Totals, SCHEMA_VERSION,
};
use crate::{EvalArgs, Profile};

struct LoadedSample {
    name: String,
    bytes: Vec<u8>,
    meta: SidecarMeta,
}

fn load_corpus(args: &EvalArgs) -> Result<Vec<LoadedSample>> {
    let mut samples = Vec::new();
    let entries = std::fs::read_dir(&args.corpus)
        .with_context(|| format!("reading corpus dir {}", args.corpus.display()))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("bin") {
            continue;
        }
        let sidecar_path = path.with_extension("toml");
        let name = path.file_stem().unwrap().to_string_lossy().to_string();
        let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let text = std::fs::read_to_string(&sidecar_path)
            .with_context(|| format!("missing sidecar {}", sidecar_path.display()))?;
        let meta = SidecarMeta::from_toml(&text)
            .with_context(|| format!("parsing {}", sidecar_path.display()))?;
        samples.push(LoadedSample { name, bytes, meta });
    }
    if samples.is_empty() {
        bail!("no samples (*.bin with *.toml sidecars) in {}", args.corpus.display());
    }
    samples.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(samples)
}

fn scan_sample(sample: &LoadedSample, config: &ScanConfig) -> VerdictLabel {
    let buffer = DataBuffer {
        bytes: sample.bytes.clone(),
        base: emuscan_core::cpu::state::DEFAULT_BUFFER_BASE,
        origin: Origin { source: sample.name.clone(), stream_offset: 0 },
    };
    scan_buffer(&buffer, config).verdict.label
}

pub fn run(args: &EvalArgs) -> Result<ExitCode> {
    args.detector.init_workers();
    let baseline = args.detector.scan_config(Profile::Baseline);
    let extended = args.detector.scan_config(Profile::Extended);
    let samples = load_corpus(args)?;

    let started = Instant::now();
    let mut totals = Totals::default();
    let mut buffers = Vec::new();
    let mut results = Vec::new();
    let mut mismatches = 0u32;

    for (id, sample) in samples.iter().enumerate() {
        let buffer = DataBuffer {
            bytes: sample.bytes.clone(),
            base: emuscan_core::cpu::state::DEFAULT_BUFFER_BASE,
            origin: Origin { source: sample.name.clone(), stream_offset: 0 },
        };
        let detection = scan_buffer(&buffer, &baseline);
        let base_label = detection.verdict.label;
        let ext_label = scan_sample(sample, &extended);
        let ok = base_label == sample.meta.expected_baseline
            && ext_label == sample.meta.expected_extended;
        if !ok {
            mismatches += 1;
        }
        let report = BufferReport::from_detection(id as u32, &detection);
        totals.add(&report);
        buffers.push(report);
        results.push(SampleResult {
            name: sample.name.clone(),
            variant: sample.meta.variant.name().into(),
            baseline: verdict_name(base_label).into(),
            extended: verdict_name(ext_label).into(),
            expected_baseline: verdict_name(sample.meta.expected_baseline).into(),
            expected_extended: verdict_name(sample.meta.expected_extended).into(),
            ok,
        });
    }

    // Confusion matrix: variant × profile.
    let mut rows: Vec<EvalRow> = Vec::new();
    let mut by_variant: BTreeMap<String, Vec<&SampleResult>> = BTreeMap::new();
    for r in &results {
        by_variant.entry(r.variant.clone()).or_default().push(r);
    }
    for (variant, group) in &by_variant {
        for profile in ["baseline", "extended"] {
            let expected_detect = group.iter().any(|r| {
                let e = if profile == "baseline" { &r.expected_baseline } else { &r.expected_extended };
                e == "shellcode"
            });
            let detected = group
                .iter()
                .filter(|r| {
                    let v = if profile == "baseline" { &r.baseline } else { &r.extended };
                    v == "shellcode"
                })
                .count() as u32;
            let n = group.len() as u32;
            let ok = group.iter().all(|r| {
                let (v, e) = if profile == "baseline" {
                    (&r.baseline, &r.expected_baseline)
                } else {
                    (&r.extended, &r.expected_extended)
                };
                v == e
            });
            rows.push(EvalRow {
                variant: variant.clone(),
                profile: profile.into(),
                samples: n,
                detected,
                evaded: n - detected,
                expected: if expected_detect { "detect".into() } else { "evade".into() },
                ok,
            });
        }
    }

    // Background false positives.
    let mut background = Vec::new();
    for (i, kind) in BackgroundKind::all().into_iter().enumerate() {
        let data = generate_background(kind, args.background_kib * 1024, args.detector.seed + i as u64);
        let chunks = chunk_stream(&data, kind.name(), args.chunk_max, args.overlap);
        let mut fp_base = 0u32;
        let mut fp_ext = 0u32;
        for chunk in &chunks {
            if scan_buffer(chunk, &baseline).verdict.is_shellcode() {
                fp_base += 1;
            }
            if scan_buffer(chunk, &extended).verdict.is_shellcode() {
                fp_ext += 1;
            }
        }
        // A baseline false positive contradicts the corpus ground truth.
        mismatches += fp_base;
        background.push(BackgroundRow {
            kind: kind.name().into(),
            bytes: data.len() as u64,
            buffers: chunks.len() as u32,
            false_positives_baseline: fp_base,
            false_positives_extended: fp_ext,
        });
    }

    println!(
        "eval: {} samples, {} KiB background per kind, seed {}",
        results.len(),
        args.background_kib,
        args.detector.seed
    );
    println!("{:<20} {:<9} {:>3} {:>9} {:>7}  {:<8} ok", "variant", "profile", "n", "detected", "evaded", "expected");
    for row in &rows {
        println!(
            "{:<20} {:<9} {:>3} {:>9} {:>7}  {:<8} {}",
            row.variant, row.profile, row.samples, row.detected, row.evaded, row.expected,
            if row.ok { "yes" } else { "NO" }
        );
    }
    for bg in &background {
        println!(
            "background {:<14} {} buffer(s): fp baseline {}, fp extended {}",
            bg.kind, bg.buffers, bg.false_positives_baseline, bg.false_positives_extended
        );
    }
    println!("mismatches: {}", mismatches);
    println!("elapsed {:.1} ms", started.elapsed().as_secs_f64() * 1e3);

    let document = ReportDocument {
        schema: SCHEMA_VERSION,
        tool: ToolInfo::current(),
        mode: "eval".into(),
        config: ConfigEcho::new("both", &baseline, args.chunk_max, args.overlap, args.detector.seed, false),
        buffers,
        totals,
        eval: Some(EvalSection { rows, samples: results, background, mismatches }),
    };
    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&document)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }

    Ok(if mismatches > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}
