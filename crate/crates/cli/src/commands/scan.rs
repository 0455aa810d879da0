use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use emuscan_core::detector::scan_buffer;
use emuscan_core::ingest::{chunk_stream, load_input, InputFormat};

use crate::report::{
    buffer_line, BufferReport, ConfigEcho, ReportDocument, ToolInfo, Totals, SCHEMA_VERSION,
};
use crate::{Format, ScanArgs};

pub fn run(args: &ScanArgs) -> Result<ExitCode> {
    if args.overlap >= args.chunk_max {
        bail!("--overlap must be smaller than --chunk-max");
    }
    args.detector.init_workers();
    let config = args.detector.scan_config(args.profile);

    let (source, path) = if args.input == "-" {
        ("stdin".to_string(), None)
    } else {
        (args.input.clone(), Some(Path::new(&args.input)))
    };
    let format = match args.format {
        Format::Raw => InputFormat::Raw,
        Format::Hex => InputFormat::Hex,
    };
    let stream = load_input(path, format).with_context(|| format!("reading {source}"))?;
    if stream.is_empty() {
        bail!("empty input");
    }

    let mut chunks = chunk_stream(&stream, &source, args.chunk_max, args.overlap);
    if args.prefix_only {
        chunks.truncate(1);
    }

    let started = Instant::now();
    let mut buffers = Vec::with_capacity(chunks.len());
    let mut totals = Totals::default();
    for (id, chunk) in chunks.iter().enumerate() {
        let detection = scan_buffer(chunk, &config);
        let buffer = BufferReport::from_detection(id as u32, &detection);
        println!("{}", buffer_line(&buffer));
        totals.add(&buffer);
        buffers.push(buffer);
    }

    let document = ReportDocument {
        schema: SCHEMA_VERSION,
        tool: ToolInfo::current(),
        mode: "scan".into(),
        config: ConfigEcho::new(
            args.profile.name(),
            &config,
            args.chunk_max,
            args.overlap,
            args.detector.seed,
            args.prefix_only,
        ),
        buffers,
        totals,
        eval: None,
    };

    println!(
        "scanned {} buffer(s), {} chain(s), {} skipped offset(s): {} convicted",
        document.totals.buffers, document.totals.chains, document.totals.skipped,
        document.totals.convicted
    );
    println!("elapsed {:.1} ms", started.elapsed().as_secs_f64() * 1e3);

    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&document)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }

    Ok(if document.totals.convicted > 0 { ExitCode::from(1) } else { ExitCode::SUCCESS })
}
