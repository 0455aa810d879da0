use std::process::ExitCode;

use anyhow::{bail, Context, Result};

use emuscan_core::corpus::{generate, SidecarMeta, Variant};

use crate::GenArgs;

pub fn run(args: &GenArgs) -> Result<ExitCode> {
    let Some(variant) = Variant::parse(&args.variant) else {
        let names: Vec<&str> = Variant::all().iter().map(|v| v.name()).collect();
        bail!("unknown variant {:?}; expected one of {}", args.variant, names.join(", "));
    };
    if args.count == 0 {
        bail!("--count must be at least 1");
    }
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    for i in 0..u64::from(args.count) {
        let seed = args.seed + i;
        let sample = generate(variant, args.payload_len, args.junk_density, seed)?;
        let stem = format!("{}_s{:08}", variant.name(), seed);
        let bin = args.out.join(format!("{stem}.bin"));
        let toml = args.out.join(format!("{stem}.toml"));
        std::fs::write(&bin, &sample.bytes).with_context(|| format!("writing {}", bin.display()))?;
        std::fs::write(&toml, SidecarMeta::for_sample(&sample).to_toml())
            .with_context(|| format!("writing {}", toml.display()))?;
        println!(
            "wrote {} ({} bytes, payload {} @ {}) + sidecar",
            bin.display(),
            sample.bytes.len(),
            sample.plaintext_payload.len(),
            sample.payload_offset,
        );
    }
    Ok(ExitCode::SUCCESS)
}
