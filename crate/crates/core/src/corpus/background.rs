//! Benign background traffic for false-positive evaluation.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Copy, Clone, Eq, PartialEq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    UniformRandom,
    AsciiText,
    HttpLike,
}

impl BackgroundKind {
    pub fn name(self) -> &'static str {
        match self {
            BackgroundKind::UniformRandom => "uniform_random",
            BackgroundKind::AsciiText => "ascii_text",
            BackgroundKind::HttpLike => "http_like",
        }
    }

    pub fn all() -> [BackgroundKind; 3] {
        [BackgroundKind::UniformRandom, BackgroundKind::AsciiText, BackgroundKind::HttpLike]
    }
}

/// Deterministic background bytes of the requested kind and length.
pub fn generate_background(kind: BackgroundKind, length: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        BackgroundKind::UniformRandom => {
            let mut out = vec![0u8; length];
            rng.fill_bytes(&mut out);
            out
        }
        BackgroundKind::AsciiText => ascii_text(&mut rng, length),
        BackgroundKind::HttpLike => http_like(&mut rng, length),
    }
}

fn ascii_text(rng: &mut ChaCha8Rng, length: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(length);
    while out.len() < length {
        let word_len = rng.gen_range(2..10);
        for _ in 0..word_len {
            out.push(rng.gen_range(b'a'..=b'z'));
        }
        match rng.gen_range(0..10) {
            0 => out.extend_from_slice(b".\n"),
            1 => out.push(b','),
            _ => {}
        }
        out.push(b' ');
    }
    out.truncate(length);
    out
}

fn http_like(rng: &mut ChaCha8Rng, length: usize) -> Vec<u8> {
    const METHODS: [&str; 4] = ["GET", "POST", "HEAD", "PUT"];
    const AGENTS: [&str; 3] = ["probe/1.0", "fetcher/2.3", "crawler/0.9"];
    let mut out = Vec::with_capacity(length);
    while out.len() < length {
        let method = METHODS[rng.gen_range(0..METHODS.len())];
        let path: String = (0..rng.gen_range(1..4))
            .map(|_| format!("/{}", word(rng)))
            .collect();
        let body_len = rng.gen_range(0..512usize);
        out.extend_from_slice(
            format!(
                "{method} {path} HTTP/1.1\r\nHost: {}.example\r\nUser-Agent: {}\r\nAccept: */*\r\nContent-Length: {body_len}\r\n\r\n",
                word(rng),
                AGENTS[rng.gen_range(0..AGENTS.len())],
            )
            .as_bytes(),
        );
        for _ in 0..body_len {
            out.push(rng.gen_range(0x20..0x7F));
        }
    }
    out.truncate(length);
    out
}

fn word(rng: &mut ChaCha8Rng) -> String {
    (0..rng.gen_range(3..9)).map(|_| rng.gen_range(b'a'..=b'z') as char).collect()
}
