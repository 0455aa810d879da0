//! Network-level emulation shellcode detection.
//!
//! The crate emulates every byte offset of a captured network buffer on a
//! small IA-32 CPU model and flags buffers where a GetPC idiom is followed
//! by enough distinct reads of the buffer itself — the behavioral signature
//! of a polymorphic decryptor. It also ships the generators for detectable
//! shellcodes, their evasion variants, and benign background traffic used
//! to characterize the heuristic.
//!
//! Modules:
//! - [`cpu`]: instruction decoding, machine state, memory map, chain execution
//! - [`detector`]: per-offset scanning and the GetPC-then-payload-reads heuristic
//! - [`corpus`]: ground-truth sample and background generators
//! - [`ingest`]: input loading and stream chunking

pub mod corpus;
pub mod cpu;
pub mod detector;
pub mod ingest;

pub use cpu::chain::{run_chain, ChainConfig, ChainOutcome, ExecutionTrace, TerminationReason};
pub use cpu::state::{init_state, InitPolicy, MemoryLayout};
pub use detector::{scan_buffer, DetectionReport, ScanConfig, Verdict, VerdictLabel};
pub use ingest::DataBuffer;
