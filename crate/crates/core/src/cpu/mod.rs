//! A deliberately small IA-32 model: enough of the instruction set to run
//! polymorphic decryptors and the classic GetPC idioms, with every memory
//! operand recorded as an access event. Anything outside the subset stops
//! the chain instead of guessing.

pub mod chain;
pub mod decode;
pub mod exec;
pub mod memory;
pub mod state;

pub use chain::{run_chain, ChainConfig, ChainOutcome, ExecutionTrace, TerminationReason};
pub use decode::{decode_instruction, Cond, DecodeError, Instruction, Mnemonic, Operand, Reg, Reg8};
pub use memory::{AccessEvent, AccessKind, MemoryImage, Region, RegionKind};
pub use state::{init_state, CpuState, Flags, InitPolicy, LayoutError, MemoryLayout};
