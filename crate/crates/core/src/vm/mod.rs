//! The toy virtual machine: instruction set, image format, block container
//! and interpreter.

pub mod asm;
pub mod gmrt;
pub mod hash;
pub mod image;
pub mod isa;
pub mod machine;
pub mod memory;
pub mod payload;
pub mod prng;

pub use asm::{Asm, Label};
pub use gmrt::{Gmrt, GmrtEntry};
pub use hash::{fnv1a64, Fnv1a64};
pub use image::{DataSection, FunctionDef, ImageError, LayoutTable, ProgramImage, RelocationRecord};
pub use isa::{ins, Instruction, Opcode, RegSet};
pub use machine::{
    FetchedBlock, FlushOutcome, MobileHost, NullHost, ProfileReport, RunOutcome, StaticHost, Vm, VmError,
};
pub use payload::{MobileBlockPayload, PayloadError};
pub use prng::Prng;
