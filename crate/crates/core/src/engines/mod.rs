//! Renewable block engines.

pub mod edit;
pub mod guard;
pub mod isr;
pub mod procedural;
pub mod renew;
pub mod semantic;
pub mod syntactic;
pub mod wbc;

use thiserror::Error;

pub use guard::{guard_eval, guard_generate, GuardSpec, HashVariant};
pub use isr::{isr_translate, IsrBundle};
pub use procedural::{static_to_procedural, ProceduralConversion};
pub use renew::{renew, Recipe, RenewParams, Renewed};
pub use semantic::{diff_variants, generate_semantic_variants, SemanticTransform, VariantSet};
pub use syntactic::{syntactic_diversify, DiversificationKnobs};
pub use wbc::{
    wbc_emit_block, wbc_generate, wbc_reference_decrypt, wbc_reference_encrypt, WbcKey, WbcTemplate, WhiteBoxTables,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("bad parameter: {0}")]
    BadKnob(String),
    #[error("unsupported input: {0}")]
    Unsupported(String),
    #[error("unknown section {0}")]
    UnknownSection(u32),
    #[error("unknown function {0}")]
    UnknownFunction(u32),
    #[error("variants do not share function and section ids")]
    IdSpaceMismatch,
    #[error("malformed engine input: {0}")]
    Malformed(String),
    #[error("{0}")]
    Internal(String),
}
