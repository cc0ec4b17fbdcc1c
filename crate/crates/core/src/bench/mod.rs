//! Experiment harness: the program corpus, protection pipeline and sweeps.

pub mod experiments;
pub mod programs;
pub mod protect;
pub mod report;

use std::io;

use thiserror::Error;

use crate::blockdb::CatalogError;
use crate::client::ClientError;
use crate::engines::EngineError;
use crate::extractor::ExtractError;
use crate::vm::VmError;

pub use programs::{
    gen_crunch, gen_program, gen_random, gen_spin, gen_wbcapp, wbcapp_reference_output, CrunchParams, RandomParams,
    WbcAppParams,
};
pub use protect::{apply_isr, protect, protect_semantic, select_hot, ProtectOptions, Protected, SemanticProtected};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown program '{0}'")]
    UnknownProgram(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("empty profile")]
    EmptyProfile,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(String),
    #[error("{0}")]
    Internal(String),
}

impl From<csv::Error> for BenchError {
    fn from(e: csv::Error) -> Self {
        BenchError::Csv(e.to_string())
    }
}
