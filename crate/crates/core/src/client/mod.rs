//! Client runtime: downloader, binder and protected execution.

pub mod binder;
pub mod transport;

use std::collections::BTreeMap;
use std::io;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

pub use binder::{answer_challenge, session_id_from_seed, Binder, Download};
pub use transport::{LinkModel, LoopbackTransport, TcpTransport, Transport, TransportError};

use crate::vm::machine::DEFAULT_BUDGET;
use crate::vm::{ProgramImage, Vm, VmError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClientConfig {
    pub server: String,
    pub session_seed: u64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub app_id: String,
    pub request_timeout_ms: u64,
    /// Fault injection: never acknowledge flushes.
    pub suppress_flush_ack: bool,
    /// Fault injection: keep the first copy of every block and map it again
    /// whenever the block is re-downloaded.
    pub replay_stale: bool,
    pub budget: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            server: "127.0.0.1:7070".into(),
            session_seed: 1,
            max_retries: 5,
            backoff_ms: 50,
            app_id: "renewal-app".into(),
            request_timeout_ms: 5000,
            suppress_flush_ack: false,
            replay_stale: false,
            budget: DEFAULT_BUDGET,
        }
    }
}

impl ClientConfig {
    pub fn with_seed(seed: u64) -> Self {
        ClientConfig { session_seed: seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.request_timeout_ms == 0 {
            return Err(ClientError::Config("request timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DownloaderStats {
    pub blocks_transferred: u64,
    pub bytes_transferred: u64,
    pub wall_wait_ms: u64,
    pub virtual_wait_ms: u64,
    pub flushes_handled: u64,
    pub challenges_answered: u64,
    pub retried_requests: u64,
    pub reconnects: u64,
    pub per_block: BTreeMap<u32, u64>,
}

impl DownloaderStats {
    fn record_transfer(&mut self, block_id: u32, bytes: u64) {
        self.blocks_transferred += 1;
        self.bytes_transferred += bytes;
        *self.per_block.entry(block_id).or_default() += 1;
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunReport {
    pub output: Vec<u8>,
    pub exit_code: u32,
    pub stats: DownloaderStats,
    pub instructions: u64,
    pub virtual_ms: u64,
    pub wall_ms: u64,
}

/// One row of the client stats CSV.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StatsRow {
    pub wall_ms: u64,
    pub vm_instructions: u64,
    pub blocks_transferred: u64,
    pub bytes_transferred: u64,
    pub wait_ms: u64,
    pub flushes_handled: u64,
}

impl RunReport {
    pub fn stats_row(&self) -> StatsRow {
        StatsRow {
            wall_ms: self.wall_ms,
            vm_instructions: self.instructions,
            blocks_transferred: self.stats.blocks_transferred,
            bytes_transferred: self.stats.bytes_transferred,
            wait_ms: self.stats.virtual_wait_ms,
            flushes_handled: self.stats.flushes_handled,
        }
    }

    pub fn write_stats_csv(&self, w: impl io::Write) -> Result<(), ClientError> {
        let mut out = csv::Writer::from_writer(w);
        out.serialize(self.stats_row()).map_err(|e| io::Error::other(e.to_string()))?;
        out.flush()?;
        Ok(())
    }
}

/// Run a static image with `binder` resolving its mobile blocks. `seed`
/// drives heap placement.
pub fn run_protected<T: Transport>(
    image: &ProgramImage,
    binder: &mut Binder<T>,
    input: &[u8],
    seed: u64,
) -> Result<RunReport, ClientError> {
    let started = Instant::now();
    let mut vm = Vm::load_image(image, seed)?;
    vm.set_budget(binder.config().budget);
    let result = vm.run(input, binder);
    if let Some(fatal) = binder.take_fatal() {
        return Err(fatal);
    }
    let out = result?;
    Ok(RunReport {
        output: out.output,
        exit_code: out.exit_code,
        stats: binder.stats().clone(),
        instructions: out.instructions,
        virtual_ms: out.virtual_ms,
        wall_ms: started.elapsed().as_millis() as u64,
    })
}
