//! The binder: resolves mobile blocks for the VM, applies flushes and answers
//! attestation challenges.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::transport::{Transport, TransportError};
use super::{ClientConfig, ClientError, DownloaderStats};
use crate::engines::{guard_eval, GuardSpec, HashVariant};
use crate::protocol::{BlockErrCode, Message, PROTO_VERSION};
use crate::vm::{fnv1a64, FetchedBlock, FlushOutcome, MobileBlockPayload, MobileHost, Prng, Vm, VmError};

/// One completed download.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Download {
    pub block_id: u32,
    pub version_id: u64,
    pub group_id: u32,
    /// FNV-1a of the received container.
    pub hash: u64,
    pub t_ms: u64,
}

/// Session id derived from a seed: 32 lowercase hex digits.
pub fn session_id_from_seed(seed: u64) -> String {
    let mut p = Prng::new(seed ^ 0x5E55_1011);
    format!("{:016x}{:016x}", p.next_u64(), p.next_u64())
}

/// Hash a challenge over the block's mapped code. `None` when the block has
/// no mapped copy.
pub fn answer_challenge(
    vm: &Vm,
    block_id: u32,
    nonce: u64,
    walk_seed: u64,
    sample_count: u32,
    variant: HashVariant,
) -> Option<Result<u64, String>> {
    let region = vm.mapped_code(block_id)?;
    let spec = GuardSpec { block_id, walk_seed, sample_count, variant };
    Some(guard_eval(region, &spec, nonce).map_err(|e| e.to_string()))
}

fn err_code_name(code: BlockErrCode) -> &'static str {
    match code {
        BlockErrCode::UnknownBlock => "unknown_block",
        BlockErrCode::ServingStopped => "serving_stopped",
        BlockErrCode::IncompatibleSession => "incompatible_session",
    }
}

pub struct Binder<T: Transport> {
    transport: T,
    config: ClientConfig,
    session_id: String,
    group_id: u32,
    stats: DownloaderStats,
    downloads: Vec<Download>,
    events: Vec<(String, Value)>,
    stale_cache: BTreeMap<u32, MobileBlockPayload>,
    last_reconnect: Option<Instant>,
    fatal: Option<ClientError>,
}

impl<T: Transport> Binder<T> {
    /// Open a session with `HELLO`.
    pub fn connect(transport: T, config: ClientConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let mut b = Binder {
            transport,
            session_id: session_id_from_seed(config.session_seed),
            config,
            group_id: 0,
            stats: DownloaderStats::default(),
            downloads: Vec::new(),
            events: Vec::new(),
            stale_cache: BTreeMap::new(),
            last_reconnect: None,
            fatal: None,
        };
        b.group_id = b.hello(0)?;
        Ok(b)
    }

    fn hello(&mut self, now_ms: u64) -> Result<u32, ClientError> {
        let msg = Message::Hello {
            app_id: self.config.app_id.clone(),
            session_id: self.session_id.clone(),
            proto_version: PROTO_VERSION,
        };
        match self.transport.request(&msg, now_ms) {
            Ok((Message::HelloOk { group_id, .. }, _)) => Ok(group_id),
            Ok((Message::BlockErr { code, message }, _)) => {
                Err(ClientError::Handshake(format!("{}: {message}", err_code_name(code))))
            }
            Ok((other, _)) => Err(ClientError::Handshake(format!("unexpected reply {:#04x}", other.msg_type()))),
            Err(e) => Err(ClientError::Handshake(e.to_string())),
        }
    }

    /// Reconnect and resume the session.
    fn resume(&mut self, now_ms: u64) -> Result<(), ClientError> {
        self.stats.reconnects += 1;
        self.last_reconnect = Some(Instant::now());
        self.transport.reconnect().map_err(|e| ClientError::Handshake(e.to_string()))?;
        let group = self.hello(now_ms)?;
        if group != self.group_id {
            return Err(ClientError::Handshake(format!(
                "session resumed in group {group}, expected {}",
                self.group_id
            )));
        }
        Ok(())
    }

    /// Resume the session, pausing between attempts while the server is
    /// unreachable, for up to one request timeout. Returns the time spent.
    fn reestablish(&mut self, now_ms: u64, last_error: &mut String) -> u64 {
        let mut spent = 0;
        loop {
            match self.resume(now_ms + spent) {
                Ok(()) => return spent,
                Err(e) => {
                    *last_error = e.to_string();
                    if last_error.contains("group") || spent >= self.config.request_timeout_ms {
                        return spent;
                    }
                }
            }
            spent += self.transport.pause(self.config.backoff_ms.max(1));
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn group_id(&self) -> u32 {
        self.group_id
    }

    pub fn stats(&self) -> &DownloaderStats {
        &self.stats
    }

    pub fn downloads(&self) -> &[Download] {
        &self.downloads
    }

    /// Server events received (kind, details).
    pub fn events(&self) -> &[(String, Value)] {
        &self.events
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    /// The first unrecoverable error seen while servicing the VM.
    pub fn take_fatal(&mut self) -> Option<ClientError> {
        self.fatal.take()
    }

    fn verify(
        &self,
        block_id: u32,
        version_id: u64,
        group_id: u32,
        bytes: &[u8],
    ) -> Result<MobileBlockPayload, String> {
        let p = MobileBlockPayload::unpack(bytes).map_err(|e| e.to_string())?;
        if p.block_id != block_id {
            return Err(format!("payload is block {}, requested {block_id}", p.block_id));
        }
        if p.version_id != version_id || p.group_id != group_id {
            return Err("payload header disagrees with the response".into());
        }
        if group_id != 0 && group_id != self.group_id {
            return Err(format!("group {group_id} served to a session pinned to {}", self.group_id));
        }
        if p.code.is_empty() {
            return Err("payload has no code".into());
        }
        Ok(p)
    }

    fn send_event(&mut self, kind: &str, details: Value, now_ms: u64) {
        let _ = self.transport.send(&Message::event(kind, details), now_ms);
    }

    fn handle_push(&mut self, vm: &mut Vm, msg: Message) -> Result<(), VmError> {
        let now = vm.now_ms();
        match msg {
            Message::Flush { flush_id, blocks, .. } => {
                self.stats.flushes_handled += 1;
                let targets = if blocks.is_empty() { vm.gmrt().resident() } else { blocks };
                let (mut flushed, mut deferred, mut unknown) = (Vec::new(), Vec::new(), Vec::new());
                for b in targets {
                    if !vm.gmrt().contains(b) {
                        unknown.push(b);
                        continue;
                    }
                    match vm.flush_block(b)? {
                        FlushOutcome::Flushed => flushed.push(b),
                        FlushOutcome::Deferred => deferred.push(b),
                    }
                }
                if !unknown.is_empty() {
                    self.send_event(
                        "protocol_anomaly",
                        json!({"reason": "flush of unknown blocks", "blocks": unknown}),
                        now,
                    );
                }
                if !self.config.suppress_flush_ack {
                    let _ = self.transport.send(&Message::FlushAck { flush_id, flushed, deferred }, now);
                }
            }
            Message::RaChallenge { challenge_id, block_id, nonce, walk_seed, sample_count, variant } => {
                self.stats.challenges_answered += 1;
                let hash = match answer_challenge(vm, block_id, nonce, walk_seed, sample_count, variant) {
                    Some(Ok(h)) => h,
                    Some(Err(reason)) => {
                        self.send_event(
                            "protocol_anomaly",
                            json!({"reason": reason, "challenge_id": challenge_id}),
                            now,
                        );
                        0
                    }
                    None => {
                        self.send_event(
                            "ra_block_not_loaded",
                            json!({"block_id": block_id, "challenge_id": challenge_id}),
                            now,
                        );
                        0
                    }
                };
                let _ = self.transport.send(&Message::RaResponse { challenge_id, hash }, now);
            }
            Message::Event { kind, details } => self.events.push((kind, details)),
            other => self.events.push(("unexpected".into(), json!({"msg_type": other.msg_type()}))),
        }
        Ok(())
    }
}

impl<T: Transport> MobileHost for Binder<T> {
    fn fetch_block(&mut self, block_id: u32, now_ms: u64) -> Result<FetchedBlock, VmError> {
        let mut waited = 0u64;
        let mut last_error = String::new();
        let req = Message::BlockReq { session_id: self.session_id.clone(), block_id };
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                self.stats.retried_requests += 1;
                waited += self.transport.pause(self.config.backoff_ms);
            }
            let started = Instant::now();
            let reply = self.transport.request(&req, now_ms + waited);
            self.stats.wall_wait_ms += started.elapsed().as_millis() as u64;
            match reply {
                Ok((Message::BlockResp { version_id, group_id, payload }, wait)) => {
                    waited += wait;
                    let mut p = match self.verify(block_id, version_id, group_id, &payload) {
                        Ok(p) => p,
                        Err(reason) => {
                            last_error = format!("payload corrupt: {reason}");
                            continue;
                        }
                    };
                    self.stats.record_transfer(block_id, payload.len() as u64);
                    self.stats.virtual_wait_ms += waited;
                    self.downloads.push(Download {
                        block_id,
                        version_id,
                        group_id,
                        hash: fnv1a64(&payload),
                        t_ms: now_ms,
                    });
                    if self.config.replay_stale {
                        p = self.stale_cache.entry(block_id).or_insert(p).clone();
                    }
                    return Ok(FetchedBlock { payload: p, wait_ms: waited });
                }
                Ok((Message::BlockErr { code, message }, _)) => {
                    return Err(VmError::MobileBlockUnavailable {
                        block_id,
                        reason: format!("{}: {message}", err_code_name(code)),
                    });
                }
                Ok((other, wait)) => {
                    waited += wait;
                    last_error = format!("unexpected reply {:#04x}", other.msg_type());
                }
                Err(e) => {
                    last_error = e.to_string();
                    if matches!(e, TransportError::Closed | TransportError::Timeout | TransportError::Io(_)) {
                        waited += self.reestablish(now_ms + waited, &mut last_error);
                    }
                }
            }
        }
        Err(VmError::MobileBlockUnavailable { block_id, reason: format!("gave up after retries: {last_error}") })
    }

    fn service(&mut self, vm: &mut Vm) -> Result<(), VmError> {
        let now = vm.now_ms();
        let msgs = match self.transport.poll(now) {
            Ok(m) => m,
            Err(_) => {
                let backoff = Duration::from_millis(self.config.backoff_ms);
                if self.last_reconnect.is_none_or(|t| t.elapsed() >= backoff) {
                    if let Err(e) = self.resume(now) {
                        if matches!(e, ClientError::Handshake(ref m) if m.contains("group")) {
                            self.fatal = Some(e);
                        }
                    }
                }
                return Ok(());
            }
        };
        for m in msgs {
            self.handle_push(vm, m)?;
        }
        Ok(())
    }
}

/// Blocks served per group in a download list, for group-consistency checks.
pub fn served_groups(downloads: &[Download]) -> BTreeSet<(u32, u32)> {
    downloads.iter().map(|d| (d.block_id, d.group_id)).collect()
}
