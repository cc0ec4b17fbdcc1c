//! Renewability manager: sessions, block delivery, policies, violations.
//!
//! Sans-IO: every entry point takes the current time and returns the
//! messages to send. Session state changes are journaled to `sessions.log`
//! and replayed on open, so a restarted server resumes where it stopped.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::config::{OnViolation, Policy, PolicyConfig, ServerConfig};
use crate::blockdb::{BlockCatalog, BlockVersion, CatalogError, Manifest, PickStrategy};
use crate::engines::{guard_eval, guard_generate, renew, EngineError, HashVariant, Recipe, RenewParams};
use crate::extractor::EngineHint;
use crate::protocol::{canonical_json, BlockErrCode, Message, PROTO_VERSION};
use crate::vm::{MobileBlockPayload, Prng};

pub const SESSIONS_LOG: &str = "sessions.log";
pub const EVENTS_LOG: &str = "events.log";

mod hex64 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(D::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Violated,
    Stopped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServedEntry {
    pub block_id: u32,
    pub version_id: u64,
    pub group_id: u32,
    pub expected_hash: u64,
    pub t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PendingChallenge {
    pub block_id: u32,
    pub version_id: u64,
    pub expected: u64,
    pub deadline_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionRecord {
    pub session_id: String,
    pub app_id: String,
    pub group_id: u32,
    pub status: SessionStatus,
    pub conflicted: bool,
    pub started_ms: u64,
    pub ledger: Vec<ServedEntry>,
    /// flush_id → absolute deadline.
    pub flushes: BTreeMap<u64, u64>,
    pub challenges: BTreeMap<u64, PendingChallenge>,
    /// Blocks believed mapped on the client: block → (version, served at).
    pub loaded: BTreeMap<u32, (u64, u64)>,
    pub level: u32,
    periodic_sent: u64,
    last_challenge_ms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    FlushTimeout,
    RaMismatch,
    RaTimeout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolationEvent {
    pub session_id: String,
    pub kind: ViolationKind,
    pub t: u64,
    pub details: Value,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ServiceStats {
    pub block_requests: u64,
    pub blocks_served: u64,
    pub bytes_served: u64,
    pub service_us: u64,
}

#[derive(Debug, Error)]
pub enum ManagerError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown block {0}")]
    UnknownBlock(u32),
    #[error("block {0} is not loaded in the session")]
    NotLoaded(u32),
    #[error("block {block_id} is not regenerated by engine {engine}")]
    UnknownEngine { block_id: u32, engine: String },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogRecord {
    Hello {
        session_id: String,
        app_id: String,
        group_id: u32,
        t: u64,
    },
    Conflict {
        session_id: String,
        t: u64,
    },
    Served {
        session_id: String,
        block_id: u32,
        version_id: u64,
        group_id: u32,
        #[serde(with = "hex64")]
        hash: u64,
        t: u64,
    },
    Flush {
        session_id: String,
        flush_id: u64,
        blocks: Vec<u32>,
        deadline_ms: u64,
        due: Option<u64>,
        t: u64,
    },
    FlushDone {
        session_id: String,
        flush_id: u64,
        timed_out: bool,
        t: u64,
    },
    Level {
        session_id: String,
        level: u32,
        t: u64,
    },
    Challenge {
        session_id: String,
        challenge_id: u64,
        block_id: u32,
        version_id: u64,
        #[serde(with = "hex64")]
        expected: u64,
        deadline_ms: u64,
        t: u64,
    },
    ChallengeDone {
        session_id: String,
        challenge_id: u64,
        t: u64,
    },
    Status {
        session_id: String,
        status: SessionStatus,
        t: u64,
    },
}

impl LogRecord {
    fn session_id(&self) -> &str {
        match self {
            LogRecord::Hello { session_id, .. }
            | LogRecord::Conflict { session_id, .. }
            | LogRecord::Served { session_id, .. }
            | LogRecord::Flush { session_id, .. }
            | LogRecord::FlushDone { session_id, .. }
            | LogRecord::Level { session_id, .. }
            | LogRecord::Challenge { session_id, .. }
            | LogRecord::ChallengeDone { session_id, .. }
            | LogRecord::Status { session_id, .. } => session_id,
        }
    }
}

fn append_line(file: &mut Option<File>, v: &Value) -> io::Result<()> {
    if let Some(f) = file {
        let mut line = canonical_json(v);
        line.push('\n');
        f.write_all(line.as_bytes())?;
    }
    Ok(())
}

fn block_err(code: BlockErrCode, message: impl Into<String>) -> Message {
    Message::BlockErr { code, message: message.into() }
}

pub struct Manager {
    policy: PolicyConfig,
    strategy: PickStrategy,
    policy_epoch: u64,
    catalog: BlockCatalog,
    manifest: Manifest,
    sessions: BTreeMap<String, SessionRecord>,
    attached: BTreeSet<String>,
    prng: Prng,
    next_flush_id: u64,
    next_challenge_id: u64,
    sessions_log: Option<File>,
    events_log: Option<File>,
    violations: Vec<ViolationEvent>,
    anomalies: Vec<Value>,
    stats: ServiceStats,
    /// Blocks served so far, per block; drives round-robin picks.
    cursors: BTreeMap<u32, u64>,
}

impl Manager {
    /// A manager without persistence over an already loaded catalog.
    pub fn in_memory(catalog: BlockCatalog, config: &ServerConfig) -> Manager {
        Manager {
            policy: config.policy.clone(),
            strategy: config.strategy,
            policy_epoch: config.policy_epoch,
            catalog,
            manifest: Manifest::default(),
            sessions: BTreeMap::new(),
            attached: BTreeSet::new(),
            prng: Prng::new(config.seed),
            next_flush_id: 1,
            next_challenge_id: 1,
            sessions_log: None,
            events_log: None,
            violations: Vec::new(),
            anomalies: Vec::new(),
            stats: ServiceStats::default(),
            cursors: BTreeMap::new(),
        }
    }

    /// Open the catalog and manifest named by `config`, replay the session
    /// journal, and append to it from now on.
    pub fn open(config: &ServerConfig) -> Result<Manager, ManagerError> {
        config.validate().map_err(ManagerError::Config)?;
        let catalog = BlockCatalog::open(&config.catalog)?;
        let manifest = Manifest::load(&config.catalog)?;
        let mut m = Manager::in_memory(catalog, config).with_manifest(manifest);
        let dir = config.state_dir();
        fs::create_dir_all(dir)?;
        let journal = dir.join(SESSIONS_LOG);
        if journal.exists() {
            let text = fs::read_to_string(&journal)?;
            let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
            for (i, line) in lines.iter().enumerate() {
                match serde_json::from_str::<LogRecord>(line) {
                    Ok(rec) => m.apply(&rec),
                    // A torn final line from a killed process is dropped.
                    Err(_) if i + 1 == lines.len() => {}
                    Err(e) => return Err(ManagerError::Config(format!("{SESSIONS_LOG} line {}: {e}", i + 1))),
                }
            }
            // Draw fresh randomness after a restart.
            m.prng = Prng::new(config.seed ^ lines.len() as u64);
        }
        m.sessions_log = Some(OpenOptions::new().create(true).append(true).open(journal)?);
        m.events_log = Some(OpenOptions::new().create(true).append(true).open(dir.join(EVENTS_LOG))?);
        Ok(m)
    }

    pub fn with_manifest(mut self, manifest: Manifest) -> Self {
        self.manifest = manifest;
        self
    }

    pub fn catalog(&self) -> &BlockCatalog {
        &self.catalog
    }

    pub fn catalog_mut(&mut self) -> &mut BlockCatalog {
        &mut self.catalog
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    pub fn session(&self, session_id: &str) -> Option<&SessionRecord> {
        self.sessions.get(session_id)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SessionRecord> {
        self.sessions.values()
    }

    pub fn violations(&self) -> &[ViolationEvent] {
        &self.violations
    }

    pub fn anomalies(&self) -> &[Value] {
        &self.anomalies
    }

    pub fn stats(&self) -> ServiceStats {
        self.stats
    }

    pub fn is_attached(&self, session_id: &str) -> bool {
        self.attached.contains(session_id)
    }

    /// The connection carrying `session_id` went away.
    pub fn detach(&mut self, session_id: &str) {
        self.attached.remove(session_id);
    }

    fn apply(&mut self, rec: &LogRecord) {
        if let LogRecord::Hello { session_id, app_id, group_id, t } = rec {
            let level = self.policy.level_at(0);
            self.sessions.entry(session_id.clone()).or_insert_with(|| SessionRecord {
                session_id: session_id.clone(),
                app_id: app_id.clone(),
                group_id: *group_id,
                status: SessionStatus::Active,
                conflicted: false,
                started_ms: *t,
                ledger: Vec::new(),
                flushes: BTreeMap::new(),
                challenges: BTreeMap::new(),
                loaded: BTreeMap::new(),
                level,
                periodic_sent: 0,
                last_challenge_ms: *t,
            });
            return;
        }
        let Some(s) = self.sessions.get_mut(rec.session_id()) else {
            return;
        };
        match rec {
            LogRecord::Hello { .. } => unreachable!(),
            LogRecord::Conflict { .. } => s.conflicted = true,
            LogRecord::Served { block_id, version_id, group_id, hash, t, .. } => {
                s.ledger.push(ServedEntry {
                    block_id: *block_id,
                    version_id: *version_id,
                    group_id: *group_id,
                    expected_hash: *hash,
                    t: *t,
                });
                s.loaded.insert(*block_id, (*version_id, *t));
            }
            LogRecord::Flush { flush_id, blocks, deadline_ms, due, .. } => {
                s.flushes.insert(*flush_id, *deadline_ms);
                if blocks.is_empty() {
                    s.loaded.clear();
                } else {
                    for b in blocks {
                        s.loaded.remove(b);
                    }
                }
                if let Some(d) = due {
                    s.periodic_sent = *d;
                }
                self.next_flush_id = self.next_flush_id.max(flush_id + 1);
            }
            LogRecord::FlushDone { flush_id, .. } => {
                s.flushes.remove(flush_id);
            }
            LogRecord::Level { level, .. } => s.level = *level,
            LogRecord::Challenge { challenge_id, block_id, version_id, expected, deadline_ms, t, .. } => {
                s.challenges.insert(
                    *challenge_id,
                    PendingChallenge {
                        block_id: *block_id,
                        version_id: *version_id,
                        expected: *expected,
                        deadline_ms: *deadline_ms,
                    },
                );
                s.last_challenge_ms = *t;
                self.next_challenge_id = self.next_challenge_id.max(challenge_id + 1);
            }
            LogRecord::ChallengeDone { challenge_id, .. } => {
                s.challenges.remove(challenge_id);
            }
            LogRecord::Status { status, .. } => s.status = *status,
        }
    }

    fn record(&mut self, rec: LogRecord) {
        self.apply(&rec);
        let v = serde_json::to_value(&rec).expect("records serialize");
        // Journal failures must not take delivery down; they surface as anomalies.
        if let Err(e) = append_line(&mut self.sessions_log, &v) {
            self.anomalies.push(json!({"kind": "journal_error", "error": e.to_string()}));
        }
    }

    fn event_line(&mut self, v: Value) {
        if let Err(e) = append_line(&mut self.events_log, &v) {
            self.anomalies.push(json!({"kind": "journal_error", "error": e.to_string()}));
        }
    }

    fn anomaly(&mut self, session_id: &str, now: u64, details: Value) -> Message {
        let line = json!({"type": "anomaly", "session_id": session_id, "t": now, "details": details.clone()});
        self.anomalies.push(line.clone());
        self.event_line(line);
        Message::event("protocol_anomaly", details)
    }

    /// Handle one inbound message on a connection. `bound` holds the session
    /// the connection announced in its `HELLO`.
    pub fn handle(&mut self, bound: &mut Option<String>, msg: Message, now: u64) -> Vec<Message> {
        match msg {
            Message::Hello { app_id, session_id, proto_version } => {
                if proto_version != PROTO_VERSION {
                    return vec![block_err(BlockErrCode::IncompatibleSession, "unsupported protocol version")];
                }
                self.hello(bound, app_id, session_id, now)
            }
            Message::BlockReq { session_id, block_id } => vec![self.block_request(&session_id, block_id, now)],
            Message::FlushAck { flush_id, flushed, deferred } => {
                let Some(sid) = bound.clone() else {
                    return vec![self.anomaly("", now, json!({"reason": "FLUSH_ACK before HELLO"}))];
                };
                let known = self.sessions.get(&sid).is_some_and(|s| s.flushes.contains_key(&flush_id));
                if !known {
                    return vec![self.anomaly(&sid, now, json!({"reason": "unknown flush_id", "flush_id": flush_id}))];
                }
                self.record(LogRecord::FlushDone { session_id: sid.clone(), flush_id, timed_out: false, t: now });
                let _ = (flushed, deferred);
                Vec::new()
            }
            Message::RaResponse { challenge_id, hash } => {
                let Some(sid) = bound.clone() else {
                    return vec![self.anomaly("", now, json!({"reason": "RA_RESPONSE before HELLO"}))];
                };
                let Some(pending) = self.sessions.get(&sid).and_then(|s| s.challenges.get(&challenge_id).copied())
                else {
                    return vec![self.anomaly(
                        &sid,
                        now,
                        json!({"reason": "unknown challenge_id", "challenge_id": challenge_id}),
                    )];
                };
                self.record(LogRecord::ChallengeDone { session_id: sid.clone(), challenge_id, t: now });
                if hash == pending.expected {
                    return Vec::new();
                }
                let details = json!({
                    "challenge_id": challenge_id,
                    "block_id": pending.block_id,
                    "version_id": pending.version_id,
                    "expected": format!("{:016x}", pending.expected),
                    "got": format!("{hash:016x}"),
                });
                let mut out = Vec::new();
                self.violation(&sid, ViolationKind::RaMismatch, now, details, &mut out);
                out.into_iter().map(|(_, m)| m).collect()
            }
            Message::Event { kind, details } => {
                let sid = bound.clone().unwrap_or_default();
                self.event_line(
                    json!({"type": "client_event", "session_id": sid, "t": now, "kind": kind, "details": details}),
                );
                Vec::new()
            }
            other => {
                let sid = bound.clone().unwrap_or_default();
                vec![self.anomaly(&sid, now, json!({"reason": "unexpected message", "msg_type": other.msg_type()}))]
            }
        }
    }

    fn hello(&mut self, bound: &mut Option<String>, app_id: String, session_id: String, now: u64) -> Vec<Message> {
        if let Some(s) = self.sessions.get(&session_id) {
            // A reconnect after a drop or a server restart resumes the session;
            // a second live claim or a different application is a conflict.
            if s.app_id != app_id || self.attached.contains(&session_id) || s.conflicted {
                if !s.conflicted {
                    self.record(LogRecord::Conflict { session_id: session_id.clone(), t: now });
                }
                return vec![block_err(BlockErrCode::IncompatibleSession, "session id already in use")];
            }
            let group_id = s.group_id;
            self.attached.insert(session_id.clone());
            *bound = Some(session_id);
            return vec![Message::HelloOk { group_id, policy_epoch: self.policy_epoch }];
        }
        let groups: Vec<u32> = self.catalog.groups().keys().copied().collect();
        let group_id = if groups.is_empty() { 0 } else { groups[self.prng.index(groups.len())] };
        self.record(LogRecord::Hello { session_id: session_id.clone(), app_id, group_id, t: now });
        self.attached.insert(session_id.clone());
        *bound = Some(session_id);
        vec![Message::HelloOk { group_id, policy_epoch: self.policy_epoch }]
    }

    fn block_request(&mut self, session_id: &str, block_id: u32, now: u64) -> Message {
        let started = Instant::now();
        self.stats.block_requests += 1;
        let Some(s) = self.sessions.get(session_id) else {
            return block_err(BlockErrCode::IncompatibleSession, "unknown session");
        };
        if s.conflicted {
            return block_err(BlockErrCode::IncompatibleSession, "session id conflict");
        }
        if s.status == SessionStatus::Stopped {
            return block_err(BlockErrCode::ServingStopped, "serving stopped for this session");
        }
        if !self.catalog.contains_block(block_id) {
            return block_err(BlockErrCode::UnknownBlock, format!("unknown block {block_id}"));
        }
        let strategy = match self.policy.kind {
            Policy::Evolving { .. } => PickStrategy::Evolving { level: s.level },
            _ => self.strategy,
        };
        let group_id = s.group_id;
        let cursor = self.cursors.entry(block_id).or_default();
        let n = *cursor;
        *cursor += 1;
        let v = match self.catalog.pick_with_cursor(block_id, group_id, strategy, now, &mut self.prng, n) {
            Ok(v) => v,
            Err(e) => return block_err(BlockErrCode::IncompatibleSession, e.to_string()),
        };
        let (version_id, vgroup, hash, payload) = (v.version_id, v.group_id, v.expected_hash, v.payload.clone());
        self.record(LogRecord::Served {
            session_id: session_id.to_string(),
            block_id,
            version_id,
            group_id: vgroup,
            hash,
            t: now,
        });
        self.stats.blocks_served += 1;
        self.stats.bytes_served += payload.len() as u64;
        self.stats.service_us += started.elapsed().as_micros() as u64;
        Message::BlockResp { version_id, group_id: vgroup, payload }
    }

    /// Send a flush of `blocks` (empty = all) to a session.
    pub fn flush(&mut self, session_id: &str, blocks: Vec<u32>, now: u64) -> Result<Message, ManagerError> {
        if !self.sessions.contains_key(session_id) {
            return Err(ManagerError::UnknownSession(session_id.into()));
        }
        Ok(self.send_flush(session_id, blocks, None, now))
    }

    fn send_flush(&mut self, session_id: &str, blocks: Vec<u32>, due: Option<u64>, now: u64) -> Message {
        let flush_id = self.next_flush_id;
        let deadline = self.policy.flush_deadline_ms;
        self.record(LogRecord::Flush {
            session_id: session_id.to_string(),
            flush_id,
            blocks: blocks.clone(),
            deadline_ms: now + deadline,
            due,
            t: now,
        });
        Message::Flush { flush_id, blocks, deadline_ms: deadline.min(u32::MAX as u64) as u32 }
    }

    /// Challenge the copy of `block_id` the session was last served.
    /// A `sample_count` of 0 hashes the whole code region.
    pub fn challenge(
        &mut self,
        session_id: &str,
        block_id: u32,
        sample_count: u32,
        variant: HashVariant,
        now: u64,
    ) -> Result<Message, ManagerError> {
        let s = self.sessions.get(session_id).ok_or_else(|| ManagerError::UnknownSession(session_id.into()))?;
        let (version_id, _) = *s.loaded.get(&block_id).ok_or(ManagerError::NotLoaded(block_id))?;
        let stored = self.catalog.get(block_id, version_id).ok_or(ManagerError::UnknownBlock(block_id))?;
        let code =
            MobileBlockPayload::unpack(&stored.payload).map_err(|e| CatalogError::BadPayload(e.to_string()))?.code;
        let m = if sample_count == 0 || sample_count as usize > code.len() { code.len() as u32 } else { sample_count };
        let spec = guard_generate(block_id, self.prng.next_u64(), m, variant)?;
        let nonce = self.prng.next_u64();
        let expected = guard_eval(&code, &spec, nonce)?;
        let challenge_id = self.next_challenge_id;
        self.record(LogRecord::Challenge {
            session_id: session_id.to_string(),
            challenge_id,
            block_id,
            version_id,
            expected,
            deadline_ms: now + self.policy.flush_deadline_ms,
            t: now,
        });
        Ok(Message::RaChallenge { challenge_id, block_id, nonce, walk_seed: spec.walk_seed, sample_count: m, variant })
    }

    fn violation(
        &mut self,
        session_id: &str,
        kind: ViolationKind,
        now: u64,
        details: Value,
        out: &mut Vec<(String, Message)>,
    ) {
        let ev = ViolationEvent { session_id: session_id.to_string(), kind, t: now, details };
        let mut line = serde_json::to_value(&ev).expect("events serialize");
        line["type"] = json!("violation");
        self.event_line(line);
        out.push((
            session_id.to_string(),
            Message::event("violation", json!({"kind": kind, "details": ev.details.clone()})),
        ));
        self.violations.push(ev);
        let action = match self.policy.kind {
            Policy::RaReactive { on_violation, .. } => on_violation,
            _ => OnViolation::NotifyOnly,
        };
        let status = match action {
            OnViolation::StopServing => SessionStatus::Stopped,
            OnViolation::FlushAll => {
                let m = self.send_flush(session_id, Vec::new(), None, now);
                out.push((session_id.to_string(), m));
                SessionStatus::Violated
            }
            OnViolation::NotifyOnly => SessionStatus::Violated,
        };
        let current = self.sessions.get(session_id).map(|s| s.status);
        if current != Some(status) && current != Some(SessionStatus::Stopped) {
            self.record(LogRecord::Status { session_id: session_id.to_string(), status, t: now });
        }
    }

    /// Run deadlines and policies for every session.
    pub fn tick(&mut self, now: u64) -> Vec<(String, Message)> {
        let ids: Vec<String> = self.sessions.keys().cloned().collect();
        let mut out = Vec::new();
        for id in ids {
            out.extend(self.tick_session(&id, now));
        }
        out
    }

    /// Run deadlines and policies for one session.
    pub fn tick_session(&mut self, session_id: &str, now: u64) -> Vec<(String, Message)> {
        let mut out = Vec::new();
        let Some(s) = self.sessions.get(session_id) else {
            return out;
        };
        let late_flushes: Vec<u64> = s.flushes.iter().filter(|(_, d)| now > **d).map(|(id, _)| *id).collect();
        let late_challenges: Vec<(u64, PendingChallenge)> =
            s.challenges.iter().filter(|(_, c)| now > c.deadline_ms).map(|(id, c)| (*id, *c)).collect();
        for flush_id in late_flushes {
            self.record(LogRecord::FlushDone { session_id: session_id.to_string(), flush_id, timed_out: true, t: now });
            self.violation(session_id, ViolationKind::FlushTimeout, now, json!({"flush_id": flush_id}), &mut out);
        }
        for (challenge_id, c) in late_challenges {
            self.record(LogRecord::ChallengeDone { session_id: session_id.to_string(), challenge_id, t: now });
            let details = json!({"challenge_id": challenge_id, "block_id": c.block_id});
            self.violation(session_id, ViolationKind::RaTimeout, now, details, &mut out);
        }

        let s = &self.sessions[session_id];
        if !self.attached.contains(session_id) || s.conflicted || s.status == SessionStatus::Stopped {
            return out;
        }
        let elapsed = now.saturating_sub(s.started_ms);
        let sid = session_id.to_string();
        match self.policy.kind.clone() {
            Policy::None => {}
            Policy::TimedRefresh { interval_ms, scope } => {
                let due = elapsed / interval_ms;
                if due > s.periodic_sent {
                    let m = self.send_flush(&sid, scope.blocks(), Some(due), now);
                    out.push((sid, m));
                }
            }
            Policy::PerBlockTtl { ttl_ms } => {
                let expired: Vec<u32> =
                    s.loaded.iter().filter(|(_, (_, t))| now >= t + ttl_ms).map(|(b, _)| *b).collect();
                if !expired.is_empty() {
                    let m = self.send_flush(&sid, expired, None, now);
                    out.push((sid, m));
                }
            }
            Policy::Evolving { .. } => {
                let level = self.policy.level_at(elapsed);
                if level > s.level {
                    self.record(LogRecord::Level { session_id: sid.clone(), level, t: now });
                    let m = self.send_flush(&sid, Vec::new(), None, now);
                    out.push((sid, m));
                }
            }
            Policy::RaReactive { challenge_interval_ms, sample_count, variant, .. } => {
                if now >= s.last_challenge_ms + challenge_interval_ms && !s.loaded.is_empty() {
                    let blocks: Vec<u32> = s.loaded.keys().copied().collect();
                    let block = blocks[self.prng.index(blocks.len())];
                    if let Ok(m) = self.challenge(&sid, block, sample_count, variant, now) {
                        out.push((sid, m));
                    }
                }
            }
        }
        out
    }

    /// Produce and store a new version of a block with its registered engine.
    pub fn regenerate_on_demand(
        &mut self,
        block_id: u32,
        engine: EngineHint,
        seed: u64,
        params: RenewParams,
        now: u64,
    ) -> Result<u64, ManagerError> {
        let entry = self.manifest.entries.get(&block_id).ok_or(ManagerError::UnknownBlock(block_id))?;
        if entry.recipe.hint() != engine {
            return Err(ManagerError::UnknownEngine { block_id, engine: engine.to_string() });
        }
        let renewed = renew(&entry.base, &entry.recipe, seed, params)?;
        let group_id = entry.group_id;
        let v = BlockVersion::new(&renewed.payload, group_id, engine.as_str(), seed, params.level).with_ttl(now, None);
        let version_id = self.catalog.put_version(v)?;
        if let Some(k) = renewed.new_key {
            if let Some(e) = self.manifest.entries.get_mut(&block_id) {
                if let Recipe::Wbc { key, .. } = &mut e.recipe {
                    *key = k;
                }
            }
            if let Some(root) = self.catalog.root().map(Path::to_path_buf) {
                self.manifest.save(&root)?;
            }
        }
        self.event_line(json!({
            "type": "regenerated",
            "block_id": block_id,
            "version_id": version_id,
            "engine": engine.as_str(),
            "seed": seed,
            "t": now,
        }));
        Ok(version_id)
    }
}
