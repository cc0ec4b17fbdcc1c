//! Server configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::blockdb::PickStrategy;
use crate::engines::HashVariant;

pub const DEFAULT_FLUSH_DEADLINE_MS: u64 = 2000;

/// Blocks targeted by a periodic flush.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Value", into = "Value")]
pub enum Scope {
    All,
    Blocks(Vec<u32>),
}

impl TryFrom<Value> for Scope {
    type Error = String;

    fn try_from(v: Value) -> Result<Self, String> {
        match v {
            Value::String(s) if s == "all" => Ok(Scope::All),
            Value::Array(items) => items
                .iter()
                .map(|x| x.as_u64().and_then(|b| u32::try_from(b).ok()).ok_or("scope entries must be block ids"))
                .collect::<Result<Vec<u32>, _>>()
                .map(Scope::Blocks)
                .map_err(str::to_string),
            _ => Err("scope must be \"all\" or a list of block ids".into()),
        }
    }
}

impl From<Scope> for Value {
    fn from(s: Scope) -> Value {
        match s {
            Scope::All => Value::String("all".into()),
            Scope::Blocks(b) => Value::Array(b.into_iter().map(Value::from).collect()),
        }
    }
}

impl Scope {
    /// Wire form: an empty list means every block.
    pub fn blocks(&self) -> Vec<u32> {
        match self {
            Scope::All => Vec::new(),
            Scope::Blocks(b) => b.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnViolation {
    StopServing,
    FlushAll,
    NotifyOnly,
}

fn default_variant() -> HashVariant {
    HashVariant::FnvWalk
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    /// Serve on demand, never flush.
    None,
    TimedRefresh {
        interval_ms: u64,
        scope: Scope,
    },
    PerBlockTtl {
        ttl_ms: u64,
    },
    /// `(after_ms, level)` pairs; the level in force raises the serving level.
    Evolving {
        schedule: Vec<(u64, u32)>,
    },
    RaReactive {
        challenge_interval_ms: u64,
        on_violation: OnViolation,
        /// Bytes hashed per challenge; 0 hashes the whole region.
        #[serde(default)]
        sample_count: u32,
        #[serde(default = "default_variant")]
        variant: HashVariant,
    },
}

fn default_deadline() -> u64 {
    DEFAULT_FLUSH_DEADLINE_MS
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    #[serde(flatten)]
    pub kind: Policy,
    #[serde(default = "default_deadline")]
    pub flush_deadline_ms: u64,
}

impl PolicyConfig {
    pub fn new(kind: Policy) -> Self {
        PolicyConfig { kind, flush_deadline_ms: DEFAULT_FLUSH_DEADLINE_MS }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.flush_deadline_ms == 0 {
            return Err("flush_deadline_ms must be positive".into());
        }
        match &self.kind {
            Policy::TimedRefresh { interval_ms: 0, .. } => Err("interval_ms must be positive".into()),
            Policy::PerBlockTtl { ttl_ms: 0 } => Err("ttl_ms must be positive".into()),
            Policy::RaReactive { challenge_interval_ms: 0, .. } => Err("challenge_interval_ms must be positive".into()),
            Policy::Evolving { schedule } if schedule.windows(2).any(|w| w[0].0 > w[1].0) => {
                Err("evolving schedule must be sorted by after_ms".into())
            }
            _ => Ok(()),
        }
    }

    /// Serving level at `elapsed_ms` into a session.
    pub fn level_at(&self, elapsed_ms: u64) -> u32 {
        match &self.kind {
            Policy::Evolving { schedule } => {
                schedule.iter().take_while(|(after, _)| *after <= elapsed_ms).last().map_or(1, |(_, l)| *l)
            }
            _ => 1,
        }
    }
}

fn default_port() -> u16 {
    7070
}

fn default_tick() -> u64 {
    10
}

fn default_epoch() -> u64 {
    1
}

fn default_strategy() -> PickStrategy {
    PickStrategy::RandomLive
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub catalog: PathBuf,
    /// Directory for `sessions.log` and `events.log`; defaults to the catalog.
    #[serde(default)]
    pub state_dir: Option<PathBuf>,
    #[serde(default = "default_port")]
    pub port: u16,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_strategy")]
    pub strategy: PickStrategy,
    pub policy: PolicyConfig,
    #[serde(default = "default_tick")]
    pub tick_ms: u64,
    #[serde(default = "default_epoch")]
    pub policy_epoch: u64,
}

impl ServerConfig {
    pub fn new(catalog: impl Into<PathBuf>, policy: PolicyConfig) -> Self {
        ServerConfig {
            catalog: catalog.into(),
            state_dir: None,
            port: default_port(),
            seed: 0,
            strategy: default_strategy(),
            policy,
            tick_ms: default_tick(),
            policy_epoch: default_epoch(),
        }
    }

    pub fn state_dir(&self) -> &Path {
        self.state_dir.as_deref().unwrap_or(&self.catalog)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| format!("{}: {e}", path.as_ref().display()))?;
        let cfg: ServerConfig = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.tick_ms == 0 {
            return Err("tick_ms must be positive".into());
        }
        self.policy.validate()
    }

    /// Canonical JSON form.
    pub fn to_json(&self) -> String {
        crate::protocol::canonical_json(&serde_json::to_value(self).expect("config serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_json() {
        let mut cfg = ServerConfig::new(
            "/tmp/cat",
            PolicyConfig::new(Policy::TimedRefresh { interval_ms: 1000, scope: Scope::Blocks(vec![3, 4]) }),
        );
        cfg.strategy = PickStrategy::Evolving { level: 2 };
        let text = cfg.to_json();
        assert!(text.starts_with(r#"{"catalog":"/tmp/cat","policy":{"flush_deadline_ms":2000,"interval_ms":1000"#));
        assert_eq!(serde_json::from_str::<ServerConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg: ServerConfig =
            serde_json::from_str(r#"{"catalog":"c","policy":{"kind":"timed_refresh","interval_ms":5,"scope":"all"}}"#)
                .unwrap();
        assert_eq!(cfg.policy.flush_deadline_ms, 2000);
        assert_eq!(cfg.port, 7070);
        assert_eq!(cfg.policy.kind, Policy::TimedRefresh { interval_ms: 5, scope: Scope::All });
    }

    #[test]
    fn invalid_policies_are_rejected() {
        assert!(PolicyConfig::new(Policy::PerBlockTtl { ttl_ms: 0 }).validate().is_err());
        assert!(PolicyConfig::new(Policy::Evolving { schedule: vec![(5, 1), (2, 2)] }).validate().is_err());
    }

    #[test]
    fn evolving_levels_follow_schedule() {
        let p = PolicyConfig::new(Policy::Evolving { schedule: vec![(0, 1), (3000, 2)] });
        assert_eq!(p.level_at(2999), 1);
        assert_eq!(p.level_at(3000), 2);
    }
}
