//! Block server: configuration, the renewability manager and a TCP front end.

pub mod config;
pub mod manager;
pub mod tcp;

pub use config::{OnViolation, Policy, PolicyConfig, Scope, ServerConfig};
pub use manager::{
    Manager, ManagerError, PendingChallenge, ServedEntry, ServiceStats, SessionRecord, SessionStatus, ViolationEvent,
    ViolationKind, EVENTS_LOG, SESSIONS_LOG,
};
pub use tcp::{serve, ServerHandle};
