//! Code guards: hashes over a block's mapped code, either a forward prefix or
//! a seeded pseudo-random walk.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::vm::{Fnv1a64, Prng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashVariant {
    FnvForward,
    FnvWalk,
}

impl HashVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            HashVariant::FnvForward => "fnv_forward",
            HashVariant::FnvWalk => "fnv_walk",
        }
    }
}

impl fmt::Display for HashVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HashVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fnv_forward" => Ok(HashVariant::FnvForward),
            "fnv_walk" => Ok(HashVariant::FnvWalk),
            other => Err(format!("unknown hash variant '{other}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GuardSpec {
    pub block_id: u32,
    pub walk_seed: u64,
    pub sample_count: u32,
    pub variant: HashVariant,
}

/// Byte indices a guard visits, in order.
pub fn visited_indices(region_len: usize, spec: &GuardSpec, nonce: u64) -> Result<Vec<usize>, EngineError> {
    let m = spec.sample_count as usize;
    if m == 0 || m > region_len {
        return Err(EngineError::BadKnob(format!("sample count {m} for a region of {region_len} bytes")));
    }
    Ok(match spec.variant {
        HashVariant::FnvForward => (0..m).collect(),
        HashVariant::FnvWalk => {
            let mut prng = Prng::new(spec.walk_seed ^ nonce);
            (0..m).map(|_| (prng.next_u64() % region_len as u64) as usize).collect()
        }
    })
}

pub fn guard_eval(region: &[u8], spec: &GuardSpec, nonce: u64) -> Result<u64, EngineError> {
    let mut h = Fnv1a64::new();
    h.update(&nonce.to_le_bytes());
    for i in visited_indices(region.len(), spec, nonce)? {
        h.byte(region[i]);
    }
    Ok(h.finish())
}

pub fn guard_generate(block_id: u32, seed: u64, m: u32, variant: HashVariant) -> Result<GuardSpec, EngineError> {
    if m == 0 {
        return Err(EngineError::BadKnob("sample count must be positive".into()));
    }
    let walk_seed = Prng::new(seed).next_u64();
    Ok(GuardSpec { block_id, walk_seed, sample_count: m, variant })
}
