//! Global Mobile Redirection Table.

use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GmrtEntry {
    NotLoaded,
    Loaded {
        base: u32,
        version_id: u64,
    },
    /// Flushed while executing: the next entry re-downloads, the old copy is
    /// unmapped once its last activation returns.
    Stale {
        base: u32,
        version_id: u64,
    },
}

impl GmrtEntry {
    pub fn base(&self) -> Option<u32> {
        match *self {
            GmrtEntry::Loaded { base, .. } | GmrtEntry::Stale { base, .. } => Some(base),
            GmrtEntry::NotLoaded => None,
        }
    }

    pub fn version_id(&self) -> Option<u64> {
        match *self {
            GmrtEntry::Loaded { version_id, .. } | GmrtEntry::Stale { version_id, .. } => Some(version_id),
            GmrtEntry::NotLoaded => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Gmrt {
    entries: BTreeMap<u32, GmrtEntry>,
}

impl Gmrt {
    pub fn register(&mut self, block_id: u32) {
        self.entries.insert(block_id, GmrtEntry::NotLoaded);
    }

    pub fn get(&self, block_id: u32) -> Option<GmrtEntry> {
        self.entries.get(&block_id).copied()
    }

    pub(crate) fn set(&mut self, block_id: u32, entry: GmrtEntry) {
        self.entries.insert(block_id, entry);
    }

    pub fn contains(&self, block_id: u32) -> bool {
        self.entries.contains_key(&block_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, GmrtEntry)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    pub fn block_ids(&self) -> Vec<u32> {
        self.entries.keys().copied().collect()
    }

    /// Blocks currently backed by a mapped copy.
    pub fn resident(&self) -> Vec<u32> {
        self.iter().filter(|(_, e)| e.base().is_some()).map(|(b, _)| b).collect()
    }
}
