//! Versioned block catalog with compatibility groups.
//!
//! On disk: `<root>/catalog.tsv` (append-only, one version per line) and
//! `<root>/<block_id>/v<version_id>.mblk`. Engine inputs for on-demand
//! regeneration live in `<root>/manifest.json` with base payloads in
//! `<root>/<block_id>/base.mblk`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engines::Recipe;
use crate::vm::{fnv1a64, MobileBlockPayload, Prng};

pub const CATALOG_FILE: &str = "catalog.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, PartialEq, Eq)]
pub struct BlockVersion {
    pub block_id: u32,
    pub version_id: u64,
    pub group_id: u32,
    pub engine: String,
    pub seed: u64,
    pub payload: Vec<u8>,
    pub expected_hash: u64,
    pub created_at: u64,
    pub ttl_ms: Option<u64>,
    /// Protection level used by the evolving strategy.
    pub level: u32,
}

impl fmt::Debug for BlockVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BlockVersion")
            .field("block_id", &self.block_id)
            .field("version_id", &self.version_id)
            .field("group_id", &self.group_id)
            .field("engine", &self.engine)
            .field("level", &self.level)
            .field("payload_len", &self.payload.len())
            .finish_non_exhaustive()
    }
}

impl BlockVersion {
    /// A version ready for `put_version`, with its id left for the catalog to assign.
    pub fn new(payload: &MobileBlockPayload, group_id: u32, engine: &str, seed: u64, level: u32) -> Self {
        let p = MobileBlockPayload { group_id, ..payload.clone() };
        let bytes = p.pack();
        BlockVersion {
            block_id: p.block_id,
            version_id: p.version_id,
            group_id,
            engine: engine.to_string(),
            seed,
            expected_hash: fnv1a64(&bytes),
            payload: bytes,
            created_at: 0,
            ttl_ms: None,
            level,
        }
    }

    pub fn with_ttl(mut self, created_at: u64, ttl_ms: Option<u64>) -> Self {
        self.created_at = created_at;
        self.ttl_ms = ttl_ms;
        self
    }

    pub fn expired(&self, now_ms: u64) -> bool {
        self.ttl_ms.is_some_and(|t| now_ms >= self.created_at.saturating_add(t))
    }

    pub fn unpack(&self) -> MobileBlockPayload {
        MobileBlockPayload::unpack(&self.payload).expect("catalog payloads are validated on insert")
    }

    fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{:016x}\t{}\t{}\t{}\n",
            self.block_id,
            self.version_id,
            self.group_id,
            self.engine,
            self.seed,
            self.expected_hash,
            self.created_at,
            self.ttl_ms.map_or_else(|| "-".to_string(), |t| t.to_string()),
            self.level
        )
    }
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("payload hash mismatch for block {block_id}")]
    HashMismatch { block_id: u32 },
    #[error("payload is not a valid MBLK container: {0}")]
    BadPayload(String),
    #[error("version {version_id} of block {block_id} already exists")]
    Duplicate { block_id: u32, version_id: u64 },
    #[error("no servable version of block {block_id} for group {group_id}")]
    NoVersion { block_id: u32, group_id: u32 },
    #[error("unknown block {0}")]
    UnknownBlock(u32),
    #[error("catalog line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PickStrategy {
    RandomLive,
    Latest,
    Evolving {
        level: u32,
    },
    /// Cycle through the live versions; needs a per-block cursor.
    RoundRobin,
}

impl FromStr for PickStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random_live" => Ok(PickStrategy::RandomLive),
            "latest" => Ok(PickStrategy::Latest),
            "round_robin" => Ok(PickStrategy::RoundRobin),
            _ => s
                .strip_prefix("evolving:")
                .and_then(|l| l.parse().ok())
                .map(|level| PickStrategy::Evolving { level })
                .ok_or_else(|| format!("unknown strategy '{s}'")),
        }
    }
}

#[derive(Debug, Default)]
pub struct BlockCatalog {
    root: Option<PathBuf>,
    blocks: BTreeMap<u32, Vec<BlockVersion>>,
    groups: BTreeMap<u32, BTreeSet<u32>>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

impl BlockCatalog {
    pub fn in_memory() -> Self {
        BlockCatalog::default()
    }

    /// An in-memory copy of the current contents.
    pub fn snapshot(&self) -> Self {
        BlockCatalog { root: None, blocks: self.blocks.clone(), groups: self.groups.clone() }
    }

    /// Open (or create) a catalog directory and load every recorded version.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, CatalogError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let mut cat = BlockCatalog { root: Some(root.clone()), ..Default::default() };
        let path = root.join(CATALOG_FILE);
        if !path.exists() {
            return Ok(cat);
        }
        let text = fs::read_to_string(&path)?;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| CatalogError::Parse { line: n + 1, reason: reason.to_string() };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 9 {
                return Err(bad("expected 9 tab-separated fields"));
            }
            let num = |i: usize| cols[i].parse::<u64>().map_err(|_| bad("bad number"));
            let block_id = num(0)? as u32;
            let version_id = num(1)?;
            let payload = fs::read(root.join(block_id.to_string()).join(format!("v{version_id}.mblk")))?;
            let v = BlockVersion {
                block_id,
                version_id,
                group_id: num(2)? as u32,
                engine: cols[3].to_string(),
                seed: num(4)?,
                expected_hash: u64::from_str_radix(cols[5], 16).map_err(|_| bad("bad hash"))?,
                created_at: num(6)?,
                ttl_ms: if cols[7] == "-" { None } else { Some(num(7)?) },
                level: num(8)? as u32,
                payload,
            };
            cat.validate(&v)?;
            cat.insert(v);
        }
        Ok(cat)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn validate(&self, v: &BlockVersion) -> Result<(), CatalogError> {
        if fnv1a64(&v.payload) != v.expected_hash {
            return Err(CatalogError::HashMismatch { block_id: v.block_id });
        }
        let p = MobileBlockPayload::unpack(&v.payload).map_err(|e| CatalogError::BadPayload(e.to_string()))?;
        if p.block_id != v.block_id || p.group_id != v.group_id {
            return Err(CatalogError::BadPayload("header disagrees with catalog fields".into()));
        }
        if v.version_id != 0 && p.version_id != v.version_id {
            return Err(CatalogError::BadPayload("version id disagrees with payload".into()));
        }
        Ok(())
    }

    fn insert(&mut self, v: BlockVersion) {
        if v.group_id > 0 {
            self.groups.entry(v.group_id).or_default().insert(v.block_id);
        }
        self.blocks.entry(v.block_id).or_default().push(v);
    }

    /// Store a version. A `version_id` of 0 asks the catalog for the next id
    /// of the block; the payload is re-packed to carry it.
    pub fn put_version(&mut self, mut v: BlockVersion) -> Result<u64, CatalogError> {
        self.validate(&v)?;
        if v.version_id == 0 {
            let next =
                self.blocks.get(&v.block_id).and_then(|vs| vs.iter().map(|x| x.version_id).max()).unwrap_or(0) + 1;
            let p =
                MobileBlockPayload { version_id: next, ..MobileBlockPayload::unpack(&v.payload).expect("validated") };
            v.payload = p.pack();
            v.expected_hash = fnv1a64(&v.payload);
            v.version_id = next;
        } else if self.get(v.block_id, v.version_id).is_some() {
            return Err(CatalogError::Duplicate { block_id: v.block_id, version_id: v.version_id });
        }
        if let Some(root) = &self.root {
            let dir = root.join(v.block_id.to_string());
            fs::create_dir_all(&dir)?;
            write_atomic(&dir.join(format!("v{}.mblk", v.version_id)), &v.payload)?;
            let mut f = OpenOptions::new().create(true).append(true).open(root.join(CATALOG_FILE))?;
            f.write_all(v.tsv_line().as_bytes())?;
        }
        let id = v.version_id;
        self.insert(v);
        Ok(id)
    }

    pub fn get(&self, block_id: u32, version_id: u64) -> Option<&BlockVersion> {
        self.blocks.get(&block_id)?.iter().find(|v| v.version_id == version_id)
    }

    pub fn versions(&self, block_id: u32) -> &[BlockVersion] {
        self.blocks.get(&block_id).map_or(&[], |v| v.as_slice())
    }

    pub fn block_ids(&self) -> Vec<u32> {
        self.blocks.keys().copied().collect()
    }

    pub fn contains_block(&self, block_id: u32) -> bool {
        self.blocks.contains_key(&block_id)
    }

    /// Non-zero compatibility groups and their member blocks.
    pub fn groups(&self) -> &BTreeMap<u32, BTreeSet<u32>> {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.blocks.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pick_version(
        &self,
        block_id: u32,
        group_id: u32,
        strategy: PickStrategy,
        now_ms: u64,
        prng: &mut Prng,
    ) -> Result<&BlockVersion, CatalogError> {
        self.pick_with_cursor(block_id, group_id, strategy, now_ms, prng, 0)
    }

    /// Like `pick_version`; `RoundRobin` returns the `cursor`-th live version
    /// modulo the pool size.
    pub fn pick_with_cursor(
        &self,
        block_id: u32,
        group_id: u32,
        strategy: PickStrategy,
        now_ms: u64,
        prng: &mut Prng,
        cursor: u64,
    ) -> Result<&BlockVersion, CatalogError> {
        let versions = self.blocks.get(&block_id).ok_or(CatalogError::UnknownBlock(block_id))?;
        let pool: Vec<&BlockVersion> =
            versions.iter().filter(|v| (v.group_id == group_id || v.group_id == 0) && !v.expired(now_ms)).collect();
        if pool.is_empty() {
            return Err(CatalogError::NoVersion { block_id, group_id });
        }
        let chosen = match strategy {
            PickStrategy::RandomLive => pool[prng.index(pool.len())],
            PickStrategy::RoundRobin => pool[(cursor % pool.len() as u64) as usize],
            PickStrategy::Latest => *pool.iter().max_by_key(|v| v.version_id).expect("non-empty"),
            PickStrategy::Evolving { level } => {
                let target = pool
                    .iter()
                    .map(|v| v.level)
                    .filter(|l| *l >= level)
                    .min()
                    .unwrap_or_else(|| pool.iter().map(|v| v.level).max().expect("non-empty"));
                let tied: Vec<&&BlockVersion> = pool.iter().filter(|v| v.level == target).collect();
                tied[prng.index(tied.len())]
            }
        };
        Ok(chosen)
    }

    pub fn save_manifest(&self, manifest: &Manifest) -> Result<(), CatalogError> {
        let root = self.root.as_ref().ok_or_else(|| CatalogError::Manifest("catalog is in memory".into()))?;
        manifest.save(root)
    }
}

/// True iff every non-zero served group equals `group_id`.
pub fn group_consistent(group_id: u32, served: &BTreeSet<(u32, u32)>) -> bool {
    served.iter().all(|(_, g)| *g == 0 || *g == group_id)
}

/// Engine inputs for every regenerable block.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: BTreeMap<u32, ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub recipe: Recipe,
    pub base: MobileBlockPayload,
    pub group_id: u32,
}

#[derive(Serialize, Deserialize)]
struct ManifestRecord {
    block_id: u32,
    group_id: u32,
    recipe: Recipe,
}

impl Manifest {
    pub fn insert(&mut self, base: MobileBlockPayload, group_id: u32, recipe: Recipe) {
        self.entries.insert(base.block_id, ManifestEntry { recipe, base, group_id });
    }

    pub fn save(&self, root: &Path) -> Result<(), CatalogError> {
        let mut records = Vec::new();
        for (id, e) in &self.entries {
            let dir = root.join(id.to_string());
            fs::create_dir_all(&dir)?;
            write_atomic(&dir.join("base.mblk"), &e.base.pack())?;
            records.push(ManifestRecord { block_id: *id, group_id: e.group_id, recipe: e.recipe.clone() });
        }
        let json = serde_json::to_string_pretty(&records).map_err(|e| CatalogError::Manifest(e.to_string()))?;
        write_atomic(&root.join(MANIFEST_FILE), json.as_bytes())?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self, CatalogError> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let records: Vec<ManifestRecord> =
            serde_json::from_slice(&fs::read(path)?).map_err(|e| CatalogError::Manifest(e.to_string()))?;
        let mut m = Manifest::default();
        for r in records {
            let bytes = fs::read(root.join(r.block_id.to_string()).join("base.mblk"))?;
            let base = MobileBlockPayload::unpack(&bytes).map_err(|e| CatalogError::BadPayload(e.to_string()))?;
            m.insert(base, r.group_id, r.recipe);
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::isa::{encode_code, ins};

    fn payload(block_id: u32) -> MobileBlockPayload {
        MobileBlockPayload {
            block_id,
            version_id: 0,
            group_id: 0,
            entry_fid: block_id,
            param_count: 0,
            code: encode_code(&[ins::ret()]),
            owned_sections: vec![(3, vec![1, 2, 3])],
        }
    }

    #[test]
    fn put_assigns_increasing_ids_and_get_returns_bytes() {
        let mut c = BlockCatalog::in_memory();
        let a = c.put_version(BlockVersion::new(&payload(1), 0, "syntactic", 1, 1)).unwrap();
        let b = c.put_version(BlockVersion::new(&payload(1), 0, "syntactic", 2, 1)).unwrap();
        assert!(b > a);
        let v = c.get(1, b).unwrap();
        assert_eq!(v.unpack().version_id, b);
        assert_eq!(fnv1a64(&v.payload), v.expected_hash);
    }

    #[test]
    fn corrupted_payload_is_rejected() {
        let mut c = BlockCatalog::in_memory();
        let mut v = BlockVersion::new(&payload(1), 0, "syntactic", 1, 1);
        let last = v.payload.len() - 1;
        v.payload[last] ^= 1;
        assert!(matches!(c.put_version(v), Err(CatalogError::HashMismatch { .. })));
    }

    #[test]
    fn duplicate_explicit_id_is_rejected() {
        let mut c = BlockCatalog::in_memory();
        let p = MobileBlockPayload { version_id: 5, ..payload(1) };
        c.put_version(BlockVersion::new(&p, 0, "x", 1, 1)).unwrap();
        assert!(matches!(c.put_version(BlockVersion::new(&p, 0, "x", 1, 1)), Err(CatalogError::Duplicate { .. })));
    }

    #[test]
    fn single_version_for_all_strategies() {
        let mut c = BlockCatalog::in_memory();
        let id = c.put_version(BlockVersion::new(&payload(1), 0, "x", 1, 2)).unwrap();
        let mut prng = Prng::new(1);
        for s in [
            PickStrategy::RandomLive,
            PickStrategy::Latest,
            PickStrategy::Evolving { level: 1 },
            PickStrategy::Evolving { level: 9 },
        ] {
            assert_eq!(c.pick_version(1, 0, s, 0, &mut prng).unwrap().version_id, id);
        }
    }

    #[test]
    fn round_robin_cycles_through_live_versions() {
        let mut c = BlockCatalog::in_memory();
        let ids: Vec<u64> =
            (0..3).map(|s| c.put_version(BlockVersion::new(&payload(1), 0, "x", s, 1)).unwrap()).collect();
        let mut prng = Prng::new(1);
        let picked: Vec<u64> = (0..6)
            .map(|n| c.pick_with_cursor(1, 0, PickStrategy::RoundRobin, 0, &mut prng, n).unwrap().version_id)
            .collect();
        assert_eq!(picked, [ids.clone(), ids].concat());
        assert_eq!("round_robin".parse::<PickStrategy>().unwrap(), PickStrategy::RoundRobin);
    }

    #[test]
    fn expired_versions_are_never_served() {
        let mut c = BlockCatalog::in_memory();
        c.put_version(BlockVersion::new(&payload(1), 0, "x", 1, 1).with_ttl(0, Some(100))).unwrap();
        let mut prng = Prng::new(1);
        assert!(c.pick_version(1, 0, PickStrategy::RandomLive, 99, &mut prng).is_ok());
        assert!(matches!(
            c.pick_version(1, 0, PickStrategy::RandomLive, 100, &mut prng),
            Err(CatalogError::NoVersion { .. })
        ));
    }

    #[test]
    fn group_rule_falls_back_to_universal_versions() {
        let mut c = BlockCatalog::in_memory();
        c.put_version(BlockVersion::new(&payload(1), 4, "semantic", 1, 1)).unwrap();
        let mut prng = Prng::new(1);
        assert!(c.pick_version(1, 3, PickStrategy::Latest, 0, &mut prng).is_err());
        let g0 = c.put_version(BlockVersion::new(&payload(1), 0, "syntactic", 1, 1)).unwrap();
        assert_eq!(c.pick_version(1, 3, PickStrategy::Latest, 0, &mut prng).unwrap().version_id, g0);
        assert_eq!(c.groups()[&4], [1].into_iter().collect());
    }

    #[test]
    fn evolving_picks_lowest_sufficient_level() {
        let mut c = BlockCatalog::in_memory();
        for level in [1, 3, 2, 3] {
            c.put_version(BlockVersion::new(&payload(1), 0, "x", level as u64, level)).unwrap();
        }
        let mut prng = Prng::new(1);
        let pick = |l, p: &mut Prng| c.pick_version(1, 0, PickStrategy::Evolving { level: l }, 0, p).unwrap().level;
        assert_eq!(pick(2, &mut prng), 2);
        assert_eq!(pick(0, &mut prng), 1);
        assert_eq!(pick(7, &mut prng), 3);
    }

    #[test]
    fn group_consistency() {
        assert!(group_consistent(3, &BTreeSet::new()));
        assert!(group_consistent(3, &[(1, 3)].into_iter().collect()));
        assert!(!group_consistent(4, &[(1, 3)].into_iter().collect()));
    }

    #[test]
    fn strategies_parse() {
        assert_eq!("evolving:2".parse::<PickStrategy>(), Ok(PickStrategy::Evolving { level: 2 }));
        assert!("bogus".parse::<PickStrategy>().is_err());
    }
}
