//! Measurement harness: run protected programs against an in-process server
//! and aggregate overheads over repeated, interleaved runs.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::programs::{
    gen_crunch, gen_spin, gen_wbcapp, spin_ids, wbcapp_ids, wbcapp_template, CrunchParams, WbcAppParams,
};
use super::protect::{protect, protect_semantic, select_hot, ProtectOptions, Protected};
use super::BenchError;
use crate::blockdb::{BlockCatalog, Manifest, PickStrategy};
use crate::client::{run_protected, Binder, ClientConfig, Download, LinkModel, LoopbackTransport, RunReport};
use crate::engines::{Recipe, SemanticTransform};
use crate::server::{Manager, Policy, PolicyConfig, Scope, ServerConfig};
use crate::vm::payload::{MBLK_FIXED_HEADER, MBLK_SECTION_COUNT, MBLK_SECTION_HEADER};
use crate::vm::{NullHost, Prng, ProfileReport, ProgramImage, Vm};

/// Instruction profile of one unprotected run.
pub fn profile_program(img: &ProgramImage, input: &[u8]) -> Result<ProfileReport, BenchError> {
    let mut vm = Vm::load_image(img, 1)?;
    vm.run(input, &mut NullHost)?;
    Ok(vm.profile())
}

/// Output, virtual time and wall time of one unprotected run.
pub fn run_plain(img: &ProgramImage, input: &[u8], heap_seed: u64) -> Result<(Vec<u8>, u64, f64), BenchError> {
    let started = Instant::now();
    let mut vm = Vm::load_image(img, heap_seed)?;
    let out = vm.run(input, &mut NullHost)?;
    Ok((out.output, out.virtual_ms, started.elapsed().as_secs_f64() * 1000.0))
}

pub fn refresh_policy(refresh_ms: Option<u64>) -> PolicyConfig {
    PolicyConfig::new(match refresh_ms {
        Some(interval_ms) => Policy::TimedRefresh { interval_ms, scope: Scope::All },
        None => Policy::None,
    })
}

/// A protected image together with an in-process server holding its blocks.
#[derive(Clone)]
pub struct Deployment {
    pub image: ProgramImage,
    pub server: Arc<Mutex<Manager>>,
}

#[derive(Clone, Debug)]
pub struct ProtectedRun {
    pub report: RunReport,
    pub downloads: Vec<Download>,
    /// Wall time including the handshake, in milliseconds.
    pub wall_ms: f64,
}

impl Deployment {
    pub fn new(
        image: ProgramImage,
        catalog: BlockCatalog,
        manifest: Manifest,
        policy: PolicyConfig,
        seed: u64,
    ) -> Self {
        Deployment::with_strategy(image, catalog, manifest, policy, seed, PickStrategy::RandomLive)
    }

    pub fn with_strategy(
        image: ProgramImage,
        catalog: BlockCatalog,
        manifest: Manifest,
        policy: PolicyConfig,
        seed: u64,
        strategy: PickStrategy,
    ) -> Self {
        let mut cfg = ServerConfig::new("", policy);
        cfg.seed = seed;
        cfg.strategy = strategy;
        let manager = Manager::in_memory(catalog, &cfg).with_manifest(manifest);
        Deployment { image, server: Arc::new(Mutex::new(manager)) }
    }

    pub fn from_protected(p: &Protected, catalog: BlockCatalog, policy: PolicyConfig, seed: u64) -> Self {
        Deployment::new(p.image.clone(), catalog, p.manifest.clone(), policy, seed)
    }

    /// One client session over a loopback link.
    pub fn run(
        &self,
        config: ClientConfig,
        link: LinkModel,
        input: &[u8],
        heap_seed: u64,
    ) -> Result<ProtectedRun, BenchError> {
        let started = Instant::now();
        let transport = LoopbackTransport::new(Arc::clone(&self.server), link);
        let mut binder = Binder::connect(transport, config)?;
        let report = run_protected(&self.image, &mut binder, input, heap_seed)?;
        let wall_ms = started.elapsed().as_secs_f64() * 1000.0;
        Ok(ProtectedRun { report, downloads: binder.downloads().to_vec(), wall_ms })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub stddev: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        if xs.is_empty() {
            return Summary::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Summary { mean, stddev: var.sqrt() }
    }
}

fn label(refresh_ms: Option<u64>) -> String {
    refresh_ms.map_or_else(|| "inf".to_string(), |r| r.to_string())
}

// ---------------------------------------------------------------- refresh sweep

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// `crunch` or `wbcapp`.
    pub program: String,
    pub crunch: CrunchParams,
    pub wbcapp: WbcAppParams,
    pub fractions: Vec<f64>,
    /// Refresh intervals; `None` never refreshes.
    pub refresh_ms: Vec<Option<u64>>,
    pub repetitions: usize,
    pub versions: usize,
    pub level: u32,
    pub seed: u64,
    pub link: LinkModel,
    pub input: Vec<u8>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            program: "crunch".into(),
            crunch: CrunchParams { rounds: 100, ..Default::default() },
            wbcapp: WbcAppParams::default(),
            fractions: vec![0.2, 0.5, 1.0],
            refresh_ms: vec![Some(1000), Some(2000), Some(5000), None],
            repetitions: 20,
            versions: 600,
            level: 0,
            seed: 1,
            link: LinkModel { latency_ms: 8, bytes_per_ms: 1000, realtime: true },
            input: b"renew".to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.repetitions == 0 || self.versions == 0 {
            return Err(BenchError::Config("repetitions and versions must be positive".into()));
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(BenchError::Config("fractions must lie in (0, 1]".into()));
        }
        if self.refresh_ms.contains(&Some(0)) {
            return Err(BenchError::Config("refresh intervals must be positive".into()));
        }
        Ok(())
    }

    pub fn image(&self) -> Result<ProgramImage, BenchError> {
        match self.program.as_str() {
            "crunch" => gen_crunch(self.crunch),
            "wbcapp" => gen_wbcapp(self.wbcapp),
            other => Err(BenchError::UnknownProgram(other.into())),
        }
    }
}

/// One cell of a refresh sweep. The baseline row has fraction 0 and refresh
/// `none`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub program: String,
    pub mobility_fraction: f64,
    pub refresh_ms: String,
    pub repetitions: usize,
    pub mobile_functions: usize,
    pub mean_wall_ms: f64,
    pub stddev_wall_ms: f64,
    pub overhead_wall_pct: f64,
    pub mean_virtual_ms: f64,
    pub stddev_virtual_ms: f64,
    pub overhead_virtual_pct: f64,
    pub mean_blocks: f64,
    pub blocks_per_s: f64,
    pub bytes_per_s: f64,
}

struct Cell {
    fraction: f64,
    refresh: Option<u64>,
    mobile: usize,
    deployment: Option<Deployment>,
    wall: Vec<f64>,
    virt: Vec<f64>,
    blocks: Vec<f64>,
    bytes: Vec<f64>,
}

/// Measure every (fraction, refresh) cell plus an unprotected baseline. Each
/// repetition runs every cell once in a fresh random order, so slow drift in
/// machine speed spreads evenly over the cells.
pub fn refresh_sweep(cfg: &ExperimentConfig) -> Result<Vec<MeasurementRow>, BenchError> {
    cfg.validate()?;
    let img = cfg.image()?;
    let (expected, _, _) = run_plain(&img, &cfg.input, 1)?;
    let profile = profile_program(&img, &cfg.input)?;
    let mut cells = vec![Cell {
        fraction: 0.0,
        refresh: None,
        mobile: 0,
        deployment: None,
        wall: vec![],
        virt: vec![],
        blocks: vec![],
        bytes: vec![],
    }];
    for &fraction in &cfg.fractions {
        let mobile = select_hot(&profile, fraction)?;
        let mut catalog = BlockCatalog::in_memory();
        let opts =
            ProtectOptions { versions: cfg.versions, levels: vec![cfg.level], seed: cfg.seed, ..Default::default() };
        let p = protect(&img, &mobile, &opts, &mut catalog)?;
        for &refresh in &cfg.refresh_ms {
            // Cycling through versions gives every cell the same version mix,
            // so version-to-version speed differences do not bias comparisons.
            let d = Deployment::with_strategy(
                p.image.clone(),
                catalog.snapshot(),
                p.manifest.clone(),
                refresh_policy(refresh),
                cfg.seed,
                PickStrategy::RoundRobin,
            );
            cells.push(Cell {
                fraction,
                refresh,
                mobile: mobile.len(),
                deployment: Some(d),
                wall: vec![],
                virt: vec![],
                blocks: vec![],
                bytes: vec![],
            });
        }
    }

    let mut prng = Prng::new(cfg.seed ^ 0x0053_5745_4550);
    let mut order: Vec<usize> = (0..cells.len()).collect();
    for rep in 0..cfg.repetitions {
        prng.shuffle(&mut order);
        for &i in &order {
            let cell = &mut cells[i];
            let heap_seed = prng.next_u64();
            match &cell.deployment {
                None => {
                    let (out, virt, wall) = run_plain(&img, &cfg.input, heap_seed)?;
                    check_output(&out, &expected, "baseline")?;
                    cell.wall.push(wall);
                    cell.virt.push(virt as f64);
                    cell.blocks.push(0.0);
                    cell.bytes.push(0.0);
                }
                Some(d) => {
                    let session = (rep as u64) << 32 | i as u64 | 1 << 63;
                    let r = d.run(ClientConfig::with_seed(session ^ cfg.seed), cfg.link, &cfg.input, heap_seed)?;
                    check_output(&r.report.output, &expected, "protected run")?;
                    cell.wall.push(r.wall_ms);
                    cell.virt.push(r.report.virtual_ms as f64);
                    cell.blocks.push(r.report.stats.blocks_transferred as f64);
                    cell.bytes.push(r.report.stats.bytes_transferred as f64);
                }
            }
        }
    }

    let base_wall = Summary::of(&cells[0].wall).mean;
    let base_virt = Summary::of(&cells[0].virt).mean;
    Ok(cells
        .iter()
        .map(|c| {
            let wall = Summary::of(&c.wall);
            let virt = Summary::of(&c.virt);
            let blocks = Summary::of(&c.blocks).mean;
            let bytes = Summary::of(&c.bytes).mean;
            MeasurementRow {
                program: cfg.program.clone(),
                mobility_fraction: c.fraction,
                refresh_ms: if c.deployment.is_none() { "none".into() } else { label(c.refresh) },
                repetitions: c.wall.len(),
                mobile_functions: c.mobile,
                mean_wall_ms: wall.mean,
                stddev_wall_ms: wall.stddev,
                overhead_wall_pct: 100.0 * (wall.mean / base_wall - 1.0),
                mean_virtual_ms: virt.mean,
                stddev_virtual_ms: virt.stddev,
                overhead_virtual_pct: 100.0 * (virt.mean / base_virt - 1.0),
                mean_blocks: blocks,
                blocks_per_s: blocks / (wall.mean / 1000.0),
                bytes_per_s: bytes / (wall.mean / 1000.0),
            }
        })
        .collect())
}

fn check_output(got: &[u8], expected: &[u8], what: &str) -> Result<(), BenchError> {
    if got != expected {
        return Err(BenchError::Internal(format!(
            "{what} printed {:?}, expected {:?}",
            String::from_utf8_lossy(got),
            String::from_utf8_lossy(expected)
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- versions sweep

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VersionsRow {
    pub variants: usize,
    pub seeds: usize,
    pub mean_mobile_functions: f64,
    pub stddev_mobile_functions: f64,
    pub min_mobile_functions: usize,
    pub max_mobile_functions: usize,
    /// Share of the original code bytes that ends up in mobile blocks.
    pub mean_mobile_code_share: f64,
    /// Share of the original code bytes that stays in the static image.
    pub mean_residual_fraction: f64,
    /// True when every run's variants shared a byte-identical static residue.
    pub residue_identical: bool,
}

/// Semantic diversification of `img` into `n` variants for each `n`, over
/// `seeds` seeds: how many functions must become mobile.
pub fn versions_sweep(
    img: &ProgramImage,
    transform: SemanticTransform,
    ns: &[usize],
    seeds: usize,
    base_seed: u64,
) -> Result<Vec<VersionsRow>, BenchError> {
    let total_code = img.code_bytes() as f64;
    let mut rows = Vec::new();
    for &n in ns {
        if n < 2 {
            return Err(BenchError::Config("at least two variants are needed".into()));
        }
        let mut counts = Vec::new();
        let mut shares = Vec::new();
        let mut identical = true;
        for s in 0..seeds {
            let mut catalog = BlockCatalog::in_memory();
            let seed = base_seed.wrapping_mul(1_000_003).wrapping_add(s as u64 * 7919 + n as u64);
            match protect_semantic(img, transform, n, seed, &mut catalog) {
                Ok(sp) => {
                    let mobile_bytes: usize =
                        sp.mobile.iter().filter_map(|f| img.function(*f)).map(|f| f.encode().len()).sum();
                    counts.push(sp.mobile.len() as f64);
                    shares.push(mobile_bytes as f64 / total_code);
                }
                Err(BenchError::Internal(_)) => identical = false,
                Err(e) => return Err(e),
            }
        }
        let c = Summary::of(&counts);
        rows.push(VersionsRow {
            variants: n,
            seeds,
            mean_mobile_functions: c.mean,
            stddev_mobile_functions: c.stddev,
            min_mobile_functions: counts.iter().fold(usize::MAX, |m, x| m.min(*x as usize)),
            max_mobile_functions: counts.iter().fold(0, |m, x| m.max(*x as usize)),
            mean_mobile_code_share: Summary::of(&shares).mean,
            mean_residual_fraction: 1.0 - Summary::of(&shares).mean,
            residue_identical: identical,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------- WBC renewal

#[derive(Clone, Debug, PartialEq)]
pub struct WbcBenchConfig {
    pub params: WbcAppParams,
    /// Table lifetimes; each is enforced as a per-block TTL.
    pub refresh_ms: Vec<u64>,
    pub repetitions: usize,
    /// Re-encoded table versions stored per block.
    pub versions: usize,
    pub seed: u64,
    pub link: LinkModel,
    pub input: Vec<u8>,
}

impl Default for WbcBenchConfig {
    fn default() -> Self {
        WbcBenchConfig {
            params: WbcAppParams { rounds: 1300, ..Default::default() },
            refresh_ms: vec![1000, 2000, 3000, 5000],
            repetitions: 20,
            versions: 6,
            seed: 1,
            link: LinkModel { latency_ms: 4, bytes_per_ms: 5_000, realtime: true },
            input: b"wbc".to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WbcRow {
    pub refresh_ms: String,
    pub repetitions: usize,
    /// Interpreter work, as instructions over the virtual clock rate.
    pub cpu_proxy_ms: f64,
    pub mean_virtual_ms: f64,
    pub mean_wall_ms: f64,
    pub stddev_wall_ms: f64,
    pub overhead_wall_pct: f64,
    pub mean_transfers: f64,
    pub mean_mb_transferred: f64,
    /// Payload bytes of one transfer; 0 when transfers differed in size.
    pub bytes_per_transfer: u64,
    pub table_bytes: u64,
    pub header_bytes: u64,
}

/// Payload size of the evaluator block: its tables plus the container header.
pub fn wbc_block_layout(block: &crate::vm::MobileBlockPayload) -> (u64, u64) {
    let tables: u64 = block.owned_sections.iter().map(|(_, b)| b.len() as u64).sum();
    let header =
        (MBLK_FIXED_HEADER + block.code.len() + MBLK_SECTION_COUNT + MBLK_SECTION_HEADER * block.owned_sections.len())
            as u64;
    (tables, header)
}

/// Run `wbcapp` with its white-box evaluator and tables as one mobile block
/// whose tables are renewed with a fresh encoding every `refresh` ms.
pub fn wbc_renewal_bench(cfg: &WbcBenchConfig) -> Result<Vec<WbcRow>, BenchError> {
    if cfg.repetitions == 0 || cfg.versions == 0 || cfg.refresh_ms.contains(&0) {
        return Err(BenchError::Config("repetitions, versions and refresh intervals must be positive".into()));
    }
    let img = gen_wbcapp(cfg.params)?;
    let (expected, _, _) = run_plain(&img, &cfg.input, 1)?;
    let mut catalog = BlockCatalog::in_memory();
    let mut opts = ProtectOptions { versions: cfg.versions, seed: cfg.seed, ..Default::default() };
    opts.recipes.insert(
        wbcapp_ids::WBC_EVAL,
        Recipe::Wbc { template: wbcapp_template(), key: cfg.params.key(), encodings: true },
    );
    let p = protect(&img, &BTreeSet::from([wbcapp_ids::WBC_EVAL]), &opts, &mut catalog)?;
    let (table_bytes, header_bytes) = wbc_block_layout(&p.blocks[0]);

    let mut cells: Vec<(Option<u64>, Option<Deployment>)> = vec![(None, None)];
    for &r in &cfg.refresh_ms {
        let policy = PolicyConfig::new(Policy::PerBlockTtl { ttl_ms: r });
        cells.push((Some(r), Some(Deployment::from_protected(&p, catalog.snapshot(), policy, cfg.seed))));
    }
    let mut samples: Vec<Vec<ProtectedSample>> = vec![Vec::new(); cells.len()];
    let mut prng = Prng::new(cfg.seed ^ 0x5742_4342);
    let mut order: Vec<usize> = (0..cells.len()).collect();
    for rep in 0..cfg.repetitions {
        prng.shuffle(&mut order);
        for &i in &order {
            let heap_seed = prng.next_u64();
            let s = match &cells[i].1 {
                None => {
                    let mut vm = Vm::load_image(&img, heap_seed)?;
                    let started = Instant::now();
                    let out = vm.run(&cfg.input, &mut NullHost)?;
                    let wall = started.elapsed().as_secs_f64() * 1000.0;
                    check_output(&out.output, &expected, "baseline")?;
                    ProtectedSample { wall, virt: out.virtual_ms, instructions: out.instructions, sizes: vec![] }
                }
                Some(d) => {
                    let session = (rep as u64) << 32 | i as u64 | 1 << 62;
                    let r = d.run(ClientConfig::with_seed(session ^ cfg.seed), cfg.link, &cfg.input, heap_seed)?;
                    check_output(&r.report.output, &expected, "protected run")?;
                    let per = r.report.stats.bytes_transferred / r.report.stats.blocks_transferred.max(1);
                    let mut sizes = vec![per; r.report.stats.blocks_transferred as usize];
                    if per * r.report.stats.blocks_transferred != r.report.stats.bytes_transferred {
                        sizes.push(0);
                    }
                    ProtectedSample {
                        wall: r.wall_ms,
                        virt: r.report.virtual_ms,
                        instructions: r.report.instructions,
                        sizes,
                    }
                }
            };
            samples[i].push(s);
        }
    }

    let base_wall = Summary::of(&samples[0].iter().map(|s| s.wall).collect::<Vec<_>>()).mean;
    Ok(cells
        .iter()
        .zip(&samples)
        .map(|((refresh, d), ss)| {
            let wall = Summary::of(&ss.iter().map(|s| s.wall).collect::<Vec<_>>());
            let sizes: BTreeSet<u64> = ss.iter().flat_map(|s| s.sizes.iter().copied()).collect();
            let transfers = ss.iter().map(|s| s.sizes.len() as f64).sum::<f64>() / ss.len() as f64;
            let bytes = ss.iter().map(|s| s.sizes.iter().sum::<u64>() as f64).sum::<f64>() / ss.len() as f64;
            WbcRow {
                refresh_ms: if d.is_none() { "none".into() } else { label(*refresh) },
                repetitions: ss.len(),
                cpu_proxy_ms: ss.iter().map(|s| s.instructions as f64 / 10_000.0).sum::<f64>() / ss.len() as f64,
                mean_virtual_ms: ss.iter().map(|s| s.virt as f64).sum::<f64>() / ss.len() as f64,
                mean_wall_ms: wall.mean,
                stddev_wall_ms: wall.stddev,
                overhead_wall_pct: 100.0 * (wall.mean / base_wall - 1.0),
                mean_transfers: transfers,
                mean_mb_transferred: bytes / 1e6,
                bytes_per_transfer: if sizes.len() == 1 { *sizes.iter().next().expect("one") } else { 0 },
                table_bytes,
                header_bytes,
            }
        })
        .collect())
}

#[derive(Clone, Debug)]
struct ProtectedSample {
    wall: f64,
    virt: u64,
    instructions: u64,
    sizes: Vec<u64>,
}

// ---------------------------------------------------------------- transfer count

/// Downloads of an always-hot block over a `duration_ms` run refreshed every
/// `refresh_ms`.
pub fn hot_block_transfers(duration_ms: u32, refresh_ms: u64, seed: u64) -> Result<u64, BenchError> {
    let img = gen_spin(duration_ms, 200);
    let mut catalog = BlockCatalog::in_memory();
    let p = protect(&img, &BTreeSet::from([spin_ids::WORK]), &ProtectOptions::with_versions(8, seed), &mut catalog)?;
    let d = Deployment::from_protected(&p, catalog, refresh_policy(Some(refresh_ms)), seed);
    let link = LinkModel { latency_ms: 1, bytes_per_ms: 0, realtime: false };
    let r = d.run(ClientConfig::with_seed(seed), link, b"", seed)?;
    Ok(r.report.stats.per_block.get(&spin_ids::WORK).copied().unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_uses_the_sample_deviation() {
        let s = Summary::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.stddev - 1.0).abs() < 1e-12);
        assert_eq!(Summary::of(&[4.0]).stddev, 0.0);
    }

    #[test]
    fn tiny_sweep_keeps_output_and_shape() {
        let cfg = ExperimentConfig {
            crunch: CrunchParams { rounds: 4, buffer_len: 512, seed: 3 },
            fractions: vec![0.5, 1.0],
            refresh_ms: vec![Some(5), None],
            repetitions: 2,
            versions: 3,
            link: LinkModel { realtime: false, ..Default::default() },
            ..Default::default()
        };
        let rows = refresh_sweep(&cfg).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].refresh_ms, "none");
        assert!(rows[1..].iter().all(|r| r.mean_blocks > 0.0));
        let refreshed = rows.iter().find(|r| r.mobility_fraction == 1.0 && r.refresh_ms == "5").unwrap();
        let never = rows.iter().find(|r| r.mobility_fraction == 1.0 && r.refresh_ms == "inf").unwrap();
        assert!(refreshed.mean_blocks > never.mean_blocks);
    }

    #[test]
    fn spin_transfers_follow_the_refresh_interval() {
        let n = hot_block_transfers(2000, 500, 1).unwrap();
        assert!((4..=5).contains(&n), "{n}");
    }

    #[test]
    fn versions_sweep_reports_identical_residues() {
        let img = gen_crunch(CrunchParams::small(1)).unwrap();
        let rows = versions_sweep(&img, SemanticTransform::ParamReorder, &[2, 5], 3, 1).unwrap();
        assert!(rows.iter().all(|r| r.residue_identical));
        assert!(rows[0].mean_mobile_functions <= rows[1].mean_mobile_functions + 1e-9);
    }
}
