//! Oracles and trial drivers shared by the integration tests and the
//! acceptance harness.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use renewal::bench::experiments::{run_plain, Deployment};
use renewal::bench::programs::reachable_fids;
use renewal::bench::{protect, ProtectOptions};
use renewal::blockdb::{BlockCatalog, PickStrategy};
use renewal::client::{ClientConfig, LinkModel};
use renewal::server::{Policy, PolicyConfig, Scope};
use renewal::vm::{Prng, ProgramImage, RelocationRecord};

/// Owned sections by brute force: a reachability matrix over data
/// relocations, then the characterisation "s is owned by f iff s and every
/// data-reloc ancestor of s are exclusive, inaccessible descendants of f's
/// LEAs".
#[allow(clippy::needless_range_loop)]
pub fn ownership_oracle(img: &ProgramImage, mobile: &BTreeSet<u32>) -> BTreeMap<u32, Vec<u32>> {
    let sids: Vec<u32> = img.sections.iter().map(|s| s.sid).collect();
    let idx: BTreeMap<u32, usize> = sids.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let n = sids.len();
    // reach[a][b]: b reachable from a through zero or more data relocations.
    let mut reach = vec![vec![false; n]; n];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for r in &img.relocations {
        if let RelocationRecord::Data { sid: src_sid, target: dst_sid, .. } = *r {
            reach[idx[&src_sid]][idx[&dst_sid]] = true;
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    // Strict ancestors: a path of length >= 1 exists from a to b.
    let mut strict = vec![vec![false; n]; n];
    for r in &img.relocations {
        if let RelocationRecord::Data { sid: src_sid, target: dst_sid, .. } = *r {
            let (s, d) = (idx[&src_sid], idx[&dst_sid]);
            for a in 0..n {
                if reach[a][s] {
                    strict[a][d] = true;
                }
            }
        }
    }
    let leas = |fid: u32| -> Vec<usize> {
        img.relocations
            .iter()
            .filter_map(|r| match *r {
                RelocationRecord::Code { fid: f, sid, .. } if f == fid => Some(idx[&sid]),
                _ => None,
            })
            .collect()
    };
    let mut roots = vec![false; n];
    for (i, s) in img.sections.iter().enumerate() {
        roots[i] = s.exported;
    }
    for f in &img.functions {
        if !mobile.contains(&f.fid) {
            for i in leas(f.fid) {
                roots[i] = true;
            }
        }
    }
    let accessible: Vec<bool> = (0..n).map(|j| (0..n).any(|i| roots[i] && reach[i][j])).collect();
    let reached_by = |fid: u32| -> Vec<bool> {
        let starts = leas(fid);
        (0..n).map(|j| starts.iter().any(|&i| reach[i][j])).collect()
    };
    let per: BTreeMap<u32, Vec<bool>> = mobile.iter().map(|f| (*f, reached_by(*f))).collect();
    let mut out = BTreeMap::new();
    for (&f, mine) in &per {
        let candidate: Vec<bool> =
            (0..n).map(|j| mine[j] && !accessible[j] && per.iter().all(|(g, r)| *g == f || !r[j])).collect();
        let owned: Vec<u32> = (0..n)
            .filter(|&j| candidate[j] && (0..n).all(|a| !strict[a][j] || candidate[a]))
            .map(|j| sids[j])
            .collect();
        let mut owned = owned;
        owned.sort_unstable();
        out.insert(f, owned);
    }
    out
}

/// A random mobile set: every function with code has probability `p`, and
/// at least one is chosen.
pub fn random_mobile(img: &ProgramImage, prng: &mut Prng, p: f64) -> BTreeSet<u32> {
    let candidates: Vec<u32> = img.functions.iter().filter(|f| !f.code.is_empty()).map(|f| f.fid).collect();
    pick_from(&candidates, prng, p)
}

fn pick_from(candidates: &[u32], prng: &mut Prng, p: f64) -> BTreeSet<u32> {
    let mut set: BTreeSet<u32> = candidates.iter().copied().filter(|_| prng.chance(p)).collect();
    if set.is_empty() {
        set.insert(candidates[prng.index(candidates.len())]);
    }
    set
}

/// A random flush schedule scaled to a run of about `run_ms` virtual ms.
pub fn random_policy(prng: &mut Prng, mobile: &BTreeSet<u32>, run_ms: u64) -> PolicyConfig {
    let span = run_ms.max(3);
    let kind = match prng.index(8) {
        0 => Policy::None,
        1..=3 => Policy::TimedRefresh { interval_ms: 1 + prng.below(span / 2 + 1), scope: Scope::All },
        4 | 5 => {
            let blocks: Vec<u32> = mobile.iter().copied().filter(|_| prng.chance(0.6)).collect();
            let scope = if blocks.is_empty() { Scope::All } else { Scope::Blocks(blocks) };
            Policy::TimedRefresh { interval_ms: 1 + prng.below(span / 3 + 1), scope }
        }
        _ => Policy::PerBlockTtl { ttl_ms: 1 + prng.below(span / 2 + 1) },
    };
    PolicyConfig::new(kind)
}

/// One randomized protected run of `img`. Returns the number of flushes the
/// client applied; `Err` describes a mismatch.
pub fn transparency_trial(img: &ProgramImage, trial_seed: u64) -> Result<u64, String> {
    let mut prng = Prng::new(trial_seed | 1);
    let input: Vec<u8> = (0..prng.index(24)).map(|_| prng.below(256) as u8).collect();
    let heap_seed = prng.next_u64();
    let (expected, virtual_ms, _) = run_plain(img, &input, heap_seed).map_err(|e| format!("plain run: {e}"))?;
    let reachable: Vec<u32> = reachable_fids(img)
        .into_iter()
        .filter(|f| *f != img.entry_fid && img.function(*f).is_some_and(|d| !d.code.is_empty()))
        .collect();
    let mobile = if !reachable.is_empty() && prng.chance(0.75) {
        pick_from(&reachable, &mut prng, 0.5)
    } else {
        random_mobile(img, &mut prng, 0.4)
    };
    let opts = ProtectOptions {
        levels: vec![prng.below(3) as u32],
        data_mobility: prng.chance(0.8),
        ..ProtectOptions::with_versions(1 + prng.index(3), prng.next_u64())
    };
    let mut catalog = BlockCatalog::in_memory();
    let p = protect(img, &mobile, &opts, &mut catalog).map_err(|e| format!("protect {mobile:?}: {e}"))?;
    let latency = 1 + prng.below(2);
    let policy = random_policy(&mut prng, &mobile, virtual_ms + 2 * latency * mobile.len() as u64);
    let strategy = [PickStrategy::RandomLive, PickStrategy::Latest, PickStrategy::RoundRobin][prng.index(3)];
    let d = Deployment::with_strategy(
        p.image.clone(),
        catalog,
        p.manifest.clone(),
        policy.clone(),
        prng.next_u64(),
        strategy,
    );
    let link = LinkModel { latency_ms: latency, bytes_per_ms: 0, realtime: false };
    let run = d
        .run(ClientConfig::with_seed(prng.next_u64()), link, &input, prng.next_u64())
        .map_err(|e| format!("protected run (mobile {mobile:?}, {policy:?}): {e}"))?;
    if run.report.output != expected {
        return Err(format!("output differs (mobile {mobile:?}, {policy:?})"));
    }
    Ok(run.report.stats.flushes_handled)
}

/// Outcome of one run against a TCP server that is killed and restarted.
#[derive(Debug)]
pub struct RestartTrial {
    pub output_matches: bool,
    pub retried_requests: u64,
    pub reconnects: u64,
    pub error: Option<String>,
}

/// Protect `img` into an on-disk catalog at `dir` and return the static image.
pub fn prepare_catalog(
    img: &ProgramImage,
    mobile: &BTreeSet<u32>,
    versions: usize,
    seed: u64,
    dir: &std::path::Path,
) -> ProgramImage {
    let mut catalog = BlockCatalog::open(dir).expect("catalog");
    let p = protect(img, mobile, &ProtectOptions::with_versions(versions, seed), &mut catalog).expect("protect");
    catalog.save_manifest(&p.manifest).expect("manifest");
    p.image
}

/// Run `image` over TCP while the server is killed after `kill_after_ms`
/// and restarted on the same port from the same catalog and journal.
pub fn kill_restart_trial(
    image: &ProgramImage,
    expected: &[u8],
    config: &renewal::server::ServerConfig,
    input: &[u8],
    seed: u64,
    kill_after_ms: u64,
) -> RestartTrial {
    use std::net::TcpListener;
    use std::time::Duration;

    use renewal::client::{run_protected, Binder, TcpTransport};
    use renewal::server::{serve, Manager};

    let listener = TcpListener::bind(("127.0.0.1", 0)).expect("bind");
    let addr = listener.local_addr().expect("addr");
    let server = serve(Manager::open(config).expect("open"), listener, config.tick_ms).expect("serve");

    let (image, input_owned) = (image.clone(), input.to_vec());
    let client = std::thread::spawn(move || {
        let cfg = ClientConfig { request_timeout_ms: 2000, ..ClientConfig::with_seed(seed) };
        let transport = TcpTransport::connect(addr, cfg.request_timeout_ms).map_err(|e| e.to_string())?;
        let mut binder = Binder::connect(transport, cfg).map_err(|e| e.to_string())?;
        run_protected(&image, &mut binder, &input_owned, seed).map_err(|e| e.to_string())
    });

    std::thread::sleep(Duration::from_millis(kill_after_ms));
    server.shutdown();
    let listener = TcpListener::bind(addr).expect("rebind");
    let server = serve(Manager::open(config).expect("reopen"), listener, config.tick_ms).expect("serve again");
    let result = client.join().expect("client thread");
    server.shutdown();
    match result {
        Ok(r) => RestartTrial {
            output_matches: r.output == expected,
            retried_requests: r.stats.retried_requests,
            reconnects: r.stats.reconnects,
            error: None,
        },
        Err(e) => RestartTrial { output_matches: false, retried_requests: 0, reconnects: 0, error: Some(e) },
    }
}

/// One protected crunch run under a timed refresh with the given flush
/// deadline, over a virtual-clock loopback link. Returns the server's
/// violations, the flushes the client handled and the run's virtual length.
pub fn flush_run(
    rounds: u32,
    interval_ms: u64,
    deadline_ms: u64,
    suppress_ack: bool,
    seed: u64,
) -> (Vec<renewal::server::ViolationEvent>, u64, u64) {
    use renewal::bench::experiments::profile_program;
    use renewal::bench::{gen_crunch, select_hot, CrunchParams};

    let img = gen_crunch(CrunchParams { rounds, ..CrunchParams::default() }).expect("crunch");
    let mobile = select_hot(&profile_program(&img, b"").expect("profile"), 0.5).expect("hot");
    let mut catalog = BlockCatalog::in_memory();
    let p = protect(&img, &mobile, &ProtectOptions::with_versions(4, seed), &mut catalog).expect("protect");
    let policy = PolicyConfig {
        flush_deadline_ms: deadline_ms,
        ..PolicyConfig::new(Policy::TimedRefresh { interval_ms, scope: Scope::All })
    };
    let d =
        Deployment::with_strategy(p.image.clone(), catalog, p.manifest.clone(), policy, seed, PickStrategy::RandomLive);
    let cfg = ClientConfig { suppress_flush_ack: suppress_ack, ..ClientConfig::with_seed(seed) };
    let run = d.run(cfg, LinkModel { latency_ms: 1, bytes_per_ms: 0, realtime: false }, b"", seed).expect("run");
    let violations = d.server.lock().expect("lock").violations().to_vec();
    (violations, run.report.stats.flushes_handled, run.report.virtual_ms)
}

/// Attestation of one block copy mapped into a client VM. With `tamper`,
/// flips the byte at that index of the mapped code first. Returns whether
/// the server recorded an `ra_mismatch` and the challenged region length.
pub fn ra_trial(seed: u64, tamper: Option<usize>) -> (bool, usize, u32) {
    use renewal::bench::gen_crunch;
    use renewal::bench::CrunchParams;
    use renewal::client::{answer_challenge, session_id_from_seed};
    use renewal::engines::HashVariant;
    use renewal::protocol::Message;
    use renewal::server::{Manager, ServerConfig, ViolationKind};
    use renewal::vm::{GmrtEntry, MobileBlockPayload, Vm};

    let img = gen_crunch(CrunchParams::small(seed)).expect("crunch");
    let mut prng = Prng::new(seed | 1);
    let candidates: Vec<u32> = reachable_fids(&img).into_iter().filter(|f| *f != img.entry_fid).collect();
    let block = candidates[prng.index(candidates.len())];
    let mut catalog = BlockCatalog::in_memory();
    let p = protect(&img, &BTreeSet::from([block]), &ProtectOptions::with_versions(3, seed), &mut catalog)
        .expect("protect");
    let cfg = ServerConfig::new("", PolicyConfig::new(Policy::None));
    let mut m = Manager::in_memory(catalog, &cfg).with_manifest(p.manifest.clone());

    let sid = session_id_from_seed(seed);
    let mut bound = None;
    m.handle(&mut bound, Message::Hello { app_id: "ra".into(), session_id: sid.clone(), proto_version: 1 }, 0);
    let reply = m.handle(&mut bound, Message::BlockReq { session_id: sid.clone(), block_id: block }, 1);
    let Some(Message::BlockResp { payload, .. }) = reply.into_iter().next() else { panic!("no block") };
    let mut vm = Vm::load_image(&p.image, seed).expect("load");
    vm.map_block(block, &MobileBlockPayload::unpack(&payload).expect("payload")).expect("map");
    let region_len = vm.mapped_code(block).expect("mapped").len();
    if let Some(i) = tamper {
        let Some(GmrtEntry::Loaded { base, .. }) = vm.gmrt().get(block) else { panic!("not loaded") };
        let addr = base + (i % region_len) as u32;
        let b = vm.read_bytes(addr, 1).expect("read")[0];
        vm.write_bytes(addr, &[b ^ (1 + prng.below(255) as u8)]).expect("write");
    }
    let Message::RaChallenge { challenge_id, nonce, walk_seed, sample_count, variant, .. } =
        m.challenge(&sid, block, 0, HashVariant::FnvForward, 2).expect("challenge")
    else {
        panic!("not a challenge")
    };
    let hash = answer_challenge(&vm, block, nonce, walk_seed, sample_count, variant).expect("mapped").expect("hash");
    m.handle(&mut bound, Message::RaResponse { challenge_id, hash }, 3);
    let mismatch = m.violations().iter().any(|v| v.kind == ViolationKind::RaMismatch);
    (mismatch, region_len, sample_count)
}

/// Distinct versions among `draws` block requests served with random_live
/// from a catalog of `versions` versions of one block.
pub fn dispersal(versions: usize, draws: usize, seed: u64) -> usize {
    use renewal::bench::{gen_crunch, CrunchParams};
    use renewal::client::session_id_from_seed;
    use renewal::protocol::Message;
    use renewal::server::{Manager, ServerConfig};

    let img = gen_crunch(CrunchParams::small(seed)).expect("crunch");
    let block = reachable_fids(&img).into_iter().find(|f| *f != img.entry_fid).expect("callee");
    let mut catalog = BlockCatalog::in_memory();
    let p = protect(&img, &BTreeSet::from([block]), &ProtectOptions::with_versions(versions, seed), &mut catalog)
        .expect("protect");
    let cfg = ServerConfig { seed, ..ServerConfig::new("", PolicyConfig::new(Policy::None)) };
    let mut m = Manager::in_memory(catalog, &cfg).with_manifest(p.manifest);
    let sid = session_id_from_seed(seed);
    let mut bound = None;
    m.handle(&mut bound, Message::Hello { app_id: "d".into(), session_id: sid.clone(), proto_version: 1 }, 0);
    let mut seen = BTreeSet::new();
    for t in 0..draws {
        match m.handle(&mut bound, Message::BlockReq { session_id: sid.clone(), block_id: block }, t as u64).pop() {
            Some(Message::BlockResp { version_id, .. }) => {
                seen.insert(version_id);
            }
            other => panic!("unexpected reply {other:?}"),
        }
    }
    seen.len()
}
