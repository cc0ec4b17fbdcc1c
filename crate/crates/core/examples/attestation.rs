// Challenge a client's mapped copy of a block: a clean copy verifies, a
// patched one is reported as a violation.

use std::collections::BTreeSet;
use std::error::Error;

use renewal::bench::programs::reachable_fids;
use renewal::bench::{gen_crunch, protect, CrunchParams, ProtectOptions};
use renewal::blockdb::BlockCatalog;
use renewal::client::{answer_challenge, session_id_from_seed};
use renewal::engines::HashVariant;
use renewal::protocol::Message;
use renewal::server::{Manager, Policy, PolicyConfig, ServerConfig};
use renewal::vm::{GmrtEntry, MobileBlockPayload, Vm};

fn attest(tamper: bool) -> Result<bool, Box<dyn Error>> {
    let img = gen_crunch(CrunchParams::small(4))?;
    let block = reachable_fids(&img).into_iter().find(|f| *f != img.entry_fid).ok_or("no callee")?;
    let mut catalog = BlockCatalog::in_memory();
    let p = protect(&img, &BTreeSet::from([block]), &ProtectOptions::with_versions(3, 4), &mut catalog)?;
    let mut m =
        Manager::in_memory(catalog, &ServerConfig::new("", PolicyConfig::new(Policy::None))).with_manifest(p.manifest);

    let sid = session_id_from_seed(4);
    let mut bound = None;
    m.handle(&mut bound, Message::Hello { app_id: "demo".into(), session_id: sid.clone(), proto_version: 1 }, 0);
    let Some(Message::BlockResp { payload, .. }) =
        m.handle(&mut bound, Message::BlockReq { session_id: sid.clone(), block_id: block }, 1).pop()
    else {
        return Err("no block served".into());
    };
    let mut vm = Vm::load_image(&p.image, 4)?;
    vm.map_block(block, &MobileBlockPayload::unpack(&payload)?)?;
    if tamper {
        let Some(GmrtEntry::Loaded { base, .. }) = vm.gmrt().get(block) else { return Err("not loaded".into()) };
        let b = vm.read_bytes(base + 3, 1)?[0];
        vm.write_bytes(base + 3, &[b ^ 0x40])?;
    }
    let Message::RaChallenge { challenge_id, nonce, walk_seed, sample_count, variant, .. } =
        m.challenge(&sid, block, 0, HashVariant::FnvForward, 2)?
    else {
        return Err("no challenge".into());
    };
    let hash = answer_challenge(&vm, block, nonce, walk_seed, sample_count, variant).ok_or("block not mapped")??;
    m.handle(&mut bound, Message::RaResponse { challenge_id, hash }, 3);
    Ok(m.violations().is_empty())
}

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let clean = attest(false)?;
    let patched = attest(true)?;
    println!("clean copy verified: {clean}; patched copy verified: {patched}");
    assert!(clean && !patched);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
