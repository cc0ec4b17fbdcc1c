// Produce many versions of one mobile block and check that they differ in
// bytes but not in behaviour; then generate white-box tables for a key.

use std::collections::BTreeSet;
use std::error::Error;

use renewal::bench::experiments::run_plain;
use renewal::bench::programs::reachable_fids;
use renewal::bench::{gen_crunch, protect, CrunchParams, ProtectOptions};
use renewal::blockdb::BlockCatalog;
use renewal::engines::{wbc_generate, wbc_reference_encrypt, WbcKey};
use renewal::vm::{fnv1a64, StaticHost, Vm};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let img = gen_crunch(CrunchParams::small(3))?;
    let fid = reachable_fids(&img).into_iter().find(|f| *f != img.entry_fid).ok_or("no callee")?;
    let mut catalog = BlockCatalog::in_memory();
    let p = protect(&img, &BTreeSet::from([fid]), &ProtectOptions::with_versions(8, 11), &mut catalog)?;
    let (expected, _, _) = run_plain(&img, b"", 5)?;

    let mut hashes = BTreeSet::new();
    for v in catalog.versions(fid) {
        let payload = v.unpack();
        hashes.insert(fnv1a64(&payload.code));
        let out = Vm::load_image(&p.image, 5)?.run(b"", &mut StaticHost::new([payload]))?;
        assert_eq!(out.output, expected);
    }
    println!("f{fid}: {} versions, {} distinct code bodies, all equivalent", catalog.versions(fid).len(), hashes.len());

    let key: WbcKey = [0x1234, 0x5678, 0x9abc, 0xdef0, 0x0f0f];
    let tables = wbc_generate(&key, 42, true);
    for pt in (0..=u16::MAX).step_by(997) {
        assert_eq!(tables.evaluate(pt), wbc_reference_encrypt(&key, pt));
    }
    println!("white-box tables agree with the reference cipher on sampled inputs");
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
