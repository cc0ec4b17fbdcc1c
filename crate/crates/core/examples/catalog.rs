// Store versions in an on-disk catalog, reopen it, and draw versions the
// way the server does.

use std::collections::BTreeSet;
use std::error::Error;

use renewal::bench::programs::reachable_fids;
use renewal::bench::{gen_crunch, protect, CrunchParams, ProtectOptions};
use renewal::blockdb::{BlockCatalog, Manifest, PickStrategy};
use renewal::vm::Prng;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let dir = std::env::temp_dir().join(format!("renewal-catalog-{}", std::process::id()));
    let img = gen_crunch(CrunchParams::small(5))?;
    let fid = reachable_fids(&img).into_iter().find(|f| *f != img.entry_fid).ok_or("no callee")?;
    {
        let mut catalog = BlockCatalog::open(&dir)?;
        let p = protect(&img, &BTreeSet::from([fid]), &ProtectOptions::with_versions(12, 5), &mut catalog)?;
        catalog.save_manifest(&p.manifest)?;
    }

    let catalog = BlockCatalog::open(&dir)?;
    let manifest = Manifest::load(&dir)?;
    println!("reopened {}: {} versions of blocks {:?}", dir.display(), catalog.len(), catalog.block_ids());
    assert!(manifest.entries.contains_key(&fid));

    let mut prng = Prng::new(9);
    let drawn: BTreeSet<u64> = (0..200)
        .map(|t| catalog.pick_version(fid, 0, PickStrategy::RandomLive, t, &mut prng).map(|v| v.version_id))
        .collect::<Result<_, _>>()?;
    println!("200 random_live draws hit {} of 12 versions", drawn.len());
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
