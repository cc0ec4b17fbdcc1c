use std::collections::BTreeSet;
use std::fs;

use renewal::bench::{gen_crunch, protect, CrunchParams, ProtectOptions};
use renewal::blockdb::{BlockCatalog, Manifest, PickStrategy, CATALOG_FILE};
use renewal::vm::{fnv1a64, Prng};

#[test]
fn catalog_survives_reopening() {
    let dir = tempfile::tempdir().unwrap();
    let img = gen_crunch(CrunchParams::small(1)).unwrap();
    let mut cat = BlockCatalog::open(dir.path()).unwrap();
    let p = protect(&img, &BTreeSet::from([5, 6]), &ProtectOptions::with_versions(5, 2), &mut cat).unwrap();
    cat.save_manifest(&p.manifest).unwrap();

    let again = BlockCatalog::open(dir.path()).unwrap();
    assert_eq!(again.len(), 10);
    for b in [5, 6] {
        assert_eq!(again.versions(b), cat.versions(b));
        for v in again.versions(b) {
            assert_eq!(fnv1a64(&v.payload), v.expected_hash);
        }
    }
    assert_eq!(Manifest::load(dir.path()).unwrap(), p.manifest);

    let tsv = fs::read_to_string(dir.path().join(CATALOG_FILE)).unwrap();
    assert_eq!(tsv.lines().count(), 10);
    assert!(tsv.lines().all(|l| l.split('\t').count() == 9));
}

#[test]
fn tampered_payload_file_is_rejected_on_open() {
    let dir = tempfile::tempdir().unwrap();
    let img = gen_crunch(CrunchParams::small(1)).unwrap();
    let mut cat = BlockCatalog::open(dir.path()).unwrap();
    protect(&img, &BTreeSet::from([5]), &ProtectOptions::with_versions(2, 2), &mut cat).unwrap();
    let path = dir.path().join("5").join("v2.mblk");
    let mut bytes = fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&path, bytes).unwrap();
    assert!(BlockCatalog::open(dir.path()).is_err());
}

#[test]
fn random_live_draws_cover_the_pool() {
    let img = gen_crunch(CrunchParams::small(1)).unwrap();
    let mut cat = BlockCatalog::in_memory();
    protect(&img, &BTreeSet::from([5]), &ProtectOptions::with_versions(60, 2), &mut cat).unwrap();
    let mut prng = Prng::new(3);
    let seen: BTreeSet<u64> =
        (0..2000).map(|_| cat.pick_version(5, 0, PickStrategy::RandomLive, 0, &mut prng).unwrap().version_id).collect();
    assert_eq!(seen.len(), 60);
}
