mod common;

use renewal::bench::{gen_crunch, gen_random, gen_wbcapp, CrunchParams, RandomParams, WbcAppParams};

#[test]
fn crunch_output_survives_random_protection() {
    let img = gen_crunch(CrunchParams::small(7)).unwrap();
    for t in 0..12 {
        common::transparency_trial(&img, 0xC0 + t).unwrap();
    }
}

#[test]
fn wbcapp_output_survives_random_protection() {
    let img = gen_wbcapp(WbcAppParams::small(7)).unwrap();
    for t in 0..6 {
        common::transparency_trial(&img, 0xB0 + t).unwrap();
    }
}

#[test]
fn random_images_survive_random_protection() {
    for seed in 0..20 {
        let img = gen_random(seed, RandomParams::default());
        for t in 0..3 {
            if let Err(e) = common::transparency_trial(&img, seed << 8 | t) {
                panic!("image {seed} trial {t}: {e}");
            }
        }
    }
}
