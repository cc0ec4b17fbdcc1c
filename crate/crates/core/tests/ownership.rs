mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use renewal::bench::{gen_random, RandomParams};
use renewal::extractor::compute_owned_sections;
use renewal::vm::Prng;

fn large() -> RandomParams {
    RandomParams { max_functions: 50, max_sections: 40, ..RandomParams::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ownership_matches_brute_force(seed in any::<u64>(), pick in any::<u64>(), p in 0.05f64..0.9) {
        let img = gen_random(seed, large());
        let mobile = common::random_mobile(&img, &mut Prng::new(pick | 1), p);
        let got: BTreeMap<u32, Vec<u32>> = compute_owned_sections(&img, &mobile);
        prop_assert_eq!(got, common::ownership_oracle(&img, &mobile));
    }
}
