use renewal::bench::{gen_crunch, CrunchParams};
use renewal::vm::{NullHost, Vm};

const CRUNCH_SEED7: &str = include_str!("golden/crunch_seed7.txt");

#[test]
fn crunch_seed_7_output_is_frozen() {
    let img = gen_crunch(CrunchParams::default()).unwrap();
    let out = Vm::load_image(&img, 1).unwrap().run(b"", &mut NullHost).unwrap();
    if std::env::var_os("RENEWAL_BLESS").is_some() {
        std::fs::write(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/crunch_seed7.txt"), &out.output).unwrap();
    }
    assert_eq!(String::from_utf8(out.output).unwrap(), CRUNCH_SEED7);
    assert_eq!(out.exit_code, 0);
}
