// Small measurements on the virtual clock: transfers of an always-hot
// block under several refresh intervals, and mobility against the number
// of semantic variants.

use std::error::Error;

use renewal::bench::experiments::{hot_block_transfers, versions_sweep};
use renewal::bench::report::{render_table, versions_trends};
use renewal::bench::{gen_crunch, CrunchParams};
use renewal::engines::SemanticTransform;

pub fn run_example() -> Result<(), Box<dyn Error>> {
    for r in [2000, 3000, 5000] {
        println!("refresh {r:>4} ms over 10 s: {} transfers", hot_block_transfers(10_000, r, 1)?);
    }
    let img = gen_crunch(CrunchParams::small(1))?;
    let rows = versions_sweep(&img, SemanticTransform::ParamReorder, &[2, 5, 10], 3, 1)?;
    print!("{}", render_table(&rows)?);
    for c in versions_trends(&rows) {
        println!("[{}] {}: {}", if c.holds { "ok" } else { "FAIL" }, c.check, c.detail);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
