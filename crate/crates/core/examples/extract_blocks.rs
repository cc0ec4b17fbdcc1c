// Profile a generated program, pick its hot functions and split them out
// as mobile blocks together with the data they own.

use std::error::Error;

use renewal::bench::experiments::profile_program;
use renewal::bench::{gen_crunch, select_hot, CrunchParams};
use renewal::extractor::{extract, Annotation};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    let img = gen_crunch(CrunchParams::small(7))?;
    let hot = select_hot(&profile_program(&img, b"")?, 0.5)?;
    let annotations: Vec<Annotation> = hot.iter().map(|f| Annotation::mobile_with_data(*f)).collect();
    let result = extract(&img, &annotations)?;

    println!("static image: {} code bytes (was {})", result.static_image.code_bytes(), img.code_bytes());
    for block in &result.blocks {
        let owned = result.ownership.get(&block.block_id).cloned().unwrap_or_default();
        println!("block {:>2}: MBLK {:>4} bytes, owns sections {owned:?}", block.block_id, block.packed_len());
    }
    for w in &result.warnings {
        println!("warning: {w:?}");
    }
    assert!(result.blocks.iter().all(|b| result.static_image.function(b.block_id).is_some_and(|f| f.is_mobile_stub())));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
