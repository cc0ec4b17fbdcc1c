// Build a two-function image by hand, run it, and round-trip it through
// the RVMI container.

use std::error::Error;

use renewal::vm::isa::sys;
use renewal::vm::{ins, FunctionDef, NullHost, ProgramImage, Vm};

pub fn run_example() -> Result<(), Box<dyn Error>> {
    // main prints add(40, 2) as a byte; add is an ordinary static function.
    let main = FunctionDef::new(
        0,
        "main",
        0,
        vec![ins::loadi(0, 40), ins::loadi(1, 2), ins::call(1), ins::sys(sys::PUTC), ins::halt()],
    );
    let add = FunctionDef::new(1, "add", 2, vec![ins::add(0, 0, 1), ins::ret()]);
    let mut img = ProgramImage { functions: vec![main, add], entry_fid: 0, ..Default::default() };
    img.rebuild_code_relocs();
    img.validate()?;

    let out = Vm::load_image(&img, 1)?.run(&[], &mut NullHost)?;
    assert_eq!(out.output, b"*");
    println!(
        "output {:?}, {} instructions, {} virtual ms",
        String::from_utf8_lossy(&out.output),
        out.instructions,
        out.virtual_ms
    );

    let bytes = img.to_rvmi();
    assert_eq!(ProgramImage::from_rvmi(&bytes)?, img);
    println!("RVMI container: {} bytes", bytes.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn Error>> {
    run_example()
}
