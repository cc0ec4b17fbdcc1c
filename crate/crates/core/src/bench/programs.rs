//! The benchmark corpus: `crunch`, `wbcapp`, `spin` and random images.
//!
//! Calling convention: arguments in R0..R3, result in R0; R0..R3 are
//! clobbered by calls and R4..R7 are preserved by the callee.

use std::collections::BTreeSet;

use crate::engines::wbc::{random_key, wbc_generate, WbcKey, WbcTemplate, TABLES};
use crate::engines::wbc_reference_encrypt;
use crate::vm::isa::{ins, sys, Instruction};
use crate::vm::{Asm, DataSection, FunctionDef, LayoutTable, Opcode, Prng, ProgramImage, RelocationRecord};

use super::BenchError;

fn function(fid: u32, name: &str, params: u8, body: impl FnOnce(&mut Asm)) -> FunctionDef {
    let mut a = Asm::new();
    body(&mut a);
    FunctionDef::new(fid, name, params, a.finish())
}

fn push_all(a: &mut Asm, regs: &[u8]) {
    for r in regs {
        a.emit(ins::push(*r));
    }
}

fn pop_all(a: &mut Asm, regs: &[u8]) {
    for r in regs.iter().rev() {
        a.emit(ins::pop(*r));
    }
}

fn finish_image(functions: Vec<FunctionDef>, sections: Vec<DataSection>, data: Vec<RelocationRecord>) -> ProgramImage {
    let mut img = ProgramImage { functions, sections, relocations: data, entry_fid: 0, layouts: Vec::new() };
    img.rebuild_code_relocs();
    img
}

/// Seed-dependent start value of the input mixer; never zero.
fn mixer_start(seed: u64) -> u32 {
    let s = (Prng::new(seed ^ 0xC0FF_EE00).next_u64() >> 32) as u32;
    s.max(1)
}

/// Mix every input byte into a seed: `s = s * 31 + byte`, zero mapped to 1.
fn read_seed_fn(fid: u32, start: u32) -> FunctionDef {
    function(fid, "read_seed", 0, |a| {
        let (l, d, e) = (a.label(), a.label(), a.label());
        a.emit_all([ins::push(4), ins::loadi(4, start)]);
        a.bind(l);
        a.emit_all([ins::sys(sys::GETC), ins::loadi(1, u32::MAX), ins::xor(2, 0, 1)]);
        a.jz(2, d);
        a.emit_all([ins::loadi(1, 31), ins::mul(4, 4, 1), ins::add(4, 4, 0)]);
        a.jmp(l);
        a.bind(d);
        a.emit(ins::mov(0, 4));
        a.jnz(0, e);
        a.emit(ins::loadi(0, 1));
        a.bind(e);
        a.emit_all([ins::pop(4), ins::ret()]);
    })
}

fn print_char_fn(fid: u32) -> FunctionDef {
    FunctionDef::new(fid, "print_char", 1, vec![ins::sys(sys::PUTC), ins::ret()])
}

fn newline_fn(fid: u32, print_char: u32) -> FunctionDef {
    FunctionDef::new(fid, "newline", 0, vec![ins::loadi(0, 10), ins::call(print_char), ins::ret()])
}

fn print_hex_fn(fid: u32, hex_sid: u32, print_char: u32) -> FunctionDef {
    function(fid, "print_hex", 1, |a| {
        push_all(a, &[4, 5, 7]);
        a.emit_all([ins::mov(4, 0), ins::loadi(7, 8), ins::lea(5, hex_sid)]);
        let l = a.here();
        a.emit_all([
            ins::loadi(1, 28),
            ins::shr(0, 4, 1),
            ins::add(0, 5, 0),
            ins::loadb(0, 0, 0),
            ins::call(print_char),
            ins::loadi(1, 4),
            ins::shl(4, 4, 1),
            ins::subi(7, 7, 1),
        ]);
        a.jnz(7, l);
        pop_all(a, &[4, 5, 7]);
        a.emit(ins::ret());
    })
}

const HEX: &[u8; 16] = b"0123456789abcdef";

// ---------------------------------------------------------------- crunch

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrunchParams {
    pub seed: u64,
    /// Work buffer size in bytes; a positive multiple of 4.
    pub buffer_len: u32,
    pub rounds: u32,
}

impl Default for CrunchParams {
    fn default() -> Self {
        CrunchParams { seed: 7, buffer_len: 4096, rounds: 48 }
    }
}

impl CrunchParams {
    /// A few rounds over a small buffer, for property tests.
    pub fn small(seed: u64) -> Self {
        CrunchParams { seed, buffer_len: 256, rounds: 3 }
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.buffer_len == 0 || !self.buffer_len.is_multiple_of(4) || self.buffer_len > 1 << 18 {
            return Err(BenchError::Config(format!(
                "buffer_len {} is not a multiple of 4 in 4..=262144",
                self.buffer_len
            )));
        }
        if self.rounds == 0 {
            return Err(BenchError::Config("rounds must be positive".into()));
        }
        Ok(())
    }
}

mod crunch_ids {
    pub const MAIN: u32 = 0;
    pub const READ_SEED: u32 = 1;
    pub const RNG: u32 = 2;
    pub const FILL: u32 = 3;
    pub const RLE: u32 = 4;
    pub const EMIT: u32 = 5;
    pub const CHECKSUM: u32 = 6;
    pub const CRC_STEP: u32 = 7;
    pub const MIX: u32 = 8;
    pub const ROTL: u32 = 9;
    pub const FOLD: u32 = 10;
    pub const TRANSFORM: u32 = 11;
    pub const DELTA_ENC: u32 = 12;
    pub const DELTA_DEC: u32 = 13;
    pub const VERIFY: u32 = 14;
    pub const XOR_STRIPE: u32 = 15;
    pub const COUNT_RUNS: u32 = 16;
    pub const MAX_RUN: u32 = 17;
    pub const HISTOGRAM: u32 = 18;
    pub const ENTROPY: u32 = 19;
    pub const MIN: u32 = 20;
    pub const MAX: u32 = 21;
    pub const CLAMP: u32 = 22;
    pub const PRINT_HEX: u32 = 23;
    pub const PRINT_CHAR: u32 = 24;
    pub const NEWLINE: u32 = 25;
    pub const BANNER: u32 = 26;
    pub const FINALIZE: u32 = 27;
    pub const COMBINE4: u32 = 28;
    pub const ROUND: u32 = 29;
    pub const REVERSE: u32 = 30;
    pub const SWAP: u32 = 31;
    pub const PROGRESS: u32 = 32;

    pub const S_STATE: u32 = 1;
    pub const S_BUF: u32 = 2;
    pub const S_OUT: u32 = 3;
    pub const S_HEX: u32 = 4;
    pub const S_CRC: u32 = 5;
    pub const S_HIST: u32 = 6;
    pub const S_MIX: u32 = 7;
    pub const S_BANNER: u32 = 8;
    pub const S_PTRS: u32 = 9;
}

/// Field offsets of crunch's state record. The state base lives in R6.
mod field {
    pub const SEED: u32 = 0;
    pub const LEN: u32 = 4;
    pub const CHECKSUM: u32 = 8;
    pub const RUNS: u32 = 12;
    pub const ROUND: u32 = 16;
    pub const OUTLEN: u32 = 20;
    pub const MAXRUN: u32 = 24;
    pub const SCORE: u32 = 28;
    pub const OK: u32 = 32;
    pub const COUNT: u32 = 9;
}

const STATE_REG: u8 = 6;

fn crc_table() -> Vec<u8> {
    (0u32..256)
        .flat_map(|n| {
            let mut c = n;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            c.to_le_bytes()
        })
        .collect()
}

/// Compression-like workload: every round fills a buffer from a PRNG,
/// run-length encodes it and folds several checksums into a running state.
pub fn gen_crunch(params: CrunchParams) -> Result<ProgramImage, BenchError> {
    use crunch_ids::*;
    params.validate()?;
    let len = params.buffer_len;
    let mut f = Vec::new();

    f.push(function(MAIN, "main", 0, |a| {
        a.emit_all([
            ins::call(READ_SEED),
            ins::lea(STATE_REG, S_STATE),
            ins::store(0, STATE_REG, field::SEED),
            ins::loadi(0, len),
            ins::store(0, STATE_REG, field::LEN),
            ins::call(BANNER),
            ins::loadi(5, 0),
            ins::loadi(4, params.rounds),
        ]);
        let l = a.here();
        a.emit_all([ins::mov(0, 5), ins::call(ROUND), ins::addi(5, 5, 1)]);
        a.jlt(5, 4, l);
        a.emit_all([
            ins::call(NEWLINE),
            ins::call(FINALIZE),
            ins::call(PRINT_HEX),
            ins::call(NEWLINE),
            ins::loadi(0, 0),
            ins::sys(sys::EXIT),
            ins::halt(),
        ]);
    }));
    f.push(read_seed_fn(READ_SEED, mixer_start(params.seed)));
    f.push(function(RNG, "rng_next", 0, |a| {
        a.emit_all([
            ins::push(6),
            ins::lea(6, S_STATE),
            ins::load(0, 6, field::SEED),
            ins::loadi(1, 13),
            ins::shl(2, 0, 1),
            ins::xor(0, 0, 2),
            ins::loadi(1, 17),
            ins::shr(2, 0, 1),
            ins::xor(0, 0, 2),
            ins::loadi(1, 5),
            ins::shl(2, 0, 1),
            ins::xor(0, 0, 2),
            ins::store(0, 6, field::SEED),
            ins::pop(6),
            ins::ret(),
        ]);
    }));
    f.push(function(FILL, "fill_buffer", 2, |a| {
        let (b, new, put, c) = (a.label(), a.label(), a.label(), a.label());
        push_all(a, &[4, 5, 7]);
        a.emit_all([ins::mov(4, 0), ins::mov(5, 1), ins::loadi(7, 0)]);
        a.jmp(c);
        a.bind(b);
        a.emit_all([ins::call(RNG), ins::loadi(1, 3), ins::and(2, 0, 1)]);
        a.jz(2, new);
        a.jz(7, new);
        a.emit_all([ins::add(1, 4, 7), ins::subi(1, 1, 1), ins::loadb(0, 1, 0)]);
        a.jmp(put);
        a.bind(new);
        a.emit_all([ins::loadi(1, 8), ins::shr(0, 0, 1), ins::loadi(1, 7), ins::and(0, 0, 1), ins::addi(0, 0, 97)]);
        a.bind(put);
        a.emit_all([ins::add(1, 4, 7), ins::storeb(0, 1, 0), ins::addi(7, 7, 1)]);
        a.bind(c);
        a.jlt(7, 5, b);
        pop_all(a, &[4, 5, 7]);
        a.emit(ins::ret());
    }));
    f.push(function(RLE, "rle_encode", 2, |a| {
        let (go, inner, cmp, inc, emit, oc) = (a.label(), a.label(), a.label(), a.label(), a.label(), a.label());
        push_all(a, &[4, 5, 6, 7]);
        a.emit_all([
            ins::mov(4, 0),
            ins::mov(5, 1),
            ins::lea(6, S_STATE),
            ins::loadi(0, 0),
            ins::store(0, 6, field::OUTLEN),
            ins::store(0, 6, field::RUNS),
            ins::loadi(7, 0),
        ]);
        a.jmp(oc);
        a.bind(go);
        a.emit_all([ins::add(1, 4, 7), ins::loadb(2, 1, 0), ins::loadi(3, 1)]);
        a.bind(inner);
        a.emit(ins::add(0, 7, 3));
        a.jlt(0, 5, cmp);
        a.jmp(emit);
        a.bind(cmp);
        a.emit_all([ins::add(1, 4, 0), ins::loadb(1, 1, 0), ins::xor(1, 1, 2)]);
        a.jnz(1, emit);
        a.emit(ins::loadi(1, 255));
        a.jlt(3, 1, inc);
        a.jmp(emit);
        a.bind(inc);
        a.emit(ins::addi(3, 3, 1));
        a.jmp(inner);
        a.bind(emit);
        a.emit_all([
            ins::add(7, 7, 3),
            ins::mov(0, 2),
            ins::mov(1, 3),
            ins::call(EMIT),
            ins::load(0, 6, field::RUNS),
            ins::addi(0, 0, 1),
            ins::store(0, 6, field::RUNS),
        ]);
        a.bind(oc);
        a.jlt(7, 5, go);
        a.emit(ins::load(0, 6, field::OUTLEN));
        pop_all(a, &[4, 5, 6, 7]);
        a.emit(ins::ret());
    }));
    f.push(FunctionDef::new(
        EMIT,
        "rle_emit",
        2,
        vec![
            ins::push(5),
            ins::push(6),
            ins::lea(6, S_STATE),
            ins::load(2, 6, field::OUTLEN),
            ins::lea(5, S_OUT),
            ins::add(3, 5, 2),
            ins::storeb(1, 3, 0),
            ins::storeb(0, 3, 1),
            ins::addi(2, 2, 2),
            ins::store(2, 6, field::OUTLEN),
            ins::pop(6),
            ins::pop(5),
            ins::ret(),
        ],
    ));
    f.push(function(CHECKSUM, "checksum", 2, |a| {
        let (b, c) = (a.label(), a.label());
        push_all(a, &[4, 5, 6, 7]);
        a.emit_all([ins::mov(4, 0), ins::mov(5, 1), ins::loadi(7, 0), ins::loadi(6, u32::MAX)]);
        a.jmp(c);
        a.bind(b);
        a.emit_all([
            ins::add(1, 4, 7),
            ins::loadb(1, 1, 0),
            ins::mov(0, 6),
            ins::call(CRC_STEP),
            ins::mov(6, 0),
            ins::addi(7, 7, 1),
        ]);
        a.bind(c);
        a.jlt(7, 5, b);
        a.emit_all([ins::loadi(1, u32::MAX), ins::xor(0, 6, 1)]);
        pop_all(a, &[4, 5, 6, 7]);
        a.emit(ins::ret());
    }));
    f.push(FunctionDef::new(
        CRC_STEP,
        "crc_step",
        2,
        vec![
            ins::xor(2, 0, 1),
            ins::loadi(3, 255),
            ins::and(2, 2, 3),
            ins::loadi(3, 2),
            ins::shl(2, 2, 3),
            ins::lea(3, S_CRC),
            ins::add(3, 3, 2),
            ins::load(3, 3, 0),
            ins::loadi(2, 8),
            ins::shr(0, 0, 2),
            ins::xor(0, 0, 3),
            ins::ret(),
        ],
    ));
    f.push(FunctionDef::new(
        MIX,
        "mix",
        2,
        vec![
            ins::loadi(2, 13),
            ins::shl(3, 1, 2),
            ins::loadi(2, 19),
            ins::shr(1, 1, 2),
            ins::xor(1, 1, 3),
            ins::xor(0, 0, 1),
            ins::loadi(2, 0x9E37_79B1),
            ins::mul(0, 0, 2),
            ins::loadi(2, 15),
            ins::and(2, 0, 2),
            ins::loadi(3, 2),
            ins::shl(2, 2, 3),
            ins::lea(3, S_MIX),
            ins::add(3, 3, 2),
            ins::load(3, 3, 0),
            ins::add(0, 0, 3),
            ins::ret(),
        ],
    ));
    f.push(FunctionDef::new(
        ROTL,
        "rotl",
        2,
        vec![
            ins::loadi(2, 15),
            ins::and(1, 1, 2),
            ins::addi(1, 1, 1),
            ins::shl(2, 0, 1),
            ins::loadi(3, 32),
            ins::sub(3, 3, 1),
            ins::shr(3, 0, 3),
            ins::xor(0, 2, 3),
            ins::ret(),
        ],
    ));
    f.push(FunctionDef::new(
        FOLD,
        "fold",
        3,
        vec![
            ins::push(4),
            ins::push(5),
            ins::mov(4, 2),
            ins::mov(5, 0),
            ins::call(MIX),
            ins::mov(2, 0),
            ins::mov(0, 4),
            ins::mov(1, 5),
            ins::mov(4, 2),
            ins::call(ROTL),
            ins::xor(0, 0, 4),
            ins::pop(5),
            ins::pop(4),
            ins::ret(),
        ],
    ));
    f.push(function(TRANSFORM, "transform_block", 3, |a| {
        let (b, c) = (a.label(), a.label());
        push_all(a, &[4, 5, 6, 7]);
        a.emit_all([ins::mov(4, 0), ins::mov(5, 1), ins::mov(6, 2), ins::loadi(7, 0)]);
        a.jmp(c);
        a.bind(b);
        a.emit_all([
            ins::add(1, 4, 7),
            ins::load(0, 1, 0),
            ins::add(1, 6, 7),
            ins::call(MIX),
            ins::add(1, 4, 7),
            ins::store(0, 1, 0),
            ins::addi(7, 7, 4),
        ]);
        a.bind(c);
        a.jlt(7, 5, b);
        pop_all(a, &[4, 5, 6, 7]);
        a.emit(ins::ret());
    }));
    f.push(function(DELTA_ENC, "delta_encode", 2, |a| {
        let (l, d) = (a.label(), a.label());
        push_all(a, &[4, 5]);
        a.emit_all([ins::mov(4, 0), ins::mov(5, 1)]);
        a.jz(5, d);
        a.emit(ins::subi(5, 5, 1));
        a.bind(l);
        a.jz(5, d);
        a.emit_all([
            ins::add(1, 4, 5),
            ins::loadb(2, 1, 0),
            ins::subi(1, 1, 1),
            ins::loadb(3, 1, 0),
            ins::sub(2, 2, 3),
            ins::storeb(2, 1, 1),
            ins::subi(5, 5, 1),
        ]);
        a.jmp(l);
        a.bind(d);
        pop_all(a, &[4, 5]);
        a.emit(ins::ret());
    }));
    f.push(function(DELTA_DEC, "delta_decode", 2, |a| {
        let (b, c) = (a.label(), a.label());
        push_all(a, &[4, 5]);
        a.emit_all([ins::mov(4, 0), ins::mov(5, 1), ins::loadi(0, 1)]);
        a.jmp(c);
        a.bind(b);
        a.emit_all([
            ins::add(1, 4, 0),
            ins::loadb(2, 1, 0),
            ins::subi(1, 1, 1),
            ins::loadb(3, 1, 0),
            ins::add(2, 2, 3),
            ins::storeb(2, 1, 1),
            ins::addi(0, 0, 1),
        ]);
        a.bind(c);
        a.jlt(0, 5, b);
        pop_all(a, &[4, 5]);
        a.emit(ins::ret());
    }));
    f.push(function(VERIFY, "verify_roundtrip", 2, |a| {
        let (ok, d) = (a.label(), a.label());
        push_all(a, &[4, 5, 7]);
        a.emit_all([
            ins::mov(4, 0),
            ins::mov(5, 1),
            ins::call(CHECKSUM),
            ins::mov(7, 0),
            ins::mov(0, 4),
            ins::mov(1, 5),
            ins::call(DELTA_ENC),
            ins::mov(0, 4),
            ins::mov(1, 5),
            ins::call(DELTA_DEC),
            ins::mov(0, 4),
            ins::mov(1, 5),
            ins::call(CHECKSUM),
            ins::xor(0, 0, 7),
        ]);
        a.jz(0, ok);
        a.emit(ins::loadi(0, 0));
        a.jmp(d);
        a.bind(ok);
        a.emit(ins::loadi(0, 1));
        a.bind(d);
        pop_all(a, &[4, 5, 7]);
        a.emit(ins::ret());
    }));
    f.push(function(XOR_STRIPE, "xor_stripe", 3, |a| {
        let (b, c) = (a.label(), a.label());
        push_all(a, &[4, 5, 6, 7]);
        a.emit_all([ins::mov(4, 0), ins::mov(5, 1), ins::mov(6, 2), ins::loadi(7, 0)]);
        a.jmp(c);
        a.bind(b);
        a.emit_all([
            ins::add(1, 4, 7),
            ins::load(0, 1, 0),
            ins::xor(0, 0, 6),
            ins::store(0, 1, 0),
            ins::mov(0, 6),
            ins::loadi(1, 5),
            ins::call(ROTL),
            ins::mov(6, 0),
            ins::addi(7, 7, 4),
        ]);
        a.bind(c);
        a.jlt(7, 5, b);
        pop_all(a, &[4, 5, 6, 7]);
        a.emit(ins::ret());
    }));
    f.push(function(COUNT_RUNS, "count_runs", 2, |a| {
        let (b, s, c) = (a.label(), a.label(), a.label());
        push_all(a, &[4, 5]);
        a.emit_all([ins::mov(4, 0), ins::mov(5, 1), ins::loadi(0, 0), ins::loadi(1, 1)]);
        a.jmp(c);
        a.bind(b);
        a.emit_all([
            ins::add(2, 4, 1),
            ins::loadb(3, 2, 0),
            ins::subi(2, 2, 1),
            ins::loadb(2, 2, 0),
            ins::xor(3, 3, 2),
        ]);
        a.jz(3, s);
        a.emit(ins::addi(0, 0, 1));
        a.bind(s);
        a.emit(ins::addi(1, 1, 1));
        a.bind(c);
        a.jlt(1, 5, b);
        pop_all(a, &[4, 5]);
        a.emit(ins::ret());
    }));
    f.push(function(MAX_RUN, "max_run", 2, |a| {
        let (b, end, n, c) = (a.label(), a.label(), a.label(), a.label());
        push_all(a, &[4, 5, 6, 7]);
        a.emit_all([ins::mov(4, 0), ins::mov(5, 1), ins::loadi(6, 1), ins::loadi(7, 1), ins::loadi(1, 1)]);
        a.jmp(c);
        a.bind(b);
        a.emit_all([
            ins::add(2, 4, 1),
            ins::loadb(3, 2, 0),
            ins::subi(2, 2, 1),
            ins::loadb(2, 2, 0),
            ins::xor(3, 3, 2),
        ]);
        a.jnz(3, end);
        a.emit(ins::addi(6, 6, 1));
        a.jmp(n);
        a.bind(end);
        a.emit_all([
            ins::push(1),
            ins::mov(0, 7),
            ins::mov(1, 6),
            ins::call(MAX),
            ins::mov(7, 0),
            ins::pop(1),
            ins::loadi(6, 1),
        ]);
        a.bind(n);
        a.emit(ins::addi(1, 1, 1));
        a.bind(c);
        a.jlt(1, 5, b);
        a.emit_all([ins::mov(0, 7), ins::mov(1, 6), ins::call(MAX)]);
        pop_all(a, &[4, 5, 6, 7]);
        a.emit(ins::ret());
    }));
    f.push(function(HISTOGRAM, "histogram", 2, |a| {
        let (z, b, c) = (a.label(), a.label(), a.label());
        push_all(a, &[4, 5]);
        a.emit_all([ins::mov(4, 0), ins::mov(5, 1), ins::lea(2, S_HIST), ins::loadi(3, 0), ins::loadi(0, 1024)]);
        a.bind(z);
        a.emit_all([ins::store(3, 2, 0), ins::addi(2, 2, 4), ins::subi(0, 0, 4)]);
        a.jnz(0, z);
        a.emit_all([ins::lea(2, S_HIST), ins::loadi(0, 0)]);
        a.jmp(c);
        a.bind(b);
        a.emit_all([
            ins::add(1, 4, 0),
            ins::loadb(1, 1, 0),
            ins::loadi(3, 2),
            ins::shl(1, 1, 3),
            ins::add(1, 1, 2),
            ins::load(3, 1, 0),
            ins::addi(3, 3, 1),
            ins::store(3, 1, 0),
            ins::addi(0, 0, 1),
        ]);
        a.bind(c);
        a.jlt(0, 5, b);
        pop_all(a, &[4, 5]);
        a.emit(ins::ret());
    }));
    f.push(function(ENTROPY, "entropy_score", 0, |a| {
        let (l, n) = (a.label(), a.label());
        push_all(a, &[4, 5, 7]);
        a.emit_all([ins::lea(4, S_HIST), ins::loadi(5, 0), ins::loadi(7, 0)]);
        a.bind(l);
        a.emit_all([ins::add(1, 4, 7), ins::load(0, 1, 0)]);
        a.jz(0, n);
        a.emit_all([
            ins::push(0),
            ins::loadi(1, 64),
            ins::call(MIN),
            ins::pop(1),
            ins::mul(0, 0, 1),
            ins::add(5, 5, 0),
        ]);
        a.bind(n);
        a.emit_all([ins::addi(7, 7, 4), ins::loadi(1, 1024)]);
        a.jlt(7, 1, l);
        a.emit(ins::mov(0, 5));
        pop_all(a, &[4, 5, 7]);
        a.emit(ins::ret());
    }));
    f.push(function(MIN, "min", 2, |a| {
        let d = a.label();
        a.jlt(0, 1, d);
        a.emit(ins::mov(0, 1));
        a.bind(d);
        a.emit(ins::ret());
    }));
    f.push(function(MAX, "max", 2, |a| {
        let t = a.label();
        a.jlt(0, 1, t);
        a.emit(ins::ret());
        a.bind(t);
        a.emit_all([ins::mov(0, 1), ins::ret()]);
    }));
    f.push(FunctionDef::new(
        CLAMP,
        "clamp",
        3,
        vec![ins::push(4), ins::mov(4, 2), ins::call(MAX), ins::mov(1, 4), ins::call(MIN), ins::pop(4), ins::ret()],
    ));
    f.push(print_hex_fn(PRINT_HEX, S_HEX, PRINT_CHAR));
    f.push(print_char_fn(PRINT_CHAR));
    f.push(newline_fn(NEWLINE, PRINT_CHAR));
    f.push(function(BANNER, "banner", 0, |a| {
        let (l, d) = (a.label(), a.label());
        a.emit_all([ins::push(4), ins::lea(4, S_BANNER)]);
        a.bind(l);
        a.emit(ins::loadb(0, 4, 0));
        a.jz(0, d);
        a.emit_all([ins::call(PRINT_CHAR), ins::addi(4, 4, 1)]);
        a.jmp(l);
        a.bind(d);
        a.emit_all([ins::pop(4), ins::ret()]);
    }));
    f.push(FunctionDef::new(
        FINALIZE,
        "finalize",
        0,
        vec![
            ins::push(4),
            ins::push(6),
            ins::lea(6, S_STATE),
            ins::load(0, 6, field::CHECKSUM),
            ins::load(1, 6, field::RUNS),
            ins::load(2, 6, field::MAXRUN),
            ins::load(3, 6, field::SCORE),
            ins::call(COMBINE4),
            ins::mov(4, 0),
            ins::lea(1, S_PTRS),
            ins::load(1, 1, 0),
            ins::load(1, 1, 0),
            ins::mov(0, 4),
            ins::call(MIX),
            ins::mov(4, 0),
            ins::lea(1, S_PTRS),
            ins::load(1, 1, 4),
            ins::load(1, 1, 0),
            ins::mov(0, 4),
            ins::call(MIX),
            ins::mov(4, 0),
            ins::load(1, 6, field::OK),
            ins::load(2, 6, field::ROUND),
            ins::mov(0, 4),
            ins::call(FOLD),
            ins::pop(6),
            ins::pop(4),
            ins::ret(),
        ],
    ));
    f.push(FunctionDef::new(
        COMBINE4,
        "combine4",
        4,
        vec![
            ins::push(4),
            ins::push(5),
            ins::mov(4, 2),
            ins::mov(5, 3),
            ins::call(MIX),
            ins::mov(2, 0),
            ins::mov(0, 4),
            ins::mov(1, 5),
            ins::mov(4, 2),
            ins::call(MIX),
            ins::xor(0, 0, 4),
            ins::pop(5),
            ins::pop(4),
            ins::ret(),
        ],
    ));
    f.push(function(ROUND, "round", 1, |a| {
        let buf_args = [ins::mov(0, 5), ins::load(1, 6, field::LEN)];
        push_all(a, &[4, 5, 6, 7]);
        a.emit_all([ins::mov(4, 0), ins::lea(5, S_BUF), ins::lea(6, S_STATE), ins::store(4, 6, field::ROUND)]);
        a.emit_all(buf_args).emit(ins::call(FILL));
        a.emit_all(buf_args).emit(ins::call(HISTOGRAM));
        a.emit_all([
            ins::call(ENTROPY),
            ins::loadi(1, 16),
            ins::loadi(2, 0x00FF_FFFF),
            ins::call(CLAMP),
            ins::load(1, 6, field::SCORE),
            ins::add(0, 0, 1),
            ins::store(0, 6, field::SCORE),
        ]);
        a.emit_all(buf_args).emit(ins::call(RLE));
        a.emit_all([ins::mov(1, 0), ins::lea(0, S_OUT), ins::call(CHECKSUM), ins::mov(7, 0)]);
        a.emit_all(buf_args).emit_all([
            ins::call(MAX_RUN),
            ins::load(1, 6, field::MAXRUN),
            ins::call(MAX),
            ins::store(0, 6, field::MAXRUN),
        ]);
        a.emit_all(buf_args).emit_all([ins::call(COUNT_RUNS), ins::add(7, 7, 0)]);
        a.emit_all(buf_args).emit_all([ins::mov(2, 4), ins::call(TRANSFORM)]);
        a.emit_all(buf_args).emit_all([
            ins::call(VERIFY),
            ins::load(1, 6, field::OK),
            ins::add(0, 0, 1),
            ins::store(0, 6, field::OK),
        ]);
        a.emit_all(buf_args).emit(ins::call(DELTA_ENC));
        a.emit_all([ins::loadi(1, 0x9E37_79B9), ins::mul(2, 4, 1)]);
        a.emit_all(buf_args).emit(ins::call(XOR_STRIPE));
        a.emit_all(buf_args).emit(ins::call(REVERSE));
        a.emit_all(buf_args).emit_all([
            ins::call(CHECKSUM),
            ins::mov(1, 7),
            ins::mov(2, 4),
            ins::call(FOLD),
            ins::load(1, 6, field::CHECKSUM),
            ins::call(MIX),
            ins::store(0, 6, field::CHECKSUM),
            ins::mov(0, 4),
            ins::call(PROGRESS),
        ]);
        pop_all(a, &[4, 5, 6, 7]);
        a.emit(ins::ret());
    }));
    f.push(function(REVERSE, "reverse", 2, |a| {
        let (l, b, d) = (a.label(), a.label(), a.label());
        push_all(a, &[4, 5, 7]);
        a.emit_all([ins::mov(4, 0), ins::loadi(5, 0), ins::mov(7, 1)]);
        a.jz(7, d);
        a.emit(ins::subi(7, 7, 1));
        a.bind(l);
        a.jlt(5, 7, b);
        a.jmp(d);
        a.bind(b);
        a.emit_all([
            ins::mov(0, 4),
            ins::mov(1, 5),
            ins::mov(2, 7),
            ins::call(SWAP),
            ins::addi(5, 5, 1),
            ins::subi(7, 7, 1),
        ]);
        a.jmp(l);
        a.bind(d);
        pop_all(a, &[4, 5, 7]);
        a.emit(ins::ret());
    }));
    f.push(FunctionDef::new(
        SWAP,
        "swap_bytes",
        3,
        vec![
            ins::add(1, 0, 1),
            ins::add(2, 0, 2),
            ins::loadb(0, 1, 0),
            ins::loadb(3, 2, 0),
            ins::storeb(3, 1, 0),
            ins::storeb(0, 2, 0),
            ins::ret(),
        ],
    ));
    f.push(function(PROGRESS, "print_progress", 1, |a| {
        let d = a.label();
        a.emit_all([
            ins::push(4),
            ins::push(6),
            ins::mov(4, 0),
            ins::lea(6, S_STATE),
            ins::load(0, 6, field::CHECKSUM),
            ins::loadi(1, 15),
            ins::and(0, 0, 1),
            ins::addi(0, 0, 97),
            ins::call(PRINT_CHAR),
            ins::loadi(1, 15),
            ins::and(0, 4, 1),
            ins::xor(0, 0, 1),
        ]);
        a.jnz(0, d);
        a.emit(ins::call(NEWLINE));
        a.bind(d);
        a.emit_all([ins::pop(6), ins::pop(4), ins::ret()]);
    }));

    let mix_consts: Vec<u8> = {
        let mut p = Prng::new(0x4D49_5800 ^ params.seed);
        (0..16).flat_map(|_| p.next_u32().to_le_bytes()).collect()
    };
    let sections = vec![
        DataSection::new(S_STATE, "state", vec![0; field::COUNT as usize * 4]).writable(),
        DataSection::new(S_BUF, "buffer", vec![0; len as usize]).writable(),
        DataSection::new(S_OUT, "rle_out", vec![0; 2 * len as usize + 8]).writable(),
        DataSection::new(S_HEX, "hexdigits", HEX.to_vec()),
        DataSection::new(S_CRC, "crc_table", crc_table()),
        DataSection::new(S_HIST, "histogram", vec![0; 1024]).writable(),
        DataSection::new(S_MIX, "mix_constants", mix_consts),
        DataSection::new(S_BANNER, "banner", b"crunch\n\0".to_vec()),
        // Two pointers, relocated against the mix constants and the CRC table.
        DataSection::new(S_PTRS, "table_ptrs", [4u32.to_le_bytes(), 40u32.to_le_bytes()].concat()),
    ];
    let data = vec![
        RelocationRecord::Data { sid: S_PTRS, offset: 0, target: S_MIX },
        RelocationRecord::Data { sid: S_PTRS, offset: 4, target: S_CRC },
    ];
    f.sort_by_key(|f| f.fid);
    let mut img = finish_image(f, sections, data);
    img.layouts.push(state_layout(&img));
    img.validate().map_err(|e| BenchError::Internal(format!("crunch image: {e}")))?;
    Ok(img)
}

/// Every load or store through the state register is a field access.
fn state_layout(img: &ProgramImage) -> LayoutTable {
    let mut accesses = Vec::new();
    for f in &img.functions {
        let leas_state =
            f.code.iter().any(|i| i.op == Opcode::Lea && i.ra == STATE_REG && i.imm == crunch_ids::S_STATE);
        if !leas_state {
            continue;
        }
        for (idx, i) in f.code.iter().enumerate() {
            if matches!(i.op, Opcode::Load | Opcode::Store) && i.rb == STATE_REG {
                accesses.push((f.fid, idx as u32));
            }
        }
    }
    LayoutTable {
        layout_id: 0,
        field_offsets: (0..field::COUNT).map(|i| i * 4).collect(),
        accesses,
        instances: vec![crunch_ids::S_STATE],
    }
}

// ---------------------------------------------------------------- wbcapp

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WbcAppParams {
    pub seed: u64,
    /// Message bytes per round; a positive even number.
    pub message_len: u32,
    pub rounds: u32,
}

impl Default for WbcAppParams {
    fn default() -> Self {
        WbcAppParams { seed: 7, message_len: 1024, rounds: 64 }
    }
}

impl WbcAppParams {
    pub fn small(seed: u64) -> Self {
        WbcAppParams { seed, message_len: 64, rounds: 3 }
    }

    fn validate(&self) -> Result<(), BenchError> {
        if self.message_len == 0 || !self.message_len.is_multiple_of(2) || self.message_len > 1 << 18 {
            return Err(BenchError::Config(format!(
                "message_len {} is not an even number in 2..=262144",
                self.message_len
            )));
        }
        if self.rounds == 0 {
            return Err(BenchError::Config("rounds must be positive".into()));
        }
        Ok(())
    }

    /// The cipher key embedded by `gen_wbcapp`.
    pub fn key(&self) -> WbcKey {
        random_key(&mut Prng::new(self.seed ^ 0x5742_4341_5050))
    }
}

pub mod wbcapp_ids {
    pub const MAIN: u32 = 0;
    pub const READ_SEED: u32 = 1;
    pub const GEN_PLAIN: u32 = 2;
    pub const CTR: u32 = 3;
    pub const CHECKSUM: u32 = 4;
    pub const COMPARE: u32 = 5;
    pub const PRINT_HEX: u32 = 6;
    pub const PRINT_CHAR: u32 = 7;
    pub const NEWLINE: u32 = 8;
    pub const WBC_EVAL: u32 = 9;

    pub const S_PT: u32 = 1;
    pub const S_CT: u32 = 2;
    pub const S_RT: u32 = 3;
    pub const S_HEX: u32 = 4;
    pub const S_TABLE0: u32 = 10;
}

/// The evaluator block layout used by `wbcapp`.
pub fn wbcapp_template() -> WbcTemplate {
    use wbcapp_ids::*;
    let mut table_sids = [0; TABLES];
    for (i, s) in table_sids.iter_mut().enumerate() {
        *s = S_TABLE0 + i as u32;
    }
    WbcTemplate { fid: WBC_EVAL, table_sids }
}

/// Counter-mode encrypt/decrypt loop over the white-box evaluator. Each round
/// prints the FNV-1a-32 of the ciphertext, or `!` if decryption fails.
pub fn gen_wbcapp(params: WbcAppParams) -> Result<ProgramImage, BenchError> {
    use wbcapp_ids::*;
    params.validate()?;
    let len = params.message_len;
    let template = wbcapp_template();
    let tables = wbc_generate(&params.key(), params.seed, true);
    let mut f = Vec::new();

    f.push(function(MAIN, "main", 0, |a| {
        let (l, ok, n) = (a.label(), a.label(), a.label());
        a.emit_all([ins::call(READ_SEED), ins::mov(4, 0), ins::loadi(5, 0)]);
        a.bind(l);
        a.emit_all([
            ins::lea(0, S_PT),
            ins::loadi(1, len),
            ins::add(2, 4, 5),
            ins::call(GEN_PLAIN),
            ins::lea(0, S_PT),
            ins::lea(1, S_CT),
            ins::loadi(2, len),
            ins::add(3, 4, 5),
            ins::call(CTR),
            ins::lea(0, S_CT),
            ins::lea(1, S_RT),
            ins::loadi(2, len),
            ins::add(3, 4, 5),
            ins::call(CTR),
            ins::lea(0, S_PT),
            ins::lea(1, S_RT),
            ins::loadi(2, len),
            ins::call(COMPARE),
        ]);
        a.jnz(0, ok);
        a.emit_all([ins::loadi(0, b'!' as u32), ins::call(PRINT_CHAR)]);
        a.jmp(n);
        a.bind(ok);
        a.emit_all([
            ins::lea(0, S_CT),
            ins::loadi(1, len),
            ins::call(CHECKSUM),
            ins::call(PRINT_HEX),
            ins::call(NEWLINE),
        ]);
        a.bind(n);
        a.emit_all([ins::addi(5, 5, 1), ins::loadi(0, params.rounds)]);
        a.jlt(5, 0, l);
        a.emit_all([ins::loadi(0, 0), ins::sys(sys::EXIT), ins::halt()]);
    }));
    f.push(read_seed_fn(READ_SEED, mixer_start(params.seed)));
    f.push(function(GEN_PLAIN, "gen_plain", 3, |a| {
        let (b, c) = (a.label(), a.label());
        push_all(a, &[4, 5, 6, 7]);
        a.emit_all([
            ins::mov(4, 0),
            ins::mov(5, 1),
            ins::loadi(1, 0x9E37_79B1),
            ins::mul(6, 2, 1),
            ins::addi(6, 6, 1),
            ins::loadi(7, 0),
        ]);
        a.jmp(c);
        a.bind(b);
        a.emit_all([
            ins::loadi(1, 13),
            ins::shl(2, 6, 1),
            ins::xor(6, 6, 2),
            ins::loadi(1, 17),
            ins::shr(2, 6, 1),
            ins::xor(6, 6, 2),
            ins::loadi(1, 5),
            ins::shl(2, 6, 1),
            ins::xor(6, 6, 2),
            ins::add(1, 4, 7),
            ins::storeb(6, 1, 0),
            ins::addi(7, 7, 1),
        ]);
        a.bind(c);
        a.jlt(7, 5, b);
        pop_all(a, &[4, 5, 6, 7]);
        a.emit(ins::ret());
    }));
    f.push(function(CTR, "ctr_crypt", 4, |a| {
        let (b, c) = (a.label(), a.label());
        push_all(a, &[4, 5, 6, 7]);
        a.emit_all([ins::mov(4, 0), ins::mov(5, 1), ins::add(6, 0, 2), ins::mov(7, 3)]);
        a.jmp(c);
        a.bind(b);
        a.emit_all([
            ins::mov(0, 7),
            ins::call(WBC_EVAL),
            ins::loadb(1, 4, 0),
            ins::loadb(2, 4, 1),
            ins::loadi(3, 8),
            ins::shl(2, 2, 3),
            ins::add(1, 1, 2),
            ins::xor(0, 0, 1),
            ins::storeb(0, 5, 0),
            ins::loadi(3, 8),
            ins::shr(0, 0, 3),
            ins::storeb(0, 5, 1),
            ins::addi(4, 4, 2),
            ins::addi(5, 5, 2),
            ins::addi(7, 7, 1),
        ]);
        a.bind(c);
        a.jlt(4, 6, b);
        pop_all(a, &[4, 5, 6, 7]);
        a.emit(ins::ret());
    }));
    f.push(function(CHECKSUM, "fnv32", 2, |a| {
        let (b, c) = (a.label(), a.label());
        push_all(a, &[4, 5]);
        a.emit_all([ins::mov(4, 0), ins::add(5, 0, 1), ins::loadi(0, 0x811C_9DC5), ins::loadi(3, 16_777_619)]);
        a.jmp(c);
        a.bind(b);
        a.emit_all([ins::loadb(1, 4, 0), ins::xor(0, 0, 1), ins::mul(0, 0, 3), ins::addi(4, 4, 1)]);
        a.bind(c);
        a.jlt(4, 5, b);
        pop_all(a, &[4, 5]);
        a.emit(ins::ret());
    }));
    f.push(function(COMPARE, "compare", 3, |a| {
        let (b, c, ne) = (a.label(), a.label(), a.label());
        a.emit_all([ins::push(4), ins::add(4, 0, 2)]);
        a.jmp(c);
        a.bind(b);
        a.emit_all([ins::loadb(2, 0, 0), ins::loadb(3, 1, 0), ins::xor(2, 2, 3)]);
        a.jnz(2, ne);
        a.emit_all([ins::addi(0, 0, 1), ins::addi(1, 1, 1)]);
        a.bind(c);
        a.jlt(0, 4, b);
        a.emit_all([ins::loadi(0, 1), ins::pop(4), ins::ret()]);
        a.bind(ne);
        a.emit_all([ins::loadi(0, 0), ins::pop(4), ins::ret()]);
    }));
    f.push(print_hex_fn(PRINT_HEX, S_HEX, PRINT_CHAR));
    f.push(print_char_fn(PRINT_CHAR));
    f.push(newline_fn(NEWLINE, PRINT_CHAR));
    f.push(template.function("wbc_eval"));

    let mut sections = vec![
        DataSection::new(S_PT, "plaintext", vec![0; len as usize]).writable(),
        DataSection::new(S_CT, "ciphertext", vec![0; len as usize]).writable(),
        DataSection::new(S_RT, "roundtrip", vec![0; len as usize]).writable(),
        DataSection::new(S_HEX, "hexdigits", HEX.to_vec()),
    ];
    for (r, sid) in template.table_sids.iter().enumerate() {
        sections.push(DataSection::new(*sid, format!("wbc_table{r}"), tables.table_bytes(r)));
    }
    let img = finish_image(f, sections, Vec::new());
    img.validate().map_err(|e| BenchError::Internal(format!("wbcapp image: {e}")))?;
    Ok(img)
}

/// What `wbcapp` prints for `input`, computed with the reference cipher.
pub fn wbcapp_reference_output(params: WbcAppParams, input: &[u8]) -> Vec<u8> {
    let mut s = mixer_start(params.seed);
    for &b in input {
        s = s.wrapping_mul(31).wrapping_add(b as u32);
    }
    if s == 0 {
        s = 1;
    }
    let key = params.key();
    let len = params.message_len as usize;
    let mut out = Vec::new();
    for round in 0..params.rounds {
        let base = s.wrapping_add(round);
        let mut x = base.wrapping_mul(0x9E37_79B1).wrapping_add(1);
        let pt: Vec<u8> = (0..len)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 17;
                x ^= x << 5;
                x as u8
            })
            .collect();
        let mut ct = Vec::with_capacity(len);
        for (i, pair) in pt.chunks(2).enumerate() {
            let ks = wbc_reference_encrypt(&key, base.wrapping_add(i as u32) as u16);
            let w = u16::from_le_bytes([pair[0], pair[1]]) ^ ks;
            ct.extend(w.to_le_bytes());
        }
        let mut h: u32 = 0x811C_9DC5;
        for b in &ct {
            h = (h ^ *b as u32).wrapping_mul(16_777_619);
        }
        out.extend(format!("{h:08x}\n").bytes());
    }
    out
}

// ---------------------------------------------------------------- spin

pub mod spin_ids {
    pub const MAIN: u32 = 0;
    pub const WORK: u32 = 1;
    pub const S_ACC: u32 = 1;
}

/// A loop that calls one hot function until the virtual clock reaches
/// `duration_ms`, then prints how many calls it made.
pub fn gen_spin(duration_ms: u32, work_iterations: u32) -> ProgramImage {
    use spin_ids::*;
    let main = function(MAIN, "main", 0, |a| {
        let l = a.label();
        a.emit_all([ins::loadi(4, 0), ins::loadi(5, duration_ms)]);
        a.bind(l);
        a.emit_all([ins::call(WORK), ins::addi(4, 4, 1), ins::sys(sys::CLOCK)]);
        a.jlt(0, 5, l);
        a.emit_all([ins::mov(0, 4), ins::sys(sys::PUTC), ins::loadi(0, 0), ins::sys(sys::EXIT), ins::halt()]);
    });
    let work = function(WORK, "work", 0, |a| {
        let l = a.label();
        a.emit_all([ins::push(4), ins::lea(1, S_ACC), ins::load(0, 1, 0), ins::loadi(4, work_iterations.max(1))]);
        a.bind(l);
        a.emit_all([ins::addi(0, 0, 3), ins::subi(4, 4, 1)]);
        a.jnz(4, l);
        a.emit_all([ins::store(0, 1, 0), ins::pop(4), ins::ret()]);
    });
    let acc = DataSection::new(S_ACC, "acc", vec![0; 4]).writable().exported();
    finish_image(vec![main, work], vec![acc], Vec::new())
}

// ---------------------------------------------------------------- random images

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RandomParams {
    pub max_functions: usize,
    pub max_sections: usize,
    /// Upper bound on the estimated instructions of one run.
    pub cost_cap: u64,
    /// Multiplier on the entry function's loop count; longer runs give
    /// refresh policies time to act between calls.
    pub entry_iterations: u32,
}

impl Default for RandomParams {
    fn default() -> Self {
        RandomParams { max_functions: 30, max_sections: 12, cost_cap: 200_000, entry_iterations: 1 }
    }
}

#[derive(Clone, Copy)]
struct SectionPlan {
    sid: u32,
    len: u32,
    writable: bool,
}

/// A random well-behaved image: a call DAG towards higher fids, bounded run
/// cost, constant and writable sections, pointer tables with data
/// relocations, and random exported flags. Writable sections are either
/// exported or used by at least two functions, so no block ever owns mutable
/// state that outlives one activation.
pub fn gen_random(seed: u64, params: RandomParams) -> ProgramImage {
    let mut p = Prng::new(seed ^ 0x5241_4E44);
    let n = 2 + p.index(params.max_functions.max(2) - 1);
    let n_sections = 1 + p.index(params.max_sections.max(1));

    let mut plans: Vec<SectionPlan> = (0..n_sections as u32)
        .map(|i| SectionPlan { sid: i + 1, len: 4 * (4 + p.below(60) as u32), writable: p.chance(0.4) })
        .collect();
    plans.sort_by_key(|s| s.sid);
    let consts: Vec<SectionPlan> = plans.iter().copied().filter(|s| !s.writable).collect();
    let mut sections: Vec<DataSection> = plans
        .iter()
        .map(|s| {
            let bytes =
                if s.writable { vec![0; s.len as usize] } else { (0..s.len).map(|_| p.next_u32() as u8).collect() };
            let mut d = DataSection::new(s.sid, format!("s{}", s.sid), bytes);
            d.writable = s.writable;
            d.exported = p.chance(0.2);
            d
        })
        .collect();

    // Pointer slots: constant section -> constant section.
    let mut relocs = Vec::new();
    let mut pointer_slots: Vec<(u32, u32, u32)> = Vec::new();
    if consts.len() >= 2 {
        for _ in 0..p.index(4) {
            let src = consts[p.index(consts.len())];
            let dst = consts[p.index(consts.len())];
            let slot = 4 * p.below(src.len as u64 / 4) as u32;
            if pointer_slots.iter().any(|(s, o, _)| *s == src.sid && *o == slot) {
                continue;
            }
            let addend = 4 * p.below(dst.len as u64 / 4) as u32;
            let sec = sections.iter_mut().find(|s| s.sid == src.sid).expect("planned");
            sec.bytes[slot as usize..slot as usize + 4].copy_from_slice(&addend.to_le_bytes());
            relocs.push(RelocationRecord::Data { sid: src.sid, offset: slot, target: dst.sid });
            pointer_slots.push((src.sid, slot, dst.sid));
        }
    }

    // Writable sections that are not exported need at least two users.
    let mut forced: Vec<Vec<u32>> = vec![Vec::new(); n];
    for s in plans.iter().filter(|s| s.writable) {
        let exported = sections.iter().find(|d| d.sid == s.sid).is_some_and(|d| d.exported);
        if !exported {
            if n < 2 {
                sections.iter_mut().find(|d| d.sid == s.sid).expect("planned").exported = true;
                continue;
            }
            let a = p.index(n);
            let mut b = p.index(n);
            while b == a {
                b = p.index(n);
            }
            forced[a].push(s.sid);
            forced[b].push(s.sid);
        }
    }

    let param_counts: Vec<u8> = (0..n).map(|i| if i == 0 { 0 } else { p.below(5) as u8 }).collect();
    // Every function gets a caller below it when the cost cap allows, so
    // most of the image is live.
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 1..n {
        children[p.index(i)].push(i);
    }
    let mut costs = vec![0u64; n];
    let mut functions = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let iterations = 1 + p.below(3) as u32;
        let mut body: Vec<Instruction> = Vec::new();
        let mut inner_cost = 0u64;
        for sid in &forced[i] {
            let off = 4 * p.below(plans[(*sid - 1) as usize].len as u64 / 4) as u32;
            body.extend([
                ins::lea(1, *sid),
                ins::load(2, 1, off),
                ins::xor(2, 2, 4),
                ins::store(2, 1, off),
                ins::add(4, 4, 2),
            ]);
        }
        for &callee in &children[i] {
            if inner_cost + iterations as u64 * (costs[callee] + 8) <= params.cost_cap / 4 {
                inner_cost += costs[callee] + 8;
                for r in 0..param_counts[callee] {
                    body.extend([ins::loadi(r, p.next_u32() >> 8), ins::add(r, r, 4)]);
                }
                body.extend([ins::call(callee as u32), ins::add(4, 4, 0)]);
            }
        }
        for _ in 0..1 + p.index(6) {
            match p.index(7) {
                0 => {
                    let s = plans[p.index(plans.len())];
                    let off = 4 * p.below(s.len as u64 / 4) as u32;
                    // A relocated slot holds an address, which depends on placement.
                    if pointer_slots.iter().any(|(src, slot, _)| *src == s.sid && *slot == off) {
                        continue;
                    }
                    body.extend([ins::lea(1, s.sid), ins::load(2, 1, off), ins::add(4, 4, 2)]);
                    if s.writable && sections[(s.sid - 1) as usize].exported {
                        body.extend([ins::store(4, 1, off)]);
                    }
                }
                1 if !pointer_slots.is_empty() => {
                    let (src, slot, _) = pointer_slots[p.index(pointer_slots.len())];
                    body.extend([ins::lea(1, src), ins::load(1, 1, slot), ins::load(2, 1, 0), ins::xor(4, 4, 2)]);
                }
                2 if i + 1 < n => {
                    let callee = i + 1 + p.index(n - i - 1);
                    let extra = iterations as u64 * (costs[callee] + 8);
                    if inner_cost + extra <= params.cost_cap / 4 {
                        inner_cost += costs[callee] + 8;
                        for r in 0..param_counts[callee] {
                            body.extend([ins::loadi(r, p.next_u32() >> 8), ins::add(r, r, 4)]);
                        }
                        body.extend([ins::call(callee as u32), ins::add(4, 4, 0)]);
                    }
                }
                3 => body.extend([ins::sys(sys::GETC), ins::add(4, 4, 0)]),
                4 => body.extend([ins::mov(0, 4), ins::sys(sys::PUTC)]),
                5 => body.extend([
                    ins::loadi(3, p.next_u32()),
                    ins::mul(4, 4, 3),
                    ins::loadi(3, 1 + p.below(31) as u32),
                    ins::shr(3, 4, 3),
                    ins::xor(4, 4, 3),
                ]),
                _ => body.extend([
                    ins::loadi(5, p.next_u32()),
                    ins::add(4, 4, 5),
                    ins::push(4),
                    ins::pop(6),
                    ins::xor(4, 4, 6),
                ]),
            }
        }
        costs[i] = 16 + iterations as u64 * (body.len() as u64 + 2 + inner_cost);

        let mut a = Asm::new();
        let params_here = param_counts[i];
        push_all(&mut a, &[4, 5, 6, 7]);
        a.emit(ins::loadi(4, p.next_u32()));
        for r in 0..params_here {
            a.emit(ins::add(4, 4, r));
        }
        let loops = if i == 0 { iterations * params.entry_iterations.max(1) } else { iterations };
        a.emit(ins::loadi(7, loops));
        let l = a.here();
        a.emit_all(body);
        a.emit(ins::subi(7, 7, 1));
        a.jnz(7, l);
        a.emit(ins::mov(0, 4));
        if i == 0 {
            a.emit_all([ins::sys(sys::PUTC), ins::loadi(1, 8), ins::shr(0, 4, 1), ins::sys(sys::PUTC), ins::mov(0, 4)]);
            a.emit_all([ins::sys(sys::EXIT), ins::halt()]);
        } else {
            pop_all(&mut a, &[4, 5, 6, 7]);
            a.emit(ins::ret());
        }
        functions.push(FunctionDef::new(i as u32, format!("f{i}"), params_here, a.finish()));
    }
    functions.reverse();
    finish_image(functions, sections, relocs)
}

/// Functions reachable from the entry through direct calls.
pub fn reachable_fids(img: &ProgramImage) -> BTreeSet<u32> {
    let mut seen = BTreeSet::new();
    let mut work = vec![img.entry_fid];
    while let Some(f) = work.pop() {
        if seen.insert(f) {
            if let Some(def) = img.function(f) {
                work.extend(def.callees());
            }
        }
    }
    seen
}

/// Build a corpus program by name with default parameters.
pub fn gen_program(name: &str) -> Result<ProgramImage, BenchError> {
    match name {
        "crunch" => gen_crunch(CrunchParams::default()),
        "wbcapp" => gen_wbcapp(WbcAppParams::default()),
        other => Err(BenchError::UnknownProgram(other.to_string())),
    }
}
