//! Instruction-set randomization: a function becomes bytecode with permuted
//! opcodes and masked immediates, run by the interpreter intrinsic through a
//! small stub.

use std::collections::BTreeSet;

use super::EngineError;
use crate::vm::isa::{decode_code, ins, Instruction, ISR_INTRINSIC_FID, NUM_OPCODES};
use crate::vm::machine::OPMAP_LEN;
use crate::vm::{FunctionDef, Opcode, Prng};

pub const BYTECODE_REG: u8 = 4;
pub const OPMAP_REG: u8 = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IsrBundle {
    pub stub: Vec<Instruction>,
    pub bytecode: Vec<u8>,
    pub opmap: Vec<u8>,
    pub pi: Vec<u8>,
    pub mask: u32,
}

pub fn encode_opmap(pi: &[u8], mask: u32) -> Vec<u8> {
    let mut out = vec![0xFF; 32];
    out[..pi.len()].copy_from_slice(pi);
    out.extend((mask as u64).to_le_bytes());
    debug_assert_eq!(out.len(), OPMAP_LEN);
    out
}

pub fn encode_bytecode(code: &[Instruction], pi: &[u8], mask: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(code.len() * 8);
    for i in code {
        let mut raw = i.encode();
        raw[0] = pi[raw[0] as usize];
        let imm = u32::from_le_bytes([raw[4], raw[5], raw[6], raw[7]]) ^ mask;
        raw[4..8].copy_from_slice(&imm.to_le_bytes());
        out.extend(raw);
    }
    out
}

/// Recover the original instructions from a bytecode section and its opmap.
pub fn decode_bytecode(bytecode: &[u8], opmap: &[u8]) -> Result<Vec<Instruction>, EngineError> {
    if opmap.len() != OPMAP_LEN || !bytecode.len().is_multiple_of(8) {
        return Err(EngineError::Malformed("ISR sections have the wrong size".into()));
    }
    let mut inverse = [0xFFu8; 256];
    for (op, enc) in opmap[..NUM_OPCODES].iter().enumerate() {
        inverse[*enc as usize] = op as u8;
    }
    let mask = u64::from_le_bytes(opmap[32..40].try_into().expect("8 bytes")) as u32;
    let mut plain = Vec::with_capacity(bytecode.len());
    for chunk in bytecode.chunks_exact(8) {
        let imm = u32::from_le_bytes(chunk[4..8].try_into().expect("4 bytes")) ^ mask;
        plain.push(inverse[chunk[0] as usize]);
        plain.extend_from_slice(&chunk[1..4]);
        plain.extend(imm.to_le_bytes());
    }
    decode_code(&plain).map_err(|e| EngineError::Malformed(format!("bytecode: {e}")))
}

/// Stub: point the intrinsic at the two sections, then return its result.
/// The caller's `R4`/`R5` are preserved around the call. Unreachable `LEA`s
/// after the `RET` keep every section the original code addresses attributed
/// to this function.
pub fn isr_stub(bytecode_sid: u32, opmap_sid: u32, anchors: &BTreeSet<u32>) -> Vec<Instruction> {
    let mut stub = vec![
        ins::push(BYTECODE_REG),
        ins::push(OPMAP_REG),
        ins::lea(BYTECODE_REG, bytecode_sid),
        ins::lea(OPMAP_REG, opmap_sid),
        ins::call(ISR_INTRINSIC_FID),
        ins::pop(OPMAP_REG),
        ins::pop(BYTECODE_REG),
        ins::ret(),
    ];
    stub.extend(anchors.iter().map(|sid| ins::lea(BYTECODE_REG, *sid)));
    if !anchors.is_empty() {
        stub.push(ins::ret());
    }
    stub
}

/// The two section ids a stub points the intrinsic at.
pub fn stub_sections(stub: &[Instruction]) -> Option<(u32, u32)> {
    match stub.get(2..)? {
        [a, b, c, ..]
            if a.op == Opcode::Lea
                && a.ra == BYTECODE_REG
                && b.op == Opcode::Lea
                && b.ra == OPMAP_REG
                && c.op == Opcode::Call
                && c.imm == ISR_INTRINSIC_FID =>
        {
            Some((a.imm, b.imm))
        }
        _ => None,
    }
}

pub fn isr_translate_with(f: &FunctionDef, pi: Vec<u8>, mask: u32, bytecode_sid: u32, opmap_sid: u32) -> IsrBundle {
    let anchors = f.lea_targets();
    IsrBundle {
        stub: isr_stub(bytecode_sid, opmap_sid, &anchors),
        bytecode: encode_bytecode(&f.code, &pi, mask),
        opmap: encode_opmap(&pi, mask),
        pi,
        mask,
    }
}

pub fn isr_translate(f: &FunctionDef, seed: u64, bytecode_sid: u32, opmap_sid: u32) -> IsrBundle {
    let mut prng = Prng::new(seed);
    let mut pi: Vec<u8> = (0..NUM_OPCODES as u8).collect();
    prng.shuffle(&mut pi);
    let mask = prng.next_u32();
    isr_translate_with(f, pi, mask, bytecode_sid, opmap_sid)
}
