//! Syntactic diversification: opaque predicates, substitutions, dead-register
//! zeroing, junk stores and basic-block layout shuffling.

use serde::{Deserialize, Serialize};

use super::EngineError;
use crate::vm::asm::{Asm, Item, Label};
use crate::vm::isa::{ins, Instruction, Opcode, RegSet, SP};
use crate::vm::{FunctionDef, Prng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversificationKnobs {
    pub opaque_pred_rate: f64,
    pub subst_rate: f64,
    pub junk_rate: f64,
    pub shuffle: bool,
    pub seed: u64,
}

impl DiversificationKnobs {
    pub fn identity() -> Self {
        DiversificationKnobs { opaque_pred_rate: 0.0, subst_rate: 0.0, junk_rate: 0.0, shuffle: false, seed: 0 }
    }

    /// Moderate settings; `level` scales the insertion rates. Level 0 only
    /// substitutes and shuffles, which keeps run-time cost nearly constant
    /// across versions.
    pub fn at_level(level: u32, seed: u64) -> Self {
        let l = level as f64;
        DiversificationKnobs {
            opaque_pred_rate: (0.04 * l).min(1.0),
            subst_rate: 0.5,
            junk_rate: (0.05 * l).min(1.0),
            shuffle: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        for (name, v) in [
            ("opaque_pred_rate", self.opaque_pred_rate),
            ("subst_rate", self.subst_rate),
            ("junk_rate", self.junk_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(EngineError::BadKnob(format!("{name}={v} outside [0,1]")));
            }
        }
        Ok(())
    }

    fn is_identity(&self) -> bool {
        self.opaque_pred_rate == 0.0 && self.subst_rate == 0.0 && self.junk_rate == 0.0 && !self.shuffle
    }
}

struct Block {
    labels: Vec<Label>,
    body: Vec<Item>,
}

impl Block {
    fn last_op(&self) -> Option<Opcode> {
        self.body.last().map(|i| match i {
            Item::Op(ins) | Item::Jump(ins, _) => ins.op,
            Item::Label(_) => unreachable!("labels are hoisted"),
        })
    }

    fn falls_through(&self) -> bool {
        !self.last_op().is_some_and(Opcode::ends_block)
    }
}

fn split_blocks(asm: &Asm) -> Vec<Block> {
    let mut blocks = vec![Block { labels: vec![], body: vec![] }];
    for item in &asm.items {
        let cur = blocks.last_mut().expect("non-empty");
        match item {
            Item::Label(l) => {
                if cur.body.is_empty() {
                    cur.labels.push(*l);
                } else {
                    blocks.push(Block { labels: vec![*l], body: vec![] });
                }
            }
            Item::Op(i) | Item::Jump(i, _) => {
                cur.body.push(item.clone());
                if i.op.is_jump() || i.op.ends_block() {
                    blocks.push(Block { labels: vec![], body: vec![] });
                }
            }
        }
    }
    blocks.retain(|b| !b.body.is_empty() || !b.labels.is_empty());
    blocks
}

fn instr(item: &Item) -> Instruction {
    match item {
        Item::Op(i) | Item::Jump(i, _) => *i,
        Item::Label(_) => unreachable!(),
    }
}

/// Registers live before each instruction of a block, assuming everything is
/// live at the block exit.
fn live_before(body: &[Item]) -> Vec<RegSet> {
    let mut live = RegSet::ALL;
    let mut out = vec![RegSet::EMPTY; body.len()];
    for (i, item) in body.iter().enumerate().rev() {
        let ins = instr(item);
        live = live.minus(ins.writes()).union(ins.reads());
        out[i] = live;
    }
    out
}

fn general_regs() -> impl Iterator<Item = u8> {
    0u8..8
}

fn substitute(ins: Instruction) -> Option<Instruction> {
    match ins.op {
        Opcode::AddI => Some(ins::subi(ins.ra, ins.rb, ins.imm.wrapping_neg())),
        Opcode::SubI => Some(ins::addi(ins.ra, ins.rb, ins.imm.wrapping_neg())),
        Opcode::Xor if ins.ra == ins.rb && ins.rb == ins.rc => Some(ins::loadi(ins.ra, 0)),
        Opcode::LoadI if ins.imm == 0 => Some(ins::xor(ins.ra, ins.ra, ins.ra)),
        _ => None,
    }
}

fn zeroing(prng: &mut Prng, r: u8) -> Instruction {
    if prng.chance(0.5) {
        ins::loadi(r, 0)
    } else {
        ins::xor(r, r, r)
    }
}

/// `((x*x) & 1) ^ (x & 1)` is always zero; the branch to `junk` never fires.
fn opaque_predicate(prng: &mut Prng, junk: Label, out: &mut Vec<Item>) {
    let mut regs: Vec<u8> = general_regs().collect();
    prng.shuffle(&mut regs);
    let (t1, t2, x) = (regs[0], regs[1], regs[2]);
    out.extend(
        [
            ins::push(t1),
            ins::push(t2),
            ins::loadi(t2, 1),
            ins::mul(t1, x, x),
            ins::and(t1, t1, t2),
            ins::and(t2, x, t2),
            ins::xor(t1, t1, t2),
        ]
        .map(Item::Op),
    );
    out.push(Item::Jump(Instruction::new(Opcode::Jnz, t1, 0, 0, 0), junk));
    out.extend([ins::pop(t2), ins::pop(t1)].map(Item::Op));
}

fn junk_block(prng: &mut Prng, back: Label) -> Vec<Item> {
    const OPS: [Opcode; 7] =
        [Opcode::Add, Opcode::Sub, Opcode::Mul, Opcode::Xor, Opcode::And, Opcode::Shl, Opcode::Shr];
    let mut out = Vec::new();
    for _ in 0..1 + prng.below(4) {
        let r = |p: &mut Prng| p.below(8) as u8;
        let i = match prng.below(3) {
            0 => ins::loadi(r(prng), prng.next_u32()),
            1 => ins::addi(r(prng), r(prng), prng.next_u32()),
            _ => ins::alu(OPS[prng.index(OPS.len())], r(prng), r(prng), r(prng)),
        };
        out.push(Item::Op(i));
    }
    out.push(Item::Jump(ins::jmp(0), back));
    out
}

/// Produce a semantically equivalent variant of `f`.
pub fn syntactic_diversify(f: &FunctionDef, knobs: &DiversificationKnobs) -> Result<FunctionDef, EngineError> {
    knobs.validate()?;
    if knobs.is_identity() || f.code.is_empty() {
        return Ok(f.clone());
    }
    let mut prng = Prng::new(knobs.seed ^ 0x5EED_0000_0000_0000 ^ f.fid as u64);
    let mut asm = Asm::from_code(&f.code);
    let mut blocks = split_blocks(&asm);
    let mut junk: Vec<(Label, Label)> = Vec::new();

    for block in &mut blocks {
        let live = live_before(&block.body);
        let mut body = Vec::with_capacity(block.body.len() * 2);
        for (i, item) in block.body.iter().enumerate() {
            let ins = instr(item);
            if prng.chance(knobs.opaque_pred_rate) {
                let (j, back) = (asm.label(), asm.label());
                opaque_predicate(&mut prng, j, &mut body);
                body.push(Item::Label(back));
                junk.push((j, back));
            }
            if prng.chance(knobs.junk_rate) {
                let r = prng.below(8) as u8;
                let slot = 4 * (1 + prng.below(4) as u32);
                body.push(Item::Op(ins::store(r, SP, slot.wrapping_neg())));
            }
            if prng.chance(knobs.subst_rate) {
                let dead: Vec<u8> = general_regs().filter(|r| !live[i].contains(*r)).collect();
                if !dead.is_empty() {
                    let r = dead[prng.index(dead.len())];
                    body.push(Item::Op(zeroing(&mut prng, r)));
                }
            }
            match (item, substitute(ins)) {
                (Item::Op(_), Some(s)) if prng.chance(knobs.subst_rate) => body.push(Item::Op(s)),
                _ => body.push(item.clone()),
            }
        }
        block.body = body;
    }

    // Every block gets a label so that shuffled fallthroughs can be patched.
    for block in &mut blocks {
        if block.labels.is_empty() {
            block.labels.push(asm.label());
        }
    }
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    if knobs.shuffle && order.len() > 2 {
        prng.shuffle(&mut order[1..]);
    }

    let mut items = Vec::new();
    for (pos, &b) in order.iter().enumerate() {
        let block = &blocks[b];
        items.extend(block.labels.iter().map(|l| Item::Label(*l)));
        items.extend(block.body.iter().cloned());
        let next_in_layout = order.get(pos + 1).copied();
        if block.falls_through() && next_in_layout != Some(b + 1) {
            if let Some(succ) = blocks.get(b + 1) {
                items.push(Item::Jump(ins::jmp(0), succ.labels[0]));
            }
        }
    }
    for (j, back) in junk {
        items.push(Item::Label(j));
        items.extend(junk_block(&mut prng, back));
    }
    asm.items = items;
    Ok(FunctionDef { code: asm.finish(), ..f.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_knobs_return_input() {
        let f = FunctionDef::new(3, "f", 1, vec![ins::addi(0, 0, 2), ins::ret()]);
        assert_eq!(syntactic_diversify(&f, &DiversificationKnobs::identity()).unwrap(), f);
    }

    #[test]
    fn level_zero_inserts_nothing() {
        let k = DiversificationKnobs::at_level(0, 9);
        assert_eq!((k.opaque_pred_rate, k.junk_rate), (0.0, 0.0));
        assert!(DiversificationKnobs::at_level(2, 9).junk_rate > DiversificationKnobs::at_level(1, 9).junk_rate);
    }

    #[test]
    fn out_of_range_knob_is_rejected() {
        let f = FunctionDef::new(3, "f", 1, vec![ins::ret()]);
        let k = DiversificationKnobs { junk_rate: 1.5, ..DiversificationKnobs::identity() };
        assert!(syntactic_diversify(&f, &k).is_err());
    }

    #[test]
    fn liveness_treats_block_exit_as_live() {
        let body = vec![Item::Op(ins::loadi(1, 0)), Item::Op(ins::mov(2, 1))];
        let live = live_before(&body);
        assert!(!live[0].contains(1));
        assert!(live[1].contains(1));
        assert!(!live[1].contains(2));
        assert!(!live[0].contains(2));
    }
}
