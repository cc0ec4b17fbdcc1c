//! Instruction-level splicing that keeps jumps and layout access sites valid.

use std::collections::BTreeMap;

use crate::vm::asm::{Asm, Item};
use crate::vm::{Instruction, ProgramImage};

#[derive(Clone, Debug, Default)]
pub struct CodeEdit {
    /// Runs once on entry; jumps back to the first instruction skip it.
    pub prologue: Vec<Instruction>,
    /// Inserted in front of an instruction; jumps to it land on the insertion.
    pub before: BTreeMap<usize, Vec<Instruction>>,
    /// Replaces a non-jump instruction.
    pub replace: BTreeMap<usize, Vec<Instruction>>,
}

impl CodeEdit {
    pub fn is_empty(&self) -> bool {
        self.prologue.is_empty() && self.before.is_empty() && self.replace.is_empty()
    }
}

/// Apply `edit` and return the new code plus the new index of every original
/// instruction (the first instruction of its replacement, if replaced).
pub fn splice(code: &[Instruction], edit: &CodeEdit) -> (Vec<Instruction>, Vec<usize>) {
    let lifted = Asm::from_code(code);
    let mut out = Asm::new();
    out.reserve_labels_above(u32::MAX / 2);
    out.items.extend(edit.prologue.iter().map(|i| Item::Op(*i)));
    let mut index_map = Vec::with_capacity(code.len());
    let mut old = 0usize;
    for item in lifted.items {
        match item {
            Item::Label(_) => out.items.push(item),
            Item::Op(ins) => {
                if let Some(pre) = edit.before.get(&old) {
                    out.items.extend(pre.iter().map(|i| Item::Op(*i)));
                }
                index_map.push(out.len_instructions());
                match edit.replace.get(&old) {
                    Some(rep) => out.items.extend(rep.iter().map(|i| Item::Op(*i))),
                    None => out.items.push(Item::Op(ins)),
                }
                old += 1;
            }
            Item::Jump(ins, l) => {
                assert!(!edit.replace.contains_key(&old), "jumps cannot be replaced");
                if let Some(pre) = edit.before.get(&old) {
                    out.items.extend(pre.iter().map(|i| Item::Op(*i)));
                }
                index_map.push(out.len_instructions());
                out.items.push(Item::Jump(ins, l));
                old += 1;
            }
        }
    }
    (out.finish(), index_map)
}

/// Splice one function of an image, fixing layout access sites and code
/// relocations.
pub fn edit_function(img: &mut ProgramImage, fid: u32, edit: &CodeEdit) {
    if edit.is_empty() {
        return;
    }
    let f = img.function_mut(fid).expect("edited function exists");
    let (code, map) = splice(&f.code, edit);
    f.code = code;
    for l in &mut img.layouts {
        for (afid, idx) in &mut l.accesses {
            if *afid == fid {
                *idx = map[*idx as usize] as u32;
            }
        }
    }
    img.rebuild_code_relocs();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::isa::ins;

    #[test]
    fn prologue_is_skipped_by_back_edges() {
        let code = vec![ins::subi(1, 1, 1), ins::jnz(1, -2), ins::ret()];
        let edit = CodeEdit { prologue: vec![ins::mov(2, 0)], ..Default::default() };
        let (out, map) = splice(&code, &edit);
        assert_eq!(out, vec![ins::mov(2, 0), ins::subi(1, 1, 1), ins::jnz(1, -2), ins::ret()]);
        assert_eq!(map, vec![1, 2, 3]);
    }

    #[test]
    fn insertions_are_jump_targets() {
        let code = vec![ins::jz(0, 1), ins::loadi(0, 1), ins::call(3), ins::ret()];
        let mut edit = CodeEdit::default();
        edit.before.insert(2, vec![ins::push(0), ins::pop(1)]);
        edit.replace.insert(1, vec![ins::loadi(0, 0), ins::addi(0, 0, 1)]);
        let (out, map) = splice(&code, &edit);
        assert_eq!(out[0], ins::jz(0, 2));
        assert_eq!(&out[3..5], &[ins::push(0), ins::pop(1)]);
        assert_eq!(map, vec![0, 1, 5, 6]);
    }
}
