//! Label-based instruction lists.
//!
//! Used both to write programs by hand and as the editing form for code
//! transforms: relative jump offsets are only materialised by [`Asm::finish`].

use super::isa::{Instruction, Opcode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(pub u32);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Item {
    Label(Label),
    Op(Instruction),
    /// A jump instruction whose offset is resolved against `Label`.
    Jump(Instruction, Label),
}

#[derive(Clone, Debug, Default)]
pub struct Asm {
    pub items: Vec<Item>,
    next_label: u32,
}

impl Asm {
    pub fn new() -> Self {
        Asm::default()
    }

    /// Lift existing code, placing a label in front of every jump target.
    pub fn from_code(code: &[Instruction]) -> Asm {
        let mut asm = Asm::new();
        let mut target_labels = vec![None; code.len() + 1];
        for (idx, ins) in code.iter().enumerate() {
            if ins.op.is_jump() {
                let t = (idx as i64 + 1 + ins.offset() as i64).clamp(0, code.len() as i64) as usize;
                if target_labels[t].is_none() {
                    target_labels[t] = Some(asm.label());
                }
            }
        }
        for (idx, ins) in code.iter().enumerate() {
            if let Some(l) = target_labels[idx] {
                asm.items.push(Item::Label(l));
            }
            if ins.op.is_jump() {
                let t = (idx as i64 + 1 + ins.offset() as i64).clamp(0, code.len() as i64) as usize;
                asm.items.push(Item::Jump(*ins, target_labels[t].expect("assigned above")));
            } else {
                asm.items.push(Item::Op(*ins));
            }
        }
        if let Some(l) = target_labels[code.len()] {
            asm.items.push(Item::Label(l));
        }
        asm
    }

    pub fn label(&mut self) -> Label {
        let l = Label(self.next_label);
        self.next_label += 1;
        l
    }

    /// Reserve label ids so that labels created elsewhere do not clash.
    pub fn reserve_labels_above(&mut self, n: u32) {
        self.next_label = self.next_label.max(n);
    }

    pub fn bind(&mut self, l: Label) {
        self.items.push(Item::Label(l));
    }

    pub fn here(&mut self) -> Label {
        let l = self.label();
        self.bind(l);
        l
    }

    pub fn emit(&mut self, ins: Instruction) -> &mut Self {
        assert!(!ins.op.is_jump(), "use a jump helper for {ins}");
        self.items.push(Item::Op(ins));
        self
    }

    pub fn emit_all(&mut self, code: impl IntoIterator<Item = Instruction>) -> &mut Self {
        for i in code {
            self.emit(i);
        }
        self
    }

    fn jump(&mut self, op: Opcode, ra: u8, rb: u8, l: Label) -> &mut Self {
        self.items.push(Item::Jump(Instruction::new(op, ra, rb, 0, 0), l));
        self
    }

    pub fn jmp(&mut self, l: Label) -> &mut Self {
        self.jump(Opcode::Jmp, 0, 0, l)
    }

    pub fn jz(&mut self, ra: u8, l: Label) -> &mut Self {
        self.jump(Opcode::Jz, ra, 0, l)
    }

    pub fn jnz(&mut self, ra: u8, l: Label) -> &mut Self {
        self.jump(Opcode::Jnz, ra, 0, l)
    }

    /// Jump if `ra < rb` (unsigned).
    pub fn jlt(&mut self, ra: u8, rb: u8, l: Label) -> &mut Self {
        self.jump(Opcode::Jlt, ra, rb, l)
    }

    pub fn len_instructions(&self) -> usize {
        self.items.iter().filter(|i| !matches!(i, Item::Label(_))).count()
    }

    /// Resolve labels into relative offsets.
    ///
    /// Panics on a jump to an unbound label.
    pub fn finish(&self) -> Vec<Instruction> {
        let mut positions = std::collections::HashMap::new();
        let mut pos = 0usize;
        for item in &self.items {
            match item {
                Item::Label(l) => {
                    positions.insert(*l, pos);
                }
                _ => pos += 1,
            }
        }
        let mut out = Vec::with_capacity(pos);
        for item in &self.items {
            match item {
                Item::Label(_) => {}
                Item::Op(ins) => out.push(*ins),
                Item::Jump(ins, l) => {
                    let target = *positions.get(l).unwrap_or_else(|| panic!("unbound label {l:?}"));
                    let off = target as i64 - (out.len() as i64 + 1);
                    let mut j = *ins;
                    j.imm = off as i32 as u32;
                    out.push(j);
                }
            }
        }
        out
    }
}
