//! Instruction set of the renewable VM.
//!
//! Every instruction is 8 bytes: `[opcode][ra][rb][rc][imm:u32 LE]`. Jump
//! offsets are signed and counted in instructions relative to the *next*
//! instruction. Registers `R0..R7` are general purpose, index 8 is `SP`.
//!
//! Calling convention: arguments in `R0..R3`, result in `R0`, `R6`/`R7`
//! callee-saved. Memory below `SP` is scratch and may be clobbered at any
//! instruction boundary (there is no red zone).

use std::fmt;

use thiserror::Error;

/// Number of addressable registers (`R0..R7` plus `SP`).
pub const NUM_REGS: usize = 9;
/// Register index of the stack pointer.
pub const SP: u8 = 8;
/// Encoded size of one instruction.
pub const INSTR_BYTES: usize = 8;

/// Reserved function id recognized by `CALL` as the ISR interpreter intrinsic.
pub const ISR_INTRINSIC_FID: u32 = 0xFFFF_FF00;

/// `SYS` service numbers.
pub mod sys {
    /// Append the low byte of `R0` to the output.
    pub const PUTC: u32 = 0;
    /// Load the virtual clock (ms) into `R0`.
    pub const CLOCK: u32 = 1;
    /// Read one input byte into `R0` (`0xFFFF_FFFF` at end of input).
    pub const GETC: u32 = 2;
    /// Halt with exit code `R0`.
    pub const EXIT: u32 = 3;
}

macro_rules! opcodes {
    ($( $name:ident = $code:literal, $mnemonic:literal; )*) => {
        /// Opcode set `0x00..=0x1A`.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        #[repr(u8)]
        pub enum Opcode {
            $( $name = $code, )*
        }

        impl Opcode {
            /// All opcodes in numeric order.
            pub const ALL: [Opcode; 27] = [ $( Opcode::$name, )* ];

            pub fn from_u8(byte: u8) -> Option<Opcode> {
                match byte {
                    $( $code => Some(Opcode::$name), )*
                    _ => None,
                }
            }

            pub fn mnemonic(self) -> &'static str {
                match self {
                    $( Opcode::$name => $mnemonic, )*
                }
            }
        }
    };
}

opcodes! {
    Halt = 0x00, "HALT";
    LoadI = 0x01, "LOADI";
    Mov = 0x02, "MOV";
    Add = 0x03, "ADD";
    Sub = 0x04, "SUB";
    Mul = 0x05, "MUL";
    And = 0x06, "AND";
    Xor = 0x07, "XOR";
    Shl = 0x08, "SHL";
    Shr = 0x09, "SHR";
    AddI = 0x0A, "ADDI";
    SubI = 0x0B, "SUBI";
    Load = 0x0C, "LOAD";
    Store = 0x0D, "STORE";
    LoadB = 0x0E, "LOADB";
    StoreB = 0x0F, "STOREB";
    Lea = 0x10, "LEA";
    Jmp = 0x11, "JMP";
    Jz = 0x12, "JZ";
    Jnz = 0x13, "JNZ";
    Jlt = 0x14, "JLT";
    Call = 0x15, "CALL";
    CallR = 0x16, "CALLR";
    Ret = 0x17, "RET";
    Push = 0x18, "PUSH";
    Pop = 0x19, "POP";
    Sys = 0x1A, "SYS";
}

/// Number of defined opcodes.
pub const NUM_OPCODES: usize = Opcode::ALL.len();

impl Opcode {
    /// Jumps whose immediate is a relative instruction offset.
    pub fn is_jump(self) -> bool {
        matches!(self, Opcode::Jmp | Opcode::Jz | Opcode::Jnz | Opcode::Jlt)
    }

    pub fn is_conditional_jump(self) -> bool {
        matches!(self, Opcode::Jz | Opcode::Jnz | Opcode::Jlt)
    }

    /// Control never falls through to the next instruction.
    pub fn ends_block(self) -> bool {
        matches!(self, Opcode::Jmp | Opcode::Ret | Opcode::Halt)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// A decoded instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub op: Opcode,
    pub ra: u8,
    pub rb: u8,
    pub rc: u8,
    pub imm: u32,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("invalid opcode {0:#04x}")]
    InvalidOpcode(u8),
    #[error("invalid register index {0}")]
    InvalidRegister(u8),
    #[error("code length {0} is not a multiple of 8")]
    BadLength(usize),
}

impl Instruction {
    pub const fn new(op: Opcode, ra: u8, rb: u8, rc: u8, imm: u32) -> Self {
        Instruction { op, ra, rb, rc, imm }
    }

    pub const fn halt() -> Self {
        Instruction::new(Opcode::Halt, 0, 0, 0, 0)
    }

    /// Jump offset interpreted as signed.
    pub fn offset(&self) -> i32 {
        self.imm as i32
    }

    pub fn encode(&self) -> [u8; INSTR_BYTES] {
        let imm = self.imm.to_le_bytes();
        [self.op as u8, self.ra, self.rb, self.rc, imm[0], imm[1], imm[2], imm[3]]
    }

    pub fn decode(bytes: &[u8; INSTR_BYTES]) -> Result<Self, DecodeError> {
        let op = Opcode::from_u8(bytes[0]).ok_or(DecodeError::InvalidOpcode(bytes[0]))?;
        for &r in &bytes[1..4] {
            if r as usize >= NUM_REGS {
                return Err(DecodeError::InvalidRegister(r));
            }
        }
        Ok(Instruction {
            op,
            ra: bytes[1],
            rb: bytes[2],
            rc: bytes[3],
            imm: u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]),
        })
    }

    /// Registers read by this instruction. `CALL`, `CALLR`, `SYS`, `RET` and
    /// `HALT` conservatively read every register.
    pub fn reads(&self) -> RegSet {
        use Opcode::*;
        let r = RegSet::single;
        match self.op {
            LoadI | Jmp | Lea => RegSet::EMPTY,
            Mov => r(self.rb),
            Add | Sub | Mul | And | Xor | Shl | Shr => r(self.rb).with(self.rc),
            AddI | SubI => r(self.rb),
            Load | LoadB => r(self.rb),
            Store | StoreB => r(self.ra).with(self.rb),
            Jz | Jnz => r(self.ra),
            Jlt => r(self.ra).with(self.rb),
            Push => r(self.ra).with(SP),
            Pop => r(SP),
            Call | CallR | Ret | Halt | Sys => RegSet::ALL,
        }
    }

    /// Registers written by this instruction (calls are treated as writing
    /// nothing, which is the conservative choice for liveness).
    pub fn writes(&self) -> RegSet {
        use Opcode::*;
        match self.op {
            LoadI | Mov | Add | Sub | Mul | And | Xor | Shl | Shr | AddI | SubI | Load | LoadB | Lea => {
                RegSet::single(self.ra)
            }
            Push => RegSet::single(SP),
            Pop => RegSet::single(self.ra).with(SP),
            _ => RegSet::EMPTY,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Opcode::*;
        let reg = |r: u8| if r == SP { "SP".to_string() } else { format!("R{r}") };
        match self.op {
            Halt | Ret => write!(f, "{}", self.op),
            LoadI => write!(f, "LOADI {}, {}", reg(self.ra), self.imm),
            Mov => write!(f, "MOV {}, {}", reg(self.ra), reg(self.rb)),
            Add | Sub | Mul | And | Xor | Shl | Shr => {
                write!(f, "{} {}, {}, {}", self.op, reg(self.ra), reg(self.rb), reg(self.rc))
            }
            AddI | SubI | Load | Store | LoadB | StoreB => {
                write!(f, "{} {}, {}, {}", self.op, reg(self.ra), reg(self.rb), self.imm as i32)
            }
            Lea => write!(f, "LEA {}, s{}", reg(self.ra), self.imm),
            Jmp => write!(f, "JMP {:+}", self.offset()),
            Jz | Jnz => write!(f, "{} {}, {:+}", self.op, reg(self.ra), self.offset()),
            Jlt => write!(f, "JLT {}, {}, {:+}", reg(self.ra), reg(self.rb), self.offset()),
            Call => write!(f, "CALL f{}", self.imm),
            CallR | Push | Pop => write!(f, "{} {}", self.op, reg(self.ra)),
            Sys => write!(f, "SYS {}", self.imm),
        }
    }
}

/// Small bit set over the nine registers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RegSet(u16);

impl RegSet {
    pub const EMPTY: RegSet = RegSet(0);
    pub const ALL: RegSet = RegSet((1 << NUM_REGS) - 1);

    pub fn single(r: u8) -> RegSet {
        RegSet(1 << r)
    }

    pub fn with(self, r: u8) -> RegSet {
        RegSet(self.0 | (1 << r))
    }

    pub fn contains(self, r: u8) -> bool {
        self.0 & (1 << r) != 0
    }

    pub fn union(self, other: RegSet) -> RegSet {
        RegSet(self.0 | other.0)
    }

    pub fn minus(self, other: RegSet) -> RegSet {
        RegSet(self.0 & !other.0)
    }
}

/// Concatenated 8-byte encodings, in order.
pub fn encode_code(code: &[Instruction]) -> Vec<u8> {
    let mut out = Vec::with_capacity(code.len() * INSTR_BYTES);
    for ins in code {
        out.extend_from_slice(&ins.encode());
    }
    out
}

pub fn decode_code(bytes: &[u8]) -> Result<Vec<Instruction>, DecodeError> {
    if !bytes.len().is_multiple_of(INSTR_BYTES) {
        return Err(DecodeError::BadLength(bytes.len()));
    }
    bytes.chunks_exact(INSTR_BYTES).map(|c| Instruction::decode(c.try_into().expect("chunk of 8"))).collect()
}

/// Short constructors used by hand-written programs and the engines.
pub mod ins {
    use super::{Instruction, Opcode, Opcode::*};

    fn i(op: Opcode, ra: u8, rb: u8, rc: u8, imm: u32) -> Instruction {
        Instruction::new(op, ra, rb, rc, imm)
    }

    pub fn halt() -> Instruction {
        i(Halt, 0, 0, 0, 0)
    }
    pub fn loadi(ra: u8, imm: u32) -> Instruction {
        i(LoadI, ra, 0, 0, imm)
    }
    pub fn mov(ra: u8, rb: u8) -> Instruction {
        i(Mov, ra, rb, 0, 0)
    }
    pub fn alu(op: Opcode, ra: u8, rb: u8, rc: u8) -> Instruction {
        i(op, ra, rb, rc, 0)
    }
    pub fn add(ra: u8, rb: u8, rc: u8) -> Instruction {
        i(Add, ra, rb, rc, 0)
    }
    pub fn sub(ra: u8, rb: u8, rc: u8) -> Instruction {
        i(Sub, ra, rb, rc, 0)
    }
    pub fn mul(ra: u8, rb: u8, rc: u8) -> Instruction {
        i(Mul, ra, rb, rc, 0)
    }
    pub fn and(ra: u8, rb: u8, rc: u8) -> Instruction {
        i(And, ra, rb, rc, 0)
    }
    pub fn xor(ra: u8, rb: u8, rc: u8) -> Instruction {
        i(Xor, ra, rb, rc, 0)
    }
    pub fn shl(ra: u8, rb: u8, rc: u8) -> Instruction {
        i(Shl, ra, rb, rc, 0)
    }
    pub fn shr(ra: u8, rb: u8, rc: u8) -> Instruction {
        i(Shr, ra, rb, rc, 0)
    }
    pub fn addi(ra: u8, rb: u8, imm: u32) -> Instruction {
        i(AddI, ra, rb, 0, imm)
    }
    pub fn subi(ra: u8, rb: u8, imm: u32) -> Instruction {
        i(SubI, ra, rb, 0, imm)
    }
    pub fn load(ra: u8, rb: u8, off: u32) -> Instruction {
        i(Load, ra, rb, 0, off)
    }
    pub fn store(ra: u8, rb: u8, off: u32) -> Instruction {
        i(Store, ra, rb, 0, off)
    }
    pub fn loadb(ra: u8, rb: u8, off: u32) -> Instruction {
        i(LoadB, ra, rb, 0, off)
    }
    pub fn storeb(ra: u8, rb: u8, off: u32) -> Instruction {
        i(StoreB, ra, rb, 0, off)
    }
    pub fn lea(ra: u8, sid: u32) -> Instruction {
        i(Lea, ra, 0, 0, sid)
    }
    pub fn jmp(off: i32) -> Instruction {
        i(Jmp, 0, 0, 0, off as u32)
    }
    pub fn jz(ra: u8, off: i32) -> Instruction {
        i(Jz, ra, 0, 0, off as u32)
    }
    pub fn jnz(ra: u8, off: i32) -> Instruction {
        i(Jnz, ra, 0, 0, off as u32)
    }
    pub fn jlt(ra: u8, rb: u8, off: i32) -> Instruction {
        i(Jlt, ra, rb, 0, off as u32)
    }
    pub fn call(fid: u32) -> Instruction {
        i(Call, 0, 0, 0, fid)
    }
    pub fn callr(ra: u8) -> Instruction {
        i(CallR, ra, 0, 0, 0)
    }
    pub fn ret() -> Instruction {
        i(Ret, 0, 0, 0, 0)
    }
    pub fn push(ra: u8) -> Instruction {
        i(Push, ra, 0, 0, 0)
    }
    pub fn pop(ra: u8) -> Instruction {
        i(Pop, ra, 0, 0, 0)
    }
    pub fn sys(n: u32) -> Instruction {
        i(Sys, 0, 0, 0, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halt_encodes_to_zero() {
        assert_eq!(ins::halt().encode(), [0u8; 8]);
    }

    #[test]
    fn loadi_encoding() {
        assert_eq!(ins::loadi(1, 5).encode(), [0x01, 0x01, 0, 0, 0x05, 0, 0, 0]);
    }

    #[test]
    fn opcode_table_is_dense() {
        for (i, op) in Opcode::ALL.iter().enumerate() {
            assert_eq!(*op as usize, i);
            assert_eq!(Opcode::from_u8(i as u8), Some(*op));
        }
        assert_eq!(Opcode::from_u8(0x1B), None);
        assert_eq!(NUM_OPCODES, 0x1B);
    }

    #[test]
    fn decode_rejects_bad_register() {
        let bytes = [0x02, 9, 0, 0, 0, 0, 0, 0];
        assert_eq!(Instruction::decode(&bytes), Err(DecodeError::InvalidRegister(9)));
    }

    #[test]
    fn negative_offsets_round_trip() {
        let j = ins::jnz(3, -4);
        assert_eq!(j.offset(), -4);
        assert_eq!(Instruction::decode(&j.encode()).unwrap(), j);
    }
}
