//! Program image model and the `RVMI` container.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use thiserror::Error;

use super::isa::{decode_code, encode_code, DecodeError, Instruction, Opcode, ISR_INTRINSIC_FID};
use crate::wire::{PutLe, Reader, WireError};

pub const RVMI_MAGIC: &[u8; 4] = b"RVMI";
pub const RVMI_VERSION: u16 = 1;
const LAYOUT_TAG: &[u8; 4] = b"LAYT";

pub const MAX_SECTION_LEN: usize = 1 << 20;
pub const MAX_PARAMS: u8 = 4;

const FLAG_EXPORTED: u8 = 1;
const FLAG_WRITABLE: u8 = 1 << 1;
const FLAG_MOBILE_OWNED: u8 = 1 << 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionDef {
    pub fid: u32,
    pub name: String,
    pub param_count: u8,
    /// Empty for functions whose body was extracted into a mobile block.
    pub code: Vec<Instruction>,
}

impl FunctionDef {
    pub fn new(fid: u32, name: impl Into<String>, param_count: u8, code: Vec<Instruction>) -> Self {
        FunctionDef { fid, name: name.into(), param_count, code }
    }

    pub fn is_mobile_stub(&self) -> bool {
        self.code.is_empty()
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_code(&self.code)
    }

    /// Function ids targeted by direct `CALL`s.
    pub fn callees(&self) -> BTreeSet<u32> {
        self.code.iter().filter(|i| i.op == Opcode::Call && i.imm != ISR_INTRINSIC_FID).map(|i| i.imm).collect()
    }

    /// Section ids whose address this function computes with `LEA`.
    pub fn lea_targets(&self) -> BTreeSet<u32> {
        self.code.iter().filter(|i| i.op == Opcode::Lea).map(|i| i.imm).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSection {
    pub sid: u32,
    pub name: String,
    pub bytes: Vec<u8>,
    pub exported: bool,
    pub writable: bool,
    /// Set in static images for sections moved into a mobile block.
    pub mobile_owned: bool,
}

impl DataSection {
    pub fn new(sid: u32, name: impl Into<String>, bytes: Vec<u8>) -> Self {
        DataSection { sid, name: name.into(), bytes, exported: false, writable: false, mobile_owned: false }
    }

    pub fn exported(mut self) -> Self {
        self.exported = true;
        self
    }

    pub fn writable(mut self) -> Self {
        self.writable = true;
        self
    }

    fn flags(&self) -> u8 {
        let mut f = 0;
        if self.exported {
            f |= FLAG_EXPORTED;
        }
        if self.writable {
            f |= FLAG_WRITABLE;
        }
        if self.mobile_owned {
            f |= FLAG_MOBILE_OWNED;
        }
        f
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelocationRecord {
    /// `LEA` at `instr_index` of function `fid` produces the address of `sid`.
    Code { fid: u32, instr_index: u32, sid: u32 },
    /// The 4 bytes at `offset` in `sid` hold an addend relocated against `target`.
    Data { sid: u32, offset: u32, target: u32 },
}

/// Field layout of a record type, used by the field-reordering transform.
/// Fields are 4-byte slots; `accesses` lists the memory instructions whose
/// immediate is a field offset of this layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutTable {
    pub layout_id: u32,
    pub field_offsets: Vec<u32>,
    pub accesses: Vec<(u32, u32)>,
    /// Zero-initialised sections holding instances of the record.
    pub instances: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ProgramImage {
    pub functions: Vec<FunctionDef>,
    pub sections: Vec<DataSection>,
    pub relocations: Vec<RelocationRecord>,
    pub entry_fid: u32,
    pub layouts: Vec<LayoutTable>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageError {
    #[error("duplicate function id {0}")]
    DuplicateFunction(u32),
    #[error("duplicate section id {0}")]
    DuplicateSection(u32),
    #[error("entry function {0} does not exist")]
    MissingEntry(u32),
    #[error("function {fid}: {reason}")]
    BadFunction { fid: u32, reason: String },
    #[error("section {sid}: {reason}")]
    BadSection { sid: u32, reason: String },
    #[error("relocation {0:?} is invalid: {1}")]
    BadRelocation(RelocationRecord, String),
    #[error("LEA at f{fid}[{index}] has {count} matching code relocations")]
    LeaRelocMismatch { fid: u32, index: u32, count: usize },
    #[error("layout {0}: {1}")]
    BadLayout(u32, String),
    #[error("bad RVMI magic")]
    BadMagic,
    #[error("unsupported RVMI version {0}")]
    UnsupportedVersion(u16),
    #[error("malformed RVMI: {0}")]
    Malformed(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

impl ProgramImage {
    pub fn function(&self, fid: u32) -> Option<&FunctionDef> {
        self.functions.iter().find(|f| f.fid == fid)
    }

    pub fn function_mut(&mut self, fid: u32) -> Option<&mut FunctionDef> {
        self.functions.iter_mut().find(|f| f.fid == fid)
    }

    pub fn section(&self, sid: u32) -> Option<&DataSection> {
        self.sections.iter().find(|s| s.sid == sid)
    }

    pub fn section_mut(&mut self, sid: u32) -> Option<&mut DataSection> {
        self.sections.iter_mut().find(|s| s.sid == sid)
    }

    pub fn fids(&self) -> Vec<u32> {
        self.functions.iter().map(|f| f.fid).collect()
    }

    pub fn next_fid(&self) -> u32 {
        self.functions.iter().map(|f| f.fid + 1).max().unwrap_or(0)
    }

    pub fn next_sid(&self) -> u32 {
        self.sections.iter().map(|s| s.sid + 1).max().unwrap_or(0)
    }

    pub fn data_relocs(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        self.relocations.iter().filter_map(|r| match *r {
            RelocationRecord::Data { sid, offset, target } => Some((sid, offset, target)),
            RelocationRecord::Code { .. } => None,
        })
    }

    /// Regenerate every code relocation from the `LEA` instructions, keeping
    /// data relocations untouched.
    pub fn rebuild_code_relocs(&mut self) {
        let mut relocs: Vec<RelocationRecord> =
            self.relocations.iter().filter(|r| matches!(r, RelocationRecord::Data { .. })).copied().collect();
        for f in &self.functions {
            for (idx, ins) in f.code.iter().enumerate() {
                if ins.op == Opcode::Lea {
                    relocs.push(RelocationRecord::Code { fid: f.fid, instr_index: idx as u32, sid: ins.imm });
                }
            }
        }
        self.relocations = relocs;
    }

    /// Total encoded size of static (non-stub) code.
    pub fn code_bytes(&self) -> usize {
        self.functions.iter().map(|f| f.code.len() * 8).sum()
    }

    /// Direct callers of each function.
    pub fn callers(&self) -> BTreeMap<u32, BTreeSet<u32>> {
        let mut out: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
        for f in &self.functions {
            for callee in f.callees() {
                out.entry(callee).or_default().insert(f.fid);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ImageError> {
        let mut fids = BTreeSet::new();
        for f in &self.functions {
            if !fids.insert(f.fid) {
                return Err(ImageError::DuplicateFunction(f.fid));
            }
        }
        let mut sections: HashMap<u32, &DataSection> = HashMap::new();
        for s in &self.sections {
            if sections.insert(s.sid, s).is_some() {
                return Err(ImageError::DuplicateSection(s.sid));
            }
            if s.bytes.len() > MAX_SECTION_LEN {
                return Err(ImageError::BadSection { sid: s.sid, reason: "longer than 1 MiB".into() });
            }
            if s.name.len() > u16::MAX as usize {
                return Err(ImageError::BadSection { sid: s.sid, reason: "name too long".into() });
            }
        }
        if !fids.contains(&self.entry_fid) {
            return Err(ImageError::MissingEntry(self.entry_fid));
        }
        for f in &self.functions {
            validate_function(f, &fids, &sections)?;
        }

        let mut lea_relocs: HashMap<(u32, u32), usize> = HashMap::new();
        for r in &self.relocations {
            match *r {
                RelocationRecord::Code { fid, instr_index, sid } => {
                    let f =
                        self.function(fid).ok_or_else(|| ImageError::BadRelocation(*r, "unknown function".into()))?;
                    let ins = f
                        .code
                        .get(instr_index as usize)
                        .ok_or_else(|| ImageError::BadRelocation(*r, "index out of range".into()))?;
                    if ins.op != Opcode::Lea || ins.imm != sid {
                        return Err(ImageError::BadRelocation(*r, "not a matching LEA".into()));
                    }
                    if !sections.contains_key(&sid) {
                        return Err(ImageError::BadRelocation(*r, "unknown section".into()));
                    }
                    *lea_relocs.entry((fid, instr_index)).or_default() += 1;
                }
                RelocationRecord::Data { sid, offset, target } => {
                    let src =
                        sections.get(&sid).ok_or_else(|| ImageError::BadRelocation(*r, "unknown section".into()))?;
                    if !sections.contains_key(&target) {
                        return Err(ImageError::BadRelocation(*r, "unknown target".into()));
                    }
                    if offset % 4 != 0 {
                        return Err(ImageError::BadRelocation(*r, "unaligned offset".into()));
                    }
                    if !src.mobile_owned && offset as usize + 4 > src.bytes.len() {
                        return Err(ImageError::BadRelocation(*r, "offset out of bounds".into()));
                    }
                }
            }
        }
        for f in &self.functions {
            for (idx, ins) in f.code.iter().enumerate() {
                if ins.op == Opcode::Lea {
                    let count = lea_relocs.get(&(f.fid, idx as u32)).copied().unwrap_or(0);
                    if count != 1 {
                        return Err(ImageError::LeaRelocMismatch { fid: f.fid, index: idx as u32, count });
                    }
                }
            }
        }

        for layout in &self.layouts {
            for &(fid, idx) in &layout.accesses {
                let ok = self
                    .function(fid)
                    .and_then(|f| f.code.get(idx as usize))
                    .is_some_and(|i| matches!(i.op, Opcode::Load | Opcode::Store | Opcode::LoadB | Opcode::StoreB));
                if !ok {
                    return Err(ImageError::BadLayout(layout.layout_id, format!("bad access site f{fid}[{idx}]")));
                }
            }
            for sid in &layout.instances {
                match sections.get(sid) {
                    Some(s) if s.bytes.iter().all(|&b| b == 0) => {}
                    _ => {
                        return Err(ImageError::BadLayout(
                            layout.layout_id,
                            format!("instance section {sid} missing or not zero-initialised"),
                        ))
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_rvmi(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(RVMI_MAGIC);
        out.put_u16(RVMI_VERSION);
        out.put_u32(self.functions.len() as u32);
        for f in &self.functions {
            out.put_u32(f.fid);
            out.put_str(&f.name);
            out.put_u8(f.param_count);
            let code = f.encode();
            out.put_u32(code.len() as u32);
            out.extend_from_slice(&code);
        }
        out.put_u32(self.sections.len() as u32);
        for s in &self.sections {
            out.put_u32(s.sid);
            out.put_str(&s.name);
            out.put_u8(s.flags());
            out.put_u32(s.bytes.len() as u32);
            out.extend_from_slice(&s.bytes);
        }
        out.put_u32(self.relocations.len() as u32);
        for r in &self.relocations {
            let (kind, a, b, c) = match *r {
                RelocationRecord::Code { fid, instr_index, sid } => (0u8, fid, instr_index, sid),
                RelocationRecord::Data { sid, offset, target } => (1u8, sid, offset, target),
            };
            out.put_u8(kind);
            out.put_u32(a);
            out.put_u32(b);
            out.put_u32(c);
        }
        out.put_u32(self.entry_fid);
        if !self.layouts.is_empty() {
            out.extend_from_slice(LAYOUT_TAG);
            out.put_u32(self.layouts.len() as u32);
            for l in &self.layouts {
                out.put_u32(l.layout_id);
                out.put_u16(l.field_offsets.len() as u16);
                for &o in &l.field_offsets {
                    out.put_u32(o);
                }
                out.put_u32(l.accesses.len() as u32);
                for &(fid, idx) in &l.accesses {
                    out.put_u32(fid);
                    out.put_u32(idx);
                }
                out.put_u16(l.instances.len() as u16);
                for &sid in &l.instances {
                    out.put_u32(sid);
                }
            }
        }
        out
    }

    pub fn from_rvmi(bytes: &[u8]) -> Result<ProgramImage, ImageError> {
        let mut r = Reader::new(bytes);
        if r.bytes(4)? != RVMI_MAGIC {
            return Err(ImageError::BadMagic);
        }
        let version = r.u16()?;
        if version != RVMI_VERSION {
            return Err(ImageError::UnsupportedVersion(version));
        }
        let nfuncs = r.u32()? as usize;
        let mut functions = Vec::with_capacity(nfuncs.min(4096));
        for _ in 0..nfuncs {
            let fid = r.u32()?;
            let name = r.string()?;
            let param_count = r.u8()?;
            let code_len = r.u32()? as usize;
            let code = decode_code(r.bytes(code_len)?)?;
            functions.push(FunctionDef { fid, name, param_count, code });
        }
        let nsections = r.u32()? as usize;
        let mut sections = Vec::with_capacity(nsections.min(4096));
        for _ in 0..nsections {
            let sid = r.u32()?;
            let name = r.string()?;
            let flags = r.u8()?;
            if flags & !(FLAG_EXPORTED | FLAG_WRITABLE | FLAG_MOBILE_OWNED) != 0 {
                return Err(ImageError::Malformed(format!("unknown section flags {flags:#x}")));
            }
            let len = r.u32()? as usize;
            let bytes = r.bytes(len)?.to_vec();
            sections.push(DataSection {
                sid,
                name,
                bytes,
                exported: flags & FLAG_EXPORTED != 0,
                writable: flags & FLAG_WRITABLE != 0,
                mobile_owned: flags & FLAG_MOBILE_OWNED != 0,
            });
        }
        let nrelocs = r.u32()? as usize;
        let mut relocations = Vec::with_capacity(nrelocs.min(65_536));
        for _ in 0..nrelocs {
            let kind = r.u8()?;
            let (a, b, c) = (r.u32()?, r.u32()?, r.u32()?);
            relocations.push(match kind {
                0 => RelocationRecord::Code { fid: a, instr_index: b, sid: c },
                1 => RelocationRecord::Data { sid: a, offset: b, target: c },
                k => return Err(ImageError::Malformed(format!("unknown relocation kind {k}"))),
            });
        }
        let entry_fid = r.u32()?;
        let mut layouts = Vec::new();
        if r.remaining() > 0 {
            if r.bytes(4)? != LAYOUT_TAG {
                return Err(ImageError::Malformed("unexpected trailing bytes".into()));
            }
            let n = r.u32()? as usize;
            for _ in 0..n {
                let layout_id = r.u32()?;
                let nfields = r.u16()? as usize;
                let field_offsets = (0..nfields).map(|_| r.u32()).collect::<Result<_, _>>()?;
                let nacc = r.u32()? as usize;
                let mut accesses = Vec::with_capacity(nacc.min(65_536));
                for _ in 0..nacc {
                    accesses.push((r.u32()?, r.u32()?));
                }
                let ninst = r.u16()? as usize;
                let instances = (0..ninst).map(|_| r.u32()).collect::<Result<_, _>>()?;
                layouts.push(LayoutTable { layout_id, field_offsets, accesses, instances });
            }
            if r.remaining() > 0 {
                return Err(ImageError::Malformed("unexpected trailing bytes".into()));
            }
        }
        Ok(ProgramImage { functions, sections, relocations, entry_fid, layouts })
    }

    /// Copy without build-time metadata (layout tables).
    pub fn without_metadata(&self) -> ProgramImage {
        ProgramImage { layouts: Vec::new(), ..self.clone() }
    }
}

fn validate_function(
    f: &FunctionDef,
    fids: &BTreeSet<u32>,
    sections: &HashMap<u32, &DataSection>,
) -> Result<(), ImageError> {
    let bad = |reason: String| ImageError::BadFunction { fid: f.fid, reason };
    if f.param_count > MAX_PARAMS {
        return Err(bad(format!("{} parameters (max 4)", f.param_count)));
    }
    if f.name.len() > u16::MAX as usize {
        return Err(bad("name too long".into()));
    }
    if f.code.is_empty() {
        return Ok(());
    }
    let last = f.code.last().expect("non-empty");
    if !last.op.ends_block() {
        return Err(bad(format!("falls off the end ({last})")));
    }
    let len = f.code.len() as i64;
    for (idx, ins) in f.code.iter().enumerate() {
        if ins.op.is_jump() {
            let target = idx as i64 + 1 + ins.offset() as i64;
            if target < 0 || target >= len {
                return Err(bad(format!("jump at {idx} leaves the function")));
            }
        }
        match ins.op {
            Opcode::Call if ins.imm != ISR_INTRINSIC_FID && !fids.contains(&ins.imm) => {
                return Err(bad(format!("CALL to unknown function {}", ins.imm)));
            }
            Opcode::Lea if !sections.contains_key(&ins.imm) => {
                return Err(bad(format!("LEA of unknown section {}", ins.imm)));
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::isa::ins;

    fn sample() -> ProgramImage {
        let mut img = ProgramImage {
            functions: vec![
                FunctionDef::new(0, "main", 0, vec![ins::lea(1, 10), ins::call(1), ins::halt()]),
                FunctionDef::new(1, "leaf", 2, vec![ins::add(0, 0, 1), ins::ret()]),
            ],
            sections: vec![
                DataSection::new(10, "table", vec![1, 2, 3, 4, 0, 0, 0, 0]).exported(),
                DataSection::new(11, "state", vec![0; 8]).writable(),
            ],
            relocations: vec![RelocationRecord::Data { sid: 10, offset: 4, target: 11 }],
            entry_fid: 0,
            layouts: vec![],
        };
        img.rebuild_code_relocs();
        img
    }

    #[test]
    fn sample_is_valid_and_round_trips() {
        let img = sample();
        img.validate().unwrap();
        let bytes = img.to_rvmi();
        assert_eq!(&bytes[..4], b"RVMI");
        assert_eq!(ProgramImage::from_rvmi(&bytes).unwrap(), img);
    }

    #[test]
    fn missing_relocation_target_is_rejected() {
        let mut img = sample();
        img.relocations.push(RelocationRecord::Data { sid: 10, offset: 0, target: 99 });
        assert!(matches!(img.validate(), Err(ImageError::BadRelocation(..))));
    }

    #[test]
    fn lea_without_reloc_is_rejected() {
        let mut img = sample();
        img.relocations.retain(|r| matches!(r, RelocationRecord::Data { .. }));
        assert!(matches!(img.validate(), Err(ImageError::LeaRelocMismatch { .. })));
    }

    #[test]
    fn jump_out_of_function_is_rejected() {
        let mut img = sample();
        img.functions[1].code.insert(0, ins::jmp(5));
        assert!(matches!(img.validate(), Err(ImageError::BadFunction { fid: 1, .. })));
    }

    #[test]
    fn truncated_container_is_an_error() {
        let bytes = sample().to_rvmi();
        for cut in [0, 3, 6, 20, bytes.len() - 1] {
            assert!(ProgramImage::from_rvmi(&bytes[..cut]).is_err());
        }
    }

    #[test]
    fn layouts_survive_the_container() {
        let mut img = sample();
        img.functions[1].code.insert(0, ins::load(2, 0, 4));
        img.rebuild_code_relocs();
        img.layouts.push(LayoutTable {
            layout_id: 3,
            field_offsets: vec![0, 4],
            accesses: vec![(1, 0)],
            instances: vec![11],
        });
        img.validate().unwrap();
        assert_eq!(ProgramImage::from_rvmi(&img.to_rvmi()).unwrap(), img);
    }
}
