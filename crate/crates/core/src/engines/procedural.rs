//! Static-to-procedural conversion: constant data becomes code that writes it
//! into a scratch section on every use.

use std::collections::BTreeSet;

use super::edit::{edit_function, CodeEdit};
use super::EngineError;
use crate::extractor::{compute_owned_sections, Annotation, EngineHint};
use crate::vm::isa::ins;
use crate::vm::{DataSection, FunctionDef, Instruction, Opcode, Prng, ProgramImage};

pub const MAX_PROCEDURAL_BYTES: usize = 4096;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProceduralConversion {
    pub image: ProgramImage,
    pub annotations: Vec<Annotation>,
    pub generator_fid: u32,
    pub scratch_sid: u32,
    pub owner_fid: u32,
}

/// Generator body: stores every word of `bytes` (zero padded) into the
/// scratch section, each word split into two random operands.
pub fn generator_code(scratch_sid: u32, bytes: &[u8], seed: u64) -> Vec<Instruction> {
    let mut prng = Prng::new(seed);
    let mut words: Vec<(u32, u32)> = bytes
        .chunks(4)
        .enumerate()
        .map(|(i, c)| {
            let mut w = [0u8; 4];
            w[..c.len()].copy_from_slice(c);
            (i as u32 * 4, u32::from_le_bytes(w))
        })
        .collect();
    prng.shuffle(&mut words);
    let mut code = vec![ins::push(1), ins::push(2), ins::lea(0, scratch_sid)];
    for (off, w) in words {
        let a = prng.next_u32();
        let (b, combine) =
            if prng.chance(0.5) { (w ^ a, ins::xor(1, 1, 2)) } else { (w.wrapping_sub(a), ins::add(1, 1, 2)) };
        code.extend([ins::loadi(1, a), ins::loadi(2, b), combine, ins::store(1, 0, off)]);
    }
    code.extend([ins::pop(2), ins::pop(1), ins::ret()]);
    code
}

/// Replace read-only section `sid`, owned by a data-mobile function, with a
/// new mobile generator function.
pub fn static_to_procedural(
    img: &ProgramImage,
    annotations: &[Annotation],
    sid: u32,
    seed: u64,
) -> Result<ProceduralConversion, EngineError> {
    let section = img.section(sid).ok_or(EngineError::UnknownSection(sid))?;
    if section.writable || section.exported {
        return Err(EngineError::Unsupported(format!("section {sid} is writable or exported")));
    }
    if section.bytes.len() > MAX_PROCEDURAL_BYTES {
        return Err(EngineError::Unsupported(format!("section {sid} exceeds 4 KiB")));
    }
    if img.data_relocs().any(|(s, _, t)| s == sid || t == sid) {
        return Err(EngineError::Unsupported(format!("section {sid} takes part in data relocations")));
    }
    let data_mobile: BTreeSet<u32> = annotations.iter().filter(|a| a.data_mobility).map(|a| a.fid).collect();
    let owner = compute_owned_sections(img, &data_mobile)
        .into_iter()
        .find(|(_, sids)| sids.contains(&sid))
        .map(|(f, _)| f)
        .ok_or_else(|| EngineError::Unsupported(format!("section {sid} is not owned by a mobile function")))?;

    let mut out = img.clone();
    let generator_fid = img.next_fid();
    let scratch_sid = img.next_sid();
    let len = section.bytes.len().next_multiple_of(4).max(4);
    out.sections.retain(|s| s.sid != sid);
    out.sections.push(DataSection::new(scratch_sid, format!("{}.scratch", section.name), vec![0; len]).writable());
    out.functions.push(FunctionDef::new(
        generator_fid,
        format!("gen_{}", section.name),
        0,
        generator_code(scratch_sid, &section.bytes, seed),
    ));

    let f = img.function(owner).expect("owner exists");
    let mut edit = CodeEdit::default();
    for (idx, i) in f.code.iter().enumerate() {
        if i.op == Opcode::Lea && i.imm == sid {
            let rep = if i.ra == 0 {
                vec![ins::call(generator_fid)]
            } else {
                vec![ins::push(0), ins::call(generator_fid), ins::mov(i.ra, 0), ins::pop(0)]
            };
            edit.replace.insert(idx, rep);
        }
    }
    edit_function(&mut out, owner, &edit);
    out.rebuild_code_relocs();
    out.validate().map_err(|e| EngineError::Internal(format!("converted image is invalid: {e}")))?;

    let mut annotations = annotations.to_vec();
    annotations.push(Annotation {
        fid: generator_fid,
        make_mobile: true,
        data_mobility: false,
        engine_hint: Some(EngineHint::StaticToProcedural),
    });
    Ok(ProceduralConversion { image: out, annotations, generator_fid, scratch_sid, owner_fid: owner })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::isa::sys;
    use crate::vm::{NullHost, Vm};

    fn sample() -> ProgramImage {
        let main = FunctionDef::new(0, "main", 0, vec![ins::call(1), ins::sys(sys::EXIT), ins::halt()]);
        let owner = FunctionDef::new(1, "owner", 0, vec![ins::lea(3, 5), ins::load(0, 3, 0), ins::ret()]);
        let mut img = ProgramImage {
            functions: vec![main, owner],
            sections: vec![DataSection::new(5, "magic", vec![0xDE, 0xAD, 0xBE, 0xEF])],
            entry_fid: 0,
            ..Default::default()
        };
        img.rebuild_code_relocs();
        img
    }

    #[test]
    fn generated_bytes_match_the_section() {
        let conv = static_to_procedural(&sample(), &[Annotation::mobile_with_data(1)], 5, 3).unwrap();
        assert!(conv.image.section(5).is_none());
        let out = Vm::load_image(&conv.image, 1).unwrap().run(&[], &mut NullHost).unwrap();
        assert_eq!(out.exit_code, u32::from_le_bytes([0xDE, 0xAD, 0xBE, 0xEF]));
    }

    #[test]
    fn seeds_change_generator_code() {
        assert_ne!(generator_code(9, &[1, 2, 3, 4, 5], 1), generator_code(9, &[1, 2, 3, 4, 5], 2));
    }

    #[test]
    fn unowned_or_writable_sections_are_refused() {
        assert!(static_to_procedural(&sample(), &[Annotation::mobile(1)], 5, 3).is_err());
        let mut img = sample();
        img.sections[0].writable = true;
        assert!(static_to_procedural(&img, &[Annotation::mobile_with_data(1)], 5, 3).is_err());
    }
}
