//! Whole-program semantic variants (parameter and field reordering) and the
//! binary differ that finds the functions they touch.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::edit::{edit_function, CodeEdit};
use super::EngineError;
use crate::vm::isa::{ins, Opcode};
use crate::vm::{Prng, ProgramImage};

/// Probability that a given eligible function or layout is permuted in a variant.
pub const REORDER_PROBABILITY: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticTransform {
    ParamReorder,
    FieldReorder,
}

impl fmt::Display for SemanticTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SemanticTransform::ParamReorder => "param_reorder",
            SemanticTransform::FieldReorder => "field_reorder",
        })
    }
}

impl FromStr for SemanticTransform {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "param_reorder" => Ok(SemanticTransform::ParamReorder),
            "field_reorder" => Ok(SemanticTransform::FieldReorder),
            other => Err(format!("unknown transform '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantSet {
    pub transform: SemanticTransform,
    pub variants: Vec<ProgramImage>,
    pub seeds: Vec<u64>,
    pub differing_fids: BTreeSet<u32>,
}

/// Functions whose argument registers may be permuted: at least two
/// parameters, not the entry point, and never used as an indirect call target.
pub fn reorder_candidates(img: &ProgramImage) -> Vec<u32> {
    let loaded: BTreeSet<u32> =
        img.functions.iter().flat_map(|f| f.code.iter()).filter(|i| i.op == Opcode::LoadI).map(|i| i.imm).collect();
    img.functions
        .iter()
        .filter(|f| f.param_count >= 2 && f.fid != img.entry_fid && !f.code.is_empty() && !loaded.contains(&f.fid))
        .map(|f| f.fid)
        .collect()
}

fn random_derangement_free_perm(prng: &mut Prng, k: usize) -> Vec<u8> {
    loop {
        let mut p: Vec<u8> = (0..k as u8).collect();
        prng.shuffle(&mut p);
        if p.iter().enumerate().any(|(i, v)| *v as usize != i) {
            return p;
        }
    }
}

/// Callers deliver argument `i` in register `perm[i]`; the callee moves it back.
pub fn apply_param_reorder(img: &mut ProgramImage, fid: u32, perm: &[u8]) {
    let k = perm.len() as u8;
    let mut marshal: Vec<_> = (0..k).map(ins::push).collect();
    marshal.extend((0..k).rev().map(|i| ins::pop(perm[i as usize])));
    let mut prologue: Vec<_> = (0..k).map(|i| ins::push(perm[i as usize])).collect();
    prologue.extend((0..k).rev().map(ins::pop));

    let callers: Vec<u32> = img.functions.iter().filter(|f| f.callees().contains(&fid)).map(|f| f.fid).collect();
    for caller in callers {
        let f = img.function(caller).expect("caller exists");
        let mut edit = CodeEdit::default();
        for (idx, i) in f.code.iter().enumerate() {
            if i.op == Opcode::Call && i.imm == fid {
                edit.before.insert(idx, marshal.clone());
            }
        }
        edit_function(img, caller, &edit);
    }
    edit_function(img, fid, &CodeEdit { prologue, ..Default::default() });
}

/// Move field `j` of a layout to the slot `perm[j]` and rewrite every access.
pub fn apply_field_reorder(img: &mut ProgramImage, layout_idx: usize, perm: &[usize]) {
    let layout = img.layouts[layout_idx].clone();
    let old = layout.field_offsets.clone();
    let new: Vec<u32> = (0..old.len()).map(|j| old[perm[j]]).collect();
    for (fid, idx) in &layout.accesses {
        let f = img.function_mut(*fid).expect("access site exists");
        let ins = &mut f.code[*idx as usize];
        if let Some(j) = old.iter().position(|o| *o == ins.imm) {
            ins.imm = new[j];
        }
    }
    img.layouts[layout_idx].field_offsets = new;
}

fn make_variant(img: &ProgramImage, transform: SemanticTransform, seed: u64) -> Result<ProgramImage, EngineError> {
    let mut prng = Prng::new(seed);
    let mut v = img.clone();
    match transform {
        SemanticTransform::ParamReorder => {
            for fid in reorder_candidates(img) {
                let k = img.function(fid).expect("candidate").param_count as usize;
                if prng.chance(REORDER_PROBABILITY) {
                    let perm = random_derangement_free_perm(&mut prng, k);
                    apply_param_reorder(&mut v, fid, &perm);
                }
            }
        }
        SemanticTransform::FieldReorder => {
            for idx in 0..img.layouts.len() {
                let n = img.layouts[idx].field_offsets.len();
                if n >= 2 && prng.chance(REORDER_PROBABILITY) {
                    let perm: Vec<usize> =
                        random_derangement_free_perm(&mut prng, n).into_iter().map(usize::from).collect();
                    apply_field_reorder(&mut v, idx, &perm);
                }
            }
        }
    }
    v.validate().map_err(|e| EngineError::Internal(format!("variant is invalid: {e}")))?;
    Ok(v)
}

/// `n` whole-program variants, each from its own seed derived from `seed`.
pub fn generate_semantic_variants(
    img: &ProgramImage,
    transform: SemanticTransform,
    n: usize,
    seed: u64,
) -> Result<VariantSet, EngineError> {
    if n < 2 {
        return Err(EngineError::BadKnob(format!("need at least 2 variants, got {n}")));
    }
    if let Some(f) = img.functions.iter().find(|f| f.param_count > 4) {
        return Err(EngineError::Unsupported(format!("f{} has {} parameters", f.fid, f.param_count)));
    }
    let mut prng = Prng::new(seed);
    let seeds: Vec<u64> = (0..n).map(|_| prng.next_u64()).collect();
    let variants = seeds.iter().map(|s| make_variant(img, transform, *s)).collect::<Result<_, _>>()?;
    let mut set = VariantSet { transform, variants, seeds, differing_fids: BTreeSet::new() };
    set.differing_fids = diff_variants(&set)?;
    Ok(set)
}

/// Functions whose encoded bytes differ between any two variants.
pub fn diff_variants(vs: &VariantSet) -> Result<BTreeSet<u32>, EngineError> {
    let first = vs.variants.first().ok_or(EngineError::BadKnob("no variants".into()))?;
    let fids = first.fids();
    let sids: Vec<u32> = first.sections.iter().map(|s| s.sid).collect();
    let mut out = BTreeSet::new();
    for v in &vs.variants[1..] {
        if v.fids() != fids || v.sections.iter().map(|s| s.sid).collect::<Vec<_>>() != sids {
            return Err(EngineError::IdSpaceMismatch);
        }
    }
    for (i, f) in first.functions.iter().enumerate() {
        let base = f.encode();
        if vs.variants[1..].iter().any(|v| v.functions[i].encode() != base) {
            out.insert(f.fid);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::{FunctionDef, NullHost, Vm};

    fn sample() -> ProgramImage {
        let main = FunctionDef::new(
            0,
            "main",
            0,
            vec![ins::loadi(0, 50), ins::loadi(1, 8), ins::loadi(2, 3), ins::call(1), ins::sys(3), ins::halt()],
        );
        // (a - b) * c
        let f = FunctionDef::new(1, "f", 3, vec![ins::sub(0, 0, 1), ins::mul(0, 0, 2), ins::ret()]);
        let other = FunctionDef::new(2, "g", 0, vec![ins::ret()]);
        ProgramImage { functions: vec![main, f, other], entry_fid: 0, ..Default::default() }
    }

    #[test]
    fn param_reorder_preserves_behavior_and_touches_callers_only() {
        let img = sample();
        let mut v = img.clone();
        apply_param_reorder(&mut v, 1, &[2, 0, 1]);
        v.validate().unwrap();
        let run = |i: &ProgramImage| Vm::load_image(i, 1).unwrap().run(&[], &mut NullHost).unwrap().exit_code;
        assert_eq!(run(&v), 126);
        let set = VariantSet {
            transform: SemanticTransform::ParamReorder,
            variants: vec![img, v],
            seeds: vec![0, 1],
            differing_fids: BTreeSet::new(),
        };
        assert_eq!(diff_variants(&set).unwrap(), [0, 1].into_iter().collect());
    }

    #[test]
    fn identical_variants_do_not_differ() {
        let set = VariantSet {
            transform: SemanticTransform::ParamReorder,
            variants: vec![sample(), sample()],
            seeds: vec![0, 1],
            differing_fids: BTreeSet::new(),
        };
        assert!(diff_variants(&set).unwrap().is_empty());
    }

    #[test]
    fn indirect_targets_are_not_candidates() {
        let mut img = sample();
        assert_eq!(reorder_candidates(&img), vec![1]);
        img.functions[2].code.insert(0, ins::loadi(3, 1));
        assert!(reorder_candidates(&img).is_empty());
    }

    #[test]
    fn fewer_than_two_variants_is_an_error() {
        assert!(generate_semantic_variants(&sample(), SemanticTransform::ParamReorder, 1, 0).is_err());
    }
}
