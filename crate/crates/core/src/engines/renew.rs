//! Regeneration of block versions from a stored base payload.

use serde::{Deserialize, Serialize};

use super::guard::HashVariant;
use super::isr::{decode_bytecode, isr_translate, stub_sections};
use super::procedural::generator_code;
use super::syntactic::{syntactic_diversify, DiversificationKnobs};
use super::wbc::{random_key, wbc_emit_block, wbc_generate, WbcKey, WbcTemplate};
use super::EngineError;
use crate::extractor::EngineHint;
use crate::vm::isa::{decode_code, encode_code};
use crate::vm::{FunctionDef, MobileBlockPayload, Prng};

/// Everything an engine needs, besides the base payload, to produce another
/// version of a block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "snake_case")]
pub enum Recipe {
    Syntactic,
    Isr,
    StaticToProcedural {
        scratch_sid: u32,
        bytes: Vec<u8>,
    },
    Wbc {
        template: WbcTemplate,
        key: WbcKey,
        encodings: bool,
    },
    /// Attested block: code renewed syntactically, guards renewed per challenge.
    Guard {
        variant: HashVariant,
    },
}

impl Recipe {
    pub fn hint(&self) -> EngineHint {
        match self {
            Recipe::Syntactic => EngineHint::Syntactic,
            Recipe::Isr => EngineHint::Isr,
            Recipe::StaticToProcedural { .. } => EngineHint::StaticToProcedural,
            Recipe::Wbc { .. } => EngineHint::Wbc,
            Recipe::Guard { .. } => EngineHint::Guard,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenewParams {
    /// Protection level; scales syntactic insertion rates.
    pub level: u32,
    /// WBC only: draw a fresh key instead of re-encoding the current one.
    pub rekey: bool,
}

impl Default for RenewParams {
    fn default() -> Self {
        RenewParams { level: 1, rekey: false }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Renewed {
    pub payload: MobileBlockPayload,
    /// The key the new WBC tables embed, when it changed.
    pub new_key: Option<WbcKey>,
}

fn base_function(base: &MobileBlockPayload) -> Result<FunctionDef, EngineError> {
    let code = decode_code(&base.code).map_err(|e| EngineError::Malformed(e.to_string()))?;
    Ok(FunctionDef::new(base.entry_fid, format!("f{}", base.entry_fid), base.param_count, code))
}

fn replace_section(p: &mut MobileBlockPayload, sid: u32, bytes: Vec<u8>) -> Result<(), EngineError> {
    let slot = p.owned_sections.iter_mut().find(|(s, _)| *s == sid).ok_or(EngineError::UnknownSection(sid))?;
    slot.1 = bytes;
    Ok(())
}

/// Produce a new version of `base` with `recipe`'s engine and `seed`.
pub fn renew(
    base: &MobileBlockPayload,
    recipe: &Recipe,
    seed: u64,
    params: RenewParams,
) -> Result<Renewed, EngineError> {
    let mut out = MobileBlockPayload { version_id: 0, ..base.clone() };
    let mut new_key = None;
    match recipe {
        Recipe::Syntactic | Recipe::Guard { .. } => {
            let f = base_function(base)?;
            let knobs = DiversificationKnobs::at_level(params.level, seed);
            out.code = encode_code(&syntactic_diversify(&f, &knobs)?.code);
        }
        Recipe::Isr => {
            let stub = base_function(base)?;
            let (bc, om) = stub_sections(&stub.code).ok_or(EngineError::Malformed("not an ISR stub".into()))?;
            let bytecode = base.section(bc).ok_or(EngineError::UnknownSection(bc))?;
            let opmap = base.section(om).ok_or(EngineError::UnknownSection(om))?;
            let original = FunctionDef { code: decode_bytecode(bytecode, opmap)?, ..stub };
            let bundle = isr_translate(&original, seed, bc, om);
            replace_section(&mut out, bc, bundle.bytecode)?;
            replace_section(&mut out, om, bundle.opmap)?;
        }
        Recipe::StaticToProcedural { scratch_sid, bytes } => {
            out.code = encode_code(&generator_code(*scratch_sid, bytes, seed));
        }
        Recipe::Wbc { template, key, encodings } => {
            let key = if params.rekey {
                let k = random_key(&mut Prng::new(seed ^ 0x6B65_7900_0000_0000));
                new_key = Some(k);
                k
            } else {
                *key
            };
            let tables = wbc_generate(&key, seed, *encodings);
            let p = wbc_emit_block(&tables, template);
            out.code = p.code;
            out.owned_sections = p.owned_sections;
        }
    }
    Ok(Renewed { payload: out, new_key })
}
