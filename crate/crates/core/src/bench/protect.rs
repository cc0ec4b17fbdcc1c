//! Hot-function selection and the protection pipeline: prepare engine inputs,
//! extract blocks and fill a catalog with renewed versions.

use std::collections::{BTreeMap, BTreeSet};

use super::BenchError;
use crate::blockdb::{BlockCatalog, BlockVersion, Manifest};
use crate::engines::isr::isr_translate;
use crate::engines::static_to_procedural;
use crate::engines::{
    generate_semantic_variants, renew, syntactic_diversify, DiversificationKnobs, Recipe, RenewParams,
    SemanticTransform,
};
use crate::extractor::{extract, Annotation, EngineHint, ExtractWarning};
use crate::vm::isa::{decode_code, encode_code};
use crate::vm::{DataSection, FunctionDef, MobileBlockPayload, Prng, ProfileReport, ProgramImage};

/// Greedily pick functions by descending instruction count until their share
/// of the profile reaches `fraction`. A fraction of 1.0 selects every function.
pub fn select_hot(profile: &ProfileReport, fraction: f64) -> Result<BTreeSet<u32>, BenchError> {
    if profile.functions.is_empty() || profile.total_instructions == 0 {
        return Err(BenchError::EmptyProfile);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(BenchError::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    if fraction >= 1.0 {
        return Ok(profile.functions.keys().copied().collect());
    }
    let mut ranked: Vec<(u64, u32)> = profile.functions.iter().map(|(f, p)| (p.instruction_count, *f)).collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let target = fraction * profile.total_instructions as f64;
    let mut picked = BTreeSet::new();
    let mut sum = 0u64;
    for (count, fid) in ranked {
        if sum as f64 >= target {
            break;
        }
        picked.insert(fid);
        sum += count;
    }
    Ok(picked)
}

/// Replace `fid` with an ISR stub over two new sections holding its
/// randomized bytecode and opcode map. Returns the two section ids.
pub fn apply_isr(img: &mut ProgramImage, fid: u32, seed: u64) -> Result<(u32, u32), BenchError> {
    let f = img.function(fid).ok_or(BenchError::Config(format!("unknown function {fid}")))?.clone();
    let bc = img.next_sid();
    let om = bc + 1;
    let bundle = isr_translate(&f, seed, bc, om);
    img.sections.push(DataSection::new(bc, format!("{}.bytecode", f.name), bundle.bytecode));
    img.sections.push(DataSection::new(om, format!("{}.opmap", f.name), bundle.opmap));
    img.function_mut(fid).expect("exists").code = bundle.stub;
    img.rebuild_code_relocs();
    img.validate().map_err(|e| BenchError::Internal(format!("ISR image: {e}")))?;
    Ok((bc, om))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtectOptions {
    /// Versions generated per block and level.
    pub versions: usize,
    pub levels: Vec<u32>,
    pub seed: u64,
    pub data_mobility: bool,
    /// Engine per block; blocks not listed are renewed syntactically.
    pub recipes: BTreeMap<u32, Recipe>,
    /// Lifetime of every stored version, if limited.
    pub ttl_ms: Option<u64>,
    /// Read-only sections to replace with mobile generator functions; each
    /// must be owned by a data-mobile function.
    pub procedural_sections: Vec<u32>,
    /// Explicit knobs for syntactic versions instead of the level presets;
    /// the seed is replaced per version.
    pub knobs: Option<DiversificationKnobs>,
}

impl Default for ProtectOptions {
    fn default() -> Self {
        ProtectOptions {
            versions: 600,
            levels: vec![1],
            seed: 1,
            data_mobility: true,
            recipes: BTreeMap::new(),
            ttl_ms: None,
            procedural_sections: Vec::new(),
            knobs: None,
        }
    }
}

impl ProtectOptions {
    pub fn with_versions(versions: usize, seed: u64) -> Self {
        ProtectOptions { versions, seed, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Protected {
    /// The image shipped to clients.
    pub image: ProgramImage,
    /// Initial block payloads, as extracted.
    pub blocks: Vec<MobileBlockPayload>,
    pub manifest: Manifest,
    pub warnings: Vec<ExtractWarning>,
}

/// Make `mobile` functions mobile, register their engine recipes and store
/// `versions` renewed versions of each block in `catalog`.
pub fn protect(
    img: &ProgramImage,
    mobile: &BTreeSet<u32>,
    opts: &ProtectOptions,
    catalog: &mut BlockCatalog,
) -> Result<Protected, BenchError> {
    if opts.levels.is_empty() {
        return Err(BenchError::Config("at least one protection level is required".into()));
    }
    let mut prng = Prng::new(opts.seed);
    let mut img = img.clone();
    let mut recipes = opts.recipes.clone();
    for (fid, recipe) in &opts.recipes {
        if !mobile.contains(fid) {
            return Err(BenchError::Config(format!("recipe for f{fid}, which is not mobile")));
        }
        if matches!(recipe, Recipe::Isr) {
            apply_isr(&mut img, *fid, prng.next_u64())?;
        }
    }
    let mut annotations: Vec<Annotation> = mobile
        .iter()
        .map(|f| {
            let a = if opts.data_mobility { Annotation::mobile_with_data(*f) } else { Annotation::mobile(*f) };
            a.with_engine(recipes.get(f).map_or(EngineHint::Syntactic, Recipe::hint))
        })
        .collect();
    for &sid in &opts.procedural_sections {
        let bytes = img.section(sid).ok_or(BenchError::Config(format!("unknown section {sid}")))?.bytes.clone();
        let conv = static_to_procedural(&img, &annotations, sid, prng.next_u64())?;
        img = conv.image;
        annotations = conv.annotations;
        recipes.insert(conv.generator_fid, Recipe::StaticToProcedural { scratch_sid: conv.scratch_sid, bytes });
    }
    let result = extract(&img, &annotations)?;

    let mut manifest = Manifest::default();
    for base in &result.blocks {
        let recipe = recipes.get(&base.block_id).cloned().unwrap_or(Recipe::Syntactic);
        for &level in &opts.levels {
            for _ in 0..opts.versions {
                let seed = prng.next_u64();
                let payload = match (&recipe, &opts.knobs) {
                    (Recipe::Syntactic, Some(k)) => diversify_with(base, &DiversificationKnobs { seed, ..*k })?,
                    _ => renew(base, &recipe, seed, RenewParams { level, rekey: false })?.payload,
                };
                let v = BlockVersion::new(&payload, 0, recipe.hint().as_str(), seed, level).with_ttl(0, opts.ttl_ms);
                catalog.put_version(v)?;
            }
        }
        manifest.insert(base.clone(), 0, recipe);
    }
    Ok(Protected { image: result.static_image, blocks: result.blocks, manifest, warnings: result.warnings })
}

fn diversify_with(base: &MobileBlockPayload, knobs: &DiversificationKnobs) -> Result<MobileBlockPayload, BenchError> {
    let code = decode_code(&base.code).map_err(|e| BenchError::Internal(e.to_string()))?;
    let f = FunctionDef::new(base.entry_fid, format!("f{}", base.entry_fid), base.param_count, code);
    let out = syntactic_diversify(&f, knobs)?;
    Ok(MobileBlockPayload { version_id: 0, code: encode_code(&out.code), ..base.clone() })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticProtected {
    /// The static residue, identical for every variant.
    pub image: ProgramImage,
    /// Functions that differ between variants; these are the mobile blocks.
    pub mobile: BTreeSet<u32>,
    /// Group ids used in the catalog, one per variant.
    pub groups: Vec<u32>,
}

/// Generate `n` whole-program variants, make every function that differs
/// between them mobile and store each variant's blocks under its own
/// compatibility group.
pub fn protect_semantic(
    img: &ProgramImage,
    transform: SemanticTransform,
    n: usize,
    seed: u64,
    catalog: &mut BlockCatalog,
) -> Result<SemanticProtected, BenchError> {
    let set = generate_semantic_variants(img, transform, n, seed)?;
    let annotations: Vec<Annotation> = set.differing_fids.iter().map(|f| Annotation::mobile(*f)).collect();
    let mut residue: Option<ProgramImage> = None;
    let mut groups = Vec::with_capacity(n);
    for (i, variant) in set.variants.iter().enumerate() {
        let group = i as u32 + 1;
        let r = extract(variant, &annotations)?;
        match &residue {
            None => residue = Some(r.static_image.clone()),
            Some(first) if *first != r.static_image => {
                return Err(BenchError::Internal(format!("static residue of variant {i} differs")));
            }
            Some(_) => {}
        }
        for b in &r.blocks {
            catalog.put_version(BlockVersion::new(b, group, "semantic", set.seeds[i], 1))?;
        }
        groups.push(group);
    }
    Ok(SemanticProtected { image: residue.expect("n >= 2"), mobile: set.differing_fids, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::programs::{gen_crunch, CrunchParams};
    use crate::vm::machine::FunctionProfile;
    use crate::vm::{NullHost, Vm};

    fn profile(counts: &[(u32, u64)]) -> ProfileReport {
        ProfileReport {
            functions: counts
                .iter()
                .map(|(f, c)| (*f, FunctionProfile { call_count: 1, instruction_count: *c }))
                .collect(),
            total_instructions: counts.iter().map(|(_, c)| c).sum(),
        }
    }

    #[test]
    fn select_hot_is_a_greedy_prefix() {
        let p = profile(&[(0, 5), (1, 50), (2, 30), (3, 15)]);
        assert_eq!(select_hot(&p, 0.2).unwrap(), [1].into());
        assert_eq!(select_hot(&p, 0.6).unwrap(), [1, 2].into());
        assert_eq!(select_hot(&p, 1.0).unwrap(), [0, 1, 2, 3].into());
        assert!(select_hot(&p, 0.2).unwrap().is_subset(&select_hot(&p, 0.5).unwrap()));
        assert!(matches!(select_hot(&profile(&[]), 0.5), Err(BenchError::EmptyProfile)));
        assert!(select_hot(&p, 0.0).is_err());
    }

    #[test]
    fn isr_image_runs_like_the_original() {
        let img = gen_crunch(CrunchParams::small(2)).unwrap();
        let expected = Vm::load_image(&img, 1).unwrap().run(b"q", &mut NullHost).unwrap().output;
        let mut isr = img.clone();
        apply_isr(&mut isr, 9, 5).unwrap();
        assert_ne!(isr.function(9), img.function(9));
        assert_eq!(Vm::load_image(&isr, 1).unwrap().run(b"q", &mut NullHost).unwrap().output, expected);
    }

    #[test]
    fn protect_fills_the_catalog() {
        let img = gen_crunch(CrunchParams::small(2)).unwrap();
        let mut cat = BlockCatalog::in_memory();
        let mobile: BTreeSet<u32> = [7, 8, 9].into();
        let mut opts = ProtectOptions::with_versions(4, 3);
        opts.recipes.insert(9, Recipe::Isr);
        let p = protect(&img, &mobile, &opts, &mut cat).unwrap();
        assert_eq!(cat.len(), 12);
        assert_eq!(p.manifest.entries.len(), 3);
        assert!(p.image.function(7).unwrap().is_mobile_stub());
        assert_eq!(cat.versions(9)[0].engine, "isr");
    }

    #[test]
    fn procedural_sections_become_generator_blocks() {
        let img = gen_crunch(CrunchParams::small(2)).unwrap();
        let owner = img.functions.iter().find(|f| f.lea_targets().contains(&8)).unwrap().fid;
        let mut cat = BlockCatalog::in_memory();
        let opts = ProtectOptions { procedural_sections: vec![8], ..ProtectOptions::with_versions(2, 3) };
        let p = protect(&img, &[owner].into(), &opts, &mut cat).unwrap();
        assert!(p.manifest.entries.values().any(|e| matches!(e.recipe, Recipe::StaticToProcedural { .. })));
        assert!(p.image.section(8).is_none());
    }

    #[test]
    fn semantic_groups_share_one_residue() {
        let img = gen_crunch(CrunchParams::small(2)).unwrap();
        let mut cat = BlockCatalog::in_memory();
        let sp = protect_semantic(&img, SemanticTransform::ParamReorder, 4, 11, &mut cat).unwrap();
        assert_eq!(sp.groups, vec![1, 2, 3, 4]);
        assert_eq!(cat.groups().len(), if sp.mobile.is_empty() { 0 } else { 4 });
    }
}
