//! Block extraction: data accessibility, section ownership and the split of
//! an image into a static part plus mobile block payloads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vm::isa::encode_code;
use crate::vm::{MobileBlockPayload, ProgramImage, RelocationRecord};

/// Engine responsible for renewing a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineHint {
    Syntactic,
    Semantic,
    StaticToProcedural,
    Wbc,
    Isr,
    Guard,
}

impl EngineHint {
    pub const ALL: [EngineHint; 6] = [
        EngineHint::Syntactic,
        EngineHint::Semantic,
        EngineHint::StaticToProcedural,
        EngineHint::Wbc,
        EngineHint::Isr,
        EngineHint::Guard,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EngineHint::Syntactic => "syntactic",
            EngineHint::Semantic => "semantic",
            EngineHint::StaticToProcedural => "static_to_procedural",
            EngineHint::Wbc => "wbc",
            EngineHint::Isr => "isr",
            EngineHint::Guard => "guard",
        }
    }
}

impl fmt::Display for EngineHint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EngineHint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EngineHint::ALL.into_iter().find(|e| e.as_str() == s).ok_or_else(|| format!("unknown engine '{s}'"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub fid: u32,
    pub make_mobile: bool,
    pub data_mobility: bool,
    #[serde(default)]
    pub engine_hint: Option<EngineHint>,
}

impl Annotation {
    pub fn mobile(fid: u32) -> Self {
        Annotation { fid, make_mobile: true, data_mobility: false, engine_hint: None }
    }

    pub fn mobile_with_data(fid: u32) -> Self {
        Annotation { fid, make_mobile: true, data_mobility: true, engine_hint: None }
    }

    pub fn with_engine(mut self, hint: EngineHint) -> Self {
        self.engine_hint = Some(hint);
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractError {
    #[error("annotation for unknown function {0}")]
    UnknownFunction(u32),
    #[error("annotation for function {0} asks for data mobility without code mobility")]
    DataWithoutCode(u32),
    #[error("function {0} is annotated twice")]
    DuplicateAnnotation(u32),
    #[error("function {0} has no code to extract")]
    EmptyFunction(u32),
    #[error("invalid input image: {0}")]
    InvalidImage(String),
}

/// Why a section referenced by data-mobile code stays in the static image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExtractWarning {
    Accessible { fid: u32, sid: u32, exported: bool },
    Shared { sid: u32, fids: Vec<u32> },
    ReferencedFromOutside { fid: u32, sid: u32 },
}

impl fmt::Display for ExtractWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtractWarning::Accessible { fid, sid, exported: true } => {
                write!(f, "section {sid} used by f{fid} is exported and stays static")
            }
            ExtractWarning::Accessible { fid, sid, exported: false } => {
                write!(f, "section {sid} used by f{fid} is reachable from static code and stays static")
            }
            ExtractWarning::Shared { sid, fids } => {
                write!(f, "section {sid} is shared by mobile functions {fids:?} and stays static")
            }
            ExtractWarning::ReferencedFromOutside { fid, sid } => {
                write!(f, "section {sid} used by f{fid} is referenced from unreachable data and stays static")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExtractionResult {
    pub static_image: ProgramImage,
    pub blocks: Vec<MobileBlockPayload>,
    pub ownership: BTreeMap<u32, Vec<u32>>,
    pub annotations: Vec<Annotation>,
    pub warnings: Vec<ExtractWarning>,
}

impl ExtractionResult {
    pub fn block(&self, block_id: u32) -> Option<&MobileBlockPayload> {
        self.blocks.iter().find(|b| b.block_id == block_id)
    }
}

fn data_edges(img: &ProgramImage) -> BTreeMap<u32, BTreeSet<u32>> {
    let mut edges: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for (src, _, dst) in img.data_relocs() {
        edges.entry(src).or_default().insert(dst);
    }
    edges
}

fn closure(start: impl IntoIterator<Item = u32>, edges: &BTreeMap<u32, BTreeSet<u32>>) -> BTreeSet<u32> {
    let mut seen = BTreeSet::new();
    let mut work: Vec<u32> = start.into_iter().collect();
    while let Some(s) = work.pop() {
        if seen.insert(s) {
            if let Some(next) = edges.get(&s) {
                work.extend(next.iter().copied());
            }
        }
    }
    seen
}

fn lea_sources(img: &ProgramImage) -> BTreeMap<u32, BTreeSet<u32>> {
    let mut out: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for r in &img.relocations {
        if let RelocationRecord::Code { fid, sid, .. } = *r {
            out.entry(fid).or_default().insert(sid);
        }
    }
    out
}

/// Sections whose address can be formed without running any function in
/// `mobile_fids`: exported sections, sections LEA'd by other code, and
/// everything reachable from those through data relocations.
pub fn accessible_sections(img: &ProgramImage, mobile_fids: &BTreeSet<u32>) -> BTreeSet<u32> {
    let mut roots: BTreeSet<u32> = img.sections.iter().filter(|s| s.exported).map(|s| s.sid).collect();
    for (fid, sids) in lea_sources(img) {
        if !mobile_fids.contains(&fid) {
            roots.extend(sids);
        }
    }
    closure(roots, &data_edges(img))
}

/// Sections each function in `mobile_fids` may carry along as mobile data.
///
/// A section belongs to `f` when it is only reachable through `f`'s own
/// `LEA`s (possibly followed by data relocations), and every data relocation
/// pointing at it comes from another section owned by `f`.
pub fn compute_owned_sections(img: &ProgramImage, mobile_fids: &BTreeSet<u32>) -> BTreeMap<u32, Vec<u32>> {
    let edges = data_edges(img);
    let accessible = accessible_sections(img, mobile_fids);
    let leas = lea_sources(img);
    let per_fid: BTreeMap<u32, BTreeSet<u32>> =
        mobile_fids.iter().map(|f| (*f, closure(leas.get(f).into_iter().flatten().copied(), &edges))).collect();
    let mut incoming: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for (src, dsts) in &edges {
        for d in dsts {
            incoming.entry(*d).or_default().insert(*src);
        }
    }

    let mut out = BTreeMap::new();
    for (&f, reach) in &per_fid {
        let mut owned: BTreeSet<u32> = reach
            .iter()
            .copied()
            .filter(|s| !accessible.contains(s))
            .filter(|s| per_fid.iter().all(|(g, r)| *g == f || !r.contains(s)))
            .collect();
        loop {
            let before = owned.len();
            let snapshot = owned.clone();
            owned.retain(|s| incoming.get(s).is_none_or(|srcs| srcs.iter().all(|src| snapshot.contains(src))));
            if owned.len() == before {
                break;
            }
        }
        out.insert(f, owned.into_iter().collect());
    }
    out
}

/// Split `img` into a static image and initial block payloads.
pub fn extract(img: &ProgramImage, annotations: &[Annotation]) -> Result<ExtractionResult, ExtractError> {
    img.validate().map_err(|e| ExtractError::InvalidImage(e.to_string()))?;
    let mut seen = BTreeSet::new();
    for a in annotations {
        let f = img.function(a.fid).ok_or(ExtractError::UnknownFunction(a.fid))?;
        if a.data_mobility && !a.make_mobile {
            return Err(ExtractError::DataWithoutCode(a.fid));
        }
        if !seen.insert(a.fid) {
            return Err(ExtractError::DuplicateAnnotation(a.fid));
        }
        if a.make_mobile && f.code.is_empty() {
            return Err(ExtractError::EmptyFunction(a.fid));
        }
    }
    let mobile: BTreeSet<u32> = annotations.iter().filter(|a| a.make_mobile).map(|a| a.fid).collect();
    let data_mobile: BTreeSet<u32> = annotations.iter().filter(|a| a.data_mobility).map(|a| a.fid).collect();
    let ownership = compute_owned_sections(img, &data_mobile);
    let warnings = ownership_warnings(img, &data_mobile, &ownership);

    let owner_of: BTreeMap<u32, u32> =
        ownership.iter().flat_map(|(f, sids)| sids.iter().map(move |s| (*s, *f))).collect();

    let mut blocks = Vec::new();
    for f in img.functions.iter().filter(|f| mobile.contains(&f.fid)) {
        let owned_sections = ownership
            .get(&f.fid)
            .into_iter()
            .flatten()
            .map(|sid| (*sid, img.section(*sid).expect("validated").bytes.clone()))
            .collect();
        blocks.push(MobileBlockPayload {
            block_id: f.fid,
            version_id: 0,
            group_id: 0,
            entry_fid: f.fid,
            param_count: f.param_count,
            code: encode_code(&f.code),
            owned_sections,
        });
    }

    let mut static_image = img.clone();
    for f in static_image.functions.iter_mut().filter(|f| mobile.contains(&f.fid)) {
        f.code.clear();
    }
    for s in static_image.sections.iter_mut().filter(|s| owner_of.contains_key(&s.sid)) {
        s.bytes.clear();
        s.mobile_owned = true;
    }
    static_image.relocations.retain(|r| match *r {
        RelocationRecord::Code { fid, .. } => !mobile.contains(&fid),
        RelocationRecord::Data { .. } => true,
    });
    static_image.layouts.retain(|l| l.instances.iter().all(|s| !owner_of.contains_key(s)));
    for l in &mut static_image.layouts {
        l.accesses.retain(|(fid, _)| !mobile.contains(fid));
    }

    let ownership = ownership.into_iter().filter(|(_, v)| !v.is_empty()).collect();
    Ok(ExtractionResult { static_image, blocks, ownership, annotations: annotations.to_vec(), warnings })
}

fn ownership_warnings(
    img: &ProgramImage,
    data_mobile: &BTreeSet<u32>,
    ownership: &BTreeMap<u32, Vec<u32>>,
) -> Vec<ExtractWarning> {
    let accessible = accessible_sections(img, data_mobile);
    let leas = lea_sources(img);
    let mut users: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for f in data_mobile {
        for s in leas.get(f).into_iter().flatten() {
            users.entry(*s).or_default().push(*f);
        }
    }
    let mut out = Vec::new();
    for (sid, fids) in users {
        if ownership.values().any(|v| v.contains(&sid)) {
            continue;
        }
        if accessible.contains(&sid) {
            let exported = img.section(sid).is_some_and(|s| s.exported);
            out.extend(fids.iter().map(|fid| ExtractWarning::Accessible { fid: *fid, sid, exported }));
        } else if fids.len() > 1 {
            out.push(ExtractWarning::Shared { sid, fids });
        } else {
            out.push(ExtractWarning::ReferencedFromOutside { fid: fids[0], sid });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::isa::ins;
    use crate::vm::{DataSection, FunctionDef};

    fn img(functions: Vec<FunctionDef>, sections: Vec<DataSection>, data: &[(u32, u32, u32)]) -> ProgramImage {
        let mut img = ProgramImage { entry_fid: functions[0].fid, functions, sections, ..Default::default() };
        img.relocations =
            data.iter().map(|&(sid, offset, target)| RelocationRecord::Data { sid, offset, target }).collect();
        img.rebuild_code_relocs();
        img
    }

    fn set(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    fn leaf(fid: u32, sids: &[u32]) -> FunctionDef {
        let mut code: Vec<_> = sids.iter().map(|s| ins::lea(1, *s)).collect();
        code.push(ins::ret());
        FunctionDef::new(fid, format!("f{fid}"), 0, code)
    }

    #[test]
    fn exported_section_is_accessible() {
        let i = img(vec![leaf(0, &[])], vec![DataSection::new(0, "s0", vec![0; 4]).exported()], &[]);
        assert_eq!(accessible_sections(&i, &set(&[])), set(&[0]));
    }

    #[test]
    fn mobile_lea_does_not_make_accessible() {
        let i = img(vec![leaf(0, &[]), leaf(2, &[1])], vec![DataSection::new(1, "s1", vec![0; 4])], &[]);
        assert!(accessible_sections(&i, &set(&[2])).is_empty());
        assert_eq!(accessible_sections(&i, &set(&[])), set(&[1]));
    }

    #[test]
    fn data_relocs_propagate_accessibility() {
        let i = img(
            vec![leaf(0, &[])],
            vec![DataSection::new(0, "s0", vec![0; 4]).exported(), DataSection::new(2, "s2", vec![0; 4])],
            &[(0, 0, 2)],
        );
        assert_eq!(accessible_sections(&i, &set(&[])), set(&[0, 2]));
    }

    #[test]
    fn sole_user_owns_and_shared_stays_static() {
        let i = img(
            vec![leaf(0, &[]), leaf(2, &[1, 3]), leaf(4, &[3])],
            vec![DataSection::new(1, "s1", vec![0; 4]), DataSection::new(3, "s3", vec![0; 4])],
            &[],
        );
        let own = compute_owned_sections(&i, &set(&[2, 4]));
        assert_eq!(own[&2], vec![1]);
        assert!(own[&4].is_empty());
    }

    #[test]
    fn ownership_follows_data_relocs_from_owned_sections() {
        let i = img(
            vec![leaf(0, &[]), leaf(1, &[10])],
            vec![
                DataSection::new(10, "a", vec![0; 4]),
                DataSection::new(11, "b", vec![0; 4]),
                DataSection::new(12, "junk", vec![0; 4]),
                DataSection::new(13, "c", vec![0; 4]),
            ],
            &[(10, 0, 11), (10, 0, 13), (12, 0, 13)],
        );
        assert_eq!(compute_owned_sections(&i, &set(&[1]))[&1], vec![10, 11]);
    }

    #[test]
    fn no_annotations_is_identity() {
        let i = img(vec![leaf(0, &[1])], vec![DataSection::new(1, "s", vec![1, 2, 3, 4])], &[]);
        let r = extract(&i, &[]).unwrap();
        assert_eq!(r.static_image, i);
        assert!(r.blocks.is_empty());
    }

    #[test]
    fn mobile_leaf_without_data() {
        let i = img(vec![leaf(0, &[]), leaf(1, &[])], vec![], &[]);
        let r = extract(&i, &[Annotation::mobile(1)]).unwrap();
        assert_eq!(r.blocks.len(), 1);
        assert!(r.static_image.function(1).unwrap().is_mobile_stub());
        assert_eq!(r.blocks[0].code, encode_code(&i.function(1).unwrap().code));
        r.static_image.validate().unwrap();
    }

    #[test]
    fn exported_section_of_mobile_entry_is_reported() {
        let i = img(vec![leaf(0, &[1])], vec![DataSection::new(1, "s", vec![0; 4]).exported()], &[]);
        let r = extract(&i, &[Annotation::mobile_with_data(0)]).unwrap();
        assert!(r.ownership.is_empty());
        assert_eq!(r.warnings, vec![ExtractWarning::Accessible { fid: 0, sid: 1, exported: true }]);
        assert!(!r.static_image.section(1).unwrap().mobile_owned);
    }

    #[test]
    fn bad_annotations_are_errors() {
        let i = img(vec![leaf(0, &[])], vec![], &[]);
        assert_eq!(extract(&i, &[Annotation::mobile(9)]), Err(ExtractError::UnknownFunction(9)));
        let bad = Annotation { fid: 0, make_mobile: false, data_mobility: true, engine_hint: None };
        assert_eq!(extract(&i, &[bad]), Err(ExtractError::DataWithoutCode(0)));
    }

    #[test]
    fn engine_hint_names_round_trip() {
        for e in EngineHint::ALL {
            assert_eq!(e.as_str().parse::<EngineHint>().unwrap(), e);
        }
    }
}
