//! `MBLK` mobile block container.
//!
//! Layout (little-endian): magic `MBLK`, format version `u16`, `block_id u32`,
//! `version_id u64`, `group_id u32`, `entry_fid u32`, `param_count u8`,
//! `code_len u32`, code bytes, `nsections u16`, then per section
//! `sid u32`, `len u32`, bytes. The expected hash of a payload is FNV-1a over
//! the whole container.

use thiserror::Error;

use super::hash::fnv1a64;
use crate::wire::{PutLe, Reader, WireError};

pub const MBLK_MAGIC: &[u8; 4] = b"MBLK";
pub const MBLK_VERSION: u16 = 1;
/// Bytes of fixed header before the code (magic through `code_len`).
pub const MBLK_FIXED_HEADER: usize = 4 + 2 + 4 + 8 + 4 + 4 + 1 + 4;
/// Bytes of the `nsections` field after the code.
pub const MBLK_SECTION_COUNT: usize = 2;
/// Per-section header bytes (`sid`, `len`).
pub const MBLK_SECTION_HEADER: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MobileBlockPayload {
    pub block_id: u32,
    pub version_id: u64,
    pub group_id: u32,
    pub entry_fid: u32,
    pub param_count: u8,
    /// Encoded instructions of exactly one function.
    pub code: Vec<u8>,
    pub owned_sections: Vec<(u32, Vec<u8>)>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PayloadError {
    #[error("bad MBLK magic")]
    BadMagic,
    #[error("unsupported MBLK version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated MBLK container")]
    Truncated,
    #[error("MBLK length mismatch: {0} trailing bytes")]
    LengthMismatch(usize),
    #[error("MBLK code length {0} is not a multiple of 8")]
    BadCodeLength(usize),
}

impl From<WireError> for PayloadError {
    fn from(_: WireError) -> Self {
        PayloadError::Truncated
    }
}

impl MobileBlockPayload {
    pub fn pack(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.packed_len());
        out.extend_from_slice(MBLK_MAGIC);
        out.put_u16(MBLK_VERSION);
        out.put_u32(self.block_id);
        out.put_u64(self.version_id);
        out.put_u32(self.group_id);
        out.put_u32(self.entry_fid);
        out.put_u8(self.param_count);
        out.put_u32(self.code.len() as u32);
        out.extend_from_slice(&self.code);
        out.put_u16(self.owned_sections.len() as u16);
        for (sid, bytes) in &self.owned_sections {
            out.put_u32(*sid);
            out.put_u32(bytes.len() as u32);
            out.extend_from_slice(bytes);
        }
        out
    }

    pub fn packed_len(&self) -> usize {
        MBLK_FIXED_HEADER
            + self.code.len()
            + MBLK_SECTION_COUNT
            + self.owned_sections.iter().map(|(_, b)| MBLK_SECTION_HEADER + b.len()).sum::<usize>()
    }

    pub fn unpack(bytes: &[u8]) -> Result<Self, PayloadError> {
        let mut r = Reader::new(bytes);
        if r.bytes(4)? != MBLK_MAGIC {
            return Err(PayloadError::BadMagic);
        }
        let version = r.u16()?;
        if version != MBLK_VERSION {
            return Err(PayloadError::UnsupportedVersion(version));
        }
        let block_id = r.u32()?;
        let version_id = r.u64()?;
        let group_id = r.u32()?;
        let entry_fid = r.u32()?;
        let param_count = r.u8()?;
        let code_len = r.u32()? as usize;
        if !code_len.is_multiple_of(8) {
            return Err(PayloadError::BadCodeLength(code_len));
        }
        let code = r.bytes(code_len)?.to_vec();
        let nsections = r.u16()? as usize;
        let mut owned_sections = Vec::with_capacity(nsections);
        for _ in 0..nsections {
            let sid = r.u32()?;
            let len = r.u32()? as usize;
            owned_sections.push((sid, r.bytes(len)?.to_vec()));
        }
        if r.remaining() != 0 {
            return Err(PayloadError::LengthMismatch(r.remaining()));
        }
        Ok(MobileBlockPayload { block_id, version_id, group_id, entry_fid, param_count, code, owned_sections })
    }

    /// FNV-1a of the packed container.
    pub fn expected_hash(&self) -> u64 {
        fnv1a64(&self.pack())
    }

    pub fn section(&self, sid: u32) -> Option<&[u8]> {
        self.owned_sections.iter().find(|(s, _)| *s == sid).map(|(_, b)| b.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::isa::{encode_code, ins};

    fn sample() -> MobileBlockPayload {
        MobileBlockPayload {
            block_id: 7,
            version_id: 3,
            group_id: 2,
            entry_fid: 7,
            param_count: 2,
            code: encode_code(&[ins::add(0, 0, 1), ins::ret()]),
            owned_sections: vec![(4, vec![9, 8, 7]), (5, vec![])],
        }
    }

    #[test]
    fn pack_unpack_round_trip() {
        let p = sample();
        let bytes = p.pack();
        assert_eq!(bytes.len(), p.packed_len());
        assert_eq!(MobileBlockPayload::unpack(&bytes).unwrap(), p);
    }

    #[test]
    fn empty_sections_give_zero_count() {
        let mut p = sample();
        p.owned_sections.clear();
        let bytes = p.pack();
        let n = MBLK_FIXED_HEADER + p.code.len();
        assert_eq!(&bytes[n..n + 2], &[0, 0]);
        assert_eq!(bytes.len(), n + 2);
    }

    #[test]
    fn every_byte_flip_changes_hash() {
        let bytes = sample().pack();
        let base = fnv1a64(&bytes);
        for pos in 0..bytes.len() {
            for bit in 0..8 {
                let mut b = bytes.clone();
                b[pos] ^= 1 << bit;
                assert_ne!(fnv1a64(&b), base, "flip at {pos} bit {bit}");
            }
        }
    }

    #[test]
    fn malformed_containers_are_rejected() {
        let bytes = sample().pack();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(MobileBlockPayload::unpack(&bad), Err(PayloadError::BadMagic));
        assert_eq!(MobileBlockPayload::unpack(&bytes[..bytes.len() - 1]), Err(PayloadError::Truncated));
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(MobileBlockPayload::unpack(&long), Err(PayloadError::LengthMismatch(1)));
    }

    proptest::proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(data in proptest::collection::vec(proptest::num::u8::ANY, 0..128)) {
            let _ = MobileBlockPayload::unpack(&data);
        }
    }
}
