//! A toy 16-bit table cipher and its white-box table form.
//!
//! Rounds: `s ^= k[r]`, AES S-box on both bytes, rotate left by 5; three
//! rounds, then a final whitening with `k[4]`.

use super::EngineError;
use crate::vm::hash::fnv1a64;
use crate::vm::isa::ins;
use crate::vm::{FunctionDef, Instruction, MobileBlockPayload, Prng};

pub const TABLES: usize = 5;
pub const TABLE_ENTRIES: usize = 1 << 16;
pub const TABLE_BYTES: usize = TABLE_ENTRIES * 2;
pub const WBC_PAYLOAD_DATA_BYTES: usize = TABLES * TABLE_BYTES;
pub const ROUNDS: usize = 4;

pub type WbcKey = [u16; TABLES];

#[rustfmt::skip]
pub const SBOX: [u8; 256] = [
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b, 0xfe, 0xd7, 0xab, 0x76,
    0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0, 0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0,
    0xb7, 0xfd, 0x93, 0x26, 0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2, 0xeb, 0x27, 0xb2, 0x75,
    0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0, 0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84,
    0x53, 0xd1, 0x00, 0xed, 0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f, 0x50, 0x3c, 0x9f, 0xa8,
    0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5, 0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2,
    0xcd, 0x0c, 0x13, 0xec, 0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14, 0xde, 0x5e, 0x0b, 0xdb,
    0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c, 0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79,
    0xe7, 0xc8, 0x37, 0x6d, 0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f, 0x4b, 0xbd, 0x8b, 0x8a,
    0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e, 0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e,
    0xe1, 0xf8, 0x98, 0x11, 0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f, 0xb0, 0x54, 0xbb, 0x16,
];

fn inverse_sbox() -> [u8; 256] {
    let mut inv = [0u8; 256];
    for (i, v) in SBOX.iter().enumerate() {
        inv[*v as usize] = i as u8;
    }
    inv
}

pub fn rotl16(x: u16, n: u32) -> u16 {
    x.rotate_left(n)
}

fn sbox2(s: u16) -> u16 {
    (SBOX[(s >> 8) as usize] as u16) << 8 | SBOX[(s & 0xFF) as usize] as u16
}

fn round(s: u16, k: u16) -> u16 {
    rotl16(sbox2(s ^ k), 5)
}

pub fn wbc_reference_encrypt(key: &WbcKey, pt: u16) -> u16 {
    let mut s = pt;
    for k in &key[..ROUNDS] {
        s = round(s, *k);
    }
    s ^ key[ROUNDS]
}

pub fn wbc_reference_decrypt(key: &WbcKey, ct: u16) -> u16 {
    let inv = inverse_sbox();
    let mut s = ct ^ key[ROUNDS];
    for k in key[..ROUNDS].iter().rev() {
        let t = s.rotate_right(5);
        s = ((inv[(t >> 8) as usize] as u16) << 8 | inv[(t & 0xFF) as usize] as u16) ^ k;
    }
    s
}

pub fn key_fingerprint(key: &WbcKey) -> u64 {
    let bytes: Vec<u8> = key.iter().flat_map(|k| k.to_le_bytes()).collect();
    fnv1a64(&bytes)
}

pub fn random_key(prng: &mut Prng) -> WbcKey {
    std::array::from_fn(|_| prng.next_u32() as u16)
}

#[derive(Clone, PartialEq, Eq)]
pub struct WhiteBoxTables {
    pub tables: [Vec<u16>; TABLES],
    pub encoded: bool,
    /// Server-side bookkeeping only; never part of a payload.
    pub key_fingerprint: u64,
}

impl std::fmt::Debug for WhiteBoxTables {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WhiteBoxTables")
            .field("encoded", &self.encoded)
            .field("key_fingerprint", &format_args!("{:016x}", self.key_fingerprint))
            .finish_non_exhaustive()
    }
}

fn random_permutation(prng: &mut Prng) -> Vec<u16> {
    let mut p: Vec<u16> = (0..=u16::MAX).collect();
    prng.shuffle(&mut p);
    p
}

fn invert(p: &[u16]) -> Vec<u16> {
    let mut inv = vec![0u16; p.len()];
    for (i, v) in p.iter().enumerate() {
        inv[*v as usize] = i as u16;
    }
    inv
}

pub fn wbc_generate(key: &WbcKey, seed: u64, with_encodings: bool) -> WhiteBoxTables {
    let mut tables: [Vec<u16>; TABLES] = std::array::from_fn(|r| {
        (0..TABLE_ENTRIES).map(|s| if r < ROUNDS { round(s as u16, key[r]) } else { s as u16 ^ key[ROUNDS] }).collect()
    });
    if with_encodings {
        let mut prng = Prng::new(seed);
        let perms: Vec<Vec<u16>> = (0..ROUNDS).map(|_| random_permutation(&mut prng)).collect();
        let invs: Vec<Vec<u16>> = perms.iter().map(|p| invert(p)).collect();
        // T'_r = P_{r+1} . T_r . P_r^{-1}, with P_0 = P_5 = identity.
        for r in 0..TABLES {
            let plain = &tables[r];
            let encoded: Vec<u16> = (0..TABLE_ENTRIES)
                .map(|s| {
                    let input = if r == 0 { s as u16 } else { invs[r - 1][s] };
                    let v = plain[input as usize];
                    if r < ROUNDS {
                        perms[r][v as usize]
                    } else {
                        v
                    }
                })
                .collect();
            tables[r] = encoded;
        }
    }
    WhiteBoxTables { tables, encoded: with_encodings, key_fingerprint: key_fingerprint(key) }
}

impl WhiteBoxTables {
    pub fn evaluate(&self, pt: u16) -> u16 {
        self.tables.iter().fold(pt, |s, t| t[s as usize])
    }

    pub fn table_bytes(&self, r: usize) -> Vec<u8> {
        self.tables[r].iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// The evaluator block: a function of one argument (R0) and five table
/// sections it owns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WbcTemplate {
    pub fid: u32,
    pub table_sids: [u32; TABLES],
}

impl WbcTemplate {
    /// Key-independent evaluator: five chained byte-pair lookups.
    pub fn evaluator_code(&self) -> Vec<Instruction> {
        let mut code = vec![ins::push(1), ins::push(2), ins::push(3), ins::loadi(3, 0xFFFF), ins::and(0, 0, 3)];
        for sid in self.table_sids {
            code.extend([
                ins::lea(1, sid),
                ins::add(1, 1, 0),
                ins::add(1, 1, 0),
                ins::loadb(0, 1, 0),
                ins::loadb(2, 1, 1),
                ins::loadi(3, 8),
                ins::shl(2, 2, 3),
                ins::add(0, 0, 2),
            ]);
        }
        code.extend([ins::pop(3), ins::pop(2), ins::pop(1), ins::ret()]);
        code
    }

    pub fn function(&self, name: &str) -> FunctionDef {
        FunctionDef::new(self.fid, name, 1, self.evaluator_code())
    }
}

/// Package tables as a fresh block version of the evaluator.
pub fn wbc_emit_block(tables: &WhiteBoxTables, template: &WbcTemplate) -> MobileBlockPayload {
    MobileBlockPayload {
        block_id: template.fid,
        version_id: 0,
        group_id: 0,
        entry_fid: template.fid,
        param_count: 1,
        code: crate::vm::isa::encode_code(&template.evaluator_code()),
        owned_sections: template.table_sids.iter().enumerate().map(|(r, sid)| (*sid, tables.table_bytes(r))).collect(),
    }
}

/// Count little-endian occurrences of `word` at any byte offset.
pub fn count_word_occurrences(bytes: &[u8], word: u16) -> usize {
    let w = word.to_le_bytes();
    bytes.windows(2).filter(|p| p[0] == w[0] && p[1] == w[1]).count()
}

pub fn validate_key_secrecy(payload: &[u8], key: &WbcKey) -> Result<(), EngineError> {
    let bound = payload.len().div_ceil(TABLE_ENTRIES) + 3;
    for k in key {
        let n = count_word_occurrences(payload, *k);
        if n > bound {
            return Err(EngineError::Internal(format!("key word {k:#06x} occurs {n} times (bound {bound})")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation() {
        assert_eq!(rotl16(0x8000, 1), 0x0001);
        assert_eq!(rotl16(0x1234, 16), 0x1234);
    }

    #[test]
    fn table_sizes() {
        let t = wbc_generate(&[1, 2, 3, 4, 5], 9, false);
        assert_eq!((0..TABLES).map(|r| t.table_bytes(r).len()).sum::<usize>(), 655_360);
    }

    #[test]
    fn evaluator_has_no_key_constants() {
        let tpl = WbcTemplate { fid: 4, table_sids: [10, 11, 12, 13, 14] };
        let immediates: Vec<u32> =
            tpl.evaluator_code().iter().filter(|i| i.op == crate::vm::Opcode::LoadI).map(|i| i.imm).collect();
        assert_eq!(immediates, vec![0xFFFF, 8, 8, 8, 8, 8]);
    }
}
