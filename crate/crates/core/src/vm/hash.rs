//! 64-bit FNV-1a.

pub const FNV_OFFSET_BASIS: u64 = 14_695_981_039_346_656_037;
pub const FNV_PRIME: u64 = 1_099_511_628_211;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    Fnv1a64::new().chain(bytes).finish()
}

/// Incremental FNV-1a state.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a64(u64);

impl Fnv1a64 {
    pub fn new() -> Self {
        Fnv1a64(FNV_OFFSET_BASIS)
    }

    pub fn byte(&mut self, b: u8) {
        self.0 ^= b as u64;
        self.0 = self.0.wrapping_mul(FNV_PRIME);
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.byte(b);
        }
    }

    pub fn chain(mut self, bytes: &[u8]) -> Self {
        self.update(bytes);
        self
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a64 {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    // Independent transcription of the published algorithm.
    fn reference(bytes: &[u8]) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in bytes {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }

    #[test]
    fn empty_is_offset_basis() {
        assert_eq!(fnv1a64(b""), 14_695_981_039_346_656_037);
    }

    #[test]
    fn single_a() {
        assert_eq!(fnv1a64(b"a"), reference(b"a"));
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn no_collisions_on_corpus() {
        let mut seen: HashMap<u64, Vec<u8>> = HashMap::new();
        let mut corpus: Vec<Vec<u8>> = Vec::new();
        for a in 0..=255u8 {
            corpus.push(vec![a]);
            for b in (0..=255u8).step_by(3) {
                corpus.push(vec![a, b]);
            }
        }
        for i in 0..2000u32 {
            corpus.push(i.to_le_bytes().repeat((i % 5 + 1) as usize));
        }
        for item in corpus {
            let h = fnv1a64(&item);
            assert_eq!(h, reference(&item));
            if let Some(prev) = seen.insert(h, item.clone()) {
                assert_eq!(prev, item, "collision");
            }
        }
    }
}
