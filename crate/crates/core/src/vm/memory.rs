//! Region-based sparse address space.

use std::cell::Cell;

use super::isa::{Instruction, INSTR_BYTES, NUM_OPCODES};

pub const PAGE: u32 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionKind {
    Section { sid: u32 },
    StaticCode { fid: u32 },
    BlockCode { mapping: u64 },
    BlockSection { mapping: u64, sid: u32 },
    Stack,
}

impl RegionKind {
    pub fn mapping(&self) -> Option<u64> {
        match *self {
            RegionKind::BlockCode { mapping } | RegionKind::BlockSection { mapping, .. } => Some(mapping),
            _ => None,
        }
    }
}

/// Opcode translation for a region interpreted through the ISR intrinsic.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IsrKey {
    /// Encoded opcode byte -> original opcode byte (0xFF = undefined).
    pub inverse: [u8; 256],
    pub mask: u32,
}

#[derive(Clone, Debug)]
pub struct Region {
    pub base: u32,
    pub data: Vec<u8>,
    pub kind: RegionKind,
    /// Decoded instruction slots for executable regions.
    exec: Option<Vec<Option<Instruction>>>,
    isr: Option<IsrKey>,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base as u64 + self.data.len() as u64
    }

    fn contains(&self, addr: u32, len: u32) -> bool {
        addr >= self.base && addr as u64 + len as u64 <= self.end()
    }

    fn decode_slot(&self, slot: usize) -> Option<Instruction> {
        let start = slot * INSTR_BYTES;
        let raw: [u8; 8] = self.data.get(start..start + INSTR_BYTES)?.try_into().ok()?;
        match &self.isr {
            None => Instruction::decode(&raw).ok(),
            Some(key) => {
                let op = key.inverse[raw[0] as usize];
                if op as usize >= NUM_OPCODES {
                    return None;
                }
                let imm = u32::from_le_bytes([raw[4], raw[5], raw[6], raw[7]]) ^ key.mask;
                let plain = imm.to_le_bytes();
                Instruction::decode(&[op, raw[1], raw[2], raw[3], plain[0], plain[1], plain[2], plain[3]]).ok()
            }
        }
    }

    fn rebuild_exec(&mut self) {
        let slots = self.data.len() / INSTR_BYTES;
        let exec = (0..slots).map(|s| self.decode_slot(s)).collect();
        self.exec = Some(exec);
    }

    fn refresh_slots(&mut self, offset: usize, len: usize) {
        if self.exec.is_none() {
            return;
        }
        let first = offset / INSTR_BYTES;
        let last = (offset + len.max(1) - 1) / INSTR_BYTES;
        for slot in first..=last {
            let decoded = self.decode_slot(slot);
            if let Some(exec) = self.exec.as_mut() {
                if let Some(s) = exec.get_mut(slot) {
                    *s = decoded;
                }
            }
        }
    }

    pub fn is_executable(&self) -> bool {
        self.exec.is_some()
    }

    pub fn instruction(&self, slot: usize) -> Option<Option<Instruction>> {
        self.exec.as_ref().and_then(|e| e.get(slot).copied())
    }

    pub fn slot_count(&self) -> usize {
        self.exec.as_ref().map_or(0, |e| e.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemFault {
    Unmapped(u32),
    Unaligned(u32),
}

#[derive(Debug, Default)]
pub struct Memory {
    regions: Vec<Region>,
    last: Cell<usize>,
}

impl Memory {
    pub fn new() -> Self {
        Memory::default()
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, idx: usize) -> &Region {
        &self.regions[idx]
    }

    /// True when `[base, base+len)` intersects no mapped region.
    pub fn is_free(&self, base: u32, len: u32) -> bool {
        let end = base as u64 + len.max(1) as u64;
        !self.regions.iter().any(|r| (base as u64) < r.end() && (r.base as u64) < end)
    }

    pub fn map(&mut self, base: u32, data: Vec<u8>, kind: RegionKind, executable: bool) -> bool {
        if base as u64 + data.len() as u64 > u32::MAX as u64 + 1 || !self.is_free(base, data.len() as u32) {
            return false;
        }
        let mut region = Region { base, data, kind, exec: None, isr: None };
        if executable {
            region.rebuild_exec();
        }
        let pos = self.regions.partition_point(|r| r.base < base);
        self.regions.insert(pos, region);
        self.last.set(0);
        true
    }

    pub fn unmap(&mut self, base: u32) -> Option<Region> {
        let pos = self.regions.iter().position(|r| r.base == base)?;
        self.last.set(0);
        Some(self.regions.remove(pos))
    }

    pub fn find(&self, addr: u32, len: u32) -> Option<usize> {
        let last = self.last.get();
        if let Some(r) = self.regions.get(last) {
            if r.contains(addr, len) {
                return Some(last);
            }
        }
        let pos = self.regions.partition_point(|r| r.base <= addr);
        if pos == 0 {
            return None;
        }
        let idx = pos - 1;
        if self.regions[idx].contains(addr, len) {
            self.last.set(idx);
            Some(idx)
        } else {
            None
        }
    }

    pub fn read_u32(&self, addr: u32) -> Result<u32, MemFault> {
        if !addr.is_multiple_of(4) {
            return Err(MemFault::Unaligned(addr));
        }
        let idx = self.find(addr, 4).ok_or(MemFault::Unmapped(addr))?;
        let r = &self.regions[idx];
        let off = (addr - r.base) as usize;
        Ok(u32::from_le_bytes(r.data[off..off + 4].try_into().expect("4 bytes")))
    }

    pub fn read_u8(&self, addr: u32) -> Result<u8, MemFault> {
        let idx = self.find(addr, 1).ok_or(MemFault::Unmapped(addr))?;
        let r = &self.regions[idx];
        Ok(r.data[(addr - r.base) as usize])
    }

    pub fn write_u32(&mut self, addr: u32, value: u32) -> Result<(), MemFault> {
        if !addr.is_multiple_of(4) {
            return Err(MemFault::Unaligned(addr));
        }
        self.write_bytes(addr, &value.to_le_bytes())
    }

    pub fn write_u8(&mut self, addr: u32, value: u8) -> Result<(), MemFault> {
        self.write_bytes(addr, &[value])
    }

    /// Write within a single region; executable slots are re-decoded.
    pub fn write_bytes(&mut self, addr: u32, bytes: &[u8]) -> Result<(), MemFault> {
        let idx = self.find(addr, bytes.len() as u32).ok_or(MemFault::Unmapped(addr))?;
        let r = &mut self.regions[idx];
        let off = (addr - r.base) as usize;
        r.data[off..off + bytes.len()].copy_from_slice(bytes);
        r.refresh_slots(off, bytes.len());
        Ok(())
    }

    pub fn read_bytes(&self, addr: u32, len: u32) -> Result<&[u8], MemFault> {
        let idx = self.find(addr, len).ok_or(MemFault::Unmapped(addr))?;
        let r = &self.regions[idx];
        let off = (addr - r.base) as usize;
        Ok(&r.data[off..off + len as usize])
    }

    /// Make a data region executable through an ISR opcode map. Returns the
    /// region index.
    pub fn attach_isr(&mut self, base_addr: u32, key: IsrKey) -> Option<usize> {
        let idx = self.find(base_addr, 1)?;
        let r = &mut self.regions[idx];
        if r.isr.as_ref() != Some(&key) || r.exec.is_none() {
            r.isr = Some(key);
            r.rebuild_exec();
        }
        Some(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_maps_are_refused() {
        let mut m = Memory::new();
        assert!(m.map(0x1000, vec![0; 0x1000], RegionKind::Stack, false));
        assert!(!m.map(0x1800, vec![0; 16], RegionKind::Stack, false));
        assert!(m.map(0x2000, vec![0; 16], RegionKind::Stack, false));
        assert!(!m.map(0x0FF0, vec![0; 0x20], RegionKind::Stack, false));
    }

    #[test]
    fn reads_and_writes() {
        let mut m = Memory::new();
        m.map(0x1000, vec![0; 64], RegionKind::Section { sid: 0 }, false);
        m.write_u32(0x1004, 0xDEAD_BEEF).unwrap();
        assert_eq!(m.read_u32(0x1004).unwrap(), 0xDEAD_BEEF);
        assert_eq!(m.read_u8(0x1007).unwrap(), 0xDE);
        assert_eq!(m.read_u32(0x1002), Err(MemFault::Unaligned(0x1002)));
        assert_eq!(m.read_u32(0x1040), Err(MemFault::Unmapped(0x1040)));
        assert_eq!(m.read_u32(0x103E & !3), Ok(0));
    }
}
