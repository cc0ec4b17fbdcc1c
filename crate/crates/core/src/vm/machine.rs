//! Deterministic interpreter with mobile-block stubs.

use std::collections::{BTreeMap, HashMap};

use thiserror::Error;

use super::gmrt::{Gmrt, GmrtEntry};
use super::image::ProgramImage;
use super::isa::{sys, Instruction, Opcode, ISR_INTRINSIC_FID, NUM_OPCODES, SP};
use super::memory::{IsrKey, MemFault, Memory, RegionKind, PAGE};
use super::payload::MobileBlockPayload;
use super::prng::Prng;

pub const SECTION_BASE: u32 = 0x0001_0000;
pub const CODE_BASE: u32 = 0x0100_0000;
pub const HEAP_BASE: u32 = 0x4000_0000;
pub const HEAP_END: u32 = 0x7000_0000;
pub const STACK_TOP: u32 = 0x7FFF_FFF0;
pub const STACK_SIZE: u32 = 256 * 1024;
pub const DEFAULT_BUDGET: u64 = 1_000_000_000;
/// Interpreted instructions per virtual millisecond.
pub const INSTRUCTIONS_PER_MS: u64 = 10_000;
/// Size of an ISR opcode map section: 32-byte table plus a `u64` mask.
pub const OPMAP_LEN: usize = 40;

const RETURN_TO_HOST: u32 = 0;
const MAX_PLACEMENT_TRIES: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VmError {
    #[error("LEA of section {sid} before its owning block was downloaded")]
    DownloadBeforeUseViolation { sid: u32 },
    #[error("mobile block {block_id} unavailable: {reason}")]
    MobileBlockUnavailable { block_id: u32, reason: String },
    #[error("instruction budget of {0} exhausted")]
    BudgetExhausted(u64),
    #[error("invalid instruction at {pc:#010x}")]
    InvalidOpcode { pc: u32 },
    #[error("unaligned access at {0:#010x}")]
    Unaligned(u32),
    #[error("access to unmapped address {0:#010x}")]
    OutOfRange(u32),
    #[error("call to unknown function {0}")]
    UnknownFunction(u32),
    #[error("LEA of unknown section {0}")]
    UnknownSection(u32),
    #[error("unknown system call {0}")]
    UnknownSyscall(u32),
    #[error("malformed ISR opcode map at {0:#010x}")]
    BadOpcodeMap(u32),
    #[error("image does not fit the address space: {0}")]
    AddressSpace(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("malformed payload for block {block_id}: {reason}")]
    PayloadMalformed { block_id: u32, reason: String },
    #[error("block {0} is already loaded")]
    AlreadyLoaded(u32),
    #[error("block {0} is not a mobile block of this image")]
    UnknownBlock(u32),
    #[error("mobile heap exhausted")]
    HeapExhausted,
    #[error("host failure: {0}")]
    Host(String),
}

impl From<MemFault> for VmError {
    fn from(f: MemFault) -> Self {
        match f {
            MemFault::Unaligned(a) => VmError::Unaligned(a),
            MemFault::Unmapped(a) => VmError::OutOfRange(a),
        }
    }
}

/// A block delivered by the host together with the time spent obtaining it.
#[derive(Clone, Debug)]
pub struct FetchedBlock {
    pub payload: MobileBlockPayload,
    pub wait_ms: u64,
}

/// Resolver contract between the interpreter and whatever delivers blocks.
pub trait MobileHost {
    /// Called when control enters a block whose GMRT entry is not `Loaded`.
    fn fetch_block(&mut self, block_id: u32, now_ms: u64) -> Result<FetchedBlock, VmError>;

    /// Called at `CALL`/`RET` boundaries, at most once per virtual millisecond.
    /// Flushes and attestation requests are applied here.
    fn service(&mut self, _vm: &mut Vm) -> Result<(), VmError> {
        Ok(())
    }
}

/// Host that refuses every download.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullHost;

impl MobileHost for NullHost {
    fn fetch_block(&mut self, block_id: u32, _now_ms: u64) -> Result<FetchedBlock, VmError> {
        Err(VmError::MobileBlockUnavailable { block_id, reason: "no resolver".into() })
    }
}

/// Host serving payloads from memory, counting requests.
#[derive(Debug, Default, Clone)]
pub struct StaticHost {
    pub blocks: BTreeMap<u32, MobileBlockPayload>,
    pub requests: Vec<u32>,
}

impl StaticHost {
    pub fn new(blocks: impl IntoIterator<Item = MobileBlockPayload>) -> Self {
        StaticHost { blocks: blocks.into_iter().map(|b| (b.block_id, b)).collect(), requests: Vec::new() }
    }
}

impl MobileHost for StaticHost {
    fn fetch_block(&mut self, block_id: u32, _now_ms: u64) -> Result<FetchedBlock, VmError> {
        self.requests.push(block_id);
        self.blocks
            .get(&block_id)
            .cloned()
            .map(|payload| FetchedBlock { payload, wait_ms: 0 })
            .ok_or_else(|| VmError::MobileBlockUnavailable { block_id, reason: "unknown block".into() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SectionSlot {
    Mapped(u32),
    Unmapped,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FunctionSlot {
    StaticCode(u32),
    MobileStub(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlushOutcome {
    Flushed,
    Deferred,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FunctionProfile {
    pub call_count: u64,
    pub instruction_count: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ProfileReport {
    pub functions: BTreeMap<u32, FunctionProfile>,
    pub total_instructions: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOutcome {
    pub exit_code: u32,
    pub output: Vec<u8>,
    pub profile: ProfileReport,
    pub instructions: u64,
    pub virtual_ms: u64,
}

#[derive(Clone, Debug)]
struct Mapping {
    block_id: u32,
    code_base: u32,
    section_bases: Vec<(u32, u32)>,
    active: u32,
    retired: bool,
}

#[derive(Clone, Copy, Debug)]
struct Activation {
    fidx: usize,
    mapping: Option<u64>,
    return_pc: u32,
}

/// Process state: registers, address space, tables and the call stack.
pub struct Vm {
    regs: [u32; 9],
    pc: u32,
    mem: Memory,
    sections: BTreeMap<u32, SectionSlot>,
    functions: BTreeMap<u32, FunctionSlot>,
    fid_index: HashMap<u32, usize>,
    fid_order: Vec<u32>,
    counts: Vec<FunctionProfile>,
    gmrt: Gmrt,
    current_mapping: HashMap<u32, u64>,
    mappings: BTreeMap<u64, Mapping>,
    next_mapping: u64,
    data_relocs: Vec<(u32, u32, u32)>,
    stack: Vec<Activation>,
    cur_fidx: usize,
    cur_region: usize,
    cur_base: u32,
    executed: u64,
    budget: u64,
    wait_ms: u64,
    last_service_ms: u64,
    prng: Prng,
    input: Vec<u8>,
    input_pos: usize,
    output: Vec<u8>,
    entry_fid: u32,
}

impl Vm {
    /// Lay out a (static) image: sections page-aligned from `SECTION_BASE`,
    /// code 16-byte aligned from `CODE_BASE`; mobile stubs and mobile-owned
    /// sections stay unmapped.
    pub fn load_image(img: &ProgramImage, seed: u64) -> Result<Vm, VmError> {
        img.validate().map_err(|e| VmError::InvalidImage(e.to_string()))?;
        let mut mem = Memory::new();
        let mut sections = BTreeMap::new();
        let mut cursor = SECTION_BASE as u64;
        for s in &img.sections {
            if s.mobile_owned {
                sections.insert(s.sid, SectionSlot::Unmapped);
                continue;
            }
            let pages = (s.bytes.len() as u64).div_ceil(PAGE as u64).max(1);
            if cursor + pages * PAGE as u64 > CODE_BASE as u64 {
                return Err(VmError::AddressSpace("data sections exceed the section area".into()));
            }
            mem.map(cursor as u32, s.bytes.clone(), RegionKind::Section { sid: s.sid }, false);
            sections.insert(s.sid, SectionSlot::Mapped(cursor as u32));
            cursor += pages * PAGE as u64;
        }

        let mut functions = BTreeMap::new();
        let mut gmrt = Gmrt::default();
        let mut cursor = CODE_BASE as u64;
        for f in &img.functions {
            if f.is_mobile_stub() {
                functions.insert(f.fid, FunctionSlot::MobileStub(f.fid));
                gmrt.register(f.fid);
                continue;
            }
            let bytes = f.encode();
            if cursor + bytes.len() as u64 > HEAP_BASE as u64 {
                return Err(VmError::AddressSpace("code exceeds the code area".into()));
            }
            mem.map(cursor as u32, bytes.clone(), RegionKind::StaticCode { fid: f.fid }, true);
            functions.insert(f.fid, FunctionSlot::StaticCode(cursor as u32));
            cursor = (cursor + bytes.len() as u64).next_multiple_of(16);
        }

        let stack_base = STACK_TOP + 16 - STACK_SIZE;
        mem.map(stack_base, vec![0; STACK_SIZE as usize], RegionKind::Stack, false);

        let fid_order: Vec<u32> = img.functions.iter().map(|f| f.fid).collect();
        let fid_index = fid_order.iter().enumerate().map(|(i, f)| (*f, i)).collect();
        let mut vm = Vm {
            regs: [0; 9],
            pc: 0,
            mem,
            sections,
            functions,
            fid_index,
            counts: vec![FunctionProfile::default(); fid_order.len()],
            fid_order,
            gmrt,
            current_mapping: HashMap::new(),
            mappings: BTreeMap::new(),
            next_mapping: 1,
            data_relocs: img.data_relocs().collect(),
            stack: Vec::new(),
            cur_fidx: 0,
            cur_region: usize::MAX,
            cur_base: 0,
            executed: 0,
            budget: DEFAULT_BUDGET,
            wait_ms: 0,
            last_service_ms: 0,
            prng: Prng::new(seed),
            input: Vec::new(),
            input_pos: 0,
            output: Vec::new(),
            entry_fid: img.entry_fid,
        };
        vm.regs[SP as usize] = STACK_TOP;

        let static_sids: Vec<u32> = img.sections.iter().filter(|s| !s.mobile_owned).map(|s| s.sid).collect();
        for sid in static_sids {
            vm.apply_data_relocs(sid)?;
        }
        Ok(vm)
    }

    pub fn set_budget(&mut self, budget: u64) {
        self.budget = budget;
    }

    pub fn gmrt(&self) -> &Gmrt {
        &self.gmrt
    }

    pub fn section_slot(&self, sid: u32) -> Option<SectionSlot> {
        self.sections.get(&sid).copied()
    }

    pub fn function_slot(&self, fid: u32) -> Option<FunctionSlot> {
        self.functions.get(&fid).copied()
    }

    pub fn memory(&self) -> &Memory {
        &self.mem
    }

    /// Direct memory write, bypassing the interpreter (tamper experiments).
    pub fn write_bytes(&mut self, addr: u32, bytes: &[u8]) -> Result<(), VmError> {
        Ok(self.mem.write_bytes(addr, bytes)?)
    }

    pub fn read_bytes(&self, addr: u32, len: u32) -> Result<Vec<u8>, VmError> {
        Ok(self.mem.read_bytes(addr, len)?.to_vec())
    }

    pub fn registers(&self) -> &[u32; 9] {
        &self.regs
    }

    pub fn set_register(&mut self, r: u8, v: u32) {
        self.regs[r as usize] = v;
    }

    pub fn output(&self) -> &[u8] {
        &self.output
    }

    pub fn instructions(&self) -> u64 {
        self.executed
    }

    /// Virtual clock: 1 ms per 10,000 instructions plus resolver wait time.
    pub fn now_ms(&self) -> u64 {
        self.executed / INSTRUCTIONS_PER_MS + self.wait_ms
    }

    pub fn add_wait_ms(&mut self, ms: u64) {
        self.wait_ms += ms;
    }

    pub fn profile(&self) -> ProfileReport {
        let mut functions = BTreeMap::new();
        let mut total = 0;
        for (i, fid) in self.fid_order.iter().enumerate() {
            functions.insert(*fid, self.counts[i]);
            total += self.counts[i].instruction_count;
        }
        ProfileReport { functions, total_instructions: total }
    }

    /// Code bytes of the copy a block's GMRT entry currently points to.
    pub fn mapped_code(&self, block_id: u32) -> Option<&[u8]> {
        let mid = self.current_mapping.get(&block_id)?;
        let m = self.mappings.get(mid)?;
        let idx = self.mem.find(m.code_base, 1)?;
        Some(&self.mem.region(idx).data)
    }

    /// True while some activation (including the current one) runs in the block.
    pub fn block_on_stack(&self, block_id: u32) -> bool {
        self.mappings.values().any(|m| m.block_id == block_id && m.active > 0)
    }

    /// Copy a payload to randomized page-aligned heap addresses and mark the
    /// block `Loaded`.
    pub fn map_block(&mut self, block_id: u32, payload: &MobileBlockPayload) -> Result<u32, VmError> {
        match self.gmrt.get(block_id) {
            None => return Err(VmError::UnknownBlock(block_id)),
            Some(GmrtEntry::Loaded { .. }) => return Err(VmError::AlreadyLoaded(block_id)),
            _ => {}
        }
        let malformed = |reason: &str| VmError::PayloadMalformed { block_id, reason: reason.into() };
        if payload.block_id != block_id {
            return Err(malformed("block id mismatch"));
        }
        if payload.code.is_empty() || !payload.code.len().is_multiple_of(8) {
            return Err(malformed("bad code length"));
        }
        if payload.owned_sections.iter().any(|(_, b)| b.len() > super::image::MAX_SECTION_LEN) {
            return Err(malformed("oversized section"));
        }

        let mid = self.next_mapping;
        self.next_mapping += 1;
        let code_base = self.place(payload.code.len())?;
        self.mem.map(code_base, payload.code.clone(), RegionKind::BlockCode { mapping: mid }, true);
        let mut section_bases = Vec::with_capacity(payload.owned_sections.len());
        for (sid, bytes) in &payload.owned_sections {
            let base = self.place(bytes.len())?;
            self.mem.map(base, bytes.clone(), RegionKind::BlockSection { mapping: mid, sid: *sid }, false);
            self.sections.insert(*sid, SectionSlot::Mapped(base));
            section_bases.push((*sid, base));
        }
        for (sid, _) in &payload.owned_sections {
            self.apply_data_relocs(*sid)?;
        }
        self.mappings.insert(mid, Mapping { block_id, code_base, section_bases, active: 0, retired: false });
        if let Some(old) = self.current_mapping.insert(block_id, mid) {
            if let Some(m) = self.mappings.get(&old) {
                if m.active == 0 {
                    self.unmap(old);
                }
            }
        }
        self.gmrt.set(block_id, GmrtEntry::Loaded { base: code_base, version_id: payload.version_id });
        self.resync_cursor();
        Ok(code_base)
    }

    /// Reset a block's GMRT entry. Blocks with live activations are marked
    /// `Stale` and unmapped when their last activation returns.
    pub fn flush_block(&mut self, block_id: u32) -> Result<FlushOutcome, VmError> {
        let entry = self.gmrt.get(block_id).ok_or(VmError::UnknownBlock(block_id))?;
        let (base, version_id) = match entry {
            GmrtEntry::NotLoaded => return Ok(FlushOutcome::Flushed),
            GmrtEntry::Loaded { base, version_id } | GmrtEntry::Stale { base, version_id } => (base, version_id),
        };
        let Some(&mid) = self.current_mapping.get(&block_id) else {
            self.gmrt.set(block_id, GmrtEntry::NotLoaded);
            return Ok(FlushOutcome::Flushed);
        };
        let active = self.mappings.get(&mid).map_or(0, |m| m.active);
        if active > 0 {
            if let Some(m) = self.mappings.get_mut(&mid) {
                m.retired = true;
            }
            self.gmrt.set(block_id, GmrtEntry::Stale { base, version_id });
            Ok(FlushOutcome::Deferred)
        } else {
            self.unmap(mid);
            self.resync_cursor();
            Ok(FlushOutcome::Flushed)
        }
    }

    fn unmap(&mut self, mid: u64) {
        let Some(m) = self.mappings.remove(&mid) else { return };
        self.mem.unmap(m.code_base);
        for (sid, base) in &m.section_bases {
            self.mem.unmap(*base);
            if self.sections.get(sid) == Some(&SectionSlot::Mapped(*base)) {
                self.sections.insert(*sid, SectionSlot::Unmapped);
            }
        }
        if self.current_mapping.get(&m.block_id) == Some(&mid) {
            self.current_mapping.remove(&m.block_id);
            self.gmrt.set(m.block_id, GmrtEntry::NotLoaded);
        }
    }

    fn place(&mut self, len: usize) -> Result<u32, VmError> {
        let pages = (len as u64).div_ceil(PAGE as u64).max(1);
        let heap_pages = ((HEAP_END - HEAP_BASE) / PAGE) as u64;
        if pages > heap_pages {
            return Err(VmError::HeapExhausted);
        }
        for _ in 0..MAX_PLACEMENT_TRIES {
            let page = self.prng.below(heap_pages - pages + 1);
            let base = HEAP_BASE + (page as u32) * PAGE;
            if self.mem.is_free(base, (pages * PAGE as u64) as u32) {
                return Ok(base);
            }
        }
        Err(VmError::HeapExhausted)
    }

    fn apply_data_relocs(&mut self, sid: u32) -> Result<(), VmError> {
        let Some(SectionSlot::Mapped(src)) = self.sections.get(&sid).copied() else {
            return Ok(());
        };
        let relocs: Vec<(u32, u32)> = self.data_relocs.iter().filter(|r| r.0 == sid).map(|r| (r.1, r.2)).collect();
        for (offset, target) in relocs {
            let target_addr = match self.sections.get(&target) {
                Some(SectionSlot::Mapped(a)) => *a,
                Some(SectionSlot::Unmapped) => return Err(VmError::DownloadBeforeUseViolation { sid: target }),
                None => return Err(VmError::UnknownSection(target)),
            };
            let addend = self.mem.read_u32(src + offset)?;
            self.mem.write_u32(src + offset, target_addr.wrapping_add(addend))?;
        }
        Ok(())
    }

    fn resync_cursor(&mut self) {
        match self.mem.find(self.pc, 8) {
            Some(idx) if self.mem.region(idx).is_executable() => {
                self.cur_region = idx;
                self.cur_base = self.mem.region(idx).base;
            }
            _ => self.cur_region = usize::MAX,
        }
    }

    fn fetch(&mut self) -> Result<Instruction, VmError> {
        let slot = self.pc.wrapping_sub(self.cur_base) as usize / 8;
        if self.cur_region != usize::MAX && self.pc.is_multiple_of(8) {
            if let Some(decoded) = self.mem.region(self.cur_region).instruction(slot) {
                return decoded.ok_or(VmError::InvalidOpcode { pc: self.pc });
            }
        }
        self.resync_cursor();
        if self.cur_region == usize::MAX || !self.pc.is_multiple_of(8) {
            return Err(VmError::OutOfRange(self.pc));
        }
        let slot = (self.pc - self.cur_base) as usize / 8;
        self.mem.region(self.cur_region).instruction(slot).flatten().ok_or(VmError::InvalidOpcode { pc: self.pc })
    }

    fn boundary(&mut self, host: &mut dyn MobileHost) -> Result<(), VmError> {
        let now = self.now_ms();
        if now > self.last_service_ms {
            self.last_service_ms = now;
            host.service(self)?;
            self.resync_cursor();
        }
        Ok(())
    }

    fn enter(&mut self, fid: u32, return_pc: u32, host: &mut dyn MobileHost) -> Result<(), VmError> {
        if fid == ISR_INTRINSIC_FID {
            return self.enter_isr(return_pc);
        }
        let slot = *self.functions.get(&fid).ok_or(VmError::UnknownFunction(fid))?;
        let fidx = self.fid_index[&fid];
        let (target, mapping) = match slot {
            FunctionSlot::StaticCode(addr) => (addr, None),
            FunctionSlot::MobileStub(block_id) => {
                let needs_fetch = !matches!(self.gmrt.get(block_id), Some(GmrtEntry::Loaded { .. }));
                if needs_fetch {
                    let fetched = host.fetch_block(block_id, self.now_ms())?;
                    self.wait_ms += fetched.wait_ms;
                    self.map_block(block_id, &fetched.payload)?;
                }
                let mid = self.current_mapping[&block_id];
                (self.mappings[&mid].code_base, Some(mid))
            }
        };
        if let Some(mid) = mapping {
            if let Some(m) = self.mappings.get_mut(&mid) {
                m.active += 1;
            }
        }
        self.counts[fidx].call_count += 1;
        self.stack.push(Activation { fidx, mapping, return_pc });
        self.cur_fidx = fidx;
        self.pc = target;
        self.resync_cursor();
        Ok(())
    }

    /// Interpret the bytecode at `R4` through the opcode map at `R5`.
    fn enter_isr(&mut self, return_pc: u32) -> Result<(), VmError> {
        let bytecode = self.regs[4];
        let opmap_addr = self.regs[5];
        let raw = self.mem.read_bytes(opmap_addr, OPMAP_LEN as u32)?.to_vec();
        let mut inverse = [0xFFu8; 256];
        for (op, &enc) in raw.iter().enumerate().take(NUM_OPCODES) {
            let enc = enc as usize;
            if inverse[enc] != 0xFF {
                return Err(VmError::BadOpcodeMap(opmap_addr));
            }
            inverse[enc] = op as u8;
        }
        let mask = u64::from_le_bytes(raw[32..40].try_into().expect("8 bytes")) as u32;
        let idx = self.mem.attach_isr(bytecode, IsrKey { inverse, mask }).ok_or(VmError::OutOfRange(bytecode))?;
        let mapping = self.mem.region(idx).kind.mapping();
        if let Some(mid) = mapping {
            if let Some(m) = self.mappings.get_mut(&mid) {
                m.active += 1;
            }
        }
        let fidx = self.cur_fidx;
        self.stack.push(Activation { fidx, mapping, return_pc });
        self.pc = bytecode;
        self.resync_cursor();
        Ok(())
    }

    /// Returns `Some(exit_code)` when the outermost activation returned.
    fn leave(&mut self) -> Option<u32> {
        let act = self.stack.pop().expect("RET with an empty call stack");
        if let Some(mid) = act.mapping {
            let mut unmap = false;
            if let Some(m) = self.mappings.get_mut(&mid) {
                m.active -= 1;
                unmap = m.active == 0 && (m.retired || self.current_mapping.get(&m.block_id) != Some(&mid));
            }
            if unmap {
                self.unmap(mid);
            }
        }
        match self.stack.last() {
            None => Some(self.regs[0]),
            Some(top) => {
                self.cur_fidx = top.fidx;
                self.pc = act.return_pc;
                self.resync_cursor();
                None
            }
        }
    }

    /// Run from the entry function until it returns, halts or faults.
    pub fn run(&mut self, input: &[u8], host: &mut dyn MobileHost) -> Result<RunOutcome, VmError> {
        self.input = input.to_vec();
        self.input_pos = 0;
        self.enter(self.entry_fid, RETURN_TO_HOST, host)?;
        let exit_code = self.execute(host)?;
        Ok(RunOutcome {
            exit_code,
            output: self.output.clone(),
            profile: self.profile(),
            instructions: self.executed,
            virtual_ms: self.now_ms(),
        })
    }

    fn execute(&mut self, host: &mut dyn MobileHost) -> Result<u32, VmError> {
        use Opcode::*;
        loop {
            if self.executed >= self.budget {
                return Err(VmError::BudgetExhausted(self.budget));
            }
            let ins = self.fetch()?;
            self.executed += 1;
            self.counts[self.cur_fidx].instruction_count += 1;
            let next = self.pc.wrapping_add(8);
            let (a, b, c) = (ins.ra as usize, ins.rb as usize, ins.rc as usize);
            let r = &mut self.regs;
            match ins.op {
                Halt => return Ok(0),
                LoadI => r[a] = ins.imm,
                Mov => r[a] = r[b],
                Add => r[a] = r[b].wrapping_add(r[c]),
                Sub => r[a] = r[b].wrapping_sub(r[c]),
                Mul => r[a] = r[b].wrapping_mul(r[c]),
                And => r[a] = r[b] & r[c],
                Xor => r[a] = r[b] ^ r[c],
                Shl => r[a] = r[b] << (r[c] & 31),
                Shr => r[a] = r[b] >> (r[c] & 31),
                AddI => r[a] = r[b].wrapping_add(ins.imm),
                SubI => r[a] = r[b].wrapping_sub(ins.imm),
                Load => {
                    let addr = r[b].wrapping_add(ins.imm);
                    self.regs[a] = self.mem.read_u32(addr)?;
                }
                Store => {
                    let addr = r[b].wrapping_add(ins.imm);
                    let v = r[a];
                    self.mem.write_u32(addr, v)?;
                }
                LoadB => {
                    let addr = r[b].wrapping_add(ins.imm);
                    self.regs[a] = self.mem.read_u8(addr)? as u32;
                }
                StoreB => {
                    let addr = r[b].wrapping_add(ins.imm);
                    let v = r[a] as u8;
                    self.mem.write_u8(addr, v)?;
                }
                Lea => match self.sections.get(&ins.imm) {
                    Some(SectionSlot::Mapped(addr)) => r[a] = *addr,
                    Some(SectionSlot::Unmapped) => return Err(VmError::DownloadBeforeUseViolation { sid: ins.imm }),
                    None => return Err(VmError::UnknownSection(ins.imm)),
                },
                Jmp => {
                    self.pc = jump_target(next, ins.imm);
                    continue;
                }
                Jz | Jnz | Jlt => {
                    let taken = match ins.op {
                        Jz => r[a] == 0,
                        Jnz => r[a] != 0,
                        _ => r[a] < r[b],
                    };
                    if taken {
                        self.pc = jump_target(next, ins.imm);
                        continue;
                    }
                }
                Call | CallR => {
                    let fid = if ins.op == Call { ins.imm } else { r[a] };
                    self.boundary(host)?;
                    self.enter(fid, next, host)?;
                    continue;
                }
                Ret => {
                    self.boundary(host)?;
                    if let Some(code) = self.leave() {
                        return Ok(code);
                    }
                    continue;
                }
                Push => {
                    let sp = r[SP as usize].wrapping_sub(4);
                    let v = r[a];
                    self.mem.write_u32(sp, v)?;
                    self.regs[SP as usize] = sp;
                }
                Pop => {
                    let sp = r[SP as usize];
                    let v = self.mem.read_u32(sp)?;
                    self.regs[SP as usize] = sp.wrapping_add(4);
                    self.regs[a] = v;
                }
                Sys => match ins.imm {
                    sys::PUTC => self.output.push(r[0] as u8),
                    sys::CLOCK => {
                        let now = self.now_ms();
                        self.regs[0] = now as u32;
                    }
                    sys::GETC => {
                        let v = match self.input.get(self.input_pos) {
                            Some(b) => {
                                self.input_pos += 1;
                                *b as u32
                            }
                            None => u32::MAX,
                        };
                        self.regs[0] = v;
                    }
                    sys::EXIT => return Ok(r[0]),
                    n => return Err(VmError::UnknownSyscall(n)),
                },
            }
            self.pc = next;
        }
    }
}

fn jump_target(next: u32, imm: u32) -> u32 {
    next.wrapping_add((imm as i32 as u32).wrapping_mul(8))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::image::{DataSection, FunctionDef, RelocationRecord};
    use crate::vm::isa::{encode_code, ins};

    fn image(functions: Vec<FunctionDef>, sections: Vec<DataSection>) -> ProgramImage {
        let mut img = ProgramImage { entry_fid: functions[0].fid, functions, sections, ..Default::default() };
        img.rebuild_code_relocs();
        img
    }

    /// main calls f1(20, 22) and prints the byte it returns; f1 is mobile
    /// and reads an owned section.
    fn mobile_program() -> (ProgramImage, MobileBlockPayload) {
        let main = FunctionDef::new(
            0,
            "main",
            0,
            vec![ins::loadi(0, 20), ins::loadi(1, 22), ins::call(1), ins::sys(sys::PUTC), ins::halt()],
        );
        let stub = FunctionDef::new(1, "adder", 2, vec![]);
        let mut owned = DataSection::new(5, "bias", vec![]);
        owned.mobile_owned = true;
        let img = image(vec![main, stub], vec![owned]);
        let body = [ins::add(0, 0, 1), ins::lea(2, 5), ins::load(2, 2, 0), ins::add(0, 0, 2), ins::ret()];
        let payload = MobileBlockPayload {
            block_id: 1,
            version_id: 1,
            group_id: 0,
            entry_fid: 1,
            param_count: 2,
            code: encode_code(&body),
            owned_sections: vec![(5, 23u32.to_le_bytes().to_vec())],
        };
        (img, payload)
    }

    #[test]
    fn prints_and_halts() {
        let img =
            image(vec![FunctionDef::new(0, "main", 0, vec![ins::loadi(0, 0x41), ins::sys(0), ins::halt()])], vec![]);
        let out = Vm::load_image(&img, 1).unwrap().run(&[], &mut NullHost).unwrap();
        assert_eq!(out.output, b"A");
        assert_eq!(out.exit_code, 0);
        assert_eq!(out.instructions, 3);
    }

    #[test]
    fn static_layout() {
        let img = image(
            vec![FunctionDef::new(0, "main", 0, vec![ins::halt()]), FunctionDef::new(1, "g", 0, vec![ins::ret()])],
            vec![DataSection::new(0, "a", vec![0; 100]), DataSection::new(1, "b", vec![0; 100])],
        );
        let vm = Vm::load_image(&img, 1).unwrap();
        assert_eq!(vm.section_slot(0), Some(SectionSlot::Mapped(0x0001_0000)));
        assert_eq!(vm.section_slot(1), Some(SectionSlot::Mapped(0x0001_1000)));
        assert_eq!(vm.function_slot(0), Some(FunctionSlot::StaticCode(0x0100_0000)));
        assert_eq!(vm.function_slot(1), Some(FunctionSlot::StaticCode(0x0100_0010)));
        assert_eq!(vm.read_bytes(0x0100_0000, 8).unwrap(), vec![0; 8]);
    }

    #[test]
    fn data_relocations_are_applied() {
        let main = FunctionDef::new(
            0,
            "main",
            0,
            vec![ins::lea(1, 0), ins::load(1, 1, 4), ins::load(0, 1, 0), ins::sys(sys::EXIT), ins::halt()],
        );
        let mut img = image(
            vec![main],
            vec![
                DataSection::new(0, "ptr", vec![0, 0, 0, 0, 4, 0, 0, 0]),
                DataSection::new(1, "val", vec![0, 0, 0, 0, 9, 0, 0, 0]),
            ],
        );
        img.relocations.push(RelocationRecord::Data { sid: 0, offset: 4, target: 1 });
        let out = Vm::load_image(&img, 3).unwrap().run(&[], &mut NullHost).unwrap();
        assert_eq!(out.exit_code, 9);
    }

    #[test]
    fn null_resolver_reports_unavailable_block() {
        let (img, _) = mobile_program();
        let err = Vm::load_image(&img, 1).unwrap().run(&[], &mut NullHost).unwrap_err();
        assert!(matches!(err, VmError::MobileBlockUnavailable { block_id: 1, .. }));
    }

    #[test]
    fn lea_of_unmapped_section_is_a_violation() {
        let (mut img, _) = mobile_program();
        img.functions[0].code.insert(0, ins::lea(3, 5));
        img.rebuild_code_relocs();
        let err = Vm::load_image(&img, 1).unwrap().run(&[], &mut NullHost).unwrap_err();
        assert_eq!(err, VmError::DownloadBeforeUseViolation { sid: 5 });
    }

    #[test]
    fn output_is_independent_of_placement_seed() {
        let (img, payload) = mobile_program();
        let mut bases = Vec::new();
        for seed in [1, 2, 99] {
            let mut vm = Vm::load_image(&img, seed).unwrap();
            let mut host = StaticHost::new([payload.clone()]);
            let out = vm.run(&[], &mut host).unwrap();
            assert_eq!(out.output, vec![65]);
            bases.push(vm.gmrt().get(1).unwrap().base().unwrap());
        }
        assert!(bases.iter().all(|b| b % PAGE == 0 && *b >= HEAP_BASE));
        assert_ne!(bases[0], bases[1]);
    }

    #[test]
    fn map_copies_bytes_and_placement_is_seeded() {
        let (img, payload) = mobile_program();
        let mut a = Vm::load_image(&img, 5).unwrap();
        let base = a.map_block(1, &payload).unwrap();
        assert_eq!(a.read_bytes(base, payload.code.len() as u32).unwrap(), payload.code);
        assert_eq!(a.mapped_code(1).unwrap(), &payload.code[..]);
        assert_eq!(a.map_block(1, &payload), Err(VmError::AlreadyLoaded(1)));
        let mut b = Vm::load_image(&img, 5).unwrap();
        assert_eq!(b.map_block(1, &payload).unwrap(), base);
        match a.section_slot(5) {
            Some(SectionSlot::Mapped(addr)) => assert!(addr >= base + 4096 || addr + 4096 <= base),
            other => panic!("section not mapped: {other:?}"),
        }
    }

    #[test]
    fn flush_idle_block_then_call_redownloads() {
        let (img, payload) = mobile_program();
        let mut vm = Vm::load_image(&img, 5).unwrap();
        let base = vm.map_block(1, &payload).unwrap();
        assert_eq!(vm.flush_block(1), Ok(FlushOutcome::Flushed));
        assert_eq!(vm.gmrt().get(1), Some(GmrtEntry::NotLoaded));
        assert_eq!(vm.section_slot(5), Some(SectionSlot::Unmapped));
        assert!(vm.read_bytes(base, 8).is_err());
        assert_eq!(vm.flush_block(1), Ok(FlushOutcome::Flushed));
        let mut host = StaticHost::new([payload]);
        vm.run(&[], &mut host).unwrap();
        assert_eq!(host.requests, vec![1]);
    }

    /// Flushes block 1 from inside its own execution.
    struct FlushingHost {
        inner: StaticHost,
        outcomes: Vec<FlushOutcome>,
    }

    impl MobileHost for FlushingHost {
        fn fetch_block(&mut self, block_id: u32, now_ms: u64) -> Result<FetchedBlock, VmError> {
            self.inner.fetch_block(block_id, now_ms)
        }
        fn service(&mut self, vm: &mut Vm) -> Result<(), VmError> {
            if vm.block_on_stack(1) && self.outcomes.is_empty() {
                self.outcomes.push(vm.flush_block(1)?);
            }
            Ok(())
        }
    }

    #[test]
    fn flush_while_executing_is_deferred() {
        // main -> block 1 (burns > 1 ms, calls leaf 2, returns) twice.
        let main = FunctionDef::new(0, "main", 0, vec![ins::call(1), ins::call(1), ins::halt()]);
        let stub = FunctionDef::new(1, "busy", 0, vec![]);
        let leaf = FunctionDef::new(2, "leaf", 0, vec![ins::ret()]);
        let img = image(vec![main, stub, leaf], vec![]);
        let mut body = vec![ins::loadi(1, 20_000)];
        body.extend([ins::subi(1, 1, 1), ins::jnz(1, -2), ins::call(2), ins::ret()]);
        let payload = MobileBlockPayload {
            block_id: 1,
            version_id: 4,
            group_id: 0,
            entry_fid: 1,
            param_count: 0,
            code: encode_code(&body),
            owned_sections: vec![],
        };
        let mut host = FlushingHost { inner: StaticHost::new([payload]), outcomes: vec![] };
        let mut vm = Vm::load_image(&img, 8).unwrap();
        vm.run(&[], &mut host).unwrap();
        assert_eq!(host.outcomes, vec![FlushOutcome::Deferred]);
        assert_eq!(host.inner.requests, vec![1, 1]);
        assert_eq!(vm.memory().regions().iter().filter(|r| matches!(r.kind, RegionKind::BlockCode { .. })).count(), 1);
    }

    #[test]
    fn budget_is_enforced() {
        let img = image(vec![FunctionDef::new(0, "spin", 0, vec![ins::jmp(-1)])], vec![]);
        let mut vm = Vm::load_image(&img, 1).unwrap();
        vm.set_budget(1000);
        assert_eq!(vm.run(&[], &mut NullHost), Err(VmError::BudgetExhausted(1000)));
        assert_eq!(vm.now_ms(), 0);
    }

    #[test]
    fn isr_intrinsic_decodes_through_the_opmap() {
        let mut pi: Vec<u8> = (0..NUM_OPCODES as u8).rev().collect();
        pi.resize(32, 0xFF);
        let mask = 0x5A5A_1234u32;
        let body = [ins::loadi(0, 7), ins::addi(0, 0, 5), ins::ret()];
        let mut bc = Vec::new();
        for i in body {
            let mut raw = i.encode();
            raw[0] = pi[raw[0] as usize];
            let imm = u32::from_le_bytes(raw[4..8].try_into().unwrap()) ^ mask;
            raw[4..8].copy_from_slice(&imm.to_le_bytes());
            bc.extend(raw);
        }
        let mut opmap = pi.clone();
        opmap.extend((mask as u64).to_le_bytes());
        let main = FunctionDef::new(
            0,
            "main",
            0,
            vec![ins::lea(4, 0), ins::lea(5, 1), ins::call(ISR_INTRINSIC_FID), ins::sys(sys::EXIT), ins::halt()],
        );
        let img = image(vec![main], vec![DataSection::new(0, "bc", bc), DataSection::new(1, "opmap", opmap)]);
        let out = Vm::load_image(&img, 1).unwrap().run(&[], &mut NullHost).unwrap();
        assert_eq!(out.exit_code, 12);
    }

    #[test]
    fn profile_totals_add_up() {
        let (img, payload) = mobile_program();
        let out = Vm::load_image(&img, 1).unwrap().run(&[], &mut StaticHost::new([payload])).unwrap();
        let sum: u64 = out.profile.functions.values().map(|p| p.instruction_count).sum();
        assert_eq!(sum, out.profile.total_instructions);
        assert_eq!(out.profile.functions[&1].call_count, 1);
        assert_eq!(out.profile.functions[&1].instruction_count, 5);
    }
}
