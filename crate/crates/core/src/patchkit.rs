//! Relocatable patch objects: loading, base selection and relocation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::elf::{self, ElfError, ElfFile};
use crate::image::{Arch, Endianness, FirmwareImage, SegmentKind};
use crate::isa::arm;
use crate::symrec::SymbolTable;

pub const PAGE: u64 = 0x1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RelocKind {
    Abs32,
    ArmPc24,
    X86Rel32,
}

impl RelocKind {
    fn from_elf(arch: Arch, r_type: u32) -> Option<Self> {
        match (arch, r_type) {
            (Arch::X86, elf::R_386_32) => Some(Self::Abs32),
            (Arch::X86, elf::R_386_PC32) => Some(Self::X86Rel32),
            (Arch::Arm, elf::R_ARM_ABS32) => Some(Self::Abs32),
            (Arch::Arm, elf::R_ARM_PC24 | elf::R_ARM_CALL | elf::R_ARM_JUMP24) => Some(Self::ArmPc24),
            _ => None,
        }
    }

    /// Bias between the ELF addend and the one used here, which folds the
    /// pipeline offset into the formula (`S+A-P-4`, `S+A-P-8`).
    fn addend_bias(self) -> i64 {
        match self {
            Self::Abs32 => 0,
            Self::X86Rel32 => 4,
            Self::ArmPc24 => 8,
        }
    }
}

fn reloc_name(arch: Arch, r_type: u32) -> String {
    let known = match (arch, r_type) {
        (Arch::X86, 0) => "R_386_NONE",
        (Arch::X86, 3) => "R_386_GOT32",
        (Arch::X86, 4) => "R_386_PLT32",
        (Arch::X86, 9) => "R_386_GOTOFF",
        (Arch::X86, 10) => "R_386_GOTPC",
        (Arch::X86, 20) => "R_386_16",
        (Arch::X86, 22) => "R_386_8",
        (Arch::Arm, 0) => "R_ARM_NONE",
        (Arch::Arm, 3) => "R_ARM_REL32",
        (Arch::Arm, 10) => "R_ARM_THM_CALL",
        (Arch::Arm, 30) => "R_ARM_THM_JUMP24",
        (Arch::Arm, 43) => "R_ARM_MOVW_ABS_NC",
        (Arch::Arm, 44) => "R_ARM_MOVT_ABS",
        (Arch::Arm, 42) => "R_ARM_PREL31",
        _ => "",
    };
    if known.is_empty() {
        format!("{} relocation type {r_type}", arch.name())
    } else {
        known.into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchSection {
    pub name: String,
    /// Empty for zero-initialised sections.
    pub bytes: Vec<u8>,
    pub size: u32,
    pub align: u32,
    pub exec: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relocation {
    pub section: String,
    pub offset: u32,
    pub kind: RelocKind,
    pub symbol: String,
    pub addend: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchObject {
    pub arch: Arch,
    pub endianness: Endianness,
    pub sections: Vec<PatchSection>,
    /// Defined symbol -> (section, offset).
    pub defined: BTreeMap<String, (String, u32)>,
    pub functions: BTreeSet<String>,
    pub externals: BTreeSet<String>,
    pub relocations: Vec<Relocation>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PatchError {
    #[error("malformed object: {0}")]
    Malformed(String),
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("unsupported relocation {0}")]
    UnsupportedRelocKind(String),
    #[error("relocation at {section}+{offset:#x} exceeds the section")]
    RelocOutsideSection { section: String, offset: u32 },
    #[error("section `{0}` has a non power-of-two alignment")]
    BadAlignment(String),
    #[error("unresolved external symbol(s): {}", .0.join(", "))]
    UnresolvedExternal(Vec<String>),
    #[error("relocation against `{symbol}` out of range (displacement {disp:#x})")]
    RelocOutOfRange { symbol: String, disp: i64 },
    #[error("patch placement overlaps firmware at {0:#x}")]
    Overlap(u32),
    #[error("patch does not fit below 4 GiB")]
    AddressOverflow,
}

impl From<ElfError> for PatchError {
    fn from(e: ElfError) -> Self {
        match e {
            ElfError::UnsupportedClass(c) => PatchError::ArchMismatch(format!("ELF class {c}, expected 32-bit")),
            other => PatchError::Malformed(format!("{other}")),
        }
    }
}

impl PatchObject {
    pub fn section(&self, name: &str) -> Option<&PatchSection> {
        self.sections.iter().find(|s| s.name == name)
    }

    fn check(&self) -> Result<(), PatchError> {
        for s in &self.sections {
            if !s.align.is_power_of_two() {
                return Err(PatchError::BadAlignment(s.name.clone()));
            }
        }
        for r in &self.relocations {
            let size = self.section(&r.section).map_or(0, |s| s.bytes.len() as u64);
            if r.offset as u64 + 4 > size {
                return Err(PatchError::RelocOutsideSection { section: r.section.clone(), offset: r.offset });
            }
        }
        Ok(())
    }
}

/// Reads a 32-bit relocatable object for `arch`/`endianness`. Only
/// allocated sections are kept.
pub fn load_patch_object(bytes: &[u8], arch: Arch, endianness: Endianness) -> Result<PatchObject, PatchError> {
    let f = ElfFile::parse(bytes)?;
    let want = match arch {
        Arch::X86 => elf::EM_386,
        Arch::Arm => elf::EM_ARM,
    };
    if f.machine != want {
        return Err(PatchError::ArchMismatch(format!("machine {} for a {} image", f.machine, arch.name())));
    }
    if f.endian() != endianness {
        return Err(PatchError::ArchMismatch(format!("{:?} object for a {:?} image", f.endian(), endianness)));
    }
    if f.e_type != elf::ET_REL {
        return Err(PatchError::Malformed(format!("e_type {} is not relocatable", f.e_type)));
    }
    let shdrs = f.section_headers()?;
    let mut sections = Vec::new();
    let mut kept: BTreeMap<usize, usize> = BTreeMap::new();
    for sh in &shdrs {
        if sh.flags & elf::SHF_ALLOC == 0 || !matches!(sh.sh_type, elf::SHT_PROGBITS | elf::SHT_NOBITS) {
            continue;
        }
        kept.insert(sh.index, sections.len());
        sections.push(PatchSection {
            name: sh.name.clone(),
            bytes: f.section_data(sh)?.to_vec(),
            size: sh.size,
            align: sh.addralign.max(1),
            exec: sh.flags & elf::SHF_EXECINSTR != 0,
        });
    }
    let mut obj = PatchObject {
        arch,
        endianness,
        sections,
        defined: BTreeMap::new(),
        functions: BTreeSet::new(),
        externals: BTreeSet::new(),
        relocations: Vec::new(),
    };
    let Some(symtab) = shdrs.iter().find(|s| s.sh_type == elf::SHT_SYMTAB) else {
        obj.check()?;
        return Ok(obj);
    };
    let syms = f.symbols(&shdrs, symtab)?;
    // Symbol index -> name used in relocations; section symbols take the
    // section's name.
    let mut names: Vec<Option<String>> = Vec::with_capacity(syms.len());
    for s in &syms {
        let sec = kept.get(&(s.shndx as usize)).map(|&i| obj.sections[i].name.clone());
        let name = if s.sym_type == elf::STT_SECTION {
            sec.clone()
        } else if s.name.is_empty() {
            None
        } else {
            Some(s.name.clone())
        };
        if let (Some(n), false) = (&name, s.sym_type == elf::STT_SECTION) {
            if s.shndx == elf::SHN_UNDEF {
                obj.externals.insert(n.clone());
            } else if let Some(sec) = sec {
                // Globals win over same-named locals.
                if s.bind != elf::STB_LOCAL || !obj.defined.contains_key(n) {
                    obj.defined.insert(n.clone(), (sec, s.value));
                }
                if s.sym_type == elf::STT_FUNC {
                    obj.functions.insert(n.clone());
                }
            }
        }
        names.push(name);
    }
    for sh in shdrs.iter().filter(|s| matches!(s.sh_type, elf::SHT_REL | elf::SHT_RELA)) {
        let Some(&target) = kept.get(&(sh.info as usize)) else { continue };
        let sec = obj.sections[target].clone();
        for r in f.relocations(sh)? {
            let kind = RelocKind::from_elf(arch, r.r_type)
                .ok_or_else(|| PatchError::UnsupportedRelocKind(reloc_name(arch, r.r_type)))?;
            let symbol = names
                .get(r.sym as usize)
                .cloned()
                .flatten()
                .ok_or_else(|| PatchError::Malformed(format!("relocation symbol {} has no name", r.sym)))?;
            if r.offset as usize + 4 > sec.bytes.len() {
                return Err(PatchError::RelocOutsideSection { section: sec.name.clone(), offset: r.offset });
            }
            let elf_addend = match r.addend {
                Some(a) => a as i64,
                None => {
                    let w = endianness.read_u32(&sec.bytes[r.offset as usize..]);
                    match kind {
                        RelocKind::ArmPc24 => (((w & 0x00FF_FFFF) << 8) as i32 >> 6) as i64,
                        _ => w as i32 as i64,
                    }
                }
            };
            obj.relocations.push(Relocation {
                section: sec.name.clone(),
                offset: r.offset,
                kind,
                symbol,
                addend: elf_addend + kind.addend_bias(),
            });
        }
    }
    obj.check()?;
    Ok(obj)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaseChoice {
    pub base: u32,
    pub heap_top: Option<u32>,
    pub warnings: Vec<String>,
}

/// Patch base: page-aligned, above every segment and above the heap top.
/// `reserve` bytes directly below the base are kept free for trampolines.
/// An explicit heap top wins over the symbol; a symbol naming code (a
/// function returning the bound) is ignored with a warning.
pub fn choose_base(
    image: &FirmwareImage,
    symtab: &SymbolTable,
    heap_top_symbol: Option<&str>,
    explicit_heap_top: Option<u32>,
    reserve: u32,
) -> BaseChoice {
    let mut warnings = Vec::new();
    let heap_top = match (explicit_heap_top, heap_top_symbol) {
        (Some(h), _) => Some(h),
        (None, Some(sym)) => match symtab.value_of(sym) {
            Some(v) if image.segment_at(v).is_some_and(|s| s.kind == SegmentKind::Code) => {
                warnings.push(format!(
                    "heap top symbol `{sym}` is code at {v:#010x}; pass --heap-top with the value it returns"
                ));
                None
            }
            Some(v) => Some(v),
            None => {
                warnings.push(format!("heap top symbol `{sym}` not found"));
                None
            }
        },
        (None, None) => None,
    };
    if heap_top.is_none() {
        warnings
            .push("heap top unknown; patch placed right after the segments and may be overwritten by the heap".into());
    }
    let seg_end = image.max_end().unwrap_or(0);
    let floor = seg_end.max(heap_top.map_or(0, |h| h as u64)) + reserve as u64;
    let base = crate::align_up(floor, PAGE).min(u32::MAX as u64 & !(PAGE - 1)) as u32;
    BaseChoice { base, heap_top, warnings }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchPlacement {
    pub base: u32,
    /// Exclusive end of the last placed section.
    pub end: u64,
    pub section_addresses: BTreeMap<String, u32>,
    /// Externals bound to firmware addresses.
    pub resolved: BTreeMap<String, u32>,
    /// Absolute addresses of the patch's own symbols.
    pub symbols: BTreeMap<String, u32>,
    /// Relocated bytes covering `[base, end)`.
    pub bytes: Vec<u8>,
}

impl PatchPlacement {
    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && (addr as u64) < self.end
    }
}

/// Lays out the sections at `base` in object order and applies every
/// relocation. Externals resolve through `overrides` first, then `symtab`.
pub fn resolve(
    patch: &PatchObject,
    base: u32,
    symtab: &SymbolTable,
    overrides: &BTreeMap<String, u32>,
) -> Result<PatchPlacement, PatchError> {
    let mut cursor = base as u64;
    let mut section_addresses = BTreeMap::new();
    let mut offsets = Vec::with_capacity(patch.sections.len());
    for s in &patch.sections {
        cursor = crate::align_up(cursor, s.align as u64);
        section_addresses.insert(s.name.clone(), cursor as u32);
        offsets.push((cursor - base as u64) as usize);
        cursor += s.size as u64;
    }
    if cursor > 1 << 32 {
        return Err(PatchError::AddressOverflow);
    }
    let mut bytes = vec![0u8; (cursor - base as u64) as usize];
    for (s, &off) in patch.sections.iter().zip(&offsets) {
        bytes[off..off + s.bytes.len()].copy_from_slice(&s.bytes);
    }

    let mut resolved = BTreeMap::new();
    let mut missing = Vec::new();
    for name in &patch.externals {
        match overrides.get(name).copied().or_else(|| symtab.value_of(name)) {
            Some(v) => {
                resolved.insert(name.clone(), v);
            }
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(PatchError::UnresolvedExternal(missing));
    }
    let symbols: BTreeMap<String, u32> =
        patch.defined.iter().map(|(n, (sec, off))| (n.clone(), section_addresses[sec].wrapping_add(*off))).collect();
    let lookup = |name: &str| -> Option<u32> {
        symbols.get(name).or_else(|| resolved.get(name)).or_else(|| section_addresses.get(name)).copied()
    };

    let e = patch.endianness;
    for r in &patch.relocations {
        let s = lookup(&r.symbol).ok_or_else(|| PatchError::UnresolvedExternal(vec![r.symbol.clone()]))? as i64;
        let p = section_addresses[&r.section] as i64 + r.offset as i64;
        let at = (p - base as i64) as usize;
        let word = match r.kind {
            RelocKind::Abs32 => (s + r.addend) as u32,
            RelocKind::X86Rel32 => (s + r.addend - p - 4) as u32,
            RelocKind::ArmPc24 => {
                let disp = s + r.addend - p - 8;
                if disp.abs() >= arm::BRANCH_REACH {
                    return Err(PatchError::RelocOutOfRange { symbol: r.symbol.clone(), disp });
                }
                let old = e.read_u32(&bytes[at..]);
                (old & 0xFF00_0000) | ((disp >> 2) as u32 & 0x00FF_FFFF)
            }
        };
        bytes[at..at + 4].copy_from_slice(&e.u32_bytes(word));
    }
    Ok(PatchPlacement { base, end: cursor, section_addresses, resolved, symbols, bytes })
}

/// Fails if `[start, end)` touches any firmware segment.
pub fn check_no_overlap(image: &FirmwareImage, start: u32, end: u64) -> Result<(), PatchError> {
    for s in image.segments() {
        if !s.is_empty() && (s.start as u64) < end && (start as u64) < s.end() {
            return Err(PatchError::Overlap(s.start.max(start)));
        }
    }
    Ok(())
}
