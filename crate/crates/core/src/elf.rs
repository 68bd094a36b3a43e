//! Minimal ELF32 container support: a bounds-checked reader for executables
//! and relocatable objects, and a writer used by the synthetic builder.

use alloc::string::String;
use alloc::vec::Vec;

use crate::image::Endianness;

pub const EM_386: u16 = 3;
pub const EM_ARM: u16 = 40;

pub const ET_REL: u16 = 1;
pub const ET_EXEC: u16 = 2;

pub const PT_LOAD: u32 = 1;
pub const PF_X: u32 = 1;
pub const PF_W: u32 = 2;
pub const PF_R: u32 = 4;

pub const SHT_NULL: u32 = 0;
pub const SHT_PROGBITS: u32 = 1;
pub const SHT_SYMTAB: u32 = 2;
pub const SHT_STRTAB: u32 = 3;
pub const SHT_RELA: u32 = 4;
pub const SHT_NOBITS: u32 = 8;
pub const SHT_REL: u32 = 9;

pub const SHF_WRITE: u32 = 1;
pub const SHF_ALLOC: u32 = 2;
pub const SHF_EXECINSTR: u32 = 4;

pub const SHN_UNDEF: u16 = 0;
pub const SHN_ABS: u16 = 0xfff1;

pub const STB_LOCAL: u8 = 0;
pub const STB_GLOBAL: u8 = 1;
pub const STT_NOTYPE: u8 = 0;
pub const STT_OBJECT: u8 = 1;
pub const STT_FUNC: u8 = 2;
pub const STT_SECTION: u8 = 3;

pub const R_386_32: u32 = 1;
pub const R_386_PC32: u32 = 2;
pub const R_ARM_PC24: u32 = 1;
pub const R_ARM_ABS32: u32 = 2;
pub const R_ARM_CALL: u32 = 28;
pub const R_ARM_JUMP24: u32 = 29;

const EHDR_SIZE: usize = 52;
const PHDR_SIZE: usize = 32;
const SHDR_SIZE: usize = 40;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ElfError {
    #[error("not an ELF container (bad magic)")]
    BadMagic,
    #[error("truncated container: {0}")]
    Truncated(&'static str),
    #[error("unsupported ELF class {0} (only 32-bit is handled)")]
    UnsupportedClass(u8),
    #[error("unknown data encoding {0}")]
    BadEncoding(u8),
    #[error("malformed container: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, Copy)]
struct Reader<'a> {
    data: &'a [u8],
    endian: Endianness,
}

impl<'a> Reader<'a> {
    fn bytes(&self, off: usize, len: usize, what: &'static str) -> Result<&'a [u8], ElfError> {
        off.checked_add(len).and_then(|end| self.data.get(off..end)).ok_or(ElfError::Truncated(what))
    }

    fn u16(&self, off: usize, what: &'static str) -> Result<u16, ElfError> {
        let b = self.bytes(off, 2, what)?;
        Ok(self.endian.u16([b[0], b[1]]))
    }

    fn u32(&self, off: usize, what: &'static str) -> Result<u32, ElfError> {
        let b = self.bytes(off, 4, what)?;
        Ok(self.endian.u32([b[0], b[1], b[2], b[3]]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProgramHeader {
    pub p_type: u32,
    pub offset: u32,
    pub vaddr: u32,
    pub filesz: u32,
    pub memsz: u32,
    pub flags: u32,
    pub align: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionHeader {
    pub index: usize,
    pub name: String,
    pub sh_type: u32,
    pub flags: u32,
    pub addr: u32,
    pub offset: u32,
    pub size: u32,
    pub link: u32,
    pub info: u32,
    pub addralign: u32,
    pub entsize: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElfSymbol {
    pub name: String,
    pub value: u32,
    pub size: u32,
    pub bind: u8,
    pub sym_type: u8,
    pub shndx: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElfReloc {
    pub offset: u32,
    pub sym: u32,
    pub r_type: u32,
    /// Explicit addend for `SHT_RELA`; `None` when the addend lives in place.
    pub addend: Option<i32>,
}

/// A parsed ELF32 header with lazy access to the tables it points at.
#[derive(Debug, Clone)]
pub struct ElfFile<'a> {
    rd: Reader<'a>,
    pub e_type: u16,
    pub machine: u16,
    pub entry: u32,
    phoff: u32,
    shoff: u32,
    phentsize: u16,
    phnum: u16,
    shentsize: u16,
    shnum: u16,
    shstrndx: u16,
}

impl<'a> ElfFile<'a> {
    pub fn parse(data: &'a [u8]) -> Result<Self, ElfError> {
        if data.len() < 4 || &data[..4] != b"\x7fELF" {
            return Err(ElfError::BadMagic);
        }
        if data.len() < 6 {
            return Err(ElfError::Truncated("identification"));
        }
        match data[4] {
            1 => {}
            other => return Err(ElfError::UnsupportedClass(other)),
        }
        let endian = match data[5] {
            1 => Endianness::Little,
            2 => Endianness::Big,
            other => return Err(ElfError::BadEncoding(other)),
        };
        if data.len() < EHDR_SIZE {
            return Err(ElfError::Truncated("file header"));
        }
        let rd = Reader { data, endian };
        let file = ElfFile {
            rd,
            e_type: rd.u16(16, "e_type")?,
            machine: rd.u16(18, "e_machine")?,
            entry: rd.u32(24, "e_entry")?,
            phoff: rd.u32(28, "e_phoff")?,
            shoff: rd.u32(32, "e_shoff")?,
            phentsize: rd.u16(42, "e_phentsize")?,
            phnum: rd.u16(44, "e_phnum")?,
            shentsize: rd.u16(46, "e_shentsize")?,
            shnum: rd.u16(48, "e_shnum")?,
            shstrndx: rd.u16(50, "e_shstrndx")?,
        };
        if file.phnum > 0 && (file.phentsize as usize) < PHDR_SIZE {
            return Err(ElfError::Malformed("program header entry too small"));
        }
        if file.shnum > 0 && (file.shentsize as usize) < SHDR_SIZE {
            return Err(ElfError::Malformed("section header entry too small"));
        }
        Ok(file)
    }

    pub fn endian(&self) -> Endianness {
        self.rd.endian
    }

    pub fn data(&self) -> &'a [u8] {
        self.rd.data
    }

    pub fn program_headers(&self) -> Result<Vec<ProgramHeader>, ElfError> {
        let mut out = Vec::with_capacity(self.phnum as usize);
        for i in 0..self.phnum as usize {
            let base = self.phoff as usize + i * self.phentsize as usize;
            let r = &self.rd;
            out.push(ProgramHeader {
                p_type: r.u32(base, "program header")?,
                offset: r.u32(base + 4, "program header")?,
                vaddr: r.u32(base + 8, "program header")?,
                filesz: r.u32(base + 16, "program header")?,
                memsz: r.u32(base + 20, "program header")?,
                flags: r.u32(base + 24, "program header")?,
                align: r.u32(base + 28, "program header")?,
            });
        }
        Ok(out)
    }

    /// Bytes a program header maps from the file.
    pub fn segment_data(&self, ph: &ProgramHeader) -> Result<&'a [u8], ElfError> {
        self.rd.bytes(ph.offset as usize, ph.filesz as usize, "segment contents")
    }

    pub fn section_headers(&self) -> Result<Vec<SectionHeader>, ElfError> {
        let mut raw = Vec::with_capacity(self.shnum as usize);
        for i in 0..self.shnum as usize {
            let base = self.shoff as usize + i * self.shentsize as usize;
            let r = &self.rd;
            let name_off = r.u32(base, "section header")?;
            raw.push((
                name_off,
                SectionHeader {
                    index: i,
                    name: String::new(),
                    sh_type: r.u32(base + 4, "section header")?,
                    flags: r.u32(base + 8, "section header")?,
                    addr: r.u32(base + 12, "section header")?,
                    offset: r.u32(base + 16, "section header")?,
                    size: r.u32(base + 20, "section header")?,
                    link: r.u32(base + 24, "section header")?,
                    info: r.u32(base + 28, "section header")?,
                    addralign: r.u32(base + 32, "section header")?,
                    entsize: r.u32(base + 36, "section header")?,
                },
            ));
        }
        let strtab = match raw.get(self.shstrndx as usize) {
            Some((_, sh)) if self.shstrndx != 0 && sh.sh_type == SHT_STRTAB => Some(self.section_data(sh)?),
            _ => None,
        };
        Ok(raw
            .into_iter()
            .map(|(name_off, mut sh)| {
                if let Some(tab) = strtab {
                    sh.name = cstr_at(tab, name_off as usize).unwrap_or_default();
                }
                sh
            })
            .collect())
    }

    /// Stored bytes of a section; empty for `SHT_NOBITS`.
    pub fn section_data(&self, sh: &SectionHeader) -> Result<&'a [u8], ElfError> {
        if sh.sh_type == SHT_NOBITS || sh.sh_type == SHT_NULL {
            return Ok(&[]);
        }
        self.rd.bytes(sh.offset as usize, sh.size as usize, "section contents")
    }

    pub fn symbols(&self, sections: &[SectionHeader], symtab: &SectionHeader) -> Result<Vec<ElfSymbol>, ElfError> {
        let data = self.section_data(symtab)?;
        let strtab = sections.get(symtab.link as usize).ok_or(ElfError::Malformed("symbol table string link"))?;
        let strings = self.section_data(strtab)?;
        let entsize = if symtab.entsize == 0 { 16 } else { symtab.entsize as usize };
        if entsize < 16 {
            return Err(ElfError::Malformed("symbol entry too small"));
        }
        let rd = Reader { data, endian: self.rd.endian };
        let count = data.len() / entsize;
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            let b = i * entsize;
            let name_off = rd.u32(b, "symbol")?;
            let info = rd.bytes(b + 12, 1, "symbol")?[0];
            out.push(ElfSymbol {
                name: cstr_at(strings, name_off as usize).unwrap_or_default(),
                value: rd.u32(b + 4, "symbol")?,
                size: rd.u32(b + 8, "symbol")?,
                bind: info >> 4,
                sym_type: info & 0xf,
                shndx: rd.u16(b + 14, "symbol")?,
            });
        }
        Ok(out)
    }

    pub fn relocations(&self, sh: &SectionHeader) -> Result<Vec<ElfReloc>, ElfError> {
        let data = self.section_data(sh)?;
        let rela = sh.sh_type == SHT_RELA;
        let min = if rela { 12 } else { 8 };
        let entsize = if sh.entsize == 0 { min } else { sh.entsize as usize };
        if entsize < min {
            return Err(ElfError::Malformed("relocation entry too small"));
        }
        let rd = Reader { data, endian: self.rd.endian };
        let mut out = Vec::with_capacity(data.len() / entsize);
        for i in 0..data.len() / entsize {
            let b = i * entsize;
            let info = rd.u32(b + 4, "relocation")?;
            out.push(ElfReloc {
                offset: rd.u32(b, "relocation")?,
                sym: info >> 8,
                r_type: info & 0xff,
                addend: if rela { Some(rd.u32(b + 8, "relocation")? as i32) } else { None },
            });
        }
        Ok(out)
    }
}

fn cstr_at(tab: &[u8], off: usize) -> Option<String> {
    let rest = tab.get(off..)?;
    let end = rest.iter().position(|&b| b == 0)?;
    core::str::from_utf8(&rest[..end]).ok().map(String::from)
}

/// Writer for the two container shapes the toolkit produces: executables
/// (program headers only) and relocatable objects (sections, one symbol
/// table, REL relocation sections).
pub mod write {
    use super::*;
    use alloc::vec;

    #[derive(Debug, Clone)]
    pub struct LoadSegment {
        pub vaddr: u32,
        pub data: Vec<u8>,
        pub memsz: u32,
        pub flags: u32,
    }

    struct Out {
        buf: Vec<u8>,
        endian: Endianness,
    }

    impl Out {
        fn u16(&mut self, v: u16) {
            self.buf.extend_from_slice(&self.endian.u16_bytes(v));
        }
        fn u32(&mut self, v: u32) {
            self.buf.extend_from_slice(&self.endian.u32_bytes(v));
        }
        fn pad_to(&mut self, align: usize) {
            while !self.buf.len().is_multiple_of(align) {
                self.buf.push(0);
            }
        }
    }

    #[allow(clippy::too_many_arguments)] // one per ELF header field
    fn ident(
        out: &mut Out,
        e_type: u16,
        machine: u16,
        entry: u32,
        phoff: u32,
        shoff: u32,
        phnum: u16,
        shnum: u16,
        shstrndx: u16,
    ) {
        out.buf.extend_from_slice(b"\x7fELF");
        out.buf.push(1);
        out.buf.push(match out.endian {
            Endianness::Little => 1,
            Endianness::Big => 2,
        });
        out.buf.push(1);
        out.buf.extend_from_slice(&[0; 9]);
        out.u16(e_type);
        out.u16(machine);
        out.u32(1);
        out.u32(entry);
        out.u32(phoff);
        out.u32(shoff);
        out.u32(0);
        out.u16(EHDR_SIZE as u16);
        out.u16(if phnum > 0 { PHDR_SIZE as u16 } else { 0 });
        out.u16(phnum);
        out.u16(if shnum > 0 { SHDR_SIZE as u16 } else { 0 });
        out.u16(shnum);
        out.u16(shstrndx);
    }

    /// Serializes an executable with one `PT_LOAD` per segment and no
    /// section headers.
    pub fn executable(machine: u16, endian: Endianness, entry: u32, segments: &[LoadSegment]) -> Vec<u8> {
        let mut out = Out { buf: Vec::new(), endian };
        let phnum = segments.len() as u16;
        ident(&mut out, ET_EXEC, machine, entry, EHDR_SIZE as u32, 0, phnum, 0, 0);
        let mut offset = EHDR_SIZE + PHDR_SIZE * segments.len();
        let mut offsets = Vec::with_capacity(segments.len());
        for seg in segments {
            offset = crate::align_up(offset as u64, 4) as usize;
            offsets.push(offset);
            offset += seg.data.len();
        }
        for (seg, off) in segments.iter().zip(&offsets) {
            out.u32(PT_LOAD);
            out.u32(if seg.data.is_empty() { 0 } else { *off as u32 });
            out.u32(seg.vaddr);
            out.u32(seg.vaddr);
            out.u32(seg.data.len() as u32);
            out.u32(seg.memsz.max(seg.data.len() as u32));
            out.u32(seg.flags);
            out.u32(4);
        }
        for (seg, off) in segments.iter().zip(&offsets) {
            out.buf.resize(*off, 0);
            out.buf.extend_from_slice(&seg.data);
        }
        out.buf
    }

    #[derive(Debug, Clone)]
    pub struct ObjSection {
        pub name: String,
        pub data: Vec<u8>,
        /// Size for `nobits` sections; ignored otherwise.
        pub size: u32,
        pub align: u32,
        pub flags: u32,
        pub nobits: bool,
    }

    #[derive(Debug, Clone)]
    pub struct ObjSymbol {
        pub name: String,
        /// Index into the section list; `None` for undefined symbols.
        pub section: Option<usize>,
        pub value: u32,
        pub global: bool,
        pub sym_type: u8,
    }

    #[derive(Debug, Clone)]
    pub struct ObjReloc {
        pub section: usize,
        pub offset: u32,
        /// Index into the symbol list.
        pub symbol: usize,
        pub r_type: u32,
    }

    /// Serializes a relocatable object. Relocations use `SHT_REL`, so any
    /// addend must already be stored in the section bytes.
    pub fn relocatable(
        machine: u16,
        endian: Endianness,
        sections: &[ObjSection],
        symbols: &[ObjSymbol],
        relocs: &[ObjReloc],
    ) -> Vec<u8> {
        // Section order: null, user sections, .rel.<sec>..., .symtab, .strtab, .shstrtab
        let rel_targets: Vec<usize> = (0..sections.len()).filter(|i| relocs.iter().any(|r| r.section == *i)).collect();
        let symtab_idx = 1 + sections.len() + rel_targets.len();
        let strtab_idx = symtab_idx + 1;
        let shstrtab_idx = strtab_idx + 1;
        let shnum = shstrtab_idx + 1;

        let mut shstr = vec![0u8];
        let name_of = |s: &str, tab: &mut Vec<u8>| -> u32 {
            let off = tab.len() as u32;
            tab.extend_from_slice(s.as_bytes());
            tab.push(0);
            off
        };
        let sec_names: Vec<u32> = sections.iter().map(|s| name_of(&s.name, &mut shstr)).collect();
        let rel_names: Vec<u32> =
            rel_targets.iter().map(|&i| name_of(&alloc::format!(".rel{}", sections[i].name), &mut shstr)).collect();
        let symtab_name = name_of(".symtab", &mut shstr);
        let strtab_name = name_of(".strtab", &mut shstr);
        let shstrtab_name = name_of(".shstrtab", &mut shstr);

        // Symbol table: null, section symbols, locals, globals (ELF wants locals first).
        let mut strtab = vec![0u8];
        let mut order: Vec<usize> = (0..symbols.len()).filter(|&i| !symbols[i].global).collect();
        let first_global = 1 + sections.len() + order.len();
        order.extend((0..symbols.len()).filter(|&i| symbols[i].global));
        let mut sym_index = vec![0u32; symbols.len()];
        let mut symtab = Out { buf: vec![0u8; 16], endian };
        for (i, _) in sections.iter().enumerate() {
            symtab.u32(0);
            symtab.u32(0);
            symtab.u32(0);
            symtab.buf.push(STT_SECTION);
            symtab.buf.push(0);
            symtab.u16((i + 1) as u16);
        }
        for (pos, &i) in order.iter().enumerate() {
            let s = &symbols[i];
            sym_index[i] = (1 + sections.len() + pos) as u32;
            let name = name_of(&s.name, &mut strtab);
            symtab.u32(name);
            symtab.u32(s.value);
            symtab.u32(0);
            let bind = if s.global { STB_GLOBAL } else { STB_LOCAL };
            symtab.buf.push((bind << 4) | s.sym_type);
            symtab.buf.push(0);
            symtab.u16(s.section.map(|x| (x + 1) as u16).unwrap_or(SHN_UNDEF));
        }

        let mut rel_blobs = Vec::new();
        for &t in &rel_targets {
            let mut blob = Out { buf: Vec::new(), endian };
            for r in relocs.iter().filter(|r| r.section == t) {
                blob.u32(r.offset);
                blob.u32((sym_index[r.symbol] << 8) | (r.r_type & 0xff));
            }
            rel_blobs.push(blob.buf);
        }

        // Body layout.
        let mut out = Out { buf: Vec::new(), endian };
        ident(&mut out, ET_REL, machine, 0, 0, 0, 0, shnum as u16, shstrtab_idx as u16);
        let place = |out: &mut Out, data: &[u8], align: u32| -> u32 {
            out.pad_to(align.max(1) as usize);
            let off = out.buf.len() as u32;
            out.buf.extend_from_slice(data);
            off
        };
        let sec_offs: Vec<u32> = sections
            .iter()
            .map(|s| if s.nobits { out.buf.len() as u32 } else { place(&mut out, &s.data, s.align) })
            .collect();
        let rel_offs: Vec<u32> = rel_blobs.iter().map(|b| place(&mut out, b, 4)).collect();
        let symtab_off = place(&mut out, &symtab.buf, 4);
        let strtab_off = place(&mut out, &strtab, 1);
        let shstr_off = place(&mut out, &shstr, 1);
        out.pad_to(4);
        let shoff = out.buf.len() as u32;
        out.buf[32..36].copy_from_slice(&endian.u32_bytes(shoff));

        let shdr = |out: &mut Out, f: [u32; 10]| {
            for v in f {
                out.u32(v);
            }
        };
        shdr(&mut out, [0; 10]);
        for (i, s) in sections.iter().enumerate() {
            let (ty, size) = if s.nobits { (SHT_NOBITS, s.size) } else { (SHT_PROGBITS, s.data.len() as u32) };
            shdr(&mut out, [sec_names[i], ty, s.flags, 0, sec_offs[i], size, 0, 0, s.align, 0]);
        }
        for (k, &t) in rel_targets.iter().enumerate() {
            shdr(
                &mut out,
                [
                    rel_names[k],
                    SHT_REL,
                    0,
                    0,
                    rel_offs[k],
                    rel_blobs[k].len() as u32,
                    symtab_idx as u32,
                    (t + 1) as u32,
                    4,
                    8,
                ],
            );
        }
        shdr(
            &mut out,
            [
                symtab_name,
                SHT_SYMTAB,
                0,
                0,
                symtab_off,
                symtab.buf.len() as u32,
                strtab_idx as u32,
                first_global as u32,
                4,
                16,
            ],
        );
        shdr(&mut out, [strtab_name, SHT_STRTAB, 0, 0, strtab_off, strtab.len() as u32, 0, 0, 1, 0]);
        shdr(&mut out, [shstrtab_name, SHT_STRTAB, 0, 0, shstr_off, shstr.len() as u32, 0, 0, 1, 0]);
        out.buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_64_bit() {
        assert_eq!(ElfFile::parse(&[]).unwrap_err(), ElfError::BadMagic);
        let mut hdr = [0u8; 64];
        hdr[..4].copy_from_slice(b"\x7fELF");
        hdr[4] = 2;
        hdr[5] = 1;
        assert_eq!(ElfFile::parse(&hdr).unwrap_err(), ElfError::UnsupportedClass(2));
    }

    #[test]
    fn executable_round_trip() {
        let segs = [
            write::LoadSegment { vaddr: 0x1000, data: alloc::vec![1, 2, 3, 4], memsz: 4, flags: PF_R | PF_X },
            write::LoadSegment { vaddr: 0x2000, data: alloc::vec![], memsz: 0x40, flags: PF_R | PF_W },
        ];
        let bytes = write::executable(EM_ARM, Endianness::Big, 0x1000, &segs);
        let elf = ElfFile::parse(&bytes).unwrap();
        assert_eq!(elf.endian(), Endianness::Big);
        assert_eq!(elf.machine, EM_ARM);
        assert_eq!(elf.entry, 0x1000);
        let phs = elf.program_headers().unwrap();
        assert_eq!(phs.len(), 2);
        assert_eq!(elf.segment_data(&phs[0]).unwrap(), &[1, 2, 3, 4]);
        assert_eq!(phs[1].memsz, 0x40);
        assert_eq!(phs[1].filesz, 0);
    }
}
