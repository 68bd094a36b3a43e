//! Firmware images as an addressed byte space made of segments.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::elf::{self, ElfError, ElfFile};

/// Default cap on the span produced by [`FirmwareImage::emit_flat`].
pub const DEFAULT_SPAN_CAP: u64 = 512 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Arch {
    #[cfg_attr(feature = "serde", serde(rename = "x86"))]
    X86,
    #[cfg_attr(feature = "serde", serde(rename = "arm"))]
    Arm,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::X86 => "x86",
            Arch::Arm => "arm",
        }
    }
}

impl core::str::FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "x86" | "x86_32" | "i386" => Ok(Arch::X86),
            "arm" | "arm32" => Ok(Arch::Arm),
            other => Err(format!("unknown architecture `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Endianness {
    #[cfg_attr(feature = "serde", serde(rename = "le"))]
    Little,
    #[cfg_attr(feature = "serde", serde(rename = "be"))]
    Big,
}

impl Endianness {
    pub fn u16(self, b: [u8; 2]) -> u16 {
        match self {
            Endianness::Little => u16::from_le_bytes(b),
            Endianness::Big => u16::from_be_bytes(b),
        }
    }

    pub fn u32(self, b: [u8; 4]) -> u32 {
        match self {
            Endianness::Little => u32::from_le_bytes(b),
            Endianness::Big => u32::from_be_bytes(b),
        }
    }

    pub fn u16_bytes(self, v: u16) -> [u8; 2] {
        match self {
            Endianness::Little => v.to_le_bytes(),
            Endianness::Big => v.to_be_bytes(),
        }
    }

    pub fn u32_bytes(self, v: u32) -> [u8; 4] {
        match self {
            Endianness::Little => v.to_le_bytes(),
            Endianness::Big => v.to_be_bytes(),
        }
    }

    /// Reads a `u32` from the first four bytes of `b`.
    pub fn read_u32(self, b: &[u8]) -> u32 {
        self.u32([b[0], b[1], b[2], b[3]])
    }
}

impl core::str::FromStr for Endianness {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "le" | "little" => Ok(Endianness::Little),
            "be" | "big" => Ok(Endianness::Big),
            other => Err(format!("unknown endianness `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceFormat {
    Elf,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SegmentKind {
    Code,
    Data,
    Bss,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SegmentData {
    Stored(Vec<u8>),
    Zero(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub start: u32,
    pub kind: SegmentKind,
    pub writable: bool,
    pub executable: bool,
    data: SegmentData,
}

impl Segment {
    pub fn code(name: &str, start: u32, bytes: Vec<u8>) -> Self {
        Segment {
            name: name.to_string(),
            start,
            kind: SegmentKind::Code,
            writable: false,
            executable: true,
            data: SegmentData::Stored(bytes),
        }
    }

    pub fn data(name: &str, start: u32, bytes: Vec<u8>) -> Self {
        Segment {
            name: name.to_string(),
            start,
            kind: SegmentKind::Data,
            writable: true,
            executable: false,
            data: SegmentData::Stored(bytes),
        }
    }

    pub fn bss(name: &str, start: u32, len: u32) -> Self {
        Segment {
            name: name.to_string(),
            start,
            kind: SegmentKind::Bss,
            writable: true,
            executable: false,
            data: SegmentData::Zero(len),
        }
    }

    pub fn len(&self) -> u32 {
        match &self.data {
            SegmentData::Stored(b) => b.len() as u32,
            SegmentData::Zero(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One past the last address, widened so a segment may touch 2^32.
    pub fn end(&self) -> u64 {
        self.start as u64 + self.len() as u64
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.start && (addr as u64) < self.end()
    }

    /// Stored bytes; `None` for zero-initialized segments.
    pub fn bytes(&self) -> Option<&[u8]> {
        match &self.data {
            SegmentData::Stored(b) => Some(b),
            SegmentData::Zero(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ImageError {
    #[error("malformed container: {0}")]
    MalformedContainer(String),
    #[error("unsupported container class (only 32-bit images are handled)")]
    UnsupportedClass,
    #[error("unsupported machine type {0}")]
    UnsupportedMachine(u16),
    #[error("base address {0:#x} is not 4-aligned")]
    MisalignedBase(u32),
    #[error("address range {addr:#010x}+{len} is not mapped")]
    Unmapped { addr: u32, len: u32 },
    #[error("write to non-writable segment at {0:#010x}")]
    ReadOnlyViolation(u32),
    #[error("flat span of {span} bytes exceeds the cap of {cap}")]
    SpanTooLarge { span: u64, cap: u64 },
    #[error("segment `{0}` overlaps an existing segment")]
    Overlap(String),
    #[error("segment `{0}` wraps the 32-bit address space")]
    Wraps(String),
    #[error("image has no segments")]
    Empty,
}

impl From<ElfError> for ImageError {
    fn from(e: ElfError) -> Self {
        match e {
            ElfError::UnsupportedClass(_) => ImageError::UnsupportedClass,
            other => ImageError::MalformedContainer(other.to_string()),
        }
    }
}

/// A loaded firmware image.
///
/// Segments are kept sorted by start address and never overlap. Every
/// 32-bit address is either inside exactly one segment or unmapped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FirmwareImage {
    pub arch: Arch,
    pub endianness: Endianness,
    pub base_address: u32,
    pub entry_point: Option<u32>,
    pub source_format: SourceFormat,
    /// Refuse writes into non-writable segments. Off by default: patching
    /// code is the point.
    pub forbid_code_writes: bool,
    segments: Vec<Segment>,
}

impl FirmwareImage {
    pub fn new(
        arch: Arch,
        endianness: Endianness,
        segments: Vec<Segment>,
        entry_point: Option<u32>,
        source_format: SourceFormat,
    ) -> Result<Self, ImageError> {
        let mut image = FirmwareImage {
            arch,
            endianness,
            base_address: 0,
            entry_point,
            source_format,
            forbid_code_writes: false,
            segments: Vec::new(),
        };
        for seg in segments {
            image.add_segment(seg)?;
        }
        image.base_address = image.segments.first().map_or(0, |s| s.start);
        Ok(image)
    }

    /// Parses a 32-bit ELF executable. Each `PT_LOAD` becomes a segment;
    /// a `memsz` tail past `filesz` becomes a separate BSS segment.
    pub fn load_elf(bytes: &[u8]) -> Result<Self, ImageError> {
        let elf = ElfFile::parse(bytes)?;
        let arch = match elf.machine {
            elf::EM_386 => Arch::X86,
            elf::EM_ARM => Arch::Arm,
            other => return Err(ImageError::UnsupportedMachine(other)),
        };
        let mut segments = Vec::new();
        for (i, ph) in elf.program_headers()?.iter().enumerate() {
            if ph.p_type != elf::PT_LOAD || ph.memsz == 0 {
                continue;
            }
            if ph.filesz > ph.memsz {
                return Err(ImageError::MalformedContainer(format!("segment {i}: filesz > memsz")));
            }
            let name = format!("load{i}");
            let stored = elf.segment_data(ph)?;
            if !stored.is_empty() {
                let mut seg = if ph.flags & elf::PF_X != 0 {
                    Segment::code(&name, ph.vaddr, stored.to_vec())
                } else {
                    Segment::data(&name, ph.vaddr, stored.to_vec())
                };
                seg.writable = ph.flags & elf::PF_W != 0;
                seg.executable = ph.flags & elf::PF_X != 0;
                segments.push(seg);
            }
            if ph.memsz > ph.filesz {
                let start = ph
                    .vaddr
                    .checked_add(ph.filesz)
                    .ok_or_else(|| ImageError::MalformedContainer(format!("segment {i} wraps the address space")))?;
                let suffix = if stored.is_empty() { name.clone() } else { format!("{name}.bss") };
                segments.push(Segment::bss(&suffix, start, ph.memsz - ph.filesz));
            }
        }
        segments.sort_by_key(|s| s.start);
        FirmwareImage::new(arch, elf.endian(), segments, Some(elf.entry), SourceFormat::Elf).map_err(|e| match e {
            ImageError::Overlap(n) | ImageError::Wraps(n) => {
                ImageError::MalformedContainer(format!("loadable region `{n}` overlaps or wraps"))
            }
            other => other,
        })
    }

    /// Treats `bytes` as one code segment at `base`.
    pub fn load_raw(bytes: &[u8], base: u32, arch: Arch, endianness: Endianness) -> Result<Self, ImageError> {
        if arch == Arch::Arm && !base.is_multiple_of(4) {
            return Err(ImageError::MisalignedBase(base));
        }
        let mut seg = Segment::code("raw", base, bytes.to_vec());
        seg.writable = true;
        FirmwareImage::new(arch, endianness, vec![seg], Some(base), SourceFormat::Raw)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// Inserts a segment, keeping the map sorted and non-overlapping.
    pub fn add_segment(&mut self, seg: Segment) -> Result<(), ImageError> {
        if seg.end() > 1u64 << 32 {
            return Err(ImageError::Wraps(seg.name));
        }
        let pos = self.segments.partition_point(|s| s.start < seg.start || (s.start == seg.start && s.is_empty()));
        let overlaps = |o: &Segment| {
            !o.is_empty() && !seg.is_empty() && (o.start as u64) < seg.end() && (seg.start as u64) < o.end()
        };
        if self.segments.iter().any(overlaps) {
            return Err(ImageError::Overlap(seg.name));
        }
        self.segments.insert(pos, seg);
        if let Some(first) = self.segments.first() {
            self.base_address = self.base_address.min(first.start);
        }
        Ok(())
    }

    /// Index of the segment containing `addr`, if any.
    pub fn segment_index(&self, addr: u32) -> Option<usize> {
        let i = self.segments.partition_point(|s| s.start <= addr);
        (0..i).rev().find(|&j| !self.segments[j].is_empty()).filter(|&j| self.segments[j].contains(addr))
    }

    pub fn segment_at(&self, addr: u32) -> Option<&Segment> {
        self.segment_index(addr).map(|i| &self.segments[i])
    }

    pub fn is_mapped(&self, addr: u32) -> bool {
        self.segment_index(addr).is_some()
    }

    pub fn is_code(&self, addr: u32) -> bool {
        self.segment_at(addr).is_some_and(|s| s.kind == SegmentKind::Code)
    }

    pub fn min_start(&self) -> Option<u32> {
        self.segments.iter().filter(|s| !s.is_empty()).map(|s| s.start).min()
    }

    pub fn max_end(&self) -> Option<u64> {
        self.segments.iter().filter(|s| !s.is_empty()).map(|s| s.end()).max()
    }

    /// Copies `out.len()` bytes starting at `addr`. Reads may cross the
    /// boundary between two touching segments but never a gap.
    pub fn read_into(&self, addr: u32, out: &mut [u8]) -> Result<(), ImageError> {
        let unmapped = ImageError::Unmapped { addr, len: out.len() as u32 };
        if (addr as u64) + out.len() as u64 > 1u64 << 32 {
            return Err(unmapped);
        }
        let mut done = 0usize;
        while done < out.len() {
            let cur = addr + done as u32;
            let seg = self.segment_at(cur).ok_or(unmapped.clone())?;
            let off = (cur - seg.start) as usize;
            let n = (seg.len() as usize - off).min(out.len() - done);
            match &seg.data {
                SegmentData::Stored(b) => out[done..done + n].copy_from_slice(&b[off..off + n]),
                SegmentData::Zero(_) => out[done..done + n].fill(0),
            }
            done += n;
        }
        Ok(())
    }

    pub fn read(&self, addr: u32, len: u32) -> Result<Vec<u8>, ImageError> {
        let mut out = vec![0u8; len as usize];
        self.read_into(addr, &mut out)?;
        Ok(out)
    }

    pub fn read_u32(&self, addr: u32) -> Result<u32, ImageError> {
        let mut b = [0u8; 4];
        self.read_into(addr, &mut b)?;
        Ok(self.endianness.u32(b))
    }

    /// Reads a NUL-terminated string of at most `max` bytes (excluding the
    /// terminator). Returns the raw bytes without the NUL.
    pub fn read_cstr(&self, addr: u32, max: usize) -> Option<Vec<u8>> {
        let seg = self.segment_at(addr)?;
        let mut out = Vec::new();
        let mut cur = addr;
        let mut seg = seg;
        loop {
            if !seg.contains(cur) {
                seg = self.segment_at(cur)?;
            }
            let b = match &seg.data {
                SegmentData::Stored(b) => b[(cur - seg.start) as usize],
                SegmentData::Zero(_) => 0,
            };
            if b == 0 {
                return Some(out);
            }
            if out.len() == max {
                return None;
            }
            out.push(b);
            cur = cur.checked_add(1)?;
        }
    }

    pub fn write(&mut self, addr: u32, bytes: &[u8]) -> Result<(), ImageError> {
        let unmapped = ImageError::Unmapped { addr, len: bytes.len() as u32 };
        if (addr as u64) + bytes.len() as u64 > 1u64 << 32 {
            return Err(unmapped);
        }
        // Validate the whole range before touching anything.
        let mut cur = addr as u64;
        let end = addr as u64 + bytes.len() as u64;
        while cur < end {
            let seg = self.segment_at(cur as u32).ok_or(unmapped.clone())?;
            if self.forbid_code_writes && !seg.writable {
                return Err(ImageError::ReadOnlyViolation(cur as u32));
            }
            cur = seg.end().min(end);
        }
        let mut done = 0usize;
        while done < bytes.len() {
            let cur = addr + done as u32;
            let idx = self.segment_index(cur).ok_or(unmapped.clone())?;
            let seg = &mut self.segments[idx];
            if let SegmentData::Zero(n) = seg.data {
                seg.data = SegmentData::Stored(vec![0; n as usize]);
                seg.kind = SegmentKind::Data;
            }
            let off = (cur - seg.start) as usize;
            let SegmentData::Stored(buf) = &mut seg.data else { unreachable!() };
            let n = (buf.len() - off).min(bytes.len() - done);
            buf[off..off + n].copy_from_slice(&bytes[done..done + n]);
            done += n;
        }
        Ok(())
    }

    pub fn write_u32(&mut self, addr: u32, value: u32) -> Result<(), ImageError> {
        let b = self.endianness.u32_bytes(value);
        self.write(addr, &b)
    }

    /// Lays the image out as one contiguous buffer from the lowest segment
    /// start to the highest end. Gaps and BSS take `fill`.
    pub fn emit_flat(&self, fill: u8, cap: u64) -> Result<Vec<u8>, ImageError> {
        let (Some(lo), Some(hi)) = (self.min_start(), self.max_end()) else {
            return if self.segments.is_empty() { Err(ImageError::Empty) } else { Ok(Vec::new()) };
        };
        let span = hi - lo as u64;
        if span > cap {
            return Err(ImageError::SpanTooLarge { span, cap });
        }
        let mut out = vec![fill; span as usize];
        for seg in &self.segments {
            if let SegmentData::Stored(b) = &seg.data {
                let off = (seg.start - lo) as usize;
                out[off..off + b.len()].copy_from_slice(b);
            }
        }
        Ok(out)
    }
}
