//! Embedded symbol-table recovery for VxWorks-style fixed-stride records.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::funcgraph::CallGraph;
use crate::image::{FirmwareImage, SegmentKind};

pub const DEFAULT_MIN_RUN: usize = 50;
const MIN_SCAN_RUN: usize = 8;
const MAX_NAME_LEN: usize = 255;
/// Default number of invalid records bridged when merging runs.
pub const DEFAULT_MAX_GAP: usize = 64;

/// Byte layout of one symbol record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SymbolLayout {
    pub stride: u32,
    pub name_ptr_offset: u32,
    pub value_offset: u32,
    pub type_offset: Option<u32>,
}

impl SymbolLayout {
    /// Name pointer at +0, value at +4, 20-byte records.
    pub const VXWORKS_FLAT: SymbolLayout =
        SymbolLayout { stride: 20, name_ptr_offset: 0, value_offset: 4, type_offset: None };

    /// VxWorks 6.x `SYMBOL`: hash node, name, value, symRef, group, type.
    pub const VXWORKS6_STRUCT: SymbolLayout =
        SymbolLayout { stride: 20, name_ptr_offset: 4, value_offset: 8, type_offset: Some(18) };

    pub fn new(
        stride: u32,
        name_ptr_offset: u32,
        value_offset: u32,
        type_offset: Option<u32>,
    ) -> Result<Self, SymrecError> {
        let l = SymbolLayout { stride, name_ptr_offset, value_offset, type_offset };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<(), SymrecError> {
        let fits = |off: u32, w: u32| off.checked_add(w).is_some_and(|e| e <= self.stride);
        if self.name_ptr_offset == self.value_offset
            || !fits(self.name_ptr_offset, 4)
            || !fits(self.value_offset, 4)
            || self.type_offset.is_some_and(|t| !fits(t, 1))
        {
            return Err(SymrecError::BadLayout);
        }
        Ok(())
    }
}

impl Default for SymbolLayout {
    fn default() -> Self {
        SymbolLayout::VXWORKS_FLAT
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Provenance {
    EmbeddedTable,
    Matched,
    Analyst,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolEntry {
    pub name: String,
    pub value: u32,
    pub sym_type: Option<u8>,
    pub record_addr: Option<u32>,
    pub provenance: Provenance,
    /// Value does not resolve inside the image.
    pub external: bool,
}

/// Name/address bindings with indexes both ways. Aliases (several names
/// on one address) are kept.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SymbolTable {
    entries: Vec<SymbolEntry>,
    by_name: BTreeMap<String, usize>,
    by_addr: BTreeMap<u32, Vec<usize>>,
}

impl SymbolTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an entry. A name that is already bound keeps its first value.
    pub fn insert(&mut self, entry: SymbolEntry) {
        let idx = self.entries.len();
        self.by_name.entry(entry.name.clone()).or_insert(idx);
        self.by_addr.entry(entry.value).or_default().push(idx);
        self.entries.push(entry);
    }

    pub fn lookup(&self, name: &str) -> Option<&SymbolEntry> {
        self.by_name.get(name).map(|&i| &self.entries[i])
    }

    pub fn value_of(&self, name: &str) -> Option<u32> {
        self.lookup(name).map(|e| e.value)
    }

    pub fn names_at(&self, addr: u32) -> impl Iterator<Item = &str> {
        self.by_addr.get(&addr).into_iter().flatten().map(|&i| self.entries[i].name.as_str())
    }

    pub fn entries(&self) -> &[SymbolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: impl IntoIterator<Item = SymbolEntry>) {
        for e in other {
            self.insert(e);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SymrecError {
    #[error("symbol layout offsets overlap or exceed the stride")]
    BadLayout,
    #[error("{invalid} of {total} records are invalid; layout does not fit this region")]
    LayoutMismatch { invalid: usize, total: usize },
}

/// Name referenced by a record's pointer: NUL-terminated, 2..=255 bytes,
/// at least 90% printable.
fn name_at(image: &FirmwareImage, ptr: u32) -> Option<String> {
    let raw = image.read_cstr(ptr, MAX_NAME_LEN)?;
    if raw.len() < 2 {
        return None;
    }
    let printable = raw.iter().filter(|&&b| (0x21..0x7f).contains(&b)).count();
    if printable * 10 < raw.len() * 9 {
        return None;
    }
    Some(raw.iter().map(|&b| if (0x21..0x7f).contains(&b) { b as char } else { '?' }).collect())
}

struct Record {
    name: Option<String>,
    value: u32,
    sym_type: Option<u8>,
}

fn record_at(image: &FirmwareImage, layout: &SymbolLayout, addr: u32) -> Option<Record> {
    let name_ptr = image.read_u32(addr.checked_add(layout.name_ptr_offset)?).ok()?;
    let value = image.read_u32(addr.checked_add(layout.value_offset)?).ok()?;
    let sym_type = match layout.type_offset {
        Some(t) => Some(image.read(addr.checked_add(t)?, 1).ok()?[0]),
        None => None,
    };
    Some(Record { name: name_at(image, name_ptr), value, sym_type })
}

fn record_valid(image: &FirmwareImage, layout: &SymbolLayout, addr: u32) -> bool {
    record_at(image, layout, addr).is_some_and(|r| r.name.is_some() && image.is_mapped(r.value))
}

/// Finds maximal runs of at least `min_run` consecutive well-formed
/// records. Results are disjoint `[start, end)` intervals sorted by start.
/// `min_run` below 8 is raised to 8.
pub fn scan_for_table(image: &FirmwareImage, layout: &SymbolLayout, min_run: usize) -> Vec<(u32, u32)> {
    let min_run = min_run.max(MIN_SCAN_RUN);
    let stride = layout.stride as u64;
    let mut runs: Vec<(u32, u32)> = Vec::new();
    for seg in image.segments() {
        if seg.bytes().is_none() || seg.kind == SegmentKind::Bss {
            continue;
        }
        let seg_end = seg.end();
        let first = crate::align_up(seg.start as u64, 4);
        for phase in (0..stride).step_by(4) {
            let mut run_start: Option<u64> = None;
            let mut count = 0usize;
            let mut addr = first + phase;
            loop {
                let fits = addr + stride <= seg_end;
                if fits && record_valid(image, layout, addr as u32) {
                    run_start.get_or_insert(addr);
                    count += 1;
                } else {
                    if let Some(s) = run_start.take() {
                        if count >= min_run {
                            runs.push((s as u32, (s + count as u64 * stride) as u32));
                        }
                    }
                    count = 0;
                }
                if !fits {
                    break;
                }
                addr += stride;
            }
        }
    }
    // Keep runs disjoint: longer run wins, then lower address.
    runs.sort_by_key(|&(s, e)| (core::cmp::Reverse(e - s), s));
    let mut kept: Vec<(u32, u32)> = Vec::new();
    for r in runs {
        if kept.iter().all(|k| r.1 <= k.0 || r.0 >= k.1) {
            kept.push(r);
        }
    }
    kept.sort();
    kept
}

/// Groups same-phase runs separated by at most `max_gap` records into one
/// region, then extends each region outward across stretches of damaged
/// records as long as a well-formed record follows within `max_gap`.
///
/// Symbol tables with scattered corruption break into many short clean
/// stretches; parsing the merged region recovers the short ones too.
pub fn table_regions(
    image: &FirmwareImage,
    layout: &SymbolLayout,
    runs: &[(u32, u32)],
    max_gap: usize,
) -> Vec<(u32, u32)> {
    let stride = layout.stride;
    let gap_bytes = max_gap as u64 * stride as u64;
    let mut merged: Vec<(u32, u32)> = Vec::new();
    for &(s, e) in runs {
        if let Some(last) = merged.last_mut() {
            let same_phase = (s - last.0) % stride == 0;
            if same_phase && s >= last.1 && (s - last.1) as u64 <= gap_bytes && same_segment(image, last.0, s) {
                last.1 = e;
                continue;
            }
        }
        merged.push((s, e));
    }
    for region in merged.iter_mut() {
        // Backward.
        loop {
            let mut probe = region.0;
            let mut found = None;
            for _ in 0..=max_gap {
                let Some(p) = probe.checked_sub(stride) else { break };
                if !same_segment(image, region.0, p) {
                    break;
                }
                probe = p;
                if record_valid(image, layout, p) {
                    found = Some(p);
                    break;
                }
            }
            match found {
                Some(p) => region.0 = p,
                None => break,
            }
        }
        // Forward.
        loop {
            let mut probe = region.1;
            let mut found = None;
            for _ in 0..=max_gap {
                if !same_segment(image, region.0, probe) || !image.is_mapped(probe.saturating_add(stride - 1)) {
                    break;
                }
                if record_valid(image, layout, probe) {
                    found = Some(probe);
                    break;
                }
                probe += stride;
            }
            match found {
                Some(p) => region.1 = p + stride,
                None => break,
            }
        }
    }
    // Extension can make neighbours touch; drop anything now covered.
    let mut out: Vec<(u32, u32)> = Vec::new();
    for r in merged {
        match out.last_mut() {
            Some(last) if r.0 < last.1 => last.1 = last.1.max(r.1),
            _ => out.push(r),
        }
    }
    out
}

fn same_segment(image: &FirmwareImage, a: u32, b: u32) -> bool {
    match (image.segment_index(a), image.segment_index(b)) {
        (Some(x), Some(y)) => x == y,
        _ => false,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedTable {
    pub table: SymbolTable,
    /// Records skipped for an invalid name.
    pub skipped: usize,
}

/// Parses every record in `[region.0, region.1)`. Records whose name does
/// not resolve are skipped and counted; values outside the image are kept
/// and flagged external.
pub fn parse_table(
    image: &FirmwareImage,
    region: (u32, u32),
    layout: &SymbolLayout,
) -> Result<ParsedTable, SymrecError> {
    layout.validate()?;
    let (start, end) = region;
    let total = (end.saturating_sub(start) / layout.stride) as usize;
    let mut out = ParsedTable::default();
    for i in 0..total {
        let addr = start + i as u32 * layout.stride;
        match record_at(image, layout, addr) {
            Some(Record { name: Some(name), value, sym_type }) => out.table.insert(SymbolEntry {
                name,
                value,
                sym_type,
                record_addr: Some(addr),
                provenance: Provenance::EmbeddedTable,
                external: !image.is_mapped(value),
            }),
            _ => out.skipped += 1,
        }
    }
    if total > 0 && out.skipped * 2 > total {
        return Err(SymrecError::LayoutMismatch { invalid: out.skipped, total });
    }
    Ok(out)
}

/// Scan, merge and parse every table region in one go.
pub fn recover(
    image: &FirmwareImage,
    layout: &SymbolLayout,
    min_run: usize,
    max_gap: usize,
) -> Result<ParsedTable, SymrecError> {
    let runs = scan_for_table(image, layout, min_run);
    let mut out = ParsedTable::default();
    for region in table_regions(image, layout, &runs, max_gap) {
        let p = parse_table(image, region, layout)?;
        out.skipped += p.skipped;
        out.table.extend(p.table.entries().iter().cloned());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coverage {
    pub named: usize,
    pub total: usize,
}

impl Coverage {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.named as f64 / self.total as f64
        }
    }
}

/// Names every function whose entry has a symbol. With aliases the first
/// name in table order wins; all names stay in the table.
pub fn apply_symbols(table: &SymbolTable, graph: &mut CallGraph) -> Coverage {
    let mut named = 0;
    for f in graph.functions.values_mut() {
        if let Some(n) = table.names_at(f.entry).next() {
            f.name = Some(String::from(n));
        }
        if f.name.is_some() {
            named += 1;
        }
    }
    Coverage { named, total: graph.functions.len() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcgraph::FunctionRecord;
    use crate::image::{Arch, Endianness, Segment, SourceFormat};
    use alloc::vec;
    use alloc::vec::Vec;

    /// Strings at 0x2000.., records at 0x4000.., code at 0x1000.
    fn table_image(names: &[&str], corrupt: &[usize]) -> FirmwareImage {
        let mut strings = Vec::new();
        let mut ptrs = Vec::new();
        for n in names {
            ptrs.push(0x2000 + strings.len() as u32);
            strings.extend_from_slice(n.as_bytes());
            strings.push(0);
        }
        let mut recs = Vec::new();
        for (i, p) in ptrs.iter().enumerate() {
            let p = if corrupt.contains(&i) { 0xDEAD_0000 } else { *p };
            recs.extend(p.to_le_bytes());
            recs.extend((0x1000u32 + 4 * i as u32).to_le_bytes());
            recs.extend([0u8; 12]);
        }
        FirmwareImage::new(
            Arch::X86,
            Endianness::Little,
            vec![
                Segment::code(".text", 0x1000, vec![0x90; 0x1000]),
                Segment::data(".rodata", 0x2000, strings),
                Segment::data(".syms", 0x4000, recs),
            ],
            None,
            SourceFormat::Raw,
        )
        .unwrap()
    }

    fn names(n: usize) -> Vec<alloc::string::String> {
        (0..n).map(|i| alloc::format!("sym_{i:04}")).collect()
    }

    #[test]
    fn layout_validation() {
        assert!(SymbolLayout::new(20, 0, 0, None).is_err());
        assert!(SymbolLayout::new(8, 0, 6, None).is_err());
        assert!(SymbolLayout::new(20, 4, 8, Some(18)).is_ok());
    }

    #[test]
    fn single_record_parses() {
        let img = table_image(&["usrRoot"], &[]);
        let p = parse_table(&img, (0x4000, 0x4014), &SymbolLayout::VXWORKS_FLAT).unwrap();
        let e = p.table.lookup("usrRoot").unwrap();
        assert_eq!(e.value, 0x1000);
        assert_eq!(e.record_addr, Some(0x4000));
        assert_eq!(e.provenance, Provenance::EmbeddedTable);
    }

    #[test]
    fn unmapped_name_is_skipped_and_empty_region_is_empty() {
        let img = table_image(&["aa", "bb", "cc"], &[1]);
        let p = parse_table(&img, (0x4000, 0x4000 + 60), &SymbolLayout::VXWORKS_FLAT).unwrap();
        assert_eq!(p.table.len(), 2);
        assert_eq!(p.skipped, 1);
        let p = parse_table(&img, (0x4000, 0x4000), &SymbolLayout::VXWORKS_FLAT).unwrap();
        assert!(p.table.is_empty());
    }

    #[test]
    fn mostly_invalid_is_layout_mismatch() {
        let img = table_image(&["aa", "bb", "cc"], &[0, 1]);
        assert!(matches!(
            parse_table(&img, (0x4000, 0x4000 + 60), &SymbolLayout::VXWORKS_FLAT),
            Err(SymrecError::LayoutMismatch { invalid: 2, total: 3 })
        ));
    }

    #[test]
    fn scan_finds_whole_clean_table() {
        let n = names(120);
        let refs: Vec<&str> = n.iter().map(|s| s.as_str()).collect();
        let img = table_image(&refs, &[]);
        let runs = scan_for_table(&img, &SymbolLayout::VXWORKS_FLAT, DEFAULT_MIN_RUN);
        assert_eq!(runs, vec![(0x4000, 0x4000 + 120 * 20)]);
    }

    #[test]
    fn scan_splits_at_corruption_and_merge_rejoins() {
        let n = names(200);
        let refs: Vec<&str> = n.iter().map(|s| s.as_str()).collect();
        // clean stretches: 0..60, 61..90 (short), 91..200
        let img = table_image(&refs, &[60, 90]);
        let layout = SymbolLayout::VXWORKS_FLAT;
        let runs = scan_for_table(&img, &layout, 50);
        assert_eq!(runs, vec![(0x4000, 0x4000 + 60 * 20), (0x4000 + 91 * 20, 0x4000 + 200 * 20)]);
        let regions = table_regions(&img, &layout, &runs, DEFAULT_MAX_GAP);
        assert_eq!(regions, vec![(0x4000, 0x4000 + 200 * 20)]);
        let p = parse_table(&img, regions[0], &layout).unwrap();
        assert_eq!((p.table.len(), p.skipped), (198, 2));
    }

    #[test]
    fn aliases_are_kept() {
        let mut t = SymbolTable::new();
        for name in ["sysInit", "_sysInit"] {
            t.insert(SymbolEntry {
                name: name.into(),
                value: 0x1000,
                sym_type: None,
                record_addr: None,
                provenance: Provenance::Analyst,
                external: false,
            });
        }
        let names: Vec<&str> = t.names_at(0x1000).collect();
        assert_eq!(names, vec!["sysInit", "_sysInit"]);
        let mut g = CallGraph::from_functions([FunctionRecord { entry: 0x1000, ..Default::default() }]);
        let cov = apply_symbols(&t, &mut g);
        assert_eq!((cov.named, cov.total), (1, 1));
        assert_eq!(g.get(0x1000).unwrap().name.as_deref(), Some("sysInit"));
    }
}
