//! Function boundary, basic-block and call-graph recovery.
//!
//! Entries come from prologue matches, direct call targets, the image entry
//! point and any caller-supplied addresses (recovered symbols). Each function
//! spans up to the next entry or the end of its segment; blocks are counted
//! over the instructions reachable from the entry without leaving that span.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use crate::image::{Arch, FirmwareImage, SegmentKind};
use crate::isa::{self, InstrKind, Operand};

/// Shortest string literal that counts as a reference.
pub const MIN_STRING_LEN: usize = 4;
const MAX_STRING_LEN: usize = 1024;
const MAX_INSTRS_PER_FUNCTION: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FunctionRecord {
    pub entry: u32,
    pub length: u32,
    pub bb_count: u32,
    pub edge_count: u32,
    pub callee_entries: BTreeSet<u32>,
    /// Call targets that do not resolve to a recovered function.
    pub external_callees: BTreeSet<u32>,
    pub in_degree: u32,
    pub string_refs: BTreeSet<String>,
    /// Literal operands (x86 imm32, ARM literal-pool words) that point into
    /// mapped memory but are not strings.
    pub data_refs: BTreeSet<u32>,
    /// Every literal operand value seen, before classification.
    pub literals: BTreeSet<u32>,
    pub name: Option<String>,
}

impl FunctionRecord {
    pub fn end(&self) -> u64 {
        self.entry as u64 + self.length as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CallGraph {
    pub functions: BTreeMap<u32, FunctionRecord>,
    /// Call multiset: (caller, callee) -> number of call sites.
    pub edges: BTreeMap<(u32, u32), u32>,
    callers: BTreeMap<u32, BTreeSet<u32>>,
}

impl CallGraph {
    /// Builds a graph from records, deriving edges from `callee_entries`
    /// (one call site each) and recomputing in-degrees.
    pub fn from_functions(functions: impl IntoIterator<Item = FunctionRecord>) -> Self {
        let functions: BTreeMap<u32, FunctionRecord> = functions.into_iter().map(|f| (f.entry, f)).collect();
        let mut edges = BTreeMap::new();
        for f in functions.values() {
            for &c in &f.callee_entries {
                if functions.contains_key(&c) {
                    edges.insert((f.entry, c), 1);
                }
            }
        }
        let mut g = CallGraph { functions, edges, callers: BTreeMap::new() };
        g.reindex();
        g
    }

    fn reindex(&mut self) {
        self.callers.clear();
        for &(caller, callee) in self.edges.keys() {
            self.callers.entry(callee).or_default().insert(caller);
        }
        for f in self.functions.values_mut() {
            f.callee_entries.retain(|c| self.edges.contains_key(&(f.entry, *c)));
            f.in_degree = self.callers.get(&f.entry).map_or(0, |s| s.len() as u32);
        }
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    pub fn get(&self, entry: u32) -> Option<&FunctionRecord> {
        self.functions.get(&entry)
    }

    /// Exact reverse-edge lookup.
    pub fn callers(&self, f: u32) -> BTreeSet<u32> {
        self.callers.get(&f).cloned().unwrap_or_default()
    }

    pub fn callees(&self, f: u32) -> BTreeSet<u32> {
        self.functions.get(&f).map(|r| r.callee_entries.clone()).unwrap_or_default()
    }

    /// Entry of the function whose region contains `addr`.
    pub fn function_containing(&self, addr: u32) -> Option<u32> {
        let (&entry, f) = self.functions.range(..=addr).next_back()?;
        ((addr as u64) < f.end() || entry == addr).then_some(entry)
    }

    pub fn by_name(&self, name: &str) -> Option<u32> {
        self.functions.values().find(|f| f.name.as_deref() == Some(name)).map(|f| f.entry)
    }

    /// Clears every recovered name.
    pub fn strip_names(&mut self) {
        for f in self.functions.values_mut() {
            f.name = None;
        }
    }
}

struct Sweep {
    bb_count: u32,
    edge_count: u32,
    calls: Vec<u32>,
    literals: BTreeSet<u32>,
}

/// Explores the instructions reachable from `entry` inside `[entry, end)`.
fn sweep(image: &FirmwareImage, entry: u32, end: u64) -> Sweep {
    let arch = image.arch;
    let endian = image.endianness;
    let mut decoded: BTreeMap<u32, isa::Instr> = BTreeMap::new();
    let mut queue = VecDeque::from([entry]);
    let mut leaders = BTreeSet::from([entry]);
    let mut calls = Vec::new();
    let mut literals = BTreeSet::new();
    let mut buf = [0u8; 8];
    let in_region = |a: u32| a >= entry && (a as u64) < end;

    while let Some(start) = queue.pop_front() {
        let mut pc = start;
        loop {
            if !in_region(pc) || decoded.contains_key(&pc) || decoded.len() >= MAX_INSTRS_PER_FUNCTION {
                break;
            }
            let avail = ((end - pc as u64) as usize).min(buf.len());
            if image.read_into(pc, &mut buf[..avail]).is_err() {
                break;
            }
            let Ok(ins) = isa::decode(arch, endian, &buf[..avail], pc) else { break };
            let next = pc.wrapping_add(ins.length as u32);
            if ins.is_call() {
                if let Some(t) = ins.target() {
                    calls.push(t);
                }
            }
            match (ins.kind, ins.operand) {
                (InstrKind::MovRegImm32 | InstrKind::PushImm32, Operand::Imm { value, .. }) => {
                    literals.insert(value);
                }
                (InstrKind::ArmLdrRegLiteral, Operand::Literal { addr, .. }) => {
                    if let Ok(v) = image.read_u32(addr) {
                        literals.insert(v);
                    }
                }
                _ => {}
            }
            let branch = ins.branch_target();
            let conditional = ins.is_conditional();
            let terminator = ins.is_terminator();
            decoded.insert(pc, ins);
            if let Some(t) = branch.filter(|&t| in_region(t)) {
                leaders.insert(t);
                queue.push_back(t);
            }
            if conditional {
                leaders.insert(next);
                queue.push_back(next);
                break;
            }
            if terminator {
                break;
            }
            pc = next;
        }
    }

    // Blocks are the leaders that were actually decoded; count successor
    // edges from each block's final instruction.
    let leaders: BTreeSet<u32> = leaders.into_iter().filter(|l| decoded.contains_key(l)).collect();
    let mut edge_count = 0;
    for (&addr, ins) in &decoded {
        let next = addr.wrapping_add(ins.length as u32);
        let last_in_block = ins.is_terminator()
            || ins.is_conditional()
            || ins.branch_target().is_some()
            || leaders.contains(&next)
            || !decoded.contains_key(&next);
        if !last_in_block {
            continue;
        }
        if let Some(t) = ins.branch_target() {
            if leaders.contains(&t) {
                edge_count += 1;
            }
        }
        if !ins.is_terminator() && decoded.contains_key(&next) {
            edge_count += 1;
        }
    }
    Sweep { bb_count: leaders.len() as u32, edge_count, calls, literals }
}

fn code_ranges(image: &FirmwareImage) -> Vec<(u32, u64)> {
    image
        .segments()
        .iter()
        .filter(|s| s.kind == SegmentKind::Code && s.bytes().is_some() && !s.is_empty())
        .map(|s| (s.start, s.end()))
        .collect()
}

fn valid_entry(image: &FirmwareImage, addr: u32) -> bool {
    image.is_code(addr) && (image.arch != Arch::Arm || addr.is_multiple_of(4))
}

fn prologue_entries(image: &FirmwareImage) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    for seg in image.segments() {
        let (SegmentKind::Code, Some(bytes)) = (seg.kind, seg.bytes()) else { continue };
        let step = if image.arch == Arch::Arm { 4 } else { 1 };
        let mut off = 0usize;
        while off + 3 <= bytes.len() {
            if isa::match_prologue(image.arch, image.endianness, &bytes[off..]) {
                out.insert(seg.start + off as u32);
            }
            off += step;
        }
    }
    out
}

/// Recovers functions and the direct call graph.
pub fn recover_functions(image: &FirmwareImage) -> CallGraph {
    recover_functions_with(image, &[])
}

/// Like [`recover_functions`], seeding extra entries (e.g. symbol values).
pub fn recover_functions_with(image: &FirmwareImage, extra_entries: &[u32]) -> CallGraph {
    let ranges = code_ranges(image);
    if ranges.is_empty() {
        return CallGraph::default();
    }
    let mut entries = prologue_entries(image);
    entries.extend(extra_entries.iter().copied().filter(|&a| valid_entry(image, a)));
    if let Some(e) = image.entry_point.filter(|&e| valid_entry(image, e)) {
        entries.insert(e);
    }

    // Call targets can introduce new entries, which shortens neighbouring
    // regions; iterate until the entry set is stable.
    let sweeps = loop {
        let sweeps: BTreeMap<u32, (u64, Sweep)> = entries
            .iter()
            .map(|&e| {
                let end = region_end(&entries, &ranges, e);
                (e, (end, sweep(image, e, end)))
            })
            .collect();
        let fresh: Vec<u32> = sweeps
            .values()
            .flat_map(|(_, s)| s.calls.iter().copied())
            .filter(|&t| valid_entry(image, t) && !entries.contains(&t))
            .collect();
        if fresh.is_empty() {
            break sweeps;
        }
        entries.extend(fresh);
    };

    let mut functions = BTreeMap::new();
    let mut edges: BTreeMap<(u32, u32), u32> = BTreeMap::new();
    for (&entry, (end, s)) in &sweeps {
        let mut rec = FunctionRecord {
            entry,
            length: (end - entry as u64) as u32,
            bb_count: s.bb_count,
            edge_count: s.edge_count,
            literals: s.literals.clone(),
            ..Default::default()
        };
        for &t in &s.calls {
            if entries.contains(&t) {
                rec.callee_entries.insert(t);
                *edges.entry((entry, t)).or_default() += 1;
            } else {
                rec.external_callees.insert(t);
            }
        }
        functions.insert(entry, rec);
    }
    let mut g = CallGraph { functions, edges, callers: BTreeMap::new() };
    g.reindex();
    g
}

fn region_end(entries: &BTreeSet<u32>, ranges: &[(u32, u64)], e: u32) -> u64 {
    let seg_end = ranges.iter().find(|(s, end)| e >= *s && (e as u64) < *end).map_or(e as u64, |r| r.1);
    entries.range(e.saturating_add(1)..).next().map_or(seg_end, |&n| (n as u64).min(seg_end))
}

/// Reads a printable NUL-terminated string of at least [`MIN_STRING_LEN`]
/// characters at `addr`.
pub fn string_at(image: &FirmwareImage, addr: u32) -> Option<String> {
    let raw = image.read_cstr(addr, MAX_STRING_LEN)?;
    if raw.len() < MIN_STRING_LEN || !raw.iter().all(|&b| crate::is_printable(b)) {
        return None;
    }
    String::from_utf8(raw).ok()
}

/// Resolves each function's literal operands into string references and
/// plain data references.
pub fn extract_string_refs(image: &FirmwareImage, graph: &mut CallGraph) {
    for f in graph.functions.values_mut() {
        f.string_refs.clear();
        f.data_refs.clear();
        for &v in &f.literals {
            if let Some(s) = string_at(image, v) {
                f.string_refs.insert(s);
            } else if image.is_mapped(v) {
                f.data_refs.insert(v);
            }
        }
    }
}

/// Recovery followed by string extraction.
pub fn analyze(image: &FirmwareImage, extra_entries: &[u32]) -> CallGraph {
    let mut g = recover_functions_with(image, extra_entries);
    extract_string_refs(image, &mut g);
    g
}
