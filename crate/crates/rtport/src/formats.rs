//! Plain-text artifacts passed between stages. Every format is line based,
//! sorted where order carries no meaning, and free of timestamps so that
//! rerunning a stage reproduces its output byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rtport_core::anchor::{BindingSource, BspRegion, MatchResult, MatchSummary, Stage};
use rtport_core::drvloc::{DriverCategory, DriverReport};
use rtport_core::fidelity::{MemorySnapshot, TraceRecord, TraceSource};
use rtport_core::funcgraph::CallGraph;
use rtport_core::kbdata::parse_u32;
use rtport_core::rewrite::{ActionKind, PlanOptions, RewriteAction};
use rtport_core::symrec::{Provenance, SymbolEntry, SymbolTable};
use rtport_core::{Arch, Endianness};

#[derive(Debug, thiserror::Error)]
#[error("{what} line {line}: {msg}")]
pub struct FormatError {
    pub what: &'static str,
    pub line: usize,
    pub msg: String,
}

fn err(what: &'static str, line: usize, msg: impl Into<String>) -> FormatError {
    FormatError { what, line, msg: msg.into() }
}

/// Hex with or without `0x`.
pub fn parse_hex(s: &str) -> Option<u32> {
    let h = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s);
    u32::from_str_radix(h, 16).ok()
}

/// Lines that are neither blank nor `#` comments, numbered from 1.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

// Symbol map: `HEXADDR NAME`

pub fn write_symbol_map(table: &SymbolTable) -> String {
    let mut rows: Vec<(u32, &str)> = table.entries().iter().map(|e| (e.value, e.name.as_str())).collect();
    rows.sort_unstable();
    rows.dedup();
    let mut s = String::new();
    for (a, n) in rows {
        let _ = writeln!(s, "{a:08x} {n}");
    }
    s
}

pub fn parse_symbol_map(text: &str, provenance: Provenance) -> Result<SymbolTable, FormatError> {
    let mut t = SymbolTable::new();
    for (i, l) in content_lines(text) {
        let mut f = l.split_whitespace();
        let (Some(a), Some(n), None) = (f.next(), f.next(), f.next()) else {
            return Err(err("symbol map", i, "expected `HEXADDR NAME`"));
        };
        let value = parse_hex(a).ok_or_else(|| err("symbol map", i, format!("bad address `{a}`")))?;
        t.insert(SymbolEntry { name: n.into(), value, sym_type: None, record_addr: None, provenance, external: false });
    }
    Ok(t)
}

// Override map: `NAME HEXADDR`

pub fn parse_override_map(text: &str) -> Result<BTreeMap<String, u32>, FormatError> {
    let mut m = BTreeMap::new();
    for (i, l) in content_lines(text) {
        let mut f = l.split_whitespace();
        let (Some(n), Some(a), None) = (f.next(), f.next(), f.next()) else {
            return Err(err("override map", i, "expected `NAME HEXADDR`"));
        };
        let v = parse_hex(a).ok_or_else(|| err("override map", i, format!("bad address `{a}`")))?;
        m.insert(n.to_string(), v);
    }
    Ok(m)
}

// Anchor report

fn source_name(s: BindingSource) -> &'static str {
    match s {
        BindingSource::Direct => "direct",
        BindingSource::CallerInferred => "caller",
        BindingSource::CalleeMatched => "callee",
        BindingSource::Symbol => "symbol",
    }
}

fn parse_source(s: &str) -> Option<BindingSource> {
    Some(match s {
        "direct" => BindingSource::Direct,
        "caller" => BindingSource::CallerInferred,
        "callee" => BindingSource::CalleeMatched,
        "symbol" => BindingSource::Symbol,
        _ => return None,
    })
}

/// What `match-anchors` hands to later stages.
#[derive(Debug, Clone, Default)]
pub struct AnchorReport {
    pub summary: Option<MatchSummary>,
    pub result: MatchResult,
    pub bsp: Vec<(u32, u64)>,
}

pub fn write_anchor_report(summary: &MatchSummary, result: &MatchResult, bsp: Option<&BspRegion>) -> String {
    let mut s = String::from("# rtport anchor report\n");
    let _ = writeln!(
        s,
        "summary symbols {} direct {} anchors-first {} missing {} anchors-after {}",
        summary.symbols, summary.direct, summary.anchors_first, summary.missing, summary.anchors_after
    );
    for (name, addr) in &result.bindings {
        let src = result.sources.get(name).copied().unwrap_or(BindingSource::Direct);
        let score = result.scores.get(name).copied().unwrap_or(0.0);
        let _ = writeln!(s, "bind {name} {addr:08x} {} {score:.4}", source_name(src));
    }
    for (a, b) in bsp.map(|r| r.ranges.as_slice()).unwrap_or_default() {
        let _ = writeln!(s, "bsp {a:08x} {b:08x}");
    }
    s
}

pub fn parse_anchor_report(text: &str) -> Result<AnchorReport, FormatError> {
    const W: &str = "anchor report";
    let mut r = AnchorReport::default();
    r.result.stage = Some(Stage::Iterated);
    for (i, l) in content_lines(text) {
        let f: Vec<&str> = l.split_whitespace().collect();
        match f.as_slice() {
            ["summary", "symbols", a, "direct", b, "anchors-first", c, "missing", d, "anchors-after", e] => {
                let n = |v: &str| v.parse::<usize>().map_err(|_| err(W, i, "bad count"));
                r.summary = Some(MatchSummary {
                    symbols: n(a)?,
                    direct: n(b)?,
                    anchors_first: n(c)?,
                    missing: n(d)?,
                    anchors_after: n(e)?,
                });
            }
            ["bind", name, addr, src, score] => {
                let addr = parse_hex(addr).ok_or_else(|| err(W, i, "bad address"))?;
                let src = parse_source(src).ok_or_else(|| err(W, i, "bad binding source"))?;
                let score: f64 = score.parse().map_err(|_| err(W, i, "bad score"))?;
                r.result.bindings.insert(name.to_string(), addr);
                r.result.sources.insert(name.to_string(), src);
                r.result.scores.insert(name.to_string(), score);
            }
            ["bsp", a, b] => {
                let a = parse_hex(a).ok_or_else(|| err(W, i, "bad address"))?;
                let b = parse_hex(b).ok_or_else(|| err(W, i, "bad address"))? as u64;
                r.bsp.push((a, b));
            }
            _ => return Err(err(W, i, format!("unrecognised line `{l}`"))),
        }
    }
    Ok(r)
}

/// Bindings as a symbol table (used to resolve patch externals on a
/// stripped image).
pub fn bindings_as_symbols(result: &MatchResult) -> SymbolTable {
    let mut t = SymbolTable::new();
    for (n, &a) in &result.bindings {
        t.insert(SymbolEntry {
            name: n.clone(),
            value: a,
            sym_type: None,
            record_addr: None,
            provenance: Provenance::Matched,
            external: false,
        });
    }
    t
}

// Driver report

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DriverLine {
    pub init: u32,
    pub category: DriverCategory,
    pub anchor: String,
    /// Pointer-table word holding `init`, for table-registered drivers.
    pub slot: Option<u32>,
    pub evidence: Vec<String>,
}

pub fn write_driver_report(reports: &[DriverReport], slots: &BTreeMap<u32, u32>, unbound: &[String]) -> String {
    let mut s = String::from("# rtport driver report\n");
    for a in unbound {
        let _ = writeln!(s, "# registration anchor {a} unbound; its drivers are missing");
    }
    for r in reports {
        let _ = write!(s, "driver {:08x} {} {}", r.init_function, r.category, r.anchor);
        match slots.get(&r.init_function) {
            Some(slot) if r.from_pointer_table => {
                let _ = write!(s, " slot {slot:08x}");
            }
            _ => {}
        }
        s.push('\n');
        for e in &r.evidence {
            let _ = writeln!(s, "evidence {:08x} {} {}", r.init_function, e.category, e.string.replace('\n', " "));
        }
    }
    s
}

pub fn parse_driver_report(text: &str) -> Result<Vec<DriverLine>, FormatError> {
    const W: &str = "driver report";
    let mut out: Vec<DriverLine> = Vec::new();
    for (i, l) in content_lines(text) {
        let f: Vec<&str> = l.splitn(4, ' ').collect();
        match f.first().copied() {
            Some("driver") => {
                let g: Vec<&str> = l.split_whitespace().collect();
                if g.len() != 4 && !(g.len() == 6 && g[4] == "slot") {
                    return Err(err(W, i, "expected `driver ADDR CATEGORY ANCHOR [slot ADDR]`"));
                }
                out.push(DriverLine {
                    init: parse_hex(g[1]).ok_or_else(|| err(W, i, "bad address"))?,
                    category: g[2].parse().map_err(|_| err(W, i, "unknown category"))?,
                    anchor: g[3].into(),
                    slot: match g.get(5) {
                        Some(a) => Some(parse_hex(a).ok_or_else(|| err(W, i, "bad slot"))?),
                        None => None,
                    },
                    evidence: Vec::new(),
                });
            }
            Some("evidence") if f.len() == 4 => {
                let addr = parse_hex(f[1]).ok_or_else(|| err(W, i, "bad address"))?;
                match out.last_mut() {
                    Some(d) if d.init == addr => d.evidence.push(f[3].into()),
                    _ => return Err(err(W, i, "evidence without its driver line")),
                }
            }
            _ => return Err(err(W, i, format!("unrecognised line `{l}`"))),
        }
    }
    Ok(out)
}

// Plan file: `#! key value` directives, then `KIND VICTIM TARGET`.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanFile {
    pub arch: Arch,
    pub endianness: Endianness,
    /// First byte of the flat ported image.
    pub image_base: u32,
    pub patch_base: u32,
    pub options: PlanOptions,
    /// Externals the patch was resolved against.
    pub externs: BTreeMap<String, u32>,
    pub actions: Vec<RewriteAction>,
}

pub fn write_plan(p: &PlanFile) -> String {
    let mut s = String::from("# rtport plan\n");
    let _ = writeln!(s, "#! arch {}", p.arch.name());
    let e = match p.endianness {
        Endianness::Little => "le",
        Endianness::Big => "be",
    };
    let _ = writeln!(s, "#! endian {e}");
    let _ = writeln!(s, "#! image-base {:08x}", p.image_base);
    let _ = writeln!(s, "#! patch-base {:08x}", p.patch_base);
    let _ = writeln!(s, "#! x86-near {}", p.options.x86_near as u8);
    let _ = writeln!(s, "#! arm-literal {}", p.options.arm_literal as u8);
    if let Some(sel) = p.options.selector {
        let _ = writeln!(s, "#! selector {sel:04x}");
    }
    let _ = writeln!(s, "#! scratch {}", p.options.scratch);
    for (n, a) in &p.externs {
        let _ = writeln!(s, "#! extern {n} {a:08x}");
    }
    for a in &p.actions {
        let _ = writeln!(s, "{} {:08x} {:08x}", a.kind, a.victim, a.target);
    }
    s
}

pub fn parse_plan(text: &str) -> Result<PlanFile, FormatError> {
    const W: &str = "plan";
    let (mut arch, mut endian, mut image_base, mut patch_base) = (None, None, None, None);
    let mut options = PlanOptions::default();
    let mut externs = BTreeMap::new();
    let mut actions = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let i = i + 1;
        let l = raw.trim();
        if let Some(d) = l.strip_prefix("#!") {
            let f: Vec<&str> = d.split_whitespace().collect();
            let hex = |k: usize| f.get(k).and_then(|v| parse_hex(v)).ok_or_else(|| err(W, i, "bad number"));
            let flag = |k: usize| match f.get(k) {
                Some(&"1") | Some(&"true") => Ok(true),
                Some(&"0") | Some(&"false") => Ok(false),
                _ => Err(err(W, i, "expected 0 or 1")),
            };
            match f.first().copied() {
                Some("arch") => {
                    arch = Some(f.get(1).and_then(|a| a.parse().ok()).ok_or_else(|| err(W, i, "bad arch"))?)
                }
                Some("endian") => {
                    endian = Some(f.get(1).and_then(|a| a.parse().ok()).ok_or_else(|| err(W, i, "bad endianness"))?)
                }
                Some("image-base") => image_base = Some(hex(1)?),
                Some("patch-base") => patch_base = Some(hex(1)?),
                Some("x86-near") => options.x86_near = flag(1)?,
                Some("arm-literal") => options.arm_literal = flag(1)?,
                Some("selector") => {
                    options.selector = Some(u16::try_from(hex(1)?).map_err(|_| err(W, i, "selector exceeds 16 bits"))?)
                }
                Some("scratch") => {
                    options.scratch = f.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| err(W, i, "bad register"))?
                }
                Some("extern") => {
                    let name = f.get(1).ok_or_else(|| err(W, i, "missing name"))?;
                    externs.insert(name.to_string(), hex(2)?);
                }
                _ => return Err(err(W, i, format!("unknown directive `{d}`"))),
            }
            continue;
        }
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = l.split_whitespace().collect();
        let [kind, victim, target] = f.as_slice() else {
            return Err(err(W, i, "expected `KIND VICTIM TARGET`"));
        };
        actions.push(RewriteAction {
            kind: kind.parse::<ActionKind>().map_err(|e| err(W, i, e.to_string()))?,
            victim: parse_hex(victim).ok_or_else(|| err(W, i, "bad victim"))?,
            target: parse_hex(target).ok_or_else(|| err(W, i, "bad target"))?,
            trampoline_slot: None,
        });
    }
    let missing = |k: &str| err(W, 0, format!("missing `#! {k}` directive"));
    Ok(PlanFile {
        arch: arch.ok_or_else(|| missing("arch"))?,
        endianness: endian.unwrap_or(Endianness::Little),
        image_base: image_base.ok_or_else(|| missing("image-base"))?,
        patch_base: patch_base.ok_or_else(|| missing("patch-base"))?,
        options,
        externs,
        actions,
    })
}

// Traces: one hex pc per line; `enter` / `exit` mark the function of
// interest.

pub fn parse_trace(text: &str, source: TraceSource) -> Result<TraceRecord, FormatError> {
    const W: &str = "trace";
    let mut pcs = Vec::new();
    let (mut enter, mut exit) = (None, None);
    for (i, l) in content_lines(text) {
        match l {
            "enter" if enter.is_none() => enter = Some(pcs.len()),
            "exit" if enter.is_some() && exit.is_none() => exit = Some(pcs.len()),
            "enter" | "exit" => return Err(err(W, i, "markers must appear once, enter before exit")),
            _ => pcs.push(parse_hex(l).ok_or_else(|| err(W, i, format!("bad pc `{l}`")))?),
        }
    }
    if pcs.is_empty() {
        return Err(err(W, 0, "trace is empty"));
    }
    let mut t = TraceRecord::new(source, pcs);
    t.window = match (enter, exit) {
        (Some(a), Some(b)) => Some((a, b)),
        (Some(a), None) => Some((a, t.pcs.len())),
        _ => None,
    };
    Ok(t)
}

pub fn write_trace(pcs: &[u32]) -> String {
    pcs.iter().map(|p| format!("{p:08x}\n")).collect()
}

/// Sidecar of a raw memory dump: `start=HEX`.
pub fn parse_memory_meta(text: &str) -> Result<u32, FormatError> {
    for (i, l) in content_lines(text) {
        if let Some(v) = l.strip_prefix("start=") {
            return parse_hex(v.trim()).ok_or_else(|| err("memory sidecar", i, "bad start address"));
        }
    }
    Err(err("memory sidecar", 0, "no `start=` line"))
}

pub fn memory_snapshot(bytes: Vec<u8>, meta: &str, label: &str) -> Result<MemorySnapshot, FormatError> {
    Ok(MemorySnapshot { start: parse_memory_meta(meta)?, bytes, label: label.into() })
}

// Graph export

/// `FUNC: CALLEE CALLEE ...`, one function per line.
pub fn write_adjacency(graph: &CallGraph) -> String {
    let mut s = String::new();
    for (&f, r) in &graph.functions {
        let _ = write!(s, "{f:08x}:");
        for c in &r.callee_entries {
            let _ = write!(s, " {c:08x}");
        }
        s.push('\n');
    }
    s
}

pub fn write_features_csv(graph: &CallGraph) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["entry", "length", "name", "bb", "edges", "callees", "in_degree", "strings"])?;
    for r in graph.functions.values() {
        w.write_record([
            format!("{:08x}", r.entry),
            r.length.to_string(),
            r.name.clone().unwrap_or_default(),
            r.bb_count.to_string(),
            r.edge_count.to_string(),
            r.callee_entries.len().to_string(),
            r.in_degree.to_string(),
            r.string_refs.len().to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv of ascii fields"))
}

/// Manifest `parse_u32` accepts decimal too; config values go through it.
pub fn parse_number(s: &str) -> Option<u32> {
    parse_u32(s.trim())
}
