//! Driver discovery under registration anchors and category classification
//! from the strings reachable in each driver's call subtree.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::anchor::{KnowledgeBase, MatchResult};
use crate::funcgraph::CallGraph;
use crate::image::FirmwareImage;
use crate::symrec::SymbolTable;

pub const DEFAULT_DEPTH: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DriverCategory {
    Gpio,
    Uart,
    I2c,
    Spi,
    Adc,
    Pwm,
    Rtc,
    Watchdog,
    Ethernet,
    Hwtimer,
    Sensor,
    Storage,
    Other,
}

impl DriverCategory {
    pub const ALL: [DriverCategory; 13] = [
        Self::Gpio,
        Self::Uart,
        Self::I2c,
        Self::Spi,
        Self::Adc,
        Self::Pwm,
        Self::Rtc,
        Self::Watchdog,
        Self::Ethernet,
        Self::Hwtimer,
        Self::Sensor,
        Self::Storage,
        Self::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gpio => "GPIO",
            Self::Uart => "UART",
            Self::I2c => "I2C",
            Self::Spi => "SPI",
            Self::Adc => "ADC",
            Self::Pwm => "PWM",
            Self::Rtc => "RTC",
            Self::Watchdog => "WATCHDOG",
            Self::Ethernet => "ETHERNET",
            Self::Hwtimer => "HWTIMER",
            Self::Sensor => "SENSOR",
            Self::Storage => "STORAGE",
            Self::Other => "OTHER",
        }
    }
}

impl fmt::Display for DriverCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DriverCategory {
    type Err = DbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let up = s.trim().to_ascii_uppercase();
        // "PWN" shows up in some category lists; it means PWM.
        if up == "PWN" {
            return Ok(Self::Pwm);
        }
        Self::ALL.into_iter().find(|c| c.name() == up).ok_or(DbError::UnknownCategory(s.into()))
    }
}

/// One keyword pattern. Substrings match anywhere, case-insensitively.
/// Tokens match a whole alphanumeric word equal to the token's stem
/// followed by optional digits, so `fei0` matches `fei`, `fei0`, `fei12`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Pattern {
    Substring(String),
    Token(String),
}

impl Pattern {
    /// `=word` is a token pattern, anything else a substring.
    pub fn parse(line: &str) -> Self {
        match line.strip_prefix('=') {
            Some(t) => Pattern::Token(t.trim().to_ascii_lowercase()),
            None => Pattern::Substring(line.trim().to_ascii_lowercase()),
        }
    }

    pub fn matches(&self, text: &str) -> bool {
        let lower = text.to_ascii_lowercase();
        match self {
            Pattern::Substring(p) => !p.is_empty() && lower.contains(p.as_str()),
            Pattern::Token(t) => {
                let stem = t.trim_end_matches(|c: char| c.is_ascii_digit());
                if stem.is_empty() {
                    return false;
                }
                lower
                    .split(|c: char| !c.is_ascii_alphanumeric())
                    .any(|w| w.strip_prefix(stem).is_some_and(|rest| rest.chars().all(|c| c.is_ascii_digit())))
            }
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pattern::Substring(s) => f.write_str(s),
            Pattern::Token(t) => write!(f, "={t}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DbError {
    #[error("unknown driver category `{0}`")]
    UnknownCategory(String),
    #[error("pattern `{pattern}` listed under both {first} and {second}")]
    DuplicatePattern { pattern: String, first: DriverCategory, second: DriverCategory },
    #[error("OTHER is the fallback and takes no patterns")]
    OtherHasPatterns,
    #[error("line {0}: pattern before any [CATEGORY] header")]
    NoSection(usize),
}

/// Category keyword database. Category order is priority order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct KeywordDb {
    entries: Vec<(DriverCategory, Vec<Pattern>)>,
}

impl KeywordDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, category: DriverCategory, pattern: Pattern) -> Result<(), DbError> {
        if category == DriverCategory::Other {
            return Err(DbError::OtherHasPatterns);
        }
        if let Some((first, _)) = self.entries.iter().find(|(_, ps)| ps.contains(&pattern)) {
            if *first != category {
                return Err(DbError::DuplicatePattern {
                    pattern: pattern.to_string(),
                    first: *first,
                    second: category,
                });
            }
            return Ok(());
        }
        match self.entries.iter_mut().find(|(c, _)| *c == category) {
            Some((_, ps)) => ps.push(pattern),
            None => self.entries.push((category, alloc::vec![pattern])),
        }
        Ok(())
    }

    /// Parses `[CATEGORY]` sections of newline-separated patterns. Blank
    /// lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, DbError> {
        let mut db = KeywordDb::new();
        let mut current = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let cat: DriverCategory = h.parse()?;
                if cat == DriverCategory::Other {
                    current = Some(cat);
                    continue;
                }
                if !db.entries.iter().any(|(c, _)| *c == cat) {
                    db.entries.push((cat, Vec::new()));
                }
                current = Some(cat);
                continue;
            }
            let cat = current.ok_or(DbError::NoSection(i + 1))?;
            db.add(cat, Pattern::parse(line))?;
        }
        Ok(db)
    }

    pub fn entries(&self) -> &[(DriverCategory, Vec<Pattern>)] {
        &self.entries
    }

    /// First category (in db order) with a pattern hitting any string,
    /// with every hit of that category as evidence.
    pub fn classify<'a>(&self, strings: impl IntoIterator<Item = &'a str> + Clone) -> (DriverCategory, Vec<Evidence>) {
        for (cat, patterns) in &self.entries {
            let mut ev = Vec::new();
            for s in strings.clone() {
                if let Some(p) = patterns.iter().find(|p| p.matches(s)) {
                    ev.push(Evidence { string: s.into(), pattern: p.to_string(), category: *cat });
                }
            }
            if !ev.is_empty() {
                return (*cat, ev);
            }
        }
        (DriverCategory::Other, Vec::new())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (c, ps) in &self.entries {
            out.push('[');
            out.push_str(c.name());
            out.push_str("]\n");
            for p in ps {
                out.push_str(&p.to_string());
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Evidence {
    pub string: String,
    pub pattern: String,
    pub category: DriverCategory,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DriverReport {
    pub init_function: u32,
    pub category: DriverCategory,
    pub evidence: Vec<Evidence>,
    /// Registration anchor the driver was found under.
    pub anchor: String,
    pub from_pointer_table: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DrvError {
    #[error("no registration anchor is bound (expected one of {0:?})")]
    AnchorUnbound(Vec<String>),
    #[error("symbol `{0}` not found")]
    SymbolMissing(String),
    #[error("pointer table [{start:#x}, {end:#x}) is not a whole number of words")]
    RegionMisaligned { start: u32, end: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DriverScan {
    /// Ordered by init function address.
    pub reports: Vec<DriverReport>,
    /// Registration anchors that were skipped because they are unbound.
    pub unbound_anchors: Vec<String>,
}

/// Strings referenced by `root` and its callees down to `depth`, not
/// descending into functions bound to knowledge-base nodes.
pub fn subtree_strings<'g>(graph: &'g CallGraph, root: u32, depth: usize, stop: &BTreeSet<u32>) -> BTreeSet<&'g str> {
    let mut out = BTreeSet::new();
    let mut seen = BTreeSet::from([root]);
    let mut layer = alloc::vec![root];
    for d in 0..=depth {
        let mut next = Vec::new();
        for f in layer {
            let Some(r) = graph.get(f) else { continue };
            out.extend(r.string_refs.iter().map(String::as_str));
            if d == depth {
                continue;
            }
            for &c in &r.callee_entries {
                if !stop.contains(&c) && seen.insert(c) {
                    next.push(c);
                }
            }
        }
        layer = next;
    }
    out
}

/// Finds and classifies driver init functions. Candidates are the direct
/// callees of each bound registration anchor that are neither KB
/// functions nor called from anywhere else, plus `table_targets` (anchor name, addresses) resolved from
/// init-pointer tables.
pub fn locate_drivers(
    graph: &CallGraph,
    matches: &MatchResult,
    kb: &KnowledgeBase,
    db: &KeywordDb,
    table_targets: &[(String, Vec<u32>)],
    depth: usize,
) -> Result<DriverScan, DrvError> {
    let registration: Vec<&str> = kb.nodes.iter().filter(|n| n.registration).map(|n| n.name.as_str()).collect();
    // Only knowledge-base bindings count; a first pass against a named
    // reference also binds drivers and library code.
    let bound: BTreeSet<u32> = matches.bindings.iter().filter(|(n, _)| kb.node(n).is_some()).map(|(_, &a)| a).collect();
    let reg_addrs: BTreeSet<u32> = registration.iter().filter_map(|n| matches.bindings.get(*n).copied()).collect();
    let mut scan = DriverScan::default();
    let mut found: BTreeMap<u32, (String, bool)> = BTreeMap::new();
    let mut any = false;
    for name in &registration {
        let Some(&addr) = matches.bindings.get(*name) else {
            scan.unbound_anchors.push(String::from(*name));
            continue;
        };
        any = true;
        for c in graph.callees(addr) {
            // Anything also called from outside the registration anchors is
            // shared library code, not a driver entry.
            let shared = graph.callers(c).iter().any(|p| !reg_addrs.contains(p));
            if !bound.contains(&c) && !shared {
                found.entry(c).or_insert_with(|| (String::from(*name), false));
            }
        }
    }
    for (anchor, targets) in table_targets {
        any = true;
        for &t in targets {
            if graph.get(t).is_some() && !bound.contains(&t) {
                found.entry(t).or_insert_with(|| (anchor.clone(), true));
            }
        }
    }
    if !any {
        return Err(DrvError::AnchorUnbound(registration.into_iter().map(String::from).collect()));
    }
    for (f, (anchor, from_pointer_table)) in found {
        let strings = subtree_strings(graph, f, depth, &bound);
        let (category, evidence) = db.classify(strings.iter().copied());
        scan.reports.push(DriverReport { init_function: f, category, evidence, anchor, from_pointer_table });
    }
    Ok(scan)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PointerTable {
    pub start: u32,
    pub end: u32,
    /// Word addresses and the function each one points at, in table order.
    pub slots: Vec<(u32, u32)>,
    pub nulls: usize,
    /// Non-null words that are not recovered function entries.
    pub invalid: usize,
}

impl PointerTable {
    pub fn entries(&self) -> Vec<u32> {
        self.slots.iter().map(|s| s.1).collect()
    }
}

/// Reads `[start, end)` as a table of code pointers.
pub fn read_pointer_table(
    image: &FirmwareImage,
    graph: &CallGraph,
    start: u32,
    end: u32,
) -> Result<PointerTable, DrvError> {
    if end < start || !(end - start).is_multiple_of(4) {
        return Err(DrvError::RegionMisaligned { start, end });
    }
    let mut t = PointerTable { start, end, ..Default::default() };
    for slot in (start..end).step_by(4) {
        match image.read_u32(slot) {
            Ok(0) => t.nulls += 1,
            Ok(w) if graph.get(w).is_some() => t.slots.push((slot, w)),
            _ => t.invalid += 1,
        }
    }
    Ok(t)
}

pub fn resolve_pointer_table(
    image: &FirmwareImage,
    graph: &CallGraph,
    start_sym: &str,
    end_sym: &str,
    symtab: &SymbolTable,
) -> Result<PointerTable, DrvError> {
    let start = symtab.value_of(start_sym).ok_or_else(|| DrvError::SymbolMissing(start_sym.into()))?;
    let end = symtab.value_of(end_sym).ok_or_else(|| DrvError::SymbolMissing(end_sym.into()))?;
    read_pointer_table(image, graph, start, end)
}

/// Recovers a pointer table walked by `func` without symbols: the first
/// pair of consecutive literal operands bounding a word-aligned region
/// whose words are all function entries or null (at least one non-null).
pub fn infer_pointer_table(image: &FirmwareImage, graph: &CallGraph, func: u32) -> Option<PointerTable> {
    let f = graph.get(func)?;
    let lits: Vec<u32> = f.literals.iter().copied().filter(|a| a % 4 == 0 && !image.is_code(*a)).collect();
    for w in lits.windows(2) {
        let (a, b) = (w[0], w[1]);
        if !image.is_mapped(a) {
            continue;
        }
        let Ok(t) = read_pointer_table(image, graph, a, b) else { continue };
        if t.invalid == 0 && !t.slots.is_empty() {
            return Some(t);
        }
    }
    None
}
