//! The porting stages as plain functions over loaded inputs. The CLI and
//! the pipeline runner do the file handling around them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use anyhow::{anyhow, bail, Context};

use rtport_core::anchor::{self, BspRegion, KnowledgeBase, MatchConfig, MatchResult, MatchSummary};
use rtport_core::drvloc::{self, DriverCategory, DriverScan, KeywordDb};
use rtport_core::fidelity::{self, MemorySnapshot, TraceRecord};
use rtport_core::funcgraph::{self, CallGraph};
use rtport_core::kbdata;
use rtport_core::microvm;
use rtport_core::patchkit::{self, PatchObject};
use rtport_core::rewrite::{self, ActionKind, PlanOptions, Request, RewriteAction, SLOT_SIZE};
use rtport_core::symrec::{self, SymbolLayout, SymbolTable};
use rtport_core::{FirmwareImage, SegmentKind};

use crate::formats::{DriverLine, PlanFile};

/// A redirect succeeds only if it lands within this many instructions.
pub const MAX_REDIRECT_STEPS: u32 = 8;

pub fn inspect(image: &FirmwareImage, graph: &CallGraph) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "arch {} endian {:?} format {:?}", image.arch.name(), image.endianness, image.source_format);
    if let Some(e) = image.entry_point {
        let _ = writeln!(s, "entry {e:08x}");
    }
    for seg in image.segments() {
        let kind = match seg.kind {
            SegmentKind::Code => "code",
            SegmentKind::Data => "data",
            SegmentKind::Bss => "bss",
            SegmentKind::Unknown => "unknown",
        };
        let _ = writeln!(s, "segment {} {kind} {:08x} {:08x}", seg.name, seg.start, seg.end());
    }
    let strings: usize = graph.functions.values().map(|f| f.string_refs.len()).sum();
    let _ = writeln!(s, "functions {} calls {} string-refs {strings}", graph.len(), graph.edges.len());
    s
}

/// `stride,name,value[,type]` or a named layout.
pub fn parse_layout(spec: &str) -> anyhow::Result<SymbolLayout> {
    if let Some(l) = kbdata::symbol_layout(spec.trim()) {
        return Ok(l);
    }
    let n: Vec<u32> = spec
        .split(',')
        .map(|v| v.trim().parse::<u32>().with_context(|| format!("bad layout field `{v}`")))
        .collect::<anyhow::Result<_>>()?;
    let l = match n.as_slice() {
        [s, name, value] => SymbolLayout::new(*s, *name, *value, None),
        [s, name, value, ty] => SymbolLayout::new(*s, *name, *value, Some(*ty)),
        _ => bail!("expected stride,name_off,value_off[,type_off]"),
    };
    l.map_err(|e| anyhow!("{e}"))
}

pub struct RecoveredSymbols {
    pub table: SymbolTable,
    pub skipped: usize,
}

pub fn recover_symbols(image: &FirmwareImage, layout: &SymbolLayout) -> anyhow::Result<RecoveredSymbols> {
    let p = symrec::recover(image, layout, symrec::DEFAULT_MIN_RUN, symrec::DEFAULT_MAX_GAP)?;
    Ok(RecoveredSymbols { table: p.table, skipped: p.skipped })
}

/// Reference side of a match: a named image.
pub struct Reference {
    pub graph: CallGraph,
    pub symbols: usize,
}

pub fn reference_graph(
    image: &FirmwareImage,
    symbols: Option<&SymbolTable>,
    layout: &SymbolLayout,
) -> anyhow::Result<Reference> {
    let mut graph = funcgraph::analyze(image, &[]);
    let owned;
    let table = match symbols {
        Some(t) => t,
        None => {
            owned = recover_symbols(image, layout).context("reference image")?.table;
            &owned
        }
    };
    let cov = symrec::apply_symbols(table, &mut graph);
    if cov.named == 0 {
        bail!("reference image has no named functions");
    }
    Ok(Reference { graph, symbols: cov.named })
}

pub struct Matched {
    pub first: MatchResult,
    pub result: MatchResult,
    pub summary: MatchSummary,
    pub bsp: Option<BspRegion>,
}

/// Anchor localisation: direct matches against a reference (or names from
/// a symbol table), then knowledge-base guided iteration.
pub fn match_anchors(
    graph: &CallGraph,
    reference: Option<&Reference>,
    symbols: Option<&SymbolTable>,
    kb: &KnowledgeBase,
    cfg: &MatchConfig,
) -> anyhow::Result<Matched> {
    let (first, ref_symbols) = match (reference, symbols) {
        (Some(r), _) => (anchor::first_pass(graph, &r.graph, cfg)?, r.symbols),
        (None, Some(t)) if !t.is_empty() => {
            let mut named = graph.clone();
            symrec::apply_symbols(t, &mut named);
            (anchor::bind_named(&named, kb), t.len())
        }
        _ => bail!("no reference image and no symbols; nothing to match against"),
    };
    let result = anchor::iterate(&first, graph, kb, cfg);
    let bsp = match anchor::locate_bsp(&result, graph, kb, None) {
        Ok(b) => Some(b),
        Err(e) => {
            log::warn!("BSP region not located: {e}");
            None
        }
    };
    let summary = anchor::summarize(ref_symbols, &first, &result, kb);
    Ok(Matched { first, result, summary, bsp })
}

pub struct Located {
    pub scan: DriverScan,
    /// Driver init -> pointer-table word holding it.
    pub slots: BTreeMap<u32, u32>,
}

/// Driver discovery below the bound registration anchors. Init-pointer
/// tables come from their boundary symbols when known, otherwise from the
/// walker's literal operands.
pub fn locate_drivers(
    image: &FirmwareImage,
    graph: &CallGraph,
    matches: &MatchResult,
    kb: &KnowledgeBase,
    db: &KeywordDb,
    symbols: Option<&SymbolTable>,
) -> anyhow::Result<Located> {
    let mut targets = Vec::new();
    let mut slots = BTreeMap::new();
    for n in &kb.nodes {
        let (Some((start, end)), Some(&addr)) = (&n.pointer_table, matches.bindings.get(&n.name)) else { continue };
        let by_symbol = symbols.and_then(|t| drvloc::resolve_pointer_table(image, graph, start, end, t).ok());
        match by_symbol.or_else(|| drvloc::infer_pointer_table(image, graph, addr)) {
            Some(t) => {
                for &(slot, f) in &t.slots {
                    slots.entry(f).or_insert(slot);
                }
                targets.push((n.name.clone(), t.entries()));
            }
            None => log::warn!("{}: init-pointer table [{start}, {end}) not found", n.name),
        }
    }
    let scan = drvloc::locate_drivers(graph, matches, kb, db, &targets, drvloc::DEFAULT_DEPTH)?;
    Ok(Located { scan, slots })
}

/// One replacement: every driver of a category, or one function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Replace {
    Category { category: DriverCategory, function: String },
    Function { victim: u32, function: String },
}

/// Default replacement function name for a category.
pub fn default_replacement(cat: DriverCategory) -> String {
    kbdata::patch_function(cat)
}

pub struct PlanInputs<'a> {
    pub image: &'a FirmwareImage,
    pub graph: &'a CallGraph,
    pub patch: &'a PatchObject,
    pub drivers: &'a [DriverLine],
    /// Empty: replace every category the patch has a default function for.
    pub replace: &'a [Replace],
    pub symtab: &'a SymbolTable,
    pub overrides: &'a BTreeMap<String, u32>,
    pub heap_top_symbol: Option<&'a str>,
    pub heap_top: Option<u32>,
    pub patch_base: Option<u32>,
    pub options: PlanOptions,
}

pub struct Planned {
    pub file: PlanFile,
    pub report: String,
    pub warnings: Vec<String>,
}

pub fn plan_patch(inp: &PlanInputs<'_>) -> anyhow::Result<Planned> {
    let defaults: Vec<Replace>;
    let replace = if inp.replace.is_empty() {
        let cats: BTreeSet<DriverCategory> = inp.drivers.iter().map(|d| d.category).collect();
        defaults = cats
            .into_iter()
            .filter(|c| inp.patch.functions.contains(&default_replacement(*c)))
            .map(|category| Replace::Category { category, function: default_replacement(category) })
            .collect();
        &defaults
    } else {
        inp.replace
    };
    // (request, function) pairs; targets resolve once the patch is placed.
    let mut wanted: Vec<(Request, &str)> = Vec::new();
    for r in replace {
        match r {
            Replace::Category { category, function } => {
                let mut any = false;
                for d in inp.drivers.iter().filter(|d| d.category == *category) {
                    any = true;
                    let req = match d.slot {
                        Some(slot) => Request::Slot { slot, target: 0 },
                        None => Request::Function { victim: d.init, target: 0 },
                    };
                    wanted.push((req, function));
                }
                if !any {
                    log::warn!("no {category} driver located; replacement {function} unused");
                }
            }
            Replace::Function { victim, function } => {
                wanted.push((Request::Function { victim: *victim, target: 0 }, function));
            }
        }
    }
    if wanted.is_empty() {
        bail!("nothing to replace: no located driver has a replacement in the patch");
    }
    for (_, f) in &wanted {
        if !inp.patch.functions.contains(*f) && !inp.patch.defined.contains_key(*f) {
            bail!("patch object does not define `{f}`");
        }
    }

    let mut warnings = Vec::new();
    let base = match inp.patch_base {
        Some(b) => b,
        None => {
            let reserve = SLOT_SIZE * wanted.len() as u32;
            let c = patchkit::choose_base(inp.image, inp.symtab, inp.heap_top_symbol, inp.heap_top, reserve);
            warnings.extend(c.warnings);
            c.base
        }
    };
    let placement = patchkit::resolve(inp.patch, base, inp.symtab, inp.overrides)?;
    patchkit::check_no_overlap(inp.image, placement.base, placement.end)?;
    let requests: Vec<Request> = wanted
        .iter()
        .map(|(r, f)| {
            let target = placement.symbols[*f];
            match *r {
                Request::Slot { slot, .. } => Request::Slot { slot, target },
                Request::Function { victim, .. } => Request::Function { victim, target },
            }
        })
        .collect();
    let plan = rewrite::plan(inp.image, inp.graph, &placement, &requests, inp.options)?;
    let names: BTreeMap<u32, String> =
        inp.graph.functions.values().filter_map(|f| f.name.clone().map(|n| (f.entry, n))).collect();
    let report = rewrite::report(&plan, &placement, &names);
    let file = PlanFile {
        arch: inp.image.arch,
        endianness: inp.image.endianness,
        image_base: inp.image.min_start().unwrap_or(0),
        patch_base: base,
        options: plan.options,
        externs: placement.resolved.clone(),
        actions: plan.actions,
    };
    Ok(Planned { file, report, warnings })
}

/// Rewrites the image per `plan` and returns the flat ported image.
pub fn apply_patch(image: &FirmwareImage, patch: &PatchObject, plan: &PlanFile) -> anyhow::Result<Vec<u8>> {
    if plan.arch != image.arch || plan.endianness != image.endianness {
        bail!(
            "plan is for {} {:?}, image is {} {:?}",
            plan.arch.name(),
            plan.endianness,
            image.arch.name(),
            image.endianness
        );
    }
    if image.min_start() != Some(plan.image_base) {
        bail!("plan expects the image to start at {:#010x}", plan.image_base);
    }
    let placement = patchkit::resolve(patch, plan.patch_base, &SymbolTable::new(), &plan.externs)?;
    patchkit::check_no_overlap(image, placement.base, placement.end)?;
    let victims: Vec<u32> = plan.actions.iter().filter(|a| a.kind.is_direct()).map(|a| a.victim).collect();
    let graph = funcgraph::analyze(image, &victims);
    let built = rewrite::build(image, &graph, &placement, plan.actions.clone(), plan.options)?;
    let mut out = image.clone();
    rewrite::apply(&mut out, &built)?;
    Ok(rewrite::emit_ported(&out, &built, &placement, rtport_core::image::DEFAULT_SPAN_CAP)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub action: RewriteAction,
    pub pass: bool,
    pub detail: String,
}

/// Runs every action of `plan` on the flat ported image.
pub fn verify(ported: &[u8], plan: &PlanFile, budget: u32) -> anyhow::Result<Vec<Check>> {
    let image = FirmwareImage::load_raw(ported, plan.image_base, plan.arch, plan.endianness)?;
    let mut out = Vec::with_capacity(plan.actions.len());
    for &a in &plan.actions {
        let (pass, detail) = if a.kind == ActionKind::PointerSwap {
            match image.read_u32(a.victim) {
                Ok(w) if w == a.target && image.is_mapped(a.target) => (true, "slot holds target".to_string()),
                Ok(w) => (false, format!("slot holds {w:08x}")),
                Err(e) => (false, e.to_string()),
            }
        } else {
            let v = microvm::verify_redirect(&image, a.victim, a.target, budget);
            let pass = v.passed(MAX_REDIRECT_STEPS);
            let detail = match &v.fault {
                Some(f) => format!("fault {f:?}"),
                None if !v.reached => format!("target not reached in {} steps", v.steps),
                None if !v.clobbered.is_empty() => format!("clobbered registers {:?}", v.clobbered),
                None if !v.stack_balanced => "stack unbalanced".into(),
                None if !pass => format!("took {} steps", v.steps),
                None => format!("steps {}", v.steps),
            };
            (pass, detail)
        };
        out.push(Check { action: a, pass, detail });
    }
    Ok(out)
}

pub fn verify_report(checks: &[Check]) -> String {
    let mut s = String::new();
    for c in checks {
        let a = c.action;
        let verdict = if c.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "{verdict} {} {:08x} {:08x} {}", a.kind, a.victim, a.target, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    let _ = writeln!(s, "summary {} actions {failed} failed", checks.len());
    s
}

pub struct Fidelity {
    pub report: String,
    pub equal: bool,
}

pub fn compare_fidelity(
    traces: Option<(&TraceRecord, &TraceRecord)>,
    mems: Option<(&MemorySnapshot, &MemorySnapshot)>,
) -> anyhow::Result<Fidelity> {
    let mut s = String::new();
    let mut equal = true;
    if let Some((a, b)) = traces {
        let c = fidelity::compare_traces(a.focus(), b.focus());
        equal &= c.equal;
        let _ = write!(s, "trace equal {} lcp {} len-a {} len-b {}", c.equal, c.lcp, a.focus().len(), b.focus().len());
        if let Some(pc) = c.divergence_pc {
            let _ = write!(s, " diverges-at {pc:08x}");
        }
        s.push('\n');
    }
    if let Some((a, b)) = mems {
        let c = fidelity::compare_memory(a, b)?;
        equal &= c.equal;
        let _ = write!(s, "memory equal {} hash-a {} hash-b {}", c.equal, c.hash_a.short(), c.hash_b.short());
        if let Some(i) = c.first_difference {
            let _ = write!(s, " first-difference {i}");
        }
        s.push('\n');
        let _ = writeln!(s, "sha1-a {}\nsha1-b {}", c.hash_a.full, c.hash_b.full);
    }
    if s.is_empty() {
        bail!("nothing to compare; pass traces and/or memory dumps");
    }
    Ok(Fidelity { report: s, equal })
}
