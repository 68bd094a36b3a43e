//! The whole flow from one config: inspect, recover symbols, match
//! anchors, locate drivers, plan, apply, verify. Each stage leaves its
//! artifact in the output directory so any of them can be rerun by hand.

use std::fs;
use std::path::{Path, PathBuf};

use rtport_core::funcgraph;
use rtport_core::microvm::DEFAULT_BUDGET;
use rtport_core::patchkit::load_patch_object;
use rtport_core::symrec::{self, Provenance, SymbolTable};

use crate::config::PipelineConfig;
use crate::error::{usage, CliError, CliResult, StageContext};
use crate::formats::{self, bindings_as_symbols, parse_driver_report, parse_override_map, parse_symbol_map};
use crate::io::{load_image, read_bytes, read_text, write_atomic, ImageOpts};
use crate::stages::{self, Check, PlanInputs};

pub const INSPECT: &str = "inspect.txt";
pub const SYMBOLS: &str = "symbols.txt";
pub const ANCHORS: &str = "anchors.txt";
pub const DRIVERS: &str = "drivers.txt";
pub const PLAN: &str = "plan.txt";
pub const PATCH_REPORT: &str = "patch-report.txt";
pub const PORTED: &str = "ported.bin";
pub const VERIFY: &str = "verify.txt";
pub const ERROR: &str = "error.txt";

#[derive(Debug)]
pub struct Outcome {
    pub checks: Vec<Check>,
    pub outputs: Vec<PathBuf>,
}

struct Out<'a> {
    dir: &'a Path,
    written: Vec<PathBuf>,
}

impl Out<'_> {
    fn put(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.dir.join(name);
        write_atomic(&p, bytes)?;
        self.written.push(p);
        Ok(())
    }
}

/// Runs every stage. A failure is also recorded in `error.txt` as one
/// `error CODE STAGE: message` line.
pub fn run_pipeline(cfg: &PipelineConfig) -> CliResult<Outcome> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| usage(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let stale = cfg.out_dir.join(ERROR);
    let _ = fs::remove_file(&stale);
    let mut out = Out { dir: &cfg.out_dir, written: Vec::new() };
    let r = stages_in_order(cfg, &mut out);
    match r {
        Ok(checks) => Ok(Outcome { checks, outputs: out.written }),
        Err(e) => {
            let _ = write_atomic(&stale, format!("{}\n", e.report_line()).as_bytes());
            Err(e)
        }
    }
}

fn stages_in_order(cfg: &PipelineConfig, out: &mut Out<'_>) -> CliResult<Vec<Check>> {
    let image = load_image(&cfg.firmware, cfg.image)?;
    let graph = funcgraph::analyze(&image, &[]);
    out.put(INSPECT, stages::inspect(&image, &graph).as_bytes())?;

    let mut symtab = match stages::recover_symbols(&image, &cfg.layout) {
        Ok(r) => {
            log::info!("recovered {} symbols, {} records skipped", r.table.len(), r.skipped);
            r.table
        }
        Err(e) => {
            log::warn!("no embedded symbol table recovered: {e:#}");
            SymbolTable::new()
        }
    };
    if let Some(p) = &cfg.symbols {
        let extra = parse_symbol_map(&read_text(p)?, Provenance::Analyst).map_err(|e| usage(e.to_string()))?;
        symtab.extend(extra.entries().iter().cloned());
    }
    out.put(SYMBOLS, formats::write_symbol_map(&symtab).as_bytes())?;

    let reference = match &cfg.reference {
        Some(p) => {
            let img = load_image(p, ImageOpts::default())?;
            Some(stages::reference_graph(&img, None, &cfg.layout).stage("match-anchors")?)
        }
        None => None,
    };
    let symbols = (!symtab.is_empty()).then_some(&symtab);
    let matched =
        stages::match_anchors(&graph, reference.as_ref(), symbols, &cfg.kb, &cfg.matching).stage("match-anchors")?;
    out.put(ANCHORS, formats::write_anchor_report(&matched.summary, &matched.result, matched.bsp.as_ref()).as_bytes())?;

    let located = stages::locate_drivers(&image, &graph, &matched.result, &cfg.kb, &cfg.keywords, symbols)
        .stage("locate-drivers")?;
    let drivers_text =
        formats::write_driver_report(&located.scan.reports, &located.slots, &located.scan.unbound_anchors);
    out.put(DRIVERS, drivers_text.as_bytes())?;
    let drivers = parse_driver_report(&drivers_text).stage("locate-drivers")?;

    let patch = load_patch_object(&read_bytes(&cfg.patch)?, image.arch, image.endianness).stage("plan-patch")?;
    let overrides = match &cfg.overrides {
        Some(p) => parse_override_map(&read_text(p)?).map_err(|e| usage(e.to_string()))?,
        None => Default::default(),
    };
    let mut patch_symbols = symtab.clone();
    patch_symbols.extend(bindings_as_symbols(&matched.result).entries().iter().cloned());
    let mut named = graph.clone();
    symrec::apply_symbols(&patch_symbols, &mut named);
    let planned = stages::plan_patch(&PlanInputs {
        image: &image,
        graph: &named,
        patch: &patch,
        drivers: &drivers,
        replace: &cfg.replace,
        symtab: &patch_symbols,
        overrides: &overrides,
        heap_top_symbol: cfg.kb.heap_top_symbol.as_deref(),
        heap_top: cfg.heap_top,
        patch_base: cfg.patch_base,
        options: cfg.options,
    })
    .stage("plan-patch")?;
    for w in &planned.warnings {
        log::warn!("{w}");
    }
    out.put(PLAN, formats::write_plan(&planned.file).as_bytes())?;
    out.put(PATCH_REPORT, planned.report.as_bytes())?;

    let ported = stages::apply_patch(&image, &patch, &planned.file).stage("apply-patch")?;
    out.put(PORTED, &ported)?;

    let checks = stages::verify(&ported, &planned.file, DEFAULT_BUDGET).stage("verify")?;
    out.put(VERIFY, stages::verify_report(&checks).as_bytes())?;
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        return Err(CliError::Verification(format!("{failed} of {} actions failed", checks.len())));
    }
    Ok(checks)
}
