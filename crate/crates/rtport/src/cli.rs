//! Command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use rtport_core::anchor::MatchConfig;
use rtport_core::fidelity::TraceSource;
use rtport_core::funcgraph;
use rtport_core::microvm::DEFAULT_BUDGET;
use rtport_core::patchkit::load_patch_object;
use rtport_core::rewrite::PlanOptions;
use rtport_core::symrec::{self, Provenance, SymbolLayout, SymbolTable};
use rtport_core::{Arch, Endianness};

use crate::config::{check_thresholds, parse_replace, PipelineConfig};
use crate::error::{usage, CliError, CliResult, StageContext};
use crate::formats::{self, parse_hex};
use crate::io::{load_image, read_bytes, read_text, write_atomic, ImageOpts};
use crate::kbfile::{load_kb, load_keywords, parse_rtos};
use crate::scenario::parse_scenario;
use crate::stages::{self, PlanInputs};
use crate::{ioserver, pipeline, synth};

fn addr(s: &str) -> Result<u32, String> {
    formats::parse_number(s).or_else(|| parse_hex(s)).ok_or_else(|| format!("`{s}` is not an address"))
}

#[derive(Debug, Parser)]
#[command(name = "rtport", version, about = "Binary-level porting of RTOS firmware to an emulator-friendly form")]
pub struct Cli {
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Copy)]
struct ImageArgs {
    /// Load address of a raw dump (forces raw loading).
    #[arg(long, value_parser = addr)]
    base: Option<u32>,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    endian: Option<Endianness>,
}

impl From<ImageArgs> for ImageOpts {
    fn from(a: ImageArgs) -> Self {
        ImageOpts { arch: a.arch, base: a.base, endian: a.endian }
    }
}

#[derive(Debug, Args)]
struct KbArgs {
    /// Knowledge base file (TOML).
    #[arg(long)]
    kb: Option<PathBuf>,
    /// Use the built-in knowledge base for this RTOS.
    #[arg(long)]
    rtos: Option<String>,
}

impl KbArgs {
    fn load(&self) -> CliResult<rtport_core::anchor::KnowledgeBase> {
        let rtos = self.rtos.as_deref().map(parse_rtos).transpose()?;
        load_kb(self.kb.as_deref(), rtos)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Summarise an image; optionally write the flat image and graph exports.
    Inspect {
        input: PathBuf,
        #[command(flatten)]
        image: ImageArgs,
        /// Write the flat image here.
        #[arg(long)]
        flat: Option<PathBuf>,
        /// Gap fill byte for --flat.
        #[arg(long, value_parser = addr, default_value = "0")]
        fill: u32,
        /// Call graph adjacency list.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Per-function features as CSV.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Recover the embedded symbol table into a `HEXADDR NAME` map.
    RecoverSymbols {
        input: PathBuf,
        #[command(flatten)]
        image: ImageArgs,
        /// `stride,name_off,value_off[,type_off]` or a layout name.
        #[arg(long)]
        sym_layout: Option<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Bind knowledge-base anchors and report the BSP region.
    MatchAnchors {
        input: PathBuf,
        #[command(flatten)]
        image: ImageArgs,
        #[command(flatten)]
        kb: KbArgs,
        /// Named image of the same RTOS to match against.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Symbol map naming the reference (default: recovered from it).
        #[arg(long)]
        reference_symbols: Option<PathBuf>,
        /// Symbol map for the input itself (used without --reference).
        #[arg(long)]
        symbols: Option<PathBuf>,
        #[arg(long)]
        sym_layout: Option<String>,
        #[arg(long, default_value_t = 0.75)]
        first_pass: f64,
        #[arg(long, default_value_t = 0.95)]
        iteration: f64,
        #[arg(long, default_value_t = 0.10)]
        margin: f64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Find and classify driver init functions below the bound anchors.
    LocateDrivers {
        input: PathBuf,
        #[command(flatten)]
        image: ImageArgs,
        #[command(flatten)]
        kb: KbArgs,
        /// Anchor report from match-anchors.
        #[arg(long)]
        matches: PathBuf,
        #[arg(long)]
        keywords: Option<PathBuf>,
        /// Symbol map used for init-pointer table bounds.
        #[arg(long)]
        symbols: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Place and link the patch, then write the rewrite plan.
    PlanPatch {
        input: PathBuf,
        #[command(flatten)]
        image: ImageArgs,
        #[command(flatten)]
        kb: KbArgs,
        /// Relocatable patch object.
        #[arg(long)]
        patch: PathBuf,
        /// Driver report from locate-drivers.
        #[arg(long)]
        drivers: PathBuf,
        /// Anchor report; its bindings help resolve patch externals.
        #[arg(long)]
        matches: Option<PathBuf>,
        #[arg(long)]
        symbols: Option<PathBuf>,
        /// `NAME HEXADDR` map for externals.
        #[arg(long)]
        overrides: Option<PathBuf>,
        /// `CATEGORY=FUNCTION` or `ADDR=FUNCTION`; repeatable.
        #[arg(long)]
        replace: Vec<String>,
        #[arg(long, value_parser = addr)]
        heap_top: Option<u32>,
        #[arg(long, value_parser = addr)]
        patch_base: Option<u32>,
        /// Near `jmp rel32` instead of the far jump on x86.
        #[arg(long)]
        x86_near: bool,
        /// Register-free literal jump instead of ARM trampolines.
        #[arg(long)]
        arm_literal: bool,
        #[arg(long, value_parser = addr)]
        selector: Option<u32>,
        #[arg(long, default_value_t = 0)]
        scratch: u8,
        #[arg(long, short)]
        out: PathBuf,
        /// Human-readable placement report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rewrite the image per plan and write the flat ported image.
    ApplyPatch {
        input: PathBuf,
        #[command(flatten)]
        image: ImageArgs,
        #[arg(long)]
        patch: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Check every planned redirect on the ported image.
    Verify {
        /// Flat ported image.
        image: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: u32,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run the scripted I/O server.
    ServeIo {
        #[arg(long)]
        scenario: PathBuf,
        /// Stop after this long (default: run until killed).
        #[arg(long)]
        duration_ms: Option<u64>,
    },
    /// Compare device and emulator traces and memory dumps.
    CompareFidelity {
        #[arg(long)]
        trace_a: Option<PathBuf>,
        #[arg(long)]
        trace_b: Option<PathBuf>,
        #[arg(long)]
        mem_a: Option<PathBuf>,
        #[arg(long)]
        mem_b: Option<PathBuf>,
        /// Exit 3 when anything differs.
        #[arg(long)]
        strict: bool,
    },
    /// Build a synthetic firmware image with ground truth and a patch.
    GenSynthetic {
        /// Spec file (TOML); --template builds a default spec instead.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        template: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run every stage from a config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report_line());
            e.exit_code()
        }
    }
}

fn symbols_from(path: Option<&Path>) -> CliResult<Option<SymbolTable>> {
    path.map(parse_symbol_file).transpose()
}

fn parse_symbol_file(p: &Path) -> CliResult<SymbolTable> {
    formats::parse_symbol_map(&read_text(p)?, Provenance::Analyst).map_err(|e| usage(e.to_string()))
}

fn layout_arg(s: Option<&str>) -> CliResult<SymbolLayout> {
    s.map(|s| stages::parse_layout(s).map_err(|e| usage(format!("--sym-layout: {e}"))))
        .transpose()
        .map(|l| l.unwrap_or(SymbolLayout::VXWORKS_FLAT))
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Inspect { input, image, flat, fill, graph, features } => {
            let img = load_image(&input, image.into())?;
            let g = funcgraph::analyze(&img, &[]);
            print!("{}", stages::inspect(&img, &g));
            if let Some(p) = flat {
                let fill = u8::try_from(fill).map_err(|_| usage("--fill must be a byte"))?;
                write_atomic(&p, &img.emit_flat(fill, rtport_core::image::DEFAULT_SPAN_CAP).stage("inspect")?)?;
            }
            if let Some(p) = graph {
                write_atomic(&p, formats::write_adjacency(&g).as_bytes())?;
            }
            if let Some(p) = features {
                write_atomic(&p, formats::write_features_csv(&g).stage("inspect")?.as_bytes())?;
            }
        }
        Command::RecoverSymbols { input, image, sym_layout, out } => {
            let img = load_image(&input, image.into())?;
            let layout = layout_arg(sym_layout.as_deref())?;
            let r = stages::recover_symbols(&img, &layout).stage("recover-symbols")?;
            let mut g = funcgraph::analyze(&img, &[]);
            let cov = symrec::apply_symbols(&r.table, &mut g);
            println!(
                "symbols {} skipped {} functions named {}/{} ({:.1}%)",
                r.table.len(),
                r.skipped,
                cov.named,
                cov.total,
                cov.ratio() * 100.0
            );
            write_atomic(&out, formats::write_symbol_map(&r.table).as_bytes())?;
        }
        Command::MatchAnchors {
            input,
            image,
            kb,
            reference,
            reference_symbols,
            symbols,
            sym_layout,
            first_pass,
            iteration,
            margin,
            out,
        } => {
            let kb = kb.load()?;
            let cfg = MatchConfig {
                first_pass_threshold: first_pass,
                iteration_threshold: iteration,
                margin,
                ..MatchConfig::default()
            };
            check_thresholds(&cfg)?;
            let layout = layout_arg(sym_layout.as_deref())?;
            let img = load_image(&input, image.into())?;
            let graph = funcgraph::analyze(&img, &[]);
            let reference = match reference {
                Some(p) => {
                    let rimg = load_image(&p, ImageOpts::default())?;
                    let rsyms = symbols_from(reference_symbols.as_deref())?;
                    Some(stages::reference_graph(&rimg, rsyms.as_ref(), &layout).stage("match-anchors")?)
                }
                None => None,
            };
            let syms = symbols_from(symbols.as_deref())?;
            let m =
                stages::match_anchors(&graph, reference.as_ref(), syms.as_ref(), &kb, &cfg).stage("match-anchors")?;
            let s = &m.summary;
            println!(
                "symbols {} direct {} anchors-first {} missing {} anchors-after {}",
                s.symbols, s.direct, s.anchors_first, s.missing, s.anchors_after
            );
            write_atomic(&out, formats::write_anchor_report(&m.summary, &m.result, m.bsp.as_ref()).as_bytes())?;
        }
        Command::LocateDrivers { input, image, kb, matches, keywords, symbols, out } => {
            let kb = kb.load()?;
            let db = load_keywords(keywords.as_deref())?;
            let report = formats::parse_anchor_report(&read_text(&matches)?).map_err(|e| usage(e.to_string()))?;
            let syms = symbols_from(symbols.as_deref())?;
            let img = load_image(&input, image.into())?;
            let graph = funcgraph::analyze(&img, &[]);
            let l = stages::locate_drivers(&img, &graph, &report.result, &kb, &db, syms.as_ref())
                .stage("locate-drivers")?;
            for r in &l.scan.reports {
                println!("{:08x} {} via {}", r.init_function, r.category, r.anchor);
            }
            write_atomic(
                &out,
                formats::write_driver_report(&l.scan.reports, &l.slots, &l.scan.unbound_anchors).as_bytes(),
            )?;
        }
        Command::PlanPatch {
            input,
            image,
            kb,
            patch,
            drivers,
            matches,
            symbols,
            overrides,
            replace,
            heap_top,
            patch_base,
            x86_near,
            arm_literal,
            selector,
            scratch,
            out,
            report,
        } => {
            let kb = kb.load()?;
            let img = load_image(&input, image.into())?;
            let obj = load_patch_object(&read_bytes(&patch)?, img.arch, img.endianness).stage("plan-patch")?;
            let drivers = formats::parse_driver_report(&read_text(&drivers)?).map_err(|e| usage(e.to_string()))?;
            let mut symtab = symbols_from(symbols.as_deref())?.unwrap_or_default();
            if let Some(m) = matches {
                let r = formats::parse_anchor_report(&read_text(&m)?).map_err(|e| usage(e.to_string()))?;
                symtab.extend(formats::bindings_as_symbols(&r.result).entries().iter().cloned());
            }
            let overrides = match overrides {
                Some(p) => formats::parse_override_map(&read_text(&p)?).map_err(|e| usage(e.to_string()))?,
                None => Default::default(),
            };
            let replace = replace
                .iter()
                .map(|r| {
                    let (k, f) =
                        r.split_once('=').ok_or_else(|| usage(format!("--replace `{r}`: expected KEY=FUNCTION")))?;
                    match addr(k) {
                        Ok(_) => parse_replace(None, Some(k), f),
                        Err(_) => parse_replace(Some(k), None, f),
                    }
                })
                .collect::<CliResult<Vec<_>>>()?;
            let selector =
                selector.map(|s| u16::try_from(s).map_err(|_| usage("--selector exceeds 16 bits"))).transpose()?;
            let mut graph = funcgraph::analyze(&img, &[]);
            symrec::apply_symbols(&symtab, &mut graph);
            let planned = stages::plan_patch(&PlanInputs {
                image: &img,
                graph: &graph,
                patch: &obj,
                drivers: &drivers,
                replace: &replace,
                symtab: &symtab,
                overrides: &overrides,
                heap_top_symbol: kb.heap_top_symbol.as_deref(),
                heap_top,
                patch_base,
                options: PlanOptions { x86_near, arm_literal, selector, scratch },
            })
            .stage("plan-patch")?;
            for w in &planned.warnings {
                log::warn!("{w}");
            }
            print!("{}", planned.report);
            write_atomic(&out, formats::write_plan(&planned.file).as_bytes())?;
            if let Some(p) = report {
                write_atomic(&p, planned.report.as_bytes())?;
            }
        }
        Command::ApplyPatch { input, image, patch, plan, out } => {
            let img = load_image(&input, image.into())?;
            let plan = formats::parse_plan(&read_text(&plan)?).map_err(|e| usage(e.to_string()))?;
            let obj = load_patch_object(&read_bytes(&patch)?, img.arch, img.endianness).stage("apply-patch")?;
            let ported = stages::apply_patch(&img, &obj, &plan).stage("apply-patch")?;
            write_atomic(&out, &ported)?;
            println!("ported image {} bytes at {:08x}", ported.len(), plan.image_base);
        }
        Command::Verify { image, plan, budget, out } => {
            let plan = formats::parse_plan(&read_text(&plan)?).map_err(|e| usage(e.to_string()))?;
            let checks = stages::verify(&read_bytes(&image)?, &plan, budget).stage("verify")?;
            let report = stages::verify_report(&checks);
            print!("{report}");
            if let Some(p) = out {
                write_atomic(&p, report.as_bytes())?;
            }
            let failed = checks.iter().filter(|c| !c.pass).count();
            if failed > 0 {
                return Err(CliError::Verification(format!("{failed} of {} actions failed", checks.len())));
            }
        }
        Command::ServeIo { scenario, duration_ms } => {
            let sc = parse_scenario(&read_text(&scenario)?, scenario.parent())?;
            let log = ioserver::serve(sc, duration_ms.map(Duration::from_millis)).stage("serve-io")?;
            log::info!("{} log lines", log.lines().count());
        }
        Command::CompareFidelity { trace_a, trace_b, mem_a, mem_b, strict } => {
            let traces = match (trace_a, trace_b) {
                (Some(a), Some(b)) => Some((
                    formats::parse_trace(&read_text(&a)?, TraceSource::Device).map_err(|e| usage(e.to_string()))?,
                    formats::parse_trace(&read_text(&b)?, TraceSource::Emulator).map_err(|e| usage(e.to_string()))?,
                )),
                (None, None) => None,
                _ => return Err(usage("pass both --trace-a and --trace-b")),
            };
            let mems = match (mem_a, mem_b) {
                (Some(a), Some(b)) => Some((load_memory(&a, "a")?, load_memory(&b, "b")?)),
                (None, None) => None,
                _ => return Err(usage("pass both --mem-a and --mem-b")),
            };
            let f = stages::compare_fidelity(traces.as_ref().map(|(a, b)| (a, b)), mems.as_ref().map(|(a, b)| (a, b)))
                .map_err(|e| usage(e.to_string()))?;
            print!("{}", f.report);
            if strict && !f.equal {
                return Err(CliError::Verification("device and emulator differ".into()));
            }
        }
        Command::GenSynthetic { spec, template, seed, out } => {
            let file = match (spec, template) {
                (Some(p), None) => synth::SynthSpecFile::parse(&read_text(&p)?)?,
                (None, Some(t)) => {
                    synth::SynthSpecFile { template: t, ..synth::SynthSpecFile::parse("template = ''")? }
                }
                _ => return Err(usage("pass exactly one of --spec, --template")),
            };
            let files = synth::generate(&file, seed)?;
            std::fs::create_dir_all(&out).map_err(|e| usage(format!("cannot create {}: {e}", out.display())))?;
            for (name, bytes) in files {
                write_atomic(&out.join(name), &bytes)?;
                println!("wrote {}", out.join(name).display());
            }
        }
        Command::Pipeline { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let outcome = pipeline::run_pipeline(&cfg)?;
            println!("pipeline ok: {} actions verified", outcome.checks.len());
            for p in outcome.outputs {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn load_memory(path: &Path, label: &str) -> CliResult<rtport_core::fidelity::MemorySnapshot> {
    let mut meta = path.as_os_str().to_owned();
    meta.push(".meta");
    let meta = read_text(Path::new(&meta))?;
    formats::memory_snapshot(read_bytes(path)?, &meta, label).map_err(|e| usage(e.to_string()))
}
