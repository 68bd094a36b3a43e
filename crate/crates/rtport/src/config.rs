//! Pipeline configuration (TOML). Paths are relative to the config file.
//!
//! ```toml
//! firmware = "firmware.elf"
//! patch = "patch.o"
//! reference = "reference.elf"   # optional named image to match against
//! symbols = "symbols.txt"       # optional analyst symbol map
//! overrides = "externs.txt"     # optional `NAME HEXADDR` map
//! rtos = "vxworks"              # or kb = "kb.toml"
//! keywords = "keywords.txt"     # optional, defaults to the built-in db
//! scenario = "scenario.toml"    # optional, validated only
//! out_dir = "out"
//! heap_top = "0x00400000"
//! patch_base = "0x00500000"
//! selector = "0x0008"
//! scratch = 0
//! x86_near = false
//! arm_literal = false
//! sym_layout = "20,0,4"
//!
//! [image]                       # only for raw dumps
//! arch = "arm"
//! base = "0x10000"
//! endian = "le"
//!
//! [thresholds]
//! first_pass = 0.75
//! iteration = 0.95
//! margin = 0.10
//!
//! [[replace]]
//! category = "uart"             # or victim = "0x..."
//! function = "my_uart_init"
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;

use rtport_core::anchor::{KnowledgeBase, MatchConfig};
use rtport_core::drvloc::{DriverCategory, KeywordDb};
use rtport_core::rewrite::PlanOptions;
use rtport_core::symrec::SymbolLayout;

use crate::error::{usage, CliResult};
use crate::formats::parse_number;
use crate::io::{read_text, ImageOpts};
use crate::kbfile::{load_kb, load_keywords, parse_rtos};
use crate::scenario::parse_scenario;
use crate::stages::{parse_layout, Replace};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    firmware: PathBuf,
    patch: PathBuf,
    reference: Option<PathBuf>,
    symbols: Option<PathBuf>,
    overrides: Option<PathBuf>,
    kb: Option<PathBuf>,
    rtos: Option<String>,
    keywords: Option<PathBuf>,
    scenario: Option<PathBuf>,
    #[serde(default = "default_out")]
    out_dir: PathBuf,
    heap_top: Option<String>,
    patch_base: Option<String>,
    selector: Option<String>,
    #[serde(default)]
    scratch: u8,
    #[serde(default)]
    x86_near: bool,
    #[serde(default)]
    arm_literal: bool,
    sym_layout: Option<String>,
    #[serde(default)]
    image: ImageSection,
    #[serde(default)]
    thresholds: Thresholds,
    #[serde(default)]
    replace: Vec<ReplaceEntry>,
}

fn default_out() -> PathBuf {
    "out".into()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageSection {
    arch: Option<String>,
    base: Option<String>,
    endian: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Thresholds {
    first_pass: f64,
    iteration: f64,
    margin: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        let d = MatchConfig::default();
        Thresholds { first_pass: d.first_pass_threshold, iteration: d.iteration_threshold, margin: d.margin }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReplaceEntry {
    category: Option<String>,
    victim: Option<String>,
    function: String,
}

/// A validated configuration: every referenced file exists and every
/// value parsed.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub firmware: PathBuf,
    pub patch: PathBuf,
    pub reference: Option<PathBuf>,
    pub symbols: Option<PathBuf>,
    pub overrides: Option<PathBuf>,
    pub scenario: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub kb: KnowledgeBase,
    pub keywords: KeywordDb,
    pub image: ImageOpts,
    pub matching: MatchConfig,
    pub layout: SymbolLayout,
    pub heap_top: Option<u32>,
    pub patch_base: Option<u32>,
    pub options: PlanOptions,
    pub replace: Vec<Replace>,
}

fn number(field: &str, v: &Option<String>) -> CliResult<Option<u32>> {
    v.as_deref().map(|s| parse_number(s).ok_or_else(|| usage(format!("config: bad {field} `{s}`")))).transpose()
}

pub fn parse_replace(category: Option<&str>, victim: Option<&str>, function: &str) -> CliResult<Replace> {
    let function = function.to_string();
    match (category, victim) {
        (Some(c), None) => {
            Ok(Replace::Category { category: c.parse::<DriverCategory>().map_err(|e| usage(e.to_string()))?, function })
        }
        (None, Some(v)) => Ok(Replace::Function {
            victim: parse_number(v).ok_or_else(|| usage(format!("bad victim address `{v}`")))?,
            function,
        }),
        _ => Err(usage("each replacement needs exactly one of category, victim")),
    }
}

pub fn check_thresholds(cfg: &MatchConfig) -> CliResult<()> {
    for (name, v) in
        [("first_pass", cfg.first_pass_threshold), ("iteration", cfg.iteration_threshold), ("margin", cfg.margin)]
    {
        if !(v > 0.0 && v <= 1.0) {
            return Err(usage(format!("threshold {name} = {v} is outside (0, 1]")));
        }
    }
    Ok(())
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read_text(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, dir)
    }

    pub fn parse(text: &str, dir: &Path) -> CliResult<Self> {
        let f: ConfigFile = toml::from_str(text).map_err(|e| usage(format!("config: {e}")))?;
        let rel = |p: &Path| if p.is_relative() { dir.join(p) } else { p.to_path_buf() };
        let must_exist = |p: &Path| -> CliResult<PathBuf> {
            let p = rel(p);
            if p.is_file() {
                Ok(p)
            } else {
                Err(usage(format!("config: {} does not exist", p.display())))
            }
        };
        let opt = |p: &Option<PathBuf>| p.as_deref().map(must_exist).transpose();
        let firmware = must_exist(&f.firmware)?;
        let patch = must_exist(&f.patch)?;
        let reference = opt(&f.reference)?;
        let symbols = opt(&f.symbols)?;
        let overrides = opt(&f.overrides)?;
        let scenario = opt(&f.scenario)?;
        let kb_path = opt(&f.kb)?;
        let keywords_path = opt(&f.keywords)?;
        let rtos = f.rtos.as_deref().map(parse_rtos).transpose()?;
        let kb = load_kb(kb_path.as_deref(), rtos)?;
        let keywords = load_keywords(keywords_path.as_deref())?;
        if let Some(s) = &scenario {
            parse_scenario(&read_text(s)?, s.parent())?;
        }
        let image = ImageOpts {
            arch: f.image.arch.as_deref().map(|a| a.parse().map_err(usage)).transpose()?,
            base: number("image base", &f.image.base)?,
            endian: f.image.endian.as_deref().map(|e| e.parse().map_err(usage)).transpose()?,
        };
        let matching = MatchConfig {
            first_pass_threshold: f.thresholds.first_pass,
            iteration_threshold: f.thresholds.iteration,
            margin: f.thresholds.margin,
            ..MatchConfig::default()
        };
        check_thresholds(&matching)?;
        let layout = match &f.sym_layout {
            Some(s) => parse_layout(s).map_err(|e| usage(format!("config: sym_layout: {e}")))?,
            None => SymbolLayout::VXWORKS_FLAT,
        };
        let selector = number("selector", &f.selector)?
            .map(|s| u16::try_from(s).map_err(|_| usage("config: selector exceeds 16 bits")))
            .transpose()?;
        let options = PlanOptions { x86_near: f.x86_near, arm_literal: f.arm_literal, selector, scratch: f.scratch };
        if options.scratch > 12 {
            return Err(usage(format!("config: scratch register r{} is not r0..r12", options.scratch)));
        }
        let replace = f
            .replace
            .iter()
            .map(|r| parse_replace(r.category.as_deref(), r.victim.as_deref(), &r.function))
            .collect::<CliResult<_>>()?;
        Ok(PipelineConfig {
            firmware,
            patch,
            reference,
            symbols,
            overrides,
            scenario,
            out_dir: rel(&f.out_dir),
            kb,
            keywords,
            image,
            matching,
            layout,
            heap_top: number("heap_top", &f.heap_top)?,
            patch_base: number("patch_base", &f.patch_base)?,
            options,
            replace,
        })
    }
}
