//! Shipped knowledge bases, the seed driver keyword list, and a
//! deterministic synthetic-firmware builder.
//!
//! The builder emits small but structurally faithful images: a boot chain
//! laid out per the knowledge base, driver subtrees that reference
//! category strings, library routines, filler functions, an embedded
//! symbol table and, for RT-Thread, init-pointer tables. Everything it
//! places is recorded in a text [`Manifest`] that the test suites use as
//! ground truth.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchor::{FeatureRange, KbNode, KnowledgeBase, Rtos};
use crate::drvloc::{DriverCategory, KeywordDb};
use crate::elf::{self, write};
use crate::image::{Arch, Endianness};
use crate::isa::{arm, x86, COND_AL};
use crate::symrec::SymbolLayout;

/// Seed keyword database. Earlier categories take priority.
pub const SEED_KEYWORDS: &str = "\
# Driver category keywords, matched against strings a driver's init
# subtree references. `=word` matches a whole word (trailing digits
# allowed); anything else is a case-insensitive substring. The first
# category with a hit wins, so keep broad patterns low in the file.
[ETHERNET]
inet
socket
ethernet
mac address
=fei0
=lnc0
=sm
[UART]
uart
serial
baud
tty
[STORAGE]
=ata0
disk
sector
flash
[GPIO]
gpio
pin mux
[I2C]
i2c
iic
[SPI]
=spi
[ADC]
=adc
analog
[PWM]
pwm
duty cycle
[RTC]
=rtc
real-time clock
[WATCHDOG]
watchdog
=wdt
[HWTIMER]
hwtimer
timer overflow
[SENSOR]
sensor
temperature
accelerometer
";

pub fn seed_keyword_db() -> KeywordDb {
    KeywordDb::parse(SEED_KEYWORDS).expect("seed keyword list parses")
}

/// Two layouts seen in the wild; both use 20-byte records.
pub const SYMBOL_LAYOUTS: [(&str, SymbolLayout); 2] =
    [("vxworks-flat", SymbolLayout::VXWORKS_FLAT), ("vxworks6", SymbolLayout::VXWORKS6_STRUCT)];

pub fn symbol_layout(name: &str) -> Option<SymbolLayout> {
    SYMBOL_LAYOUTS.iter().find(|(n, _)| *n == name).map(|(_, l)| *l)
}

pub fn symbol_layout_name(layout: &SymbolLayout) -> Option<&'static str> {
    SYMBOL_LAYOUTS.iter().find(|(_, l)| l == layout).map(|(n, _)| *n)
}

struct NodeDef {
    name: &'static str,
    callees: &'static [&'static str],
    anchor: bool,
    registration: bool,
    table: Option<(&'static str, &'static str)>,
    branches: u32,
}

const fn node(name: &'static str, callees: &'static [&'static str], branches: u32) -> NodeDef {
    NodeDef { name, callees, anchor: false, registration: false, table: None, branches }
}

const fn anchor(name: &'static str, callees: &'static [&'static str], branches: u32, registration: bool) -> NodeDef {
    NodeDef { name, callees, anchor: true, registration, table: None, branches }
}

const fn table_anchor(name: &'static str, start: &'static str, end: &'static str) -> NodeDef {
    NodeDef { name, callees: &[], anchor: true, registration: true, table: Some((start, end)), branches: 1 }
}

const VXWORKS_NODES: &[NodeDef] = &[
    node("sysInit", &["usrInit"], 1),
    node("usrInit", &["sysHwInit", "usrKernelInit"], 2),
    node("sysHwInit", &["hardwareInterfaceInit", "sysSerialHwInit"], 1),
    node("hardwareInterfaceInit", &["hardwareInterfaceBusInit"], 2),
    anchor("hardwareInterfaceBusInit", &[], 1, true),
    node("sysSerialHwInit", &[], 3),
    node("usrKernelInit", &["sysMemTop", "kernelInit"], 1),
    node("sysMemTop", &[], 1),
    node("kernelInit", &["usrRoot"], 2),
    anchor(
        "usrRoot",
        &[
            "usrKernelCoreInit",
            "usrIosCoreInit",
            "usrKernelExtraInit",
            "usrIosExtraInit",
            "usrAtaConfig",
            "usrNetworkInit",
            "sysClkEnable",
            "usrAppInit",
        ],
        2,
        false,
    ),
    anchor("usrKernelCoreInit", &[], 3, false),
    anchor("usrIosCoreInit", &[], 1, true),
    node("usrKernelExtraInit", &[], 2),
    node("usrIosExtraInit", &[], 1),
    anchor("usrAtaConfig", &[], 2, true),
    node("usrNetworkInit", &["sysNvRamGet"], 3),
    node("sysNvRamGet", &[], 1),
    node("sysClkEnable", &[], 2),
    node("usrAppInit", &[], 1),
];

const RTTHREAD_NODES: &[NodeDef] = &[
    anchor(
        "rtthread_startup",
        &[
            "rt_hw_interrupt_disable",
            "rt_hw_board_init",
            "rt_show_version",
            "rt_system_timer_init",
            "rt_system_scheduler_init",
            "rt_application_init",
            "rt_system_scheduler_start",
        ],
        1,
        false,
    ),
    node("rt_hw_interrupt_disable", &[], 1),
    anchor("rt_hw_board_init", &["rt_system_heap_init", "rt_components_board_init"], 2, false),
    anchor("rt_system_heap_init", &[], 3, false),
    table_anchor("rt_components_board_init", "__rt_init_rti_board_start", "__rt_init_rti_board_end"),
    node("rt_show_version", &[], 1),
    node("rt_system_timer_init", &[], 2),
    node("rt_system_scheduler_init", &[], 3),
    node("rt_application_init", &["main_thread_entry"], 1),
    node("main_thread_entry", &["rt_components_init", "main"], 2),
    table_anchor("rt_components_init", "__rt_init_rti_board_end", "__rt_init_rti_end"),
    node("main", &[], 1),
    node("rt_system_scheduler_start", &[], 2),
];

/// Library calls every boot-chain function makes in the unmutated image.
const KB_UTIL_CALLS: u32 = 1;
/// Extra library calls a resized node gains.
const MUTATION_EXTRA_CALLS: u32 = 2;
/// Largest driver count a spec may ask for; the registration anchors'
/// callee ranges are sized for it.
pub const MAX_DRIVERS: usize = 48;
/// Fillers called from the application entry (`usrAppInit` / `main`).
const APP_CALLS: usize = 8;
pub const MAX_FILLERS: usize = 20_000;

fn defs(rtos: Rtos) -> &'static [NodeDef] {
    match rtos {
        Rtos::RtThread => RTTHREAD_NODES,
        _ => VXWORKS_NODES,
    }
}

/// The distinctive message a boot-chain function prints.
fn node_string(rtos: Rtos, i: usize) -> String {
    let tag = match rtos {
        Rtos::RtThread => "rtt",
        _ => "vx",
    };
    format!("{tag} boot phase {i:02} entered")
}

fn resized_branches(b: u32) -> u32 {
    2 * b + 3
}

fn kb_from(rtos: Rtos, entry: &str, boundary: &[&str], heap: Option<&str>) -> KnowledgeBase {
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for (i, d) in defs(rtos).iter().enumerate() {
        let b = resized_branches(d.branches);
        let children = d.callees.len() as u32;
        // Registration anchors and the application entry also call
        // drivers and fillers.
        let extra = if d.registration { MAX_DRIVERS as u32 } else { APP_CALLS as u32 };
        nodes.push(KbNode {
            name: d.name.into(),
            bb_count: FeatureRange::new(1, 1 + 2 * b + 8),
            edge_count: FeatureRange::new(0, 3 * b + 12),
            callee_count: FeatureRange::new(children, children + KB_UTIL_CALLS + MUTATION_EXTRA_CALLS + extra),
            in_degree: FeatureRange::new(0, 4),
            strings: BTreeSet::from([node_string(rtos, i)]),
            anchor: d.anchor,
            registration: d.registration,
            pointer_table: d.table.map(|(s, e)| (s.into(), e.into())),
        });
        for c in d.callees {
            edges.push((String::from(d.name), String::from(*c)));
        }
    }
    KnowledgeBase {
        rtos,
        entry: entry.into(),
        bsp_boundary: boundary.iter().map(|s| String::from(*s)).collect(),
        heap_top_symbol: heap.map(String::from),
        nodes,
        edges,
    }
}

/// VxWorks boot sequence: `sysInit` through `usrInit` and `kernelInit`
/// into the `usrRoot` task; everything before `usrRoot` is BSP.
pub fn vxworks_kb() -> KnowledgeBase {
    kb_from(Rtos::Vxworks, "sysInit", &["usrRoot"], Some("sysMemTop"))
}

/// RT-Thread startup: the board bring-up under `rt_hw_board_init` is BSP,
/// the kernel services started after it are not.
pub fn rtthread_kb() -> KnowledgeBase {
    kb_from(
        Rtos::RtThread,
        "rtthread_startup",
        &[
            "rt_show_version",
            "rt_system_timer_init",
            "rt_system_scheduler_init",
            "rt_application_init",
            "rt_system_scheduler_start",
        ],
        Some("__heap_end"),
    )
}

pub fn builtin_kb(rtos: Rtos) -> Option<KnowledgeBase> {
    match rtos {
        Rtos::Vxworks => Some(vxworks_kb()),
        Rtos::RtThread => Some(rtthread_kb()),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Template {
    VxworksX86,
    VxworksArm,
    VxworksArmBe,
    RtThreadArm,
}

impl Template {
    pub const ALL: [Template; 4] = [Self::VxworksX86, Self::VxworksArm, Self::VxworksArmBe, Self::RtThreadArm];

    pub fn name(self) -> &'static str {
        match self {
            Self::VxworksX86 => "vxworks-x86",
            Self::VxworksArm => "vxworks-arm",
            Self::VxworksArmBe => "vxworks-armeb",
            Self::RtThreadArm => "rtthread-arm",
        }
    }

    pub fn rtos(self) -> Rtos {
        match self {
            Self::RtThreadArm => Rtos::RtThread,
            _ => Rtos::Vxworks,
        }
    }

    pub fn arch(self) -> Arch {
        match self {
            Self::VxworksX86 => Arch::X86,
            _ => Arch::Arm,
        }
    }

    pub fn endianness(self) -> Endianness {
        match self {
            Self::VxworksArmBe => Endianness::Big,
            _ => Endianness::Little,
        }
    }

    /// Link address of the code segment.
    pub fn base(self) -> u32 {
        match self {
            Self::VxworksX86 => 0x0030_8000,
            Self::VxworksArm | Self::VxworksArmBe => 0x0001_0000,
            Self::RtThreadArm => 0x6001_0000,
        }
    }

    pub fn kb(self) -> KnowledgeBase {
        builtin_kb(self.rtos()).expect("templates only use shipped knowledge bases")
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Template {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| SpecError::Invalid(format!("unknown template `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SpecError {
    #[error("invalid synthetic spec: {0}")]
    Invalid(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
}

/// How the stripped side of a pair differs from its reference.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Mutation {
    /// Boot-chain functions given extra blocks and library calls.
    pub resize: Vec<String>,
    /// Emit filler functions in a seed-dependent order.
    pub shuffle: bool,
}

impl Mutation {
    /// Resize every knowledge-base node except `keep`, and shuffle.
    pub fn all_but(kb: &KnowledgeBase, keep: &[&str]) -> Self {
        Mutation {
            resize: kb.nodes.iter().filter(|n| !keep.contains(&n.name.as_str())).map(|n| n.name.clone()).collect(),
            shuffle: true,
        }
    }

    /// Resize exactly `anchors` and nothing else, and shuffle.
    pub fn anchors(names: &[&str]) -> Self {
        Mutation { resize: names.iter().map(|s| String::from(*s)).collect(), shuffle: true }
    }

    pub fn is_empty(&self) -> bool {
        self.resize.is_empty() && !self.shuffle
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub template: Template,
    pub fillers: usize,
    pub drivers: usize,
    pub layout: SymbolLayout,
    pub symbol_table: bool,
    /// Fraction of symbol records whose name pointer is destroyed.
    pub corruption: f64,
    pub mutation: Mutation,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(template: Template, seed: u64) -> Self {
        SyntheticSpec {
            template,
            fillers: 200,
            drivers: 13,
            layout: SymbolLayout::VXWORKS_FLAT,
            symbol_table: true,
            corruption: 0.0,
            mutation: Mutation::default(),
            seed,
        }
    }

    /// The stripped side of a matching pair: one anchor left intact, every
    /// other boot-chain function resized, fillers shuffled, no symbols.
    pub fn stripped(template: Template, seed: u64) -> Self {
        let kb = template.kb();
        let anchors: Vec<&str> = kb.anchors().map(|n| n.name.as_str()).collect();
        let keep = anchors[(seed as usize) % anchors.len()];
        SyntheticSpec { symbol_table: false, mutation: Mutation::all_but(&kb, &[keep]), ..Self::new(template, seed) }
    }

    /// The named, unmutated counterpart of `self`.
    pub fn reference(&self) -> Self {
        SyntheticSpec { symbol_table: true, corruption: 0.0, mutation: Mutation::default(), ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: String| Err(SpecError::Invalid(m));
        if !(0.0..1.0).contains(&self.corruption) {
            return bad(format!("corruption rate {} is outside [0, 1)", self.corruption));
        }
        if self.fillers > MAX_FILLERS {
            return bad(format!("{} fillers exceeds the limit of {MAX_FILLERS}", self.fillers));
        }
        if self.drivers == 0 || self.drivers > MAX_DRIVERS {
            return bad(format!("driver count must be 1..={MAX_DRIVERS}"));
        }
        if self.layout.validate().is_err() || self.layout.stride != 20 {
            return bad("only 20-byte symbol layouts are generated".into());
        }
        let kb = self.template.kb();
        for n in &self.mutation.resize {
            if kb.node(n).is_none() {
                return bad(format!("mutation names unknown node `{n}`"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Boot,
    Anchor,
    Driver,
    Helper,
    Library,
    Filler,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Self::Boot => "boot",
            Self::Anchor => "anchor",
            Self::Driver => "driver",
            Self::Helper => "helper",
            Self::Library => "library",
            Self::Filler => "filler",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Self::Boot, Self::Anchor, Self::Driver, Self::Helper, Self::Library, Self::Filler]
            .into_iter()
            .find(|r| r.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthFunction {
    pub addr: u32,
    pub role: Role,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthSymbol {
    pub record: u32,
    pub value: u32,
    pub name: String,
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthDriver {
    pub addr: u32,
    pub category: DriverCategory,
    pub anchor: String,
    pub name: String,
    /// Pointer-table word holding this init function.
    pub slot: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruthTable {
    pub start_symbol: String,
    pub start: u32,
    pub end_symbol: String,
    pub end: u32,
}

/// Ground truth for one synthetic image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub template: Template,
    pub seed: u64,
    pub entry: u32,
    pub code: (u32, u32),
    pub data: (u32, u32),
    pub heap_top: u32,
    pub layout: SymbolLayout,
    /// `[start, end)` of the embedded symbol table.
    pub symtab: Option<(u32, u32)>,
    pub functions: Vec<TruthFunction>,
    pub mutated: Vec<String>,
    pub symbols: Vec<TruthSymbol>,
    pub drivers: Vec<TruthDriver>,
    pub tables: Vec<TruthTable>,
}

const MANIFEST_MAGIC: &str = "rtport-manifest 1";

impl Manifest {
    pub fn arch(&self) -> Arch {
        self.template.arch()
    }

    pub fn endianness(&self) -> Endianness {
        self.template.endianness()
    }

    pub fn function(&self, name: &str) -> Option<u32> {
        self.functions.iter().find(|f| f.name == name).map(|f| f.addr)
    }

    pub fn anchors(&self) -> impl Iterator<Item = &TruthFunction> {
        self.functions.iter().filter(|f| f.role == Role::Anchor)
    }

    pub fn corrupted(&self) -> usize {
        self.symbols.iter().filter(|s| s.corrupted).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |l: String| {
            s.push_str(&l);
            s.push('\n');
        };
        line(MANIFEST_MAGIC.into());
        line(format!("template {}", self.template));
        line(format!("seed {}", self.seed));
        line(format!("entry {:#010x}", self.entry));
        line(format!("code {:#010x} {:#010x}", self.code.0, self.code.1));
        line(format!("data {:#010x} {:#010x}", self.data.0, self.data.1));
        line(format!("heap_top {:#010x}", self.heap_top));
        let l = &self.layout;
        let t = l.type_offset.map_or("-".to_string(), |t| t.to_string());
        line(format!("layout {} {} {} {}", l.stride, l.name_ptr_offset, l.value_offset, t));
        if let Some((a, b)) = self.symtab {
            line(format!("symtab {a:#010x} {b:#010x}"));
        }
        for f in &self.functions {
            line(format!("function {:#010x} {} {}", f.addr, f.role.name(), f.name));
        }
        for m in &self.mutated {
            line(format!("mutated {m}"));
        }
        for y in &self.symbols {
            let kw = if y.corrupted { "corrupt" } else { "symbol" };
            line(format!("{kw} {:#010x} {:#010x} {}", y.record, y.value, y.name));
        }
        for d in &self.drivers {
            let slot = d.slot.map_or(String::new(), |a| format!(" slot {a:#010x}"));
            line(format!("driver {:#010x} {} {} {}{slot}", d.addr, d.category, d.anchor, d.name));
        }
        for t in &self.tables {
            line(format!("table {} {:#010x} {} {:#010x}", t.start_symbol, t.start, t.end_symbol, t.end));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, l)) if l.trim() == MANIFEST_MAGIC => {}
            _ => return Err(SpecError::Manifest { line: 1, msg: "missing header".into() }),
        }
        let mut m = Manifest {
            template: Template::VxworksX86,
            seed: 0,
            entry: 0,
            code: (0, 0),
            data: (0, 0),
            heap_top: 0,
            layout: SymbolLayout::VXWORKS_FLAT,
            symtab: None,
            functions: Vec::new(),
            mutated: Vec::new(),
            symbols: Vec::new(),
            drivers: Vec::new(),
            tables: Vec::new(),
        };
        let mut saw_template = false;
        for (i, raw) in lines {
            let err = |msg: &str| SpecError::Manifest { line: i + 1, msg: msg.into() };
            let f: Vec<&str> = raw.split_whitespace().collect();
            let num = |k: usize| f.get(k).and_then(|v| parse_u32(v)).ok_or_else(|| err("bad number"));
            let word = |k: usize| f.get(k).map(|s| String::from(*s)).ok_or_else(|| err("missing field"));
            match f[0] {
                "template" => {
                    m.template = word(1)?.parse().map_err(|_| err("unknown template"))?;
                    saw_template = true;
                }
                "seed" => m.seed = word(1)?.parse().map_err(|_| err("bad seed"))?,
                "entry" => m.entry = num(1)?,
                "code" => m.code = (num(1)?, num(2)?),
                "data" => m.data = (num(1)?, num(2)?),
                "heap_top" => m.heap_top = num(1)?,
                "layout" => {
                    let t = match word(4)?.as_str() {
                        "-" => None,
                        _ => Some(num(4)?),
                    };
                    m.layout = SymbolLayout::new(num(1)?, num(2)?, num(3)?, t).map_err(|_| err("bad layout"))?;
                }
                "symtab" => m.symtab = Some((num(1)?, num(2)?)),
                "function" => m.functions.push(TruthFunction {
                    addr: num(1)?,
                    role: Role::parse(&word(2)?).ok_or_else(|| err("unknown role"))?,
                    name: word(3)?,
                }),
                "mutated" => m.mutated.push(word(1)?),
                "symbol" | "corrupt" => m.symbols.push(TruthSymbol {
                    record: num(1)?,
                    value: num(2)?,
                    name: word(3)?,
                    corrupted: f[0] == "corrupt",
                }),
                "driver" => m.drivers.push(TruthDriver {
                    addr: num(1)?,
                    category: word(2)?.parse().map_err(|_| err("unknown category"))?,
                    anchor: word(3)?,
                    name: word(4)?,
                    slot: match f.get(5) {
                        Some(&"slot") => Some(num(6)?),
                        _ => None,
                    },
                }),
                "table" => m.tables.push(TruthTable {
                    start_symbol: word(1)?,
                    start: num(2)?,
                    end_symbol: word(3)?,
                    end: num(4)?,
                }),
                _ => return Err(err("unknown record")),
            }
        }
        if !saw_template {
            return Err(SpecError::Manifest { line: 1, msg: "no template line".into() });
        }
        Ok(m)
    }
}

/// Hex (`0x`) or decimal.
pub fn parse_u32(s: &str) -> Option<u32> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u32::from_str_radix(h, 16).ok(),
        None => s.parse().ok(),
    }
}

/// Builder output: an ELF executable and its ground truth.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub bytes: Vec<u8>,
    pub manifest: Manifest,
}

// ---------------------------------------------------------------------------
// Program model

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DataRef {
    Str(usize),
    /// Symbol defined in the data segment, by index into `Program::globals`.
    Global(usize),
}

#[derive(Debug, Clone)]
struct Func {
    name: String,
    role: Role,
    refs: Vec<DataRef>,
    calls: Vec<usize>,
    branches: u32,
    /// ARM `blx r3` after the literal loads (table walkers).
    indirect: bool,
}

#[derive(Debug, Clone)]
struct Global {
    name: String,
    kind: GlobalKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum GlobalKind {
    /// 16 zero bytes.
    Variable,
    /// Start of pointer table `i`, and the boundary after it.
    TableStart(usize),
    TableEnd(usize),
    /// Top of the heap in BSS.
    HeapEnd,
}

struct DriverPlan {
    func: usize,
    category: DriverCategory,
    anchor: String,
    table: Option<usize>,
}

struct Program {
    funcs: Vec<Func>,
    strings: Vec<String>,
    globals: Vec<Global>,
    drivers: Vec<DriverPlan>,
    /// Per pointer table: function indices in table order.
    tables: Vec<Vec<usize>>,
    mutated: Vec<String>,
}

const LIBRARY: [(&str, &str); 6] = [
    ("malloc", "malloc: pool exhausted"),
    ("free", "free: double release"),
    ("memcpy", "memcpy: regions overlap"),
    ("bcopy", "bcopy: null buffer"),
    ("memset", "memset: zero length"),
    ("printf", "printf: line too long"),
];

/// Registration anchor and category of each driver slot, cycled through
/// when a spec asks for more drivers than the template lists.
fn driver_slots(t: Template) -> &'static [(&'static str, DriverCategory)] {
    use DriverCategory::*;
    match t.rtos() {
        Rtos::RtThread => &[
            ("rt_components_board_init", Uart),
            ("rt_components_board_init", Gpio),
            ("rt_components_board_init", Pwm),
            ("rt_components_board_init", Hwtimer),
            ("rt_components_init", Ethernet),
            ("rt_components_board_init", Rtc),
            ("rt_components_board_init", Watchdog),
            ("rt_components_init", Storage),
            ("rt_components_board_init", I2c),
            ("rt_components_board_init", Spi),
            ("rt_components_init", Sensor),
            ("rt_components_init", Adc),
            ("rt_components_init", Other),
        ],
        _ => &[
            ("hardwareInterfaceBusInit", Ethernet),
            ("hardwareInterfaceBusInit", Uart),
            ("usrAtaConfig", Storage),
            ("hardwareInterfaceBusInit", Gpio),
            ("usrIosCoreInit", Adc),
            ("usrIosCoreInit", I2c),
            ("hardwareInterfaceBusInit", Pwm),
            ("hardwareInterfaceBusInit", Watchdog),
            ("usrIosCoreInit", Spi),
            ("hardwareInterfaceBusInit", Hwtimer),
            ("usrIosCoreInit", Sensor),
            ("hardwareInterfaceBusInit", Rtc),
            ("usrIosCoreInit", Other),
        ],
    }
}

/// Strings a driver of `cat` prints; every one classifies as `cat` under
/// the seed keyword list.
pub fn category_phrases(cat: DriverCategory) -> &'static [&'static str] {
    use DriverCategory::*;
    match cat {
        Ethernet => &[
            "inet on ethernet",
            "socket is not connected",
            "fei0 link down",
            "lnc0 no carrier",
            "sm0 shared memory anchor",
        ],
        Uart => &["uart fifo overrun", "serial baud rate set", "tty device open"],
        Storage => &["ata0 identify failed", "disk not ready", "sector read error", "flash erase failed"],
        Gpio => &["gpio pin mux config", "gpio irq edge select"],
        I2c => &["i2c bus timeout", "iic arbitration lost"],
        Spi => &["spi transfer error", "spi chip select busy"],
        Adc => &["adc conversion timeout", "analog channel overrange"],
        Pwm => &["pwm period invalid", "duty cycle out of range"],
        Rtc => &["rtc time invalid", "real-time clock stopped"],
        Watchdog => &["watchdog feed missed", "wdt reset pending"],
        Hwtimer => &["hwtimer start failed", "timer overflow irq"],
        Sensor => &["sensor read error", "temperature out of range", "accelerometer id mismatch"],
        Other => &[],
    }
}

fn driver_stem(rtos: Rtos, cat: DriverCategory, k: usize) -> String {
    use DriverCategory::*;
    if rtos == Rtos::RtThread {
        return format!("rt_hw_{}_init{k}", cat.name().to_ascii_lowercase());
    }
    let stem = match cat {
        Ethernet => ["feiEndLoad", "lncEndLoad", "smEndLoad"][k % 3],
        Uart => "ns16550SioInit",
        Storage => "ataDrv",
        Gpio => "gpioDevCreate",
        I2c => "i2cBusInit",
        Spi => "spiDevInit",
        Adc => "adcDevInit",
        Pwm => "pwmDevInit",
        Rtc => "rtcDevInit",
        Watchdog => "wdtDevInit",
        Hwtimer => "auxClkInit",
        Sensor => "sensorDevInit",
        Other => "miscDevInit",
    };
    format!("{stem}{k}")
}

fn global_names(rtos: Rtos) -> &'static [&'static str] {
    match rtos {
        Rtos::RtThread => &["rt_tick", "rt_current_thread", "rt_object_container", "rt_thread_ready_priority_group"],
        _ => &["sysBootLine", "sysExcMsg", "vxTicks", "sysPhysMemDesc", "bootParams"],
    }
}

fn filler_name(rng: &mut ChaCha8Rng, i: usize) -> String {
    const A: [&str; 8] = ["task", "msg", "sem", "buf", "list", "evt", "cfg", "obj"];
    const B: [&str; 8] = ["Create", "Delete", "Show", "Poll", "Send", "Recv", "Lock", "Walk"];
    format!("{}{}{i}", A[rng.gen_range(0..A.len())], B[rng.gen_range(0..B.len())])
}

impl Program {
    fn string(&mut self, s: String) -> DataRef {
        self.strings.push(s);
        DataRef::Str(self.strings.len() - 1)
    }

    fn push(&mut self, f: Func) -> usize {
        self.funcs.push(f);
        self.funcs.len() - 1
    }
}

/// Builds the function list; identical for a reference and its stripped
/// counterpart apart from the resized nodes.
fn program(spec: &SyntheticSpec) -> Program {
    let t = spec.template;
    let rtos = t.rtos();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut p = Program {
        funcs: Vec::new(),
        strings: Vec::new(),
        globals: Vec::new(),
        drivers: Vec::new(),
        tables: Vec::new(),
        mutated: Vec::new(),
    };
    let nodes = defs(rtos);
    let node_ix: BTreeMap<&str, usize> = nodes.iter().enumerate().map(|(i, d)| (d.name, i)).collect();

    // Boot chain first so the entry is the first function.
    for (i, d) in nodes.iter().enumerate() {
        let s = p.string(node_string(rtos, i));
        let role = if d.anchor { Role::Anchor } else { Role::Boot };
        p.push(Func {
            name: d.name.into(),
            role,
            refs: vec![s],
            calls: Vec::new(),
            branches: d.branches,
            indirect: d.table.is_some(),
        });
    }
    let lib0 = p.funcs.len();
    for (name, msg) in LIBRARY {
        let s = p.string(msg.into());
        p.push(Func {
            name: name.into(),
            role: Role::Library,
            refs: vec![s],
            calls: Vec::new(),
            branches: 1,
            indirect: false,
        });
    }
    let lib = |rng: &mut ChaCha8Rng| lib0 + rng.gen_range(0..LIBRARY.len());
    for (i, d) in nodes.iter().enumerate() {
        let mut calls: Vec<usize> = d.callees.iter().map(|c| node_ix[c]).collect();
        calls.push(lib(&mut rng));
        p.funcs[i].calls = calls;
    }

    // Pointer tables and their boundary symbols (RT-Thread).
    let mut table_of: BTreeMap<&str, usize> = BTreeMap::new();
    for d in nodes {
        if let Some((start, end)) = d.table {
            let ti = p.tables.len();
            p.tables.push(Vec::new());
            table_of.insert(d.name, ti);
            let si = p.globals.iter().position(|g| g.name == start).unwrap_or_else(|| {
                p.globals.push(Global { name: start.into(), kind: GlobalKind::TableStart(ti) });
                p.globals.len() - 1
            });
            p.globals.push(Global { name: end.into(), kind: GlobalKind::TableEnd(ti) });
            let ei = p.globals.len() - 1;
            let walker = node_ix[d.name];
            p.funcs[walker].refs.extend([DataRef::Global(si), DataRef::Global(ei)]);
        }
    }

    // Drivers: init -> helper -> helper, phrases in the first two.
    let slots = driver_slots(t);
    for k in 0..spec.drivers {
        let (anchor_name, cat) = slots[k % slots.len()];
        let phrases = category_phrases(cat);
        let mut refs_init = vec![p.string(format!("unit {k} attach"))];
        let mut refs_helper = vec![p.string(format!("unit {k} step 1"))];
        if !phrases.is_empty() {
            let a = rng.gen_range(0..phrases.len());
            refs_init.push(p.string(phrases[a].into()));
            refs_helper.push(p.string(phrases[(a + 1) % phrases.len()].into()));
        }
        let leaf_ref = p.string(format!("unit {k} step 2"));
        let name = driver_stem(rtos, cat, k);
        let leaf = p.push(Func {
            name: format!("{name}_hw"),
            role: Role::Helper,
            refs: vec![leaf_ref],
            calls: vec![lib(&mut rng)],
            branches: rng.gen_range(0..3),
            indirect: false,
        });
        let helper = p.push(Func {
            name: format!("{name}_setup"),
            role: Role::Helper,
            refs: refs_helper,
            calls: vec![leaf],
            branches: rng.gen_range(1..4),
            indirect: false,
        });
        let init = p.push(Func {
            name,
            role: Role::Driver,
            refs: refs_init,
            calls: vec![helper, lib(&mut rng)],
            branches: rng.gen_range(1..4),
            indirect: false,
        });
        let table = table_of.get(anchor_name).copied();
        match table {
            Some(ti) => p.tables[ti].push(init),
            None => p.funcs[node_ix[anchor_name]].calls.push(init),
        }
        p.drivers.push(DriverPlan { func: init, category: cat, anchor: anchor_name.into(), table });
    }

    // Fillers; each calls library code or an earlier filler.
    let fill0 = p.funcs.len();
    for i in 0..spec.fillers {
        let name = filler_name(&mut rng, i);
        let s = p.string(format!("item {i} ready"));
        let mut calls = Vec::new();
        for _ in 0..rng.gen_range(0..3) {
            if i > 0 && rng.gen_bool(0.5) {
                calls.push(fill0 + rng.gen_range(0..i));
            } else {
                calls.push(lib(&mut rng));
            }
        }
        calls.dedup();
        let branches = rng.gen_range(0..5);
        p.push(Func { name, role: Role::Filler, refs: vec![s], calls, branches, indirect: false });
    }
    let app = match rtos {
        Rtos::RtThread => node_ix["main"],
        _ => node_ix["usrAppInit"],
    };
    for i in 0..spec.fillers.min(APP_CALLS) {
        p.funcs[app].calls.push(fill0 + i);
    }

    for g in global_names(rtos) {
        p.globals.push(Global { name: String::from(*g), kind: GlobalKind::Variable });
    }
    if rtos == Rtos::RtThread {
        p.globals.push(Global { name: "__heap_end".into(), kind: GlobalKind::HeapEnd });
    }

    // Resizing uses its own stream so the unmutated program is shared.
    let mut mrng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6d75_7461_7465);
    for name in &spec.mutation.resize {
        let i = node_ix[name.as_str()];
        let f = &mut p.funcs[i];
        f.branches = resized_branches(f.branches);
        let mut unused: Vec<usize> = (lib0..lib0 + LIBRARY.len()).filter(|c| !f.calls.contains(c)).collect();
        unused.shuffle(&mut mrng);
        f.calls.extend(unused.into_iter().take(MUTATION_EXTRA_CALLS as usize));
        p.mutated.push(name.clone());
    }
    p
}

// ---------------------------------------------------------------------------
// Code generation

const X86_PAD: u8 = 0xCC;
const MIN_FUNC_LEN: u32 = 16;

fn func_size(arch: Arch, f: &Func, pad: u32) -> u32 {
    let n_refs = f.refs.len() as u32;
    let n_calls = f.calls.len() as u32;
    let raw = match arch {
        Arch::X86 => 3 + 5 * n_refs + 5 * n_calls + 4 * f.branches + 2,
        Arch::Arm => 4 + 4 * n_refs + 4 * n_calls + 8 * f.branches + if f.indirect { 4 } else { 0 } + 4 + 4 * n_refs,
    };
    crate::align_up(raw.max(MIN_FUNC_LEN) as u64, 4) as u32 + pad
}

fn emit_func(
    arch: Arch,
    e: Endianness,
    f: &Func,
    at: u32,
    size: u32,
    addr_of: &dyn Fn(DataRef) -> u32,
    entries: &[u32],
) -> Vec<u8> {
    let mut out = Vec::with_capacity(size as usize);
    match arch {
        Arch::X86 => {
            out.extend_from_slice(&[0x55, 0x8B, 0xEC]);
            for r in &f.refs {
                // Strings are pushed as arguments, other data loaded.
                let op = if matches!(r, DataRef::Str(_)) { 0x68 } else { 0xB8 };
                out.push(op);
                out.extend_from_slice(&addr_of(*r).to_le_bytes());
            }
            for &c in &f.calls {
                let pc = at + out.len() as u32;
                out.extend_from_slice(&x86::encode_call(pc, entries[c]));
            }
            for _ in 0..f.branches {
                out.extend_from_slice(&[0x74, 0x02, 0x90, 0x90]);
            }
            out.extend_from_slice(&[0x5D, 0xC3]);
            out.resize(size as usize, X86_PAD);
        }
        Arch::Arm => {
            let n_refs = f.refs.len() as u32;
            let n_calls = f.calls.len() as u32;
            let pool = at + 4 + 4 * n_refs + 4 * n_calls + 8 * f.branches + if f.indirect { 4 } else { 0 } + 4;
            let mut words = vec![arm::PUSH_FP_LR];
            for k in 0..n_refs {
                let pc = at + 4 * words.len() as u32;
                let rt = (k % 4) as u8;
                words.push(arm::ldr_literal_word(rt, pc, pool + 4 * k).expect("literal pool is near"));
            }
            for &c in &f.calls {
                let pc = at + 4 * words.len() as u32;
                words.push(
                    arm::branch_word(pc, entries[c], COND_AL, true).expect("synthetic images fit in branch range"),
                );
            }
            for _ in 0..f.branches {
                // beq over one nop
                words.push(0x0A00_0000);
                words.push(arm::NOP);
            }
            if f.indirect {
                words.push(0xE12F_FF33);
            }
            words.push(arm::POP_FP_PC);
            for r in &f.refs {
                words.push(addr_of(*r));
            }
            for w in words {
                out.extend_from_slice(&e.u32_bytes(w));
            }
            while out.len() < size as usize {
                out.extend_from_slice(&e.u32_bytes(arm::NOP));
            }
        }
    }
    out
}

/// Offsets of prologue patterns that are not function entries.
fn stray_prologues(arch: Arch, e: Endianness, code: &[u8], base: u32, entries: &BTreeSet<u32>) -> Vec<u32> {
    let step = if arch == Arch::Arm { 4 } else { 1 };
    let mut out = Vec::new();
    let mut off = 0;
    while off + 3 <= code.len() {
        let a = base + off as u32;
        if crate::isa::match_prologue(arch, e, &code[off..]) && !entries.contains(&a) {
            out.push(a);
        }
        off += step;
    }
    out
}

const HEAP_SIZE: u32 = 0x1_0000;
const STACK_SIZE: u32 = 0x2000;
const PAGE: u64 = 0x1000;

/// Builds the image described by `spec`.
pub fn build_synthetic(spec: &SyntheticSpec) -> Result<Synthetic, SpecError> {
    spec.validate()?;
    let t = spec.template;
    let (arch, e) = (t.arch(), t.endianness());
    let prog = program(spec);

    // Code order: boot chain, library, drivers, then fillers (shuffled on
    // request).
    let n = prog.funcs.len();
    let mut order: Vec<usize> = (0..n).collect();
    if spec.mutation.shuffle {
        let first_filler = prog.funcs.iter().position(|f| f.role == Role::Filler).unwrap_or(n);
        let mut srng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7368_7566);
        order[first_filler..].shuffle(&mut srng);
    }

    let mut pads = vec![0u32; n];
    let base = t.base();
    for attempt in 0..64 {
        let mut entries = vec![0u32; n];
        let mut cursor = base;
        for &i in &order {
            entries[i] = cursor;
            cursor += func_size(arch, &prog.funcs[i], pads[i]);
        }
        let code_end = cursor;
        let data_base = crate::align_up(code_end as u64, PAGE) as u32;
        let data = lay_out_data(spec, &prog, &entries, data_base);
        let addr_of = |r: DataRef| match r {
            DataRef::Str(k) => data.string_addrs[k],
            DataRef::Global(k) => data.global_addrs[k],
        };
        let mut code = Vec::with_capacity((code_end - base) as usize);
        for &i in &order {
            let f = &prog.funcs[i];
            code.extend(emit_func(arch, e, f, entries[i], func_size(arch, f, pads[i]), &addr_of, &entries));
        }
        let entry_set: BTreeSet<u32> = entries.iter().copied().collect();
        let stray = stray_prologues(arch, e, &code, base, &entry_set);
        if let Some(&a) = stray.first() {
            // Move the containing function, or what follows it, so its
            // call displacements change, then retry.
            let pos = order.iter().rposition(|&i| entries[i] <= a).expect("stray lies in a function");
            let bump = if attempt % 2 == 0 { pos } else { pos.saturating_sub(1) };
            pads[order[bump]] += 4;
            continue;
        }
        return Ok(finish(spec, &prog, &entries, code, data));
    }
    Err(SpecError::Invalid("could not lay out code without stray prologues".into()))
}

struct DataLayout {
    base: u32,
    bytes: Vec<u8>,
    string_addrs: Vec<u32>,
    global_addrs: Vec<u32>,
    symtab: Option<(u32, u32)>,
    symbols: Vec<TruthSymbol>,
    table_slots: Vec<Vec<u32>>,
    bss: (u32, u32),
}

fn lay_out_data(spec: &SyntheticSpec, prog: &Program, entries: &[u32], base: u32) -> DataLayout {
    let e = spec.template.endianness();
    let mut bytes = vec![0u8; 4]; // a zero word for empty-name corruption
    let at = |b: &Vec<u8>| base + b.len() as u32;
    let align4 = |b: &mut Vec<u8>| b.resize(crate::align_up(b.len() as u64, 4) as usize, 0);

    let mut string_addrs = Vec::with_capacity(prog.strings.len());
    for s in &prog.strings {
        string_addrs.push(at(&bytes));
        bytes.extend_from_slice(s.as_bytes());
        bytes.push(0);
        align4(&mut bytes);
    }

    // Globals: plain variables take 16 bytes; each pointer table is
    // written where its start symbol lands.
    let mut global_addrs = vec![0u32; prog.globals.len()];
    let mut table_slots = vec![Vec::new(); prog.tables.len()];
    for (gi, g) in prog.globals.iter().enumerate() {
        match &g.kind {
            GlobalKind::Variable => {
                global_addrs[gi] = at(&bytes);
                bytes.extend_from_slice(&[0; 16]);
            }
            GlobalKind::TableStart(ti) => {
                global_addrs[gi] = at(&bytes);
                for &f in &prog.tables[*ti] {
                    table_slots[*ti].push(at(&bytes));
                    bytes.extend_from_slice(&e.u32_bytes(entries[f]));
                }
            }
            GlobalKind::TableEnd(ti) => {
                // The end of one table is the start of the next.
                // A table without its own start symbol begins where the
                // previous one ends.
                global_addrs[gi] = at(&bytes);
                let shares_start = !prog.globals.iter().any(|h| h.kind == GlobalKind::TableStart(ti + 1));
                if let (true, Some(next_tab)) = (shares_start, prog.tables.get(ti + 1)) {
                    for &f in next_tab {
                        table_slots[ti + 1].push(at(&bytes));
                        bytes.extend_from_slice(&e.u32_bytes(entries[f]));
                    }
                }
            }
            GlobalKind::HeapEnd => {}
        }
    }
    align4(&mut bytes);

    // The symbol table follows the name strings.
    let mut symbols = Vec::new();
    let mut symtab = None;
    // BSS position depends only on the data size, which is known once the
    // table is sized; compute the symbol list first.
    let mut named: Vec<(String, u32)> = Vec::new();
    if spec.symbol_table {
        for (i, f) in prog.funcs.iter().enumerate() {
            named.push((f.name.clone(), entries[i]));
        }
        for (gi, g) in prog.globals.iter().enumerate() {
            if g.kind != GlobalKind::HeapEnd {
                named.push((g.name.clone(), global_addrs[gi]));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7379_6d73);
        named.shuffle(&mut rng);
    }
    let has_heap_sym = prog.globals.iter().any(|g| g.kind == GlobalKind::HeapEnd);
    let n_records = named.len() + if spec.symbol_table && has_heap_sym { 1 } else { 0 };
    let mut name_addrs = Vec::with_capacity(n_records);
    let mut heap_name_addr = 0;
    for (name, _) in &named {
        name_addrs.push(at(&bytes));
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(0);
    }
    if spec.symbol_table && has_heap_sym {
        heap_name_addr = at(&bytes);
        bytes.extend_from_slice(b"__heap_end\0");
    }
    align4(&mut bytes);
    let table_start = at(&bytes);
    let stride = spec.layout.stride;
    let data_end = table_start + stride * n_records as u32 + 16;
    let bss_start = crate::align_up(data_end as u64, PAGE) as u32;
    let heap_end = bss_start + HEAP_SIZE;
    if let Some(gi) = prog.globals.iter().position(|g| g.kind == GlobalKind::HeapEnd) {
        global_addrs[gi] = heap_end;
    }
    if spec.symbol_table && has_heap_sym {
        named.push(("__heap_end".into(), heap_end));
        name_addrs.push(heap_name_addr);
    }

    if n_records > 0 {
        let corrupt = corrupted_records(n_records, spec.corruption, spec.seed);
        for (k, ((name, value), name_ptr)) in named.iter().zip(&name_addrs).enumerate() {
            let rec = at(&bytes);
            let mut r = vec![0u8; stride as usize];
            let is_bad = corrupt.contains(&k);
            let ptr = if is_bad {
                match k % 3 {
                    0 => 0,
                    1 => 0xFFFF_FFF0,
                    _ => base, // points at the zero word: empty name
                }
            } else {
                *name_ptr
            };
            let l = &spec.layout;
            r[l.name_ptr_offset as usize..][..4].copy_from_slice(&e.u32_bytes(ptr));
            r[l.value_offset as usize..][..4].copy_from_slice(&e.u32_bytes(*value));
            if let Some(to) = l.type_offset {
                let code = entries.contains(value);
                r[to as usize] = if code { 0x05 } else { 0x09 };
            }
            bytes.extend_from_slice(&r);
            symbols.push(TruthSymbol { record: rec, value: *value, name: name.clone(), corrupted: is_bad });
        }
        symtab = Some((table_start, at(&bytes)));
    }
    bytes.extend_from_slice(&[0; 16]);
    DataLayout {
        base,
        bytes,
        string_addrs,
        global_addrs,
        symtab,
        symbols,
        table_slots,
        bss: (bss_start, HEAP_SIZE + STACK_SIZE),
    }
}

/// Indices of corrupted records: exactly ⌈rate·n⌉ of them, in clusters
/// of up to eight, never inside the first 64 so a clean run always seeds
/// the table scan.
fn corrupted_records(n: usize, rate: f64, seed: u64) -> BTreeSet<usize> {
    let want = libm_ceil(rate * n as f64) as usize;
    let mut out = BTreeSet::new();
    if want == 0 {
        return out;
    }
    let lo = 64.min(n);
    let room = n - lo;
    let want = want.min(room);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_7272);
    let mut guard = 0;
    while out.len() < want && guard < 100_000 {
        guard += 1;
        let len = rng.gen_range(1..=8).min(want - out.len());
        let start = lo + rng.gen_range(0..room);
        for k in start..(start + len).min(n) {
            if out.len() < want {
                out.insert(k);
            }
        }
    }
    // Dense fallback for tiny tables.
    let mut k = lo;
    while out.len() < want && k < n {
        out.insert(k);
        k += 1;
    }
    out
}

/// `f64::ceil` is not in `core`.
fn libm_ceil(x: f64) -> f64 {
    let t = x as i64 as f64;
    if t < x {
        t + 1.0
    } else {
        t
    }
}

fn finish(spec: &SyntheticSpec, prog: &Program, entries: &[u32], code: Vec<u8>, data: DataLayout) -> Synthetic {
    let t = spec.template;
    let base = t.base();
    let code_end = base + code.len() as u32;
    let data_end = data.base + data.bytes.len() as u32;
    let machine = match t.arch() {
        Arch::X86 => elf::EM_386,
        Arch::Arm => elf::EM_ARM,
    };
    let segments = [
        write::LoadSegment { vaddr: base, data: code, memsz: 0, flags: elf::PF_R | elf::PF_X },
        write::LoadSegment { vaddr: data.base, data: data.bytes, memsz: 0, flags: elf::PF_R | elf::PF_W },
        write::LoadSegment { vaddr: data.bss.0, data: Vec::new(), memsz: data.bss.1, flags: elf::PF_R | elf::PF_W },
    ];
    let bytes = write::executable(machine, t.endianness(), base, &segments);

    let functions = prog
        .funcs
        .iter()
        .enumerate()
        .map(|(i, f)| TruthFunction { addr: entries[i], role: f.role, name: f.name.clone() })
        .collect();
    let drivers = prog
        .drivers
        .iter()
        .map(|d| TruthDriver {
            addr: entries[d.func],
            category: d.category,
            anchor: d.anchor.clone(),
            name: prog.funcs[d.func].name.clone(),
            slot: d.table.map(|ti| {
                let pos = prog.tables[ti].iter().position(|&f| f == d.func).expect("driver is in its table");
                data.table_slots[ti][pos]
            }),
        })
        .collect();
    let mut tables = Vec::new();
    for d in defs(t.rtos()) {
        if let Some((s, e)) = d.table {
            let addr =
                |n: &str| prog.globals.iter().position(|g| g.name == n).map(|i| data.global_addrs[i]).unwrap_or(0);
            tables.push(TruthTable { start_symbol: s.into(), start: addr(s), end_symbol: e.into(), end: addr(e) });
        }
    }
    let manifest = Manifest {
        template: t,
        seed: spec.seed,
        entry: base,
        code: (base, code_end),
        data: (data.base, data_end),
        heap_top: data.bss.0 + data.bss.1,
        layout: spec.layout,
        symtab: data.symtab,
        functions,
        mutated: prog.mutated.clone(),
        symbols: data.symbols,
        drivers,
        tables,
    };
    Synthetic { bytes, manifest }
}

/// A reference image (named, unmutated) and the stripped image built from
/// `stripped`.
pub fn build_pair(stripped: &SyntheticSpec) -> Result<(Synthetic, Synthetic), SpecError> {
    Ok((build_synthetic(&stripped.reference())?, build_synthetic(stripped)?))
}

// ---------------------------------------------------------------------------
// Patch objects

/// Replacement function names per category, as defined by
/// [`build_patch_object`].
pub fn patch_function(cat: DriverCategory) -> String {
    format!("rtport_{}_init", cat.name().to_ascii_lowercase())
}

/// Library routines the synthetic patch calls.
pub const PATCH_EXTERNALS: [&str; 3] = ["malloc", "bcopy", "memcpy"];

/// A relocatable patch defining one replacement per category in `cats`
/// plus a shared helper, with `.rodata` messages and a `.data` table of
/// function pointers. x86 calls externals through `R_386_PC32`; ARM loads
/// them from literals (`R_ARM_ABS32`) so the patch may sit anywhere, and
/// calls the shared helper with `R_ARM_CALL`.
pub fn build_patch_object(arch: Arch, e: Endianness, cats: &[DriverCategory]) -> Vec<u8> {
    use write::{ObjReloc, ObjSection, ObjSymbol};
    let mut text = Vec::new();
    let mut rodata = Vec::new();
    let mut relocs = Vec::new();
    let mut symbols = vec![
        ObjSymbol { name: ".text".into(), section: Some(0), value: 0, global: false, sym_type: elf::STT_SECTION },
        ObjSymbol { name: ".rodata".into(), section: Some(1), value: 0, global: false, sym_type: elf::STT_SECTION },
    ];
    let ext0 = symbols.len();
    for x in PATCH_EXTERNALS {
        symbols.push(ObjSymbol { name: x.into(), section: None, value: 0, global: true, sym_type: elf::STT_NOTYPE });
    }
    let (abs, pc) = match arch {
        Arch::X86 => (elf::R_386_32, elf::R_386_PC32),
        Arch::Arm => (elf::R_ARM_ABS32, elf::R_ARM_CALL),
    };
    let word = |v: u32| e.u32_bytes(v);

    // Shared helper first: plain prologue/epilogue, long enough to be a
    // redirect victim itself.
    let helper_sym = symbols.len();
    symbols.push(ObjSymbol {
        name: "rtport_common".into(),
        section: Some(0),
        value: 0,
        global: true,
        sym_type: elf::STT_FUNC,
    });
    match arch {
        Arch::X86 => text.extend_from_slice(&[
            0x55, 0x8B, 0xEC, 0x90, 0x90, 0x90, 0x90, 0x90, 0x90, 0x90, 0x90, 0x90, 0x90, 0x90, 0x5D, 0xC3,
        ]),
        Arch::Arm => {
            for w in [arm::PUSH_FP_LR, arm::NOP, arm::NOP, arm::POP_FP_PC] {
                text.extend_from_slice(&word(w));
            }
        }
    }

    let mut funcs = Vec::new();
    for (k, cat) in cats.iter().enumerate() {
        let msg_off = rodata.len() as u32;
        rodata.extend_from_slice(format!("rtport {} ready", cat.name().to_ascii_lowercase()).as_bytes());
        rodata.push(0);
        while rodata.len() % 4 != 0 {
            rodata.push(0);
        }
        let start = text.len() as u32;
        let sym = symbols.len();
        symbols.push(ObjSymbol {
            name: patch_function(*cat),
            section: Some(0),
            value: start,
            global: true,
            sym_type: elf::STT_FUNC,
        });
        funcs.push(sym);
        let ext = ext0 + k % PATCH_EXTERNALS.len();
        match arch {
            Arch::X86 => {
                text.extend_from_slice(&[0x55, 0x8B, 0xEC]);
                // push offset msg
                text.push(0x68);
                relocs.push(ObjReloc { section: 0, offset: text.len() as u32, symbol: 1, r_type: abs });
                text.extend_from_slice(&msg_off.to_le_bytes());
                for target in [ext, helper_sym] {
                    text.push(0xE8);
                    relocs.push(ObjReloc { section: 0, offset: text.len() as u32, symbol: target, r_type: pc });
                    text.extend_from_slice(&(-4i32).to_le_bytes());
                }
                text.extend_from_slice(&[0x5D, 0xC3]);
            }
            Arch::Arm => {
                // push; ldr r0,=msg; ldr r3,=ext; blx r3; bl common; pop; pool
                let at = |text: &Vec<u8>| text.len() as u32;
                text.extend_from_slice(&word(arm::PUSH_FP_LR));
                let pool = start + 24;
                let pc0 = at(&text);
                text.extend_from_slice(&word(arm::ldr_literal_word(0, pc0, pool).unwrap()));
                let pc1 = at(&text);
                text.extend_from_slice(&word(arm::ldr_literal_word(3, pc1, pool + 4).unwrap()));
                text.extend_from_slice(&word(0xE12F_FF33));
                relocs.push(ObjReloc { section: 0, offset: at(&text), symbol: helper_sym, r_type: pc });
                text.extend_from_slice(&word(0xEBFF_FFFE));
                text.extend_from_slice(&word(arm::POP_FP_PC));
                relocs.push(ObjReloc { section: 0, offset: at(&text), symbol: 1, r_type: abs });
                text.extend_from_slice(&word(msg_off));
                relocs.push(ObjReloc { section: 0, offset: at(&text), symbol: ext, r_type: abs });
                text.extend_from_slice(&word(0));
            }
        }
        while text.len() % 4 != 0 {
            text.push(0x90);
        }
    }
    // .data: pointer to each replacement.
    let mut data = Vec::new();
    for &f in &funcs {
        relocs.push(ObjReloc { section: 2, offset: data.len() as u32, symbol: f, r_type: abs });
        data.extend_from_slice(&word(0));
    }
    let sections = [
        ObjSection {
            name: ".text".into(),
            data: text,
            size: 0,
            align: 4,
            flags: elf::SHF_ALLOC | elf::SHF_EXECINSTR,
            nobits: false,
        },
        ObjSection { name: ".rodata".into(), data: rodata, size: 0, align: 4, flags: elf::SHF_ALLOC, nobits: false },
        ObjSection {
            name: ".data".into(),
            data,
            size: 0,
            align: 4,
            flags: elf::SHF_ALLOC | elf::SHF_WRITE,
            nobits: false,
        },
    ];
    let machine = match arch {
        Arch::X86 => elf::EM_386,
        Arch::Arm => elf::EM_ARM,
    };
    write::relocatable(machine, e, &sections, &symbols, &relocs)
}

/// Categories the synthetic pipeline replaces: the data-transport
/// drivers an emulator can stand in for.
pub const PATCHED_CATEGORIES: [DriverCategory; 3] =
    [DriverCategory::Uart, DriverCategory::Ethernet, DriverCategory::Storage];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcgraph;
    use crate::image::FirmwareImage;

    #[test]
    fn shipped_kbs_validate() {
        for kb in [vxworks_kb(), rtthread_kb()] {
            kb.validate().unwrap();
            assert_eq!(kb.anchors().count(), 5);
        }
    }

    #[test]
    fn seed_db_classifies_every_phrase() {
        let db = seed_keyword_db();
        for cat in DriverCategory::ALL {
            for p in category_phrases(cat) {
                assert_eq!(db.classify([*p]).0, cat, "{p}");
            }
        }
        for (_, msg) in LIBRARY {
            assert_eq!(db.classify([msg]).0, DriverCategory::Other, "{msg}");
        }
        for i in 0..30 {
            assert_eq!(db.classify([node_string(Rtos::Vxworks, i).as_str()]).0, DriverCategory::Other);
            assert_eq!(
                db.classify([format!("unit {i} attach").as_str(), format!("item {i} ready").as_str()]).0,
                DriverCategory::Other
            );
        }
    }

    #[test]
    fn deterministic() {
        let s = SyntheticSpec { fillers: 50, ..SyntheticSpec::new(Template::VxworksX86, 7) };
        let a = build_synthetic(&s).unwrap();
        let b = build_synthetic(&s).unwrap();
        assert_eq!(a.bytes, b.bytes);
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(Manifest::parse(&a.manifest.to_text()).unwrap(), a.manifest);
    }

    #[test]
    fn corruption_count_is_exact() {
        let s = SyntheticSpec { fillers: 300, corruption: 0.15, ..SyntheticSpec::new(Template::VxworksArm, 3) };
        let m = build_synthetic(&s).unwrap().manifest;
        let n = m.symbols.len();
        assert_eq!(m.corrupted(), libm_ceil(0.15 * n as f64) as usize);
    }

    #[test]
    fn recovered_functions_match_truth() {
        for t in Template::ALL {
            let s = SyntheticSpec { fillers: 40, ..SyntheticSpec::new(t, 11) };
            let syn = build_synthetic(&s).unwrap();
            let img = FirmwareImage::load_elf(&syn.bytes).unwrap();
            let g = funcgraph::analyze(&img, &[]);
            let truth: BTreeSet<u32> = syn.manifest.functions.iter().map(|f| f.addr).collect();
            let got: BTreeSet<u32> = g.functions.keys().copied().collect();
            assert_eq!(got, truth, "{t}");
            let kb = t.kb();
            for (i, n) in kb.nodes.iter().enumerate() {
                let f = g.get(syn.manifest.function(&n.name).unwrap()).unwrap();
                assert!(f.string_refs.contains(&node_string(t.rtos(), i)), "{t} {}", n.name);
            }
        }
    }

    #[test]
    fn parse_u32_forms() {
        assert_eq!(parse_u32("0x10"), Some(16));
        assert_eq!(parse_u32("10"), Some(10));
        assert_eq!(parse_u32("zz"), None);
    }
}
