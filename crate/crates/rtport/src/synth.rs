//! `gen-synthetic`: spec file in, firmware + ground truth + patch +
//! ready-to-run pipeline config out.
//!
//! ```toml
//! template = "vxworks-arm"   # vxworks-x86 | vxworks-arm | vxworks-armeb | rtthread-arm
//! fillers = 200
//! drivers = 13
//! corruption = 0.0           # fraction of symbol records destroyed
//! layout = "vxworks-flat"    # or "20,0,4"
//! symbol_table = true
//! stripped = false           # true: stripped firmware plus a named reference.elf
//! ```

use serde::Deserialize;

use rtport_core::anchor::Rtos;
use rtport_core::kbdata::{self, SyntheticSpec, Template, PATCHED_CATEGORIES};

use crate::error::{usage, CliResult};
use crate::stages::parse_layout;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpecFile {
    pub template: String,
    pub fillers: Option<usize>,
    pub drivers: Option<usize>,
    pub corruption: Option<f64>,
    pub layout: Option<String>,
    pub symbol_table: Option<bool>,
    #[serde(default)]
    pub stripped: bool,
}

impl SynthSpecFile {
    pub fn for_template(t: Template) -> Self {
        SynthSpecFile {
            template: t.name().into(),
            fillers: None,
            drivers: None,
            corruption: None,
            layout: None,
            symbol_table: None,
            stripped: false,
        }
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| usage(format!("synthetic spec: {e}")))
    }

    pub fn to_spec(&self, seed: u64) -> CliResult<SyntheticSpec> {
        let t: Template = self.template.parse().map_err(|e: kbdata::SpecError| usage(e.to_string()))?;
        let mut s = if self.stripped { SyntheticSpec::stripped(t, seed) } else { SyntheticSpec::new(t, seed) };
        if let Some(v) = self.fillers {
            s.fillers = v;
        }
        if let Some(v) = self.drivers {
            s.drivers = v;
        }
        if let Some(v) = self.corruption {
            s.corruption = v;
        }
        if let Some(l) = &self.layout {
            s.layout = parse_layout(l).map_err(|e| usage(format!("synthetic spec: layout: {e}")))?;
        }
        if let Some(v) = self.symbol_table {
            s.symbol_table = v && !self.stripped;
        }
        s.validate().map_err(|e| usage(e.to_string()))?;
        Ok(s)
    }
}

fn rtos_name(r: Rtos) -> &'static str {
    match r {
        Rtos::Vxworks => "vxworks",
        Rtos::RtThread => "rt-thread",
        Rtos::Nuttx => "nuttx",
        Rtos::Zephyr => "zephyr",
    }
}

/// Output files, in write order.
pub fn generate(file: &SynthSpecFile, seed: u64) -> CliResult<Vec<(&'static str, Vec<u8>)>> {
    let spec = file.to_spec(seed)?;
    let t = spec.template;
    let mut out = Vec::new();
    let built = if file.stripped {
        let (r, s) = kbdata::build_pair(&spec).map_err(|e| usage(e.to_string()))?;
        out.push(("reference.elf", r.bytes));
        out.push(("reference-manifest.txt", r.manifest.to_text().into_bytes()));
        s
    } else {
        kbdata::build_synthetic(&spec).map_err(|e| usage(e.to_string()))?
    };
    let patch = kbdata::build_patch_object(t.arch(), t.endianness(), &PATCHED_CATEGORIES);
    let mut cfg = String::from("firmware = \"firmware.elf\"\npatch = \"patch.o\"\n");
    if file.stripped {
        cfg += "reference = \"reference.elf\"\n";
    }
    cfg += &format!("rtos = \"{}\"\n", rtos_name(t.rtos()));
    cfg += &format!("heap_top = \"{:#010x}\"\n", built.manifest.heap_top);
    cfg += "out_dir = \"out\"\n";
    out.push(("firmware.elf", built.bytes));
    out.push(("manifest.txt", built.manifest.to_text().into_bytes()));
    out.push(("patch.o", patch));
    out.push(("pipeline.toml", cfg.into_bytes()));
    Ok(out)
}
