//! Knowledge bases and keyword databases on disk. Both fall back to the
//! copies compiled into the core crate.

use std::path::Path;

use rtport_core::anchor::{KnowledgeBase, Rtos};
use rtport_core::drvloc::KeywordDb;
use rtport_core::kbdata;

use crate::error::{usage, CliResult};
use crate::io::read_text;

pub fn parse_kb(text: &str) -> CliResult<KnowledgeBase> {
    let kb: KnowledgeBase = toml::from_str(text).map_err(|e| usage(format!("knowledge base: {e}")))?;
    kb.validate().map_err(|e| usage(format!("knowledge base: {e}")))?;
    Ok(kb)
}

pub fn kb_to_toml(kb: &KnowledgeBase) -> String {
    toml::to_string(kb).expect("knowledge bases serialise")
}

pub fn parse_rtos(s: &str) -> CliResult<Rtos> {
    match s.to_ascii_lowercase().replace(['_', ' '], "-").as_str() {
        "vxworks" => Ok(Rtos::Vxworks),
        "rt-thread" | "rtthread" => Ok(Rtos::RtThread),
        "nuttx" => Ok(Rtos::Nuttx),
        "zephyr" => Ok(Rtos::Zephyr),
        other => Err(usage(format!("unknown RTOS `{other}`"))),
    }
}

/// The file at `path`, else the built-in knowledge base for `rtos`.
pub fn load_kb(path: Option<&Path>, rtos: Option<Rtos>) -> CliResult<KnowledgeBase> {
    match (path, rtos) {
        (Some(p), _) => parse_kb(&read_text(p)?),
        (None, Some(r)) => {
            kbdata::builtin_kb(r).ok_or_else(|| usage(format!("no built-in knowledge base for {r:?}; pass --kb")))
        }
        (None, None) => Err(usage("pass --kb or --rtos")),
    }
}

pub fn load_keywords(path: Option<&Path>) -> CliResult<KeywordDb> {
    match path {
        Some(p) => KeywordDb::parse(&read_text(p)?).map_err(|e| usage(format!("{}: {e}", p.display()))),
        None => Ok(kbdata::seed_keyword_db()),
    }
}
