//! File access helpers shared by the stages.

use std::fs;
use std::path::{Path, PathBuf};

use rtport_core::{Arch, Endianness, FirmwareImage};

use crate::error::{usage, CliResult, StageContext};

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

/// Writes through a sibling temporary file so a reader never sees half an
/// artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = tmp_path(path);
    let r = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if r.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    r.map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

/// Overrides for images without a usable header.
#[derive(Debug, Clone, Copy, Default)]
pub struct ImageOpts {
    pub arch: Option<Arch>,
    pub base: Option<u32>,
    pub endian: Option<Endianness>,
}

/// ELF executables load from their program headers; anything else is a
/// raw dump and needs `--arch` and `--base`.
pub fn load_image(path: &Path, opts: ImageOpts) -> CliResult<FirmwareImage> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(b"\x7fELF") && opts.base.is_none() {
        return FirmwareImage::load_elf(&bytes).stage("load");
    }
    let (Some(arch), Some(base)) = (opts.arch, opts.base) else {
        return Err(usage(format!("{} is not an ELF executable; pass --arch and --base", path.display())));
    };
    FirmwareImage::load_raw(&bytes, base, arch, opts.endian.unwrap_or(Endianness::Little)).stage("load")
}
