//! Relocation oracle: compile generated C with clang, link it with ld.lld
//! at the same base as `patchkit::resolve`, and read the linked bytes back.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;

use object::{Object, ObjectSection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtport_core::patchkit::PatchObject;
use rtport_core::{Arch, Endianness};

pub const EXTERNALS: [&str; 3] = ["malloc", "bcopy", "memcpy"];

pub fn toolchain_available() -> bool {
    let ok = |c: &str| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success());
    ok("clang") && ok("ld.lld")
}

pub fn clang_target(arch: Arch, e: Endianness) -> &'static [&'static str] {
    match (arch, e) {
        (Arch::X86, _) => &["--target=i386-none-elf"],
        (Arch::Arm, Endianness::Little) => &["--target=armv7a-none-eabi", "-marm", "-mno-movt"],
        (Arch::Arm, Endianness::Big) => &["--target=armebv7a-none-eabi", "-marm", "-mno-movt"],
    }
}

/// A small C unit with calls to the externals and to local functions,
/// string literals, and a data table of function and string pointers.
/// Every string literal is unique so the linker has nothing to merge.
pub fn generate_source(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nf = rng.gen_range(2..7);
    let mut s = String::from(
        "extern void *malloc(unsigned);\n\
         extern void bcopy(const void *, void *, unsigned);\n\
         extern void *memcpy(void *, const void *, unsigned);\n",
    );
    let ng = rng.gen_range(1..4);
    for g in 0..ng {
        writeln!(s, "int g{g} = {};", rng.gen_range(1..1000)).unwrap();
    }
    for f in 0..nf {
        writeln!(s, "__attribute__((noinline)) void *f{f}(unsigned n);").unwrap();
    }
    for f in 0..nf {
        writeln!(s, "__attribute__((noinline)) void *f{f}(unsigned n) {{").unwrap();
        s += "    void *p = malloc(n + 4);\n";
        for k in 0..rng.gen_range(1..5) {
            match rng.gen_range(0..5) {
                0 => writeln!(s, "    bcopy(\"s{seed}_{f}_{k}\", p, n);").unwrap(),
                1 => writeln!(s, "    p = memcpy(p, &g{}, 4);", rng.gen_range(0..ng)).unwrap(),
                2 if f + 1 < nf => writeln!(s, "    if (n > {k}) p = f{}(n - 1);", rng.gen_range(f + 1..nf)).unwrap(),
                3 => writeln!(s, "    g{} += (int)n;", rng.gen_range(0..ng)).unwrap(),
                _ => writeln!(s, "    p = malloc(n * {});", k + 2).unwrap(),
            }
        }
        s += "    return p;\n}\n";
    }
    s += "void *table[] = {";
    for f in 0..nf {
        write!(s, " (void *)f{f},").unwrap();
    }
    writeln!(s, " \"t{seed}\", &g0, 0 }};").unwrap();
    s
}

pub fn compile(src: &str, arch: Arch, e: Endianness, dir: &Path, stem: &str) -> Vec<u8> {
    let c = dir.join(format!("{stem}.c"));
    let o = dir.join(format!("{stem}.o"));
    std::fs::write(&c, src).unwrap();
    let out = Command::new("clang")
        .args(clang_target(arch, e))
        .args(["-O1", "-ffreestanding", "-fno-builtin", "-fno-pic", "-fno-common", "-fno-unwind-tables"])
        .args(["-fno-asynchronous-unwind-tables", "-c"])
        .arg(&c)
        .arg("-o")
        .arg(&o)
        .output()
        .unwrap();
    assert!(out.status.success(), "clang failed: {}", String::from_utf8_lossy(&out.stderr));
    std::fs::read(o).unwrap()
}

/// Links `obj` with sections in object order starting at `base` and
/// returns the bytes of `[base, end)`, zero where nothing was placed.
pub fn link(
    obj_bytes: &[u8],
    patch: &PatchObject,
    base: u32,
    end: u64,
    externals: &BTreeMap<String, u32>,
    dir: &Path,
    stem: &str,
) -> Vec<u8> {
    let obj = dir.join(format!("{stem}.o"));
    std::fs::write(&obj, obj_bytes).unwrap();
    let mut script = format!("SECTIONS {{\n  . = {base:#x};\n");
    for s in &patch.sections {
        writeln!(script, "  {0} : {{ *({0}) }}", s.name).unwrap();
    }
    script += "  /DISCARD/ : { *(.ARM.exidx*) *(.ARM.extab*) }\n}\n";
    let ld = dir.join(format!("{stem}.ld"));
    std::fs::write(&ld, script).unwrap();
    let elf = dir.join(format!("{stem}.elf"));
    let mut cmd = Command::new("ld.lld");
    cmd.args(["-O0", "--no-relax", "-e", "0", "-T"]).arg(&ld).arg(&obj).arg("-o").arg(&elf);
    for (n, v) in externals {
        cmd.arg(format!("--defsym={n}={v:#x}"));
    }
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "ld.lld failed: {}", String::from_utf8_lossy(&out.stderr));
    let linked = std::fs::read(elf).unwrap();
    let f = object::File::parse(&*linked).unwrap();
    let mut flat = vec![0u8; (end - base as u64) as usize];
    for s in f.sections() {
        let (a, size) = (s.address(), s.size());
        if size == 0 || a < base as u64 || a + size > end {
            continue;
        }
        if let Ok(data) = s.data() {
            let at = (a - base as u64) as usize;
            flat[at..at + data.len()].copy_from_slice(data);
        }
    }
    flat
}
