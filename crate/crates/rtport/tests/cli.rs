//! The binary end to end: exit codes, stage outputs, repeatability.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rtport(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtport")).args(args).output().expect("spawn rtport")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, template: &str, seed: u64) -> PathBuf {
    let out = dir.join(template);
    let o = rtport(&["gen-synthetic", "--template", template, "--seed", &seed.to_string(), "-o", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(code(&rtport(&["--help"])), 0);
    assert_eq!(code(&rtport(&["--version"])), 0);
    assert_eq!(code(&rtport(&["no-such-command"])), 1);
    assert_eq!(code(&rtport(&["verify", "x.bin"])), 1);
    let o = rtport(&["verify", "/nonexistent/x.bin", "--plan", "/nonexistent/plan.txt"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error 1 usage:"));
}

#[test]
fn pipeline_passes_and_repeats_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = generate(tmp.path(), "vxworks-arm", 3);
    let inputs = snapshot(&dir);
    let cfg = dir.join("pipeline.toml");
    let o = rtport(&["pipeline", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = snapshot(&dir.join("out"));
    let verify = &first.iter().find(|(n, _)| n == "verify.txt").unwrap().1;
    let verify = String::from_utf8_lossy(verify);
    assert!(verify.lines().last().unwrap().ends_with(" 0 failed"), "{verify}");
    assert!(!verify.contains("FAIL"));

    assert_eq!(code(&rtport(&["pipeline", "--config", s(&cfg)])), 0);
    assert_eq!(snapshot(&dir.join("out")), first);
    assert_eq!(snapshot(&dir), inputs, "inputs were modified");
}

#[test]
fn stages_by_hand_agree_with_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = generate(tmp.path(), "vxworks-x86", 11);
    assert_eq!(code(&rtport(&["pipeline", "--config", s(&dir.join("pipeline.toml"))])), 0);
    let cfg = fs::read_to_string(dir.join("pipeline.toml")).unwrap();
    let heap = cfg.lines().find_map(|l| l.strip_prefix("heap_top = ")).unwrap().trim_matches('"').to_string();
    let p = |n: &str| dir.join(n).to_string_lossy().into_owned();
    let run = |args: &[&str]| {
        let o = rtport(args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    run(&["recover-symbols", &p("firmware.elf"), "-o", &p("syms.txt")]);
    run(&["match-anchors", &p("firmware.elf"), "--rtos", "vxworks", "--symbols", &p("syms.txt"), "-o", &p("a.txt")]);
    run(&[
        "locate-drivers",
        &p("firmware.elf"),
        "--rtos",
        "vxworks",
        "--matches",
        &p("a.txt"),
        "--symbols",
        &p("syms.txt"),
        "-o",
        &p("d.txt"),
    ]);
    run(&[
        "plan-patch",
        &p("firmware.elf"),
        "--rtos",
        "vxworks",
        "--patch",
        &p("patch.o"),
        "--drivers",
        &p("d.txt"),
        "--matches",
        &p("a.txt"),
        "--symbols",
        &p("syms.txt"),
        "--heap-top",
        &heap,
        "-o",
        &p("plan.txt"),
    ]);
    run(&["apply-patch", &p("firmware.elf"), "--patch", &p("patch.o"), "--plan", &p("plan.txt"), "-o", &p("p.bin")]);
    run(&["verify", &p("p.bin"), "--plan", &p("plan.txt")]);

    let read = |a: &str| fs::read(dir.join(a)).unwrap();
    assert_eq!(read("syms.txt"), read("out/symbols.txt"));
    assert_eq!(read("d.txt"), read("out/drivers.txt"));
    assert_eq!(read("plan.txt"), read("out/plan.txt"));
    assert_eq!(read("p.bin"), read("out/ported.bin"));
}

#[test]
fn missing_kb_is_a_usage_error_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = generate(tmp.path(), "rtthread-arm", 0);
    let out = dir.join("anchors.txt");
    let o = rtport(&["match-anchors", s(&dir.join("firmware.elf")), "--kb", "/nonexistent/kb.toml", "-o", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
}

#[test]
fn broken_patch_object_is_an_analysis_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = generate(tmp.path(), "vxworks-x86", 1);
    fs::write(dir.join("patch.o"), b"\x7fELF not really").unwrap();
    let o = rtport(&["pipeline", "--config", s(&dir.join("pipeline.toml"))]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let err = fs::read_to_string(dir.join("out/error.txt")).unwrap();
    assert!(err.starts_with("error 2 plan-patch:"), "{err}");
    assert!(!dir.join("out/ported.bin").exists());
}

#[test]
fn mistargeted_redirect_fails_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = generate(tmp.path(), "vxworks-arm", 4);
    assert_eq!(code(&rtport(&["pipeline", "--config", s(&dir.join("pipeline.toml"))])), 0);
    let plan = fs::read_to_string(dir.join("out/plan.txt")).unwrap();
    // Claim the first direct action lands 8 bytes further into the patch.
    let mut moved = false;
    let bad: String = plan
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            if !moved && f.len() == 3 && f[0].starts_with("DIRECT") {
                moved = true;
                let t = u32::from_str_radix(f[2], 16).unwrap() + 8;
                format!("{} {} {t:08x}\n", f[0], f[1])
            } else {
                format!("{l}\n")
            }
        })
        .collect();
    assert!(moved);
    fs::write(dir.join("bad-plan.txt"), bad).unwrap();
    let o = rtport(&["verify", s(&dir.join("out/ported.bin")), "--plan", s(&dir.join("bad-plan.txt"))]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn compare_fidelity_reports_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("a.trace"), "1000\nenter\n1004\n1008\nexit\n2000\n").unwrap();
    fs::write(d.join("b.trace"), "0fff\nenter\n1004\n1008\nexit\n3000\n").unwrap();
    fs::write(d.join("c.trace"), "1000\nenter\n1004\n100c\nexit\n").unwrap();
    let mut mem = vec![0u8; 256];
    mem[17] = 5;
    fs::write(d.join("a.mem"), &mem).unwrap();
    mem[200] ^= 1;
    fs::write(d.join("b.mem"), &mem).unwrap();
    for m in ["a.mem.meta", "b.mem.meta"] {
        fs::write(d.join(m), "start=7ff000\n").unwrap();
    }
    let p = |n: &str| d.join(n).to_string_lossy().into_owned();

    // Only the enter..exit window is compared.
    let o = rtport(&["compare-fidelity", "--trace-a", &p("a.trace"), "--trace-b", &p("b.trace"), "--strict"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("trace equal true lcp 2"));

    let o = rtport(&["compare-fidelity", "--trace-a", &p("a.trace"), "--trace-b", &p("c.trace")]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("diverges-at 00001008"));

    let o = rtport(&["compare-fidelity", "--mem-a", &p("a.mem"), "--mem-b", &p("b.mem"), "--strict"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stdout).contains("first-difference 200"));

    assert_eq!(code(&rtport(&["compare-fidelity", "--trace-a", &p("a.trace")])), 1);
}

#[test]
fn inspect_writes_flat_image_and_exports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = generate(tmp.path(), "vxworks-armeb", 2);
    let p = |n: &str| dir.join(n).to_string_lossy().into_owned();
    let o = rtport(&[
        "inspect",
        &p("firmware.elf"),
        "--flat",
        &p("flat.bin"),
        "--fill",
        "0xff",
        "--graph",
        &p("g.txt"),
        "--features",
        &p("f.csv"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.join("f.csv")).unwrap();
    assert!(csv.starts_with("entry,length,name,bb,edges,callees,in_degree,strings"));
    let graph = fs::read_to_string(dir.join("g.txt")).unwrap();
    assert_eq!(graph.lines().count(), csv.lines().count() - 1);

    // The flat image loads back at the ELF's lowest address and reproduces itself.
    let flat = fs::read(dir.join("flat.bin")).unwrap();
    let manifest = fs::read_to_string(dir.join("manifest.txt")).unwrap();
    let code_start = manifest.lines().find_map(|l| l.strip_prefix("code ")).unwrap();
    let base = code_start.split_whitespace().next().unwrap();
    let o = rtport(&[
        "inspect",
        &p("flat.bin"),
        "--base",
        base,
        "--arch",
        "arm",
        "--endian",
        "be",
        "--flat",
        &p("again.bin"),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(dir.join("again.bin")).unwrap(), flat);
}
