//! Property tests for patch placement, rewriting and the interpreter.

mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use common::port::{port, PortParams, MAX_STEPS};
use rtport_core::image::{Segment, SourceFormat};
use rtport_core::kbdata::{build_patch_object, Template, PATCHED_CATEGORIES};
use rtport_core::microvm;
use rtport_core::patchkit::{self, PAGE};
use rtport_core::rewrite::{ActionKind, PlanOptions};
use rtport_core::symrec::SymbolTable;
use rtport_core::{Arch, Endianness, FirmwareImage};

fn template() -> impl Strategy<Value = Template> {
    prop::sample::select(Template::ALL.to_vec())
}

fn options() -> impl Strategy<Value = PlanOptions> {
    (any::<bool>(), any::<bool>(), prop::option::of(any::<u16>()), 0u8..13)
        .prop_map(|(x86_near, arm_literal, selector, scratch)| PlanOptions { x86_near, arm_literal, selector, scratch })
}

fn externals(base: u32) -> std::collections::BTreeMap<String, u32> {
    ["malloc", "bcopy", "memcpy"].iter().enumerate().map(|(i, n)| (n.to_string(), base + 0x100 * i as u32)).collect()
}

// ------------------------------------------------------------- patchkit

proptest! {
    #[test]
    fn placement_clears_segments_heap_and_reserve(
        segs in prop::collection::vec((0u32..0x0100_0000, 1u32..0x4000), 1..6),
        heap in prop::option::of(0u32..0x0200_0000),
        reserve in 0u32..0x2000,
    ) {
        let mut img = FirmwareImage::new(Arch::X86, Endianness::Little, vec![], None, SourceFormat::Raw).unwrap();
        for (i, (start, len)) in segs.into_iter().enumerate() {
            let s = Segment::bss(&format!("s{i}"), start, len);
            // Overlapping picks are skipped rather than filtered up front.
            let _ = img.add_segment(s);
        }
        let c = patchkit::choose_base(&img, &SymbolTable::new(), None, heap, reserve);
        prop_assert_eq!(c.base as u64 % PAGE, 0);
        prop_assert!(c.base >= heap.unwrap_or(0));
        let below = c.base - reserve;
        prop_assert!(patchkit::check_no_overlap(&img, below, c.base as u64 + PAGE).is_ok());
    }

    #[test]
    fn resolve_is_deterministic_and_keeps_object_order(t in template(), page in 0x100u32..0x8000) {
        let (arch, e) = (t.arch(), t.endianness());
        let obj = patchkit::load_patch_object(&build_patch_object(arch, e, &PATCHED_CATEGORIES), arch, e).unwrap();
        let base = page * PAGE as u32;
        let ext = externals(base - 0x1000);
        let a = patchkit::resolve(&obj, base, &SymbolTable::new(), &ext).unwrap();
        let b = patchkit::resolve(&obj, base, &SymbolTable::new(), &ext).unwrap();
        prop_assert_eq!(&a, &b);
        let order: Vec<u32> = obj.sections.iter().map(|s| a.section_addresses[&s.name]).collect();
        prop_assert!(order.windows(2).all(|w| w[0] < w[1]), "{:?}", order);
        prop_assert_eq!(order[0], base);
        for s in &obj.sections {
            let at = a.section_addresses[&s.name];
            prop_assert_eq!(at % s.align.max(1), 0);
            prop_assert!(at as u64 + s.size as u64 <= a.end);
        }
    }
}

// -------------------------------------------------------------- rewrite

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ports_are_local_decodable_and_reach_their_targets(
        t in template(),
        seed in 0u64..1000,
        far in any::<bool>(),
        opts in options(),
        slots in any::<bool>(),
    ) {
        let p = port(PortParams { template: t, seed, far, options: opts, slots });
        prop_assert!(!p.plan.actions.is_empty());
        if let Err(e) = p.check_locality() {
            return Err(TestCaseError::fail(e));
        }
        let reloaded = p.reloaded();
        for a in &p.plan.actions {
            prop_assert_eq!(p.decoded_destination(&reloaded, a), Some(a.target), "{:?}", a);
            let expect_kind = match (t.arch(), a.kind) {
                (_, ActionKind::PointerSwap) => ActionKind::PointerSwap,
                (Arch::X86, _) => ActionKind::DirectX86,
                (Arch::Arm, _) if !far => ActionKind::DirectArmNear,
                (Arch::Arm, _) if opts.arm_literal => ActionKind::DirectArmLiteral,
                (Arch::Arm, _) => ActionKind::DirectArmTrampoline,
            };
            prop_assert_eq!(a.kind, expect_kind);
        }
        for (a, v) in p.verdicts() {
            prop_assert!(v.passed(MAX_STEPS), "{:?}: {:?}", a, v);
        }
        if !p.plan.area.is_empty() {
            prop_assert_eq!(p.plan.area.base + p.plan.area.len(), p.placement.base);
        }
    }
}

// -------------------------------------------------------------- microvm

fn random_image(arch: Arch, e: Endianness, code: Vec<u8>) -> FirmwareImage {
    FirmwareImage::new(arch, e, vec![Segment::code("text", 0x1000, code)], Some(0x1000), SourceFormat::Raw).unwrap()
}

proptest! {
    #[test]
    fn interpreter_is_deterministic_and_stays_in_the_map(
        words in prop::collection::vec(prop_oneof![
            any::<u32>(),
            (0u32..64).prop_map(|k| 0xEA00_0000 | k),
            (0u32..16).prop_map(|r| 0xE52D_0004 | (r << 12)),
            (0u32..16).prop_map(|r| 0xE49D_0004 | (r << 12)),
        ], 1..64),
        x86 in any::<bool>(),
        big in any::<bool>(),
    ) {
        let (arch, e) = if x86 { (Arch::X86, Endianness::Little) } else {
            (Arch::Arm, if big { Endianness::Big } else { Endianness::Little })
        };
        let code: Vec<u8> = words.iter().flat_map(|w| e.u32_bytes(*w)).collect();
        let img = random_image(arch, e, code);
        let halt = BTreeSet::from([0x0F00_0000]);
        let a = microvm::run(&img, 0x1000, microvm::DEFAULT_BUDGET, &halt);
        let b = microvm::run(&img, 0x1000, microvm::DEFAULT_BUDGET, &halt);
        prop_assert_eq!(&a, &b);
        match a {
            Ok(st) => {
                prop_assert!(st.steps <= microvm::DEFAULT_BUDGET);
                if st.halt == Some(microvm::Halt::Other) {
                    prop_assert!(img.is_mapped(st.pc));
                }
            }
            Err(microvm::Fault::UnmappedFetch(pc)) => prop_assert!(!img.is_mapped(pc)),
            Err(_) => {}
        }
    }
}

#[test]
fn locality_check_catches_stray_bytes() {
    let params =
        PortParams { template: Template::VxworksArm, seed: 5, far: true, options: PlanOptions::default(), slots: true };
    let clean = port(params);
    clean.check_locality().unwrap();
    // One byte in the code, one in the zero gap before the area.
    for addr in [clean.low() + 0x40, clean.plan.area.base - 0x100] {
        assert!(!clean.allowed(addr));
        let mut bad = port(params);
        let i = (addr - bad.low()) as usize;
        bad.flat[i] ^= 0x5A;
        assert!(bad.check_locality().is_err(), "{addr:#x}");
    }
}
