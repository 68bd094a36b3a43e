//! Redirection planning, in-image rewriting, trampolines, and the final
//! flat output.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::funcgraph::CallGraph;
use crate::image::{Arch, FirmwareImage, ImageError, Segment};
use crate::isa::{self, arm, x86, IsaError};
use crate::patchkit::PatchPlacement;

pub const SLOT_SIZE: u32 = 16;
/// Bytes a victim must span before any stub is written over it.
pub const MIN_VICTIM_LEN: u32 = 12;
/// Default scratch register saved by the entry stub and restored by the
/// slot.
pub const SCRATCH_REG: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ActionKind {
    DirectX86,
    DirectArmNear,
    DirectArmTrampoline,
    /// `ldr pc, [pc, #-4]` plus literal at the victim; no register or
    /// stack use.
    DirectArmLiteral,
    PointerSwap,
}

impl ActionKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::DirectX86 => "DIRECT_X86",
            Self::DirectArmNear => "DIRECT_ARM_NEAR",
            Self::DirectArmTrampoline => "DIRECT_ARM_TRAMPOLINE",
            Self::DirectArmLiteral => "DIRECT_ARM_LITERAL",
            Self::PointerSwap => "POINTER_SWAP",
        }
    }

    pub fn is_direct(self) -> bool {
        self != Self::PointerSwap
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActionKind {
    type Err = RewriteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Self::DirectX86, Self::DirectArmNear, Self::DirectArmTrampoline, Self::DirectArmLiteral, Self::PointerSwap]
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| RewriteError::UnknownKind(s.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RewriteAction {
    pub kind: ActionKind,
    pub victim: u32,
    pub target: u32,
    pub trampoline_slot: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrampolineArea {
    pub base: u32,
    /// Target of each slot, in slot order.
    pub targets: Vec<u32>,
    pub scratch: u8,
}

impl TrampolineArea {
    pub fn slot_addr(&self, i: usize) -> u32 {
        self.base + SLOT_SIZE * i as u32
    }

    pub fn len(&self) -> u32 {
        SLOT_SIZE * self.targets.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Slot `i`: `pop {scratch}; ldr pc, [pc, #-4]; .word target; .word 0`.
    pub fn bytes(&self, endian: crate::Endianness) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() as usize);
        for &t in &self.targets {
            for w in [arm::pop_word(self.scratch), LDR_PC_NEXT, t, 0] {
                out.extend_from_slice(&endian.u32_bytes(w));
            }
        }
        out
    }
}

/// `ldr pc, [pc, #-4]`: jumps through the word right after it.
pub const LDR_PC_NEXT: u32 = 0xE51F_F004;

/// How x86 and ARM victims are redirected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PlanOptions {
    /// Use `jmp rel32` instead of the far jump on x86.
    pub x86_near: bool,
    /// Use the register-free literal jump on ARM instead of trampolines.
    pub arm_literal: bool,
    pub selector: Option<u16>,
    /// ARM register borrowed by trampoline entry stubs (r0..r12).
    pub scratch: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub actions: Vec<RewriteAction>,
    pub area: TrampolineArea,
    pub options: PlanOptions,
}

/// A redirection the analyst (or the driver report) asked for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Request {
    /// Redirect the function at `victim` to `target`.
    Function { victim: u32, target: u32 },
    /// Replace the pointer stored at `slot` with `target`.
    Slot { slot: u32, target: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RewriteError {
    #[error("{0:#010x} is not a recovered function entry")]
    VictimNotFunction(u32),
    #[error("victim {victim:#010x} spans {len} bytes, {need} are needed")]
    VictimTooShort { victim: u32, len: u32, need: u32 },
    #[error("target {0:#010x} lies outside the placed patch")]
    TargetOutsidePatch(u32),
    #[error("pointer slot {0:#010x} is not a mapped, 4-aligned word")]
    BadSlot(u32),
    #[error("{kind} cannot be used for {victim:#010x} -> {target:#010x}")]
    KindMismatch { kind: ActionKind, victim: u32, target: u32 },
    #[error("r{0} cannot serve as the scratch register")]
    BadScratch(u8),
    #[error("unknown action kind `{0}`")]
    UnknownKind(String),
    #[error("trampoline area [{start:#010x}, {end:#x}) collides with the firmware")]
    AreaOverlap { start: u32, end: u64 },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Encoding(#[from] IsaError),
}

fn stub_len(kind: ActionKind) -> u32 {
    match kind {
        ActionKind::DirectX86 => 7,
        ActionKind::DirectArmNear => 4,
        ActionKind::DirectArmTrampoline => 16,
        ActionKind::DirectArmLiteral => 8,
        ActionKind::PointerSwap => 4,
    }
}

/// Decides the action kind for every request and lays out trampolines
/// directly below the patch base.
pub fn plan(
    image: &FirmwareImage,
    graph: &CallGraph,
    placement: &PatchPlacement,
    requests: &[Request],
    options: PlanOptions,
) -> Result<Plan, RewriteError> {
    let mut actions = Vec::with_capacity(requests.len());
    for r in requests {
        let (kind, victim, target) = match *r {
            Request::Slot { slot, target } => (ActionKind::PointerSwap, slot, target),
            Request::Function { victim, target } => {
                let kind = match image.arch {
                    Arch::X86 => ActionKind::DirectX86,
                    Arch::Arm if arm::in_branch_range(victim, target) => ActionKind::DirectArmNear,
                    Arch::Arm if options.arm_literal => ActionKind::DirectArmLiteral,
                    Arch::Arm => ActionKind::DirectArmTrampoline,
                };
                (kind, victim, target)
            }
        };
        actions.push(RewriteAction { kind, victim, target, trampoline_slot: None });
    }
    build(image, graph, placement, actions, options)
}

/// Validates explicit actions (for example read back from a plan file)
/// and assigns trampoline slots in order.
pub fn build(
    image: &FirmwareImage,
    graph: &CallGraph,
    placement: &PatchPlacement,
    mut actions: Vec<RewriteAction>,
    options: PlanOptions,
) -> Result<Plan, RewriteError> {
    if options.scratch >= arm::REG_SP {
        return Err(RewriteError::BadScratch(options.scratch));
    }
    let mut targets = Vec::new();
    for a in actions.iter_mut() {
        if !placement.contains(a.target) {
            return Err(RewriteError::TargetOutsidePatch(a.target));
        }
        let mismatch = RewriteError::KindMismatch { kind: a.kind, victim: a.victim, target: a.target };
        match (a.kind, image.arch) {
            (ActionKind::PointerSwap, _) => {
                if a.victim % 4 != 0 || image.read_u32(a.victim).is_err() {
                    return Err(RewriteError::BadSlot(a.victim));
                }
                continue;
            }
            (ActionKind::DirectX86, Arch::X86) => {}
            (ActionKind::DirectArmNear, Arch::Arm) if arm::in_branch_range(a.victim, a.target) => {}
            (ActionKind::DirectArmTrampoline | ActionKind::DirectArmLiteral, Arch::Arm) => {}
            _ => return Err(mismatch),
        }
        let f = graph.get(a.victim).ok_or(RewriteError::VictimNotFunction(a.victim))?;
        let need = stub_len(a.kind).max(MIN_VICTIM_LEN);
        if f.length < need {
            return Err(RewriteError::VictimTooShort { victim: a.victim, len: f.length, need });
        }
        if a.kind == ActionKind::DirectArmTrampoline {
            a.trampoline_slot = Some(targets.len());
            targets.push(a.target);
        }
    }
    let area =
        TrampolineArea { base: placement.base - SLOT_SIZE * targets.len() as u32, targets, scratch: options.scratch };
    if !area.is_empty() {
        let end = area.base as u64 + area.len() as u64;
        let clash =
            image.segments().iter().any(|s| !s.is_empty() && (s.start as u64) < end && (area.base as u64) < s.end());
        if clash {
            return Err(RewriteError::AreaOverlap { start: area.base, end });
        }
    }
    Ok(Plan { actions, area, options })
}

/// Bytes written at the victim for one action.
pub fn stub_bytes(image: &FirmwareImage, plan: &Plan, a: &RewriteAction) -> Result<Vec<u8>, RewriteError> {
    let e = image.endianness;
    Ok(match a.kind {
        ActionKind::DirectX86 if plan.options.x86_near => x86::encode_near_jump(a.victim, a.target).to_vec(),
        ActionKind::DirectX86 => {
            x86::encode_far_jump(a.target, plan.options.selector.unwrap_or(isa::DEFAULT_SELECTOR)).to_vec()
        }
        ActionKind::DirectArmNear => arm::encode_b(e, a.victim, a.target)?.to_vec(),
        ActionKind::DirectArmTrampoline => {
            let slot = plan.area.slot_addr(a.trampoline_slot.unwrap_or(0));
            let literal = a.victim + 12;
            let mut v = arm::encode_indirect_entry(e, plan.options.scratch, literal, a.victim)?.to_vec();
            v.extend_from_slice(&e.u32_bytes(slot));
            v
        }
        ActionKind::DirectArmLiteral => {
            let mut v = e.u32_bytes(LDR_PC_NEXT).to_vec();
            v.extend_from_slice(&e.u32_bytes(a.target));
            v
        }
        ActionKind::PointerSwap => e.u32_bytes(a.target).to_vec(),
    })
}

/// Writes every victim stub and swapped pointer into `image`.
pub fn apply(image: &mut FirmwareImage, plan: &Plan) -> Result<(), RewriteError> {
    // Encode everything first so a failure leaves the image untouched.
    let mut writes = Vec::with_capacity(plan.actions.len());
    for a in &plan.actions {
        let bytes = stub_bytes(image, plan, a)?;
        if !image.is_mapped(a.victim) || !image.is_mapped(a.victim + bytes.len() as u32 - 1) {
            return Err(ImageError::Unmapped { addr: a.victim, len: bytes.len() as u32 }.into());
        }
        writes.push((a.victim, bytes));
    }
    for (addr, bytes) in writes {
        image.write(addr, &bytes)?;
    }
    Ok(())
}

/// The rewritten image plus the trampoline area and the patch as mapped
/// segments, for verification and flat output.
pub fn materialize(
    image: &FirmwareImage,
    plan: &Plan,
    placement: &PatchPlacement,
) -> Result<FirmwareImage, RewriteError> {
    let mut out = image.clone();
    if !plan.area.is_empty() {
        out.add_segment(Segment::code("trampolines", plan.area.base, plan.area.bytes(image.endianness)))?;
    }
    if !placement.bytes.is_empty() {
        out.add_segment(Segment::code("patch", placement.base, placement.bytes.clone()))?;
    }
    Ok(out)
}

/// Flat ported image: firmware span, zero gap, trampolines, zero gap,
/// relocated patch.
pub fn emit_ported(
    image: &FirmwareImage,
    plan: &Plan,
    placement: &PatchPlacement,
    cap: u64,
) -> Result<Vec<u8>, RewriteError> {
    let start = image.min_start().unwrap_or(placement.base) as u64;
    let total = placement.end.saturating_sub(start);
    if total > cap {
        return Err(ImageError::SpanTooLarge { span: total, cap }.into());
    }
    let mut out = image.emit_flat(0, cap)?;
    if !plan.area.is_empty() {
        out.resize((plan.area.base as u64 - start) as usize, 0);
        out.extend_from_slice(&plan.area.bytes(image.endianness));
    }
    out.resize((placement.base as u64 - start) as usize, 0);
    out.extend_from_slice(&placement.bytes);
    Ok(out)
}

/// Human-readable summary of a plan and its placement.
pub fn report(plan: &Plan, placement: &PatchPlacement, names: &BTreeMap<u32, String>) -> String {
    let mut s = format!("patch base {:#010x} end {:#010x}\n", placement.base, placement.end);
    for (sec, addr) in &placement.section_addresses {
        s += &format!("section {sec} at {addr:#010x}\n");
    }
    for (name, addr) in &placement.resolved {
        s += &format!("external {name} = {addr:#010x}\n");
    }
    if !plan.area.is_empty() {
        s += &format!("trampolines {} at {:#010x}\n", plan.area.targets.len(), plan.area.base);
    }
    for a in &plan.actions {
        let name = names.get(&a.victim).map_or("", String::as_str);
        s += &format!("{} {:#010x} -> {:#010x}", a.kind, a.victim, a.target);
        if let Some(i) = a.trampoline_slot {
            s += &format!(" via slot {i} ({:#010x})", plan.area.slot_addr(i));
        }
        if !name.is_empty() {
            s += &format!(" [{name}]");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcgraph::FunctionRecord;
    use crate::image::{Endianness, SourceFormat};
    use crate::microvm;
    use alloc::vec;

    fn placement(base: u32, len: u32) -> PatchPlacement {
        PatchPlacement {
            base,
            end: base as u64 + len as u64,
            section_addresses: BTreeMap::new(),
            resolved: BTreeMap::new(),
            symbols: BTreeMap::new(),
            bytes: vec![0xE1; len as usize],
        }
    }

    fn graph(entries: &[(u32, u32)]) -> CallGraph {
        CallGraph::from_functions(entries.iter().map(|&(entry, length)| FunctionRecord {
            entry,
            length,
            ..Default::default()
        }))
    }

    #[test]
    fn arm_far_victim_gets_slot_zero() {
        let mut img = FirmwareImage::new(
            Arch::Arm,
            Endianness::Little,
            vec![Segment::code("text", 0x8000, vec![0; 0x100])],
            Some(0x8000),
            SourceFormat::Raw,
        )
        .unwrap();
        let g = graph(&[(0x8000, 0x40), (0x8040, 0x40)]);
        let p = placement(0x0C00_0000, 0x200);
        let reqs = [
            Request::Function { victim: 0x8000, target: 0x0C00_0000 },
            Request::Function { victim: 0x8040, target: 0x0C00_0100 },
        ];
        let plan = plan(&img, &g, &p, &reqs, PlanOptions::default()).unwrap();
        assert_eq!(plan.actions[0].kind, ActionKind::DirectArmTrampoline);
        assert_eq!(plan.actions[0].trampoline_slot, Some(0));
        assert_eq!(plan.area.base, 0x0C00_0000 - 32);
        apply(&mut img, &plan).unwrap();
        let m = materialize(&img, &plan, &p).unwrap();
        for a in &plan.actions {
            let v = microvm::verify_redirect(&m, a.victim, a.target, microvm::DEFAULT_BUDGET);
            assert!(v.passed(8), "{v:?}");
        }
        let flat = emit_ported(&img, &plan, &p, 1 << 30).unwrap();
        assert_eq!(flat.len() as u64, p.end - 0x8000);
        let at = (plan.area.base - 0x8000) as usize;
        assert_eq!(&flat[at..at + 32], &plan.area.bytes(Endianness::Little)[..]);
    }

    #[test]
    fn rejects_bad_requests() {
        let img = FirmwareImage::new(
            Arch::X86,
            Endianness::Little,
            vec![Segment::code("text", 0x1000, vec![0x90; 0x40])],
            Some(0x1000),
            SourceFormat::Raw,
        )
        .unwrap();
        let g = graph(&[(0x1000, 0x20), (0x1020, 8)]);
        let p = placement(0x2000, 0x10);
        let opts = PlanOptions::default();
        let r = |victim, target| [Request::Function { victim, target }];
        assert_eq!(plan(&img, &g, &p, &r(0x1004, 0x2000), opts), Err(RewriteError::VictimNotFunction(0x1004)));
        assert_eq!(plan(&img, &g, &p, &r(0x1000, 0x3000), opts), Err(RewriteError::TargetOutsidePatch(0x3000)));
        assert!(matches!(plan(&img, &g, &p, &r(0x1020, 0x2000), opts), Err(RewriteError::VictimTooShort { .. })));
        let swap = [Request::Slot { slot: 0x1002, target: 0x2000 }];
        assert_eq!(plan(&img, &g, &p, &swap, opts), Err(RewriteError::BadSlot(0x1002)));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [
            ActionKind::DirectX86,
            ActionKind::DirectArmNear,
            ActionKind::DirectArmTrampoline,
            ActionKind::DirectArmLiteral,
            ActionKind::PointerSwap,
        ] {
            assert_eq!(k.name().parse::<ActionKind>().unwrap(), k);
        }
    }
}
