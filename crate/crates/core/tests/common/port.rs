//! One synthetic port, start to finish, with checks that only use the
//! manifest, raw bytes and the interpreter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtport_core::funcgraph::{self, CallGraph};
use rtport_core::image::{Segment, DEFAULT_SPAN_CAP};
use rtport_core::isa::{arm, x86, InstrKind, Operand};
use rtport_core::kbdata::{build_patch_object, build_synthetic, Manifest, SyntheticSpec, Template, PATCHED_CATEGORIES};
use rtport_core::microvm::{self, MachineState, Verdict};
use rtport_core::patchkit::{self, PatchPlacement, PAGE};
use rtport_core::rewrite::{self, ActionKind, Plan, PlanOptions, Request, RewriteAction, SLOT_SIZE};
use rtport_core::symrec::{self, DEFAULT_MAX_GAP, DEFAULT_MIN_RUN};
use rtport_core::{Arch, FirmwareImage};

pub const MAX_STEPS: u32 = 8;
/// Distance past the firmware that puts every ARM victim out of B range.
pub const FAR_GAP: u32 = 0x0210_0000;
/// Stub victims need room for the longest stub.
pub const VICTIM_ROOM: u32 = 16;

#[derive(Debug, Clone, Copy)]
pub struct PortParams {
    pub template: Template,
    pub seed: u64,
    pub far: bool,
    pub options: PlanOptions,
    /// Swap pointer-table words instead of rewriting init functions, for
    /// drivers reached through a table.
    pub slots: bool,
}

pub struct Port {
    pub params: PortParams,
    pub manifest: Manifest,
    pub image: FirmwareImage,
    pub graph: CallGraph,
    pub placement: PatchPlacement,
    pub plan: Plan,
    /// Flat ported bytes from the lowest firmware address to the patch end.
    pub flat: Vec<u8>,
}

pub fn port(params: PortParams) -> Port {
    let t = params.template;
    let (arch, e) = (t.arch(), t.endianness());
    let syn = build_synthetic(&SyntheticSpec::new(t, params.seed)).unwrap();
    let image = FirmwareImage::load_elf(&syn.bytes).unwrap();
    let symtab = symrec::recover(&image, &syn.manifest.layout, DEFAULT_MIN_RUN, DEFAULT_MAX_GAP).unwrap().table;
    let mut graph = funcgraph::analyze(&image, &[]);
    symrec::apply_symbols(&symtab, &mut graph);
    let patch = patchkit::load_patch_object(&build_patch_object(arch, e, &PATCHED_CATEGORIES), arch, e).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9);
    let targets: Vec<&String> = patch.functions.iter().collect();
    let mut wanted = Vec::new();
    for d in &syn.manifest.drivers {
        let f = targets[rng.gen_range(0..targets.len())];
        match d.slot {
            Some(slot) if params.slots => wanted.push((Request::Slot { slot, target: 0 }, f)),
            _ if graph.get(d.addr).is_some_and(|g| g.length >= VICTIM_ROOM) => {
                wanted.push((Request::Function { victim: d.addr, target: 0 }, f))
            }
            _ => {}
        }
    }
    let reserve = SLOT_SIZE * wanted.len() as u32;
    let near = patchkit::choose_base(&image, &symtab, None, Some(syn.manifest.heap_top), reserve).base;
    let base = if params.far { near + FAR_GAP + (params.seed as u32 % 64) * PAGE as u32 } else { near };
    let placement = patchkit::resolve(&patch, base, &symtab, &Default::default()).unwrap();
    let requests: Vec<Request> = wanted
        .iter()
        .map(|(r, f)| {
            let target = placement.symbols[f.as_str()];
            match *r {
                Request::Slot { slot, .. } => Request::Slot { slot, target },
                Request::Function { victim, .. } => Request::Function { victim, target },
            }
        })
        .collect();
    let plan = rewrite::plan(&image, &graph, &placement, &requests, params.options).unwrap();
    let mut applied = image.clone();
    rewrite::apply(&mut applied, &plan).unwrap();
    let flat = rewrite::emit_ported(&applied, &plan, &placement, DEFAULT_SPAN_CAP).unwrap();
    Port { params, manifest: syn.manifest, image, graph, placement, plan, flat }
}

/// Bytes each action may change at its victim, from the encodings alone.
pub fn stub_span(kind: ActionKind, options: &PlanOptions) -> u32 {
    match kind {
        ActionKind::DirectX86 if options.x86_near => 5,
        ActionKind::DirectX86 => 7,
        ActionKind::DirectArmNear | ActionKind::PointerSwap => 4,
        ActionKind::DirectArmLiteral => 8,
        ActionKind::DirectArmTrampoline => 16,
    }
}

impl Port {
    pub fn low(&self) -> u32 {
        self.image.min_start().unwrap()
    }

    /// The flat output loaded back as a raw image.
    pub fn reloaded(&self) -> FirmwareImage {
        FirmwareImage::load_raw(&self.flat, self.low(), self.image.arch, self.image.endianness).unwrap()
    }

    /// Addresses allowed to differ from the original flat layout.
    pub fn allowed(&self, addr: u32) -> bool {
        let area = &self.plan.area;
        self.plan.actions.iter().any(|a| addr.wrapping_sub(a.victim) < stub_span(a.kind, &self.plan.options))
            || (addr >= area.base && addr - area.base < area.len())
            || self.placement.contains(addr)
    }

    /// Every byte outside victims, trampolines and the patch matches the
    /// original; bytes past the firmware outside those areas are zero.
    pub fn check_locality(&self) -> Result<(), String> {
        let orig = self.image.emit_flat(0, DEFAULT_SPAN_CAP).unwrap();
        if self.flat.len() as u64 != self.placement.end - self.low() as u64 {
            return Err(format!("flat length {:#x} does not end at the patch end", self.flat.len()));
        }
        // Chunked so identical stretches cost a memcmp; far ports are tens of MiB.
        const CHUNK: usize = 4096;
        let zero = [0u8; CHUNK];
        for (k, now) in self.flat.chunks(CHUNK).enumerate() {
            let at = k * CHUNK;
            let was = orig.get(at..orig.len().min(at + now.len())).unwrap_or(&[]);
            if now[..was.len()] == *was && now[was.len()..] == zero[..now.len() - was.len()] {
                continue;
            }
            for (i, &b) in now.iter().enumerate() {
                let addr = self.low() + (at + i) as u32;
                let before = was.get(i).copied().unwrap_or(0);
                if b != before && !self.allowed(addr) {
                    return Err(format!("byte at {addr:#010x} changed {before:#04x} -> {b:#04x}"));
                }
            }
        }
        Ok(())
    }

    /// Decodes what now sits at each victim and returns the address it
    /// leads to, independently of the planner.
    pub fn decoded_destination(&self, img: &FirmwareImage, a: &RewriteAction) -> Option<u32> {
        let e = img.endianness;
        let bytes = img.read(a.victim, 16).ok()?;
        match a.kind {
            ActionKind::PointerSwap => img.read_u32(a.victim).ok(),
            ActionKind::DirectX86 => {
                let i = x86::decode(&bytes, a.victim).ok()?;
                matches!(i.kind, InstrKind::FarJmpAbs | InstrKind::NearJmpRel32).then(|| i.target())?
            }
            ActionKind::DirectArmNear => arm::decode(e, &bytes, a.victim).ok()?.target(),
            ActionKind::DirectArmLiteral => match arm::decode(e, &bytes, a.victim).ok()?.operand {
                Operand::Literal { reg: 15, addr } => img.read_u32(addr).ok(),
                _ => None,
            },
            ActionKind::DirectArmTrampoline => {
                // push; ldr scratch, =slot; mov pc, scratch -> slot: pop; ldr pc, [pc, #-4]
                let ldr = arm::decode(e, &bytes[4..], a.victim + 4).ok()?;
                let Operand::Literal { addr, .. } = ldr.operand else { return None };
                let slot = img.read_u32(addr).ok()?;
                let jump = arm::decode(e, &img.read(slot + 4, 4).ok()?, slot + 4).ok()?;
                match jump.operand {
                    Operand::Literal { reg: 15, addr } => img.read_u32(addr).ok(),
                    _ => None,
                }
            }
        }
    }

    /// Interprets each redirection in the reloaded flat image. Pointer
    /// swaps run through a dispatcher that jumps via the swapped word.
    pub fn verdicts(&self) -> Vec<(RewriteAction, Verdict)> {
        let mut img = self.reloaded();
        let disp = (self.placement.end as u32).next_multiple_of(PAGE as u32) + PAGE as u32;
        let code = match img.arch {
            Arch::X86 => vec![0x90; 8],
            Arch::Arm => vec![0; 8],
        };
        img.add_segment(Segment::code("dispatch", disp, code)).unwrap();
        self.plan
            .actions
            .iter()
            .map(|a| {
                let v = if a.kind == ActionKind::PointerSwap {
                    self.dispatch(&mut img, disp, a)
                } else {
                    microvm::verify_redirect(&img, a.victim, a.target, microvm::DEFAULT_BUDGET)
                };
                (*a, v)
            })
            .collect()
    }

    fn dispatch(&self, img: &mut FirmwareImage, at: u32, a: &RewriteAction) -> Verdict {
        const TABLE_REG: usize = 4;
        match img.arch {
            Arch::X86 => {
                img.write(at, &x86::encode_jmp_mem(a.victim)).unwrap();
                microvm::verify_redirect(img, at, a.target, microvm::DEFAULT_BUDGET)
            }
            Arch::Arm => {
                let w = arm::ldr_pc_based_word(TABLE_REG as u8, 0).unwrap();
                img.write(at, &img.endianness.u32_bytes(w)).unwrap();
                let mut st = MachineState::initial(img, at).unwrap();
                st.regs[TABLE_REG] = a.victim;
                microvm::verify_redirect_from(img, st, a.target, microvm::DEFAULT_BUDGET)
            }
        }
    }
}
