//! Bounded interpreter over the redirection instruction subset. Used to
//! check that rewritten entries reach their targets with registers intact.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::image::{Arch, FirmwareImage};
use crate::isa::{self, arm, InstrKind, Operand, COND_AL};

pub const DEFAULT_BUDGET: u32 = 64;
pub const STACK_WINDOW: u32 = 0x1000;

const X86_ESP: usize = 4;
const X86_EBP: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Halt {
    /// Reached an address in the halt set.
    Target,
    Budget,
    /// Instruction outside the interpreted subset (or a conditional branch).
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Fault {
    #[error("fetch from unmapped address {0:#010x}")]
    UnmappedFetch(u32),
    #[error("unmapped data read at {0:#010x}")]
    UnmappedRead(u32),
    #[error("unsupported instruction at {0:#010x}")]
    UnsupportedInstr(u32),
    #[error("stack pointer {0:#010x} left the stack window")]
    StackOverflow(u32),
    #[error("no free address range for the stack window")]
    NoStackWindow,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MachineState {
    pub pc: u32,
    /// ARM r0-r15, or x86 eax, ecx, edx, ebx, esp, ebp, esi, edi in 0..8.
    pub regs: [u32; 16],
    pub steps: u32,
    pub halt: Option<Halt>,
    stack_base: u32,
    stack: Vec<u8>,
    arch: Arch,
}

impl MachineState {
    /// Fresh state with distinctive register values and an empty stack in
    /// the first free 4 KiB window below the top of the address space.
    pub fn initial(image: &FirmwareImage, entry: u32) -> Result<Self, Fault> {
        let stack_base = find_window(image).ok_or(Fault::NoStackWindow)?;
        let mut regs = [0u32; 16];
        for (i, r) in regs.iter_mut().enumerate() {
            *r = 0xA5A5_0000 | ((i as u32) << 8) | i as u32;
        }
        let sp = stack_base + STACK_WINDOW;
        match image.arch {
            Arch::Arm => {
                regs[arm::REG_SP as usize] = sp;
                regs[arm::REG_PC as usize] = entry;
            }
            Arch::X86 => {
                regs[X86_ESP] = sp;
                regs[8..].fill(0);
            }
        }
        Ok(MachineState {
            pc: entry,
            regs,
            steps: 0,
            halt: None,
            stack_base,
            stack: vec![0; STACK_WINDOW as usize],
            arch: image.arch,
        })
    }

    pub fn sp(&self) -> u32 {
        match self.arch {
            Arch::Arm => self.regs[arm::REG_SP as usize],
            Arch::X86 => self.regs[X86_ESP],
        }
    }

    fn set_sp(&mut self, v: u32) {
        match self.arch {
            Arch::Arm => self.regs[arm::REG_SP as usize] = v,
            Arch::X86 => self.regs[X86_ESP] = v,
        }
    }

    /// Word on top of the stack.
    pub fn stack_top(&self) -> Option<u32> {
        self.stack_word(self.sp()).ok()
    }

    fn stack_word(&self, addr: u32) -> Result<u32, Fault> {
        let off = addr.wrapping_sub(self.stack_base);
        if addr < self.stack_base || off > STACK_WINDOW - 4 {
            return Err(Fault::StackOverflow(addr));
        }
        let o = off as usize;
        Ok(u32::from_le_bytes([self.stack[o], self.stack[o + 1], self.stack[o + 2], self.stack[o + 3]]))
    }

    fn push(&mut self, v: u32) -> Result<(), Fault> {
        let sp = self.sp().wrapping_sub(4);
        let off = sp.wrapping_sub(self.stack_base);
        if sp < self.stack_base || off > STACK_WINDOW - 4 {
            return Err(Fault::StackOverflow(sp));
        }
        self.stack[off as usize..off as usize + 4].copy_from_slice(&v.to_le_bytes());
        self.set_sp(sp);
        Ok(())
    }

    fn pop(&mut self) -> Result<u32, Fault> {
        let sp = self.sp();
        let v = self.stack_word(sp)?;
        self.set_sp(sp.wrapping_add(4));
        Ok(v)
    }

    /// ARM register read as an operand; PC reads as the instruction
    /// address plus 8.
    fn arm_reg(&self, r: u8) -> u32 {
        if r == arm::REG_PC {
            self.pc.wrapping_add(8)
        } else {
            self.regs[r as usize]
        }
    }
}

fn find_window(image: &FirmwareImage) -> Option<u32> {
    let mut base: u32 = 0xFFFF_E000;
    loop {
        let end = base as u64 + STACK_WINDOW as u64;
        let clash = image.segments().iter().any(|s| !s.is_empty() && (s.start as u64) < end && (base as u64) < s.end());
        if !clash {
            return Some(base);
        }
        base = base.checked_sub(0x0100_0000)?;
    }
}

fn read_word(image: &FirmwareImage, st: &MachineState, addr: u32) -> Result<u32, Fault> {
    image.read_u32(addr).or_else(|_| st.stack_word(addr)).map_err(|_| Fault::UnmappedRead(addr))
}

/// Interprets from `entry` until a halt-set address, the budget, or an
/// uninterpreted instruction.
pub fn run(image: &FirmwareImage, entry: u32, budget: u32, halt_set: &BTreeSet<u32>) -> Result<MachineState, Fault> {
    let st = MachineState::initial(image, entry)?;
    run_from(image, st, budget, halt_set)
}

pub fn run_from(
    image: &FirmwareImage,
    mut st: MachineState,
    budget: u32,
    halt_set: &BTreeSet<u32>,
) -> Result<MachineState, Fault> {
    loop {
        if halt_set.contains(&st.pc) {
            st.halt = Some(Halt::Target);
            return Ok(st);
        }
        if st.steps >= budget {
            st.halt = Some(Halt::Budget);
            return Ok(st);
        }
        if !image.is_mapped(st.pc) {
            return Err(Fault::UnmappedFetch(st.pc));
        }
        match step(image, &mut st)? {
            true => st.steps += 1,
            false => {
                st.halt = Some(Halt::Other);
                return Ok(st);
            }
        }
    }
}

/// Executes one instruction; `false` means it is outside the subset.
fn step(image: &FirmwareImage, st: &mut MachineState) -> Result<bool, Fault> {
    let pc = st.pc;
    let want = match image.arch {
        Arch::X86 => 7,
        Arch::Arm => 4,
    };
    let mut buf = [0u8; 7];
    let mut n = 0;
    while n < want && image.read_into(pc.wrapping_add(n as u32), &mut buf[n..n + 1]).is_ok() {
        n += 1;
    }
    let ins = match isa::decode(image.arch, image.endianness, &buf[..n], pc) {
        Ok(i) => i,
        Err(_) => return Err(Fault::UnmappedFetch(pc.wrapping_add(n as u32))),
    };
    let next = pc.wrapping_add(ins.length as u32);
    if image.arch == Arch::Arm && ins.cond != COND_AL {
        return Ok(false);
    }
    match (ins.kind, ins.operand) {
        (InstrKind::FarJmpAbs | InstrKind::NearJmpRel32 | InstrKind::NearJmpRel8 | InstrKind::ArmB, _) => {
            st.pc = ins.target().ok_or(Fault::UnsupportedInstr(pc))?;
        }
        (InstrKind::JmpMemAbs, Operand::Mem(a)) => st.pc = read_word(image, st, a)?,
        (InstrKind::CallRel32, Operand::Target(t)) => {
            st.push(next)?;
            st.pc = t;
        }
        (InstrKind::PushEbp, _) => {
            st.push(st.regs[X86_EBP])?;
            st.pc = next;
        }
        (InstrKind::PopEbp, _) => {
            st.regs[X86_EBP] = st.pop()?;
            st.pc = next;
        }
        (InstrKind::MovEbpEsp, _) => {
            st.regs[X86_EBP] = st.regs[X86_ESP];
            st.pc = next;
        }
        (InstrKind::Ret, _) => st.pc = st.pop()?,
        (InstrKind::PushImm32, Operand::Imm { value, .. }) => {
            st.push(value)?;
            st.pc = next;
        }
        (InstrKind::MovRegImm32, Operand::Imm { reg: Some(r), value }) => {
            st.regs[r as usize] = value;
            st.pc = next;
        }
        (InstrKind::Nop, _) => st.pc = next,
        (InstrKind::ArmBl, Operand::Target(t)) => {
            st.regs[arm::REG_LR as usize] = next;
            st.pc = t;
        }
        (InstrKind::ArmBx | InstrKind::ArmBlx | InstrKind::ArmMovPcReg, Operand::Reg(r)) => {
            let dest = st.arm_reg(r);
            if ins.kind != InstrKind::ArmMovPcReg && dest & 1 != 0 {
                return Err(Fault::UnsupportedInstr(pc));
            }
            if ins.kind == InstrKind::ArmBlx {
                st.regs[arm::REG_LR as usize] = next;
            }
            st.pc = dest & !3;
        }
        (InstrKind::ArmLdrPcLiteral, Operand::Literal { addr, .. }) => {
            st.pc = read_word(image, st, addr)?;
        }
        (InstrKind::ArmLdrPcBased, Operand::Based { reg, offset }) => {
            st.pc = read_word(image, st, st.arm_reg(reg).wrapping_add(offset as u32))?;
        }
        (InstrKind::ArmLdrRegLiteral, Operand::Literal { reg, addr }) => {
            st.regs[reg as usize] = read_word(image, st, addr)?;
            st.pc = next;
        }
        (InstrKind::ArmPushReg, Operand::Reg(r)) => {
            let v = st.arm_reg(r);
            st.push(v)?;
            st.pc = next;
        }
        (InstrKind::ArmPopReg, Operand::Reg(r)) => {
            let v = st.pop()?;
            if r == arm::REG_PC {
                st.pc = v;
            } else {
                st.regs[r as usize] = v;
                st.pc = next;
            }
        }
        (InstrKind::ArmStmfdLr, Operand::RegList(list)) => {
            // Highest register ends up at the highest address.
            for r in (0..16u8).rev().filter(|r| list & (1 << r) != 0) {
                let v = st.arm_reg(r);
                st.push(v)?;
            }
            st.pc = next;
        }
        (InstrKind::ArmLdmfd, Operand::RegList(list)) => {
            let mut dest = next;
            for r in (0..16u8).filter(|r| list & (1 << r) != 0) {
                let v = st.pop()?;
                if r == arm::REG_PC {
                    dest = v;
                } else {
                    st.regs[r as usize] = v;
                }
            }
            st.pc = dest;
        }
        _ => return Ok(false),
    }
    if image.arch == Arch::Arm {
        st.regs[arm::REG_PC as usize] = st.pc;
    }
    Ok(true)
}

/// Outcome of checking one redirection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub reached: bool,
    pub steps: u32,
    /// Indices of general registers whose value changed on the way.
    pub clobbered: Vec<usize>,
    pub stack_balanced: bool,
    pub fault: Option<Fault>,
}

impl Verdict {
    pub fn passed(&self, max_steps: u32) -> bool {
        self.reached
            && self.steps <= max_steps
            && self.clobbered.is_empty()
            && self.stack_balanced
            && self.fault.is_none()
    }
}

/// Runs from `start` expecting to land on `target` with every general
/// register (and the stack pointer) as it started.
pub fn verify_redirect(image: &FirmwareImage, start: u32, target: u32, budget: u32) -> Verdict {
    match MachineState::initial(image, start) {
        Ok(init) => verify_redirect_from(image, init, target, budget),
        Err(f) => Verdict { reached: false, steps: 0, clobbered: Vec::new(), stack_balanced: false, fault: Some(f) },
    }
}

/// [`verify_redirect`] from a caller-prepared state, e.g. one with a
/// table pointer already in a register.
pub fn verify_redirect_from(image: &FirmwareImage, init: MachineState, target: u32, budget: u32) -> Verdict {
    let halt = BTreeSet::from([target]);
    let general = match image.arch {
        Arch::Arm => 0..13,
        Arch::X86 => 0..8,
    };
    match run_from(image, init.clone(), budget, &halt) {
        Ok(st) => Verdict {
            reached: st.halt == Some(Halt::Target),
            steps: st.steps,
            clobbered: general.filter(|&i| st.regs[i] != init.regs[i]).collect(),
            stack_balanced: st.sp() == init.sp(),
            fault: None,
        },
        Err(f) => Verdict { reached: false, steps: 0, clobbered: Vec::new(), stack_balanced: false, fault: Some(f) },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Endianness, Segment, SourceFormat};
    use crate::isa::x86;

    fn x86_image(code: Vec<u8>) -> FirmwareImage {
        FirmwareImage::new(
            Arch::X86,
            Endianness::Little,
            vec![Segment::code("text", 0x1000, code)],
            Some(0x1000),
            SourceFormat::Raw,
        )
        .unwrap()
    }

    #[test]
    fn far_jump_one_step() {
        let mut code = x86::encode_far_jump(0x1010, 8).to_vec();
        code.resize(0x20, 0x90);
        let img = x86_image(code);
        let st = run(&img, 0x1000, DEFAULT_BUDGET, &BTreeSet::from([0x1010])).unwrap();
        assert_eq!((st.pc, st.steps, st.halt), (0x1010, 1, Some(Halt::Target)));
    }

    #[test]
    fn push_ebp_budget_one() {
        let img = x86_image(vec![0x55, 0x8B, 0xEC, 0xCC]);
        let st = run(&img, 0x1000, 1, &BTreeSet::new()).unwrap();
        assert_eq!(st.halt, Some(Halt::Budget));
        assert_eq!(st.stack_top(), Some(st.regs[X86_EBP]));
        let st = run(&img, 0x1000, 64, &BTreeSet::new()).unwrap();
        assert_eq!(st.halt, Some(Halt::Other));
    }

    #[test]
    fn unmapped_fetch() {
        let img = x86_image(x86::encode_far_jump(0x9000_0000, 8).to_vec());
        assert_eq!(run(&img, 0x1000, 64, &BTreeSet::new()), Err(Fault::UnmappedFetch(0x9000_0000)));
    }

    #[test]
    fn arm_stub_preserves_r0() {
        let e = Endianness::Little;
        let mut code = arm::encode_indirect_entry(e, 0, 0x100C, 0x1000).unwrap().to_vec();
        code.extend_from_slice(&0x1020u32.to_le_bytes());
        code.resize(0x20, 0);
        code.extend_from_slice(&arm::pop_word(0).to_le_bytes());
        code.extend_from_slice(&0xE51F_F004u32.to_le_bytes());
        code.extend_from_slice(&0x1040u32.to_le_bytes());
        code.resize(0x44, 0);
        let img = FirmwareImage::new(
            Arch::Arm,
            e,
            vec![Segment::code("text", 0x1000, code)],
            Some(0x1000),
            SourceFormat::Raw,
        )
        .unwrap();
        let v = verify_redirect(&img, 0x1000, 0x1040, DEFAULT_BUDGET);
        assert!(v.passed(8), "{v:?}");
        assert_eq!(v.steps, 5);
    }

    #[test]
    fn arm_table_dispatch_through_register() {
        let e = Endianness::Little;
        let mut code = arm::ldr_pc_based_word(4, -8).unwrap().to_le_bytes().to_vec();
        code.resize(0x10, 0);
        code.extend_from_slice(&0x1020u32.to_le_bytes());
        code.resize(0x24, 0);
        let img = FirmwareImage::new(
            Arch::Arm,
            e,
            vec![Segment::code("text", 0x1000, code)],
            Some(0x1000),
            SourceFormat::Raw,
        )
        .unwrap();
        let mut st = MachineState::initial(&img, 0x1000).unwrap();
        st.regs[4] = 0x1018;
        let v = verify_redirect_from(&img, st, 0x1020, DEFAULT_BUDGET);
        assert!(v.passed(1), "{v:?}");
        let ins = isa::decode(Arch::Arm, e, &img.read(0x1000, 4).unwrap(), 0x1000).unwrap();
        assert_eq!(ins.operand, Operand::Based { reg: 4, offset: -8 });
        assert_eq!(isa::encode(Arch::Arm, e, &ins).unwrap(), ins.raw);
    }
}
