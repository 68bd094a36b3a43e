//! Instruction codecs for exactly the x86 and ARM (A32) instructions the
//! rewriter emits, the recovery pass needs to split blocks, and the
//! micro-interpreter executes. Everything else decodes as [`InstrKind::Other`].

use alloc::vec::Vec;

use crate::image::{Arch, Endianness};

pub mod arm;
pub mod x86;

/// Default x86 far-jump code segment selector (flat code segment).
pub const DEFAULT_SELECTOR: u16 = 0x0008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InstrKind {
    // x86
    FarJmpAbs,
    /// `jmp dword [abs32]`: jump through a pointer in memory.
    JmpMemAbs,
    NearJmpRel32,
    NearJmpRel8,
    JccRel32,
    JccRel8,
    CallRel32,
    PushEbp,
    PopEbp,
    MovEbpEsp,
    Ret,
    PushImm32,
    MovRegImm32,
    Nop,
    // ARM
    ArmB,
    ArmBl,
    ArmBx,
    ArmBlx,
    ArmMovPcReg,
    ArmLdrPcLiteral,
    ArmLdrRegLiteral,
    /// `ldr pc, [rn, #+/-imm12]`: table dispatch through a base register.
    ArmLdrPcBased,
    ArmPushReg,
    ArmPopReg,
    ArmStmfdLr,
    ArmLdmfd,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operand {
    None,
    /// Absolute branch target, already resolved from the PC.
    Target(u32),
    Far {
        target: u32,
        selector: u16,
    },
    Reg(u8),
    /// Register loaded from (or PC loaded from) a PC-relative literal.
    Literal {
        reg: u8,
        addr: u32,
    },
    Imm {
        reg: Option<u8>,
        value: u32,
    },
    RegList(u16),
    /// Absolute memory operand.
    Mem(u32),
    /// Base register plus signed byte offset.
    Based {
        reg: u8,
        offset: i32,
    },
}

/// ARM condition field value for "always".
pub const COND_AL: u8 = 0xE;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instr {
    pub kind: InstrKind,
    pub addr: u32,
    pub length: u8,
    pub operand: Operand,
    /// ARM condition field, or the x86 Jcc condition nibble.
    pub cond: u8,
    pub raw: Vec<u8>,
}

impl Instr {
    pub fn target(&self) -> Option<u32> {
        match self.operand {
            Operand::Target(t) | Operand::Far { target: t, .. } => Some(t),
            _ => None,
        }
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self.kind, InstrKind::JccRel32 | InstrKind::JccRel8)
            || (matches!(self.kind, InstrKind::ArmB) && self.cond != COND_AL)
    }

    pub fn is_call(&self) -> bool {
        matches!(self.kind, InstrKind::CallRel32 | InstrKind::ArmBl | InstrKind::ArmBlx)
    }

    /// Ends a basic block with no fall-through.
    pub fn is_terminator(&self) -> bool {
        match self.kind {
            InstrKind::FarJmpAbs
            | InstrKind::JmpMemAbs
            | InstrKind::NearJmpRel32
            | InstrKind::NearJmpRel8
            | InstrKind::Ret => true,
            InstrKind::ArmB => self.cond == COND_AL,
            InstrKind::ArmBx | InstrKind::ArmMovPcReg | InstrKind::ArmLdrPcLiteral | InstrKind::ArmLdrPcBased => {
                self.cond == COND_AL
            }
            InstrKind::ArmPopReg => self.cond == COND_AL && self.operand == Operand::Reg(15),
            InstrKind::ArmLdmfd => {
                self.cond == COND_AL && matches!(self.operand, Operand::RegList(l) if l & 0x8000 != 0)
            }
            _ => false,
        }
    }

    /// Direct intra-procedural branch (jump or conditional jump) with a
    /// known target.
    pub fn branch_target(&self) -> Option<u32> {
        match self.kind {
            InstrKind::NearJmpRel32
            | InstrKind::NearJmpRel8
            | InstrKind::JccRel32
            | InstrKind::JccRel8
            | InstrKind::ArmB => self.target(),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IsaError {
    #[error("need {need} bytes to decode, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("branch displacement {disp} from {from:#010x} is out of range")]
    OutOfRange { from: u32, disp: i64 },
    #[error("address {0:#010x} is not 4-aligned")]
    Misaligned(u32),
    #[error("target {0:#010x} has the Thumb bit set; only ARM mode is supported")]
    Thumb(u32),
    #[error("literal at {literal:#010x} is out of LDR range from {pc:#010x}")]
    LiteralOutOfRange { pc: u32, literal: u32 },
    #[error("instruction kind {0:?} cannot be encoded")]
    Unencodable(InstrKind),
}

pub fn decode(arch: Arch, endian: Endianness, bytes: &[u8], pc: u32) -> Result<Instr, IsaError> {
    match arch {
        Arch::X86 => x86::decode(bytes, pc),
        Arch::Arm => arm::decode(endian, bytes, pc),
    }
}

/// Re-encodes a decoded instruction at its own address.
pub fn encode(arch: Arch, endian: Endianness, instr: &Instr) -> Result<Vec<u8>, IsaError> {
    match arch {
        Arch::X86 => x86::encode(instr),
        Arch::Arm => arm::encode(endian, instr).map(|w| w.to_vec()),
    }
}

/// Recognizes a function prologue: `push ebp; mov ebp, esp` on x86 and an
/// `STMFD sp!, {..., lr}` on ARM.
pub fn match_prologue(arch: Arch, endian: Endianness, bytes: &[u8]) -> bool {
    match arch {
        Arch::X86 => {
            bytes.len() >= 3
                && bytes[0] == 0x55
                && ((bytes[1] == 0x8B && bytes[2] == 0xEC) || (bytes[1] == 0x89 && bytes[2] == 0xE5))
        }
        Arch::Arm => bytes.len() >= 4 && arm::is_stmfd_lr(endian.read_u32(bytes)),
    }
}

/// Minimum bytes to attempt a decode at all.
pub fn min_len(arch: Arch) -> usize {
    match arch {
        Arch::X86 => 1,
        Arch::Arm => 4,
    }
}
