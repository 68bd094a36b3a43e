use super::{Instr, InstrKind, IsaError, Operand, COND_AL};
use crate::image::Endianness;

pub const REG_SP: u8 = 13;
pub const REG_LR: u8 = 14;
pub const REG_PC: u8 = 15;

/// Largest magnitude a B/BL displacement may reach (exclusive): ±32 MiB.
pub const BRANCH_REACH: i64 = 1 << 25;
/// LDR literal immediate limit.
pub const LITERAL_REACH: i64 = 4095;

/// `mov r0, r0`
pub const NOP: u32 = 0xE1A0_0000;
/// `stmfd sp!, {r11, lr}`
pub const PUSH_FP_LR: u32 = 0xE92D_4800;
/// `ldmfd sp!, {r11, pc}`
pub const POP_FP_PC: u32 = 0xE8BD_8800;
/// `bx lr`
pub const BX_LR: u32 = 0xE12F_FF1E;

pub fn is_stmfd_lr(w: u32) -> bool {
    w & 0x0FFF_0000 == 0x092D_0000 && w & (1 << REG_LR) != 0 && w >> 28 != 0xF
}

fn sign_extend_24(v: u32) -> i32 {
    ((v << 8) as i32) >> 8
}

pub fn decode(endian: Endianness, bytes: &[u8], pc: u32) -> Result<Instr, IsaError> {
    if bytes.len() < 4 {
        return Err(IsaError::Truncated { need: 4, have: bytes.len() });
    }
    let w = endian.read_u32(bytes);
    let cond = (w >> 28) as u8;
    let mk = |kind, operand| Instr { kind, addr: pc, length: 4, operand, cond, raw: bytes[..4].to_vec() };
    let pc8 = pc.wrapping_add(8);

    if cond == 0xF {
        // BLX <imm>: always switches to Thumb.
        if w & 0x0E00_0000 == 0x0A00_0000 {
            let h = (w >> 24) & 1;
            let off = (sign_extend_24(w & 0x00FF_FFFF) << 2) as u32 | (h << 1);
            return Ok(mk(InstrKind::ArmBlx, Operand::Target(pc8.wrapping_add(off) | 1)));
        }
        return Ok(mk(InstrKind::Other, Operand::None));
    }
    if w & 0x0E00_0000 == 0x0A00_0000 {
        let off = (sign_extend_24(w & 0x00FF_FFFF) << 2) as u32;
        let kind = if w & (1 << 24) != 0 { InstrKind::ArmBl } else { InstrKind::ArmB };
        return Ok(mk(kind, Operand::Target(pc8.wrapping_add(off))));
    }
    if w & 0x0FFF_FFF0 == 0x012F_FF10 {
        return Ok(mk(InstrKind::ArmBx, Operand::Reg((w & 0xF) as u8)));
    }
    if w & 0x0FFF_FFF0 == 0x012F_FF30 {
        return Ok(mk(InstrKind::ArmBlx, Operand::Reg((w & 0xF) as u8)));
    }
    if w & 0x0FFF_FFF0 == 0x01A0_F000 {
        return Ok(mk(InstrKind::ArmMovPcReg, Operand::Reg((w & 0xF) as u8)));
    }
    // LDR rt, [pc, #+/-imm12] (offset addressing, no writeback, word)
    if w & 0x0F7F_0000 == 0x051F_0000 {
        let imm = w & 0xFFF;
        let addr = if w & (1 << 23) != 0 { pc8.wrapping_add(imm) } else { pc8.wrapping_sub(imm) };
        let rt = ((w >> 12) & 0xF) as u8;
        let kind = if rt == REG_PC { InstrKind::ArmLdrPcLiteral } else { InstrKind::ArmLdrRegLiteral };
        return Ok(mk(kind, Operand::Literal { reg: rt, addr }));
    }
    // LDR pc, [rn, #+/-imm12]
    if w & 0x0F70_F000 == 0x0510_F000 {
        let imm = (w & 0xFFF) as i32;
        let offset = if w & (1 << 23) != 0 { imm } else { -imm };
        return Ok(mk(InstrKind::ArmLdrPcBased, Operand::Based { reg: ((w >> 16) & 0xF) as u8, offset }));
    }
    // STR rt, [sp, #-4]!
    if w & 0x0FFF_0FFF == 0x052D_0004 {
        return Ok(mk(InstrKind::ArmPushReg, Operand::Reg(((w >> 12) & 0xF) as u8)));
    }
    // LDR rt, [sp], #4
    if w & 0x0FFF_0FFF == 0x049D_0004 {
        return Ok(mk(InstrKind::ArmPopReg, Operand::Reg(((w >> 12) & 0xF) as u8)));
    }
    if is_stmfd_lr(w) {
        return Ok(mk(InstrKind::ArmStmfdLr, Operand::RegList((w & 0xFFFF) as u16)));
    }
    if w & 0x0FFF_0000 == 0x08BD_0000 {
        return Ok(mk(InstrKind::ArmLdmfd, Operand::RegList((w & 0xFFFF) as u16)));
    }
    Ok(mk(InstrKind::Other, Operand::None))
}

fn check_aligned(addr: u32) -> Result<(), IsaError> {
    if addr & 1 != 0 {
        Err(IsaError::Thumb(addr))
    } else if addr & 3 != 0 {
        Err(IsaError::Misaligned(addr))
    } else {
        Ok(())
    }
}

/// Signed byte displacement a B/BL at `from` needs to reach `target`.
/// PC arithmetic wraps, so this is taken modulo 2^32.
pub fn branch_displacement(from: u32, target: u32) -> i64 {
    target.wrapping_sub(from).wrapping_sub(8) as i32 as i64
}

pub fn in_branch_range(from: u32, target: u32) -> bool {
    branch_displacement(from, target).abs() < BRANCH_REACH
}

/// Encodes B (or BL when `link`) as a host-order word.
pub fn branch_word(from: u32, target: u32, cond: u8, link: bool) -> Result<u32, IsaError> {
    check_aligned(from)?;
    check_aligned(target)?;
    let disp = branch_displacement(from, target);
    if disp.abs() >= BRANCH_REACH {
        return Err(IsaError::OutOfRange { from, disp });
    }
    let imm = ((disp >> 2) as u32) & 0x00FF_FFFF;
    Ok(((cond as u32) << 28) | 0x0A00_0000 | if link { 1 << 24 } else { 0 } | imm)
}

/// Unconditional `B target` at `from_pc`.
pub fn encode_b(endian: Endianness, from_pc: u32, target: u32) -> Result<[u8; 4], IsaError> {
    branch_word(from_pc, target, COND_AL, false).map(|w| endian.u32_bytes(w))
}

pub fn encode_bl(endian: Endianness, from_pc: u32, target: u32) -> Result<[u8; 4], IsaError> {
    branch_word(from_pc, target, COND_AL, true).map(|w| endian.u32_bytes(w))
}

/// `LDR rt, [pc, #off]` placed at `pc` reading the word at `literal`.
pub fn ldr_literal_word(rt: u8, pc: u32, literal: u32) -> Result<u32, IsaError> {
    let off = literal as i64 - pc as i64 - 8;
    if off.abs() > LITERAL_REACH {
        return Err(IsaError::LiteralOutOfRange { pc, literal });
    }
    let up = if off >= 0 { 1 << 23 } else { 0 };
    Ok(0xE51F_0000 | up | ((rt as u32 & 0xF) << 12) | off.unsigned_abs() as u32)
}

/// `str rt, [sp, #-4]!`
pub fn push_word(rt: u8) -> u32 {
    0xE52D_0004 | ((rt as u32 & 0xF) << 12)
}

/// `ldr rt, [sp], #4`
pub fn pop_word(rt: u8) -> u32 {
    0xE49D_0004 | ((rt as u32 & 0xF) << 12)
}

/// `mov pc, rm`
pub fn mov_pc_word(rm: u8) -> u32 {
    0xE1A0_F000 | (rm as u32 & 0xF)
}

/// Entry stub that reaches any address through a scratch register:
///
/// ```text
/// from_pc+0  push {reg}
/// from_pc+4  ldr  reg, [pc, #off]   ; word at literal_addr
/// from_pc+8  mov  pc, reg
/// ```
///
/// The caller stores the destination word at `literal_addr`.
pub fn encode_indirect_entry(
    endian: Endianness,
    reg: u8,
    literal_addr: u32,
    from_pc: u32,
) -> Result<[u8; 12], IsaError> {
    check_aligned(from_pc)?;
    if reg >= REG_SP {
        return Err(IsaError::Unencodable(InstrKind::ArmLdrRegLiteral));
    }
    let words = [push_word(reg), ldr_literal_word(reg, from_pc.wrapping_add(4), literal_addr)?, mov_pc_word(reg)];
    let mut out = [0u8; 12];
    for (i, w) in words.iter().enumerate() {
        out[i * 4..i * 4 + 4].copy_from_slice(&endian.u32_bytes(*w));
    }
    Ok(out)
}

/// `ldr pc, [reg, #offset]`, the usual way to call through a table slot.
pub fn ldr_pc_based_word(reg: u8, offset: i32) -> Result<u32, IsaError> {
    if reg >= REG_PC || offset.unsigned_abs() > 0xFFF {
        return Err(IsaError::Unencodable(InstrKind::ArmLdrPcBased));
    }
    let up = if offset >= 0 { 1 << 23 } else { 0 };
    Ok(0xE510_F000 | up | ((reg as u32) << 16) | offset.unsigned_abs())
}

/// Re-encodes a decoded ARM instruction as a host-order word, then to bytes.
pub fn encode(endian: Endianness, instr: &Instr) -> Result<[u8; 4], IsaError> {
    let cond = (instr.cond as u32) << 28;
    let pc = instr.addr;
    let w = match (instr.kind, instr.operand) {
        (InstrKind::ArmB, Operand::Target(t)) => branch_word(pc, t, instr.cond, false)?,
        (InstrKind::ArmBl, Operand::Target(t)) => branch_word(pc, t, instr.cond, true)?,
        (InstrKind::ArmBlx, Operand::Target(t)) => {
            let off = t.wrapping_sub(1).wrapping_sub(pc.wrapping_add(8));
            0xFA00_0000 | (((off >> 1) & 1) << 24) | ((off >> 2) & 0x00FF_FFFF)
        }
        (InstrKind::ArmBx, Operand::Reg(r)) => cond | 0x012F_FF10 | r as u32,
        (InstrKind::ArmBlx, Operand::Reg(r)) => cond | 0x012F_FF30 | r as u32,
        (InstrKind::ArmMovPcReg, Operand::Reg(r)) => cond | 0x01A0_F000 | r as u32,
        (InstrKind::ArmLdrPcLiteral | InstrKind::ArmLdrRegLiteral, Operand::Literal { reg, addr }) => {
            (ldr_literal_word(reg, pc, addr)? & 0x0FFF_FFFF) | cond
        }
        (InstrKind::ArmLdrPcBased, Operand::Based { reg, offset }) => {
            (ldr_pc_based_word(reg, offset)? & 0x0FFF_FFFF) | cond
        }
        (InstrKind::ArmPushReg, Operand::Reg(r)) => (push_word(r) & 0x0FFF_FFFF) | cond,
        (InstrKind::ArmPopReg, Operand::Reg(r)) => (pop_word(r) & 0x0FFF_FFFF) | cond,
        (InstrKind::ArmStmfdLr, Operand::RegList(l)) => cond | 0x092D_0000 | l as u32,
        (InstrKind::ArmLdmfd, Operand::RegList(l)) => cond | 0x08BD_0000 | l as u32,
        (InstrKind::Other, _) => endian.read_u32(&instr.raw),
        (kind, _) => return Err(IsaError::Unencodable(kind)),
    };
    Ok(endian.u32_bytes(w))
}
