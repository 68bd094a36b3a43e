use alloc::vec;
use alloc::vec::Vec;

use super::{Instr, InstrKind, IsaError, Operand};

fn rel32(b: &[u8]) -> i32 {
    i32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn need(bytes: &[u8], n: usize) -> Result<(), IsaError> {
    if bytes.len() < n {
        Err(IsaError::Truncated { need: n, have: bytes.len() })
    } else {
        Ok(())
    }
}

/// Decodes one instruction. Unknown opcodes become a one-byte `Other`.
pub fn decode(bytes: &[u8], pc: u32) -> Result<Instr, IsaError> {
    need(bytes, 1)?;
    let mk = |kind, length: usize, operand, cond| Instr {
        kind,
        addr: pc,
        length: length as u8,
        operand,
        cond,
        raw: bytes[..length].to_vec(),
    };
    let after = |len: usize, disp: i32| pc.wrapping_add(len as u32).wrapping_add(disp as u32);
    Ok(match bytes[0] {
        0x55 => mk(InstrKind::PushEbp, 1, Operand::None, 0),
        0x5D => mk(InstrKind::PopEbp, 1, Operand::None, 0),
        0xC3 => mk(InstrKind::Ret, 1, Operand::None, 0),
        0x90 => mk(InstrKind::Nop, 1, Operand::None, 0),
        0x8B if bytes.get(1) == Some(&0xEC) => mk(InstrKind::MovEbpEsp, 2, Operand::None, 0),
        0x89 if bytes.get(1) == Some(&0xE5) => mk(InstrKind::MovEbpEsp, 2, Operand::None, 0),
        0xE8 => {
            need(bytes, 5)?;
            mk(InstrKind::CallRel32, 5, Operand::Target(after(5, rel32(&bytes[1..]))), 0)
        }
        0xE9 => {
            need(bytes, 5)?;
            mk(InstrKind::NearJmpRel32, 5, Operand::Target(after(5, rel32(&bytes[1..]))), 0)
        }
        0xEB => {
            need(bytes, 2)?;
            mk(InstrKind::NearJmpRel8, 2, Operand::Target(after(2, bytes[1] as i8 as i32)), 0)
        }
        0x70..=0x7F => {
            need(bytes, 2)?;
            mk(InstrKind::JccRel8, 2, Operand::Target(after(2, bytes[1] as i8 as i32)), bytes[0] & 0xF)
        }
        0x0F if matches!(bytes.get(1), Some(0x80..=0x8F)) => {
            need(bytes, 6)?;
            mk(InstrKind::JccRel32, 6, Operand::Target(after(6, rel32(&bytes[2..]))), bytes[1] & 0xF)
        }
        0xEA => {
            need(bytes, 7)?;
            let target = u32::from_le_bytes([bytes[1], bytes[2], bytes[3], bytes[4]]);
            let selector = u16::from_le_bytes([bytes[5], bytes[6]]);
            mk(InstrKind::FarJmpAbs, 7, Operand::Far { target, selector }, 0)
        }
        0xFF if bytes.get(1) == Some(&0x25) => {
            need(bytes, 6)?;
            let addr = u32::from_le_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]);
            mk(InstrKind::JmpMemAbs, 6, Operand::Mem(addr), 0)
        }
        0x68 => {
            need(bytes, 5)?;
            let value = u32::from_le_bytes([bytes[1], bytes[2], bytes[3], bytes[4]]);
            mk(InstrKind::PushImm32, 5, Operand::Imm { reg: None, value }, 0)
        }
        op @ 0xB8..=0xBF => {
            need(bytes, 5)?;
            let value = u32::from_le_bytes([bytes[1], bytes[2], bytes[3], bytes[4]]);
            mk(InstrKind::MovRegImm32, 5, Operand::Imm { reg: Some(op - 0xB8), value }, 0)
        }
        _ => mk(InstrKind::Other, 1, Operand::None, 0),
    })
}

fn rel_from(pc: u32, len: u32, target: u32) -> i32 {
    target.wrapping_sub(pc.wrapping_add(len)) as i32
}

/// `jmp far selector:target`, opcode 0xEA: any 32-bit target is reachable.
pub fn encode_far_jump(target: u32, selector: u16) -> [u8; 7] {
    let t = target.to_le_bytes();
    let s = selector.to_le_bytes();
    [0xEA, t[0], t[1], t[2], t[3], s[0], s[1]]
}

/// `jmp rel32`. Wraps modulo 2^32, so it also reaches every address.
pub fn encode_near_jump(pc: u32, target: u32) -> [u8; 5] {
    let d = rel_from(pc, 5, target).to_le_bytes();
    [0xE9, d[0], d[1], d[2], d[3]]
}

pub fn encode_call(pc: u32, target: u32) -> [u8; 5] {
    let d = rel_from(pc, 5, target).to_le_bytes();
    [0xE8, d[0], d[1], d[2], d[3]]
}

/// `jcc rel32` with condition nibble `cond`.
pub fn encode_jcc(pc: u32, target: u32, cond: u8) -> [u8; 6] {
    let d = rel_from(pc, 6, target).to_le_bytes();
    [0x0F, 0x80 | (cond & 0xF), d[0], d[1], d[2], d[3]]
}

/// `jmp dword [addr]`.
pub fn encode_jmp_mem(addr: u32) -> [u8; 6] {
    let a = addr.to_le_bytes();
    [0xFF, 0x25, a[0], a[1], a[2], a[3]]
}

pub fn encode_mov_imm(reg: u8, value: u32) -> [u8; 5] {
    let v = value.to_le_bytes();
    [0xB8 + (reg & 7), v[0], v[1], v[2], v[3]]
}

pub const PROLOGUE: [u8; 3] = [0x55, 0x8B, 0xEC];
pub const EPILOGUE: [u8; 2] = [0x5D, 0xC3];

pub fn encode(instr: &Instr) -> Result<Vec<u8>, IsaError> {
    let pc = instr.addr;
    let t = instr.target();
    Ok(match (instr.kind, instr.operand) {
        (InstrKind::PushEbp, _) => vec![0x55],
        (InstrKind::PopEbp, _) => vec![0x5D],
        (InstrKind::Ret, _) => vec![0xC3],
        (InstrKind::Nop, _) => vec![0x90],
        // Two encodings exist; keep whichever the source used.
        (InstrKind::MovEbpEsp, _) => {
            if instr.raw.first() == Some(&0x89) {
                vec![0x89, 0xE5]
            } else {
                vec![0x8B, 0xEC]
            }
        }
        (InstrKind::CallRel32, _) => encode_call(pc, t.unwrap_or(0)).to_vec(),
        (InstrKind::NearJmpRel32, _) => encode_near_jump(pc, t.unwrap_or(0)).to_vec(),
        (InstrKind::NearJmpRel8, _) => vec![0xEB, rel_from(pc, 2, t.unwrap_or(0)) as u8],
        (InstrKind::JccRel8, _) => vec![0x70 | instr.cond, rel_from(pc, 2, t.unwrap_or(0)) as u8],
        (InstrKind::JccRel32, _) => encode_jcc(pc, t.unwrap_or(0), instr.cond).to_vec(),
        (InstrKind::FarJmpAbs, Operand::Far { target, selector }) => encode_far_jump(target, selector).to_vec(),
        (InstrKind::JmpMemAbs, Operand::Mem(a)) => encode_jmp_mem(a).to_vec(),
        (InstrKind::PushImm32, Operand::Imm { value, .. }) => {
            let v = value.to_le_bytes();
            vec![0x68, v[0], v[1], v[2], v[3]]
        }
        (InstrKind::MovRegImm32, Operand::Imm { reg: Some(r), value }) => encode_mov_imm(r, value).to_vec(),
        (InstrKind::Other, _) => instr.raw.clone(),
        (kind, _) => return Err(IsaError::Unencodable(kind)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn push_ebp() {
        let i = decode(&[0x55], 0).unwrap();
        assert_eq!(i.kind, InstrKind::PushEbp);
        assert_eq!(i.length, 1);
    }

    #[test]
    fn far_jump_bytes() {
        assert_eq!(encode_far_jump(0x0C00_0120, 0x0008), [0xEA, 0x20, 0x01, 0x00, 0x0C, 0x08, 0x00]);
        assert_eq!(encode_far_jump(0, 8), [0xEA, 0, 0, 0, 0, 0x08, 0]);
        assert_eq!(encode_far_jump(0xFFFF_FFFF, 8), [0xEA, 0xFF, 0xFF, 0xFF, 0xFF, 0x08, 0]);
        let i = decode(&[0xEA, 0x20, 0x01, 0x00, 0x0C, 0x08, 0x00], 0x1234).unwrap();
        assert_eq!(i.kind, InstrKind::FarJmpAbs);
        assert_eq!(i.operand, Operand::Far { target: 0x0C00_0120, selector: 8 });
        assert_eq!(i.length, 7);
    }

    #[test]
    fn jump_through_memory() {
        let b = encode_jmp_mem(0x0040_1000);
        let i = decode(&b, 0).unwrap();
        assert_eq!((i.kind, i.operand, i.length), (InstrKind::JmpMemAbs, Operand::Mem(0x0040_1000), 6));
        assert!(i.is_terminator());
        assert_eq!(encode(&i).unwrap(), b);
    }

    #[test]
    fn relative_targets() {
        let c = encode_call(0x1000, 0x2000);
        assert_eq!(decode(&c, 0x1000).unwrap().target(), Some(0x2000));
        let j = encode_jcc(0x1000, 0x0F00, 4);
        let d = decode(&j, 0x1000).unwrap();
        assert_eq!((d.kind, d.cond, d.target()), (InstrKind::JccRel32, 4, Some(0x0F00)));
        assert_eq!(decode(&encode_near_jump(0xFFFF_FFF0, 0x10), 0xFFFF_FFF0).unwrap().target(), Some(0x10));
    }

    #[test]
    fn unknown_and_truncated() {
        let i = decode(&[0x0F, 0x0B], 0).unwrap();
        assert_eq!((i.kind, i.length), (InstrKind::Other, 1));
        assert_eq!(decode(&[0xE8, 0, 0], 0).unwrap_err(), IsaError::Truncated { need: 5, have: 3 });
    }
}
