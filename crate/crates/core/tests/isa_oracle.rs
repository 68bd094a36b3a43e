use iced_x86::{Code, Decoder, DecoderOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use yaxpeax_arch::{Decoder as _, U8Reader};
use yaxpeax_arm::armv7::{InstDecoder, Opcode, Operand};

use rtport_core::isa::{arm, x86, IsaError};
use rtport_core::Endianness;

fn iced(bytes: &[u8], ip: u32) -> iced_x86::Instruction {
    let mut d = Decoder::with_ip(32, bytes, ip as u64, DecoderOptions::NONE);
    let i = d.decode();
    assert_eq!(i.len(), bytes.len(), "iced consumed a different length for {bytes:02x?}");
    i
}

/// Target of an ARM B/BL word as yaxpeax reads it. yaxpeax takes
/// little-endian words, so big-endian bytes are swapped first.
fn yaxpeax_branch(bytes: [u8; 4], e: Endianness, pc: u32) -> Option<(Opcode, u32)> {
    let le = match e {
        Endianness::Little => bytes,
        Endianness::Big => [bytes[3], bytes[2], bytes[1], bytes[0]],
    };
    let ins = InstDecoder::armv7().decode(&mut U8Reader::new(&le)).ok()?;
    match ins.operands[0] {
        // yaxpeax reports sext24(imm24 + 2) words relative to the
        // instruction; the +2 is applied before sign extension and wraps
        // for imm24 >= 0x7FFFFE, so take imm24 back out and extend it here.
        Operand::BranchOffset(w) => {
            let imm = ((((w as u32).wrapping_sub(2) & 0x00FF_FFFF) << 8) as i32) >> 8;
            Some((ins.opcode, pc.wrapping_add(8).wrapping_add((imm as u32).wrapping_mul(4))))
        }
        _ => None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn far_jump_matches_iced(target: u32, selector: u16, ip: u32) {
        let b = x86::encode_far_jump(target, selector);
        prop_assert_eq!(b[0], 0xEA);
        prop_assert_eq!(&b[1..5], &target.to_le_bytes());
        prop_assert_eq!(&b[5..7], &selector.to_le_bytes());
        let i = iced(&b, ip);
        prop_assert_eq!(i.code(), Code::Jmp_ptr1632);
        prop_assert_eq!(i.far_branch32(), target);
        prop_assert_eq!(i.far_branch_selector(), selector);
    }

    #[test]
    fn near_jump_and_call_match_iced(pc: u32, target: u32) {
        let j = iced(&x86::encode_near_jump(pc, target), pc);
        prop_assert_eq!((j.code(), j.near_branch32()), (Code::Jmp_rel32_32, target));
        let c = iced(&x86::encode_call(pc, target), pc);
        prop_assert_eq!((c.code(), c.near_branch32()), (Code::Call_rel32_32, target));
    }

    #[test]
    fn memory_jump_matches_iced(addr: u32, pc: u32) {
        let i = iced(&x86::encode_jmp_mem(addr), pc);
        prop_assert_eq!(i.code(), Code::Jmp_rm32);
        prop_assert_eq!(i.memory_displacement32(), addr);
    }
}

#[test]
fn arm_branch_round_trips_through_yaxpeax() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let reach = arm::BRANCH_REACH;
    for n in 0..10_000 {
        let e = if n % 2 == 0 { Endianness::Little } else { Endianness::Big };
        let from = rng.gen::<u32>() & !3;
        // Displacement as the encoder sees it: target - (from + 8).
        let disp = rng.gen_range(-(reach / 4) + 1..reach / 4) * 4;
        let disp = if n % 1000 == 0 { reach - 4 } else { disp };
        let target = (from as i64 + 8 + disp) as u32;
        let b = arm::encode_b(e, from, target).unwrap();
        assert_eq!(yaxpeax_branch(b, e, from), Some((Opcode::B, target)), "from {from:#x} disp {disp}");
        let bl = arm::encode_bl(e, from, target).unwrap();
        assert_eq!(yaxpeax_branch(bl, e, from), Some((Opcode::BL, target)));
        let ours = arm::decode(e, &b, from).unwrap();
        assert_eq!(ours.target(), Some(target));
    }
}

#[test]
fn arm_branch_range_boundaries() {
    let r = arm::BRANCH_REACH;
    for from in [0x0010_0000u32, 0x4000_0000, 0x8000_0000] {
        for delta in (-16..=16).step_by(4) {
            for disp in [r + delta, -r + delta] {
                let target = (from as i64 + 8 + disp) as u32;
                let res = arm::encode_b(Endianness::Little, from, target);
                if disp.abs() >= r {
                    assert_eq!(res, Err(IsaError::OutOfRange { from, disp }), "disp {disp}");
                } else {
                    let b = res.unwrap_or_else(|e| panic!("disp {disp}: {e}"));
                    assert_eq!(yaxpeax_branch(b, Endianness::Little, from), Some((Opcode::B, target)));
                }
                assert_eq!(arm::in_branch_range(from, target), disp.abs() < r);
            }
        }
    }
}

#[test]
fn arm_branch_rejects_misaligned_and_thumb() {
    assert!(matches!(arm::encode_b(Endianness::Little, 0x1002, 0x2000), Err(IsaError::Misaligned(_))));
    assert!(arm::encode_b(Endianness::Little, 0x1000, 0x2001).is_err());
}
