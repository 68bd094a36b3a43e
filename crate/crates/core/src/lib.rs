#![no_std]

//! Core of the RTOS firmware porting toolkit.
//!
//! Everything here is pure computation over byte buffers: loading an image
//! into an addressed segment map, decoding the handful of x86/ARM
//! instructions the rewriter touches, recovering embedded symbol tables and
//! call graphs, matching anchor functions against a boot-sequence knowledge
//! base, linking relocatable patch objects and redirecting control flow into
//! them. IO, transports and the command line live in the `rtport` crate.

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod anchor;
pub mod drvloc;
pub mod elf;
pub mod fidelity;
pub mod funcgraph;
pub mod image;
pub mod ioproto;
pub mod isa;
pub mod kbdata;
pub mod microvm;
pub mod patchkit;
pub mod rewrite;
pub mod symrec;

pub use image::{Arch, Endianness, FirmwareImage, Segment, SegmentKind, SourceFormat};

/// Rounds `value` up to the next multiple of `align` (a power of two).
pub(crate) fn align_up(value: u64, align: u64) -> u64 {
    debug_assert!(align.is_power_of_two());
    (value + align - 1) & !(align - 1)
}

/// Printable ASCII, plus the whitespace that shows up in format strings.
pub(crate) fn is_printable(b: u8) -> bool {
    (0x20..0x7f).contains(&b) || b == b'\t' || b == b'\n' || b == b'\r'
}
