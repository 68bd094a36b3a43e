#![allow(dead_code)]

pub mod lld;
pub mod port;
pub mod traffic;
pub mod world;
