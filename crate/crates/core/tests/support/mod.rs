#![allow(dead_code)]

pub mod gradients;
pub mod invariants;
pub mod oracles;
pub mod pipeline;
