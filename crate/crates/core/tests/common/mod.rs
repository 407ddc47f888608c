//! Test-only oracles. Nothing here calls into the solver under test.
#![allow(dead_code)]

pub mod qp;
