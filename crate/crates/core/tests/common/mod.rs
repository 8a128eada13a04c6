//! Oracles shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

pub mod convcheck;
pub mod gradcheck;
pub mod nets;
