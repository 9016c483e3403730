//! Shared test oracles. Everything here is independent of the code paths it
//! checks: finite differences, brute-force sorts and direct summations.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
