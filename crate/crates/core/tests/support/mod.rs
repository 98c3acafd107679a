#![allow(dead_code)]

pub mod grad_cases;
pub mod relax_cases;
pub mod decode_cases;
pub mod gaea_cases;
pub mod evo_cases;
