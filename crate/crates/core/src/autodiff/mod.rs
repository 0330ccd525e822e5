//! Reverse-mode differentiation and finite-difference checking.

pub mod grad_check;
mod tape;

pub use grad_check::{grad_check, group_of, GradCheckConfig, GradCheckReport, GroupStats};
pub use tape::{Gradients, Tape, Var};
