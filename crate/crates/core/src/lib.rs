//! Hierarchical mixture policies trained by constrained EM policy improvement
//! with retrace critics and multitask data sharing.

pub mod diffmath;
pub mod distributions;
pub mod policy;
pub mod critic;
pub mod replay;
pub mod improver;
pub mod envs;
