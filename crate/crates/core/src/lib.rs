//! Chest CT triage: slice-level vision-transformer classification and
//! patient-level voting, with the evaluation metrics used to report it.

pub mod autograd;
pub mod fsutil;
pub mod tensor;
pub mod vit;
pub mod imaging;
pub mod label;
pub mod dataset;
pub mod metrics;
pub mod aggregation;
pub mod inference;
pub mod training;
pub mod cli;
