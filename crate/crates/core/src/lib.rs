//! Fairness-aware fine-tuning of a CLIP-style dual encoder without protected
//! attribute supervision.
//!
//! The crate is organized bottom-up: [`tensor`] and [`autodiff`] provide a
//! small reverse-mode engine, [`model`] the dual encoder and zero-shot
//! classifier, [`losses`] and [`reweight`] the training objectives,
//! [`trainer`] the optimization loop, and [`metrics`], [`cluster`] and
//! [`compare`] the evaluation side. Protected attributes live only on
//! [`data::Record`]; the trainer accepts [`data::TrainSet`], which has none.

pub mod autodiff;
pub mod cluster;
pub mod compare;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod reweight;
pub mod tensor;
pub mod trainer;
