//! Semi-supervised training of a small set-prediction detector with a
//! moving-average teacher and raw soft pseudo-labels.

pub mod augment;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod matching;
pub mod model;
pub mod rng;
pub mod teacher;
pub mod tensor;
