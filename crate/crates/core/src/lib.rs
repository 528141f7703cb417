//! Mortality-risk prediction from chest CT: multi-channel Hounsfield coding,
//! a dual-stream residual network trained in two stages, a linear SVM over
//! clinical measurements, probability-level fusion, and a cross-validation
//! harness with ROC/AUC and paired hypothesis tests.

pub mod autodiff;
pub mod coding;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod model;
pub mod report;
pub mod selftest;
pub mod stats;
pub mod svm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
