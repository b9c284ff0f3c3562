//! Desk-scale laboratory for asking one question: does causal disentanglement
//! inside an image classifier buy adversarial robustness?
//!
//! The crate is organized bottom-up:
//!
//! * [`autograd`]: dense f64 tensors on a reverse-mode tape, plus SGD/Adam.
//! * [`metrics`]: distance correlation and the information-over-bias ratio,
//!   combined into five disentanglement measurements per trained model.
//! * [`attacks`]: FGSM, PGD, and Carlini-Wagner under l2/linf budgets.
//! * [`modelzoo`]: four small causal classifier variants sharing one
//!   convolutional backbone, each exposing its content/style signals.
//! * [`harness`]: datasets, training loops, robustness evaluation, Pearson
//!   correlation of measurements against robustness, and report files.
//!
//! Everything is seeded explicitly; a fixed master seed reproduces every
//! artifact byte for byte.

pub mod attacks;
pub mod autograd;
pub mod harness;
pub mod metrics;
pub mod modelzoo;
pub mod rng;
