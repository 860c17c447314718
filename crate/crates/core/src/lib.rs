//! Desk-scale laboratory for studying adversarial robustness of multi-label
//! spectrogram classifiers.
//!
//! The crate bundles everything needed to run the experiments end to end on a
//! laptop CPU: a minimal reverse-mode autodiff engine over dense `f64`
//! tensors ([`autodiff`]), two small convolutional classifier families with
//! linear and prototype heads ([`models`]), the asymmetric multi-label loss
//! and its consistency variant ([`losses`]), output-space and embedding-space
//! FGSM/PGD attacks ([`attacks`]), ordinary and TRADES-AWP adversarial
//! training ([`training`]), ranking and robustness metrics ([`metrics`]), a
//! deterministic synthetic chirp-spectrogram corpus with a controllable
//! train/test shift ([`synth`]), and a configuration-driven experiment runner
//! ([`harness`]).

pub mod attacks;
pub mod autodiff;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use tensor::Tensor;
