//! Adversarial robustness laboratory.
//!
//! A small reverse-mode autodiff engine with the layer set needed for a
//! VGG-style classifier and a convolutional denoising autoencoder, plus
//! FGSM/PGD attack generation, training loops with early stopping, and
//! evaluation/reporting helpers for robustness sweeps.
//!
//! Everything is deterministic given a seed: random state is ChaCha8
//! with one stream per purpose, and all kernels are single-threaded.

pub mod attacks;
pub mod data;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
